use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    owner: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named parameters with shared storage for tied names.
///
/// Every name resolves to exactly one slot. A slot is created by
/// [`insert`](Self::insert) under its owner name; [`tie`](Self::tie) adds
/// aliases. Trainability lives on the slot, so it is uniform within a tie
/// group by construction.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    names: BTreeMap<String, usize>,
}

/// Equal when every name resolves to an equal slot; slot order is ignored.
impl PartialEq for ParameterStore {
    fn eq(&self, other: &Self) -> bool {
        self.names.len() == other.names.len()
            && self.names.iter().all(|(n, &a)| {
                other
                    .names
                    .get(n)
                    .is_some_and(|&b| self.slots[a] == other.slots[b])
            })
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` already exists")));
        }
        self.names.insert(name.clone(), self.slots.len());
        self.slots.push(Slot {
            owner: name,
            tensor,
            trainable: true,
        });
        Ok(())
    }

    /// Makes `alias` another name for the storage behind `existing`.
    pub fn tie(&mut self, alias: impl Into<String>, existing: &str) -> Result<()> {
        let alias = alias.into();
        let slot = self.slot_id(existing)?;
        if self.names.contains_key(&alias) {
            return Err(Error::invalid(format!(
                "parameter `{alias}` already exists"
            )));
        }
        self.names.insert(alias, slot);
        Ok(())
    }

    fn slot_id(&self, name: &str) -> Result<usize> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).map(|&s| &self.slots[s].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.get(name).map(|&s| &mut self.slots[s].tensor)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces the values behind `name` (and all its aliases).
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.slot_id(name)?;
        let current = &self.slots[slot].tensor;
        if current.shape() != tensor.shape() {
            return Err(Error::ParamMismatch(vec![format!(
                "{name}: expected {:?}, got {:?}",
                current.shape(),
                tensor.shape()
            )]));
        }
        self.slots[slot].tensor = tensor;
        Ok(())
    }

    pub fn owner(&self, name: &str) -> Option<&str> {
        self.names.get(name).map(|&s| self.slots[s].owner.as_str())
    }

    /// Stable identifier of the storage behind `name`.
    pub fn storage_id(&self, name: &str) -> Option<usize> {
        self.names.get(name).copied()
    }

    pub fn same_storage(&self, a: &str, b: &str) -> bool {
        match (self.names.get(a), self.names.get(b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.names
            .get(name)
            .is_some_and(|&s| self.slots[s].trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let slot = self.slot_id(name)?;
        self.slots[slot].trainable = trainable;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for slot in &mut self.slots {
            slot.trainable = trainable;
        }
    }

    /// All names (owners and aliases) in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    /// Owner names in sorted order, one per storage slot.
    pub fn owners(&self) -> impl Iterator<Item = &str> {
        self.names
            .iter()
            .filter(|(n, &s)| self.slots[s].owner == **n)
            .map(|(n, _)| n.as_str())
    }

    pub fn trainable_owners(&self) -> impl Iterator<Item = &str> {
        self.owners().filter(|n| self.is_trainable(n))
    }

    /// Sorted aliases (excluding the owner) of the slot owned by `owner`.
    pub fn aliases(&self, owner: &str) -> Vec<&str> {
        let Some(&slot) = self.names.get(owner) else {
            return Vec::new();
        };
        self.names
            .iter()
            .filter(|(n, &s)| s == slot && n.as_str() != self.slots[slot].owner)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Groups of two or more names sharing storage, each sorted.
    pub fn tie_groups(&self) -> Vec<Vec<String>> {
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (n, &s) in &self.names {
            groups.entry(s).or_default().push(n.clone());
        }
        let mut out: Vec<Vec<String>> = groups.into_values().filter(|g| g.len() > 1).collect();
        out.sort();
        out
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn num_values(&self) -> usize {
        self.slots.iter().map(|s| s.tensor.numel()).sum()
    }

    /// A copy containing only names accepted by `keep`, preserving ties among
    /// kept names. A slot whose owner is dropped is re-owned by its first kept alias.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParameterStore {
        let mut out = ParameterStore::new();
        let mut remap: BTreeMap<usize, String> = BTreeMap::new();
        let mut ordered: Vec<(&String, usize)> = self.names.iter().map(|(n, &s)| (n, s)).collect();
        // owners first so a kept owner keeps ownership
        ordered.sort_by_key(|(n, s)| (self.slots[*s].owner != **n, (*n).clone()));
        for (name, slot) in ordered {
            if !keep(name) {
                continue;
            }
            match remap.get(&slot) {
                Some(owner) => out.tie(name.clone(), owner).expect("owner inserted"),
                None => {
                    out.insert(name.clone(), self.slots[slot].tensor.clone())
                        .expect("names are unique");
                    out.set_trainable(name, self.slots[slot].trainable)
                        .expect("just inserted");
                    remap.insert(slot, name.clone());
                }
            }
        }
        out
    }
}
