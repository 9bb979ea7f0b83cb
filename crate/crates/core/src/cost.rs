//! Training-unit (TU) compute cost. One TU is 100k updates of 12 layers at
//! hidden size 1024 with 1M-token batches; a frozen component costs half
//! (forward only). Arithmetic is exact; rendering rounds half up.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{Donor, FreezeTag, Init, Objective, TrainPlan};

pub type Tu = Ratio<i128>;

const REF_LAYERS: i128 = 12;
const REF_STEPS: i128 = 100_000;
const REF_HIDDEN: i128 = 1024;
const REF_BATCH_TOKENS: i128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageCost {
    pub stage: String,
    /// Cost carried over from a donor plan rather than computed here.
    pub inherited: bool,
    pub encoder_tu: Tu,
    pub decoder_tu: Tu,
    pub total_tu: Tu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TuCost {
    pub plan: String,
    pub entries: Vec<StageCost>,
    pub total: Tu,
}

fn component(layers: usize, frozen: bool, scale: Tu) -> Tu {
    let l = Tu::from_integer(layers as i128);
    let l = if frozen { l / 2 } else { l };
    l / REF_LAYERS * scale
}

/// Cost of a plan, with a donor plan's cost as a leading inherited entry.
pub fn tu_cost(plan: &TrainPlan) -> Result<TuCost> {
    let m = &plan.model;
    if m.encoder_layers + m.decoder_layers == 0 {
        return Err(Error::invalid(format!(
            "plan `{}` has zero layers",
            plan.name
        )));
    }
    let mut entries = Vec::new();
    if let Init::WarmStartEncoder(Donor::Plan(d)) | Init::ExtractEncoder(Donor::Plan(d)) =
        &plan.init
    {
        let donor = tu_cost(d)?;
        entries.push(StageCost {
            stage: format!("inherited:{}", donor.plan),
            inherited: true,
            encoder_tu: donor.entries.iter().map(|e| e.encoder_tu).sum(),
            decoder_tu: donor.entries.iter().map(|e| e.decoder_tu).sum(),
            total_tu: donor.total,
        });
    }
    for s in &plan.stages {
        let scale = Tu::new(s.steps as i128, REF_STEPS)
            * Tu::new(m.d_model as i128, REF_HIDDEN)
            * Tu::new(s.batch_tokens as i128, REF_BATCH_TOKENS);
        let enc_frozen = s.freeze.contains(&FreezeTag::Encoder);
        let dec_frozen = s.freeze.contains(&FreezeTag::Decoder);
        let encoder_tu = component(m.encoder_layers, enc_frozen, scale);
        let decoder_tu = match s.objective {
            Objective::Mlm => Tu::from_integer(0),
            Objective::Denoise(_) => component(m.decoder_layers, dec_frozen, scale),
        };
        entries.push(StageCost {
            stage: s.name.clone(),
            inherited: false,
            encoder_tu,
            decoder_tu,
            total_tu: encoder_tu + decoder_tu,
        });
    }
    let total = entries.iter().map(|e| e.total_tu).sum();
    Ok(TuCost {
        plan: plan.name.clone(),
        entries,
        total,
    })
}

/// Round half up to `decimals` places and format.
pub fn render(x: Tu, decimals: u32) -> String {
    let scale = 10i128.pow(decimals);
    let scaled = (x * scale + Tu::new(1, 2)).floor().to_integer();
    if decimals == 0 {
        return scaled.to_string();
    }
    let sign = if scaled < 0 { "-" } else { "" };
    let a = scaled.abs();
    format!(
        "{sign}{}.{:0width$}",
        a / scale,
        a % scale,
        width = decimals as usize
    )
}

pub fn to_f64(x: Tu) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Savings {
    pub plan: String,
    pub total: Tu,
    /// `1 - total / baseline`.
    pub savings: Tu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Comparison {
    pub baseline: Tu,
    pub candidates: Vec<Savings>,
}

/// Compares candidates to training an encoder and a seq2seq model separately.
pub fn compare_recipes(
    candidates: &[TrainPlan],
    baseline: (&TrainPlan, &TrainPlan),
) -> Result<Comparison> {
    let base = tu_cost(baseline.0)?.total + tu_cost(baseline.1)?.total;
    if base == Tu::from_integer(0) {
        return Err(Error::invalid("baseline cost is zero"));
    }
    let candidates = candidates
        .iter()
        .map(|p| {
            let total = tu_cost(p)?.total;
            Ok(Savings {
                plan: p.name.clone(),
                total,
                savings: Tu::from_integer(1) - total / base,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison {
        baseline: base,
        candidates,
    })
}

/// One machine-readable line of a cost report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub plan: String,
    pub stage: String,
    pub inherited: bool,
    pub encoder_tu: f64,
    pub decoder_tu: f64,
    pub total_tu: f64,
    /// Exact value as `numerator/denominator`.
    pub exact: String,
    pub rendered: String,
}

pub fn records(cost: &TuCost) -> Vec<CostRecord> {
    let line = |stage: &str, inherited, enc: Tu, dec: Tu, total: Tu| CostRecord {
        plan: cost.plan.clone(),
        stage: stage.to_string(),
        inherited,
        encoder_tu: to_f64(enc),
        decoder_tu: to_f64(dec),
        total_tu: to_f64(total),
        exact: format!("{}/{}", total.numer(), total.denom()),
        rendered: render(total, 1),
    };
    let mut out: Vec<CostRecord> = cost
        .entries
        .iter()
        .map(|e| {
            line(
                &e.stage,
                e.inherited,
                e.encoder_tu,
                e.decoder_tu,
                e.total_tu,
            )
        })
        .collect();
    let enc = cost.entries.iter().map(|e| e.encoder_tu).sum();
    let dec = cost.entries.iter().map(|e| e.decoder_tu).sum();
    out.push(line("total", false, enc, dec, cost.total));
    out
}

/// Text table with one row per plan: layers, updates per stack, and cost
/// written as inherited + own = total when a donor is involved.
pub fn render_table(plans: &[TrainPlan]) -> Result<String> {
    let mut rows = vec![[
        "Model".to_string(),
        "Enc".to_string(),
        "Dec".to_string(),
        "Enc updates".to_string(),
        "Dec updates".to_string(),
        "Cost (TU)".to_string(),
    ]];
    for p in plans {
        let c = tu_cost(p)?;
        let own: Tu = c
            .entries
            .iter()
            .filter(|e| !e.inherited)
            .map(|e| e.total_tu)
            .sum();
        let cost = match c.entries.iter().find(|e| e.inherited) {
            Some(inh) => format!(
                "{} + {} = {}",
                render(inh.total_tu, 1),
                render(own, 1),
                render(c.total, 1)
            ),
            None => render(c.total, 1),
        };
        let fmt_steps = |v: Vec<u64>| {
            if v.is_empty() {
                "0".to_string()
            } else {
                v.iter()
                    .map(|s| short_steps(*s))
                    .collect::<Vec<_>>()
                    .join(" + ")
            }
        };
        let enc_steps: Vec<u64> = p
            .stages
            .iter()
            .filter(|s| !s.freeze.contains(&FreezeTag::Encoder))
            .map(|s| s.steps)
            .collect();
        let dec_steps: Vec<u64> = p
            .stages
            .iter()
            .filter(|s| matches!(s.objective, Objective::Denoise(_)))
            .map(|s| s.steps)
            .collect();
        rows.push([
            p.name.clone(),
            p.model.encoder_layers.to_string(),
            p.model.decoder_layers.to_string(),
            fmt_steps(enc_steps),
            fmt_steps(dec_steps),
            cost,
        ]);
    }
    let widths: Vec<usize> = (0..6)
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}

fn short_steps(s: u64) -> String {
    if s >= 1000 && s.is_multiple_of(1000) {
        format!("{}k", s / 1000)
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_rounds_half_up() {
        assert_eq!(render(Tu::new(35, 6), 1), "5.8");
        assert_eq!(render(Tu::new(65, 12), 1), "5.4");
        assert_eq!(render(Tu::new(1, 20), 1), "0.1");
        assert_eq!(render(Tu::new(4, 15) * 100, 0), "27");
        assert_eq!(render(Tu::new(1, 6) * 100, 0), "17");
        assert_eq!(render(Tu::from_integer(11), 1), "11.0");
    }
}
