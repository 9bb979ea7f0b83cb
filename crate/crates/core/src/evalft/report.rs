use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One evaluation result for a (task, language, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub language: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub language: String,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and std across seeds for every (task, language, metric), sorted by key.
pub fn aggregate(records: &[MetricRecord]) -> Vec<Summary> {
    let mut groups: BTreeMap<(&str, &str, &str), Vec<f64>> = BTreeMap::new();
    for r in records {
        for (m, &v) in &r.metrics {
            groups.entry((&r.task, &r.language, m)).or_default().push(v);
        }
    }
    groups
        .into_iter()
        .map(|((task, language, metric), xs)| {
            let (mean, std) = mean_std(&xs);
            Summary {
                task: task.to_string(),
                language: language.to_string(),
                metric: metric.to_string(),
                runs: xs.len(),
                mean,
                std,
            }
        })
        .collect()
}
