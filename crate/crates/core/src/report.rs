//! Versioned JSON reports and the `mean(std)` table format.

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{ensure, Result};
use crate::metrics::{EdgeScore, FeatureProbeResult, ProbeResult};
use crate::train::Selected;

pub const REPORT_SCHEMA: &str = "leci-report/1";
pub const EVAL_SCHEMA: &str = "leci-eval/1";
pub const RANKING_SCHEMA: &str = "leci-ranking/1";

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    ensure!(!values.is_empty(), "mean of an empty list");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Accuracies as percentages, `"89.44(1.52)"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2}({:.2})", 100.0 * mean, 100.0 * std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    /// Percentages in the `mean(std)` format.
    pub formatted: String,
    pub n: usize,
}

impl Stat {
    /// Summary of the present values; `None` when there are none.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<Stat> {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let (mean, std) = mean_std(&v).ok()?;
        Some(Stat {
            mean,
            std,
            formatted: format_mean_std(mean, std),
            n: v.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub by_ood_val: Selected,
    pub by_id_val: Selected,
    pub epochs_run: usize,
    /// Checkpoint of the ood_val-selected model, relative to the report.
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: Vec<SeedRun>,
    pub ood_test_by_ood_val: Option<Stat>,
    pub ood_test_by_id_val: Option<Stat>,
    pub id_val_by_id_val: Option<Stat>,
}

impl MethodSummary {
    pub fn new(method: Method, runs: Vec<SeedRun>) -> MethodSummary {
        MethodSummary {
            method,
            ood_test_by_ood_val: Stat::of(runs.iter().map(|r| r.by_ood_val.ood_test_acc)),
            ood_test_by_id_val: Stat::of(runs.iter().map(|r| r.by_id_val.ood_test_acc)),
            id_val_by_id_val: Stat::of(runs.iter().map(|r| r.by_id_val.id_val_acc)),
            runs,
        }
    }
}

/// `report.json` of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema: String,
    /// Resolved configuration as `key = value` pairs.
    pub config: Vec<(String, String)>,
    pub methods: Vec<MethodSummary>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn new(config: Vec<(String, String)>, methods: Vec<MethodSummary>, wall_seconds: f64) -> TrainReport {
        TrainReport {
            schema: REPORT_SCHEMA.into(),
            config,
            methods,
            wall_seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub split: String,
    pub accuracy: f64,
    pub num_graphs: usize,
}

/// `report.json` of `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub method: String,
    pub accuracy: Vec<SplitAccuracy>,
    pub edge_selection: Option<EdgeScore>,
    pub random_selector_f1: Option<f64>,
    pub probes: Vec<ProbeResult>,
    pub feature_disc: Option<FeatureProbeResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPoint {
    pub rank: usize,
    pub directory: String,
    pub assignment: Vec<(String, String)>,
    /// Mean ood_val accuracy of the selected epochs (the ranking key).
    pub ood_val: Option<f64>,
    pub ood_test: Option<Stat>,
}

/// `ranking.json` of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub schema: String,
    pub method: Method,
    pub points: Vec<RankedPoint>,
}

impl Ranking {
    /// Rank by mean ood_val, best first; ties and missing values keep grid order.
    pub fn new(method: Method, mut points: Vec<RankedPoint>) -> Ranking {
        points.sort_by(|a, b| {
            let key = |p: &RankedPoint| p.ood_val.unwrap_or(f64::NEG_INFINITY);
            key(b).total_cmp(&key(a))
        });
        for (i, p) in points.iter_mut().enumerate() {
            p.rank = i + 1;
        }
        Ranking {
            schema: RANKING_SCHEMA.into(),
            method,
            points,
        }
    }
}
