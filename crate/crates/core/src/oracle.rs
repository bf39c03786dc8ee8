//! Exhaustive check of the independence characterization of the causal
//! subgraph on a fully enumerable universe.
//!
//! For every outcome and every subset of its edges, the pattern indicator
//! `[pattern ⊆ G]` is tabulated against the environment and the label over
//! all outcomes, and the plug-in mutual information decides independence
//! exactly.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::plugin_mi;
use crate::micro::MicroUniverse;

/// Largest edge count whose subsets are enumerated (2^12 subsets).
pub const MAX_ENUMERATED_EDGES: u32 = 12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Counterexample {
    pub outcome: usize,
    pub subset: Vec<String>,
    pub causal: Vec<String>,
    pub mi_env: f64,
    pub mi_label_complement: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub outcomes: usize,
    pub structural_outcomes: usize,
    pub subsets_checked: usize,
    /// Subsets independent of the environment that are not inside the
    /// causal edges, or causal subsets that depend on it.
    pub env_counterexamples: Vec<Counterexample>,
    /// Subsets other than the causal edges that satisfy both independence
    /// constraints, or the causal edges failing either.
    pub joint_counterexamples: Vec<Counterexample>,
    /// Environment-independent subsets carrying more label information than
    /// the causal edges.
    pub label_info_counterexamples: Vec<Counterexample>,
}

impl OracleReport {
    pub fn counterexamples(&self) -> usize {
        self.env_counterexamples.len() + self.joint_counterexamples.len() + self.label_info_counterexamples.len()
    }

    pub fn passed(&self) -> bool {
        self.counterexamples() == 0
    }
}

/// Joint counts of a pattern indicator against a discrete variable.
fn table(u: &MicroUniverse, pattern: u32, var: impl Fn(usize) -> usize, levels: usize) -> Vec<Vec<u64>> {
    let mut t = vec![vec![0u64; 2]; levels];
    for (i, o) in u.outcomes.iter().enumerate() {
        let present = usize::from(o.edges & pattern == pattern);
        t[var(i)][present] += o.weight;
    }
    t
}

/// Enumerate every subset of every outcome's edge set.
pub fn oracle_check(u: &MicroUniverse) -> Result<OracleReport> {
    for (i, o) in u.outcomes.iter().enumerate() {
        if o.edges.count_ones() > MAX_ENUMERATED_EDGES {
            return Err(Error::config(format!(
                "outcome {i} has {} edges; enumeration is limited to {MAX_ENUMERATED_EDGES}",
                o.edges.count_ones()
            )));
        }
    }
    let mi_env = |p: u32| plugin_mi(&table(u, p, |i| u.outcomes[i].env, u.num_envs));
    let mi_label = |p: u32| plugin_mi(&table(u, p, |i| u.outcomes[i].label, u.num_labels));
    let mut report = OracleReport {
        outcomes: u.outcomes.len(),
        structural_outcomes: u.structural_outcomes(),
        subsets_checked: 0,
        env_counterexamples: Vec::new(),
        joint_counterexamples: Vec::new(),
        label_info_counterexamples: Vec::new(),
    };
    for (i, o) in u.outcomes.iter().enumerate() {
        let causal_label = mi_label(o.causal)?;
        let mut sub = o.edges;
        loop {
            let e = mi_env(sub)?;
            let l_comp = mi_label(o.edges & !sub)?;
            let inside = sub & !o.causal == 0;
            let record = |reason: &str| Counterexample {
                outcome: i,
                subset: u.edge_names(sub),
                causal: u.edge_names(o.causal),
                mi_env: e,
                mi_label_complement: l_comp,
                reason: reason.to_string(),
            };
            if (e == 0.0) != inside {
                report.env_counterexamples.push(record(if inside {
                    "causal subset depends on the environment"
                } else {
                    "non-causal subset is independent of the environment"
                }));
            }
            let feasible = e == 0.0 && l_comp == 0.0;
            if feasible != (sub == o.causal) {
                report.joint_counterexamples.push(record(if feasible {
                    "a non-causal subset satisfies both constraints"
                } else {
                    "the causal subset violates a constraint"
                }));
            }
            if e == 0.0 && mi_label(sub)? > causal_label {
                report
                    .label_info_counterexamples
                    .push(record("environment-independent subset beats the causal edges"));
            }
            report.subsets_checked += 1;
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & o.edges;
        }
    }
    Ok(report)
}
