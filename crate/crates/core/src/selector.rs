//! Edge selector: node embeddings to per-edge probabilities and the
//! complementary causal/spurious edge weightings.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{ensure, Result};
use crate::gin::{batch_features, batch_weights, GinConfig, GinEncoder};
use crate::graph::{Batch, Graph};
use crate::nn::{Fwd, Group, Mlp, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;

#[derive(Clone, Debug, PartialEq)]
pub struct Selector {
    pub encoder: GinEncoder,
    pub edge_mlp: Mlp,
    pub tau: f64,
}

/// Output of [`Selector::select`].
#[derive(Clone, Copy, Debug)]
pub struct Selection {
    pub logits: Var,
    pub probs: Var,
    /// Causal-view edge weights.
    pub w_c: Var,
    /// Spurious-view edge weights, `1 - w_c`.
    pub w_s: Var,
}

impl Selector {
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        config: GinConfig,
        tau: f64,
        rng: &mut Rng,
    ) -> Result<Selector> {
        ensure!(tau > 0.0, "selector temperature must be positive, got {}", tau);
        let encoder = GinEncoder::new(store, "selector.gin", Group::Selector, in_dim, config, rng)?;
        let h = config.hidden_dim;
        let edge_mlp = Mlp::new(store, "selector.edge_mlp", Group::Selector, &[2 * h, h, 1], rng);
        Ok(Selector {
            encoder,
            edge_mlp,
            tau,
        })
    }

    /// Per-edge logits averaged over both endpoint orders.
    pub fn edge_logits(&self, f: &mut Fwd, batch: &Batch, x: Var, rng: &mut Rng) -> Result<Var> {
        let ones = batch_weights(f, batch);
        let h = self.encoder.encode(f, batch, x, ones, rng)?;
        let hu = f.tape.gather_rows(h, &batch.src)?;
        let hv = f.tape.gather_rows(h, &batch.dst)?;
        let uv = f.tape.concat_last_dim(hu, hv)?;
        let vu = f.tape.concat_last_dim(hv, hu)?;
        let a = self.edge_mlp.forward(f, uv)?;
        let b = self.edge_mlp.forward(f, vu)?;
        let s = f.tape.add(a, b)?;
        let avg = f.tape.affine(s, 0.5, 0.0);
        f.tape.reshape(avg, &[batch.num_edges()])
    }

    /// Causal and spurious edge weights. Training draws relaxed Bernoulli
    /// samples; evaluation uses the noiseless probabilities.
    pub fn select(&self, f: &mut Fwd, batch: &Batch, x: Var, rng: &mut Rng) -> Result<Selection> {
        let logits = self.edge_logits(f, batch, x, rng)?;
        let probs = f.tape.sigmoid(logits);
        let w_c = if f.train {
            f.tape.gumbel_sigmoid(logits, self.tau, false, rng)?
        } else {
            probs
        };
        let w_s = f.tape.affine(w_c, -1.0, 1.0);
        Ok(Selection {
            logits,
            probs,
            w_c,
            w_s,
        })
    }

    /// Eval-mode edge probabilities of a batch on its stored features.
    pub fn edge_probs(&self, store: &ParamStore, batch: &Batch) -> Result<Vec<f64>> {
        let mut f = Fwd::new(store, false);
        let x = batch_features(&mut f, batch);
        let logits = self.edge_logits(&mut f, batch, x, &mut Rng::new(0))?;
        let p = f.tape.sigmoid(logits);
        Ok(f.tape.value(p).data().to_vec())
    }
}

/// Mean `KL(Bernoulli(p_e) ‖ Bernoulli(r))` over the selection's edges.
pub fn info_regularizer(f: &mut Fwd, sel: &Selection, r: f64) -> Result<Var> {
    f.tape.bernoulli_kl(sel.probs, r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMode {
    Threshold(f64),
    TopK(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Explanation {
    pub probs: Vec<f64>,
    /// Selected edge indices in ascending order.
    pub selected: Vec<usize>,
    pub warning: Option<String>,
}

/// Select edges by probability threshold or by rank.
pub fn explain_probs(probs: &[f64], mode: ExplainMode) -> Explanation {
    let mut warning = None;
    let mut selected: Vec<usize> = match mode {
        ExplainMode::Threshold(t) => (0..probs.len()).filter(|&e| probs[e] > t).collect(),
        ExplainMode::TopK(k) => {
            let k = if k > probs.len() {
                let msg = format!("top_k {k} exceeds edge count {}; clamped", probs.len());
                log::warn!("{msg}");
                warning = Some(msg);
                probs.len()
            } else {
                k
            };
            top_k_indices(probs, k)
        }
    };
    selected.sort_unstable();
    Explanation {
        probs: probs.to_vec(),
        selected,
        warning,
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn explain(sel: &Selector, store: &ParamStore, graph: &Graph, mode: ExplainMode) -> Result<Explanation> {
    let batch = Batch::new(&[graph])?;
    let probs = sel.edge_probs(store, &batch)?;
    Ok(explain_probs(&probs, mode))
}

/// DOT rendering: selected edges red, nodes touched by motif edges green.
pub fn to_dot(graph: &Graph, selected: &[usize]) -> String {
    let chosen: BTreeSet<usize> = selected.iter().copied().collect();
    let motif_nodes: BTreeSet<usize> = graph
        .edges
        .iter()
        .zip(&graph.motif_mask)
        .filter(|(_, &m)| m)
        .flat_map(|(&(u, v), _)| [u, v])
        .collect();
    let mut s = String::from("graph G {\n");
    for v in 0..graph.num_nodes {
        if motif_nodes.contains(&v) {
            let _ = writeln!(s, "  {v} [style=filled, fillcolor=green];");
        } else {
            let _ = writeln!(s, "  {v};");
        }
    }
    for (e, &(u, v)) in graph.edges.iter().enumerate() {
        if chosen.contains(&e) {
            let _ = writeln!(s, "  {u} -- {v} [color=red, penwidth=2];");
        } else {
            let _ = writeln!(s, "  {u} -- {v};");
        }
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn graph() -> Graph {
        Graph::new(
            4,
            1,
            vec![1.0, 0.5, 0.2, 0.9],
            vec![(0, 1), (1, 2), (2, 3), (0, 3)],
            0,
            0,
            vec![true, true, false, false],
        )
        .unwrap()
    }

    fn selector(store: &mut ParamStore) -> Selector {
        let cfg = GinConfig {
            num_layers: 2,
            hidden_dim: 4,
            dropout: 0.0,
            virtual_node: false,
            batch_norm: true,
            epsilon: 0.0,
        };
        Selector::new(store, 1, cfg, 1.0, &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn orientation_symmetric() {
        let mut store = ParamStore::new();
        let sel = selector(&mut store);
        let g = graph();
        let b = Batch::from_graphs(&[g.clone()]).unwrap();
        let p = sel.edge_probs(&store, &b).unwrap();
        let mut flipped = b.clone();
        flipped.src = b.dst.clone();
        flipped.dst = b.src.clone();
        let q = sel.edge_probs(&store, &flipped).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn complementary_views() {
        let mut store = ParamStore::new();
        let sel = selector(&mut store);
        let b = Batch::from_graphs(&[graph()]).unwrap();
        for train in [true, false] {
            let mut f = Fwd::new(&store, train);
            let x = batch_features(&mut f, &b);
            let s = sel.select(&mut f, &b, x, &mut Rng::new(9)).unwrap();
            let c = f.tape.value(s.w_c).data().to_vec();
            let sp = f.tape.value(s.w_s).data().to_vec();
            assert!(c.iter().zip(&sp).all(|(a, b)| a + b == 1.0));
        }
    }

    #[test]
    fn explain_edge_cases() {
        let p = [0.2, 0.9, 0.9, 0.1];
        assert_eq!(explain_probs(&p, ExplainMode::Threshold(0.0)).selected, vec![0, 1, 2, 3]);
        assert!(explain_probs(&p, ExplainMode::TopK(0)).selected.is_empty());
        assert_eq!(explain_probs(&p, ExplainMode::TopK(1)).selected, vec![1]);
        let clamped = explain_probs(&p, ExplainMode::TopK(9));
        assert_eq!(clamped.selected.len(), 4);
        assert!(clamped.warning.is_some());
    }

    #[test]
    fn dot_marks_selection() {
        let dot = to_dot(&graph(), &[0, 2]);
        assert_eq!(dot.matches("color=red").count(), 2);
        assert_eq!(dot.matches("fillcolor=green").count(), 3);
    }

    #[test]
    fn info_regularizer_zero_at_reference() {
        let store = ParamStore::new();
        let mut f = Fwd::new(&store, false);
        let p = f.tape.constant(Tensor::vector(vec![0.7, 0.7]));
        let sel = Selection {
            logits: p,
            probs: p,
            w_c: p,
            w_s: p,
        };
        let kl = info_regularizer(&mut f, &sel, 0.7).unwrap();
        assert!(f.tape.scalar(kl).abs() < 1e-12);
    }
}
