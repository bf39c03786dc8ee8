//! GIN message passing with scalar edge weights and an optional virtual node.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::Batch;
use crate::nn::{BatchNorm, Fwd, Group, Linear, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GinConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub virtual_node: bool,
    /// Batch normalization inside and after every layer MLP.
    pub batch_norm: bool,
    /// Self-loop weight: each layer aggregates `(1 + epsilon)·h_v + Σ w_uv·h_u`.
    #[serde(default)]
    pub epsilon: f64,
}

impl Default for GinConfig {
    fn default() -> Self {
        GinConfig {
            num_layers: 3,
            hidden_dim: 32,
            dropout: 0.5,
            virtual_node: false,
            batch_norm: true,
            epsilon: 0.0,
        }
    }
}

impl GinConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_layers >= 1, "GIN needs at least one layer");
        ensure!(self.hidden_dim >= 1, "GIN hidden dimension must be positive");
        ensure!(self.epsilon.is_finite(), "GIN epsilon must be finite");
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            "dropout {} not in [0,1)",
            self.dropout
        );
        Ok(())
    }
}

/// One GIN layer: `Linear → [BN] → ReLU → Linear → [BN]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GinLayer {
    pub lin1: Linear,
    pub norm1: Option<BatchNorm>,
    pub lin2: Linear,
    pub norm2: Option<BatchNorm>,
}

impl GinLayer {
    fn forward(&self, f: &mut Fwd, z: Var) -> Result<Var> {
        let mut h = self.lin1.forward(f, z)?;
        if let Some(bn) = &self.norm1 {
            h = bn.forward(f, h)?;
        }
        h = f.tape.relu(h);
        h = self.lin2.forward(f, h)?;
        if let Some(bn) = &self.norm2 {
            h = bn.forward(f, h)?;
        }
        Ok(h)
    }
}

/// Stack of GIN layers `h ← MLP((1 + ε)·h + Σ_u w_uv·h_u)`.
///
/// The virtual node is an extra per-graph node with zero input features,
/// joined to every node of its graph by weight-1 edges. It is dropped from
/// the returned embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GinEncoder {
    pub config: GinConfig,
    pub in_dim: usize,
    pub layers: Vec<GinLayer>,
}

impl GinEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        in_dim: usize,
        config: GinConfig,
        rng: &mut Rng,
    ) -> Result<GinEncoder> {
        config.validate()?;
        ensure!(in_dim >= 1, "GIN input dimension must be positive");
        let h = config.hidden_dim;
        let layers = (0..config.num_layers)
            .map(|i| {
                let d = if i == 0 { in_dim } else { h };
                let p = format!("{name}.layer{i}");
                let norm = |store: &mut ParamStore, tag: &str| {
                    config
                        .batch_norm
                        .then(|| BatchNorm::new(store, &format!("{p}.{tag}"), group, h))
                };
                let lin1 = Linear::new(store, &format!("{p}.lin1"), group, d, h, rng);
                let norm1 = norm(store, "norm1");
                let lin2 = Linear::new(store, &format!("{p}.lin2"), group, h, h, rng);
                let norm2 = norm(store, "norm2");
                GinLayer {
                    lin1,
                    norm1,
                    lin2,
                    norm2,
                }
            })
            .collect();
        Ok(GinEncoder {
            config,
            in_dim,
            layers,
        })
    }

    /// Node embeddings (`num_nodes × hidden_dim`) for node features `x`.
    pub fn encode(&self, f: &mut Fwd, batch: &Batch, x: Var, edge_weight: Var, rng: &mut Rng) -> Result<Var> {
        let w = f.tape.value(edge_weight);
        ensure!(
            w.shape() == [batch.num_edges()],
            "expected {} edge weights, got shape {:?}",
            batch.num_edges(),
            w.shape()
        );
        if w.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("edge weights are not finite".into()));
        }
        ensure!(
            w.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "edge weights must lie in [0,1]"
        );
        let xs = f.tape.value(x).shape();
        ensure!(
            xs == [batch.num_nodes, self.in_dim],
            "node features have shape {:?}, expected [{}, {}]",
            xs,
            batch.num_nodes,
            self.in_dim
        );
        let n = batch.num_nodes;
        let virt = if self.config.virtual_node {
            let vn_src: Arc<[usize]> = (0..n).collect();
            let vn_dst: Arc<[usize]> = batch.node_graph_id.iter().map(|&g| n + g).collect();
            let ones = f.tape.constant(Tensor::full(&[n], 1.0));
            let keep: Arc<[usize]> = (0..n).collect();
            Some((vn_src, vn_dst, ones, keep))
        } else {
            None
        };
        let mut h = match &virt {
            Some(_) => {
                let zeros = f.tape.constant(Tensor::zeros(&[batch.num_graphs, self.in_dim]));
                f.tape.concat_rows(x, zeros)?
            }
            None => x,
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut agg = f.tape.edge_aggregate(h, edge_weight, &batch.src, &batch.dst)?;
            if let Some((vs, vd, ones, _)) = &virt {
                let vagg = f.tape.edge_aggregate(h, *ones, vs, vd)?;
                agg = f.tape.add(agg, vagg)?;
            }
            let own = if self.config.epsilon == 0.0 {
                h
            } else {
                f.tape.affine(h, 1.0 + self.config.epsilon, 0.0)
            };
            let z = f.tape.add(own, agg)?;
            h = layer.forward(f, z)?;
            if i != last {
                h = f.tape.relu(h);
            }
            h = f.dropout(h, self.config.dropout, rng)?;
        }
        match &virt {
            Some((_, _, _, keep)) => f.tape.gather_rows(h, keep),
            None => Ok(h),
        }
    }
}

/// Mean of each graph's node embeddings.
pub fn graph_readout(f: &mut Fwd, node_emb: Var, node_graph_id: &Arc<[usize]>, num_graphs: usize) -> Result<Var> {
    f.tape.segment_mean(node_emb, node_graph_id, num_graphs)
}

/// GIN encoder, mean readout, and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnClassifier {
    pub encoder: GinEncoder,
    pub head: Linear,
}

impl GnnClassifier {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        in_dim: usize,
        num_classes: usize,
        config: GinConfig,
        rng: &mut Rng,
    ) -> Result<GnnClassifier> {
        ensure!(num_classes >= 1, "classifier needs at least one class");
        let encoder = GinEncoder::new(store, &format!("{name}.gin"), group, in_dim, config, rng)?;
        let head = Linear::new(store, &format!("{name}.head"), group, config.hidden_dim, num_classes, rng);
        Ok(GnnClassifier { encoder, head })
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim
    }

    /// Per-graph class logits.
    pub fn logits(&self, f: &mut Fwd, batch: &Batch, x: Var, edge_weight: Var, rng: &mut Rng) -> Result<Var> {
        let h = self.encoder.encode(f, batch, x, edge_weight, rng)?;
        let pooled = graph_readout(f, h, &batch.node_graph_id, batch.num_graphs)?;
        self.head.forward(f, pooled)
    }

    /// Mean cross-entropy against `targets`.
    pub fn loss(&self, f: &mut Fwd, batch: &Batch, x: Var, edge_weight: Var, targets: &[usize], rng: &mut Rng) -> Result<(Var, Var)> {
        let logits = self.logits(f, batch, x, edge_weight, rng)?;
        let logp = f.tape.log_softmax(logits)?;
        let loss = f.tape.nll_loss(logp, targets)?;
        Ok((loss, logits))
    }
}

/// Node features of a batch as a constant tape value.
pub fn batch_features(f: &mut Fwd, batch: &Batch) -> Var {
    f.tape
        .constant(Tensor::new(&[batch.num_nodes, batch.feature_dim], batch.x.clone()).expect("batch shape"))
}

/// Stored edge weights of a batch as a constant tape value.
pub fn batch_weights(f: &mut Fwd, batch: &Batch) -> Var {
    f.tape.constant(Tensor::vector(batch.edge_weight.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn tiny() -> Graph {
        Graph::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5], vec![(0, 1), (1, 2)], 1, 0, vec![true, false]).unwrap()
    }

    fn model(vn: bool) -> (ParamStore, GnnClassifier) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let cfg = GinConfig {
            num_layers: 2,
            hidden_dim: 4,
            dropout: 0.0,
            virtual_node: vn,
            batch_norm: true,
            epsilon: 0.0,
        };
        let m = GnnClassifier::new(&mut store, "m", Group::Classifier, 2, 3, cfg, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn rejects_out_of_range_weights() {
        let (store, m) = model(false);
        let b = Batch::from_graphs(&[tiny()]).unwrap();
        let mut f = Fwd::new(&store, false);
        let x = batch_features(&mut f, &b);
        let w = f.tape.constant(Tensor::vector(vec![0.5, 1.5]));
        assert!(m.logits(&mut f, &b, x, w, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn zero_weights_isolate_nodes() {
        let (store, m) = model(false);
        let g = tiny();
        let b = Batch::from_graphs(&[g.clone()]).unwrap();
        let mut f = Fwd::new(&store, false);
        let x = batch_features(&mut f, &b);
        let w = f.tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let h = m.encoder.encode(&mut f, &b, x, w, &mut Rng::new(0)).unwrap();
        let together = f.tape.value(h).clone();
        for v in 0..3 {
            let single = Graph::new(1, 2, g.x[2 * v..2 * v + 2].to_vec(), vec![], 1, 0, vec![]).unwrap();
            let sb = Batch::from_graphs(&[single]).unwrap();
            let mut f2 = Fwd::new(&store, false);
            let x2 = batch_features(&mut f2, &sb);
            let w2 = f2.tape.constant(Tensor::vector(vec![]));
            let h2 = m.encoder.encode(&mut f2, &sb, x2, w2, &mut Rng::new(0)).unwrap();
            assert_eq!(f2.tape.value(h2).row(0), together.row(v));
        }
    }

    #[test]
    fn virtual_node_changes_output() {
        let b = Batch::from_graphs(&[tiny()]).unwrap();
        let run = |vn| {
            let (store, m) = model(vn);
            let mut f = Fwd::new(&store, false);
            let x = batch_features(&mut f, &b);
            let w = batch_weights(&mut f, &b);
            let l = m.logits(&mut f, &b, x, w, &mut Rng::new(0)).unwrap();
            f.tape.value(l).clone()
        };
        assert_ne!(run(true), run(false));
    }
}
