//! Parameters, the forward context, and dense layers.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Disjoint parameter groups of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Subgraph selector θ.
    Selector,
    /// Invariant predictor φ_inv.
    Inv,
    /// Environment discriminator φ_E.
    EnvDisc,
    /// Label discriminator φ_L.
    LabelDisc,
    /// Feature purifier φ_T.
    PfscTransform,
    /// Feature environment discriminator φ_FE.
    PfscDisc,
    /// Plain classifier (ERM baseline, probes).
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    /// Running statistics and other buffers are stored but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.push(name.into(), group, value, true)
    }

    /// Non-trainable state saved alongside the parameters.
    pub fn add_buffer(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.push(name.into(), group, value, false)
    }

    fn push(&mut self, name: String, group: Group, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name,
            group,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrite values from another store with the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        ensure!(other.len() == self.len(), "parameter count mismatch");
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            ensure!(
                a.name == b.name && a.value.shape() == b.value.shape(),
                "parameter {} does not match {}",
                a.name,
                b.name
            );
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Grads {
        Grads(store.iter().map(|p| vec![0.0; p.value.len()]).collect())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Batch statistics observed by one normalization layer in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

/// A tape plus lazily bound parameter leaves for one forward/backward pass.
pub struct Fwd<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    /// Training mode: dropout, selection noise and batch statistics are active.
    pub train: bool,
    pub norm_stats: Vec<NormStats>,
}

impl<'a> Fwd<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Fwd {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train,
            norm_stats: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every parameter after `tape.backward`; unused ones are zero.
    pub fn grads(&self) -> Grads {
        Grads(
            self.store
                .iter()
                .zip(&self.bound)
                .map(|(p, b)| match b.and_then(|v| self.tape.grad(v)) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; p.value.len()],
                })
                .collect(),
        )
    }

    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if self.train && p > 0.0 {
            self.tape.dropout(x, p, rng)
        } else {
            Ok(x)
        }
    }
}

/// Fold the batch statistics of several shards into the running estimates:
/// `running ← (1 − momentum)·running + momentum·batch`, where the batch
/// statistics pool all shards and the variance is unbiased.
pub fn update_running_stats(store: &mut ParamStore, shards: &[Vec<NormStats>], momentum: f64) {
    let Some(first) = shards.first() else { return };
    for (layer, proto) in first.iter().enumerate() {
        let d = proto.mean.len();
        let total: usize = shards.iter().map(|s| s[layer].rows).sum();
        if total == 0 {
            continue;
        }
        let mut mean = vec![0.0; d];
        for s in shards {
            let st = &s[layer];
            for k in 0..d {
                mean[k] += st.mean[k] * st.rows as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total as f64);
        let mut ss = vec![0.0; d];
        for s in shards {
            let st = &s[layer];
            for k in 0..d {
                let dm = st.mean[k] - mean[k];
                ss[k] += st.rows as f64 * (st.var[k] + dm * dm);
            }
        }
        let denom = if total > 1 { (total - 1) as f64 } else { 1.0 };
        let rm = store.get_mut(proto.running_mean).value.data_mut();
        for k in 0..d {
            rm[k] = (1.0 - momentum) * rm[k] + momentum * mean[k];
        }
        let rv = store.get_mut(proto.running_var).value.data_mut();
        for k in 0..d {
            rv[k] = (1.0 - momentum) * rv[k] + momentum * ss[k] / denom;
        }
    }
}

/// Column-wise batch normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, dim: usize) -> BatchNorm {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), group, Tensor::zeros(&[dim])),
            running_var: store.add_buffer(format!("{name}.running_var"), group, Tensor::full(&[dim], 1.0)),
            dim,
        }
    }

    /// Batch statistics in training mode, running statistics otherwise.
    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        if f.train {
            let rows = f.tape.value(x).rows();
            let (y, mean, var) = f.tape.batch_norm(x, gamma, beta, NORM_EPS, None)?;
            f.norm_stats.push(NormStats {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean,
                var,
                rows,
            });
            Ok(y)
        } else {
            let store = f.store;
            let mean = store.get(self.running_mean).value.data();
            let var = store.get(self.running_var).value.data();
            Ok(f.tape.batch_norm(x, gamma, beta, NORM_EPS, Some((mean, var)))?.0)
        }
    }
}

/// Glorot-uniform matrix: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| (2.0 * rng.uniform() - 1.0) * a).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("sized")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Linear {
        let weight = store.add(format!("{name}.weight"), group, glorot(in_dim, out_dim, rng));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Linear layer whose weights and bias start at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, group: Group, in_dim: usize, out_dim: usize) -> Linear {
        let weight = store.add(format!("{name}.weight"), group, Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let cols = f.tape.value(x).cols();
        ensure!(
            cols == self.in_dim,
            "linear layer expects {} inputs, got {}",
            self.in_dim,
            cols
        );
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let h = f.tape.matmul(x, w)?;
        f.tape.add_row(h, b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new(store: &mut ParamStore, name: &str, group: Group, dims: &[usize], rng: &mut Rng) -> Mlp {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    /// Same as [`Mlp::new`] but the final layer starts at zero.
    pub fn new_zero_last(store: &mut ParamStore, name: &str, group: Group, dims: &[usize], rng: &mut Rng) -> Mlp {
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i + 1 == n {
                    Linear::zeros(store, &format!("{name}.{i}"), group, w[0], w[1])
                } else {
                    Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng)
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(f, h)?;
            if i + 1 < self.layers.len() {
                h = f.tape.relu(h);
            }
        }
        Ok(h)
    }
}
