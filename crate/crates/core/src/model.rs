//! The LECI model and the plain GIN classifier used as the ERM baseline.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::gin::{batch_features, batch_weights, GinConfig, GnnClassifier};
use crate::graph::Batch;
use crate::nn::{Fwd, Group, Mlp, ParamStore};
use crate::rng::Rng;
use crate::selector::{info_regularizer, Selection, Selector};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Architecture of a [`LeciModel`]; enough to rebuild it from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeciSpec {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_envs: usize,
    pub gin: GinConfig,
    pub tau: f64,
    /// Feature purifier and its discriminator are present.
    pub use_pfsc: bool,
}

impl LeciSpec {
    pub fn validate(&self) -> Result<()> {
        self.gin.validate()?;
        ensure!(self.feature_dim >= 1, "feature dimension must be positive");
        ensure!(self.num_classes >= 2, "need at least two classes, got {}", self.num_classes);
        if self.num_envs < 2 {
            return Err(Error::config(format!(
                "environment-adversarial training requires at least 2 environments, got {}",
                self.num_envs
            )));
        }
        ensure!(self.tau > 0.0, "temperature must be positive");
        Ok(())
    }
}

/// Adversarial strengths for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub env: f64,
    pub label: f64,
    pub pfsc: f64,
}

/// Which loss terms enter the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub env: bool,
    pub label: bool,
    pub pfsc: bool,
    /// Weight of the selector's information regularizer; zero disables it.
    pub info_weight: f64,
    pub info_r: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            env: true,
            label: true,
            pfsc: true,
            info_weight: 0.0,
            info_r: 0.7,
        }
    }
}

impl Objective {
    /// Only the invariant prediction loss.
    pub fn inv_only() -> Self {
        Objective {
            env: false,
            label: false,
            pfsc: false,
            ..Objective::default()
        }
    }
}

/// Loss terms recorded by one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LeciTerms {
    pub inv: Var,
    pub env: Option<Var>,
    pub label: Option<Var>,
    pub pfsc: Option<Var>,
    pub info: Option<Var>,
    pub total: Var,
    pub class_logits: Var,
    pub selection: Selection,
}

/// Eval-mode outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub class_pred: Vec<usize>,
    pub env_pred: Vec<usize>,
    pub label_pred: Vec<usize>,
    pub pfsc_pred: Option<Vec<usize>>,
    pub edge_probs: Vec<f64>,
    /// Purified node features, row-major.
    pub features: Vec<f64>,
}

/// Independent random streams for the model's stochastic parts in one step.
pub struct StepRngs {
    pub selector: Rng,
    pub inv: Rng,
    pub env: Rng,
    pub label: Rng,
}

impl StepRngs {
    pub fn new(rng: &Rng) -> StepRngs {
        StepRngs {
            selector: rng.fork(0),
            inv: rng.fork(1),
            env: rng.fork(2),
            label: rng.fork(3),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeciModel {
    pub spec: LeciSpec,
    pub store: ParamStore,
    pub selector: Selector,
    pub inv: GnnClassifier,
    pub env: GnnClassifier,
    pub label: GnnClassifier,
    pub pfsc_transform: Option<Mlp>,
    pub pfsc_disc: Option<Mlp>,
}

impl LeciModel {
    pub fn new(spec: LeciSpec, rng: &Rng) -> Result<LeciModel> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let (d, g) = (spec.feature_dim, spec.gin);
        let selector = Selector::new(&mut store, d, g, spec.tau, &mut rng.fork(1))?;
        let inv = GnnClassifier::new(&mut store, "inv", Group::Inv, d, spec.num_classes, g, &mut rng.fork(2))?;
        let env = GnnClassifier::new(&mut store, "env", Group::EnvDisc, d, spec.num_envs, g, &mut rng.fork(3))?;
        let label =
            GnnClassifier::new(&mut store, "label", Group::LabelDisc, d, spec.num_classes, g, &mut rng.fork(4))?;
        let (pfsc_transform, pfsc_disc) = if spec.use_pfsc {
            let h = g.hidden_dim;
            let t = Mlp::new_zero_last(&mut store, "pfsc.transform", Group::PfscTransform, &[d, h, d], &mut rng.fork(5));
            let fe = Mlp::new(&mut store, "pfsc.disc", Group::PfscDisc, &[d, h, spec.num_envs], &mut rng.fork(6));
            (Some(t), Some(fe))
        } else {
            (None, None)
        };
        Ok(LeciModel {
            spec,
            store,
            selector,
            inv,
            env,
            label,
            pfsc_transform,
            pfsc_disc,
        })
    }

    /// Purified features `X' = X + T(X)`, or `X` without a purifier.
    pub fn purify(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        match &self.pfsc_transform {
            Some(t) => {
                let delta = t.forward(f, x)?;
                f.tape.add(x, delta)
            }
            None => Ok(x),
        }
    }

    /// Per-graph log-probabilities of the environment from node features,
    /// averaged over each graph's nodes.
    pub fn pfsc_log_probs(&self, f: &mut Fwd, batch: &Batch, x: Var) -> Result<Var> {
        let disc = self
            .pfsc_disc
            .as_ref()
            .ok_or_else(|| Error::contract("model has no feature discriminator"))?;
        let node_logits = disc.forward(f, x)?;
        let logp = f.tape.log_softmax(node_logits)?;
        f.tape.segment_mean(logp, &batch.node_graph_id, batch.num_graphs)
    }

    /// `-mean log P(E | X')` with `X'` routed through gradient reversal.
    pub fn loss_pfsc(&self, f: &mut Fwd, batch: &Batch, x_pure: Var, lambda: f64) -> Result<Var> {
        let rx = f.tape.grad_reverse(x_pure, lambda)?;
        let logp = self.pfsc_log_probs(f, batch, rx)?;
        f.tape.nll_loss(logp, &batch.env)
    }

    pub fn loss_inv(&self, f: &mut Fwd, batch: &Batch, x: Var, w_c: Var, rng: &mut Rng) -> Result<(Var, Var)> {
        self.inv.loss(f, batch, x, w_c, &batch.y, rng)
    }

    /// Environment discriminator on the causal view; the selector sees the
    /// reversed gradient scaled by `lambda`.
    pub fn loss_ea(&self, f: &mut Fwd, batch: &Batch, x: Var, w_c: Var, lambda: f64, rng: &mut Rng) -> Result<Var> {
        let xd = f.tape.detach(x);
        let w = f.tape.grad_reverse(w_c, lambda)?;
        Ok(self.env.loss(f, batch, xd, w, &batch.env, rng)?.0)
    }

    /// Label discriminator on the spurious view; the selector sees the
    /// reversed gradient scaled by `lambda`.
    pub fn loss_la(&self, f: &mut Fwd, batch: &Batch, x: Var, w_s: Var, lambda: f64, rng: &mut Rng) -> Result<Var> {
        let xd = f.tape.detach(x);
        let w = f.tape.grad_reverse(w_s, lambda)?;
        Ok(self.label.loss(f, batch, xd, w, &batch.y, rng)?.0)
    }

    /// Full training objective for one batch.
    pub fn forward_train(
        &self,
        f: &mut Fwd,
        batch: &Batch,
        lambdas: Lambdas,
        objective: Objective,
        rngs: &mut StepRngs,
    ) -> Result<LeciTerms> {
        let x = batch_features(f, batch);
        let xp = self.purify(f, x)?;
        let pfsc = if objective.pfsc && self.pfsc_disc.is_some() {
            Some(self.loss_pfsc(f, batch, xp, lambdas.pfsc)?)
        } else {
            None
        };
        let selection = self.selector.select(f, batch, xp, &mut rngs.selector)?;
        if !f.tape.value(selection.probs).all_finite() {
            return Err(Error::Numeric("selector edge probabilities are not finite".into()));
        }
        let (inv, class_logits) = self.loss_inv(f, batch, xp, selection.w_c, &mut rngs.inv)?;
        let env = if objective.env {
            Some(self.loss_ea(f, batch, xp, selection.w_c, lambdas.env, &mut rngs.env)?)
        } else {
            None
        };
        let label = if objective.label {
            Some(self.loss_la(f, batch, xp, selection.w_s, lambdas.label, &mut rngs.label)?)
        } else {
            None
        };
        let info = if objective.info_weight > 0.0 {
            let kl = info_regularizer(f, &selection, objective.info_r)?;
            Some(f.tape.affine(kl, objective.info_weight, 0.0))
        } else {
            None
        };
        let mut total = inv;
        for term in [pfsc, env, label, info].into_iter().flatten() {
            total = f.tape.add(total, term)?;
        }
        Ok(LeciTerms {
            inv,
            env,
            label,
            pfsc,
            info,
            total,
            class_logits,
            selection,
        })
    }

    /// Deterministic eval-mode predictions of every head.
    pub fn infer(&self, batch: &Batch) -> Result<Inference> {
        let mut f = Fwd::new(&self.store, false);
        let mut rng = Rng::new(0);
        let x = batch_features(&mut f, batch);
        let xp = self.purify(&mut f, x)?;
        let sel = self.selector.select(&mut f, batch, xp, &mut rng)?;
        let class = self.inv.logits(&mut f, batch, xp, sel.w_c, &mut rng)?;
        let env = self.env.logits(&mut f, batch, xp, sel.w_c, &mut rng)?;
        let label = self.label.logits(&mut f, batch, xp, sel.w_s, &mut rng)?;
        let pfsc_pred = if self.pfsc_disc.is_some() {
            let lp = self.pfsc_log_probs(&mut f, batch, xp)?;
            Some(f.tape.value(lp).argmax_rows())
        } else {
            None
        };
        Ok(Inference {
            class_pred: f.tape.value(class).argmax_rows(),
            env_pred: f.tape.value(env).argmax_rows(),
            label_pred: f.tape.value(label).argmax_rows(),
            pfsc_pred,
            edge_probs: f.tape.value(sel.probs).data().to_vec(),
            features: f.tape.value(xp).data().to_vec(),
        })
    }
}

/// Architecture of a plain [`ClassifierModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub gin: GinConfig,
}

/// GIN classifier over whole graphs, using each graph's stored edge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub spec: ClassifierSpec,
    pub store: ParamStore,
    pub net: GnnClassifier,
}

impl ClassifierModel {
    pub fn new(spec: ClassifierSpec, rng: &Rng) -> Result<ClassifierModel> {
        spec.gin.validate()?;
        let mut store = ParamStore::new();
        let net = GnnClassifier::new(
            &mut store,
            "clf",
            Group::Classifier,
            spec.feature_dim,
            spec.num_classes,
            spec.gin,
            &mut rng.fork(1),
        )?;
        Ok(ClassifierModel { spec, store, net })
    }

    pub fn loss(&self, f: &mut Fwd, batch: &Batch, targets: &[usize], rng: &mut Rng) -> Result<(Var, Var)> {
        let x = batch_features(f, batch);
        let w = batch_weights(f, batch);
        self.net.loss(f, batch, x, w, targets, rng)
    }

    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut f = Fwd::new(&self.store, false);
        let x = batch_features(&mut f, batch);
        let w = batch_weights(&mut f, batch);
        let l = self.net.logits(&mut f, batch, x, w, &mut Rng::new(0))?;
        Ok(f.tape.value(l).clone())
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.argmax_rows())
    }
}

/// A trained model of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Leci(LeciModel),
    Classifier(ClassifierModel),
}

impl AnyModel {
    pub fn store(&self) -> &ParamStore {
        match self {
            AnyModel::Leci(m) => &m.store,
            AnyModel::Classifier(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Leci(m) => &mut m.store,
            AnyModel::Classifier(m) => &mut m.store,
        }
    }

    /// Eval-mode class predictions.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        match self {
            AnyModel::Leci(m) => Ok(m.infer(batch)?.class_pred),
            AnyModel::Classifier(m) => m.predict(batch),
        }
    }

    pub fn method(&self) -> &'static str {
        match self {
            AnyModel::Leci(_) => "leci",
            AnyModel::Classifier(_) => "erm",
        }
    }
}
