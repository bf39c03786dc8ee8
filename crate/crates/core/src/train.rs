//! Training loops for LECI and for plain GIN classifiers.
//!
//! Each optimizer step splits the minibatch into a fixed number of shards,
//! runs forward and backward on every shard (in parallel under
//! [`Exec::Parallel`]), and sums the size-weighted shard gradients in shard
//! order. The shard count is part of the configuration, so results do not
//! depend on how many worker threads execute the shards.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::exec::Exec;
use crate::gin::GinConfig;
use crate::graph::{Batch, DatasetSplit, Graph};
use crate::model::{ClassifierModel, ClassifierSpec, Lambdas, LeciModel, LeciSpec, Objective, StepRngs};
use crate::nn::{update_running_stats, Fwd, Grads, Group, NormStats, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    Linear,
    DannSigmoid,
}

impl RampShape {
    pub fn parse(s: &str) -> Result<RampShape> {
        match s {
            "linear" => Ok(RampShape::Linear),
            "dann_sigmoid" => Ok(RampShape::DannSigmoid),
            other => Err(Error::config(format!("unknown ramp shape {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RampShape::Linear => "linear",
            RampShape::DannSigmoid => "dann_sigmoid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_e_max: f64,
    pub lambda_l_max: f64,
    pub lambda_pfsc_max: f64,
    pub warmup_epochs: usize,
    pub ramp_shape: RampShape,
    pub seed: u64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub virtual_node: bool,
    pub batch_norm: bool,
    pub gin_epsilon: f64,
    pub tau: f64,
    pub use_pfsc: bool,
    /// Weight of the selector's information regularizer; zero disables it.
    pub info_weight: f64,
    pub info_r: f64,
    pub strict_alternation: bool,
    /// Minibatch shards per optimizer step.
    pub shards: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            lambda_e_max: 10.0,
            lambda_l_max: 5.0,
            lambda_pfsc_max: 1.0,
            warmup_epochs: 30,
            ramp_shape: RampShape::Linear,
            seed: 0,
            num_layers: 3,
            hidden_dim: 32,
            dropout: 0.5,
            virtual_node: false,
            batch_norm: true,
            gin_epsilon: 0.0,
            tau: 1.0,
            use_pfsc: true,
            info_weight: 0.0,
            info_r: 0.7,
            strict_alternation: false,
            shards: 4,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("{key}: {msg}")));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(
                "warmup_epochs",
                format!("{} must be below epochs ({})", self.warmup_epochs, self.epochs),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} is not a positive number", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative".into());
        }
        for (key, v) in [
            ("lambda_e_max", self.lambda_e_max),
            ("lambda_l_max", self.lambda_l_max),
            ("lambda_pfsc_max", self.lambda_pfsc_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("{v} must be a nonnegative number"));
            }
        }
        if self.num_layers == 0 {
            return bad("num_layers", "must be at least 1".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim", "must be positive".into());
        }
        if !self.gin_epsilon.is_finite() {
            return bad("gin_epsilon", "must be finite".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} not in [0,1)", self.dropout));
        }
        if !(self.tau > 0.0) {
            return bad("tau", "must be positive".into());
        }
        if !(self.info_weight >= 0.0) {
            return bad("info_weight", "must be nonnegative".into());
        }
        if !(self.info_r > 0.0 && self.info_r < 1.0) {
            return bad("info_r", format!("{} not in (0,1)", self.info_r));
        }
        if self.shards == 0 {
            return bad("shards", "must be positive".into());
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size", "must be positive".into());
        }
        Ok(())
    }

    pub fn gin(&self) -> GinConfig {
        GinConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
            virtual_node: self.virtual_node,
            batch_norm: self.batch_norm,
            epsilon: self.gin_epsilon,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            env: true,
            label: true,
            pfsc: self.use_pfsc,
            info_weight: self.info_weight,
            info_r: self.info_r,
        }
    }
}

/// Adversarial strengths at `epoch`: zero during warm-up, then rising to the
/// configured maxima at the final epoch.
pub fn ramp(epoch: usize, cfg: &TrainConfig) -> Lambdas {
    let p = ramp_progress(epoch, cfg.warmup_epochs, cfg.epochs);
    let s = match cfg.ramp_shape {
        RampShape::Linear => p,
        RampShape::DannSigmoid => dann(p) / dann(1.0),
    };
    Lambdas {
        env: cfg.lambda_e_max * s,
        label: cfg.lambda_l_max * s,
        pfsc: cfg.lambda_pfsc_max * s,
    }
}

fn dann(p: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

fn ramp_progress(epoch: usize, warmup: usize, epochs: usize) -> f64 {
    if epoch < warmup {
        return 0.0;
    }
    let span = epochs.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return 1.0;
    }
    ((epoch - warmup) as f64 / span as f64).min(1.0)
}

/// Adam with coupled L2 weight decay and a per-parameter step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<i32>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: vec![0; store.len()],
        }
    }

    /// Update the parameters whose group passes `active`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, active: impl Fn(Group) -> bool) {
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable || !active(p.group) {
                continue;
            }
            self.t[i] += 1;
            let bc1 = 1.0 - self.beta1.powi(self.t[i]);
            let bc2 = 1.0 - self.beta2.powi(self.t[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads.0[i][k] + self.weight_decay * *w;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_inv: f64,
    pub l_e: Option<f64>,
    pub l_l: Option<f64>,
    pub l_pfsc: Option<f64>,
    pub l_info: Option<f64>,
    pub train_acc: f64,
    pub id_val_acc: Option<f64>,
    pub ood_val_acc: Option<f64>,
    pub ood_test_acc: Option<f64>,
    /// Environment discriminator accuracy on the causal view of id_val.
    pub env_disc_acc_on_gc: Option<f64>,
    /// Label discriminator accuracy on the spurious view of id_val.
    pub label_disc_acc_on_gs: Option<f64>,
    /// Feature environment discriminator accuracy on purified id_val features.
    pub pfsc_disc_acc: Option<f64>,
    /// Mean eval-mode selection probability of motif edges on id_val.
    pub motif_edge_prob: Option<f64>,
    /// Mean eval-mode selection probability of non-motif edges on id_val.
    pub other_edge_prob: Option<f64>,
    pub lambda_e: f64,
    pub lambda_l: f64,
    pub lambda_pfsc: f64,
}

/// Test accuracy of the model chosen by a validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    /// `None` when no epoch ran and the initial model was evaluated.
    pub epoch: Option<usize>,
    pub id_val_acc: Option<f64>,
    pub ood_val_acc: Option<f64>,
    pub ood_test_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Model after the last epoch.
    pub final_model: M,
    /// Parameters at the best ood_val epoch.
    pub best_model: M,
    pub logs: Vec<EpochLog>,
    pub by_ood_val: Selected,
    pub by_id_val: Selected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Term {
    Inv,
    Env,
    Label,
    Pfsc,
    Info,
}

impl Term {
    fn name(self) -> &'static str {
        match self {
            Term::Inv => "L_inv",
            Term::Env => "L_E",
            Term::Label => "L_L",
            Term::Pfsc => "L_PFSC",
            Term::Info => "L_info",
        }
    }
}

struct StepOut {
    total: Var,
    terms: Vec<(Term, Var)>,
    logits: Var,
}

trait Trainable: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, f: &mut Fwd, batch: &Batch, graphs: &[&Graph], lambdas: Lambdas, rng: &Rng) -> Result<StepOut>;
}

struct LeciRun<'a> {
    model: &'a mut LeciModel,
    objective: Objective,
}

impl Trainable for LeciRun<'_> {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }
    fn forward(&self, f: &mut Fwd, batch: &Batch, _graphs: &[&Graph], lambdas: Lambdas, rng: &Rng) -> Result<StepOut> {
        let mut rngs = StepRngs::new(rng);
        let t = self.model.forward_train(f, batch, lambdas, self.objective, &mut rngs)?;
        let mut terms = vec![(Term::Inv, t.inv)];
        for (term, v) in [
            (Term::Env, t.env),
            (Term::Label, t.label),
            (Term::Pfsc, t.pfsc),
            (Term::Info, t.info),
        ] {
            if let Some(v) = v {
                terms.push((term, v));
            }
        }
        Ok(StepOut {
            total: t.total,
            terms,
            logits: t.class_logits,
        })
    }
}

struct ClassifierRun<'a> {
    model: &'a mut ClassifierModel,
    targets: &'a (dyn Fn(&Graph) -> usize + Sync),
}

impl Trainable for ClassifierRun<'_> {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }
    fn forward(&self, f: &mut Fwd, batch: &Batch, graphs: &[&Graph], _lambdas: Lambdas, rng: &Rng) -> Result<StepOut> {
        let targets: Vec<usize> = graphs.iter().map(|g| (self.targets)(g)).collect();
        let (loss, logits) = self.model.loss(f, batch, &targets, &mut rng.fork(1))?;
        Ok(StepOut {
            total: loss,
            terms: vec![(Term::Inv, loss)],
            logits,
        })
    }
}

struct ShardResult {
    grads: Grads,
    norm: Vec<NormStats>,
    terms: Vec<(Term, f64)>,
    correct: usize,
}

/// Accumulated statistics of one pass over the training set.
#[derive(Default)]
struct EpochStats {
    sums: Vec<(Term, f64)>,
    steps: usize,
    correct: usize,
    seen: usize,
}

impl EpochStats {
    fn mean(&self, term: Term) -> Option<f64> {
        self.sums
            .iter()
            .find(|(t, _)| *t == term)
            .map(|(_, s)| s / self.steps.max(1) as f64)
    }

    fn disc_total(&self) -> f64 {
        [Term::Env, Term::Label, Term::Pfsc]
            .iter()
            .filter_map(|&t| self.mean(t))
            .sum()
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epoch<T: Trainable>(
    model: &mut T,
    adam: &mut Adam,
    graphs: &[Graph],
    targets: &(dyn Fn(&Graph) -> usize + Sync),
    cfg: &TrainConfig,
    lambdas: Lambdas,
    epoch_rng: &Rng,
    epoch: usize,
    exec: Exec,
    active: &dyn Fn(Group) -> bool,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    epoch_rng.fork(0).shuffle(&mut order);
    let mut stats = EpochStats::default();
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let step_rng = epoch_rng.fork(1).fork(step as u64);
        let nshards = cfg.shards.min(chunk.len());
        let base = chunk.len() / nshards;
        let extra = chunk.len() % nshards;
        let mut bounds = vec![0];
        for s in 0..nshards {
            bounds.push(bounds[s] + base + usize::from(s < extra));
        }
        let n = chunk.len() as f64;
        let shared: &T = model;
        let results = exec.try_map(nshards, |s| -> Result<ShardResult> {
            let idx = &chunk[bounds[s]..bounds[s + 1]];
            let refs: Vec<&Graph> = idx.iter().map(|&i| &graphs[i]).collect();
            let batch = Batch::new(&refs)?;
            let frac = refs.len() as f64 / n;
            let mut f = Fwd::new(shared.store(), true);
            let out = shared
                .forward(&mut f, &batch, &refs, lambdas, &step_rng.fork(s as u64))
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("{m} in the forward pass at epoch {epoch}")),
                    other => other,
                })?;
            let mut terms = Vec::with_capacity(out.terms.len());
            for &(term, v) in &out.terms {
                let value = f.tape.scalar(v);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{} is not finite ({value}) at epoch {epoch}",
                        term.name()
                    )));
                }
                terms.push((term, value * frac));
            }
            let loss = f.tape.affine(out.total, frac, 0.0);
            f.tape.backward(loss)?;
            let pred = f.tape.value(out.logits).argmax_rows();
            let correct = refs.iter().zip(&pred).filter(|(g, &p)| targets(g) == p).count();
            Ok(ShardResult {
                grads: f.grads(),
                norm: std::mem::take(&mut f.norm_stats),
                terms,
                correct,
            })
        })?;
        let mut grads = Grads::zeros_like(model.store());
        let mut step_terms: Vec<(Term, f64)> = Vec::new();
        let mut norms = Vec::with_capacity(results.len());
        for r in results {
            norms.push(r.norm);
            for (acc, g) in grads.0.iter_mut().zip(&r.grads.0) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            for (term, v) in r.terms {
                match step_terms.iter_mut().find(|(t, _)| *t == term) {
                    Some(slot) => slot.1 += v,
                    None => step_terms.push((term, v)),
                }
            }
            stats.correct += r.correct;
        }
        if !grads.all_finite() {
            let name = model
                .store()
                .iter()
                .zip(&grads.0)
                .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
                .map(|(p, _)| p.name.clone())
                .unwrap_or_default();
            return Err(Error::Numeric(format!(
                "gradient of {name} is not finite at epoch {epoch}"
            )));
        }
        adam.step(model.store_mut(), &grads, active);
        update_running_stats(model.store_mut(), &norms, NORM_MOMENTUM);
        for (term, v) in step_terms {
            match stats.sums.iter_mut().find(|(t, _)| *t == term) {
                Some(slot) => slot.1 += v,
                None => stats.sums.push((term, v)),
            }
        }
        stats.steps += 1;
        stats.seen += chunk.len();
    }
    Ok(stats)
}

fn rate(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Eval-mode accuracies of a LECI model on one set of graphs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LeciEval {
    pub acc: Option<f64>,
    pub env_acc: Option<f64>,
    pub label_acc: Option<f64>,
    pub pfsc_acc: Option<f64>,
    pub motif_edge_prob: Option<f64>,
    pub other_edge_prob: Option<f64>,
}

pub fn evaluate_leci(model: &LeciModel, graphs: &[Graph], eval_batch: usize, exec: Exec) -> Result<LeciEval> {
    let chunks: Vec<&[Graph]> = graphs.chunks(eval_batch.max(1)).collect();
    let counts = exec.try_map(chunks.len(), |i| -> Result<([usize; 6], [f64; 2])> {
        let batch = Batch::from_graphs(chunks[i])?;
        let inf = model.infer(&batch)?;
        let hits = |pred: &[usize], truth: &[usize]| pred.iter().zip(truth).filter(|(a, b)| a == b).count();
        let mut sums = [0.0; 2];
        for (p, &m) in inf.edge_probs.iter().zip(&batch.motif_mask) {
            sums[usize::from(!m)] += p;
        }
        let motif_edges = batch.motif_mask.iter().filter(|&&m| m).count();
        Ok((
            [
                hits(&inf.class_pred, &batch.y),
                hits(&inf.env_pred, &batch.env),
                hits(&inf.label_pred, &batch.y),
                inf.pfsc_pred.as_deref().map_or(0, |p| hits(p, &batch.env)),
                motif_edges,
                batch.num_edges() - motif_edges,
            ],
            sums,
        ))
    })?;
    let mut tot = [0usize; 6];
    let mut prob = [0.0; 2];
    for (c, s) in counts {
        for k in 0..6 {
            tot[k] += c[k];
        }
        prob[0] += s[0];
        prob[1] += s[1];
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    let n = graphs.len();
    Ok(LeciEval {
        acc: rate(tot[0], n),
        env_acc: rate(tot[1], n),
        label_acc: rate(tot[2], n),
        pfsc_acc: if model.pfsc_disc.is_some() { rate(tot[3], n) } else { None },
        motif_edge_prob: mean(prob[0], tot[4]),
        other_edge_prob: mean(prob[1], tot[5]),
    })
}

/// Eval-mode accuracy of a classifier against `targets`.
pub fn evaluate_classifier(
    model: &ClassifierModel,
    graphs: &[Graph],
    targets: &(dyn Fn(&Graph) -> usize + Sync),
    eval_batch: usize,
    exec: Exec,
) -> Result<Option<f64>> {
    let chunks: Vec<&[Graph]> = graphs.chunks(eval_batch.max(1)).collect();
    let counts = exec.try_map(chunks.len(), |i| -> Result<usize> {
        let batch = Batch::from_graphs(chunks[i])?;
        let pred = model.predict(&batch)?;
        Ok(chunks[i].iter().zip(&pred).filter(|(g, &p)| targets(g) == p).count())
    })?;
    Ok(rate(counts.into_iter().sum(), graphs.len()))
}

struct Tracker<M> {
    by_ood: Selected,
    by_id: Selected,
    best_ood: f64,
    best_id: f64,
    best_model: Option<M>,
}

impl<M: Clone> Tracker<M> {
    fn new(initial: Selected) -> Self {
        Tracker {
            by_ood: initial.clone(),
            by_id: initial,
            best_ood: f64::NEG_INFINITY,
            best_id: f64::NEG_INFINITY,
            best_model: None,
        }
    }

    fn observe(&mut self, log: &EpochLog, model: &M) {
        let sel = Selected {
            epoch: Some(log.epoch),
            id_val_acc: log.id_val_acc,
            ood_val_acc: log.ood_val_acc,
            ood_test_acc: log.ood_test_acc,
        };
        if let Some(a) = log.ood_val_acc {
            if a > self.best_ood {
                self.best_ood = a;
                self.by_ood = sel.clone();
                self.best_model = Some(model.clone());
            }
        }
        if let Some(a) = log.id_val_acc {
            if a > self.best_id {
                self.best_id = a;
                self.by_id = sel;
            }
        }
    }
}

fn check_split(split: &DatasetSplit) -> Result<usize> {
    if split.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    split
        .feature_dim()
        .ok_or_else(|| Error::config("dataset has no graphs"))
}

pub fn leci_spec(split: &DatasetSplit, cfg: &TrainConfig) -> Result<LeciSpec> {
    let feature_dim = check_split(split)?;
    Ok(LeciSpec {
        feature_dim,
        num_classes: split.num_classes().max(2),
        num_envs: split.num_envs(),
        gin: cfg.gin(),
        tau: cfg.tau,
        use_pfsc: cfg.use_pfsc,
    })
}

const NORM_MOMENTUM: f64 = 0.1;
const DISC_GROUPS: [Group; 3] = [Group::EnvDisc, Group::LabelDisc, Group::PfscDisc];
const ALTERNATION_TOL: f64 = 1e-3;
const ALTERNATION_WINDOW: usize = 5;
const ALTERNATION_MAX_INNER: usize = 50;

/// Train LECI with the given objective terms.
pub fn train_leci_with(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    objective: Objective,
    exec: Exec,
) -> Result<TrainOutcome<LeciModel>> {
    cfg.validate()?;
    let spec = leci_spec(split, cfg)?;
    let master = Rng::new(cfg.seed);
    let mut model = LeciModel::new(spec, &master.fork(0))?;
    split.check_env_learnability()?;
    let mut adam = Adam::new(&model.store, cfg.lr, cfg.weight_decay);
    let eval = |m: &LeciModel, gs: &[Graph]| evaluate_leci(m, gs, cfg.eval_batch_size, exec);
    let initial = {
        let (i, o, t) = (eval(&model, &split.id_val)?, eval(&model, &split.ood_val)?, eval(&model, &split.ood_test)?);
        Selected {
            epoch: None,
            id_val_acc: i.acc,
            ood_val_acc: o.acc,
            ood_test_acc: t.acc,
        }
    };
    let mut tracker = Tracker::new(initial);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let targets = |g: &Graph| g.y;
    for epoch in 0..cfg.epochs {
        let lambdas = ramp(epoch, cfg);
        let epoch_rng = master.fork(1).fork(epoch as u64);
        let stats = if cfg.strict_alternation {
            let mut history: Vec<f64> = Vec::new();
            for inner in 0..ALTERNATION_MAX_INNER {
                let mut run = LeciRun {
                    model: &mut model,
                    objective,
                };
                let s = run_epoch(
                    &mut run,
                    &mut adam,
                    &split.train,
                    &targets,
                    cfg,
                    lambdas,
                    &epoch_rng.fork(2).fork(inner as u64),
                    epoch,
                    exec,
                    &|g| DISC_GROUPS.contains(&g),
                )?;
                history.push(s.disc_total());
                if history.len() >= ALTERNATION_WINDOW {
                    let w = &history[history.len() - ALTERNATION_WINDOW..];
                    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if hi - lo < ALTERNATION_TOL {
                        break;
                    }
                }
            }
            let mut run = LeciRun {
                model: &mut model,
                objective,
            };
            run_epoch(
                &mut run,
                &mut adam,
                &split.train,
                &targets,
                cfg,
                lambdas,
                &epoch_rng,
                epoch,
                exec,
                &|g| !DISC_GROUPS.contains(&g),
            )?
        } else {
            let mut run = LeciRun {
                model: &mut model,
                objective,
            };
            run_epoch(
                &mut run,
                &mut adam,
                &split.train,
                &targets,
                cfg,
                lambdas,
                &epoch_rng,
                epoch,
                exec,
                &|_| true,
            )?
        };
        let id = eval(&model, &split.id_val)?;
        let ood_val = eval(&model, &split.ood_val)?;
        let ood_test = eval(&model, &split.ood_test)?;
        let log = EpochLog {
            epoch,
            l_inv: stats.mean(Term::Inv).unwrap_or(0.0),
            l_e: stats.mean(Term::Env),
            l_l: stats.mean(Term::Label),
            l_pfsc: stats.mean(Term::Pfsc),
            l_info: stats.mean(Term::Info),
            train_acc: stats.correct as f64 / stats.seen.max(1) as f64,
            id_val_acc: id.acc,
            ood_val_acc: ood_val.acc,
            ood_test_acc: ood_test.acc,
            env_disc_acc_on_gc: id.env_acc,
            label_disc_acc_on_gs: id.label_acc,
            pfsc_disc_acc: id.pfsc_acc,
            motif_edge_prob: id.motif_edge_prob,
            other_edge_prob: id.other_edge_prob,
            lambda_e: lambdas.env,
            lambda_l: lambdas.label,
            lambda_pfsc: lambdas.pfsc,
        };
        log::debug!(
            "epoch {epoch}: L_inv {:.4} L_E {:?} L_L {:?} ood_val {:?}",
            log.l_inv,
            log.l_e,
            log.l_l,
            log.ood_val_acc
        );
        tracker.observe(&log, &model);
        logs.push(log);
    }
    let best_model = tracker.best_model.unwrap_or_else(|| model.clone());
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        logs,
        by_ood_val: tracker.by_ood,
        by_id_val: tracker.by_id,
    })
}

/// Train LECI with every configured objective term.
pub fn train(split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome<LeciModel>> {
    train_leci_with(split, cfg, cfg.objective(), Exec::default())
}

/// Train a GIN classifier on `train` for `targets`, logging accuracy on the
/// evaluation sets (id_val, ood_val, ood_test in that order, any may be empty).
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    train: &[Graph],
    evals: [&[Graph]; 3],
    targets: &(dyn Fn(&Graph) -> usize + Sync),
    num_classes: usize,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome<ClassifierModel>> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "classifier training set is empty");
    let spec = ClassifierSpec {
        feature_dim: train[0].feature_dim,
        num_classes,
        gin: cfg.gin(),
    };
    let master = Rng::new(cfg.seed);
    let mut model = ClassifierModel::new(spec, &master.fork(0))?;
    let mut adam = Adam::new(&model.store, cfg.lr, cfg.weight_decay);
    let eval = |m: &ClassifierModel, gs: &[Graph]| evaluate_classifier(m, gs, targets, cfg.eval_batch_size, exec);
    let initial = Selected {
        epoch: None,
        id_val_acc: eval(&model, evals[0])?,
        ood_val_acc: eval(&model, evals[1])?,
        ood_test_acc: eval(&model, evals[2])?,
    };
    let mut tracker = Tracker::new(initial);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_rng = master.fork(1).fork(epoch as u64);
        let mut run = ClassifierRun {
            model: &mut model,
            targets,
        };
        let stats = run_epoch(
            &mut run,
            &mut adam,
            train,
            targets,
            cfg,
            Lambdas::default(),
            &epoch_rng,
            epoch,
            exec,
            &|_| true,
        )?;
        let log = EpochLog {
            epoch,
            l_inv: stats.mean(Term::Inv).unwrap_or(0.0),
            l_e: None,
            l_l: None,
            l_pfsc: None,
            l_info: None,
            train_acc: stats.correct as f64 / stats.seen.max(1) as f64,
            id_val_acc: eval(&model, evals[0])?,
            ood_val_acc: eval(&model, evals[1])?,
            ood_test_acc: eval(&model, evals[2])?,
            env_disc_acc_on_gc: None,
            label_disc_acc_on_gs: None,
            pfsc_disc_acc: None,
            motif_edge_prob: None,
            other_edge_prob: None,
            lambda_e: 0.0,
            lambda_l: 0.0,
            lambda_pfsc: 0.0,
        };
        tracker.observe(&log, &model);
        logs.push(log);
    }
    let best_model = tracker.best_model.unwrap_or_else(|| model.clone());
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        logs,
        by_ood_val: tracker.by_ood,
        by_id_val: tracker.by_id,
    })
}

/// Plain GIN classifier on whole graphs (the ERM baseline).
pub fn train_erm_with(split: &DatasetSplit, cfg: &TrainConfig, exec: Exec) -> Result<TrainOutcome<ClassifierModel>> {
    check_split(split)?;
    train_classifier(
        &split.train,
        [&split.id_val, &split.ood_val, &split.ood_test],
        &|g: &Graph| g.y,
        split.num_classes().max(2),
        cfg,
        exec,
    )
}

pub fn train_erm(split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome<ClassifierModel>> {
    train_erm_with(split, cfg, Exec::default())
}
