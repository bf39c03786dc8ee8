//! Evaluation metrics: accuracy, edge-selection quality, independence
//! probes and plug-in mutual information.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::exec::Exec;
use crate::graph::{Batch, Graph};
use crate::model::{AnyModel, LeciModel};
use crate::nn::{Fwd, Group, Mlp, ParamStore};
use crate::rng::Rng;
use crate::selector::top_k_indices;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::train::{train_classifier, Adam, TrainConfig};

/// Fraction of graphs whose predicted class equals `y`.
pub fn accuracy(model: &AnyModel, graphs: &[Graph], eval_batch: usize, exec: Exec) -> Result<f64> {
    ensure!(!graphs.is_empty(), "accuracy needs at least one graph");
    let chunks: Vec<&[Graph]> = graphs.chunks(eval_batch.max(1)).collect();
    let hits = exec.try_map(chunks.len(), |i| -> Result<usize> {
        let batch = Batch::from_graphs(chunks[i])?;
        let pred = model.predict(&batch)?;
        Ok(chunks[i].iter().zip(&pred).filter(|(g, &p)| g.y == p).count())
    })?;
    Ok(hits.into_iter().sum::<usize>() as f64 / graphs.len() as f64)
}

/// Micro-averaged precision, recall and F1 of selected edges against the
/// ground-truth motif edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub selected: usize,
    pub relevant: usize,
}

impl EdgeScore {
    fn from_counts(tp: usize, selected: usize, relevant: usize) -> EdgeScore {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, selected);
        let recall = ratio(tp, relevant);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EdgeScore {
            precision,
            recall,
            f1,
            true_positives: tp,
            selected,
            relevant,
        }
    }
}

fn check_masks(graphs: &[Graph]) -> Result<()> {
    ensure!(!graphs.is_empty(), "edge selection score needs at least one graph");
    if graphs.iter().all(|g| g.motif_mask.iter().all(|&m| !m)) {
        return Err(Error::config("graphs carry no ground-truth motif edges"));
    }
    Ok(())
}

/// Score per-graph edge probabilities: each graph selects its top-k edges with
/// k equal to its number of motif edges.
pub fn edge_selection_score_from_probs(graphs: &[Graph], probs: &[Vec<f64>]) -> Result<EdgeScore> {
    check_masks(graphs)?;
    ensure!(
        graphs.len() == probs.len(),
        "{} graphs but {} probability vectors",
        graphs.len(),
        probs.len()
    );
    let (mut tp, mut sel, mut rel) = (0, 0, 0);
    for (g, p) in graphs.iter().zip(probs) {
        ensure!(p.len() == g.num_edges(), "probability count does not match edge count");
        let k = g.motif_mask.iter().filter(|&&m| m).count();
        let chosen = top_k_indices(p, k);
        tp += chosen.iter().filter(|&&e| g.motif_mask[e]).count();
        sel += chosen.len();
        rel += k;
    }
    Ok(EdgeScore::from_counts(tp, sel, rel))
}

/// Eval-mode selector probabilities of every graph.
pub fn edge_probs(model: &LeciModel, graphs: &[Graph], eval_batch: usize, exec: Exec) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[Graph]> = graphs.chunks(eval_batch.max(1)).collect();
    let parts = exec.try_map(chunks.len(), |i| -> Result<Vec<Vec<f64>>> {
        let batch = Batch::from_graphs(chunks[i])?;
        let inf = model.infer(&batch)?;
        Ok(batch.split_edges(&inf.edge_probs).into_iter().map(<[f64]>::to_vec).collect())
    })?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn edge_selection_score(model: &LeciModel, graphs: &[Graph], eval_batch: usize, exec: Exec) -> Result<EdgeScore> {
    check_masks(graphs)?;
    let probs = edge_probs(model, graphs, eval_batch, exec)?;
    edge_selection_score_from_probs(graphs, &probs)
}

/// Mean F1 of a selector drawing uniform random scores, over `draws` draws.
pub fn random_selector_f1(graphs: &[Graph], draws: usize, rng: &mut Rng) -> Result<f64> {
    ensure!(draws > 0, "random selector needs at least one draw");
    let mut total = 0.0;
    for _ in 0..draws {
        let probs: Vec<Vec<f64>> = graphs
            .iter()
            .map(|g| (0..g.num_edges()).map(|_| rng.uniform()).collect())
            .collect();
        total += edge_selection_score_from_probs(graphs, &probs)?.f1;
    }
    Ok(total / draws as f64)
}

/// Plug-in mutual information (nats) of a joint count table.
///
/// Counts are integers, so a table that is exactly a product of its
/// marginals gives exactly zero.
pub fn plugin_mi(table: &[Vec<u64>]) -> Result<f64> {
    ensure!(!table.is_empty(), "contingency table has no rows");
    let cols = table[0].len();
    ensure!(cols > 0, "contingency table has no columns");
    ensure!(table.iter().all(|r| r.len() == cols), "contingency table is ragged");
    let total: u128 = table.iter().flatten().map(|&c| u128::from(c)).sum();
    ensure!(total > 0, "contingency table is all zero");
    let rows: Vec<u128> = table.iter().map(|r| r.iter().map(|&c| u128::from(c)).sum()).collect();
    let colsum: Vec<u128> = (0..cols).map(|j| table.iter().map(|r| u128::from(r[j])).sum()).collect();
    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let num = u128::from(c) * total;
            let den = rows[i] * colsum[j];
            if num == den {
                continue;
            }
            mi += c as f64 / total as f64 * (num as f64 / den as f64).ln();
        }
    }
    Ok(mi.max(0.0))
}

/// Which frozen view a probe sees and which variable it predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeView {
    /// Causal-view weights, predicting the environment.
    EnvOnCausal,
    /// Spurious-view weights, predicting the label.
    LabelOnSpurious,
    /// The raw graph with its stored weights, predicting the environment.
    EnvOnRaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub view: ProbeView,
    /// Best held-out accuracy over the probe's training epochs.
    pub accuracy: f64,
    /// Majority-class rate on the held-out part.
    pub chance: f64,
    pub num_classes: usize,
}

/// Held-out fraction used by probes.
pub const PROBE_HOLDOUT: f64 = 0.2;

/// Frozen views of `graphs`: purified features with causal or spurious
/// edge weights from the model's eval-mode selector.
pub fn frozen_views(
    model: &LeciModel,
    graphs: &[Graph],
    spurious: bool,
    eval_batch: usize,
    exec: Exec,
) -> Result<Vec<Graph>> {
    let chunks: Vec<&[Graph]> = graphs.chunks(eval_batch.max(1)).collect();
    let parts = exec.try_map(chunks.len(), |i| -> Result<Vec<Graph>> {
        let batch = Batch::from_graphs(chunks[i])?;
        let inf = model.infer(&batch)?;
        let mut out = Vec::with_capacity(chunks[i].len());
        for (k, g) in chunks[i].iter().enumerate() {
            let (n0, n1) = (batch.node_offsets[k], batch.node_offsets[k + 1]);
            let (e0, e1) = (batch.edge_offsets[k], batch.edge_offsets[k + 1]);
            let mut v = g.clone();
            v.x = inf.features[n0 * g.feature_dim..n1 * g.feature_dim].to_vec();
            v.edge_weight = inf.edge_probs[e0..e1]
                .iter()
                .map(|&p| if spurious { 1.0 - p } else { p })
                .collect();
            out.push(v);
        }
        Ok(out)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

fn holdout_split(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!(n >= 5, "a probe needs at least five graphs, got {}", n);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(7).shuffle(&mut order);
    let held = ((n as f64 * PROBE_HOLDOUT).round() as usize).max(1);
    let test = order.split_off(n - held);
    Ok((order, test))
}

fn majority_rate(targets: &[usize], num_classes: usize) -> f64 {
    let mut counts = vec![0usize; num_classes];
    for &t in targets {
        counts[t] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / targets.len().max(1) as f64
}

/// Train a fresh GIN probe on `views` to predict `target` and report its
/// best held-out accuracy.
pub fn probe_graphs(
    view: ProbeView,
    views: &[Graph],
    target: &(dyn Fn(&Graph) -> usize + Sync),
    num_classes: usize,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<ProbeResult> {
    let (train_idx, test_idx) = holdout_split(views.len(), cfg.seed)?;
    let train: Vec<Graph> = train_idx.iter().map(|&i| views[i].clone()).collect();
    let test: Vec<Graph> = test_idx.iter().map(|&i| views[i].clone()).collect();
    let out = train_classifier(&train, [&test, &[], &[]], target, num_classes, cfg, exec)?;
    let accuracy = out
        .logs
        .iter()
        .filter_map(|l| l.id_val_acc)
        .chain(out.by_id_val.id_val_acc)
        .fold(0.0, f64::max);
    let truth: Vec<usize> = test.iter().map(target).collect();
    Ok(ProbeResult {
        view,
        accuracy,
        chance: majority_rate(&truth, num_classes),
        num_classes,
    })
}

/// Independence probe on a frozen LECI model.
pub fn independence_probe(
    model: &LeciModel,
    graphs: &[Graph],
    view: ProbeView,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<ProbeResult> {
    match view {
        ProbeView::EnvOnCausal => {
            let v = frozen_views(model, graphs, false, cfg.eval_batch_size, exec)?;
            probe_graphs(view, &v, &|g: &Graph| g.env, model.spec.num_envs, cfg, exec)
        }
        ProbeView::LabelOnSpurious => {
            let v = frozen_views(model, graphs, true, cfg.eval_batch_size, exec)?;
            probe_graphs(view, &v, &|g: &Graph| g.y, model.spec.num_classes, cfg, exec)
        }
        ProbeView::EnvOnRaw => {
            let envs = graphs.iter().map(|g| g.env + 1).max().unwrap_or(0).max(2);
            probe_graphs(view, graphs, &|g: &Graph| g.env, envs, cfg, exec)
        }
    }
}

/// Accuracy of a graph-level environment readout from node features alone:
/// a node MLP whose per-node log-probabilities are averaged per graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureProbeResult {
    pub accuracy: f64,
    pub chance: f64,
}

/// Train a fresh node-feature environment probe on raw features.
pub fn feature_probe(graphs: &[Graph], num_envs: usize, epochs: usize, seed: u64) -> Result<FeatureProbeResult> {
    ensure!(num_envs >= 2, "feature probe needs at least two environments");
    let (train_idx, test_idx) = holdout_split(graphs.len(), seed)?;
    let d = graphs[0].feature_dim;
    let rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "probe", Group::Classifier, &[d, 32, num_envs], &mut rng.fork(0));
    let mut adam = Adam::new(&store, 1e-2, 0.0);
    let refs = |idx: &[usize]| -> Vec<&Graph> { idx.iter().map(|&i| &graphs[i]).collect() };
    let test_batch = Batch::new(&refs(&test_idx))?;
    let mut best: f64 = 0.0;
    let mut order = train_idx.clone();
    for epoch in 0..epochs {
        rng.fork(1).fork(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(64) {
            let batch = Batch::new(&refs(chunk))?;
            let (mut f, pooled) = probe_forward(&mlp, &store, &batch, true)?;
            let loss = f.tape.nll_loss(pooled, &batch.env)?;
            f.tape.backward(loss)?;
            let grads = f.grads();
            drop(f);
            adam.step(&mut store, &grads, |_| true);
        }
        let (f, pooled) = probe_forward(&mlp, &store, &test_batch, false)?;
        let pred = f.tape.value(pooled).argmax_rows();
        let acc = pred.iter().zip(&test_batch.env).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64;
        best = best.max(acc);
    }
    Ok(FeatureProbeResult {
        accuracy: best,
        chance: majority_rate(&test_batch.env, num_envs),
    })
}

fn probe_forward<'a>(mlp: &Mlp, store: &'a ParamStore, batch: &Batch, train: bool) -> Result<(Fwd<'a>, Var)> {
    let mut f = Fwd::new(store, train);
    let x = f
        .tape
        .constant(Tensor::new(&[batch.num_nodes, batch.feature_dim], batch.x.clone())?);
    let logits = mlp.forward(&mut f, x)?;
    let lp = f.tape.log_softmax(logits)?;
    let pooled = f.tape.segment_mean(lp, &batch.node_graph_id, batch.num_graphs)?;
    Ok((f, pooled))
}

/// Accuracy of the trained feature discriminator on purified features.
pub fn pfsc_probe(model: &LeciModel, graphs: &[Graph], eval_batch: usize, exec: Exec) -> Result<Option<FeatureProbeResult>> {
    if model.pfsc_disc.is_none() {
        return Ok(None);
    }
    ensure!(!graphs.is_empty(), "feature probe needs at least one graph");
    let chunks: Vec<&[Graph]> = graphs.chunks(eval_batch.max(1)).collect();
    let hits = exec.try_map(chunks.len(), |i| -> Result<usize> {
        let batch = Batch::from_graphs(chunks[i])?;
        let inf = model.infer(&batch)?;
        let pred = inf.pfsc_pred.unwrap_or_default();
        Ok(pred.iter().zip(&batch.env).filter(|(a, b)| a == b).count())
    })?;
    let envs: Vec<usize> = graphs.iter().map(|g| g.env).collect();
    Ok(Some(FeatureProbeResult {
        accuracy: hits.into_iter().sum::<usize>() as f64 / graphs.len() as f64,
        chance: majority_rate(&envs, model.spec.num_envs),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(mask: Vec<bool>) -> Graph {
        let n = mask.len() + 1;
        let edges = (1..n).map(|v| (0, v)).collect();
        Graph::new(n, 1, vec![1.0; n], edges, 0, 0, mask).unwrap()
    }

    #[test]
    fn mi_of_product_table_is_exactly_zero() {
        assert_eq!(plugin_mi(&[vec![3, 6], vec![1, 2]]).unwrap(), 0.0);
        let dep = plugin_mi(&[vec![5, 0], vec![0, 5]]).unwrap();
        assert!((dep - 2f64.ln()).abs() < 1e-12);
        assert!(plugin_mi(&[vec![0, 0]]).is_err());
    }

    #[test]
    fn oracle_sized_selection() {
        let g = star(vec![true, true, false, false]);
        let perfect = edge_selection_score_from_probs(&[g.clone()], &[vec![0.9, 0.8, 0.1, 0.2]]).unwrap();
        assert_eq!(perfect.f1, 1.0);
        let half = edge_selection_score_from_probs(&[g.clone()], &[vec![0.9, 0.1, 0.8, 0.2]]).unwrap();
        assert_eq!((half.precision, half.recall), (0.5, 0.5));
        let ties = edge_selection_score_from_probs(&[g], &[vec![0.5; 4]]).unwrap();
        assert_eq!(ties.f1, 1.0);
    }

    #[test]
    fn missing_masks_is_config_error() {
        let g = star(vec![false, false]);
        let err = edge_selection_score_from_probs(&[g], &[vec![0.1, 0.2]]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn random_selector_matches_expectation() {
        // k = 1 motif edge among 4: a random pick hits with probability 1/4.
        let g = star(vec![true, false, false, false]);
        let graphs = vec![g; 50];
        let f1 = random_selector_f1(&graphs, 200, &mut Rng::new(1)).unwrap();
        assert!((f1 - 0.25).abs() < 0.02, "{f1}");
    }
}
