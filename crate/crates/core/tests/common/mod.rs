//! Shared oracles for the integration tests: central finite differences,
//! brute-force graph isomorphism and small fixtures.

#![allow(dead_code)]

use leci_core::gin::{batch_features, GinConfig};
use leci_core::graph::{Batch, DatasetSplit, Graph};
use leci_core::model::{ClassifierModel, ClassifierSpec, LeciModel, LeciSpec};
use leci_core::motif::{generate, GenConfig};
use leci_core::nn::{Fwd, Grads, Param, ParamStore};
use leci_core::rng::Rng;
use leci_core::tape::{Tape, Var};
use leci_core::tensor::Tensor;
use leci_core::Result;

/// Finite-difference step of the pinned gradient check.
pub const FD_STEP: f64 = 1e-4;
/// `(seed, graphs)` of the batches used with [`FD_STEP`]: no ReLU
/// pre-activation of these models lies within reach of the step, so the
/// central difference stays on one linear piece.
pub const FD_FIXTURES: [(u64, usize); 3] = [(6, 3), (0, 2), (1, 2)];
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Tensor with entries uniform in `[-scale, scale]`, kept at least `gap`
/// away from zero so piecewise-linear ops stay off their kinks.
pub fn random_tensor(shape: &[usize], scale: f64, gap: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = gap + (scale - gap) * rng.uniform();
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of a scalar function of several tensor inputs.
pub fn tape_fd(step: f64, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
        let out = build(&mut t, &vs).unwrap();
        t.scalar(out)
    };
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
    let out = build(&mut t, &vs).unwrap();
    t.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vs.iter().map(|&v| t.grad(v).unwrap().to_vec()).collect();
    let mut worst = 0.0f64;
    let mut vals = inputs.to_vec();
    for i in 0..vals.len() {
        for k in 0..vals[i].len() {
            let orig = vals[i].data()[k];
            vals[i].data_mut()[k] = orig + step;
            let plus = eval(&vals);
            vals[i].data_mut()[k] = orig - step;
            let minus = eval(&vals);
            vals[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i][k], numeric));
        }
    }
    worst
}

/// Largest relative error between `scale * analytic` and central differences
/// of `loss` over every trainable scalar of `store`; `pick` gives the scale
/// of each parameter or skips it.
pub fn store_fd(
    step: f64,
    store: &mut ParamStore,
    analytic: &Grads,
    loss: impl Fn(&ParamStore) -> f64,
    pick: impl Fn(&Param) -> Option<f64>,
) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let Some(scale) = pick(store.get(id)) else {
            continue;
        };
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + step;
            let plus = loss(store);
            store.get_mut(id).value.data_mut()[k] = orig - step;
            let minus = loss(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(scale * analytic.get(id)[k], numeric));
        }
    }
    worst
}

fn canonical(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut e: Vec<_> = edges.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
    e.sort_unstable();
    e
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Isomorphism by trying every node relabelling.
pub fn isomorphic(n_a: usize, a: &[(usize, usize)], n_b: usize, b: &[(usize, usize)]) -> bool {
    if n_a != n_b || a.len() != b.len() {
        return false;
    }
    let target = canonical(b);
    permutations(n_a).into_iter().any(|p| {
        let mapped: Vec<_> = a.iter().map(|&(u, v)| (p[u], p[v])).collect();
        canonical(&mapped) == target
    })
}

/// Nodes touched by a set of edges, relabelled densely in first-seen order.
pub fn induced(edges: &[(usize, usize)]) -> (usize, Vec<(usize, usize)>) {
    let mut ids: Vec<usize> = Vec::new();
    let mut id = |v: usize| match ids.iter().position(|&w| w == v) {
        Some(i) => i,
        None => {
            ids.push(v);
            ids.len() - 1
        }
    };
    let e: Vec<_> = edges.iter().map(|&(u, v)| (id(u), id(v))).collect();
    (ids.len(), e)
}

pub fn small_gen(seed: u64) -> GenConfig {
    GenConfig {
        seed,
        n_per_class_per_env: 4,
        n_id_val_per_class: 4,
        n_ood_per_class: 4,
        ..GenConfig::default()
    }
}

pub fn small_split(seed: u64) -> DatasetSplit {
    generate(&small_gen(seed)).unwrap()
}

/// Replace constant node features with random ones so normalization layers
/// see non-degenerate batches.
pub fn with_random_features(graphs: &[Graph], dim: usize, rng: &mut Rng) -> Vec<Graph> {
    graphs
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.feature_dim = dim;
            g.x = (0..g.num_nodes * dim).map(|_| rng.uniform() * 2.0 - 1.0).collect();
            g
        })
        .collect()
}

pub fn small_spec(feature_dim: usize, virtual_node: bool, use_pfsc: bool) -> LeciSpec {
    LeciSpec {
        feature_dim,
        num_classes: 3,
        num_envs: 3,
        gin: GinConfig {
            num_layers: 2,
            hidden_dim: 6,
            dropout: 0.0,
            virtual_node,
            batch_norm: true,
            epsilon: 0.0,
        },
        tau: 1.0,
        use_pfsc,
    }
}

/// A few training graphs with random features.
pub fn fd_batch(seed: u64, graphs: usize) -> Batch {
    let split = small_split(seed);
    let mut rng = Rng::new(seed + 100);
    let picked: Vec<Graph> = split.train.iter().step_by(4).take(graphs).cloned().collect();
    Batch::from_graphs(&with_random_features(&picked, 3, &mut rng)).unwrap()
}

pub fn small_model(seed: u64, virtual_node: bool) -> LeciModel {
    LeciModel::new(small_spec(3, virtual_node, true), &Rng::new(seed)).unwrap()
}

/// Fill all-zero trainable tensors (biases, zero-initialized heads) with
/// small random values so every gradient path is exercised.
pub fn unzero_params(store: &mut ParamStore, rng: &mut Rng) {
    for p in store.iter_mut() {
        if p.trainable && p.value.data().iter().all(|&v| v == 0.0) {
            for v in p.value.data_mut() {
                *v = 0.2 * rng.uniform() - 0.1;
            }
        }
    }
}

/// Scalar projection of a tensor onto fixed random weights.
pub fn project(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = t.value(v).shape().to_vec();
    let r = random_tensor(&shape, 1.0, 0.1, &mut Rng::new(seed));
    let c = t.constant(r);
    let m = t.mul(v, c)?;
    Ok(t.sum(m))
}

/// Worst finite-difference error of every differentiable tape operation.
pub fn op_fd_errors() -> Vec<(&'static str, f64)> {
    use std::sync::Arc;
    let mut rng = Rng::new(7);
    let mut r = |shape: &[usize]| random_tensor(shape, 1.5, 0.05, &mut rng);
    let (m34, m42, m34b, v4, m53, m63, v3a, v3b) =
        (r(&[3, 4]), r(&[4, 2]), r(&[3, 4]), r(&[4]), r(&[5, 3]), r(&[6, 3]), r(&[3]), r(&[3]));
    let v5 = r(&[5]);
    let positive = Tensor::new(&[3, 4], m34.data().iter().map(|v| v.abs() + 0.2).collect()).unwrap();
    let seg: Arc<[usize]> = Arc::from(vec![0, 0, 1, 2, 2, 2]);
    let idx: Arc<[usize]> = Arc::from(vec![2, 0, 2, 1]);
    let src: Arc<[usize]> = Arc::from(vec![0, 1, 2, 3, 0]);
    let dst: Arc<[usize]> = Arc::from(vec![1, 2, 3, 4, 4]);
    let targets = [0usize, 2, 1, 1, 0];
    let stats_mean = [0.1, -0.2, 0.3];
    let stats_var = [0.5, 1.5, 0.9];
    vec![
        ("matmul", tape_fd(FD_STEP, &[m34.clone(), m42.clone()], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o, 1)
        })),
        ("add_sub_mul", tape_fd(FD_STEP, &[m34.clone(), m34b.clone()], |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(a, s)?;
            let m = t.mul(m, v[1])?;
            project(t, m, 2)
        })),
        ("add_row", tape_fd(FD_STEP, &[m34.clone(), v4.clone()], |t, v| {
            let o = t.add_row(v[0], v[1])?;
            project(t, o, 3)
        })),
        ("affine_relu_sigmoid", tape_fd(FD_STEP, &[m34.clone()], |t, v| {
            let a = t.affine(v[0], 1.7, 0.0);
            let r = t.relu(a);
            let s = t.sigmoid(v[0]);
            let o = t.add(r, s)?;
            project(t, o, 4)
        })),
        ("ln", tape_fd(FD_STEP, &[positive], |t, v| {
            let o = t.ln(v[0])?;
            project(t, o, 5)
        })),
        ("log_softmax_nll", tape_fd(FD_STEP, &[m53.clone()], |t, v| {
            let lp = t.log_softmax(v[0])?;
            t.nll_loss(lp, &targets)
        })),
        ("dropout", tape_fd(FD_STEP, &[m34.clone()], |t, v| {
            let o = t.dropout(v[0], 0.3, &mut Rng::new(9))?;
            project(t, o, 6)
        })),
        ("segment_sum_mean", tape_fd(FD_STEP, &[m63.clone()], |t, v| {
            let s = t.segment_sum(v[0], &seg, 3)?;
            let m = t.segment_mean(v[0], &seg, 3)?;
            let sq = t.mul(s, m)?;
            project(t, sq, 7)
        })),
        ("gather_scale_rows", tape_fd(FD_STEP, &[m34.clone(), v3a.clone()], |t, v| {
            let s = t.scale_rows(v[0], v[1])?;
            let g = t.gather_rows(s, &idx)?;
            project(t, g, 8)
        })),
        ("concat", tape_fd(FD_STEP, &[m34.clone(), m34b.clone()], |t, v| {
            let c = t.concat_last_dim(v[0], v[1])?;
            let r = t.concat_rows(v[0], v[1])?;
            let a = project(t, c, 9)?;
            let b = project(t, r, 10)?;
            let prod = t.mul(a, b)?;
            Ok(prod)
        })),
        ("batch_norm_batch_stats", tape_fd(FD_STEP, &[m63.clone(), v3a.clone(), v3b.clone()], |t, v| {
            let (o, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, None)?;
            project(t, o, 11)
        })),
        ("batch_norm_fixed_stats", tape_fd(FD_STEP, &[m63.clone(), v3a.clone(), v3b.clone()], |t, v| {
            let (o, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, Some((&stats_mean, &stats_var)))?;
            project(t, o, 12)
        })),
        ("gumbel_sigmoid_soft", tape_fd(FD_STEP, &[v5.clone()], |t, v| {
            let o = t.gumbel_sigmoid(v[0], 0.7, false, &mut Rng::new(13))?;
            project(t, o, 13)
        })),
        ("sum_mean_reshape", tape_fd(FD_STEP, &[m34.clone()], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let r = t.reshape(sq, &[12])?;
            let s = t.sum(r);
            let m = t.mean(v[0])?;
            t.mul(s, m)
        })),
        ("edge_aggregate", tape_fd(FD_STEP, &[m53.clone(), v5.clone()], |t, v| {
            let o = t.edge_aggregate(v[0], v[1], &src, &dst)?;
            project(t, o, 14)
        })),
        ("bernoulli_kl", tape_fd(FD_STEP, &[v5], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bernoulli_kl(p, 0.7)
        })),
    ]
}

/// Loss terms of the full objective, by name.
pub const TERMS: [&str; 5] = ["inv", "env", "label", "pfsc", "info"];

fn term_value(model: &LeciModel, store: &ParamStore, batch: &Batch, lambda: f64, term: &str) -> (f64, Option<Grads>) {
    use leci_core::model::{Lambdas, Objective, StepRngs};
    use leci_core::nn::Fwd;
    let lambdas = Lambdas {
        env: lambda,
        label: lambda,
        pfsc: lambda,
    };
    let objective = Objective {
        info_weight: 1.0,
        ..Objective::default()
    };
    let mut f = Fwd::new(store, true);
    let mut rngs = StepRngs::new(&Rng::new(1));
    let t = model.forward_train(&mut f, batch, lambdas, objective, &mut rngs).unwrap();
    let v = match term {
        "inv" => t.inv,
        "env" => t.env.unwrap(),
        "label" => t.label.unwrap(),
        "pfsc" => t.pfsc.unwrap(),
        "info" => t.info.unwrap(),
        other => panic!("unknown term {other}"),
    };
    let value = f.tape.scalar(v);
    f.tape.backward(v).unwrap();
    (value, Some(f.grads()))
}

/// Worst finite-difference error of one loss term over all parameters.
///
/// Parameters upstream of a gradient reversal receive `-lambda` times the
/// true gradient, so their analytic gradient is rescaled by `-1/lambda`
/// before the comparison. The discriminators read a detached copy of the
/// purified features, so for their terms the purifier's analytic gradient
/// is by design not the total derivative and is left out.
pub fn term_fd_error(step: f64, term: &str, lambda: f64, seed: u64, graphs: usize, virtual_node: bool) -> f64 {
    use leci_core::nn::Group;
    let mut model = small_model(seed, virtual_node);
    unzero_params(&mut model.store, &mut Rng::new(seed + 1));
    let batch = fd_batch(seed, graphs);
    let (_, grads) = term_value(&model, &model.store, &batch, lambda, term);
    let grads = grads.unwrap();
    let (reversed, skipped): (&[Group], &[Group]) = match term {
        "env" | "label" => (&[Group::Selector], &[Group::PfscTransform]),
        "pfsc" => (&[Group::PfscTransform], &[]),
        _ => (&[], &[]),
    };
    let mut store = model.store.clone();
    store_fd(
        step,
        &mut store,
        &grads,
        |s| term_value(&model, s, &batch, lambda, term).0,
        |p| {
            if skipped.contains(&p.group) {
                None
            } else if reversed.contains(&p.group) {
                Some(-1.0 / lambda)
            } else {
                Some(1.0)
            }
        },
    )
}

/// Worst finite-difference error of the plain classifier's loss, with a
/// fixed GIN self weight `1 + epsilon`.
pub fn classifier_fd_error(step: f64, seed: u64, epsilon: f64) -> f64 {
    use leci_core::model::{ClassifierModel, ClassifierSpec};
    use leci_core::nn::Fwd;
    let spec = small_spec(3, true, false);
    let spec = ClassifierSpec {
        feature_dim: 3,
        num_classes: 3,
        gin: GinConfig { epsilon, ..spec.gin },
    };
    let mut model = ClassifierModel::new(spec, &Rng::new(seed)).unwrap();
    unzero_params(&mut model.store, &mut Rng::new(seed + 1));
    let batch = fd_batch(seed, 3);
    let loss = |m: &ClassifierModel, s: &ParamStore| {
        let mut f = Fwd::new(s, true);
        let (l, _) = m.loss(&mut f, &batch, &batch.y, &mut Rng::new(0)).unwrap();
        let v = f.tape.scalar(l);
        f.tape.backward(l).unwrap();
        (v, f.grads())
    };
    let (_, grads) = loss(&model, &model.store);
    let mut store = model.store.clone();
    store_fd(step, &mut store, &grads, |s| loss(&model, s).0, |_| Some(1.0))
}

/// Sample means of hard and soft Gumbel-sigmoid draws for one logit, and
/// whether every hard draw was exactly 0 or 1.
pub fn gumbel_means(logit: f64, tau: f64, draws: usize, seed: u64) -> (f64, f64, bool) {
    let logits = Tensor::vector(vec![logit; draws]);
    let mut t = Tape::new();
    let l = t.constant(logits);
    let hard = t.gumbel_sigmoid(l, tau, true, &mut Rng::new(seed)).unwrap();
    let soft = t.gumbel_sigmoid(l, tau, false, &mut Rng::new(seed)).unwrap();
    let h = t.value(hard).data();
    let binary = h.iter().all(|&v| v == 0.0 || v == 1.0);
    let n = draws as f64;
    (h.iter().sum::<f64>() / n, t.value(soft).data().iter().sum::<f64>() / n, binary)
}

/// `E[σ((ℓ + L)/τ)]` for standard logistic `L`, by the midpoint rule over
/// the uniform variable of the reparameterization.
pub fn soft_expectation(logit: f64, tau: f64) -> f64 {
    let n = 1_000_000;
    (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            leci_core::tape::sigmoid((logit + u.ln() - (1.0 - u).ln()) / tau)
        })
        .sum::<f64>()
        / n as f64
}

/// Tolerance of the permutation and batching checks.
pub const INV_TOL: f64 = 1e-9;

/// Eval-mode class logits and edge probabilities of a LECI model.
pub fn leci_logits(m: &LeciModel, batch: &Batch) -> (Tensor, Vec<f64>) {
    let mut f = Fwd::new(&m.store, false);
    let mut rng = Rng::new(0);
    let x = batch_features(&mut f, batch);
    let xp = m.purify(&mut f, x).unwrap();
    let sel = m.selector.select(&mut f, batch, xp, &mut rng).unwrap();
    let logits = m.inv.logits(&mut f, batch, xp, sel.w_c, &mut rng).unwrap();
    (f.tape.value(logits).clone(), f.tape.value(sel.probs).data().to_vec())
}

pub fn inv_classifier(seed: u64, virtual_node: bool) -> ClassifierModel {
    let spec = ClassifierSpec {
        feature_dim: 3,
        num_classes: 3,
        gin: GinConfig {
            num_layers: 3,
            hidden_dim: 8,
            dropout: 0.5,
            virtual_node,
            batch_norm: true,
            epsilon: 0.1,
        },
    };
    let mut m = ClassifierModel::new(spec, &Rng::new(seed)).unwrap();
    unzero_params(&mut m.store, &mut Rng::new(seed + 1));
    m
}

pub fn inv_leci(seed: u64, virtual_node: bool) -> LeciModel {
    let mut m = small_model(seed, virtual_node);
    unzero_params(&mut m.store, &mut Rng::new(seed + 1));
    m
}

pub fn inv_graphs(seed: u64, n: usize) -> Vec<Graph> {
    let split = small_split(seed);
    let picked: Vec<Graph> = split.train.iter().step_by(3).take(n).cloned().collect();
    with_random_features(&picked, 3, &mut Rng::new(seed))
}

pub fn random_perm(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut p);
    p
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn one(g: &Graph) -> Batch {
    Batch::from_graphs(std::slice::from_ref(g)).unwrap()
}
