//! Reverse-mode automatic differentiation on a single-threaded tape.
//!
//! Values are appended to the tape in evaluation order, so node indices are a
//! topological order and the recorded graph is acyclic by construction.
//! [`Tape::backward`] sweeps the tape once in reverse with a fresh adjoint
//! buffer and then *adds* the result into the persistent gradient slot of
//! every retained node (leaves created with [`Tape::leaf`], or anything passed
//! to [`Tape::retain_grad`]). Calling it twice without [`Tape::zero_grad`]
//! therefore doubles the stored gradients.

use std::sync::Arc;

use crate::error::{ensure, Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    LogSoftmax(Var),
    Nll(Var, Arc<[usize]>),
    Dropout(Var, Vec<f64>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentMean(Var, Arc<[usize]>, Vec<f64>),
    GatherRows(Var, Arc<[usize]>),
    ScaleRows(Var, Var),
    Concat(Var, Var),
    ConcatRows(Var, Var),
    BatchNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GradReverse(Var, f64),
    GumbelSigmoid(Var, Vec<f64>, f64),
    Sum(Var),
    Mean(Var),
    EdgeAggregate {
        h: Var,
        w: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
    },
    Reshape(Var),
    BernoulliKl(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const PROB_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; its gradient is kept after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].retain = true;
        v
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Keep the gradient of an intermediate value after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        ensure!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            "{} shape mismatch {:?} vs {:?}",
            what,
            self.value(a).shape(),
            self.value(b).shape()
        );
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, data).expect("same shape"), op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, data).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[i, j] + bias[j]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        ensure!(
            sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0],
            "add_row shape mismatch {:?} + {:?}",
            sa,
            sb
        );
        let cols = sa[1];
        let shape = sa.to_vec();
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % cols])
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::new(&shape, data)?, Op::AddRow(a, bias), rg))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.map(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        ensure!(
            self.value(a).data().iter().all(|&x| x > 0.0),
            "ln of a non-positive value"
        );
        Ok(self.map(a, Op::Ln(a), f64::ln))
    }

    /// Row-wise log-softmax over the last dimension of a matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        ensure!(t.shape().len() == 2, "log_softmax expects a matrix, got {:?}", t.shape());
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax(a), rg))
    }

    /// Mean negative log-likelihood of `targets` under row log-probabilities.
    pub fn nll_loss(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logp);
        ensure!(t.shape().len() == 2, "nll_loss expects a matrix");
        ensure!(
            t.rows() == targets.len() && !targets.is_empty(),
            "nll_loss has {} rows but {} targets",
            t.rows(),
            targets.len()
        );
        let c = t.cols();
        ensure!(targets.iter().all(|&y| y < c), "nll_loss target out of range 0..{}", c);
        let total: f64 = targets.iter().enumerate().map(|(i, &y)| -t.at(i, y)).sum();
        let loss = total / targets.len() as f64;
        let rg = self.rg(logp);
        Ok(self.push(Tensor::scalar(loss), Op::Nll(logp, targets.into()), rg))
    }

    /// Inverted dropout: kept entries are divided by the keep probability.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        ensure!((0.0..1.0).contains(&p), "dropout probability {} not in [0,1)", p);
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Dropout(a, mask), rg))
    }

    fn check_segments(&self, a: Var, seg: &[usize], num_segments: usize) -> Result<()> {
        ensure!(
            self.value(a).rows() == seg.len(),
            "segment vector has {} entries for {} rows",
            seg.len(),
            self.value(a).rows()
        );
        ensure!(
            seg.iter().all(|&s| s < num_segments),
            "segment id out of range 0..{}",
            num_segments
        );
        Ok(())
    }

    /// Sum rows that share a segment id: `out[s] = Σ_{i: seg[i]=s} a[i]`.
    pub fn segment_sum(&mut self, a: Var, seg: &Arc<[usize]>, num_segments: usize) -> Result<Var> {
        self.check_segments(a, seg, num_segments)?;
        let d = self.value(a).cols();
        let mut out = vec![0.0; num_segments * d];
        for (row, &s) in self.value(a).data().chunks(d).zip(seg.iter()) {
            for (o, x) in out[s * d..(s + 1) * d].iter_mut().zip(row) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[num_segments, d], out)?,
            Op::SegmentSum(a, seg.clone()),
            rg,
        ))
    }

    /// Mean of rows per segment. Every segment must be nonempty.
    pub fn segment_mean(&mut self, a: Var, seg: &Arc<[usize]>, num_segments: usize) -> Result<Var> {
        self.check_segments(a, seg, num_segments)?;
        let mut counts = vec![0usize; num_segments];
        for &s in seg.iter() {
            counts[s] += 1;
        }
        ensure!(counts.iter().all(|&c| c > 0), "segment_mean over an empty segment");
        let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
        let d = self.value(a).cols();
        let mut out = vec![0.0; num_segments * d];
        for (row, &s) in self.value(a).data().chunks(d).zip(seg.iter()) {
            for (o, x) in out[s * d..(s + 1) * d].iter_mut().zip(row) {
                *o += x;
            }
        }
        for (s, chunk) in out.chunks_mut(d).enumerate() {
            for o in chunk {
                *o *= inv[s];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[num_segments, d], out)?,
            Op::SegmentMean(a, seg.clone(), inv),
            rg,
        ))
    }

    /// `out[j] = a[idx[j]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &Arc<[usize]>) -> Result<Var> {
        let t = self.value(a);
        let n = t.rows();
        ensure!(idx.iter().all(|&i| i < n), "gather index out of range 0..{}", n);
        let d = t.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[idx.len(), d], out)?, Op::GatherRows(a, idx.clone()), rg))
    }

    /// `out[j, :] = w[j] * a[j, :]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        ensure!(
            tw.shape().len() == 1 && tw.len() == ta.rows(),
            "scale_rows: {} weights for {} rows",
            tw.len(),
            ta.rows()
        );
        let d = ta.cols();
        let data = ta
            .data()
            .chunks(d)
            .zip(tw.data())
            .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(Tensor::new(&shape, data)?, Op::ScaleRows(a, w), rg))
    }

    /// Concatenate two matrices along the last dimension.
    pub fn concat_last_dim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(
            ta.shape().len() == 2 && tb.shape().len() == 2 && ta.rows() == tb.rows(),
            "concat shape mismatch {:?} | {:?}",
            ta.shape(),
            tb.shape()
        );
        let (p, q) = (ta.cols(), tb.cols());
        ensure!(p > 0 && q > 0, "concat of a zero-width matrix");
        let mut out = Vec::with_capacity(ta.rows() * (p + q));
        for (ra, rb) in ta.data().chunks(p).zip(tb.data().chunks(q)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let rows = ta.rows();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[rows, p + q], out)?, Op::Concat(a, b), rg))
    }

    /// Stack two matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(
            ta.shape().len() == 2 && tb.shape().len() == 2 && ta.cols() == tb.cols(),
            "concat_rows shape mismatch {:?} / {:?}",
            ta.shape(),
            tb.shape()
        );
        let shape = [ta.rows() + tb.rows(), ta.cols()];
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        out.extend_from_slice(ta.data());
        out.extend_from_slice(tb.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatRows(a, b), rg))
    }

    /// Column-wise batch normalization `γ·(x − μ)/sqrt(σ² + eps) + β`.
    ///
    /// With `stats = None` the mean and biased variance come from the rows of
    /// `a` and gradients flow through them; they are returned so callers can
    /// track running estimates. With `Some((mean, var))` the given statistics
    /// are used as constants.
    pub fn batch_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let ta = self.value(a);
        ensure!(ta.shape().len() == 2, "batch_norm expects a matrix");
        let (n, d) = (ta.rows(), ta.cols());
        ensure!(
            self.value(gamma).shape() == [d] && self.value(beta).shape() == [d],
            "batch_norm scale/shift must have length {}",
            d
        );
        let (mean, var) = match stats {
            Some((m, v)) => {
                ensure!(m.len() == d && v.len() == d, "batch_norm statistics must have length {}", d);
                (m.to_vec(), v.to_vec())
            }
            None => {
                ensure!(n > 0, "batch_norm over zero rows");
                let mut mean = vec![0.0; d];
                for row in ta.data().chunks(d) {
                    add_into(&mut mean, row);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for row in ta.data().chunks(d) {
                    for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for row in ta.data().chunks(d) {
            for k in 0..d {
                let h = (row[k] - mean[k]) * inv_std[k];
                xhat.push(h);
                out.push(gv[k] * h + bv[k]);
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(&[n, d], out)?,
            Op::BatchNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_none(),
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Identity forward; the backward pass multiplies the gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        ensure!(lambda >= 0.0, "gradient reversal strength must be nonnegative, got {}", lambda);
        let value = self.value(a).clone();
        let rg = self.rg(a);
        Ok(self.push(value, Op::GradReverse(a, lambda), rg))
    }

    /// Relaxed Bernoulli sample `σ((ℓ + log u − log(1−u)) / τ)` per element.
    ///
    /// With `hard`, the forward value is rounded to {0, 1} while the backward
    /// pass uses the gradient of the soft sample (straight-through).
    pub fn gumbel_sigmoid(&mut self, logits: Var, tau: f64, hard: bool, rng: &mut Rng) -> Result<Var> {
        ensure!(tau > 0.0, "temperature must be positive, got {}", tau);
        let soft: Vec<f64> = self
            .value(logits)
            .data()
            .iter()
            .map(|&l| {
                let u = rng.uniform_open();
                sigmoid((l + u.ln() - (-u).ln_1p()) / tau)
            })
            .collect();
        let out = if hard {
            soft.iter().map(|&s| if s >= 0.5 { 1.0 } else { 0.0 }).collect()
        } else {
            soft.clone()
        };
        let shape = self.value(logits).shape().to_vec();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::new(&shape, out)?, Op::GumbelSigmoid(logits, soft, tau), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        ensure!(!t.is_empty(), "mean of an empty tensor");
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Weighted neighbour sum over undirected edges, in both directions:
    /// `out[v] = Σ_{e=(u,v)} w[e]·h[u] + Σ_{e=(v,u)} w[e]·h[u]`.
    pub fn edge_aggregate(
        &mut self,
        h: Var,
        w: Var,
        src: &Arc<[usize]>,
        dst: &Arc<[usize]>,
    ) -> Result<Var> {
        let (th, tw) = (self.value(h), self.value(w));
        ensure!(th.shape().len() == 2, "edge_aggregate expects node matrix");
        ensure!(
            src.len() == dst.len() && tw.len() == src.len() && tw.shape().len() == 1,
            "edge_aggregate: {} weights for {} edges",
            tw.len(),
            src.len()
        );
        let n = th.rows();
        ensure!(
            src.iter().chain(dst.iter()).all(|&v| v < n),
            "edge endpoint out of range 0..{}",
            n
        );
        let d = th.cols();
        let hd = th.data();
        let mut out = vec![0.0; n * d];
        for ((&u, &v), &we) in src.iter().zip(dst.iter()).zip(tw.data()) {
            for k in 0..d {
                out[v * d + k] += we * hd[u * d + k];
            }
            for k in 0..d {
                out[u * d + k] += we * hd[v * d + k];
            }
        }
        let rg = self.rg(h) || self.rg(w);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::EdgeAggregate {
                h,
                w,
                src: src.clone(),
                dst: dst.clone(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Mean of `KL(Bernoulli(p) ‖ Bernoulli(r))` over the entries of `p`.
    pub fn bernoulli_kl(&mut self, p: Var, r: f64) -> Result<Var> {
        ensure!(r > 0.0 && r < 1.0, "reference probability {} not in (0,1)", r);
        let t = self.value(p);
        ensure!(!t.is_empty(), "bernoulli_kl of an empty tensor");
        let total: f64 = t
            .data()
            .iter()
            .map(|&x| {
                let x = x.clamp(PROB_EPS, 1.0 - PROB_EPS);
                x * (x / r).ln() + (1.0 - x) * ((1.0 - x) / (1.0 - r)).ln()
            })
            .sum();
        let v = total / t.len() as f64;
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(v), Op::BernoulliKl(p, r), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulate d(loss)/d(node) into every retained node upstream of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0; self.value(loss).len()]);
        let mut kept = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            if self.nodes[i].retain {
                kept.push((i, g));
            }
        }
        for (i, g) in kept {
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(&g) {
                        *a += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(da) = self.slot(adj, *a) {
                    gemm(m, n, k, g, false, bv, true, 1.0, da);
                }
                if let Some(db) = self.slot(adj, *b) {
                    gemm(k, m, n, av, true, g, false, 1.0, db);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(adj, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(adj, *b) {
                    for (d, x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
                let cols = self.value(*bias).len();
                if let Some(db) = self.slot(adj, *bias) {
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for ((d, x), y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::Affine(a, scale) => {
                if let Some(da) = self.slot(adj, *a) {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += scale * x;
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, x), inp) in da.iter_mut().zip(g).zip(av) {
                        if *inp > 0.0 {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, x), s) in da.iter_mut().zip(g).zip(out) {
                        *d += x * s * (1.0 - s);
                    }
                }
            }
            Op::Ln(a) => {
                let av = self.value(*a).data();
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, x), inp) in da.iter_mut().zip(g).zip(av) {
                        *d += x / inp;
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                if let Some(da) = self.slot(adj, *a) {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let gs: f64 = grow.iter().sum();
                        for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += x - y.exp() * gs;
                        }
                    }
                }
            }
            Op::Nll(a, targets) => {
                let c = self.value(*a).cols();
                let scale = -g[0] / targets.len() as f64;
                if let Some(da) = self.slot(adj, *a) {
                    for (r, &y) in targets.iter().enumerate() {
                        da[r * c + y] += scale;
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, x), m) in da.iter_mut().zip(g).zip(mask) {
                        *d += x * m;
                    }
                }
            }
            Op::SegmentSum(a, seg) => {
                let d = node.value.cols();
                if let Some(da) = self.slot(adj, *a) {
                    for (row, &s) in da.chunks_mut(d).zip(seg.iter()) {
                        add_into(row, &g[s * d..(s + 1) * d]);
                    }
                }
            }
            Op::SegmentMean(a, seg, inv) => {
                let d = node.value.cols();
                if let Some(da) = self.slot(adj, *a) {
                    for (row, &s) in da.chunks_mut(d).zip(seg.iter()) {
                        for (r, x) in row.iter_mut().zip(&g[s * d..(s + 1) * d]) {
                            *r += x * inv[s];
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let d = node.value.cols();
                if let Some(da) = self.slot(adj, *a) {
                    for (grow, &src) in g.chunks(d).zip(idx.iter()) {
                        add_into(&mut da[src * d..(src + 1) * d], grow);
                    }
                }
            }
            Op::ScaleRows(a, w) => {
                let d = node.value.cols();
                let (av, wv) = (self.value(*a).data(), self.value(*w).data());
                if let Some(da) = self.slot(adj, *a) {
                    for ((drow, grow), s) in da.chunks_mut(d).zip(g.chunks(d)).zip(wv) {
                        for (x, y) in drow.iter_mut().zip(grow) {
                            *x += y * s;
                        }
                    }
                }
                if let Some(dw) = self.slot(adj, *w) {
                    for ((dws, grow), arow) in dw.iter_mut().zip(g.chunks(d)).zip(av.chunks(d)) {
                        *dws += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::Concat(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                let w = p + q;
                if let Some(da) = self.slot(adj, *a) {
                    for (drow, grow) in da.chunks_mut(p).zip(g.chunks(w)) {
                        add_into(drow, &grow[..p]);
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for (drow, grow) in db.chunks_mut(q).zip(g.chunks(w)) {
                        add_into(drow, &grow[p..]);
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, &g[..split]);
                }
                if let Some(db) = self.slot(adj, *b) {
                    add_into(db, &g[split..]);
                }
            }
            Op::BatchNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = inv_std.len();
                let n = node.value.rows();
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for k in 0..d {
                        sum_g[k] += grow[k];
                        sum_gx[k] += grow[k] * xrow[k];
                    }
                }
                if let Some(dgamma) = self.slot(adj, *gamma) {
                    add_into(dgamma, &sum_gx);
                }
                if let Some(dbeta) = self.slot(adj, *beta) {
                    add_into(dbeta, &sum_g);
                }
                if let Some(da) = self.slot(adj, *a) {
                    let nf = n as f64;
                    for ((drow, grow), xrow) in da.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)) {
                        for k in 0..d {
                            let scaled = gv[k] * inv_std[k];
                            drow[k] += if *batch_stats {
                                scaled * (grow[k] - sum_g[k] / nf - xrow[k] * sum_gx[k] / nf)
                            } else {
                                scaled * grow[k]
                            };
                        }
                    }
                }
            }
            Op::GradReverse(a, lambda) => {
                let s = -lambda;
                if let Some(da) = self.slot(adj, *a) {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += s * x;
                    }
                }
            }
            Op::GumbelSigmoid(a, soft, tau) => {
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, x), s) in da.iter_mut().zip(g).zip(soft) {
                        *d += x * s * (1.0 - s) / tau;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(da) = self.slot(adj, *a) {
                    for d in da.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::EdgeAggregate { h, w, src, dst } => {
                let d = node.value.cols();
                let (hv, wv) = (self.value(*h).data(), self.value(*w).data());
                if let Some(dh) = self.slot(adj, *h) {
                    for ((&u, &v), &we) in src.iter().zip(dst.iter()).zip(wv) {
                        for k in 0..d {
                            dh[u * d + k] += we * g[v * d + k];
                        }
                        for k in 0..d {
                            dh[v * d + k] += we * g[u * d + k];
                        }
                    }
                }
                if let Some(dw) = self.slot(adj, *w) {
                    for ((&u, &v), dwe) in src.iter().zip(dst.iter()).zip(dw.iter_mut()) {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += g[v * d + k] * hv[u * d + k] + g[u * d + k] * hv[v * d + k];
                        }
                        *dwe += acc;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
            }
            Op::BernoulliKl(p, r) => {
                let pv = self.value(*p).data();
                let n = pv.len() as f64;
                let logit_r = (r / (1.0 - r)).ln();
                if let Some(dp) = self.slot(adj, *p) {
                    for (d, &x) in dp.iter_mut().zip(pv) {
                        let x = x.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        *d += g[0] / n * ((x / (1.0 - x)).ln() - logit_r);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
