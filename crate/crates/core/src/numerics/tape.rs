//! Reverse-mode gradient tape.
//!
//! Every operation appends one node holding its forward value and enough saved
//! state to run its vector-Jacobian product. Nodes are created in topological
//! order by construction, so the backward pass is a single reverse sweep.

use super::tensor::matmul_raw;
use super::{Real, Tensor};
use crate::error::{arg_err, shape_err, Error, Result};

/// Cubic coefficient of the tanh-form GELU.
pub const GELU_CUBIC: f64 = 0.044715;
/// `sqrt(2/pi)`, the tanh-form GELU scale.
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
/// Variance floor inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
    KlDiv {
        p: Vec<S>,
        log_q: Var,
        rows: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    IndexRows {
        x: Var,
        rows: Vec<usize>,
    },
    Gather {
        x: Var,
        flat: Vec<usize>,
    },
    Combine {
        base: Option<Var>,
        parts: Vec<Var>,
        plan: Vec<Vec<(usize, usize)>>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        scale: S,
        probs: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of the loss with respect to `v`, or `None` when no path reached it.
    pub fn get(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("consistent shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        let shape = &self.shapes[v.0];
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(shape, g).expect("consistent shape"))
    }
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn sorted_sum<S: Real>(vals: &mut [S]) -> S {
    // Accumulate smallest-first so the result depends only on the multiset of terms.
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    vals.iter().fold(S::zero(), |acc, &v| acc + v)
}

/// Softmax of one row restricted to `avail` (all entries when `None`).
fn softmax_row<S: Real>(x: &[S], avail: Option<&[bool]>, out: &mut [S]) -> Result<()> {
    let on = |j: usize| avail.is_none_or(|a| a[j]);
    let mut max = S::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if on(j) {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite softmax input {v}")));
            }
            max = max.max(v);
        }
    }
    if max == S::neg_infinity() {
        return Err(Error::Numeric("softmax row has no available entries".into()));
    }
    let mut exps: Vec<S> = Vec::with_capacity(x.len());
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if on(j) {
            let e = (v - max).exp();
            *o = e;
            exps.push(e);
        } else {
            *o = S::zero();
        }
    }
    let z = sorted_sum(&mut exps);
    for (j, o) in out.iter_mut().enumerate() {
        if on(j) {
            *o = *o / z;
        }
    }
    Ok(())
}

fn log_softmax_row<S: Real>(x: &[S], out: &mut [S]) -> Result<()> {
    let mut max = S::neg_infinity();
    for &v in x {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite log-softmax input {v}")));
        }
        max = max.max(v);
    }
    let mut exps: Vec<S> = x.iter().map(|&v| (v - max).exp()).collect();
    let lse = max + sorted_sum(&mut exps).ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
    Ok(())
}

/// Softmax over the last axis of a matrix, without recording.
pub fn softmax_rows<S: Real>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = x.dims2()?;
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        softmax_row(x.row(i), None, &mut out[i * n..(i + 1) * n])?;
    }
    Tensor::new(&[m, n], out)
}

/// Tanh-approximation GELU of a scalar.
pub fn gelu_scalar<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_SCALE);
    let a = S::from_f64(GELU_CUBIC);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_SCALE);
    let a = S::from_f64(GELU_CUBIC);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
///
/// Entries with `avail[j] == false` are never chosen.
pub fn top_k_indices<S: Real>(x: &[S], k: usize, avail: Option<&[bool]>) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = (0..x.len())
        .filter(|&j| avail.is_none_or(|a| a[j]))
        .collect();
    if k == 0 || k > candidates.len() {
        return Err(arg_err!(
            "top_k needs 1 <= k <= {}, got {}",
            candidates.len(),
            k
        ));
    }
    let mut idx = candidates;
    idx.sort_by(|&a, &b| {
        x[b].partial_cmp(&x[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Detached leaf: never receives gradient contributions.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v`'s current value as a detached leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul {}x{} by {}x{}", m, k, k2, n));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), rg))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(shape_err!(
                "bias {:?} for {}x{} input",
                self.value(bias).shape(),
                m,
                n
            ));
        }
        let b = self.value(bias).data();
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "mul {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), rg))
    }

    /// Scales row `i` of `x[m×n]` by `g[i]`, where `g` is `m×1`.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(g).shape() != [m, 1] {
            return Err(shape_err!(
                "column scale {:?} for {}x{} input",
                self.value(g).shape(),
                m,
                n
            ));
        }
        let gv = self.value(g).data();
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(n)
            .zip(gv)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MulCol(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| v * c).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| gelu_scalar(v)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Row-wise softmax where entries with `avail == false` get exactly zero
    /// probability and are excluded from the normaliser.
    pub fn softmax_masked(&mut self, x: Var, avail: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(a) = avail {
            if a.len() != m * n {
                return Err(shape_err!("mask of {} for {}x{}", a.len(), m, n));
            }
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            softmax_row(
                self.value(x).row(i),
                avail.map(|a| &a[i * n..(i + 1) * n]),
                &mut out[i * n..(i + 1) * n],
            )?;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            log_softmax_row(self.value(x).row(i), &mut out[i * n..(i + 1) * n])?;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::LogSoftmax(x), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    /// Rows whose target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(shape_err!("{} targets for {} rows", targets.len(), m));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(arg_err!("cross entropy over zero target positions"));
        }
        let mut logp = vec![S::zero(); n];
        let mut probs = vec![S::zero(); m * n];
        let mut nll: Vec<S> = Vec::with_capacity(count);
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= n {
                return Err(arg_err!("target {} outside vocabulary {}", t, n));
            }
            log_softmax_row(self.value(logits).row(i), &mut logp)?;
            nll.push(-logp[t]);
            for (p, &l) in probs[i * n..(i + 1) * n].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let total = nll.iter().fold(S::zero(), |a, &b| a + b);
        let loss = total / S::from_f64(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// `(1/m) Σ_i KL(p_i ‖ q_i)` for a fixed distribution matrix `p` and
    /// log-probabilities `log_q`. Uses `0·ln 0 = 0`.
    pub fn kl_divergence(&mut self, p: &Tensor<S>, log_q: Var) -> Result<Var> {
        let (m, n) = self.value(log_q).dims2()?;
        if p.shape() != [m, n] {
            return Err(shape_err!("p {:?} vs log_q {}x{}", p.shape(), m, n));
        }
        let tol = 1e-6;
        for i in 0..m {
            let row = p.row(i);
            if row.iter().any(|v| !v.is_finite() || *v < S::zero()) {
                return Err(Error::Numeric(format!("row {i} of p is not a distribution")));
            }
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::Numeric(format!("row {i} of p sums to {s}")));
            }
        }
        let lq = self.value(log_q).data();
        let mut terms: Vec<S> = Vec::with_capacity(m);
        for i in 0..m {
            let mut acc = S::zero();
            for j in 0..n {
                let pv = p.data()[i * n + j];
                if pv > S::zero() {
                    acc = acc + pv * (pv.ln() - lq[i * n + j]);
                }
            }
            terms.push(acc);
        }
        let loss = terms.iter().fold(S::zero(), |a, &b| a + b) / S::from_f64(m as f64);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("kl divergence is {loss}")));
        }
        let rg = self.rg(log_q);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDiv {
                p: p.data().to_vec(),
                log_q,
                rows: m,
            },
            rg,
        ))
    }

    /// Row-wise layer normalisation with learned `gain[n]` and `bias[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(shape_err!("layer norm parameters must be [{}]", n));
        }
        let eps = S::from_f64(LAYER_NORM_EPS);
        let nn = S::from_f64(n as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = self.value(x).row(i);
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) / nn;
            let var = row
                .iter()
                .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nn;
            let r = S::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Rows `ids` of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(arg_err!("token id {} outside vocabulary {}", bad, v));
        }
        let t = self.value(table).data();
        let out: Vec<S> = ids
            .iter()
            .flat_map(|&i| t[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(bad) = rows.iter().find(|&&r| r >= m) {
            return Err(shape_err!("row {} out of {}", bad, m));
        }
        let t = self.value(x).data();
        let out: Vec<S> = rows
            .iter()
            .flat_map(|&r| t[r * n..(r + 1) * n].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[rows.len(), n], out)?,
            Op::IndexRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Picks flat-indexed entries of `x` into a tensor of shape `shape`.
    pub fn gather(&mut self, x: Var, flat: &[usize], shape: &[usize]) -> Result<Var> {
        let len = self.value(x).len();
        if let Some(bad) = flat.iter().find(|&&i| i >= len) {
            return Err(shape_err!("gather index {} out of {}", bad, len));
        }
        let t = self.value(x).data();
        let out: Vec<S> = flat.iter().map(|&i| t[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                x,
                flat: flat.to_vec(),
            },
            rg,
        ))
    }

    /// Differentiable top-k of a vector: selection is constant, values carry gradient.
    pub fn top_k(&mut self, x: Var, k: usize) -> Result<(Vec<usize>, Var)> {
        let t = self.value(x);
        if t.shape().len() != 1 {
            return Err(shape_err!("top_k expects a vector, got {:?}", t.shape()));
        }
        let idx = top_k_indices(t.data(), k, None)?;
        let vals = self.gather(x, &idx, &[k])?;
        Ok((idx, vals))
    }

    /// Builds `out[rows×width]` where row `i` is `base[i]` (or zero) plus the
    /// listed `(part, row)` rows of `parts`, accumulated in the listed order.
    pub fn combine_rows(
        &mut self,
        base: Option<Var>,
        parts: &[Var],
        plan: &[Vec<(usize, usize)>],
        width: usize,
    ) -> Result<Var> {
        let rows = plan.len();
        if let Some(b) = base {
            if self.value(b).shape() != [rows, width] {
                return Err(shape_err!("combine base {:?}", self.value(b).shape()));
            }
        }
        for &p in parts {
            if self.value(p).dims2()?.1 != width {
                return Err(shape_err!("combine part width {:?}", self.value(p).shape()));
            }
        }
        let mut out = match base {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![S::zero(); rows * width],
        };
        for (i, entries) in plan.iter().enumerate() {
            for &(p, r) in entries {
                let src = self.value(parts[p]).row(r);
                for (o, &s) in out[i * width..(i + 1) * width].iter_mut().zip(src) {
                    *o = *o + s;
                }
            }
        }
        let rg = base.is_some_and(|b| self.rg(b)) || parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[rows, width], out)?,
            Op::Combine {
                base,
                parts: parts.to_vec(),
                plan: plan.to_vec(),
            },
            rg,
        ))
    }

    /// Single-head causal attention over consecutive blocks of `seq_len` rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize) -> Result<Var> {
        let (m, d) = self.value(q).dims2()?;
        if self.value(k).shape() != [m, d] || self.value(v).shape() != [m, d] {
            return Err(shape_err!("attention q/k/v shapes differ"));
        }
        if seq_len == 0 || m % seq_len != 0 {
            return Err(shape_err!("{} rows not divisible by sequence length {}", m, seq_len));
        }
        let scale = S::one() / S::from_f64(d as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let l = seq_len;
        let mut probs = vec![S::zero(); m * l];
        let mut out = vec![S::zero(); m * d];
        let mut scores = vec![S::zero(); l];
        for b in 0..m / l {
            let base = b * l;
            for i in 0..l {
                let qi = &qd[(base + i) * d..(base + i + 1) * d];
                for j in 0..=i {
                    let kj = &kd[(base + j) * d..(base + j + 1) * d];
                    let dot = qi.iter().zip(kj).fold(S::zero(), |a, (&x, &y)| a + x * y);
                    scores[j] = dot * scale;
                }
                let prow = &mut probs[(base + i) * l..(base + i + 1) * l];
                softmax_row(&scores[..=i], None, &mut prow[..=i])?;
                let orow = &mut out[(base + i) * d..(base + i + 1) * d];
                for j in 0..=i {
                    let pj = prow[j];
                    let vj = &vd[(base + j) * d..(base + j + 1) * d];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o = *o + pj * x;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(&[m, d], out)?,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                scale,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(S::zero(), |a, &b| a + b);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(S::zero(), |a, &b| a + b) / S::from_f64(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves that asked for gradients keep them.
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn acc<F: FnOnce(&mut [S])>(&self, grads: &mut [Option<Vec<S>>], v: Var, f: F) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.value(v).len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    // ga += g · bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = S::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + s;
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    // gb += aᵀ · g
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == S::zero() {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o = *o + av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(grads, v, |gv| {
                        for (o, &x) in gv.iter_mut().zip(g) {
                            *o = *o + x;
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                let n = self.value(*bias).len();
                self.acc(grads, *x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v;
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *o = *o + gv * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(ad) {
                        *o = *o + gv * x;
                    }
                });
            }
            Op::MulCol(x, s) => {
                let n = self.value(*x).shape()[1];
                let (xd, sd) = (self.value(*x).data(), self.value(*s).data());
                self.acc(grads, *x, |gx| {
                    for (i, &c) in sd.iter().enumerate() {
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + g[i * n + j] * c;
                        }
                    }
                });
                self.acc(grads, *s, |gs| {
                    for (i, o) in gs.iter_mut().enumerate() {
                        let mut acc = S::zero();
                        for j in 0..n {
                            acc = acc + g[i * n + j] * xd[i * n + j];
                        }
                        *o = *o + acc;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v * *c;
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((o, &v), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        *o = *o + v * gelu_grad(xi);
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, n) = node.value.dims2().unwrap();
                let y = node.value.data();
                self.acc(grads, *x, |gx| {
                    for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot = yr.iter().zip(gr).fold(S::zero(), |a, (&p, &q)| a + p * q);
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (_, n) = node.value.dims2().unwrap();
                let y = node.value.data();
                self.acc(grads, *x, |gx| {
                    for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let gsum = gr.iter().fold(S::zero(), |a, &v| a + v);
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + gr[j] - yr[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = self.value(*logits).shape()[1];
                let scale = g[0] / S::from_f64(*count as f64);
                self.acc(grads, *logits, |gl| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..n {
                            gl[i * n + j] = gl[i * n + j] + probs[i * n + j] * scale;
                        }
                        gl[i * n + t] = gl[i * n + t] - scale;
                    }
                });
            }
            Op::KlDiv { p, log_q, rows } => {
                let scale = g[0] / S::from_f64(*rows as f64);
                self.acc(grads, *log_q, |gq| {
                    for (o, &pv) in gq.iter_mut().zip(p) {
                        *o = *o - pv * scale;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let gd = self.value(*gain).data();
                self.acc(grads, *gain, |gg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                });
                let nn = S::from_f64(n as f64);
                self.acc(grads, *x, |gx| {
                    for (i, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..n {
                            let dh = gr[j] * gd[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                        }
                        m1 = m1 / nn;
                        m2 = m2 / nn;
                        for j in 0..n {
                            let dh = gr[j] * gd[j];
                            gx[i * n + j] = gx[i * n + j] + rstd[i] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                self.acc(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::IndexRows { x, rows } => {
                let n = self.value(*x).shape()[1];
                self.acc(grads, *x, |gx| {
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..n {
                            gx[src * n + j] = gx[src * n + j] + g[r * n + j];
                        }
                    }
                });
            }
            Op::Gather { x, flat } => {
                self.acc(grads, *x, |gx| {
                    for (&i, &v) in flat.iter().zip(g) {
                        gx[i] = gx[i] + v;
                    }
                });
            }
            Op::Combine { base, parts, plan } => {
                let w = node.value.shape()[1];
                if let Some(b) = base {
                    self.acc(grads, *b, |gb| {
                        for (o, &v) in gb.iter_mut().zip(g) {
                            *o = *o + v;
                        }
                    });
                }
                for (pi, &p) in parts.iter().enumerate() {
                    self.acc(grads, p, |gp| {
                        for (i, entries) in plan.iter().enumerate() {
                            for &(part, r) in entries {
                                if part != pi {
                                    continue;
                                }
                                for j in 0..w {
                                    gp[r * w + j] = gp[r * w + j] + g[i * w + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                scale,
                probs,
            } => self.attention_backward(*q, *k, *v, *seq_len, *scale, probs, g, grads),
            Op::Sum(x) => {
                self.acc(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                });
            }
            Op::Mean(x) => {
                let c = g[0] / S::from_f64(self.value(*x).len() as f64);
                self.acc(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o = *o + c;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        l: usize,
        scale: S,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let (m, d) = self.value(q).dims2().unwrap();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut gq = vec![S::zero(); m * d];
        let mut gk = vec![S::zero(); m * d];
        let mut gv = vec![S::zero(); m * d];
        let mut dp = vec![S::zero(); l];
        for b in 0..m / l {
            let base = b * l;
            for i in 0..l {
                let gi = &g[(base + i) * d..(base + i + 1) * d];
                let prow = &probs[(base + i) * l..(base + i + 1) * l];
                for j in 0..=i {
                    let vj = &vd[(base + j) * d..(base + j + 1) * d];
                    dp[j] = gi.iter().zip(vj).fold(S::zero(), |a, (&x, &y)| a + x * y);
                    for (o, &x) in gv[(base + j) * d..(base + j + 1) * d].iter_mut().zip(gi) {
                        *o = *o + prow[j] * x;
                    }
                }
                let dot = (0..=i).fold(S::zero(), |a, j| a + prow[j] * dp[j]);
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    for c in 0..d {
                        gq[(base + i) * d + c] = gq[(base + i) * d + c] + ds * kd[(base + j) * d + c];
                        gk[(base + j) * d + c] = gk[(base + j) * d + c] + ds * qd[(base + i) * d + c];
                    }
                }
            }
        }
        for (var, src) in [(q, gq), (k, gk), (v, gv)] {
            self.acc(grads, var, |o| {
                for (a, b) in o.iter_mut().zip(src) {
                    *a = *a + b;
                }
            });
        }
    }
}
