//! Masked first-order optimizers.
//!
//! A parameter moves only when its group is in the step's [`UpdateMask`] and
//! a gradient reached it. Excluded parameters are not touched at all, and
//! their moment estimates do not advance.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::model::{ParamGrads, ParamId, ParamStore};
use crate::numerics::{Real, Tensor};
use crate::schedule::UpdateMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; applied only to parameters that update.
    pub weight_decay: f64,
    /// Rescale the masked gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(arg_err!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(arg_err!("betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(arg_err!("eps must be positive and weight decay non-negative"));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return Err(arg_err!("clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments<S> {
    m: Tensor<S>,
    v: Tensor<S>,
    steps: u64,
}

#[derive(Debug, Clone)]
pub struct Optimizer<S> {
    pub config: OptimizerConfig,
    state: Vec<Option<Moments<S>>>,
}

impl<S: Real> Optimizer<S> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: Vec::new(),
        })
    }

    /// Number of updates parameter `id` has received.
    pub fn steps_of(&self, id: ParamId) -> u64 {
        self.state.get(id.0).and_then(Option::as_ref).map_or(0, |s| s.steps)
    }

    /// Applies one masked update. Returns the number of scalar parameters changed.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &ParamGrads<S>, mask: &UpdateMask) -> usize {
        let active: Vec<ParamId> = store
            .ids()
            .filter(|&p| mask.contains(store.group_of(p)) && grads.get(p).is_some())
            .collect();
        let scale = match self.config.clip_norm {
            Some(c) => {
                let norm = active
                    .iter()
                    .map(|&p| grads.get(p).map_or(0.0, |g| g.sum_sq().as_f64()))
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let cfg = self.config.clone();
        let lr = S::from_f64(cfg.lr);
        let decay = S::from_f64(1.0 - cfg.lr * cfg.weight_decay);
        let gscale = S::from_f64(scale);
        let mut changed = 0;
        for p in active {
            let g = grads.get(p).expect("filtered above");
            let param = store.get_mut(p);
            changed += param.len();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in param.data_mut().iter_mut().zip(g.data()) {
                        if cfg.weight_decay > 0.0 {
                            *w = *w * decay;
                        }
                        *w = *w - lr * gi * gscale;
                    }
                }
                OptimizerKind::Adam => {
                    let slot = &mut self.state[p.0];
                    let st = slot.get_or_insert_with(|| Moments {
                        m: Tensor::zeros(param.shape()),
                        v: Tensor::zeros(param.shape()),
                        steps: 0,
                    });
                    if st.m.shape() != param.shape() {
                        st.m = pad_like(&st.m, param.shape());
                        st.v = pad_like(&st.v, param.shape());
                    }
                    st.steps += 1;
                    let (b1, b2) = (S::from_f64(cfg.beta1), S::from_f64(cfg.beta2));
                    let bc1 = S::one() - b1.powi(st.steps as i32);
                    let bc2 = S::one() - b2.powi(st.steps as i32);
                    let eps = S::from_f64(cfg.eps);
                    let one = S::one();
                    let w = param.data_mut();
                    let m = st.m.data_mut();
                    let v = st.v.data_mut();
                    for i in 0..w.len() {
                        let gi = g.data()[i] * gscale;
                        m[i] = b1 * m[i] + (one - b1) * gi;
                        v[i] = b2 * v[i] + (one - b2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        if cfg.weight_decay > 0.0 {
                            w[i] = w[i] * decay;
                        }
                        w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        changed
    }
}

/// Zero-padded copy of `old` grown to `shape` (trailing entries of 1-D
/// tensors, trailing columns of 2-D tensors).
fn pad_like<S: Real>(old: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    let mut out = Tensor::zeros(shape);
    match (old.shape(), shape) {
        (&[n], &[_]) => out.data_mut()[..n].copy_from_slice(old.data()),
        (&[r, c], &[_, nc]) => {
            for i in 0..r {
                out.data_mut()[i * nc..i * nc + c].copy_from_slice(&old.data()[i * c..(i + 1) * c]);
            }
        }
        _ => {}
    }
    out
}
