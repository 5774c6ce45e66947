//! Adaptive lightweight router.
//!
//! A two-layer MLP, `W2·GELU(W1·h + b1) + b2`, with hidden width `4d`, that
//! takes over routing during fine-tuning. The pretrained linear router stays
//! frozen and serves as a distillation teacher: the router's objective blends
//! a temperature-softened KL term toward the teacher with the task loss, and
//! the blend weight decays linearly as fine-tuning progresses.
//!
//! Weights are stored for row-vector products (`h·W1`), so `W1` is `d × 4d`
//! and `W2` is `4d × |E|`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::model::{Binding, GroupId, GroupKind, ParamId, ParamStore};
use crate::numerics::{softmax_rows, Real, Tape, Tensor, Var};

/// Distillation temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

/// Factor applied to the teacher weights when seeding the first `d` rows of `W2`.
pub const W2_SEED_SCALE: f64 = 1.0;

/// Hidden width multiplier of the router MLP.
pub const HIDDEN_MULTIPLIER: usize = 4;

#[derive(Debug, Clone)]
pub struct AdaptiveRouter {
    pub group: GroupId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub temperature: f64,
}

impl AdaptiveRouter {
    /// Creates the router parameters for `layer` from the teacher weights `original_w` (`d × |E|`).
    ///
    /// `W1` is Kaiming-normal (fan-in `d`, gain `√2`), `W2` holds the teacher
    /// weights scaled by [`W2_SEED_SCALE`] in its first `d` rows and zeros
    /// below, and both biases start at zero.
    pub fn init<S: Real>(
        store: &mut ParamStore<S>,
        layer: usize,
        original_w: ParamId,
        seed: u64,
        temperature: f64,
    ) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(arg_err!("temperature must be positive, got {temperature}"));
        }
        let (d, e) = store.get(original_w).dims2()?;
        let hidden = HIDDEN_MULTIPLIER * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xA5A5_0000 + layer as u64));
        let w1 = Tensor::randn(&[d, hidden], (2.0 / d as f64).sqrt(), &mut rng);
        let mut w2 = vec![S::zero(); hidden * e];
        let scale = S::from_f64(W2_SEED_SCALE);
        for (dst, &src) in w2[..d * e].iter_mut().zip(store.get(original_w).data()) {
            *dst = src * scale;
        }
        let group = store.add_group(format!("layer.{layer}.alr"), GroupKind::Router { layer });
        let p = format!("layer.{layer}.alr");
        Ok(Self {
            group,
            w1: store.add(group, format!("{p}.w1"), w1),
            b1: store.add(group, format!("{p}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(group, format!("{p}.w2"), Tensor::new(&[hidden, e], w2)?),
            b2: store.add(group, format!("{p}.b2"), Tensor::zeros(&[e])),
            temperature,
        })
    }

    pub fn num_experts<S: Real>(&self, store: &ParamStore<S>) -> usize {
        store.get(self.b2).len()
    }

    /// Expert logits `GELU(h·W1 + b1)·W2 + b2`, shape `T × |E|`.
    pub fn adapt_route<S: Real>(&self, tape: &mut Tape<S>, bind: &mut Binding<'_, S>, h: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            bind.var(tape, self.w1),
            bind.var(tape, self.b1),
            bind.var(tape, self.w2),
            bind.var(tape, self.b2),
        );
        let z = tape.matmul(h, w1)?;
        let z = tape.add_row(z, b1)?;
        let z = tape.gelu(z);
        let y = tape.matmul(z, w2)?;
        tape.add_row(y, b2)
    }

    /// Mean over tokens of `KL(softmax(teacher/τ) ‖ softmax(adaptive(h)/τ))`.
    ///
    /// `h` is detached first, so gradients reach only this router's parameters.
    pub fn kd_loss<S: Real>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut Binding<'_, S>,
        teacher_logits: &Tensor<S>,
        h: Var,
    ) -> Result<Var> {
        let inv_tau = S::from_f64(1.0 / self.temperature);
        let mut soft = teacher_logits.clone();
        for v in soft.data_mut() {
            *v = *v * inv_tau;
        }
        let p = softmax_rows(&soft)?;
        let h = tape.detach(h);
        let z = self.adapt_route(tape, bind, h)?;
        let z = tape.scale(z, inv_tau);
        let log_q = tape.log_softmax(z)?;
        tape.kl_divergence(&p, log_q)
    }

    /// Appends a router column copied from expert `src`.
    pub(crate) fn copy_column<S: Real>(&self, store: &mut ParamStore<S>, src: usize) -> Result<()> {
        store.get_mut(self.w2).append_column_copy(src)?;
        store.get_mut(self.b2).append_column_copy(src)
    }
}

/// `λ(α) = max(0, 1 − α)`.
pub fn blend_weight(alpha: f64) -> f64 {
    (1.0 - alpha).max(0.0)
}

/// Position in fine-tuning that sets the distillation weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendSchedule {
    pub total_steps: usize,
    pub step: usize,
}

impl BlendSchedule {
    pub fn new(total_steps: usize, step: usize) -> Result<Self> {
        if total_steps == 0 || step > total_steps {
            return Err(arg_err!("step {step} outside [0, {total_steps}]"));
        }
        Ok(Self { total_steps, step })
    }

    /// Fraction of fine-tuning completed.
    pub fn alpha(&self) -> f64 {
        self.step as f64 / self.total_steps as f64
    }

    pub fn lambda(&self) -> f64 {
        blend_weight(self.alpha())
    }
}

/// `λ·kd + (1 − λ)·task` on plain scalars.
pub fn router_loss(kd: f64, task: f64, schedule: &BlendSchedule) -> f64 {
    let l = schedule.lambda();
    l * kd + (1.0 - l) * task
}

/// `λ·kd + (1 − λ)·task` on the tape.
pub fn router_loss_var<S: Real>(tape: &mut Tape<S>, kd: Var, task: Var, lambda: f64) -> Result<Var> {
    let a = tape.scale(kd, S::from_f64(lambda));
    let b = tape.scale(task, S::from_f64(1.0 - lambda));
    tape.add(a, b)
}
