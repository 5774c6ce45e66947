#![allow(dead_code)]

use moelab::datagen::{sample_batch, BatchMode, DomainBatch, DomainSpec};
use moelab::model::{Binding, ForwardOptions, ModelConfig, MoeModel, ParamGrads, ParamId};
use moelab::numerics::{Precision, Tape, Tensor};
use moelab::specialization::AffinityState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central difference of `f` with respect to element `i` of parameter `id`.
pub fn central_difference(model: &mut MoeModel<f64>, id: ParamId, i: usize, f: &dyn Fn(&MoeModel<f64>) -> f64) -> f64 {
    let orig = model.params.get(id).data()[i];
    model.params.get_mut(id).data_mut()[i] = orig + FD_STEP;
    let up = f(model);
    model.params.get_mut(id).data_mut()[i] = orig - FD_STEP;
    let down = f(model);
    model.params.get_mut(id).data_mut()[i] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries from
/// dominating through finite-difference noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Worst relative error over every parameter element. Parameters without a
/// gradient are compared against zero.
pub fn worst_fd_error(model: &mut MoeModel<f64>, grads: &ParamGrads<f64>, f: &dyn Fn(&MoeModel<f64>) -> f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let n = model.params.get(id).len();
        for i in 0..n {
            let a = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let num = central_difference(model, id, i, f);
            let e = relative_error(a, num);
            if e > worst.0 {
                worst = (e, format!("{}[{i}] analytic {a:e} numeric {num:e}", model.params.name(id)));
            }
        }
    }
    worst
}

pub fn tiny_config(precision: Precision) -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        model_dim: 8,
        num_layers: 2,
        experts_per_layer: 4,
        top_k: 2,
        shared_expert: false,
        expert_hidden_dim: 8,
        attention: true,
        max_seq_len: 16,
        precision,
    }
}

pub fn batch(specs: &[DomainSpec], step: usize, size: usize, mode: BatchMode) -> DomainBatch {
    sample_batch(specs, step, size, mode, 8).unwrap()
}

/// Task loss of `model` on `batch` with nothing special switched on.
pub fn plain_loss(model: &MoeModel<f64>, batch: &DomainBatch) -> f64 {
    let mut tape = Tape::new();
    let mut bind = Binding::new(&model.params);
    let fw = model
        .forward(&mut tape, &mut bind, &batch.inputs, batch.seq_len, ForwardOptions::default())
        .unwrap();
    let l = tape.cross_entropy(fw.logits, &batch.targets).unwrap();
    tape.value(l).item()
}

/// Random row-stochastic-ish affinity matrix.
pub fn random_affinity(rng: &mut ChaCha8Rng, domains: usize, experts: usize) -> Vec<Vec<f64>> {
    (0..domains)
        .map(|_| (0..experts).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// Straight per-row reading of the mask rule: keep experts whose affinity
/// reaches `φ` times the row maximum; an all-zero row keeps everything.
pub fn naive_mask(smoothed: &[Vec<f64>], phi: f64) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    for row in smoothed {
        let mut max = 0.0f64;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut m = Vec::new();
        for &v in row {
            m.push(if max == 0.0 { true } else { v >= phi * max });
        }
        out.push(m);
    }
    out
}

/// Installs a random affinity (and so a random mask) in every state.
pub fn randomize_masks(states: &mut [AffinityState], rng: &mut ChaCha8Rng) {
    for st in states {
        let a = random_affinity(rng, st.domains(), st.experts());
        st.set_smoothed(a).unwrap();
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn snapshot(model: &MoeModel<f64>) -> Vec<Tensor<f64>> {
    model.params.ids().map(|id| model.params.get(id).clone()).collect()
}
