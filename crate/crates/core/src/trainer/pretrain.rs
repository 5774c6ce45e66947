use log::info;

use super::config::PretrainConfig;
use super::grads::{compute_gradients, LossSpec};
use super::metrics::MetricsRecord;
use crate::datagen::{exact_match_eval, train_index, DomainBatch, DomainSpec, EvalSuite, Example, GeneralTask};
use crate::error::{arg_err, Error, Result};
use crate::model::{ModelConfig, MoeModel};
use crate::numerics::Real;
use crate::optim::Optimizer;
use crate::schedule::UpdateMask;

#[derive(Debug, Clone)]
pub struct PretrainOutcome<S> {
    pub model: MoeModel<S>,
    pub metrics: Vec<MetricsRecord>,
}

/// Pretraining batch for `step`: the first `⌈fraction·B⌉` sequences come from
/// the general task, the rest cycle through the domains. General sequences
/// carry the label `specs.len()`.
pub fn pretrain_batch(
    specs: &[DomainSpec],
    general: &GeneralTask,
    step: usize,
    batch_size: usize,
    general_fraction: f64,
    eval_size: usize,
) -> Result<DomainBatch> {
    let n_general = if specs.is_empty() {
        batch_size
    } else {
        (general_fraction * batch_size as f64).ceil() as usize
    };
    let examples: Vec<Example> = (0..batch_size)
        .map(|j| {
            let idx = train_index(step, batch_size, j, eval_size);
            if j < n_general {
                Example {
                    domain: Some(specs.len()),
                    ..general.sample(idx)
                }
            } else {
                specs[(j - n_general) % specs.len()].sample(idx)
            }
        })
        .collect();
    DomainBatch::from_examples(&examples, true)
}

/// Trains a fresh model on the general task plus every domain.
pub fn pretrain<S: Real>(
    model_config: ModelConfig,
    config: &PretrainConfig,
    specs: &[DomainSpec],
    general: &GeneralTask,
) -> Result<PretrainOutcome<S>> {
    config.validate()?;
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if s.id != i {
            return Err(arg_err!("domain ids must be 0..{}, found {} at position {i}", specs.len(), s.id));
        }
    }
    let mut model = MoeModel::<S>::new(model_config, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mask = UpdateMask::all(&model);
    let suite = EvalSuite::build(specs, general, config.eval_size);
    let spec = LossSpec {
        balance_weight: config.balance_weight,
        ..LossSpec::default()
    };
    let mut metrics = Vec::new();
    let (mut sum_loss, mut sum_task, mut n) = (0.0, 0.0, 0usize);
    for t in 1..=config.steps {
        let batch = pretrain_batch(
            specs,
            general,
            t - 1,
            config.batch_size,
            config.general_fraction,
            config.eval_size,
        )?;
        let g = compute_gradients(&model, &batch, &spec)?;
        if !g.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite pretraining loss {} at step {t}", g.total)));
        }
        opt.step(&mut model.params, &g.grads, &mask);
        sum_loss += g.total;
        sum_task += g.task;
        n += 1;
        if t % config.eval_interval == 0 {
            let scores = exact_match_eval(&model, &suite)?;
            info!("pretrain step {t}: loss {:.4} general {:.3}", sum_loss / n as f64, scores.general);
            metrics.push(MetricsRecord {
                step: t,
                phase: None,
                loss: sum_loss / n as f64,
                task_loss: sum_task / n as f64,
                kd_loss: 0.0,
                lambda: 0.0,
                trainable_fraction: 1.0,
                overlap: 0.0,
                general_accuracy: scores.general,
                domain_accuracy: scores.domains,
            });
            (sum_loss, sum_task, n) = (0.0, 0.0, 0);
        }
    }
    Ok(PretrainOutcome { model, metrics })
}
