use std::collections::BTreeMap;

use log::{debug, info};

use super::config::{Policy, TrainConfig};
use super::grads::{accumulate_batch, compute_gradients, LossSpec};
use super::metrics::{Event, MetricsRecord};
use crate::datagen::{exact_match_eval, sample_batch, DomainBatch, DomainSpec, EvalSuite, GeneralTask, SuiteScores};
use crate::error::{arg_err, Error, Result};
use crate::model::{GroupKind, MoeModel};
use crate::numerics::Real;
use crate::optim::Optimizer;
use crate::router::BlendSchedule;
use crate::schedule::{update_mask_for, Phase, PhasePlan, UpdateMask};
use crate::specialization::AffinityState;

/// Summary of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub phase: Option<Phase>,
    pub loss: f64,
    pub task_loss: f64,
    pub kd_loss: f64,
    pub lambda: f64,
    /// Scalars the update mask let through.
    pub trainable_parameters: usize,
}

/// Fine-tuning state for one run.
#[derive(Debug)]
pub struct Finetuner<S> {
    pub model: MoeModel<S>,
    pub config: TrainConfig,
    pub specs: Vec<DomainSpec>,
    pub suite: EvalSuite,
    /// One per MoE layer.
    pub states: Vec<AffinityState>,
    pub plan: Option<PhasePlan>,
    pub events: Vec<Event>,
    pub metrics: Vec<MetricsRecord>,
    /// Steps completed so far.
    pub step: usize,
    /// Mean cross-domain mask overlap at the latest refresh, before duplication.
    pub overlap: f64,
    optimizer: Optimizer<S>,
    static_mask: Option<UpdateMask>,
    last_phase: Option<Phase>,
    warnings_seen: Vec<usize>,
    window: (f64, f64, f64, f64, usize),
}

impl<S: Real> Finetuner<S> {
    pub fn new(mut model: MoeModel<S>, config: TrainConfig, specs: Vec<DomainSpec>, general: &GeneralTask) -> Result<Self> {
        config.validate()?;
        if config.precision != S::PRECISION {
            return Err(Error::Config(format!(
                "config asks for {:?} but the model holds {:?}",
                config.precision,
                S::PRECISION
            )));
        }
        if specs.is_empty() {
            return Err(arg_err!("fine-tuning needs at least one domain"));
        }
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if s.id != i {
                return Err(arg_err!("domain ids must be 0..{}, found {} at position {i}", specs.len(), s.id));
            }
        }
        let plan = match config.policy {
            Policy::DesMoe => {
                if !model.has_adaptive_routers() {
                    model.attach_adaptive_routers(config.seed, config.temperature)?;
                }
                let mut p = PhasePlan::from_fractions(config.steps, config.warmup_fraction, config.stabilization_fraction)?;
                p.experts_in_warmup = config.experts_in_warmup;
                Some(p)
            }
            _ => {
                if model.has_adaptive_routers() {
                    return Err(Error::Load("baseline policies expect a model without adaptive routers".into()));
                }
                None
            }
        };
        let states: Vec<AffinityState> = model
            .layers()
            .map(|l| AffinityState::new(l.index, specs.len(), l.num_experts(), config.threshold, config.ema_weight))
            .collect();
        let suite = EvalSuite::build(&specs, general, config.eval_size);
        let optimizer = Optimizer::new(config.optimizer.clone())?;
        let n_layers = states.len();
        let mut ft = Self {
            model,
            config,
            specs,
            suite,
            states,
            plan,
            events: Vec::new(),
            metrics: Vec::new(),
            step: 0,
            overlap: 0.0,
            optimizer,
            static_mask: None,
            last_phase: None,
            warnings_seen: vec![0; n_layers],
            window: (0.0, 0.0, 0.0, 0.0, 0),
        };
        if ft.config.policy == Policy::StaticEsft {
            ft.static_mask = Some(ft.static_expert_mask()?);
        }
        Ok(ft)
    }

    fn batch_for(&self, step_index: usize) -> Result<DomainBatch> {
        sample_batch(
            &self.specs,
            step_index,
            self.config.batch_size,
            self.config.batch_mode,
            self.config.eval_size,
        )
    }

    /// Routes probe batches once and keeps each layer's `⌈f·|E|⌉` most selected experts.
    fn static_expert_mask(&self) -> Result<UpdateMask> {
        let mut counts: Vec<Vec<u64>> = self.model.layers().map(|l| vec![0; l.num_experts()]).collect();
        for s in 0..self.config.static_probe_batches {
            let batch = self.batch_for(s)?;
            let g = compute_gradients(&self.model, &batch, &LossSpec::default())?;
            let positions = super::grads::affinity_positions(&batch);
            for (c, sel) in counts.iter_mut().zip(&g.selected) {
                for &i in &positions {
                    for &e in &sel[i] {
                        c[e] += 1;
                    }
                }
            }
        }
        let mut mask = UpdateMask::default();
        for (l, c) in counts.iter().enumerate() {
            let keep = (self.config.static_fraction * c.len() as f64).ceil() as usize;
            let mut order: Vec<usize> = (0..c.len()).collect();
            order.sort_by(|&a, &b| c[b].cmp(&c[a]).then(a.cmp(&b)));
            for &e in order.iter().take(keep.max(1)) {
                mask.groups.insert(self.model.expert_group(l, e));
            }
        }
        Ok(mask)
    }

    pub fn phase(&self, t: usize) -> Result<Option<Phase>> {
        self.plan.as_ref().map(|p| p.phase_of(t)).transpose()
    }

    /// Runs step `self.step + 1`.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let t = self.step + 1;
        if t > self.config.steps {
            return Err(arg_err!("step {t} past the configured {} steps", self.config.steps));
        }
        let phase = self.phase(t)?;
        let des = self.config.policy == Policy::DesMoe;
        let lambda = if des {
            BlendSchedule::new(self.config.steps, t)?.lambda()
        } else {
            0.0
        };
        let batch = self.batch_for(t - 1)?;
        let spec = LossSpec {
            kd_lambda: des.then_some(lambda),
            availability: des,
            filter: (des && self.config.expert_filter).then_some(self.states.as_slice()),
            balance_weight: 0.0,
        };
        let g = compute_gradients(&self.model, &batch, &spec)?;
        if !g.total.is_finite() || !g.task.is_finite() || !g.kd.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {t}: phase={} total={} task={} kd={} lambda={lambda}",
                phase.map_or_else(|| "-".into(), |p| p.to_string()),
                g.total,
                g.task,
                g.kd
            )));
        }
        let mask = match (self.config.policy, &self.plan, &self.static_mask) {
            (Policy::DesMoe, Some(plan), _) => {
                update_mask_for(plan, t, &batch.distinct_domains(), &self.states, &self.model)?
            }
            (Policy::StaticEsft, _, Some(m)) => m.clone(),
            _ => UpdateMask::all(&self.model),
        };
        let trainable = mask.parameter_count(&self.model);
        if phase != self.last_phase {
            if let Some(p) = phase {
                info!("step {t}: entering {p} ({trainable} trainable parameters)");
                self.events.push(Event::Phase {
                    step: t,
                    phase: p,
                    trainable_parameters: trainable,
                });
            }
            self.last_phase = phase;
        }
        self.optimizer.step(&mut self.model.params, &g.grads, &mask);
        accumulate_batch(&mut self.states, &batch, &g.selected)?;
        self.step = t;
        if t.is_multiple_of(self.config.update_period) {
            self.refresh(t)?;
        }
        let w = &mut self.window;
        w.0 += g.total;
        w.1 += g.task;
        w.2 += g.kd;
        w.3 += lambda;
        w.4 += 1;
        if t.is_multiple_of(self.config.eval_interval) {
            self.record(t, phase, trainable)?;
        }
        Ok(StepReport {
            step: t,
            phase,
            loss: g.total,
            task_loss: g.task,
            kd_loss: g.kd,
            lambda,
            trainable_parameters: trainable,
        })
    }

    /// EMA refresh of every layer's affinity, then duplication of shared experts.
    pub fn refresh(&mut self, t: usize) -> Result<()> {
        for st in &mut self.states {
            st.ema_refresh();
        }
        self.overlap = mean_overlap(&self.states);
        if self.config.policy == Policy::DesMoe && self.config.duplicate_shared_experts {
            for st in &mut self.states {
                for r in st.resolve_shared_experts(&mut self.model, t, self.config.duplication_cap)? {
                    debug!("step {t}: layer {} expert {} -> {:?} for domain {}", r.layer, r.source, r.copy, r.domain);
                    self.events.push(Event::Duplication {
                        step: r.step,
                        layer: r.layer,
                        source: r.source,
                        copy: r.copy,
                        domain: r.domain,
                    });
                }
            }
        }
        for (st, seen) in self.states.iter().zip(&mut self.warnings_seen) {
            for w in &st.warnings[*seen..] {
                self.events.push(Event::Warning {
                    step: t,
                    message: w.clone(),
                });
            }
            *seen = st.warnings.len();
        }
        Ok(())
    }

    fn record(&mut self, t: usize, phase: Option<Phase>, trainable: usize) -> Result<()> {
        let scores = self.evaluate()?;
        let (l, task, kd, lam, n) = self.window;
        let n = n.max(1) as f64;
        self.metrics.push(MetricsRecord {
            step: t,
            phase,
            loss: l / n,
            task_loss: task / n,
            kd_loss: kd / n,
            lambda: lam / n,
            trainable_fraction: trainable as f64 / self.model.params.total_size() as f64,
            overlap: self.overlap,
            general_accuracy: scores.general,
            domain_accuracy: scores.domains,
        });
        self.window = (0.0, 0.0, 0.0, 0.0, 0);
        Ok(())
    }

    /// Exact-match scores with availability gating off.
    pub fn evaluate(&self) -> Result<SuiteScores> {
        exact_match_eval(&self.model, &self.suite)
    }

    pub fn teacher_groups_untouched(&self) -> bool {
        self.model
            .params
            .groups()
            .all(|(_, g)| !matches!(g.kind, GroupKind::Teacher { .. }) || self.optimizer_never_moved(&g.params))
    }

    fn optimizer_never_moved(&self, params: &[crate::model::ParamId]) -> bool {
        params.iter().all(|&p| self.optimizer.steps_of(p) == 0)
    }
}

fn mean_overlap(states: &[AffinityState]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    states.iter().map(AffinityState::mean_overlap).sum::<f64>() / states.len() as f64
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<S> {
    pub model: MoeModel<S>,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<Event>,
    pub before: SuiteScores,
    pub after: SuiteScores,
    /// Mean cross-domain mask overlap at the final refresh, before duplication.
    pub overlap: f64,
}

impl<S> FinetuneOutcome<S> {
    /// Named scores (`general`, `domain.<id>`) for forgetting reports.
    pub fn named_scores(scores: &SuiteScores) -> (BTreeMap<String, f64>, Vec<String>) {
        let mut m = BTreeMap::new();
        m.insert("general".to_string(), scores.general);
        for (d, a) in &scores.domains {
            m.insert(format!("domain.{d}"), *a);
        }
        (m, vec!["general".to_string()])
    }

    /// `after / before` on the general suite.
    pub fn general_retention(&self) -> Result<f64> {
        let (b, held) = Self::named_scores(&self.before);
        let (a, _) = Self::named_scores(&self.after);
        Ok(super::metrics::forgetting_report(&b, &a, &held)?.retention)
    }
}

/// Fine-tunes `model` on `specs` for `config.steps` steps.
///
/// The metrics series opens with a step-0 row scoring the incoming model and
/// always closes with a row at the final step.
pub fn run_finetune<S: Real>(
    model: MoeModel<S>,
    specs: Vec<DomainSpec>,
    config: TrainConfig,
    general: &GeneralTask,
) -> Result<FinetuneOutcome<S>> {
    let before_suite = EvalSuite::build(&specs, general, config.eval_size);
    let before = exact_match_eval(&model, &before_suite)?;
    let mut ft = Finetuner::new(model, config, specs, general)?;
    ft.metrics.push(MetricsRecord {
        step: 0,
        phase: None,
        loss: 0.0,
        task_loss: 0.0,
        kd_loss: 0.0,
        lambda: 0.0,
        trainable_fraction: 0.0,
        overlap: 0.0,
        general_accuracy: before.general,
        domain_accuracy: before.domains.clone(),
    });
    let mut last = None;
    while ft.step < ft.config.steps {
        last = Some(ft.train_step()?);
    }
    if let Some(r) = last {
        if r.step % ft.config.eval_interval != 0 {
            ft.record(r.step, r.phase, r.trainable_parameters)?;
        }
    }
    let after = ft.evaluate()?;
    Ok(FinetuneOutcome {
        overlap: ft.overlap,
        model: ft.model,
        metrics: ft.metrics,
        events: ft.events,
        before,
        after,
    })
}
