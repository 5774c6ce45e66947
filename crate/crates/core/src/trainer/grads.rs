use crate::datagen::{DomainBatch, PAD};
use crate::error::{arg_err, Result};
use crate::model::{Binding, ForwardOptions, MoeModel, ParamGrads};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::router::router_loss_var;
use crate::specialization::{expert_gradient_filter, AffinityState, BatchDomains};

/// What one forward/backward pass includes.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossSpec<'a> {
    /// Distillation blend weight λ; `None` disables the router loss.
    pub kd_lambda: Option<f64>,
    /// Route with per-domain expert availability.
    pub availability: bool,
    /// Affinity states whose masks filter expert gradients.
    pub filter: Option<&'a [AffinityState]>,
    /// Weight of the load-balancing auxiliary loss (0 disables it).
    pub balance_weight: f64,
}

#[derive(Debug, Clone)]
pub struct StepGrads<S> {
    pub grads: ParamGrads<S>,
    pub total: f64,
    pub task: f64,
    pub kd: f64,
    /// Per layer, per token: the experts selected.
    pub selected: Vec<Vec<Vec<usize>>>,
    pub target_count: usize,
}

/// Mean cross-entropy over the batch's target positions.
pub fn task_loss<S: Real>(model: &MoeModel<S>, batch: &DomainBatch) -> Result<f64> {
    check_batch(batch)?;
    let mut tape = Tape::new();
    let mut bind = Binding::new(&model.params);
    let fw = model.forward(&mut tape, &mut bind, &batch.inputs, batch.seq_len, ForwardOptions::default())?;
    let loss = tape.cross_entropy(fw.logits, &batch.targets)?;
    Ok(tape.value(loss).item().as_f64())
}

fn check_batch(batch: &DomainBatch) -> Result<()> {
    if batch.is_empty() || batch.inputs.is_empty() {
        return Err(arg_err!("empty batch"));
    }
    if batch.inputs.len() != batch.batch_size() * batch.seq_len || batch.targets.len() != batch.inputs.len() {
        return Err(arg_err!("batch arrays do not match {} sequences of {}", batch.batch_size(), batch.seq_len));
    }
    if !batch.mixed && batch.domains.iter().any(|&d| d != batch.domains[0]) {
        return Err(arg_err!("grouped batch mixes domain labels"));
    }
    Ok(())
}

/// Loss and filtered parameter gradients for one batch.
///
/// The total loss is `L_task + L_router` where, with `kd_lambda = Some(λ)`,
/// `L_router = λ·L_KD + (1 − λ)·L_task` and `L_KD` averages the per-layer
/// distillation losses. In grouped batches masked experts are cleared after
/// the backward pass; in mixed batches each (token, expert) pair is gated
/// during the forward pass.
pub fn compute_gradients<S: Real>(model: &MoeModel<S>, batch: &DomainBatch, spec: &LossSpec<'_>) -> Result<StepGrads<S>> {
    check_batch(batch)?;
    let token_domains = batch.token_domains();
    let mut tape = Tape::new();
    let mut bind = Binding::new(&model.params);
    let states = spec.filter;
    let gate = |l: usize, i: usize, e: usize| match states {
        Some(st) => st[l].allows(token_domains[i], e),
        None => true,
    };
    let opts = ForwardOptions {
        token_domains: spec.availability.then_some(token_domains.as_slice()),
        expert_grad_gate: (batch.mixed && states.is_some()).then_some(&gate as &dyn Fn(usize, usize, usize) -> bool),
    };
    let fw = model.forward(&mut tape, &mut bind, &batch.inputs, batch.seq_len, opts)?;
    let task = tape.cross_entropy(fw.logits, &batch.targets)?;
    let mut total = task;
    let mut kd_value = 0.0;
    if let Some(lambda) = spec.kd_lambda {
        let mut kd_terms = Vec::new();
        for (l, &u) in fw.moe_inputs.iter().enumerate() {
            let layer = model.layer(l);
            let Some(router) = &layer.adaptive else {
                return Err(arg_err!("router loss requested but layer {l} has no adaptive router"));
            };
            let teacher = layer.teacher_logits(&model.params, tape.value(u))?;
            kd_terms.push(router.kd_loss(&mut tape, &mut bind, &teacher, u)?);
        }
        let kd = mean_of(&mut tape, &kd_terms)?;
        kd_value = tape.value(kd).item().as_f64();
        let router = router_loss_var(&mut tape, kd, task, lambda)?;
        total = tape.add(total, router)?;
    }
    if spec.balance_weight > 0.0 {
        let mut terms = Vec::new();
        for r in &fw.routing {
            terms.push(balance_loss(&mut tape, r.probs, &r.selected)?);
        }
        let bal = mean_of(&mut tape, &terms)?;
        let bal = tape.scale(bal, S::from_f64(spec.balance_weight));
        total = tape.add(total, bal)?;
    }
    let total_value = tape.value(total).item().as_f64();
    let task_value = tape.value(task).item().as_f64();
    let g = tape.backward(total)?;
    let mut grads = bind.collect(&g);
    if let Some(st) = states {
        let domains = if batch.mixed {
            BatchDomains::Mixed(&batch.domains)
        } else {
            BatchDomains::Grouped(batch.domains[0])
        };
        expert_gradient_filter(st, model, domains, &mut grads);
    }
    Ok(StepGrads {
        grads,
        total: total_value,
        task: task_value,
        kd: kd_value,
        selected: fw.routing.into_iter().map(|r| r.selected).collect(),
        target_count: batch.targets.iter().flatten().count(),
    })
}

fn mean_of<S: Real>(tape: &mut Tape<S>, terms: &[Var]) -> Result<Var> {
    let (first, rest) = terms.split_first().ok_or_else(|| arg_err!("no terms to average"))?;
    let mut acc = *first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, S::from_f64(1.0 / terms.len() as f64)))
}

/// `|E| · Σ_e f_e · P_e`, with `f_e` the (constant) share of selections going
/// to expert `e` and `P_e` its mean routing probability.
fn balance_loss<S: Real>(tape: &mut Tape<S>, probs: Var, selected: &[Vec<usize>]) -> Result<Var> {
    let (t, e) = tape.value(probs).dims2()?;
    let mut f = vec![0.0; e];
    let picks: usize = selected.iter().map(Vec::len).sum();
    for sel in selected {
        for &j in sel {
            f[j] += 1.0 / picks as f64;
        }
    }
    let avg = tape.constant(Tensor::full(&[1, t], S::from_f64(1.0 / t as f64)));
    let p = tape.matmul(avg, probs)?;
    let fv = tape.constant(Tensor::from_f64(&[e, 1], &f)?);
    let dot = tape.matmul(p, fv)?;
    let s = tape.sum(dot);
    Ok(tape.scale(s, S::from_f64(e as f64)))
}

/// Token positions that count toward affinity: every non-padding input.
pub fn affinity_positions(batch: &DomainBatch) -> Vec<usize> {
    (0..batch.inputs.len()).filter(|&i| batch.inputs[i] != PAD).collect()
}

/// Feeds one batch's routing into the per-layer affinity states.
pub fn accumulate_batch(states: &mut [AffinityState], batch: &DomainBatch, selected: &[Vec<Vec<usize>>]) -> Result<()> {
    let positions = affinity_positions(batch);
    let labels: Vec<usize> = positions.iter().map(|&i| batch.domains[i / batch.seq_len]).collect();
    for (st, sel) in states.iter_mut().zip(selected) {
        let rows: Vec<Vec<usize>> = positions.iter().map(|&i| sel[i].clone()).collect();
        st.accumulate(&rows, &labels)?;
    }
    Ok(())
}
