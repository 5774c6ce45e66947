mod common;

use std::collections::BTreeMap;

use common::*;
use moelab::datagen::{BatchMode, DomainSpec, GeneralTask};
use moelab::model::{GroupKind, ModelConfig, MoeModel};
use moelab::numerics::{Precision, Tensor};
use moelab::schedule::update_mask_for;
use moelab::trainer::*;
use moelab::Error;

fn train_config(policy: Policy, seed: u64) -> TrainConfig {
    TrainConfig {
        policy,
        steps: 20,
        update_period: 5,
        batch_size: 6,
        eval_size: 8,
        eval_interval: 10,
        seed,
        static_probe_batches: 2,
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}

/// Entries present in `before` are unchanged in `after`; duplication may
/// append router columns but never edits existing ones.
fn unchanged(before: &Tensor<f64>, after: &Tensor<f64>) -> bool {
    if before.shape() == after.shape() {
        return before.data() == after.data();
    }
    let (rows, cols) = match before.shape() {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        _ => return false,
    };
    let wide = after.len() / rows;
    (0..rows).all(|r| before.data()[r * cols..(r + 1) * cols] == after.data()[r * wide..r * wide + cols])
}

fn finetuner(policy: Policy, seed: u64) -> Finetuner<f64> {
    let model = MoeModel::<f64>::new(tiny_config(Precision::F64), seed).unwrap();
    let specs = DomainSpec::standard_set(3, seed).unwrap();
    Finetuner::new(model, train_config(policy, seed), specs, &GeneralTask::new(seed)).unwrap()
}

#[test]
fn steps_only_move_groups_in_the_update_mask() {
    let mut ft = finetuner(Policy::DesMoe, 4);
    randomize_masks(&mut ft.states, &mut rng(4));
    while ft.step < ft.config.steps {
        let t = ft.step + 1;
        let plan = ft.plan.unwrap();
        let mask = update_mask_for(&plan, t, &[0, 1, 2], &ft.states, &ft.model).unwrap();
        let before = ft.model.clone();
        ft.train_step().unwrap();
        for (gid, g) in before.params.groups() {
            if mask.contains(gid) {
                continue;
            }
            for &p in &g.params {
                assert!(unchanged(before.params.get(p), ft.model.params.get(p)), "{} moved at step {t}", g.name);
            }
        }
    }
}

#[test]
fn losses_stay_finite() {
    for seed in 0..5 {
        for policy in Policy::ALL {
            let mut ft = finetuner(policy, seed);
            for _ in 0..10 {
                let r = ft.train_step().unwrap();
                assert!(r.loss.is_finite() && r.task_loss.is_finite(), "{policy} seed {seed}");
            }
        }
    }
}

#[test]
fn full_fine_tuning_with_every_expert_is_dense() {
    let mc = ModelConfig {
        top_k: 4,
        ..tiny_config(Precision::F64)
    };
    let model = MoeModel::<f64>::new(mc, 1).unwrap();
    let total = model.params.total_size();
    let specs = DomainSpec::standard_set(2, 1).unwrap();
    let mut ft = Finetuner::new(model, train_config(Policy::Fft, 1), specs, &GeneralTask::new(1)).unwrap();
    let before = ft.model.clone();
    let r = ft.train_step().unwrap();
    assert_eq!(r.trainable_parameters, total);
    assert_eq!(r.lambda, 0.0);
    assert!(ft.plan.is_none());
    for (_, g) in before.params.groups() {
        let moved = g.params.iter().any(|&p| before.params.get(p).data() != ft.model.params.get(p).data());
        assert!(moved, "{} did not train", g.name);
    }
}

#[test]
fn mixed_gradients_are_the_weighted_sum_of_grouped_ones() {
    let mut model = MoeModel::<f64>::new(tiny_config(Precision::F64), 3).unwrap();
    model.attach_adaptive_routers(3, 0.7).unwrap();
    let specs = DomainSpec::standard_set(3, 3).unwrap();
    let mut ft = Finetuner::new(model, train_config(Policy::DesMoe, 3), specs.clone(), &GeneralTask::new(3)).unwrap();
    randomize_masks(&mut ft.states, &mut rng(11));
    let b = batch(&specs, 2, 9, BatchMode::Mixed);
    let spec = LossSpec {
        filter: Some(&ft.states),
        ..LossSpec::default()
    };
    let mixed = compute_gradients(&ft.model, &b, &spec).unwrap();
    let mut want = moelab::model::ParamGrads::empty(ft.model.params.len());
    for d in 0..3 {
        let sub = b.split(d);
        let g = compute_gradients(&ft.model, &sub, &spec).unwrap();
        want.add_scaled(&g.grads, g.target_count as f64 / mixed.target_count as f64);
    }
    for id in ft.model.params.ids() {
        let n = ft.model.params.get(id).len();
        let zeros = vec![0.0; n];
        let a = mixed.grads.get(id).map_or(&zeros[..], |t| t.data());
        let w = want.get(id).map_or(&zeros[..], |t| t.data());
        for i in 0..n {
            assert!((a[i] - w[i]).abs() <= 1e-12 * w[i].abs().max(1.0), "{}[{i}] {} vs {}", ft.model.params.name(id), a[i], w[i]);
        }
    }
}

#[test]
fn runs_are_deterministic() {
    for policy in Policy::ALL {
        let a = run_finetune(
            MoeModel::<f64>::new(tiny_config(Precision::F64), 5).unwrap(),
            DomainSpec::standard_set(3, 5).unwrap(),
            train_config(policy, 5),
            &GeneralTask::new(5),
        )
        .unwrap();
        let b = run_finetune(
            MoeModel::<f64>::new(tiny_config(Precision::F64), 5).unwrap(),
            DomainSpec::standard_set(3, 5).unwrap(),
            train_config(policy, 5),
            &GeneralTask::new(5),
        )
        .unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.events, b.events);
        for (x, y) in snapshot(&a.model).iter().zip(&snapshot(&b.model)) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

#[test]
fn teachers_stay_frozen_and_phases_are_logged() {
    let mut ft = finetuner(Policy::DesMoe, 6);
    let teachers: Vec<_> = ft
        .model
        .params
        .groups()
        .filter(|(_, g)| matches!(g.kind, GroupKind::Teacher { .. }))
        .flat_map(|(_, g)| g.params.clone())
        .collect();
    assert_eq!(teachers.len(), 4);
    let before: Vec<_> = teachers.iter().map(|&p| ft.model.params.get(p).clone()).collect();
    while ft.step < ft.config.steps {
        ft.train_step().unwrap();
    }
    assert!(ft.teacher_groups_untouched());
    for (p, b) in teachers.iter().zip(&before) {
        assert!(unchanged(b, ft.model.params.get(*p)));
    }
    let phases = ft.events.iter().filter(|e| matches!(e, Event::Phase { .. })).count();
    assert_eq!(phases, 3);
}

#[test]
fn baselines_reject_models_with_adaptive_routers() {
    let mut model = MoeModel::<f64>::new(tiny_config(Precision::F64), 1).unwrap();
    model.attach_adaptive_routers(1, 0.7).unwrap();
    let specs = DomainSpec::standard_set(2, 1).unwrap();
    let err = Finetuner::new(model, train_config(Policy::Fft, 1), specs, &GeneralTask::new(1)).unwrap_err();
    assert!(matches!(err, Error::Load(_)), "{err}");
    let model = MoeModel::<f32>::new(tiny_config(Precision::F32), 1).unwrap();
    let specs = DomainSpec::standard_set(2, 1).unwrap();
    assert!(Finetuner::new(model, train_config(Policy::Fft, 1), specs, &GeneralTask::new(1)).is_err());
}

#[test]
fn static_baseline_trains_a_quarter_of_each_layer() {
    let mut ft = finetuner(Policy::StaticEsft, 2);
    let before = ft.model.clone();
    for _ in 0..3 {
        ft.train_step().unwrap();
    }
    let mut per_layer = BTreeMap::new();
    for (_, g) in before.params.groups() {
        let moved = g.params.iter().any(|&p| before.params.get(p).data() != ft.model.params.get(p).data());
        match g.kind {
            GroupKind::Expert { layer, .. } => *per_layer.entry(layer).or_insert(0) += moved as usize,
            _ => assert!(!moved, "{} trained", g.name),
        }
    }
    assert_eq!(per_layer, [(0, 1), (1, 1)].into());
}

#[test]
fn metrics_rows_follow_the_eval_interval() {
    let cfg = PretrainConfig {
        steps: 30,
        batch_size: 4,
        eval_interval: 10,
        eval_size: 8,
        ..PretrainConfig::default()
    };
    let specs = DomainSpec::standard_set(2, 1).unwrap();
    let out = pretrain::<f32>(tiny_config(Precision::F32), &cfg, &specs, &GeneralTask::new(1)).unwrap();
    assert_eq!(out.metrics.iter().map(|m| m.step).collect::<Vec<_>>(), vec![10, 20, 30]);

    let mut tc = train_config(Policy::Fft, 1);
    tc.steps = 25;
    tc.precision = Precision::F32;
    let ft = run_finetune(out.model, specs, tc, &GeneralTask::new(1)).unwrap();
    assert_eq!(ft.metrics.iter().map(|m| m.step).collect::<Vec<_>>(), vec![0, 10, 20, 25]);
    let csv = metrics_csv(&ft.metrics);
    assert_eq!(parse_metrics_csv(&csv).unwrap(), ft.metrics);
}

#[test]
fn forgetting_report_edge_cases() {
    let m = |v: f64| BTreeMap::from([("general".to_string(), v)]);
    let held = ["general".to_string()];
    assert!((forgetting_report(&m(0.5), &m(0.25), &held).unwrap().retention - 0.5).abs() < 1e-15);
    assert!(forgetting_report(&m(0.5), &m(0.25), &[]).is_err());
    assert!(forgetting_report(&m(0.0), &m(0.25), &held).is_err());
}
