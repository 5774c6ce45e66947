mod common;

use common::*;
use moelab::model::{
    peek_header, read_checkpoint, save_checkpoint, write_checkpoint, Binding, GroupKind, ModelConfig, MoeModel,
};
use moelab::numerics::{gelu_scalar, softmax_rows, Precision, Tape, Tensor};
use moelab::router::{AdaptiveRouter, HIDDEN_MULTIPLIER};
use moelab::trainer::{compute_gradients, LossSpec};
use moelab::datagen::{BatchMode, DomainSpec};
use proptest::prelude::*;

fn dense_mixture(model: &MoeModel<f64>, l: usize, u: &Tensor<f64>) -> Vec<f64> {
    let layer = model.layer(l);
    let p = &model.params;
    let (t, d) = u.dims2().unwrap();
    let mut logits = Tensor::zeros(&[t, layer.num_experts()]);
    for i in 0..t {
        for e in 0..layer.num_experts() {
            let mut z = p.get(layer.router_b).data()[e];
            for k in 0..d {
                z += u.get2(i, k) * p.get(layer.router_w).get2(k, e);
            }
            logits.data_mut()[i * layer.num_experts() + e] = z;
        }
    }
    let probs = softmax_rows(&logits).unwrap();
    let mut out = vec![0.0; t * d];
    for (e, ex) in layer.experts.iter().enumerate() {
        let (w1, b1, w2, b2) = (p.get(ex.w1), p.get(ex.b1), p.get(ex.w2), p.get(ex.b2));
        let h = b1.len();
        for i in 0..t {
            let hid: Vec<f64> = (0..h)
                .map(|j| gelu_scalar(b1.data()[j] + (0..d).map(|k| u.get2(i, k) * w1.get2(k, j)).sum::<f64>()))
                .collect();
            for c in 0..d {
                let y = b2.data()[c] + (0..h).map(|j| hid[j] * w2.get2(j, c)).sum::<f64>();
                out[i * d + c] += probs.get2(i, e) * y;
            }
        }
    }
    out
}

#[test]
fn full_top_k_is_a_dense_mixture() {
    let mc = ModelConfig {
        top_k: 4,
        ..tiny_config(Precision::F64)
    };
    let model = MoeModel::<f64>::new(mc, 2).unwrap();
    let u0 = Tensor::randn(&[5, 8], 1.0, &mut rng(3));
    let want = dense_mixture(&model, 0, &u0);
    let mut tape = Tape::new();
    let mut bind = Binding::new(&model.params);
    let u = tape.leaf(u0);
    let r = model.layer(0).route(&mut tape, &mut bind, u, None).unwrap();
    let y = model.layer(0).moe_forward(&mut tape, &mut bind, u, &r, None).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn forward_shapes_and_routing() {
    let model = MoeModel::<f32>::new(tiny_config(Precision::F32), 1).unwrap();
    let ids: Vec<usize> = (0..32).map(|i| i % 20).collect();
    let (logits, records) = model.forward_tokens(&ids[..16]).unwrap();
    assert_eq!(logits.shape(), &[16, 32]);
    assert_eq!(records.len(), 2);
    for r in &records {
        assert_eq!(r.probs.shape(), &[16, 4]);
        assert!(r.selected.iter().all(|s| s.len() == 2 && s[0] != s[1]));
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for (attention, shared) in [(true, false), (false, true)] {
        let mc = ModelConfig {
            model_dim: 4,
            expert_hidden_dim: 4,
            attention,
            shared_expert: shared,
            vocab_size: 32,
            ..tiny_config(Precision::F64)
        };
        let mut model = MoeModel::<f64>::new(mc, 5).unwrap();
        let specs = DomainSpec::standard_set(2, 1).unwrap();
        let b = batch(&specs, 0, 2, BatchMode::Mixed);
        let g = compute_gradients(&model, &b, &LossSpec::default()).unwrap();
        let (worst, at) = worst_fd_error(&mut model, &g.grads, &|m| plain_loss(m, &b));
        assert!(worst < 1e-4, "attention={attention} shared={shared}: {worst} at {at}");
    }
}

#[test]
fn adaptive_router_initialisation() {
    let mut model = MoeModel::<f64>::new(tiny_config(Precision::F64), 4).unwrap();
    model.attach_adaptive_routers(9, 0.7).unwrap();
    for l in 0..2 {
        let layer = model.layer(l);
        let r = layer.adaptive.as_ref().unwrap();
        let p = &model.params;
        let (d, e) = (8, 4);
        assert_eq!(p.get(r.w1).shape(), &[d, HIDDEN_MULTIPLIER * d]);
        assert_eq!(p.get(r.w2).shape(), &[HIDDEN_MULTIPLIER * d, e]);
        let w2 = p.get(r.w2).data();
        assert_eq!(&w2[..d * e], p.get(layer.router_w).data());
        assert!(w2[d * e..].iter().all(|&v| v == 0.0));
        assert!(p.get(r.b1).all_zero() && p.get(r.b2).all_zero());
        assert!(matches!(p.group(layer.router_group).kind, GroupKind::Teacher { .. }));
        assert!(matches!(p.group(r.group).kind, GroupKind::Router { .. }));
    }
}

#[test]
fn kaiming_scale_of_the_first_router_layer() {
    let mut store = moelab::model::ParamStore::<f64>::new();
    let g = store.add_group("r", GroupKind::Router { layer: 0 });
    let d = 64;
    let w = store.add(g, "w", Tensor::randn(&[d, 8], 0.1, &mut rng(1)));
    let r = AdaptiveRouter::init(&mut store, 0, w, 3, 0.7).unwrap();
    let v = store.get(r.w1).data();
    let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    // 16384 draws: the sample variance is within a few percent of 2/d
    assert!((var / (2.0 / d as f64) - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn distillation_gradient_reaches_only_the_router() {
    let mut model = MoeModel::<f64>::new(tiny_config(Precision::F64), 6).unwrap();
    model.attach_adaptive_routers(1, 0.7).unwrap();
    let u0 = Tensor::randn(&[6, 8], 1.0, &mut rng(8));
    let teacher = model.layer(0).teacher_logits(&model.params, &u0).unwrap();
    let kd = |m: &MoeModel<f64>| {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&m.params);
        let u = tape.leaf(u0.clone());
        let k = m.layer(0).adaptive.as_ref().unwrap().kd_loss(&mut tape, &mut bind, &teacher, u).unwrap();
        tape.value(k).item()
    };
    let mut tape = Tape::new();
    let mut bind = Binding::new(&model.params);
    let u = tape.leaf(u0.clone());
    let k = model.layer(0).adaptive.as_ref().unwrap().kd_loss(&mut tape, &mut bind, &teacher, u).unwrap();
    let g = tape.backward(k).unwrap();
    assert!(g.get(u).is_none_or(|t| t.all_zero()), "router input must be detached");
    let grads = bind.collect(&g);
    let router = model.layer(0).adaptive.as_ref().unwrap().group;
    for (gid, grp) in model.params.groups() {
        if gid != router {
            assert!(grads.group_is_zero(&model.params, gid), "{} has gradient", grp.name);
        }
    }
    let (worst, at) = worst_fd_error(&mut model, &grads, &kd);
    assert!(worst < 1e-5, "{worst} at {at}");
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut model = MoeModel::<f64>::new(tiny_config(Precision::F64), 7).unwrap();
    model.attach_adaptive_routers(2, 0.7).unwrap();
    model.add_expert_copy(1, 2).unwrap();
    let bytes = write_checkpoint(&model, serde_json::json!({"note": "x"})).unwrap();
    let (back, header) = read_checkpoint::<f64>(&bytes).unwrap();
    assert_eq!(header.meta["note"], "x");
    assert_eq!(back.expert_counts(), vec![4, 5]);
    assert_eq!(write_checkpoint(&back, serde_json::json!({"note": "x"})).unwrap(), bytes);
    assert!(read_checkpoint::<f32>(&bytes).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_checkpoint(&path, &back, serde_json::Value::Null).unwrap();
    assert_eq!(peek_header(&path).unwrap().precision, Precision::F64);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint::<f64>(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn groups_partition_the_parameters(seed in any::<u64>(), shared in any::<bool>(), copies in 0usize..4) {
        let mc = ModelConfig { shared_expert: shared, ..tiny_config(Precision::F32) };
        let mut model = MoeModel::<f32>::new(mc, seed).unwrap();
        model.attach_adaptive_routers(seed, 0.7).unwrap();
        for c in 0..copies {
            model.add_expert_copy(c % 2, c % 4).unwrap();
        }
        prop_assert!(model.params.check_partition().is_ok());
        let mut total = 0;
        for (gid, _) in model.params.groups() {
            total += model.params.group_size(gid);
        }
        prop_assert_eq!(total, model.params.total_size());
    }
}
