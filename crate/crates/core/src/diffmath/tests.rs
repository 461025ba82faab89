use super::*;
use crate::diffmath::rng::stream_rng;
use crate::error::Error;

type G = Graph<f64>;

/// Scalarise an op output with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(g: &mut G, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = stream_rng(seed, 99);
    let w = Tensor::randn(g.shape(y), 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(point: Vec<Tensor<f64>>, f: impl Fn(&mut G, &[Var]) -> crate::Result<Var>) {
    let report = grad_check(f, &point, GradCheckConfig::default()).unwrap();
    assert!(report.passed, "rel err {} at {:?}", report.max_rel_err, report.worst);
}

#[test]
fn matmul_identity() {
    let mut g = Graph::<f64>::new();
    let a = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
    let i3 = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let y = g.matmul(i3, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn bilinear_preserves_constants_and_identity() {
    let mut g = Graph::<f32>::new();
    let c = g.constant(Tensor::full(&[14, 14, 3], 0.75));
    let y = g.bilinear_resize(c, (4, 4)).unwrap();
    assert_eq!(g.shape(y), &[4, 4, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.75));
    let up = g.bilinear_resize(c, (20, 20)).unwrap();
    assert!(g.value(up).data().iter().all(|&v| v == 0.75));

    let mut rng = stream_rng(5, 0);
    let x = Tensor::<f32>::randn(&[7, 7, 2], 1.0, &mut rng);
    let xv = g.constant(x.clone());
    let same = g.bilinear_resize(xv, (7, 7)).unwrap();
    assert_eq!(g.value(same), &x);
}

#[test]
fn area_resize_to_single_cell_is_mean() {
    let mut g = Graph::<f64>::new();
    let x = Tensor::from_fn(&[4, 4, 2], |i| i as f64);
    let xv = g.constant(x.clone());
    let y = g.area_resize(xv, (1, 1)).unwrap();
    let mean0 = (0..16).map(|i| x.data()[2 * i]).sum::<f64>() / 16.0;
    assert_eq!(g.value(y).data()[0], mean0);
}

#[test]
fn quadratic_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn self_cosine_has_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.5]).unwrap());
    let c = g.cosine_similarity(x, x).unwrap();
    let loss = g.sum(c).unwrap();
    assert!((g.value(loss).item() - 1.0).abs() < 1e-12);
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[3], 1.0));
    let unused = g.leaf(Tensor::full(&[2], 1.0));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn shape_mismatch_and_unknown_op() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    assert!(matches!("fft".parse::<OpId>(), Err(Error::UnknownOp(_))));
    assert!(g.apply(OpId::Add, &[a, b], &Attrs::default()).is_ok());
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::full(&[1], f64::MAX));
    assert!(matches!(g.add(a, a), Err(Error::NonFinite(_))));
}

fn rand_point(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut stream_rng(seed, 1))
}

#[test]
fn every_primitive_passes_gradcheck_at_20_points() {
    for seed in 0..20u64 {
        let s = seed * 31;
        check(vec![rand_point(&[3, 4], s), rand_point(&[4, 2], s + 1)], |g, v| {
            let y = g.apply(OpId::MatMul, v, &Attrs::default())?;
            weighted_sum(g, y, s)
        });
        check(vec![rand_point(&[2, 3], s), rand_point(&[2, 3], s + 1)], |g, v| {
            let y = g.apply(OpId::Add, v, &Attrs::default())?;
            weighted_sum(g, y, s)
        });
        check(vec![rand_point(&[2, 3], s), rand_point(&[2, 3], s + 1)], |g, v| {
            let y = g.apply(OpId::Mul, v, &Attrs::default())?;
            weighted_sum(g, y, s)
        });
        for op in [OpId::Tanh, OpId::Gelu, OpId::Softmax] {
            check(vec![rand_point(&[3, 5], s)], |g, v| {
                let y = g.apply(op, v, &Attrs::default())?;
                weighted_sum(g, y, s)
            });
        }
        check(vec![rand_point(&[3, 6], s), rand_point(&[6], s + 1), rand_point(&[6], s + 2)], |g, v| {
            let y = g.apply(OpId::LayerNorm, v, &Attrs::default())?;
            weighted_sum(g, y, s)
        });
        check(vec![rand_point(&[5, 5, 2], s), rand_point(&[3, 3, 2, 3], s + 1), rand_point(&[3], s + 2)], |g, v| {
            let attrs = Attrs { stride: 2, pad: 1, ..Default::default() };
            let y = g.apply(OpId::Conv2d, v, &attrs)?;
            weighted_sum(g, y, s)
        });
        for to in [(2, 3), (7, 5)] {
            check(vec![rand_point(&[4, 4, 2], s)], |g, v| {
                let attrs = Attrs { out_hw: to, ..Default::default() };
                let y = g.apply(OpId::BilinearResize, v, &attrs)?;
                weighted_sum(g, y, s)
            });
        }
        check(vec![rand_point(&[7, 7, 2], s)], |g, v| {
            let attrs = Attrs { out_hw: (3, 2), ..Default::default() };
            let y = g.apply(OpId::AreaResize, v, &attrs)?;
            weighted_sum(g, y, s)
        });
        check(vec![rand_point(&[3, 4], s)], |g, v| {
            let y = g.apply(OpId::L2Normalize, v, &Attrs::default())?;
            weighted_sum(g, y, s)
        });
        check(vec![rand_point(&[3, 4], s), rand_point(&[3, 4], s + 1)], |g, v| {
            let y = g.apply(OpId::CosineSimilarity, v, &Attrs::default())?;
            weighted_sum(g, y, s)
        });
        check(vec![rand_point(&[3, 4], s), rand_point(&[3, 4], s + 1)], |g, v| {
            g.apply(OpId::CrossEntropySoft, v, &Attrs::default())
        });
        check(vec![rand_point(&[3, 4], s), rand_point(&[3, 4], s + 1)], |g, v| {
            g.apply(OpId::Mse, v, &Attrs::default())
        });
        check(vec![rand_point(&[2, 3], s)], |g, v| {
            let a = g.sigmoid(v[0])?;
            let b = g.log_sigmoid(v[0])?;
            let c = g.add(a, b)?;
            weighted_sum(g, c, s)
        });
    }
}

#[test]
fn structural_ops_pass_gradcheck() {
    check(vec![rand_point(&[4, 6], 1), rand_point(&[2, 6], 2), rand_point(&[6], 3)], |g, v| {
        let t = g.transpose(v[0])?;
        let t = g.transpose(t)?;
        let r = g.reshape(t, &[2, 2, 6])?;
        let r = g.reshape(r, &[4, 6])?;
        let a = g.slice_rows(r, 1, 2)?;
        let b = g.slice_cols(r, 2, 3)?;
        let c = g.concat_rows(&[a, v[1]])?;
        let c = g.add_broadcast(c, v[2])?;
        let d = g.concat_cols(&[b, b])?;
        let e = g.gather_rows(v[0], &[3, 0, 3])?;
        let m = g.mask_rows(r, v[2], &[false, true, false, true])?;
        let s1 = weighted_sum(g, c, 1)?;
        let s2 = weighted_sum(g, d, 2)?;
        let s3 = weighted_sum(g, e, 3)?;
        let s4 = weighted_sum(g, m, 4)?;
        let sel = g.select(v[0], &[0, 5, 5, 23])?;
        let s5 = weighted_sum(g, sel, 5)?;
        let mean = g.mean(v[0])?;
        let scaled = g.scale(mean, 3.0)?;
        let t1 = g.add(s1, s2)?;
        let t2 = g.add(s3, s4)?;
        let t3 = g.add(s5, scaled)?;
        let t = g.add(t1, t2)?;
        g.add(t, t3)
    });
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let point = vec![
        rand_point(&[5, 4], 10),
        rand_point(&[4, 8], 11),
        rand_point(&[8, 8], 12),
        rand_point(&[8, 3], 13),
        rand_point(&[8], 14),
    ];
    check(point, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_broadcast(h, v[4])?;
        let h = g.tanh(h)?;
        let h = g.matmul(h, v[2])?;
        let h = g.gelu(h)?;
        let y = g.matmul(h, v[3])?;
        weighted_sum(g, y, 7)
    });
}

#[test]
fn layernorm_after_matmul_passes() {
    check(vec![rand_point(&[3, 4], 20), rand_point(&[4, 5], 21), rand_point(&[5], 22), rand_point(&[5], 23)], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let y = g.layernorm(h, v[2], v[3])?;
        weighted_sum(g, y, 8)
    });
}

#[test]
fn wrong_derivative_is_caught() {
    let point = vec![rand_point(&[2, 3], 30)];
    let report = grad_check(
        |g: &mut G, v: &[Var]| {
            let value = g.value(v[0]).map(f64::tanh);
            let x = g.value(v[0]).clone();
            // Deliberately wrong: 1 - x² instead of 1 - tanh(x)².
            let y = g.custom(
                &[v[0]],
                value,
                Box::new(move |grad| vec![grad.zip_map(&x, |gv, xv| gv * (1.0 - xv * xv))]),
            )?;
            weighted_sum(g, y, 9)
        },
        &point,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed);
}

#[test]
fn l2_normalize_at_origin_uses_eps_guard() {
    let point = vec![Tensor::zeros(&[1, 3])];
    // The guarded map is x / eps near the origin; the probe step must sit
    // well inside the eps ball to see it.
    let cfg = GradCheckConfig { step: 1e-15, tol: 1e-4, abs_floor: 1e-3 };
    let report = grad_check(
        |g: &mut G, v: &[Var]| {
            let y = g.l2_normalize(v[0], graph::L2_EPS)?;
            weighted_sum(g, y, 10)
        },
        &point,
        cfg,
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_err);
}

#[test]
fn nondeterministic_function_is_rejected() {
    use std::sync::atomic::{AtomicU64, Ordering};
    let counter = AtomicU64::new(0);
    let res = grad_check(
        |g: &mut G, v: &[Var]| {
            let k = counter.fetch_add(1, Ordering::SeqCst) as f64;
            let s = g.sum(v[0])?;
            g.scale(s, 1.0 + k)
        },
        &[Tensor::full(&[2], 1.0)],
        GradCheckConfig::default(),
    );
    assert!(matches!(res, Err(Error::NonDeterministic(..))));
}

#[test]
fn softmax_and_layernorm_statistics() {
    let mut rng = stream_rng(40, 0);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::randn(&[16, 32], 3.0, &mut rng));
    let s = g.softmax(x).unwrap();
    for r in 0..16 {
        let total: f64 = g.value(s).row(r).iter().sum();
        assert!((total - 1.0).abs() <= 1e-6);
    }
    let gamma = g.constant(Tensor::full(&[32], 1.0));
    let beta = g.constant(Tensor::zeros(&[32]));
    let y = g.layernorm(x, gamma, beta).unwrap();
    for r in 0..16 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() <= 1e-5);
        assert!((var - 1.0).abs() <= 1e-4);
    }
}

#[test]
fn f32_forward_is_deterministic() {
    let run = || {
        let mut rng = stream_rng(41, 0);
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::randn(&[33, 17], 1.0, &mut rng));
        let b = g.constant(Tensor::randn(&[17, 9], 1.0, &mut rng));
        let y = g.matmul(a, b).unwrap();
        let y = g.gelu(y).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn adamw_leaves_params_unchanged_on_zero_grads() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("p", Tensor::from_fn(&[4], |i| i as f32 - 1.5));
    let before = store.get(id).clone();
    let mut buf = GradBuffer::new(&store);
    buf.accumulate(id, &Tensor::zeros(&[4]));
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::tokenizer() };
    let mut opt = AdamW::new(cfg, LrSchedule::constant(1e-3));
    for _ in 0..3 {
        opt.step(&mut store, &buf).unwrap();
    }
    assert_eq!(store.get(id), &before);
    assert_eq!(opt.step_count(), 3);
}

#[test]
fn adamw_rejects_mismatched_gradient() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("p", Tensor::zeros(&[4]));
    let mut buf = GradBuffer::new(&store);
    buf.accumulate(id, &Tensor::zeros(&[3]));
    let mut opt = AdamW::new(AdamWConfig::default(), LrSchedule::constant(1e-3));
    assert!(opt.step(&mut store, &buf).is_err());
}

#[test]
fn adamw_decreases_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::full(&[3], 2.0));
    let mut opt = AdamW::new(AdamWConfig::default(), LrSchedule::constant(0.05));
    for _ in 0..200 {
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut buf = GradBuffer::new(&store);
        grads.accumulate_into(&mut buf);
        opt.step(&mut store, &buf).unwrap();
    }
    assert!(store.get(id).data().iter().all(|v| v.abs() < 0.1));
}

#[test]
fn lr_schedule_warmup_and_floor() {
    let s = LrSchedule::tokenizer(50, 10);
    assert!(s.lr_at_epoch_end(0) < s.lr_at_epoch_end(4));
    assert!((s.lr_at_epoch_end(4) - 2e-4).abs() < 1e-15);
    assert!((s.lr_at_epoch_end(49) - 1e-5).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for e in 5..50 {
        let lr = s.lr_at_epoch_end(e);
        assert!(lr <= prev);
        prev = lr;
    }
}
