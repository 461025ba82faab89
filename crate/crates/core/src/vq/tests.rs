use proptest::prelude::*;
use rand::Rng;

use super::*;
use super::codebook::normalize_rows;
use crate::diffmath::nn::TransformerConfig;
use crate::diffmath::rng::labeled_rng;
use crate::diffmath::{AdamW, AdamWConfig, GradCheckConfig, Graph, LrSchedule, ParamStore, Tensor};
use crate::msvq::train::{build_loss, stack_tiles, Treatment};
use crate::msvq::{check_loss_gradients, fit, FitConfig, ScaleSchedule, Tokenizer, TokenizerConfig};
use crate::synth::{SynthBackbone, SynthConfig, TileST};

fn tiny_cfg(dim: usize, grid: usize, code_dim: usize, codebook_size: usize) -> TokenizerConfig {
    TokenizerConfig {
        dim,
        grid,
        code_dim,
        codebook_size,
        enc_hidden: 8,
        decoder: TransformerConfig { width: 8, depth: 1, heads: 2, mlp_ratio: 2 },
        schedule: ScaleSchedule::patch_only(grid),
        ..TokenizerConfig::default()
    }
}

fn tiny_tiles(dim: usize, grid: usize, count: u64) -> Vec<TileST> {
    let bb = SynthBackbone::new(SynthConfig { dim, grid, intrinsic_dim: dim.min(4), ..SynthConfig::default() }).unwrap();
    (0..count).map(|i| bb.generate_tile(i)).collect()
}

/// Independent brute force: f64 normalisation, full distance, first minimum.
fn oracle_nearest(codes: &[f32], dim: usize, e: &[f32]) -> usize {
    let norm = |v: &[f32]| -> Vec<f64> {
        let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() + 1e-8;
        v.iter().map(|&x| x as f64 / n).collect()
    };
    let q = norm(e);
    let mut best = (f64::INFINITY, 0);
    for (j, c) in codes.chunks(dim).enumerate() {
        let c = norm(c);
        let d: f64 = q.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Gap between the best and second-best normalized distances.
fn top2_gap(codes: &[f32], dim: usize, e: &[f32]) -> f64 {
    let q = normalize_rows(e, dim);
    let c = normalize_rows(codes, dim);
    let mut d: Vec<f64> = c
        .chunks(dim)
        .map(|v| v.iter().zip(&q).map(|(a, b)| ((a - b) as f64).powi(2)).sum())
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[1] - d[0]
}

#[test]
fn axis_codebook_example() {
    let codes = [1.0f32, 0.0, 0.0, 1.0, -1.0, 0.0];
    assert_eq!(quantize_rows(&codes, 2, &[2.0, 0.1]).unwrap(), vec![0]);
    assert_eq!(quantize_rows(&codes, 2, &[-3.0, 0.2]).unwrap(), vec![2]);
    assert_eq!(quantize_rows(&codes, 2, &[0.1, 5.0]).unwrap(), vec![1]);
}

#[test]
fn equidistant_latent_takes_lowest_index() {
    let codes = [1.0f32, 0.0, 0.0, 1.0];
    assert_eq!(quantize_rows(&codes, 2, &[1.0, 1.0]).unwrap(), vec![0]);
    let dup = [0.0f32, 1.0, 3.0, 0.0, 2.0, 0.0];
    assert_eq!(quantize_rows(&dup, 2, &[1.0, 0.0]).unwrap(), vec![1]);
}

#[test]
fn quantize_matches_brute_force_oracle() {
    let dim = 16;
    for &size in &[64usize, 512] {
        let mut rng = labeled_rng(3, "vq-oracle", size as u64);
        let codes = Tensor::<f32>::randn(&[size, dim], 1.0, &mut rng);
        let latents = Tensor::<f32>::randn(&[10_000, dim], 1.0, &mut rng);
        let got = quantize_rows(codes.data(), dim, latents.data()).unwrap();
        for (i, e) in latents.data().chunks(dim).enumerate() {
            assert_eq!(got[i] as usize, oracle_nearest(codes.data(), dim, e), "C={size} row {i}");
        }
    }
}

#[test]
fn quantize_errors() {
    assert!(matches!(quantize_rows::<f32>(&[], 2, &[1.0, 0.0]), Err(crate::Error::EmptyCodebook)));
    assert!(quantize_rows(&[1.0f32, 0.0], 2, &[1.0, 0.0, 1.0]).is_err());
    let t = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
    assert!(matches!(lookup_rows(&t, &[2]), Err(crate::Error::IndexOutOfRange { index: 2, size: 2 })));
    assert_eq!(lookup_rows(&t, &[1, 0]).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

proptest! {
    #[test]
    fn assignment_is_scale_invariant(seed in 0u64..10_000, lambda in 1e-3f32..1e3) {
        let dim = 8;
        let mut rng = labeled_rng(seed, "vq-scale", 0);
        let codes = Tensor::<f32>::randn(&[32, dim], 1.0, &mut rng);
        let e = Tensor::<f32>::randn(&[1, dim], 1.0, &mut rng);
        prop_assume!(top2_gap(codes.data(), dim, e.data()) > 1e-4);
        let scaled: Vec<f32> = e.data().iter().map(|v| v * lambda).collect();
        prop_assert_eq!(
            quantize_rows(codes.data(), dim, e.data()).unwrap(),
            quantize_rows(codes.data(), dim, &scaled).unwrap()
        );
    }
}

#[test]
fn zero_encoder_gives_zero_latents() {
    let mut store = ParamStore::<f32>::new();
    let enc = VqEncoder::new(&mut store, "enc", 6, 5, 3, &mut labeled_rng(0, "t", 0));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let x = Tensor::<f32>::randn(&[4, 6], 1.0, &mut labeled_rng(0, "x", 0));
    let z = enc.encode(&store, x).unwrap();
    assert_eq!(z.shape(), &[4, 3]);
    assert!(z.data().iter().all(|&v| v == 0.0));
    // A zero latent is equidistant from every unit code.
    let codes = Tensor::<f32>::randn(&[7, 3], 1.0, &mut labeled_rng(0, "c", 0));
    assert_eq!(quantize_rows(codes.data(), 3, z.data()).unwrap(), vec![0; 4]);
}

#[test]
fn encode_and_decode_shapes() {
    let cfg = tiny_cfg(12, 3, 4, 10);
    let tok = Tokenizer::<f32>::new(cfg).unwrap();
    let tile = &tiny_tiles(12, 3, 1)[0];
    assert_eq!(tok.encode(tile).unwrap().shape(), &[3, 3, 4]);
    let idx = tok.quantize(tile).unwrap();
    assert_eq!(idx.len(), 9);
    assert!(idx.iter().all(|&i| i < 10));
    let r = tok.msvq_encode(tile).unwrap();
    assert_eq!(tok.decode(&r).unwrap().shape(), &[9, 12]);
}

#[test]
fn decoder_rejects_wrong_geometry() {
    let cfg = tiny_cfg(12, 3, 4, 10);
    let tok = Tokenizer::<f32>::new(cfg).unwrap();
    let wrong = tiny_tiles(12, 2, 1).remove(0);
    assert!(tok.encode(&wrong).is_err());
    let z = Tensor::<f32>::zeros(&[5, 4]);
    assert!(tok.decoder.decode(&tok.store, z).is_err());
}

#[test]
fn commitment_vanishes_when_codes_equal_latents() {
    let cfg = tiny_cfg(12, 2, 4, 4);
    let mut tok = Tokenizer::<f64>::new(cfg).unwrap();
    let tile = &tiny_tiles(12, 2, 1)[0];
    let latents = tok.encode(tile).unwrap().reshape(&[4, 4]).unwrap();
    tok.store.set(tok.codebook.param, latents).unwrap();
    let x = stack_tiles(&tok, &[tile]).unwrap();
    let mut g = Graph::new();
    let (vars, maps) = build_loss(&mut g, &tok, &x, &ScaleSchedule::patch_only(2), Treatment::Live).unwrap();
    assert_eq!(maps[0].maps[0].indices, vec![0, 1, 2, 3]);
    assert!(g.value(vars.commitment).item().abs() < 1e-12);
}

#[test]
fn straight_through_copies_decoder_gradient_to_encoder() {
    let cfg = tiny_cfg(12, 2, 4, 6);
    let tok = Tokenizer::<f64>::new(cfg).unwrap();
    let tiles = tiny_tiles(12, 2, 2);
    let x = stack_tiles(&tok, &tiles.iter().collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let (vars, _) = build_loss(&mut g, &tok, &x, &ScaleSchedule::patch_only(2), Treatment::Live).unwrap();
    let grads = g.backward(vars.cos_term).unwrap();
    let at_input = grads.wrt(vars.dec_input).unwrap();
    let at_latent = grads.wrt(vars.latent).unwrap();
    assert_eq!(at_input.data(), at_latent.data());
    assert!(at_latent.data().iter().any(|&v| v != 0.0));
    let enc_w = grads.param(tok.encoder.fc1.w).unwrap();
    assert!(enc_w.data().iter().any(|&v| v != 0.0));
    // The reconstruction term alone never reaches the codebook.
    assert!(grads.param(tok.codebook.param).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn vq_loss_passes_finite_difference_check() {
    let cfg = tiny_cfg(6, 2, 3, 5);
    let tok = Tokenizer::<f64>::new(cfg).unwrap();
    let tiles = tiny_tiles(6, 2, 2);
    let refs: Vec<&TileST> = tiles.iter().collect();
    let report = check_loss_gradients(&tok, &refs, &ScaleSchedule::patch_only(2), GradCheckConfig::default()).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > 100);
}

#[test]
fn fixed_treatment_matches_live_gradients() {
    let cfg = tiny_cfg(6, 2, 3, 5);
    let tok = Tokenizer::<f64>::new(cfg).unwrap();
    let tiles = tiny_tiles(6, 2, 2);
    let x = stack_tiles(&tok, &tiles.iter().collect::<Vec<_>>()).unwrap();
    let sched = ScaleSchedule::patch_only(2);
    let mut g = Graph::new();
    let (vars, maps) = build_loss(&mut g, &tok, &x, &sched, Treatment::Live).unwrap();
    let live_total = g.value(vars.total).item();
    let live = g.backward(vars.total).unwrap();
    let fixed = crate::msvq::FixedPoint::capture(&g, &vars, maps);
    let mut g2 = Graph::new();
    let (vars2, _) = build_loss(&mut g2, &tok, &x, &sched, Treatment::Fixed(&fixed)).unwrap();
    assert!((g2.value(vars2.total).item() - live_total).abs() < 1e-12);
    let fx = g2.backward(vars2.total).unwrap();
    for id in tok.store.ids() {
        let (a, b) = (live.param(id), fx.param(id));
        match (a, b) {
            (Some(a), Some(b)) => {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{}", tok.store.name(id));
                }
            }
            (None, None) => {}
            _ => panic!("gradient presence differs for {}", tok.store.name(id)),
        }
    }
}

#[test]
fn training_reduces_loss() {
    let cfg = tiny_cfg(16, 4, 4, 32);
    let mut tok = Tokenizer::<f32>::new(cfg).unwrap();
    let tiles = tiny_tiles(16, 4, 64);
    let sched = LrSchedule { peak: 3e-3, floor: 3e-3, warmup_epochs: 0, total_epochs: 1, steps_per_epoch: 200 };
    let mut opt = AdamW::new(AdamWConfig::tokenizer(), sched);
    let mut losses = Vec::new();
    for step in 0..200 {
        let start = (step * 8) % 64;
        let batch: Vec<&TileST> = tiles[start..start + 8].iter().collect();
        losses.push(vq_train_step(&mut tok, &batch, &mut opt).unwrap().total);
    }
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "loss {head} -> {tail}");
}

#[test]
fn report_fields_are_consistent() {
    let cfg = tiny_cfg(16, 4, 4, 32);
    let mut tok = Tokenizer::<f32>::new(cfg).unwrap();
    let tiles = tiny_tiles(16, 4, 4);
    let mut opt = AdamW::new(AdamWConfig::tokenizer(), LrSchedule::tokenizer(1, 1));
    let r = vq_train_step(&mut tok, &tiles.iter().collect::<Vec<_>>(), &mut opt).unwrap();
    assert!((r.cos_term - (1.0 - r.cosine)).abs() < 1e-12);
    assert!((r.total - (r.cos_term + r.commitment)).abs() < 1e-5);
    assert!(r.perplexity >= 1.0 && r.perplexity <= 32.0);
    assert!(vq_train_step(&mut tok, &[], &mut opt).is_err());
}

#[test]
fn perplexity_of_known_histograms() {
    let uniform = codebook_stats(&[5; 64]);
    assert!((uniform.perplexity - 64.0).abs() < 1e-9);
    assert_eq!(uniform.dead_count, 0);
    let mut single = vec![0u64; 64];
    single[7] = 100;
    let s = codebook_stats(&single);
    assert!((s.perplexity - 1.0).abs() < 1e-12);
    assert_eq!(s.dead_count, 63);
    assert_eq!(codebook_stats(&[0; 8]).perplexity, 0.0);
}

#[test]
fn perplexity_of_uniform_draws() {
    let c = 512;
    let mut counts = vec![0u64; c];
    let mut rng = labeled_rng(11, "ppl", 0);
    for _ in 0..1_000_000 {
        counts[rng.random_range(0..c)] += 1;
    }
    let ppl = codebook_stats(&counts).perplexity;
    assert!((ppl - c as f64).abs() / (c as f64) < 0.02, "{ppl}");
}

#[test]
fn dead_code_reinit() {
    let mut store = ParamStore::<f32>::new();
    let mut cb = Codebook::new(&mut store, "cb", 6, 2, &mut labeled_rng(0, "cb", 0)).unwrap();
    let before = cb.vectors(&store).clone();
    let recent = vec![9.0f32, 9.0, -9.0, -9.0];
    let mut rng = labeled_rng(0, "re", 0);
    assert_eq!(cb.reinit_dead_codes(&mut store, &recent, 0.0, &mut rng).unwrap(), 0);
    assert_eq!(cb.vectors(&store), &before);

    cb.update_ema(&[0, 0, 0]);
    cb.set_ema(0.0);
    assert_eq!(cb.reinit_dead_codes(&mut store, &recent, DEFAULT_DEAD_THRESHOLD, &mut rng).unwrap(), 6);
    for row in cb.vectors(&store).data().chunks(2) {
        assert!(row == [9.0, 9.0] || row == [-9.0, -9.0]);
    }
    assert!(cb.ema().iter().all(|&e| e == 1.0));
    assert!(cb.reinit_dead_codes(&mut store, &[1.0, 2.0, 3.0], 1.0, &mut rng).is_err());
}

#[test]
fn usage_ema_tracks_assignments() {
    let mut store = ParamStore::<f32>::new();
    let mut cb = Codebook::new(&mut store, "cb", 3, 2, &mut labeled_rng(0, "cb", 0)).unwrap();
    for _ in 0..200 {
        cb.update_ema(&[0, 0, 1]);
    }
    let ema = cb.ema();
    assert!((ema[0] - 2.0).abs() < 1e-6 && (ema[1] - 1.0).abs() < 1e-6 && ema[2] < 1e-6);
    let idx = cb.quantize(&store, &[1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(cb.usage().iter().sum::<u64>(), 2);
    cb.reset_usage();
    assert!(cb.usage().iter().all(|&u| u == 0));
    assert_eq!(idx.len(), 2);
}

#[test]
fn codebook_size_limits() {
    let mut store = ParamStore::<f32>::new();
    assert!(matches!(
        Codebook::from_vectors(&mut store, "e", Tensor::zeros(&[0, 2])),
        Err(crate::Error::EmptyCodebook)
    ));
    assert!(Codebook::from_vectors(&mut store, "big", Tensor::zeros(&[MAX_CODEBOOK_SIZE + 1, 1])).is_err());
}

fn identical_tiles_cfg() -> SynthConfig {
    SynthConfig { dim: 16, grid: 4, intrinsic_dim: 4, prototypes: 1, noise: 0.0, ..SynthConfig::default() }
}

#[test]
fn cls_baseline_is_deterministic() {
    let bb = SynthBackbone::new(SynthConfig { dim: 16, grid: 4, intrinsic_dim: 4, ..SynthConfig::default() }).unwrap();
    let train: Vec<TileST> = (0..16).map(|i| bb.generate_tile(i)).collect();
    let eval: Vec<TileST> = (100..104).map(|i| bb.generate_tile(i)).collect();
    let cfg = tiny_cfg(16, 4, 4, 16);
    let fit_cfg = FitConfig { epochs: 2, batch_size: 4, peak_lr: 3e-3, min_lr: 1e-4, warmup_epochs: 0, ..FitConfig::default() };
    let sched = ScaleSchedule::patch_only(4);
    let a = cls_baseline_recon(&train, &eval, &cfg, &sched, &fit_cfg).unwrap();
    let b = cls_baseline_recon(&train, &eval, &cfg, &sched, &fit_cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.vq.len(), 2);
    assert_eq!(a.cls.len(), 2);
}

#[test]
fn identical_tiles_are_reconstructed_by_both_paths() {
    let bb = SynthBackbone::new(identical_tiles_cfg()).unwrap();
    let train: Vec<TileST> = (0..16).map(|i| bb.generate_tile(i)).collect();
    let eval: Vec<TileST> = (100..102).map(|i| bb.generate_tile(i)).collect();
    let cfg = tiny_cfg(16, 4, 4, 16);
    let fit_cfg = FitConfig { epochs: 15, batch_size: 4, peak_lr: 1e-2, min_lr: 1e-3, warmup_epochs: 0, ..FitConfig::default() };
    let c = cls_baseline_recon(&train, &eval, &cfg, &ScaleSchedule::patch_only(4), &fit_cfg).unwrap();
    assert!(*c.vq.last().unwrap() >= 0.99, "{:?}", c.vq);
    assert!(*c.cls.last().unwrap() >= 0.99, "{:?}", c.cls);
}

#[test]
fn cls_baseline_requires_summary_tokens() {
    let mut tiles = tiny_tiles(16, 4, 2);
    tiles[1].cls = None;
    let cfg = tiny_cfg(16, 4, 4, 16);
    let res = cls_baseline_recon(&tiles, &tiles, &cfg, &ScaleSchedule::patch_only(4), &FitConfig::default());
    assert!(matches!(res, Err(crate::Error::MissingCls(_))));
}

#[test]
fn fit_records_epoch_metrics() {
    let cfg = tiny_cfg(16, 4, 4, 16);
    let mut tok = Tokenizer::<f32>::new(cfg).unwrap();
    let tiles = tiny_tiles(16, 4, 8);
    let fit_cfg = FitConfig { epochs: 3, batch_size: 4, ..FitConfig::default() };
    let mut seen = 0;
    let hist = fit(&mut tok, &tiles, &ScaleSchedule::patch_only(4), &fit_cfg, |_, m| {
        assert_eq!(m.epoch, seen);
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(hist.len(), 3);
    assert!(hist.iter().all(|m| m.loss.is_finite() && m.perplexity >= 1.0));
    assert!(fit(&mut tok, &[], &ScaleSchedule::patch_only(4), &fit_cfg, |_, _| Ok(())).is_err());
}
