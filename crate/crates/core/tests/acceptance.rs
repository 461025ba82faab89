//! End-to-end acceptance checks. Each test writes one PASS/FAIL line to
//! stderr (bypassing output capture) and then asserts.
//!
//! The training checks are slow on one core; run them with
//! `cargo test --release -p vqtok-core --test acceptance` when iterating.

mod oracles;

use std::io::Write as _;
use std::time::Instant;

use rand::Rng;
use vqtok_core::codec::{
    compress_tiles, compression_report, decompress_tiles, load_artifact, save_artifact, IndexStream, TokenizerArtifact,
    TrainingFingerprint,
};
use vqtok_core::diffmath::nn::TransformerConfig;
use vqtok_core::diffmath::rng::{labeled_rng, stream_rng};
use vqtok_core::diffmath::{grad_check, Attrs, DType, GradCheckConfig, Graph, OpId, ParamStore, Tensor, Var};
use vqtok_core::downstream::{
    adapter_align_pretrain, cindex, classify_train, lora_merge, lora_wrap, planted_benchmark, AdapterConfig, AdapterMode, AlignConfig,
    ConvAdapter, FinetuneConfig, InitKind, PlantedConfig, PlantedSignal, PretrainedWeights, ADAPTER_PREFIX,
};
use vqtok_core::msvq::{check_loss_gradients, fit, reconstruction_fidelity, FitConfig, ScaleSchedule, Tokenizer, TokenizerConfig};
use vqtok_core::ssl::{
    abmil_ssl_step, build_region, empirical_chance, mean_pool_latent, mim_eval, pretrain, region_soft_target, sample_mask, MaskSpec,
    Objective, PretrainConfig, RegionBag, SoftTarget, SslModel, WsiConfig, WsiTransformer,
};
use vqtok_core::synth::{read_feature_file, write_feature_file, SynthBackbone, SynthConfig, TileST};
use vqtok_core::vq::{cls_baseline_recon, quantize_rows};

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("acceptance {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Desk-scale synthetic source: D = 64, 14x14 grid, intrinsic dim 16.
fn desk_backbone(seed: u64) -> SynthBackbone {
    SynthBackbone::new(SynthConfig { seed, ..SynthConfig::default() }).unwrap()
}

fn desk_tiles(bb: &SynthBackbone, ids: std::ops::Range<u64>) -> Vec<TileST> {
    ids.map(|i| bb.generate_tile(i)).collect()
}

/// Small geometry for the slide-level checks: D = 32, 4x4 grid, C = 64.
fn toy_backbone() -> SynthBackbone {
    SynthBackbone::new(SynthConfig { dim: 32, grid: 4, intrinsic_dim: 8, smoothness: 50.0, with_cls: false, ..SynthConfig::default() })
        .unwrap()
}

fn toy_tokenizer(bb: &SynthBackbone, epochs: usize) -> Tokenizer<f32> {
    let sched: ScaleSchedule = "1,2,4".parse().unwrap();
    let cfg = TokenizerConfig {
        dim: 32,
        grid: 4,
        code_dim: 8,
        codebook_size: 64,
        enc_hidden: 32,
        decoder: TransformerConfig { width: 16, depth: 1, heads: 2, mlp_ratio: 2 },
        schedule: sched.clone(),
        ..TokenizerConfig::default()
    };
    let mut tok = Tokenizer::<f32>::new(cfg).unwrap();
    let tiles: Vec<TileST> = (0..256).map(|i| bb.generate_tile(i)).collect();
    let fc = FitConfig { epochs, peak_lr: 3e-3, warmup_epochs: 1, ..FitConfig::default() };
    fit(&mut tok, &tiles, &sched, &fc, |_, _| Ok(())).unwrap();
    tok.freeze();
    tok
}

#[test]
fn quantizer_matches_brute_force() {
    let dim = 16;
    let mut agree = 0;
    let mut total = 0;
    let mut secs = 0.0;
    for size in [64usize, 512] {
        let mut rng = labeled_rng(11, "acceptance-quantizer", size as u64);
        let codes = Tensor::<f32>::randn(&[size, dim], 1.0, &mut rng);
        let latents = Tensor::<f32>::randn(&[10_000, dim], 1.0, &mut rng);
        let start = Instant::now();
        let got = quantize_rows(codes.data(), dim, latents.data()).unwrap();
        secs += start.elapsed().as_secs_f64();
        let codes64 = to_f64(codes.data());
        for (i, e) in latents.data().chunks(dim).enumerate() {
            total += 1;
            agree += usize::from(got[i] == oracles::nearest(&codes64, dim, &to_f64(e)));
        }
    }
    verdict(
        "quantizer matches brute force (C=64, C=512, 10k latents each)",
        agree == total && secs < 10.0,
        &format!("{agree}/{total} indices agree, lookup {secs:.3}s"),
    );
}

#[test]
fn degenerate_schedules_reduce_to_plain_and_pooled_quantization() {
    let bb = desk_backbone(0);
    let tiles = desk_tiles(&bb, 0..1000);
    let vq = Tokenizer::<f32>::new(TokenizerConfig { schedule: ScaleSchedule::patch_only(14), ..TokenizerConfig::default() }).unwrap();
    let ms = Tokenizer::<f32>::new(TokenizerConfig::default()).unwrap();
    let pooled_sched = ScaleSchedule::new(vec![(1, 1)]).unwrap();
    let codes = to_f64(ms.codebook.vectors(&ms.store).data());
    let d = ms.cfg.code_dim;
    let (mut patch_ok, mut pooled_ok) = (0, 0);
    for t in &tiles {
        // patch-only schedule: identical indices, latents and outputs
        let idx = vq.quantize(t).unwrap();
        let r = vq.msvq_encode(t).unwrap();
        let plain_latent = vq.codebook.lookup(&vq.store, &idx).unwrap();
        let plain_out = vq.decode_latent(&plain_latent).unwrap();
        let same_latent = vq.reconstruct_latent(&r).unwrap().data() == plain_latent.data();
        let same_out = vq.decode(&r).unwrap().data().iter().zip(plain_out.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let shared = ms.msvq_encode_with(t, &ScaleSchedule::patch_only(14)).unwrap().maps[0].indices == ms.quantize(t).unwrap();
        patch_ok += usize::from(r.len() == 1 && r.maps[0].indices == idx && same_latent && same_out && shared);

        // single-cell schedule: the quantized mean latent
        let latent = to_f64(ms.encode(t).unwrap().data());
        let mut mean = vec![0.0; d];
        for row in latent.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= (latent.len() / d) as f64);
        let r1 = ms.msvq_encode_with(t, &pooled_sched).unwrap();
        pooled_ok += usize::from(r1.maps[0].indices == [oracles::nearest(&codes, d, &mean)]);
    }
    verdict(
        "degenerate schedules ([(14,14)] is plain VQ, [(1,1)] is pooled VQ)",
        patch_ok == tiles.len() && pooled_ok == tiles.len(),
        &format!("patch-only {patch_ok}/{n}, single-cell {pooled_ok}/{n}", n = tiles.len()),
    );
}

#[test]
fn multiscale_encoding_matches_reference() {
    let sched = ScaleSchedule::default_for(14);
    let mut tok = Tokenizer::<f64>::new(TokenizerConfig { schedule: sched.clone(), ..TokenizerConfig::default() }).unwrap();
    // move the transforms off the identity so they matter
    let mut rng = labeled_rng(21, "acceptance-phi", 0);
    let convs: Vec<_> = tok.transforms.entries.iter().filter_map(|e| e.conv.clone()).collect();
    for conv in &convs {
        for id in [conv.w, conv.b] {
            let shape = tok.store.get(id).shape().to_vec();
            let noise = Tensor::<f64>::randn(&shape, 0.05, &mut rng);
            tok.store.get_mut(id).data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
        }
    }
    let codes = tok.codebook.vectors(&tok.store).data().to_vec();
    let phis: Vec<oracles::Phi> = sched
        .scales()
        .iter()
        .map(|&hw| tok.transforms.get(hw).unwrap().map(|c| (c.kernel, tok.store.get(c.w).data().to_vec(), tok.store.get(c.b).data().to_vec())))
        .collect();
    let bb = desk_backbone(3);
    let (p, d) = (tok.cfg.grid, tok.cfg.code_dim);
    let mut scales_ok = 0;
    let mut scales_total = 0;
    let mut tiles_ok = 0;
    for i in 0..1000 {
        let t = bb.generate_tile(50_000 + i);
        let got = tok.msvq_encode(&t).unwrap();
        let want = oracles::multiscale_encode(tok.encode(&t).unwrap().data(), p, d, &codes, sched.scales(), &phis);
        let matches = got.maps.iter().zip(&want).filter(|(g, w)| &g.indices == *w).count();
        scales_ok += matches;
        scales_total += want.len();
        tiles_ok += usize::from(matches == want.len() && got.len() == want.len());
    }
    verdict(
        "multi-scale encoding matches the straight-line reference",
        tiles_ok == 1000,
        &format!("{tiles_ok}/1000 tiles, {scales_ok}/{scales_total} scale maps, {} transforms active", convs.len()),
    );
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> vqtok_core::Result<Var> {
    let w = Tensor::randn(g.shape(y), 1.0, &mut stream_rng(seed, 77));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn gradient_suite_passes_finite_differences() {
    let ops: [(&str, Vec<Vec<usize>>, Attrs, bool); 16] = [
        ("matmul", vec![vec![3, 4], vec![4, 2]], Attrs::default(), false),
        ("add", vec![vec![2, 3], vec![2, 3]], Attrs::default(), false),
        ("mul", vec![vec![2, 3], vec![2, 3]], Attrs::default(), false),
        ("tanh", vec![vec![3, 5]], Attrs::default(), false),
        ("gelu", vec![vec![3, 5]], Attrs::default(), false),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], Attrs::default(), false),
        ("softmax", vec![vec![3, 5]], Attrs::default(), false),
        ("conv2d", vec![vec![5, 5, 2], vec![3, 3, 2, 3], vec![3]], Attrs { stride: 2, pad: 1, ..Attrs::default() }, false),
        ("conv2d", vec![vec![4, 4, 3], vec![3, 3, 3, 3], vec![3]], Attrs { stride: 1, pad: 1, ..Attrs::default() }, false),
        ("bilinear_resize", vec![vec![4, 4, 2]], Attrs { out_hw: (7, 5), ..Attrs::default() }, false),
        ("bilinear_resize", vec![vec![4, 4, 2]], Attrs { out_hw: (2, 3), ..Attrs::default() }, false),
        ("area_resize", vec![vec![7, 7, 2]], Attrs { out_hw: (3, 2), ..Attrs::default() }, false),
        ("l2_normalize", vec![vec![3, 4]], Attrs::default(), false),
        ("cosine_similarity", vec![vec![3, 4], vec![3, 4]], Attrs::default(), false),
        ("cross_entropy_soft", vec![vec![3, 4], vec![3, 4]], Attrs::default(), true),
        ("mse", vec![vec![3, 4], vec![3, 4]], Attrs::default(), true),
    ];
    let mut failures = Vec::new();
    let mut checks = 0;
    let mut worst: f64 = 0.0;
    for (name, shapes, attrs, scalar) in &ops {
        let op: OpId = name.parse().unwrap();
        for seed in 0..5u64 {
            let point: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(k, s)| Tensor::randn(s, 1.0, &mut stream_rng(seed, k as u64))).collect();
            let report = grad_check(
                |g, v| {
                    let y = g.apply(op, v, attrs)?;
                    if *scalar { Ok(y) } else { weighted_sum(g, y, seed) }
                },
                &point,
                GradCheckConfig::default(),
            )
            .unwrap();
            checks += 1;
            worst = worst.max(report.max_rel_err);
            if !report.passed {
                failures.push(format!("{name}@{seed}"));
            }
        }
    }

    // full loss, patch-only and multi-scale, with the straight-through
    // assignment frozen at the evaluation point
    let bb = SynthBackbone::new(SynthConfig { dim: 6, grid: 4, intrinsic_dim: 4, ..SynthConfig::default() }).unwrap();
    let tiles: Vec<TileST> = (0..2).map(|i| bb.generate_tile(i)).collect();
    let refs: Vec<&TileST> = tiles.iter().collect();
    for sched in [ScaleSchedule::patch_only(4), "1,2,4".parse().unwrap()] {
        let cfg = TokenizerConfig {
            dim: 6,
            grid: 4,
            code_dim: 3,
            codebook_size: 5,
            enc_hidden: 8,
            decoder: TransformerConfig { width: 8, depth: 1, heads: 2, mlp_ratio: 2 },
            schedule: sched.clone(),
            ..TokenizerConfig::default()
        };
        let tok = Tokenizer::<f64>::new(cfg).unwrap();
        let report = check_loss_gradients(&tok, &refs, &sched, GradCheckConfig::default()).unwrap();
        checks += 1;
        worst = worst.max(report.max_rel_err);
        if !report.passed {
            failures.push(format!("loss {sched}"));
        }
    }
    verdict(
        "gradient suite (14 primitives, VQ and multi-scale loss) at rel err <= 1e-4",
        failures.is_empty(),
        &format!("{checks} checks, worst rel err {worst:.2e}, failing {failures:?}"),
    );
}

fn desk_fit(epochs: usize, seed: u64) -> FitConfig {
    FitConfig { epochs, peak_lr: 3e-3, warmup_epochs: 1, seed, ..FitConfig::default() }
}

#[test]
fn patch_tokens_outperform_the_summary_token() {
    let start = Instant::now();
    let bb = desk_backbone(0);
    let train = desk_tiles(&bb, 0..256);
    let eval = desk_tiles(&bb, 1_000_000..1_000_128);
    let sched = ScaleSchedule::patch_only(14);
    let cfg = TokenizerConfig { schedule: sched.clone(), ..TokenizerConfig::default() };
    let curves = cls_baseline_recon(&train, &eval, &cfg, &sched, &desk_fit(10, 0)).unwrap();
    let (vq, cls) = (*curves.vq.last().unwrap(), *curves.cls.last().unwrap());
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "patch-token VQ reaches cos >= 0.95 and beats the summary decoder by >= 0.05 (D=64, C=512)",
        vq >= 0.95 && vq - cls >= 0.05 && secs <= 1800.0,
        &format!("VQ {vq:.4}, summary {cls:.4}, margin {:.4}, {secs:.0}s", vq - cls),
    );
}

#[test]
fn multiscale_matches_or_beats_single_scale() {
    let mut rows = Vec::new();
    let mut wins = 0;
    for seed in 0..3 {
        let bb = desk_backbone(seed);
        let train = desk_tiles(&bb, 0..256);
        let eval = desk_tiles(&bb, 1_000_000..1_000_128);
        let mut fid = Vec::new();
        for sched in [ScaleSchedule::patch_only(14), ScaleSchedule::default_for(14)] {
            let mut tok = Tokenizer::<f32>::new(TokenizerConfig { schedule: sched.clone(), seed, ..TokenizerConfig::default() }).unwrap();
            fit(&mut tok, &train, &sched, &desk_fit(20, seed), |_, _| Ok(())).unwrap();
            fid.push(reconstruction_fidelity(&tok, &eval, &sched).unwrap());
        }
        wins += usize::from(fid[1] >= fid[0]);
        rows.push(format!("seed {seed}: VQ {:.4} MSVQ {:.4}", fid[0], fid[1]));
    }
    verdict("multi-scale fidelity >= single-scale on 3 paired seeds", wins == 3, &rows.join(", "));
}

#[test]
fn compression_accounting_at_full_geometry() {
    let r = compression_report(1024, 16, 14, &ScaleSchedule::patch_only(14), DType::F32).unwrap();
    let raw = 196.0 * 1024.0 * 4.0;
    let indices = 196.0 * 2.0;
    verdict(
        "compression accounting (dim ratio 64, patch-only byte ratio 2048)",
        r.dim_ratio == 1024.0 / 16.0 && r.dim_ratio == 64.0 && r.byte_ratio == raw / indices && r.byte_ratio == 2048.0,
        &format!("dim ratio {}, byte ratio {} ({} raw / {} index bytes per tile)", r.dim_ratio, r.byte_ratio, r.raw_bytes, r.index_bytes),
    );
}

#[test]
fn file_formats_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n);
    let bb = desk_backbone(4);
    let tiles = desk_tiles(&bb, 0..24);
    let mut checks = Vec::new();

    write_feature_file(path("a.pvqf"), &tiles, None).unwrap();
    let back = read_feature_file(path("a.pvqf")).unwrap();
    write_feature_file(path("b.pvqf"), &back, None).unwrap();
    let same_tiles = back.iter().zip(&tiles).all(|(a, b)| {
        a.tokens.iter().map(|v| v.to_bits()).eq(b.tokens.iter().map(|v| v.to_bits())) && a.cls == b.cls && a.coords == b.coords
    });
    checks.push(("PVQF", same_tiles && std::fs::read(path("a.pvqf")).unwrap() == std::fs::read(path("b.pvqf")).unwrap()));

    let mut tok = Tokenizer::<f32>::new(TokenizerConfig::default()).unwrap();
    let sched = tok.cfg.schedule.clone();
    fit(&mut tok, &tiles, &sched, &desk_fit(1, 0), |_, _| Ok(())).unwrap();
    tok.freeze();
    let fp = TrainingFingerprint { mode: "msvq".into(), seed: 0, epochs: 1, steps: 2, tiles: 24, data_crc: None, final_loss: None };
    save_artifact(path("a.pvqt"), &TokenizerArtifact::new(tok.clone(), fp)).unwrap();
    let loaded = load_artifact(path("a.pvqt")).unwrap();
    save_artifact(path("b.pvqt"), &loaded).unwrap();
    checks.push(("PVQT", std::fs::read(path("a.pvqt")).unwrap() == std::fs::read(path("b.pvqt")).unwrap()));

    let stream = compress_tiles(&tok, &tiles).unwrap();
    stream.save(path("a.pvqi")).unwrap();
    let from_file = IndexStream::load(path("a.pvqi")).unwrap();
    from_file.save(path("b.pvqi")).unwrap();
    checks.push(("PVQI", from_file == stream && std::fs::read(path("a.pvqi")).unwrap() == std::fs::read(path("b.pvqi")).unwrap()));

    // decode through the files against the in-memory tokenizer
    let decoded = decompress_tiles(&loaded.tokenizer, &from_file).unwrap();
    let exact = tiles.iter().zip(&decoded).all(|(t, dec)| {
        let direct = tok.decode(&tok.msvq_encode(t).unwrap()).unwrap();
        direct.data().iter().map(|v| v.to_bits()).eq(dec.tokens.iter().map(|v| v.to_bits()))
    });
    checks.push(("decode", exact));
    let detail: Vec<String> = checks.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "differs" })).collect();
    verdict("PVQF/PVQT/PVQI round trips and file decode are bit-exact", checks.iter().all(|c| c.1), &detail.join(", "));
}

fn ssl_config(objective: Objective, epochs: usize) -> PretrainConfig {
    PretrainConfig {
        objective,
        epochs,
        mim_batch: 8,
        abmil_batch: 8,
        peak_lr: 3e-3,
        warmup_epochs: 1,
        abmil_hidden: 32,
        abmil_attn: 16,
        wsi: WsiConfig { width: 32, depth: 2, heads: 4, mlp_ratio: 2, ..WsiConfig::default() },
        ..PretrainConfig::default()
    }
}

fn mim_model(outcome: &vqtok_core::ssl::PretrainOutcome) -> &WsiTransformer {
    match &outcome.model {
        SslModel::Mim(m) => m,
        SslModel::Abmil(_) => unreachable!("mim objective"),
    }
}

#[test]
fn ssl_objectives_learn_beyond_chance() {
    let bb = toy_backbone();
    let tok = toy_tokenizer(&bb, 0);
    let c = tok.cfg.codebook_size;
    let regions: Vec<RegionBag> =
        (0..200).map(|r| build_region(&tok, &bb.generate_region(r), 16, &|l| Ok(mean_pool_latent(l))).unwrap()).collect();
    let refs: Vec<&RegionBag> = regions.iter().collect();
    let mut mask_rng = labeled_rng(5, "acceptance-eval-mask", 0);
    let masks: Vec<MaskSpec> = (0..regions.len()).map(|_| sample_mask(&mut mask_rng, 256, 96).unwrap()).collect();
    let mrefs: Vec<&MaskSpec> = masks.iter().collect();

    let init = pretrain(&ssl_config(Objective::Mim, 0), &regions, c, |_, _| Ok(())).unwrap();
    let first = mim_eval(mim_model(&init), &init.store, &refs[..16], &mrefs[..16]).unwrap();
    let trained = pretrain(&ssl_config(Objective::Mim, 20), &regions, c, |_, _| Ok(())).unwrap();
    let last = mim_eval(mim_model(&trained), &trained.store, &refs, &mrefs).unwrap();
    let chance = empirical_chance(&regions, c).unwrap();
    let ln_c = (c as f64).ln();

    let targets: Vec<SoftTarget> = regions.iter().map(|r| region_soft_target(r, c, Default::default()).unwrap()).collect();
    let trefs: Vec<&SoftTarget> = targets.iter().collect();
    let gap = |epochs: usize| {
        let mut out = pretrain(&ssl_config(Objective::Abmil, epochs), &regions, c, |_, _| Ok(())).unwrap();
        let SslModel::Abmil(m) = &out.model else { unreachable!("abmil objective") };
        let m = m.clone();
        abmil_ssl_step(&m, &mut out.store, &refs, &trefs, None).unwrap().gap
    };
    let (gap0, gap20) = (gap(0), gap(20));

    let loss_ok = (first.loss - ln_c).abs() <= 0.05 * ln_c;
    let acc_ok = last.accuracy > 5.0 * chance;
    let gap_ok = gap20 <= 0.5 * gap0;
    verdict(
        "SSL sanity (initial MIM loss ~ ln C, masked accuracy > 5x chance, ABMIL gap halves)",
        loss_ok && acc_ok && gap_ok,
        &format!(
            "MIM loss {:.4} vs ln C {ln_c:.4}; masked acc {:.4} vs chance {chance:.4} ({:.1}x); gap {gap0:.4} -> {gap20:.4} ({:.0}% smaller)",
            first.loss,
            last.accuracy,
            last.accuracy / chance,
            100.0 * (1.0 - gap20 / gap0)
        ),
    );
}

#[test]
fn downstream_analogs_hold() {
    // (c) c-index against the pairwise oracle
    let mut oracle_ok = true;
    for seed in 0..20 {
        let mut rng = labeled_rng(seed, "acceptance-cindex", 0);
        let times: Vec<f64> = (0..150).map(|_| rng.random_range(0..50) as f64).collect();
        let events: Vec<bool> = (0..150).map(|_| rng.random_bool(0.6)).collect();
        let risks: Vec<f64> = (0..150).map(|_| rng.random_range(0..30) as f64 * 0.5).collect();
        oracle_ok &= cindex(&times, &events, &risks).unwrap() == oracles::concordance(&times, &events, &risks).unwrap();
    }
    let mut rng = labeled_rng(1, "acceptance-cindex-null", 0);
    let n = 2000;
    let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
    let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let perfect: Vec<f64> = times.iter().map(|t| -t).collect();
    let random: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let c_perfect = cindex(&times, &events, &perfect).unwrap();
    let c_random = cindex(&times, &events, &random).unwrap();
    let cindex_ok = oracle_ok && c_perfect == 1.0 && (c_random - 0.5).abs() <= 0.05;

    // (a), (b) planted-signal slides
    let bb = toy_backbone();
    let tok = toy_tokenizer(&bb, 10);
    let train: Vec<TileST> = (0..256).map(|i| bb.generate_tile(i)).collect();
    let mut astore = ParamStore::new();
    let acfg = AdapterConfig { grid: 4, in_channels: 8, channels: vec![16, 32] };
    let adapter = ConvAdapter::new(&mut astore, ADAPTER_PREFIX, acfg, &mut labeled_rng(0, "adapter-init", 0)).unwrap();
    adapter_align_pretrain(&adapter, &mut astore, &tok, &train, &AlignConfig { lr: 3e-3, ..AlignConfig::default() }).unwrap();
    let embed = |l: &Tensor<f32>| Ok(adapter.embed(&astore, std::slice::from_ref(l))?.into_data());
    let regions: Vec<RegionBag> = (0..200).map(|r| build_region(&tok, &bb.generate_region(r), 16, &embed).unwrap()).collect();
    let ssl = pretrain(&ssl_config(Objective::Abmil, 20), &regions, tok.cfg.codebook_size, |_, _| Ok(())).unwrap();

    let base = FinetuneConfig {
        adapter_channels: vec![16, 32],
        abmil_hidden: 32,
        abmil_attn: 16,
        wsi: WsiConfig { width: 32, depth: 2, heads: 4, mlp_ratio: 2, classes: 64, ..WsiConfig::default() },
        ..FinetuneConfig::default()
    };
    let arms = [
        ("scratch PT-FZ", InitKind::Scratch, AdapterMode::PtFz),
        ("pretrained PT-FZ", InitKind::Pretrained, AdapterMode::PtFz),
        ("scratch PT-FT", InitKind::Scratch, AdapterMode::PtFt),
        ("scratch RD-FZ", InitKind::Scratch, AdapterMode::RdFz),
    ];
    let mut sums = [0.0; 4];
    let seeds = 5;
    for seed in 0..seeds {
        let bench = planted_benchmark(&bb, &tok, &PlantedConfig { signal: PlantedSignal::Composition, bags: 30, seed, ..PlantedConfig::default() }).unwrap();
        let weights = PretrainedWeights { slide: Some(&ssl.store), adapter: Some(&astore) };
        for (k, (_, init, mode)) in arms.iter().enumerate() {
            let cfg = FinetuneConfig { init: *init, adapter_mode: *mode, seed, ..base.clone() };
            sums[k] += classify_train(&cfg, &bench.classify, weights).unwrap().mean_auc();
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / seeds as f64).collect();
    let init_ok = means[1] >= means[0];
    let adapter_ok = means[2] > means[3];
    let arms_line: Vec<String> = arms.iter().zip(&means).map(|((n, _, _), m)| format!("{n} {m:.4}")).collect();
    verdict(
        "downstream analogs (pretrained >= scratch, PT-FT > RD-FZ, c-index oracle)",
        init_ok && adapter_ok && cindex_ok,
        &format!(
            "mean macro AUC over {seeds} seeds: {}; c-index oracle {}, perfect {c_perfect}, random {c_random:.4}",
            arms_line.join(", "),
            if oracle_ok { "exact" } else { "differs" }
        ),
    );
}

#[test]
fn lora_on_the_roformer_head() {
    let mut store = ParamStore::<f32>::new();
    let cfg = WsiConfig { in_dim: 32, width: 64, depth: 2, heads: 4, mlp_ratio: 2, classes: 8, ..WsiConfig::default() };
    let mut wsi = WsiTransformer::new(&mut store, "wsi", cfg, &mut stream_rng(31, 0)).unwrap();
    let x = Tensor::<f32>::randn(&[64, 32], 1.0, &mut stream_rng(32, 0));
    let coords: Vec<(f64, f64)> = (0..64).map(|i| ((i / 8) as f64, (i % 8) as f64)).collect();
    let hidden = |wsi: &WsiTransformer, store: &ParamStore<f32>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let h = wsi.encode(&mut g, store, xv, &coords, None).unwrap();
        g.value(h).clone()
    };
    let base = hidden(&wsi, &store);
    lora_wrap(&mut store, wsi.backbone_linears_mut(), 16, 16.0, &mut stream_rng(33, 0)).unwrap();
    let wrapped = hidden(&wsi, &store);
    let identity = base.data().iter().zip(wrapped.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    // train the adapters a little so B is non-zero, then merge
    let mut rng = stream_rng(34, 0);
    for l in wsi.backbone_linears() {
        let b = l.lora.unwrap().b;
        let shape = store.get(b).shape().to_vec();
        store.set(b, Tensor::randn(&shape, 0.05, &mut rng)).unwrap();
    }
    let adapted = hidden(&wsi, &store);
    let moved = adapted.max_abs_diff(&base);
    lora_merge(&mut store, wsi.backbone_linears_mut()).unwrap();
    let merged = hidden(&wsi, &store);
    let diff = adapted.max_abs_diff(&merged);
    verdict(
        "LoRA on the Roformer head (zero-init identity, merge within 1e-5)",
        identity && moved > 1e-3 && diff <= 1e-5,
        &format!("identity {}, adapted output moved {moved:.3e}, merge max diff {diff:.2e}", if identity { "bit-exact" } else { "differs" }),
    );
}
