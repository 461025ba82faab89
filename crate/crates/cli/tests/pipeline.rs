//! End-to-end runs of the `vqtok` binary on a toy geometry.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const GEN: &[&str] = &["--synth-intrinsic-dim", "8", "--synth-smoothness", "50", "--synth-with-cls", "false"];

const TOY_VQ: &[&str] = &[
    "--synth-dim", "32", "--synth-grid", "4", "--codebook-size", "64", "--code-dim", "8", "--enc-hidden", "32",
    "--dec-width", "16", "--dec-depth", "1", "--dec-heads", "2", "--tiles", "128", "--eval-tiles", "32",
    "--epochs", "2", "--lr", "2e-3", "--warmup-epochs", "1",
];

fn vqtok(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vqtok"));
    cmd.args(args).env_remove("PVQ_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn vqtok")
}

fn ok(args: &[&str]) -> Output {
    let out = vqtok(args, &[]);
    assert!(out.status.success(), "vqtok {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("pipeline").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn train(run: &Path, extra: &[&str]) {
    let mut args = vec!["train-vq", "--run-dir", s(run)];
    args.extend_from_slice(GEN);
    args.extend_from_slice(TOY_VQ);
    args.extend(extra);
    ok(&args);
}

/// A multi-scale toy tokenizer with an aligned adapter, trained once.
fn tokenizer() -> &'static Path {
    static TOK: OnceLock<PathBuf> = OnceLock::new();
    TOK.get_or_init(|| {
        let run = scratch("tokenizer");
        train(&run, &["--scales", "1,2,4", "--adapter-channels", "16,32", "--adapter-epochs", "2"]);
        run.join("checkpoints/tokenizer.pvqt")
    })
}

#[test]
fn training_runs_are_reproducible() {
    let dir = scratch("repro");
    let (a, b, c) = (dir.join("a"), dir.join("b"), dir.join("c"));
    train(&a, &["--scales", "1,2,4", "--seed", "4"]);
    train(&b, &["--scales", "1,2,4", "--seed", "4"]);
    train(&c, &["--scales", "1,2,4", "--seed", "5"]);
    assert_eq!(read(a.join("metrics.csv")), read(b.join("metrics.csv")));
    assert_eq!(read(a.join("checkpoints/tokenizer.pvqt")), read(b.join("checkpoints/tokenizer.pvqt")));
    assert_ne!(read(a.join("metrics.csv")), read(c.join("metrics.csv")));
    for f in ["config.resolved", "plots/loss.svg", "plots/fidelity.svg", "plots/perplexity.svg"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn vq_mode_is_single_patch_scale_msvq() {
    let dir = scratch("vq-mode");
    let (vq, ms) = (dir.join("vq"), dir.join("ms"));
    train(&vq, &["--mode", "vq"]);
    train(&ms, &["--mode", "msvq", "--scales", "4"]);
    assert_eq!(read(vq.join("metrics.csv")), read(ms.join("metrics.csv")));

    // identical weights give identical index streams
    for run in [&vq, &ms] {
        let mut args = vec!["compress", "--run-dir", s(run), "--tiles", "16"];
        args.extend_from_slice(GEN);
        let tok = run.join("checkpoints/tokenizer.pvqt");
        args.extend(["--tokenizer", s(&tok)]);
        ok(&args);
    }
    assert_eq!(read(vq.join("tiles.pvqi")), read(ms.join("tiles.pvqi")));

    let out = vqtok(&["train-vq", "--run-dir", s(&dir.join("bad")), "--mode", "vq", "--scales", "1,4"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compress_decompress_compress_is_stable() {
    let dir = scratch("codec");
    let tok = s(tokenizer());
    let mut first = vec!["compress", "--run-dir", s(&dir), "--tokenizer", tok, "--tiles", "40", "--output"];
    let s1 = dir.join("s1.pvqi");
    first.push(s(&s1));
    first.extend_from_slice(GEN);
    ok(&first);
    let f1 = dir.join("f1.pvqf");
    ok(&["decompress", "--run-dir", s(&dir), "--tokenizer", tok, "--input", s(&s1), "--output", s(&f1)]);
    let (s2, s3) = (dir.join("s2.pvqi"), dir.join("s3.pvqi"));
    for out in [&s2, &s3] {
        ok(&["compress", "--run-dir", s(&dir), "--tokenizer", tok, "--input", s(&f1), "--output", s(out)]);
    }
    assert_eq!(read(&s2), read(&s3));
    assert_eq!(read(&s1).len(), read(&s2).len());

    let metrics = String::from_utf8(read(dir.join("metrics.csv"))).unwrap();
    assert!(metrics.starts_with("tiles,raw_bytes,index_bytes,stream_bytes"), "{metrics}");
}

#[test]
fn zero_epoch_pretraining_keeps_initial_weights() {
    let dir = scratch("pretrain0");
    let mut args = vec!["pretrain", "--run-dir", s(&dir), "--tokenizer", s(tokenizer()), "--regions", "2", "--epochs", "0"];
    args.extend(["--width", "16", "--depth", "1", "--heads", "2", "--mask", "16"]);
    args.extend_from_slice(GEN);
    ok(&args);
    assert_eq!(read(dir.join("checkpoints/init.pvqw")), read(dir.join("checkpoints/final.pvqw")));
}

#[test]
fn pretrained_abmil_feeds_survival_finetuning() {
    let dir = scratch("downstream");
    let tok = s(tokenizer());
    let pre = dir.join("pre");
    let mut args = vec!["pretrain", "--run-dir", s(&pre), "--tokenizer", tok, "--regions", "4", "--epochs", "1"];
    args.extend(["--objective", "abmil", "--features", "adapter", "--abmil-hidden", "16", "--abmil-attn", "8"]);
    args.extend_from_slice(GEN);
    ok(&args);
    assert!(pre.join("checkpoints/epoch-000.pvqw").is_file());

    let ft = dir.join("ft");
    let weights = pre.join("checkpoints/final.pvqw");
    let mut args = vec!["finetune", "--run-dir", s(&ft), "--tokenizer", tok, "--task", "surv", "--bags", "15"];
    args.extend(["--epochs", "1", "--init", "pretrained", "--pretrained", s(&weights)]);
    args.extend_from_slice(GEN);
    let out = ok(&args);
    assert!(String::from_utf8_lossy(&out.stdout).contains("c-index"));

    let metrics = String::from_utf8(read(ft.join("metrics.csv"))).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "fold,cindex");
    assert_eq!(rows.len(), 1 + 5 + 2, "{metrics}");
    for row in &rows[1..] {
        let v: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v) || row.starts_with("std"), "{row}");
    }

    // an abmil checkpoint cannot initialize a transformer head
    let bad = vqtok(&["finetune", "--run-dir", s(&dir.join("bad")), "--tokenizer", tok, "--head", "roformer", "--init", "pretrained", "--pretrained", s(&weights)], &[]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn report_accounts_default_geometry() {
    let dir = scratch("report");
    let out = ok(&["report", "--run-dir", s(&dir)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("dim ratio       64.00"));
    let metrics = String::from_utf8(read(dir.join("metrics.csv"))).unwrap();
    let last = metrics.lines().last().unwrap();
    assert!(last.starts_with("\"1,2,4,7,14\",266,802816,532,"), "{last}");
    assert!(dir.join("plots/index_bytes.svg").is_file());
}

#[test]
fn exit_codes_and_seed_override() {
    let dir = scratch("errors");
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "seed = 5\nnot_a_key = 1\n").unwrap();
    let out = vqtok(&["report", "--run-dir", s(&dir), "--config", s(&cfg)], &[]);
    assert_eq!(out.status.code(), Some(2), "unknown config key");
    assert_eq!(vqtok(&["report", "--run-dir", s(&dir), "--dim", "x"], &[]).status.code(), Some(2));

    let garbage = dir.join("garbage.pvqi");
    std::fs::write(&garbage, b"not an index stream").unwrap();
    let out = vqtok(&["decompress", "--run-dir", s(&dir), "--tokenizer", s(tokenizer()), "--input", s(&garbage)], &[]);
    assert_eq!(out.status.code(), Some(3), "corrupt input");
    let out = vqtok(&["compress", "--run-dir", s(&dir), "--tokenizer", s(&garbage)], &[]);
    assert_eq!(out.status.code(), Some(3), "corrupt tokenizer");

    std::fs::write(&cfg, "seed = 5\n").unwrap();
    let resolved = |envs: &[(&str, &str)], extra: &[&str]| {
        let run = dir.join("seeded");
        let mut args = vec!["report", "--run-dir", s(&run), "--config", s(&cfg)];
        args.extend(extra);
        let out = vqtok(&args, envs);
        assert!(out.status.success());
        String::from_utf8(read(run.join("config.resolved"))).unwrap()
    };
    assert!(resolved(&[], &[]).contains("\nseed = 5\n"));
    assert!(resolved(&[("PVQ_SEED", "7")], &[]).contains("\nseed = 7\n"));
    assert!(resolved(&[("PVQ_SEED", "7")], &["--seed", "9"]).contains("\nseed = 9\n"));
}
