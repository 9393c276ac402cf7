use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mose::data::read_msr;

const TOY: &str = r#"{
  "model": {"in_channels": 4, "embed_dim": 16, "groups": 1, "blocks_per_group": 2,
            "attention": {"heads": 4, "window_size": 8, "cpb_hidden": 16},
            "moe": {"experts": 4, "active": 2, "expert_hidden": 16, "smart_merger": true},
            "scale": 2},
  "train": {"batch_size": 2, "checkpoint_every": 2, "adam": {"lr": 0.001}}
}"#;

const TINY: &str = r#"{
  "model": {"in_channels": 2, "embed_dim": 8, "groups": 1, "blocks_per_group": 1,
            "attention": {"heads": 2, "window_size": 4, "cpb_hidden": 4},
            "moe": {"experts": 2, "active": 1, "expert_hidden": 4, "smart_merger": true},
            "scale": 2}
}"#;

fn mose(args: &[&str], paths: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mose"));
    cmd.env_remove("MOSE_THREADS").args(args).args(paths);
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("toy.json"), TOY).unwrap();
        let f = Fixture { dir };
        let out = mose(
            &["synth", "--n", "3", "--hw", "32", "--scale", "2", "--bands", "4", "--seed", "5", "--out"],
            &[&f.path("data")],
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--seed", "4"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--config"]);
        let cfg = self.path("toy.json");
        let data = self.path("data");
        let dest = self.path(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mose"));
        cmd.env_remove("MOSE_THREADS")
            .args(&args)
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&dest);
        cmd.output().unwrap()
    }
}

#[test]
fn synth_writes_matching_pairs() {
    let f = Fixture::new();
    let lr = read_msr(&f.path("data/lr/00000.msr")).unwrap();
    let hr = read_msr(&f.path("data/hr/00000.msr")).unwrap();
    assert_eq!((lr.bands, lr.height, lr.width), (4, 16, 16));
    assert_eq!((hr.bands, hr.height, hr.width), (4, 32, 32));
    assert_eq!(fs::read_dir(f.path("data/lr")).unwrap().count(), 3);
}

#[test]
fn train_eval_sr_and_resume() {
    let f = Fixture::new();
    let full = f.train("full", &["--steps", "4"]);
    assert_eq!(code(&full), 0, "{}", String::from_utf8_lossy(&full.stderr));
    for name in ["step_00000002.ckpt", "step_00000004.ckpt", "final.ckpt", "train_log.csv"] {
        assert!(f.path("full").join(name).exists(), "{name}");
    }
    let log = fs::read_to_string(f.path("full/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("step,"));

    let first = f.train("split", &["--steps", "2"]);
    assert_eq!(code(&first), 0);
    let ckpt = f.path("split/final.ckpt");
    let resumed = f.train("split", &["--steps", "2", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&resumed), 0, "{}", String::from_utf8_lossy(&resumed.stderr));
    assert_eq!(
        fs::read(f.path("full/final.ckpt")).unwrap(),
        fs::read(f.path("split/final.ckpt")).unwrap()
    );
    assert_eq!(log, fs::read_to_string(f.path("split/train_log.csv")).unwrap());

    let eval = mose(
        &["eval", "--ckpt"],
        &[&f.path("full/final.ckpt")],
    );
    assert_eq!(code(&eval), 1, "missing --data is a usage error");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mose"));
    let out = cmd
        .env_remove("MOSE_THREADS")
        .arg("eval")
        .arg("--ckpt")
        .arg(f.path("full/final.ckpt"))
        .arg("--data")
        .arg(f.path("data"))
        .arg("--report")
        .arg(f.path("report.csv"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut report = csv::Reader::from_path(f.path("report.csv")).unwrap();
    let headers: Vec<String> = report.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(
        headers,
        ["image_id", "psnr_db", "ssim", "ncc", "bicubic_psnr_db", "bicubic_ssim", "bicubic_ncc"]
    );
    let rows: Vec<csv::StringRecord> = report.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[3][0], "mean");

    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mose"));
    let out = cmd
        .env_remove("MOSE_THREADS")
        .args(["sr", "--png-bits", "16", "--ckpt"])
        .arg(f.path("full/final.ckpt"))
        .arg("--in")
        .arg(f.path("data/lr/00001.msr"))
        .arg("--out")
        .arg(f.path("sr.msr"))
        .arg("--png")
        .arg(f.path("sr.png"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sr = read_msr(&f.path("sr.msr")).unwrap();
    let lr = read_msr(&f.path("data/lr/00001.msr")).unwrap();
    assert_eq!((sr.bands, sr.height, sr.width), (4, 32, 32));
    assert_eq!(sr.band_stats, lr.band_stats);
    assert!(fs::metadata(f.path("sr.png")).unwrap().len() > 0);
}

#[test]
fn missing_checkpoint_is_a_data_error_and_writes_nothing() {
    let f = Fixture::new();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mose"));
    let out = cmd
        .env_remove("MOSE_THREADS")
        .arg("sr")
        .arg("--ckpt")
        .arg(f.path("absent.ckpt"))
        .arg("--in")
        .arg(f.path("data/lr/00000.msr"))
        .arg("--out")
        .arg(f.path("out.msr"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(!f.path("out.msr").exists());
}

#[test]
fn scale_one_corpus_is_a_usage_error() {
    let f = Fixture::new();
    let flat = f.path("flat");
    fs::create_dir_all(flat.join("lr")).unwrap();
    fs::create_dir_all(flat.join("hr")).unwrap();
    let hr = f.path("data/hr/00000.msr");
    fs::copy(&hr, flat.join("lr/a.msr")).unwrap();
    fs::copy(&hr, flat.join("hr/a.msr")).unwrap();
    let out = f.train("x", &["--steps", "1"]);
    assert_eq!(code(&out), 0);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mose"));
    let out = cmd
        .env_remove("MOSE_THREADS")
        .arg("eval")
        .arg("--ckpt")
        .arg(f.path("x/final.ckpt"))
        .arg("--data")
        .arg(&flat)
        .arg("--report")
        .arg(f.path("r.csv"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!f.path("r.csv").exists());
}

#[test]
fn config_typos_and_bad_thread_counts_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"embed_dimm": 16}}"#).unwrap();
    assert_eq!(code(&mose(&["audit", "--config"], &[&cfg])), 1);
    assert_eq!(code(&mose(&["audit", "--threads", "0"], &[])), 1);
    let bin = env!("CARGO_BIN_EXE_mose");
    let env_bad = Command::new(bin).env("MOSE_THREADS", "many").arg("audit").output().unwrap();
    assert_eq!(code(&env_bad), 1);
    let env_ok = Command::new(bin).env("MOSE_THREADS", "1").arg("audit").output().unwrap();
    assert_eq!(code(&env_ok), 0);
    assert_eq!(code(&mose(&["frobnicate"], &[])), 1);
    assert_eq!(code(&mose(&["--help"], &[])), 0);
}

#[test]
fn gradcheck_passes_and_flags_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let ok = mose(&["gradcheck", "--config"], &[&cfg]);
    let text = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(code(&ok), 0, "{text}");
    assert!(text.lines().last().unwrap().starts_with("PASS"));
    let bad = mose(&["gradcheck", "--corrupt", "--config"], &[&cfg]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stdout).lines().last().unwrap().starts_with("FAIL"));
}
