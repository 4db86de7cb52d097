use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn idm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn idm")
}

fn ok(args: &[&str]) -> Output {
    let out = idm(args);
    assert!(
        out.status.success(),
        "idm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const TINY: &str = r#"{
  "model": {"base_channels": 4, "channel_multipliers": [1, 2], "num_res_blocks_per_scale": 1,
            "attention_scales": [2], "gamma_embed_dim": 8, "norm_groups": 2},
  "train": {"batch_size": 4, "total_steps": 4, "learning_rate": 0.001, "checkpoint_every": 2, "seed": 3},
  "infer": {"K": 3}
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(count: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&[
            "gen-toy",
            "--out",
            s(&root.join("toy")),
            "--count",
            &count.to_string(),
            "--size",
            "16",
            "--seed",
            "5",
        ]);
        std::fs::write(root.join("tiny.json"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn assert_recorded(dir: &Path) {
    let cfg = json(&dir.join("config.json"));
    assert!(cfg.get("train").is_some() && cfg.get("seed").is_some());
    let run = json(&dir.join("run.json"));
    assert_eq!(run["tool_version"], env!("CARGO_PKG_VERSION"));
    assert!(run["seed"].is_u64());
    assert!(run["inputs"].is_object());
}

fn manifest_sums(path: &Path) -> Vec<String> {
    json(path)["images"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["sha256"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn gen_toy_writes_corpus_and_is_deterministic() {
    let f = Fixture::new(12);
    let m = json(&f.p("toy/manifest.json"));
    assert_eq!(m["round"], 0);
    let images = m["images"].as_array().unwrap();
    assert_eq!(images.len(), 12);
    assert!(images.iter().all(|r| r["source"] == "original" && r["parent_id"].is_null()));
    assert_eq!(std::fs::read_dir(f.p("toy/images")).unwrap().count(), 12);
    assert_recorded(&f.p("toy"));
    ok(&["gen-toy", "--out", s(&f.p("toy2")), "--count", "12", "--size", "16", "--seed", "5"]);
    assert_eq!(manifest_sums(&f.p("toy/manifest.json")), manifest_sums(&f.p("toy2/manifest.json")));
}

#[test]
fn argument_errors_exit_two_and_runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(idm(&["gen-toy", "--out", s(&out), "--size", "8"]).status.code(), Some(2));
    assert_eq!(idm(&["restore", "--ckpt", "blur:-1", "--input", "a.png", "--out", "o"]).status.code(), Some(2));
    assert_eq!(idm(&["train", "--data", "m.json", "--out", "o", "--round", "1"]).status.code(), Some(2));
    assert_eq!(idm(&["frobnicate"]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(
        idm(&["degrade", "--data", s(&missing), "--out", s(&out)]).status.code(),
        Some(1)
    );
    std::fs::write(dir.path().join("bad.json"), r#"{"nonsense": true}"#).unwrap();
    let r = idm(&["gen-toy", "--out", s(&out), "--count", "2"]);
    assert!(r.status.success());
    let r = idm(&[
        "degrade",
        "--config",
        s(&dir.path().join("bad.json")),
        "--data",
        s(&out.join("manifest.json")),
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("nonsense"));
}

#[test]
fn degrade_replay_is_bit_exact() {
    let f = Fixture::new(6);
    ok(&["degrade", "--data", s(&f.p("toy/manifest.json")), "--out", s(&f.p("deg")), "--seed", "9"]);
    assert_recorded(&f.p("deg"));
    ok(&["degrade", "--replay", s(&f.p("deg/sidecar.json")), "--out", s(&f.p("replay"))]);
    let sc = json(&f.p("deg/sidecar.json"));
    let records = sc["records"].as_array().unwrap();
    assert_eq!(records.len(), 6);
    for r in records {
        let out = r["output"].as_str().unwrap();
        assert_eq!(
            std::fs::read(f.p("deg").join(out)).unwrap(),
            std::fs::read(f.p("replay").join(out)).unwrap()
        );
        for key in ["sigma", "r", "delta", "q"] {
            assert!(r["params"].get(key).is_some());
        }
    }
}

#[test]
fn eval_with_oracle_reports_the_cap() {
    let f = Fixture::new(4);
    ok(&["degrade", "--data", s(&f.p("toy/manifest.json")), "--out", s(&f.p("deg"))]);
    ok(&["eval", "--ckpt", "oracle", "--pairs", s(&f.p("deg/sidecar.json")), "--out", s(&f.p("ev"))]);
    let mut r = csv::Reader::from_path(f.p("ev/metrics.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "psnr_db").unwrap();
    let mut n = 0;
    for row in r.records() {
        assert_eq!(row.unwrap()[col].parse::<f64>().unwrap(), 99.0);
        n += 1;
    }
    assert_eq!(n, 4);
    assert_eq!(json(&f.p("ev/metrics.json"))["aggregates"]["psnr_db"]["mean"], 99.0);
    assert_recorded(&f.p("ev"));
}

#[test]
fn authtest_emits_statistics_and_pass_flag() {
    let f = Fixture::new(4);
    ok(&["authtest", "--ckpt", "identity", "--data", s(&f.p("toy/manifest.json")), "--out", s(&f.p("a"))]);
    let rep = json(&f.p("a/authenticity.json"));
    assert_eq!(rep["clean_fidelity_db"], 99.0);
    assert_eq!(rep["idempotence_db"], 99.0);
    assert_eq!(rep["restore_gain_db"], 0.0);
    assert_eq!(rep["pass"], false);
    assert!(f.p("a/grid.png").exists());
    ok(&["authtest", "--ckpt", "blur:2", "--data", s(&f.p("toy/manifest.json")), "--out", s(&f.p("b"))]);
    let rep = json(&f.p("b/authenticity.json"));
    assert_eq!(rep["pass"], false);
    assert!(rep["clean_fidelity_db"].as_f64().unwrap() < 30.0);
    assert_recorded(&f.p("b"));
}

#[test]
fn default_training_config_is_visible_in_the_snapshot() {
    let f = Fixture::new(2);
    std::fs::write(f.p("zero.json"), r#"{"train": {"total_steps": 0}}"#).unwrap();
    ok(&["train", "--config", s(&f.p("zero.json")), "--data", s(&f.p("toy/manifest.json")), "--out", s(&f.p("t"))]);
    let cfg = json(&f.p("t/config.json"));
    assert_eq!(cfg["train"]["batch_size"], 32);
    assert_eq!(cfg["train"]["learning_rate"], 1e-4);
    assert_eq!(cfg["loss"]["target"], "x0");
    assert_eq!(cfg["loss"]["p_norm"], 1);
    assert_eq!(cfg["infer"]["K"], 10);
    assert!(f.p("t/final.idmc").exists());
}

fn trace_losses(path: &Path) -> Vec<(u64, f64)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|row| {
            let row = row.unwrap();
            (row[0].parse().unwrap(), row[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn training_resumes_from_the_last_checkpoint_exactly() {
    let f = Fixture::new(8);
    let data = f.p("toy/manifest.json");
    ok(&["train", "--config", s(&f.p("tiny.json")), "--data", s(&data), "--out", s(&f.p("full"))]);
    assert_recorded(&f.p("full"));
    let full = trace_losses(&f.p("full/trace.csv"));
    assert_eq!(full.len(), 4);

    let short = TINY.replace("\"total_steps\": 4", "\"total_steps\": 2");
    std::fs::write(f.p("short.json"), short).unwrap();
    ok(&["train", "--config", s(&f.p("short.json")), "--data", s(&data), "--out", s(&f.p("split"))]);
    ok(&["train", "--config", s(&f.p("tiny.json")), "--data", s(&data), "--out", s(&f.p("split"))]);
    assert_eq!(trace_losses(&f.p("split/trace.csv")), full);
    assert_eq!(
        std::fs::read(f.p("split/final.idmc")).unwrap(),
        std::fs::read(f.p("full/final.idmc")).unwrap()
    );
}

#[test]
fn second_round_warm_starts_from_enhanced_corpus() {
    let f = Fixture::new(6);
    let data = f.p("toy/manifest.json");
    ok(&["train", "--config", s(&f.p("tiny.json")), "--data", s(&data), "--out", s(&f.p("r0"))]);
    ok(&[
        "enhance",
        "--config",
        s(&f.p("tiny.json")),
        "--ckpt",
        s(&f.p("r0/final.idmc")),
        "--data",
        s(&data),
        "--out",
        s(&f.p("enh")),
        "--steps",
        "3",
    ]);
    assert_recorded(&f.p("enh"));
    let m = json(&f.p("enh/manifest.json"));
    assert_eq!(m["round"], 1);
    let images = m["images"].as_array().unwrap();
    assert_eq!(images.len(), 6);
    assert!(images.iter().all(|r| r["source"] == "enhanced" && r["parent_id"].is_string()));
    let before = manifest_sums(&data);
    ok(&[
        "train",
        "--config",
        s(&f.p("tiny.json")),
        "--data",
        s(&f.p("enh/manifest.json")),
        "--init",
        s(&f.p("r0/final.idmc")),
        "--round",
        "1",
        "--original",
        s(&data),
        "--out",
        s(&f.p("r1")),
    ]);
    assert_eq!(manifest_sums(&data), before);
    let ck = idm_core::denoiser::read_checkpoint(f.p("r1/final.idmc")).unwrap();
    assert_eq!(ck.training_round, 1);
    assert_eq!(ck.step_count, 4);
    // round mismatch is a runtime error
    let r = idm(&[
        "train",
        "--config",
        s(&f.p("tiny.json")),
        "--data",
        s(&data),
        "--init",
        s(&f.p("r0/final.idmc")),
        "--round",
        "1",
        "--original",
        s(&data),
        "--out",
        s(&f.p("bad")),
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn restore_with_identity_returns_the_input() {
    let f = Fixture::new(2);
    let src = f.p("toy/images/face_00001.png");
    ok(&["restore", "--ckpt", "identity", "--input", s(&src), "--out", s(&f.p("r"))]);
    assert_eq!(
        idm_core::imaging::load_png(f.p("r/face_00001.png")).unwrap(),
        idm_core::imaging::load_png(&src).unwrap()
    );
    assert_recorded(&f.p("r"));
    ok(&["restore", "--ckpt", "identity", "--input", s(&f.p("toy/manifest.json")), "--out", s(&f.p("all"))]);
    assert!(f.p("all/face_00000.png").exists() && f.p("all/face_00001.png").exists());
    assert_eq!(json(&f.p("all/config.json"))["infer"]["K"], 10);
    let r = idm(&["restore", "--ckpt", "oracle", "--input", s(&src), "--out", s(&f.p("o"))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn restore_with_checkpoint_is_deterministic() {
    let f = Fixture::new(4);
    let data = f.p("toy/manifest.json");
    ok(&["train", "--config", s(&f.p("tiny.json")), "--data", s(&data), "--out", s(&f.p("t"))]);
    let ck = f.p("t/final.idmc");
    for out in ["a", "b"] {
        ok(&["--workers", "2", "restore", "--ckpt", s(&ck), "--input", s(&data), "--out", s(&f.p(out)), "--steps", "3"]);
    }
    for i in 0..4 {
        let name = format!("face_{i:05}.png");
        assert_eq!(std::fs::read(f.p("a").join(&name)).unwrap(), std::fs::read(f.p("b").join(&name)).unwrap());
    }
}
