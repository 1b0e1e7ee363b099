use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use msstyle::checkpoint::load_checkpoint;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_msstyle"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn msstyle")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CONFIG: &str = r#"{
  "version": 1,
  "corpus": {"n_utterances": 70, "seed": 11},
  "train": {"stage1_steps": 3, "stage2_steps": 2, "batch_size": 2, "log_every": 1},
  "eval": {"min_test_groups": 2, "distractors": 2}
}"#;

struct Fixture {
    dir: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

/// A small corpus plus two-stage Proposed checkpoints trained for a few steps.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = scratch("fixture");
        let config = dir.join("run.json");
        fs::write(&config, TINY_CONFIG).unwrap();
        let data = dir.join("data");
        let c = config.to_str().unwrap();
        let out = run(&["gen-data", "--config", c, "--out", data.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let ck = dir.join("ck");
        let out = run(&[
            "train",
            "--config",
            c,
            "--data",
            data.to_str().unwrap(),
            "--out",
            ck.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Fixture { dir, config, data }
    })
}

fn first_record(data: &Path) -> (String, String) {
    let manifest = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let id = line["id"].as_str().unwrap().to_owned();
    let text: Vec<String> = line["text"].as_array().unwrap().iter().map(|v| v.to_string()).collect();
    (id, text.join(" "))
}

#[test]
fn gen_data_writes_manifest_and_is_reproducible() {
    let dir = scratch("gen");
    let (a, b) = (dir.join("a"), dir.join("b"));
    for d in [&a, &b] {
        let out = run(&["gen-data", "--out", d.to_str().unwrap(), "--utterances", "700", "--seed", "7"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let ma = fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma.iter().filter(|&&c| c == b'\n').count(), 700);
    assert_eq!(ma, fs::read(b.join("manifest.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("templates.f32")).unwrap(), fs::read(b.join("templates.f32")).unwrap());
}

#[test]
fn gen_data_rejects_tiny_corpus() {
    let dir = scratch("tiny");
    let out = run(&["gen-data", "--out", dir.join("d").to_str().unwrap(), "--utterances", "10"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("minimum of 70"), "{}", stderr(&out));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&run(&["train", "--bogus"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
}

#[test]
fn malformed_config_is_rejected() {
    let dir = scratch("badcfg");
    let cfg = dir.join("bad.json");
    fs::write(&cfg, r#"{"version": 1, "trian": {}}"#).unwrap();
    let out = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.join("d").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("trian"), "{}", stderr(&out));
}

#[test]
fn train_both_emits_two_tagged_checkpoints() {
    let f = fixture();
    let s1 = load_checkpoint(&f.dir.join("ck/proposed.stage1.ckpt")).unwrap();
    let s2 = load_checkpoint(&f.dir.join("ck/proposed.stage2.ckpt")).unwrap();
    assert_eq!((s1.model.stage, s2.model.stage), (1, 2));
    let cfg = s2.run_config.expect("config echoed into checkpoint");
    assert_eq!(cfg["train"]["stage1_steps"], 3);
    let log = fs::read_to_string(f.dir.join("ck/proposed.train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn training_is_deterministic() {
    let f = fixture();
    let dir = scratch("retrain");
    let out = run(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["proposed.stage1.ckpt", "proposed.stage2.ckpt"] {
        let a = fs::read(f.dir.join("ck").join(name)).unwrap();
        let b = fs::read(dir.join(name)).unwrap();
        assert!(a == b, "{name} differs between identical runs");
    }
}

#[test]
fn stage_constraints_are_enforced() {
    let f = fixture();
    let dir = scratch("stages");
    let common = |variant: &str, stage: &str| {
        run(&[
            "train",
            "--config",
            f.config.to_str().unwrap(),
            "--data",
            f.data.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--variant",
            variant,
            "--stage",
            stage,
        ])
    };
    let out = common("base-l", "2");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("variant has no global head"), "{}", stderr(&out));
    let out = common("proposed", "2");
    assert_eq!(code(&out), 4, "stage 2 without --resume: {}", stderr(&out));
}

#[test]
fn transfer_writes_exports_matching_the_alignment() {
    let f = fixture();
    let (id, text) = first_record(&f.data);
    let dir = scratch("transfer");
    let prefix = dir.join("out");
    let ck = f.dir.join("ck/proposed.stage2.ckpt");
    let out = run(&[
        "transfer",
        "--ckpt",
        ck.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--text",
        &text,
        "--local-ref",
        &id,
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let csv = fs::read_to_string(dir.join("out.refattn.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t_p,t_l,weight"));
    let cells: Vec<(usize, usize)> = lines
        .map(|l| {
            let mut it = l.split(',');
            (it.next().unwrap().parse().unwrap(), it.next().unwrap().parse().unwrap())
        })
        .collect();
    let rows = cells.iter().map(|c| c.0).max().unwrap() + 1;
    let cols = cells.iter().map(|c| c.1).max().unwrap() + 1;
    assert_eq!(cells.len(), rows * cols);
    assert_eq!(rows, text.split_whitespace().count());

    let pgm = fs::read(dir.join("out.refattn.pgm")).unwrap();
    let header = format!("P5\n{cols} {rows}\n255\n");
    assert!(pgm.starts_with(header.as_bytes()));
    assert_eq!(pgm.len(), header.len() + rows * cols);
    assert!(dir.join("out.decattn.csv").exists());
    assert!(dir.join("out.f32").exists());

    // an explicit global reference equal to the local one changes nothing
    let prefix2 = dir.join("same");
    let out = run(&[
        "transfer",
        "--ckpt",
        ck.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--text",
        &text,
        "--local-ref",
        &id,
        "--global-ref",
        &id,
        "--out",
        prefix2.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(dir.join("out.f32")).unwrap(), fs::read(dir.join("same.f32")).unwrap());
}

#[test]
fn transfer_rejects_content_mismatch() {
    let f = fixture();
    let (id, text) = first_record(&f.data);
    let other = if text.starts_with("1 ") { "2 3 4" } else { "1 2 3" };
    let dir = scratch("mismatch");
    let out = run(&[
        "transfer",
        "--ckpt",
        f.dir.join("ck/proposed.stage2.ckpt").to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--text",
        other,
        "--local-ref",
        &id,
        "--out",
        dir.join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn stage_one_checkpoint_cannot_transfer() {
    let f = fixture();
    let (id, text) = first_record(&f.data);
    let dir = scratch("provenance");
    let out = run(&[
        "transfer",
        "--ckpt",
        f.dir.join("ck/proposed.stage1.ckpt").to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--text",
        &text,
        "--local-ref",
        &id,
        "--out",
        dir.join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_is_an_io_error_naming_the_path() {
    let f = fixture();
    let dir = scratch("missing");
    let out = run(&[
        "eval",
        "--ckpt",
        "/nonexistent/model.ckpt",
        "--data",
        f.data.to_str().unwrap(),
        "--report",
        dir.join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("/nonexistent/model.ckpt"), "{}", stderr(&out));
}

#[test]
fn corrupted_checkpoint_names_the_tensor() {
    let f = fixture();
    let dir = scratch("corrupt");
    let mut bytes = fs::read(f.dir.join("ck/proposed.stage2.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0x01;
    let bad = dir.join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let (id, text) = first_record(&f.data);
    let out = run(&[
        "transfer",
        "--ckpt",
        bad.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--text",
        &text,
        "--local-ref",
        &id,
        "--out",
        dir.join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("checksum mismatch in tensor"), "{}", stderr(&out));
}

#[test]
fn eval_report_has_table_rows_and_is_reproducible() {
    let f = fixture();
    let dir = scratch("eval");
    let ck = f.dir.join("ck/proposed.stage2.ckpt");
    let mut reports = Vec::new();
    for name in ["a.json", "b.json"] {
        let path = dir.join(name);
        let out = run(&[
            "eval",
            "--ckpt",
            ck.to_str().unwrap(),
            "--data",
            f.data.to_str().unwrap(),
            "--report",
            path.to_str().unwrap(),
            "--config",
            f.config.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        reports.push(fs::read(&path).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let v: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    let variant = &v["variants"][0];
    assert_eq!(variant["per_emotion"].as_array().unwrap().len(), 7);
    assert_eq!(variant["overall"]["label"], "Overall");
    assert!(v["tool_version"].is_string());
    assert_eq!(v["run_config"]["eval"]["distractors"], 2);
}

#[test]
fn grad_check_passes_and_names_a_corrupted_primitive() {
    let out = run(&["grad-check", "--seeds", "1", "--case", "linear"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(&["grad-check", "--seeds", "1", "--case", "linear", "--corrupt", "matmul"]);
    assert_eq!(code(&out), 5);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL") && stdout.contains("lin."), "{stdout}");
}
