//! End-to-end tests that drive the compiled `nsad` binary.

use std::fs;
use std::io::{Read as _, Write as _};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SPEC: &str = r#"
n_samples = 300
prior_ad = 0.45
label_noise = 0.05
rule_strength = 1.5

[imaging]
dim = 4
separation = 1.6
strength = 1.0

[features.age]
kind = "numeric"
cn = { mean = 71.0, sd = 6.0 }
ad = { mean = 76.5, sd = 6.5 }
round = true
clamp = [55.0, 95.0]
missing_rate = 0.03

[features.mmse_score]
kind = "numeric"
cn = { mean = 28.0, sd = 1.5 }
ad = { mean = 23.5, sd = 3.0 }
round = true
clamp = [10.0, 30.0]
missing_rate = 0.05
"#;

const RULES: &str = r#"
rule age_risk {
  describe "Older age raises disease risk smoothly past the threshold."
  when present(age)
  effect sigmoid(age; a, t, tau)
  params {
    a = 0.9 in [0, 3]
    t = 72 frozen
    tau = 4 in [0.5, 10]
  }
}

rule cognitive_screen {
  describe "Low screening score is strong evidence for impairment."
  when present(mmse_score)
  effect sigmoid(mmse_score; a, t, tau)
  params {
    a = -1.5 in [-5, 0]
    t = 26.5 frozen
    tau = 1.2 in [0.5, 5]
  }
}
"#;

const FAST_TRAIN: &str = "epochs = 2\nbatch_size = 8\nlr_stage1 = 0.001\nlr_stage2 = 0.0005\n";

fn nsad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsad"))
        .args(args)
        .env_remove("NSAD_LLM_ENDPOINT")
        .env_remove("NSAD_LLM_KEY")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

/// Simulates the shared test cohort into `dir/sim` and returns its paths.
fn simulate_into(dir: &Path, seed: &str) -> (PathBuf, PathBuf, PathBuf) {
    let spec = write(dir, "spec.toml", SPEC);
    let rules = write(dir, "rules.nsr", RULES);
    let sim = dir.join("sim");
    let out = nsad(&[
        "simulate",
        "--spec",
        &p(&spec),
        "--rules",
        &p(&rules),
        "--seed",
        seed,
        "--out",
        &p(&sim),
    ]);
    assert_eq!(code(&out), 0, "simulate failed: {}", stderr(&out));
    (sim.join("records.csv"), sim.join("schema.txt"), rules)
}

#[test]
fn check_rules_accepts_a_valid_ruleset() {
    let dir = TempDir::new().unwrap();
    let (_, schema, rules) = simulate_into(dir.path(), "0");
    let out = nsad(&["check-rules", "--rules", &p(&rules), "--schema", &p(&schema)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("ok: 2 rules"), "{text}");
    assert!(text.contains("age_risk"), "{text}");
}

#[test]
fn check_rules_names_unknown_features() {
    let dir = TempDir::new().unwrap();
    let (_, schema, _) = simulate_into(dir.path(), "0");
    let bad = write(
        dir.path(),
        "bad.nsr",
        "rule r { when bogus_feature > 1 effect const(c) params { c = 1 } }\n",
    );
    let out = nsad(&["check-rules", "--rules", &p(&bad), "--schema", &p(&schema)]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("bogus_feature"), "{err}");
    assert!(err.contains('1'), "expected a line number in: {err}");
}

#[test]
fn check_rules_unreadable_path_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let (_, schema, _) = simulate_into(dir.path(), "0");
    let out = nsad(&["check-rules", "--rules", "/nonexistent/x.nsr", "--schema", &p(&schema)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn simulate_is_reproducible_and_seed_sensitive() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "spec.toml", SPEC);
    let rules = write(dir.path(), "rules.nsr", RULES);
    let run = |seed: &str, sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = nsad(&[
            "simulate",
            "--spec",
            &p(&spec),
            "--rules",
            &p(&rules),
            "--seed",
            seed,
            "--out",
            &p(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out_dir
    };
    let a = run("5", "a");
    let b = run("5", "b");
    let c = run("6", "c");
    for name in ["records.csv", "schema.txt", "manifest.json"] {
        assert!(a.join(name).exists(), "{name} missing");
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical invocations"
        );
    }
    assert_ne!(
        fs::read(a.join("records.csv")).unwrap(),
        fs::read(c.join("records.csv")).unwrap(),
        "different seeds produced identical cohorts"
    );
}

#[test]
fn simulate_rejects_an_empty_spec() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "empty.toml", "");
    let out = nsad(&["simulate", "--spec", &p(&spec), "--out", &p(&dir.path().join("x"))]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn config_file_supplies_values_but_flags_win() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "spec.toml", SPEC);
    let rules = write(dir.path(), "rules.nsr", RULES);
    let cfg = write(
        dir.path(),
        "run.cfg",
        &format!(
            "# shared settings\nspec = {}\nrules = {}\nseed = 3\n",
            p(&spec),
            p(&rules)
        ),
    );

    let from_cfg = dir.path().join("from_cfg");
    let out = nsad(&["simulate", "--config", &p(&cfg), "--out", &p(&from_cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(from_cfg.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);

    let overridden = dir.path().join("overridden");
    let out = nsad(&["simulate", "--config", &p(&cfg), "--seed", "5", "--out", &p(&overridden)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(overridden.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn config_unknown_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "sneed = 3\n");
    let out = nsad(&["simulate", "--config", &p(&cfg), "--out", &p(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("sneed"), "{}", stderr(&out));
}

#[test]
fn two_stage_pipeline_end_to_end() {
    let dir = TempDir::new().unwrap();
    let (records, schema, rules) = simulate_into(dir.path(), "1");
    let cfg = write(dir.path(), "train.cfg", FAST_TRAIN);
    let run_dir = dir.path().join("run");

    // Stage 1, twice: the checkpoint must be byte-stable across invocations.
    let pretrain = |sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = nsad(&[
            "pretrain",
            "--records",
            &p(&records),
            "--schema",
            &p(&schema),
            "--config",
            &p(&cfg),
            "--seed",
            "1",
            "--out",
            &p(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "pretrain failed: {}", stderr(&out));
        out_dir.join("stage1.ckpt")
    };
    let ck1 = pretrain("run");
    let ck1_again = pretrain("run_again");
    let ck1_bytes = fs::read(&ck1).unwrap();
    assert_eq!(ck1_bytes, fs::read(&ck1_again).unwrap(), "stage-1 checkpoint not deterministic");
    assert!(ck1_bytes.starts_with(b"nsad-checkpoint v1\n"));

    // Stage 2 on top of stage 1.
    let out = nsad(&[
        "train",
        "--records",
        &p(&records),
        "--schema",
        &p(&schema),
        "--rules",
        &p(&rules),
        "--checkpoint",
        &p(&ck1),
        "--config",
        &p(&cfg),
        "--seed",
        "1",
        "--out",
        &p(&run_dir),
    ]);
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    let ck2 = run_dir.join("stage2.ckpt");
    let ck2_text = fs::read_to_string(&ck2).unwrap();
    assert!(ck2_text.contains("stage 2"));
    assert!(ck2_text.contains("param age_risk.a "));
    assert!(ck2_text.contains("param w "));

    // Feeding the stage-2 checkpoint back into `train` is a stage mismatch.
    let out = nsad(&[
        "train",
        "--records",
        &p(&records),
        "--schema",
        &p(&schema),
        "--rules",
        &p(&rules),
        "--checkpoint",
        &p(&ck2),
        "--config",
        &p(&cfg),
        "--out",
        &p(&dir.path().join("run2")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("stage"), "{}", stderr(&out));

    // Score both checkpoints side by side.
    let eval_dir = dir.path().join("eval");
    let out = nsad(&[
        "eval",
        "--records",
        &p(&records),
        "--schema",
        &p(&schema),
        "--rules",
        &p(&rules),
        "--checkpoint",
        &p(&ck2),
        "--base-checkpoint",
        &p(&ck1),
        "--out",
        &p(&eval_dir),
    ]);
    assert_eq!(code(&out), 0, "eval failed: {}", stderr(&out));
    assert!(stdout(&out).contains("accuracy"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["ours"]["accuracy"].is_f64());
    assert!(metrics["base"]["accuracy"].is_f64());

    // Per-patient report: known id succeeds and is byte-stable, unknown fails.
    let diagnose = |id: &str, sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = nsad(&[
            "diagnose",
            "--records",
            &p(&records),
            "--schema",
            &p(&schema),
            "--rules",
            &p(&rules),
            "--checkpoint",
            &p(&ck2),
            "--id",
            id,
            "--out",
            &p(&out_dir),
        ]);
        (out, out_dir)
    };
    let (out, rep_dir) = diagnose("s00000", "rep");
    assert_eq!(code(&out), 0, "diagnose failed: {}", stderr(&out));
    let json_path = rep_dir.join("report_s00000.json");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(report["patient_id"], "s00000");
    assert!(rep_dir.join("report_s00000.txt").exists());

    let (out, rep_dir2) = diagnose("s00000", "rep2");
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(&json_path).unwrap(),
        fs::read(rep_dir2.join("report_s00000.json")).unwrap(),
        "diagnose output not deterministic"
    );

    let (out, _) = diagnose("s99999", "rep3");
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("s99999"), "{}", stderr(&out));

    // --external-prose without an endpoint degrades to the template.
    let out_dir = dir.path().join("rep4");
    let out = nsad(&[
        "diagnose",
        "--records",
        &p(&records),
        "--schema",
        &p(&schema),
        "--rules",
        &p(&rules),
        "--checkpoint",
        &p(&ck2),
        "--id",
        "s00000",
        "--external-prose",
        "--out",
        &p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("NSAD_LLM_ENDPOINT"), "{}", stderr(&out));
    assert!(out_dir.join("report_s00000.txt").exists());
}

#[test]
fn eval_runs_a_seed_family_comparison() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "spec.toml", SPEC);
    let rules = write(dir.path(), "rules.nsr", RULES);
    let cfg = write(dir.path(), "train.cfg", "epochs = 1\nlr_stage1 = 0.001\n");
    let out_dir = dir.path().join("fam");
    let out = nsad(&[
        "eval",
        "--spec",
        &p(&spec),
        "--rules",
        &p(&rules),
        "--config",
        &p(&cfg),
        "--seed",
        "7",
        "--seeds",
        "2",
        "--out",
        &p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "eval failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("accuracy"), "{text}");
    assert!(text.contains("ours"), "{text}");

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seeds"], serde_json::json!([7, 8]));
    assert!(metrics["base"]["aggregate"]["accuracy"]["mean"].is_f64());
    assert!(metrics["ours"]["paired_vs_base"].is_array());
    assert!(out_dir.join("metrics.txt").exists());
}

#[test]
fn diagnose_fetches_external_prose_when_configured() {
    let dir = TempDir::new().unwrap();
    let (records, schema, rules) = simulate_into(dir.path(), "1");
    let cfg = write(dir.path(), "train.cfg", FAST_TRAIN);
    let run_dir = dir.path().join("run");
    let out = nsad(&[
        "pretrain",
        "--records",
        &p(&records),
        "--schema",
        &p(&schema),
        "--config",
        &p(&cfg),
        "--out",
        &p(&run_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = nsad(&[
        "train",
        "--records",
        &p(&records),
        "--schema",
        &p(&schema),
        "--rules",
        &p(&rules),
        "--checkpoint",
        &p(&run_dir.join("stage1.ckpt")),
        "--config",
        &p(&cfg),
        "--out",
        &p(&run_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}/prose", listener.local_addr().unwrap());
    let body = r#"{"text":"Service narrative for the report."}"#;
    let response = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\
         Connection: close\r\n\r\n{}",
        body.len(),
        body
    );
    let server = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut raw = Vec::new();
        let mut chunk = [0u8; 4096];
        let header_end = loop {
            let n = stream.read(&mut chunk).unwrap();
            assert!(n > 0);
            raw.extend_from_slice(&chunk[..n]);
            if let Some(i) = raw.windows(4).position(|w| w == b"\r\n\r\n") {
                break i + 4;
            }
        };
        let headers = String::from_utf8_lossy(&raw[..header_end]).to_string();
        let content_length: usize = headers
            .lines()
            .find_map(|l| {
                let lower = l.to_ascii_lowercase();
                lower.strip_prefix("content-length:").map(|v| v.trim().parse().unwrap())
            })
            .unwrap();
        while raw.len() < header_end + content_length {
            let n = stream.read(&mut chunk).unwrap();
            assert!(n > 0);
            raw.extend_from_slice(&chunk[..n]);
        }
        stream.write_all(response.as_bytes()).unwrap();
    });

    let rep_dir = dir.path().join("rep");
    let out = Command::new(env!("CARGO_BIN_EXE_nsad"))
        .args([
            "diagnose",
            "--records",
            &p(&records),
            "--schema",
            &p(&schema),
            "--rules",
            &p(&rules),
            "--checkpoint",
            &p(&run_dir.join("stage2.ckpt")),
            "--id",
            "s00001",
            "--external-prose",
            "--out",
            &p(&rep_dir),
        ])
        .env("NSAD_LLM_ENDPOINT", &endpoint)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    server.join().unwrap();

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rep_dir.join("report_s00001.json")).unwrap())
            .unwrap();
    assert_eq!(report["prose"], "Service narrative for the report.");
    let text = fs::read_to_string(rep_dir.join("report_s00001.txt")).unwrap();
    assert!(text.contains("Service narrative for the report."), "{text}");
}
