use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lpf_core::mc_error_bound;
use serde_json::Value;

fn lpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpf"))
        .args(args)
        .env_remove("LPF_SEED")
        .output()
        .expect("spawn lpf")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs")
        .join(name);
    jsonschema::validator_for(&read_json(&path)).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, doc: &Value, what: &str) {
    let errors: Vec<String> = validator
        .iter_errors(doc)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{what}: {errors:?}");
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "[t1]\nentities = 40\ntrain_entities = 60\n\
         [t2]\ntrials = 5\n\
         [t3]\nn_values = [300, 400]\nn_test = 100\nseeds = 1\nmin_accuracy = 0.5\n[t3.train]\nepochs = 3\n\
         [t4]\nentities = 30\n\
         [t5]\ntrials = 2\nentities = 20\n\
         [t6]\ntrials = 2\nentities = 30\nmin_r2 = 0.0\n\
         [t7]\nentities = 10\nmc_samples = 20\n\
         [assumptions]\ncorrelation_entities = 60\nentities = 60\nclosure_cases = 50\nlatent_samples = 100\n",
    )
    .unwrap();
    path
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let out = lpf(&["verify", "t9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t9"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(lpf(&["explode"]).status.code(), Some(2));
    assert_eq!(lpf(&[]).status.code(), Some(2));
}

#[test]
fn missing_config_names_the_path() {
    let out = lpf(&["--config", "/definitely/not/here.toml", "verify", "t2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.toml"));
}

#[test]
fn malformed_config_is_a_config_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[t2]\ntrials = [\n").unwrap();
    let out = lpf(&[
        "--config",
        path_str(&cfg),
        "verify",
        "t2",
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn unknown_config_keys_only_warn() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("extra.toml");
    fs::write(&cfg, "[t2]\ntrials = 3\nflavour = \"mint\"\n").unwrap();
    let out = lpf(&[
        "--config",
        path_str(&cfg),
        "verify",
        "t2",
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("flavour"));
}

#[test]
fn verify_t2_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = lpf(&["verify", "t2", "--out", path_str(dir.path())]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("t2_report.json").is_file());
    assert!(dir.path().join("t2_table.csv").is_file());
    let report = read_json(&dir.path().join("t2_report.json"));
    assert_valid(&schema("report.schema.json"), &report, "t2 report");
    assert_eq!(report["verdict"], "pass");
    assert_eq!(report["table"]["rows"].as_array().unwrap().len(), 5);
}

#[test]
fn m_list_override_gives_two_sweep_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.toml");
    fs::write(&cfg, "[t2]\nm_values = [4, 16]\n").unwrap();
    let out = lpf(&[
        "--config",
        path_str(&cfg),
        "verify",
        "t2",
        "--out",
        path_str(dir.path()),
        "--format",
        "json",
    ]);
    assert!(out.status.code().is_some_and(|c| c <= 1));
    let report = read_json(&dir.path().join("t2_report.json"));
    let ms: Vec<u64> = report["table"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r[0].as_u64().unwrap())
        .collect();
    assert_eq!(ms, vec![4, 16]);
    assert!(!dir.path().join("t2_table.csv").exists());
}

#[test]
fn label_count_override_changes_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("y4.toml");
    fs::write(&cfg, "[world]\nnum_labels = 4\n[t2]\ntrials = 5\n").unwrap();
    let out = lpf(&[
        "--config",
        path_str(&cfg),
        "verify",
        "t2",
        "--out",
        path_str(dir.path()),
    ]);
    assert!(out.status.code().is_some_and(|c| c <= 1));
    let report = read_json(&dir.path().join("t2_report.json"));
    let cols: Vec<&str> = report["table"]["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_str().unwrap())
        .collect();
    let (mi, bi) = (
        cols.iter().position(|c| *c == "m").unwrap(),
        cols.iter().position(|c| *c == "bound").unwrap(),
    );
    for row in report["table"]["rows"].as_array().unwrap() {
        let m = row[mi].as_u64().unwrap() as usize;
        let bound = row[bi].as_f64().unwrap();
        assert!((bound - mc_error_bound(m, 4, 0.05)).abs() < 1e-12);
        assert!(bound > mc_error_bound(m, 3, 0.05));
    }
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (headers, rows)
}

#[test]
fn csv_and_json_encode_identical_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let (jdir, cdir) = (dir.path().join("j"), dir.path().join("c"));
    let cfg = small_config(dir.path());
    for (d, f) in [(&jdir, "json"), (&cdir, "csv")] {
        for id in ["t2", "t5", "t6"] {
            let out = lpf(&[
                "--config",
                path_str(&cfg),
                "verify",
                id,
                "--out",
                path_str(d),
                "--format",
                f,
            ]);
            assert!(out.status.code().is_some_and(|c| c <= 1));
        }
    }
    for id in ["t2", "t5", "t6"] {
        let report = read_json(&jdir.join(format!("{id}_report.json")));
        let (headers, rows) = csv_rows(&cdir.join(format!("{id}_table.csv")));
        let cols: Vec<&str> = report["table"]["columns"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_str().unwrap())
            .collect();
        assert_eq!(headers, cols);
        let jrows = report["table"]["rows"].as_array().unwrap();
        assert_eq!(rows.len(), jrows.len());
        for (crow, jrow) in rows.iter().zip(jrows) {
            for (cell, value) in crow.iter().zip(jrow.as_array().unwrap()) {
                match value {
                    Value::Number(n) => {
                        assert_eq!(cell.parse::<f64>().unwrap(), n.as_f64().unwrap(), "{id}")
                    }
                    Value::String(s) => assert_eq!(cell, s),
                    Value::Bool(b) => assert_eq!(cell, &b.to_string()),
                    Value::Null => assert!(cell.is_empty()),
                    other => panic!("unexpected cell {other}"),
                }
            }
        }
    }
}

#[test]
fn verify_all_outputs_match_schema_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out_a = lpf(&[
        "--config",
        path_str(&cfg),
        "--seed",
        "7",
        "verify",
        "all",
        "--out",
        path_str(&a),
        "--jobs",
        "1",
    ]);
    let out_b = lpf(&[
        "--config",
        path_str(&cfg),
        "--seed",
        "7",
        "verify",
        "all",
        "--out",
        path_str(&b),
        "--jobs",
        "3",
    ]);
    assert!(out_a.status.code().is_some_and(|c| c <= 1));
    assert_eq!(out_a.status.code(), out_b.status.code());

    let report_schema = schema("report.schema.json");
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8 * 2 + 2, "{names:?}");
    for name in &names {
        let (x, y) = (
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
        );
        assert!(x == y, "{name} differs between runs");
        if name.ends_with("_report.json") {
            let doc: Value = serde_json::from_slice(&x).unwrap();
            assert_valid(&report_schema, &doc, name);
            assert_eq!(doc["seed"], 7);
        }
    }
    let summary = read_json(&a.join("summary.json"));
    assert_valid(&schema("summary.schema.json"), &summary, "summary");
    assert_eq!(summary["rows"].as_array().unwrap().len(), 8);
    let (headers, rows) = csv_rows(&a.join("summary.csv"));
    assert_eq!(
        headers,
        [
            "experiment",
            "claim",
            "status",
            "verdict",
            "margin",
            "failed_checks"
        ]
    );
    assert_eq!(rows.len(), 8);
}

#[test]
fn seed_flag_env_and_file_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    fs::write(&cfg, "seed = 5\n[t2]\ntrials = 2\n").unwrap();
    let run = |extra_env: Option<&str>, flag: Option<&str>| -> u64 {
        let out_dir = tempfile::tempdir().unwrap();
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_lpf"));
        cmd.env_remove("LPF_SEED").args([
            "--config",
            path_str(&cfg),
            "verify",
            "t2",
            "--out",
            path_str(out_dir.path()),
        ]);
        if let Some(s) = extra_env {
            cmd.env("LPF_SEED", s);
        }
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        assert!(cmd.output().unwrap().status.code().is_some_and(|c| c <= 1));
        read_json(&out_dir.path().join("t2_report.json"))["seed"]
            .as_u64()
            .unwrap()
    };
    assert_eq!(run(None, None), 5);
    assert_eq!(run(Some("11"), None), 11);
    assert_eq!(run(Some("11"), Some("13")), 13);
}

#[test]
fn world_factor_aggregate_and_train_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.jsonl");
    let out = lpf(&[
        "world",
        "export",
        "--entities",
        "12",
        "--k",
        "4",
        "--output",
        path_str(&world),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<Value> = fs::read_to_string(&world)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    assert!(lines
        .iter()
        .all(|l| l["evidence"].as_array().unwrap().len() == 4));

    let out = lpf(&["factor", "--input", path_str(&world), "--samples", "8"]);
    assert_eq!(out.status.code(), Some(0));
    let factors: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(factors.len(), 12);
    for f in factors[0]["factors"].as_array().unwrap() {
        let s: f64 = f["dist"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p.as_f64().unwrap())
            .sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(f["m_used"], 8);
    }

    let spn = lpf(&["aggregate", "--input", path_str(&world), "--method", "spn"]);
    assert_eq!(spn.status.code(), Some(0));
    assert_eq!(String::from_utf8(spn.stdout).unwrap().lines().count(), 12);

    let model_dir = dir.path().join("model");
    let out = lpf(&[
        "train",
        "--n-train",
        "200",
        "--n-test",
        "50",
        "--k",
        "4",
        "--out",
        path_str(&model_dir),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = read_json(&model_dir.join("train_report.json"));
    assert_eq!(report["n_train"], 200);
    let model = model_dir.join("aggregator.json");
    let learned = lpf(&[
        "aggregate",
        "--input",
        path_str(&world),
        "--method",
        "learned",
        "--model",
        path_str(&model),
    ]);
    assert_eq!(learned.status.code(), Some(0));
    let first: Value = serde_json::from_str(
        String::from_utf8(learned.stdout)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(first["result"]["method"], "learned");

    let missing_model = lpf(&[
        "aggregate",
        "--input",
        path_str(&world),
        "--method",
        "learned",
    ]);
    assert_eq!(missing_model.status.code(), Some(2));
}

#[test]
fn failing_verdict_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("strict.toml");
    // An impossible pass-rate threshold forces a fail verdict.
    fs::write(&cfg, "[t2]\ntrials = 3\nmin_trial_pass_rate = 1.5\n").unwrap();
    let out = lpf(&[
        "--config",
        path_str(&cfg),
        "verify",
        "t2",
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("failed"));
}
