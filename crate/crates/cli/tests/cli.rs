use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wfse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wfse")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn merged_oracle_table() {
    let out = wfse(&["merged-oracle", "--m", "1,2,4,8"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "M,bayes_error\n1,0\n2,0.5\n4,0.75\n8,0.875\n");
    let too_many = wfse(&["merged-oracle", "--m", "8", "--classes", "4"]);
    assert_eq!(too_many.status.code(), Some(2));
}

#[test]
fn bounds_csv_shape() {
    let out = wfse(&["bounds", "--classes", "4", "--points", "11"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 12);
    let last: Vec<f64> = lines[11].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last[0], 0.75);
    assert!(last[1..].iter().all(|v| v.abs() < 1e-9));
    assert_eq!(wfse(&["bounds", "--classes", "1"]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(wfse(&["estimate"]).status.code(), Some(2));
    let bad = write(&dir.path().join("bad.toml"), "no_such_key = 1\n");
    assert_eq!(wfse(&["estimate", "--config", &bad]).status.code(), Some(2));
    let missing = write(
        &dir.path().join("missing.toml"),
        &format!(
            "[dataset]\nsource = \"dir\"\nroot = \"{}\"\n",
            dir.path().join("nowhere").display()
        ),
    );
    assert_eq!(wfse(&["estimate", "--config", &missing]).status.code(), Some(3));
}

#[test]
fn synth_defend_estimate_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let synth_cfg = write(
        &p.join("synth.toml"),
        "variant = \"template_traces\"\nclasses = 3\nflip_prob = 0.1\ntrace_len = 10\nsamples_per_class = 20\nseed = 2\n",
    );
    let data = p.join("data");
    let out = wfse(&["synth", "--config", &synth_cfg, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let oracle: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(oracle["ber"]["method"]["method"], "exact");

    let defense_cfg = write(&p.join("merge.toml"), "variant = \"merge\"\nm = 2\nseed = 1\n");
    let defended = p.join("defended");
    let out = wfse(&[
        "defend",
        "--config",
        &defense_cfg,
        "--input",
        data.join("traces").to_str().unwrap(),
        "--out",
        defended.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let overhead: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(defended.join("overhead.json")).unwrap()).unwrap();
    assert_eq!(overhead["overhead"]["traces"], 60);
    assert_eq!(overhead["overhead"]["bandwidth_overhead"], 1.0);

    let run_cfg = write(
        &p.join("run.toml"),
        &format!(
            "trace_length = 24\nnum_folds = 2\nfolds = [1]\n\n[dataset]\nsource = \"dir\"\nroot = \"{}\"\n\n[embedding]\nlayers = [{{ type = \"flatten\" }}, {{ type = \"dense\", units = 8 }}, {{ type = \"activation\" }}]\nbatch_size = 8\nepochs = 5\nlearning_rate = 0.05\n",
            defended.join("traces").display()
        ),
    );
    let results = p.join("results");
    let out = wfse(&["estimate", "--config", &run_cfg, "--seed", "3", "--out", results.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("BER lower bound"));

    let csv = p.join("summary.csv");
    let out = wfse(&[
        "report",
        "--input",
        results.join("report.json").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read(&csv).unwrap(), fs::read(results.join("summary.csv")).unwrap());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(results.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["master_seed"], 3);
    assert_eq!(report["folds"][0]["fold"], 1);
}
