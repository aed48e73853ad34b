use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mechgeo(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mechgeo"));
    c.args(args).env_remove("MECHGEO_OUT_DIR");
    if let Some(p) = env_out {
        c.env("MECHGEO_OUT_DIR", p);
    }
    c.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 12] = [
    "--n-layers", "1", "--d-model", "8", "--n-heads", "2", "--d-ff", "8", "--steps", "2", "--check-every", "0",
];

fn tiny_model(dir: &Path) -> String {
    let out = dir.display().to_string();
    let mut args = vec!["--out-dir", &out, "train-toy", "--model", "tiny"];
    args.extend(TINY);
    let o = mechgeo(&args, None);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("tiny.safetensors").display().to_string()
}

fn snapshot(dir: &Path, command: &str) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join(format!("{command}.config.json"))).unwrap()).unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let o = mechgeo(&["--help"], None);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "train-toy",
        "run-months",
        "sweep",
        "corpus",
        "capture",
        "analyze-pr",
        "analyze-correlation",
        "phase",
        "report",
        "bridge-spec",
        "execute-spec",
        "bridge-results",
    ] {
        assert!(text.contains(sub), "--help does not mention {sub}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(mechgeo(&["sweep", "--no-such-flag"], None).status.code(), Some(2));
    assert_eq!(mechgeo(&["no-such-command"], None).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one_and_a_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = mechgeo(&["--out-dir", &out, "sweep"], None);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: missing --weights"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let o = mechgeo(&["--out-dir", &out, "sweep", "--weights", "w", "--mode", "additive", "--norm-target", "centroid"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--norm-target only applies"));

    let o = mechgeo(&["--out-dir", &out, "capture", "--weights", "w", "--months", "--manifest", "m.json"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mutually exclusive"));

    let o = mechgeo(&["--out-dir", &out, "run-months", "--weights", "/nonexistent/w.safetensors"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/w.safetensors"));
}

#[test]
fn flags_override_config_file_and_snapshot_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("out");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "command": "train-toy",
            "out-dir": out.display().to_string(),
            "n-layers": 1, "d-model": 8, "n-heads": 2, "d-ff": 8,
            "steps": 3, "check-every": 0, "seed": 5, "model": "fromfile"
        })
        .to_string(),
    )
    .unwrap();
    let o = mechgeo(&["--config", &cfg.display().to_string(), "train-toy", "--seed", "9"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let snap = snapshot(&out, "train-toy");
    assert_eq!(snap["seed"], 9);
    assert_eq!(snap["steps"], 3);
    assert_eq!(snap["model"], "fromfile");
    assert_eq!(snap["command"], "train-toy");
    // defaults are recorded too
    assert_eq!(snap["batch-size"], 48);
    let keys: Vec<&String> = snap.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert!(out.join("fromfile.safetensors").exists());
    let loss = std::fs::read_to_string(out.join("train_loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);

    // the snapshot replays to the same outputs
    let replay = dir.path().join("replay.json");
    let mut snap = snap;
    snap["out-dir"] = Value::String(dir.path().join("again").display().to_string());
    std::fs::write(&replay, snap.to_string()).unwrap();
    let o = mechgeo(&["--config", &replay.display().to_string(), "train-toy"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("train_loss.csv")).unwrap(),
        std::fs::read(dir.path().join("again/train_loss.csv")).unwrap()
    );
}

#[test]
fn config_for_another_command_or_with_unknown_keys_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"command": "sweep"}"#).unwrap();
    let o = mechgeo(&["--out-dir", &out, "--config", &cfg.display().to_string(), "train-toy"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("written for `sweep`"));

    std::fs::write(&cfg, r#"{"stepz": 3}"#).unwrap();
    let o = mechgeo(&["--out-dir", &out, "--config", &cfg.display().to_string(), "train-toy"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stepz"));
}

#[test]
fn out_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("env");
    let file_dir = dir.path().join("file");
    let weights = tiny_model(&dir.path().join("w"));

    let o = mechgeo(&["run-months", "--weights", &weights], Some(&env_dir));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_dir.join("months_baseline.csv").exists());

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, serde_json::json!({"out-dir": file_dir.display().to_string()}).to_string()).unwrap();
    let o = mechgeo(&["--config", &cfg.display().to_string(), "run-months", "--weights", &weights], Some(&env_dir));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(file_dir.join("months_baseline.csv").exists());

    let flag_dir = dir.path().join("flag");
    let o = mechgeo(
        &["--config", &cfg.display().to_string(), "--out-dir", &flag_dir.display().to_string(), "run-months", "--weights", &weights],
        Some(&env_dir),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let baseline = std::fs::read_to_string(flag_dir.join("months_baseline.csv")).unwrap();
    assert_eq!(baseline.lines().count(), 145);
    assert!(baseline.starts_with("model,alpha,beta,gamma,prediction,correct\n"));
    let acc = std::fs::read_to_string(flag_dir.join("months_accuracy.csv")).unwrap();
    assert!(acc.starts_with("model,condition,token_set,layer,metric,value\ntiny,baseline,months,1,accuracy,"));
}

#[test]
fn phase_reports_undefined_when_output_never_dominates() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, token_set: &str, vals: [f64; 3]| {
        let mut s = String::from("model,condition,token_set,layer,metric,value\n");
        for (i, v) in vals.iter().enumerate() {
            s.push_str(&format!("m,additive,{token_set},{},effect,{v}\n", i + 1));
        }
        let p = dir.path().join(name);
        std::fs::write(&p, s).unwrap();
        p.display().to_string()
    };
    let input = write("in.csv", "input_month", [3.0, 2.0, 1.0]);
    let flat = write("flat.csv", "output_prediction", [0.0, 0.0, 0.0]);
    let rising = write("rise.csv", "output_prediction", [0.0, 4.0, 8.0]);
    let out = dir.path().display().to_string();

    let o = mechgeo(&["--out-dir", &out, "phase", "--input", &input, "--output", &flat], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("phase.csv")).unwrap();
    assert!(csv.ends_with("m,additive,phase,0,phase_change_layer,\n"), "{csv}");

    let o = mechgeo(&["--out-dir", &out, "phase", "--input", &input, "--output", &rising], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("phase.csv")).unwrap();
    assert!(csv.ends_with("m,additive,phase,0,phase_change_layer,2\n"), "{csv}");

    let o = mechgeo(&["--out-dir", &out, "report", "--csv", &format!("{input},{rising}")], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("m_additive.svg")).unwrap();
    assert!(svg.contains("phase_change: 2"));
    assert!(svg.contains("#1f77b4"));
}
