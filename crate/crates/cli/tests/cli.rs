use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const QUICK: &str = r#"{"ensemble_members": 2, "train": {"epochs": 2}}"#;

fn ipred(out: &Path, args: &[&str]) -> Output {
    let config = out.join("quick.json");
    if !config.exists() {
        fs::create_dir_all(out).unwrap();
        fs::write(&config, QUICK).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_ipred"))
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(&config)
        .args(args)
        .env("IP_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_subcommands() {
    let o = Command::new(env!("CARGO_BIN_EXE_ipred")).arg("--help").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["gen-data", "train", "predict", "eval", "latent-grid", "--seed", "--out", "--config"] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

#[test]
fn unknown_method_lists_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let o = ipred(dir.path(), &["train", "--method", "transformer"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("valid methods: proposed, cvae-noI, mlp-ensemble, mc-dropout"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"modle": {}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ipred"))
        .args(["--out", dir.path().to_str().unwrap(), "--config", cfg.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("modle"), "{}", stderr(&o));
}

#[test]
fn commands_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = ipred(dir.path(), &["train", "--method", "proposed"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));

    assert!(ipred(dir.path(), &["gen-data", "--cases", "12"]).status.success());
    let o = ipred(dir.path(), &["predict", "--method", "proposed"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no checkpoint for method `proposed`"), "{}", stderr(&o));

    let o = ipred(dir.path(), &["gen-data", "--cases", "12"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--force"));
    assert!(ipred(dir.path(), &["gen-data", "--cases", "12", "--force"]).status.success());

    let o = ipred(dir.path(), &["gen-data", "--cases", "3", "--force"]);
    assert!(!o.status.success());
}

#[test]
fn full_pipeline_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let run = |args: &[&str]| {
        let o = ipred(out, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    let summary = run(&["--seed", "4", "gen-data", "--cases", "12"]);
    assert!(summary.contains("12 cases"), "{summary}");
    let manifest = fs::read_to_string(out.join("data/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 4"));

    for m in ["proposed", "cvae-noI", "mlp-ensemble", "mc-dropout"] {
        run(&["--seed", "4", "train", "--method", m]);
        let model = out.join("models").join(m);
        assert!(model.join("checkpoint.bin").exists());
        let loss = fs::read_to_string(model.join("loss.csv")).unwrap();
        assert!(loss.starts_with("# ipred "), "{loss}");
        assert!(loss.contains("seed=4"));
        assert_eq!(loss.lines().count(), 2 + 2, "{loss}");
    }
    let sidecar = fs::read_to_string(out.join("models/mlp-ensemble/config.json")).unwrap();
    assert!(sidecar.contains("\"use_intention\": false"), "{sidecar}");

    run(&["--seed", "4", "predict", "--samples", "5"]);
    let preds: Vec<_> = fs::read_dir(out.join("predictions/proposed")).unwrap().map(|e| e.unwrap().path()).collect();
    let json = preds.iter().find(|p| p.extension().is_some_and(|e| e == "json")).expect("prediction json");
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(value["seed"], 4);
    assert!(value["config_digest"].is_string());
    let step = &value["steps"][0];
    assert_eq!(step["samples"].as_array().unwrap().len(), 5);
    assert_eq!(step["samples"][0].as_array().unwrap().len(), 5);
    assert!(preds.iter().any(|p| p.to_string_lossy().ends_with("_beliefs.csv")));

    let table = run(&["--seed", "4", "eval", "--samples", "10"]);
    for name in ["CVAE with intention", "CVAE without intention", "MLP ensemble", "MC dropout"] {
        assert!(table.contains(name), "{table}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["methods"].as_array().unwrap().len(), 4);
    assert_eq!(report["report"]["seed"], 4);

    run(&["--seed", "4", "latent-grid", "--steps", "3"]);
    let latent: Vec<_> = fs::read_dir(out.join("latent")).unwrap().map(|e| e.unwrap().path()).collect();
    let grid: serde_json::Value = serde_json::from_str(&fs::read_to_string(&latent[0]).unwrap()).unwrap();
    assert_eq!(grid["grid"].as_array().unwrap().len(), 9);
    assert_eq!(grid["intention"].as_array().unwrap().iter().filter(|v| v.as_f64() == Some(1.0)).count(), 1);
    assert_eq!(grid["seed"], 4);

    let o = ipred(out, &["latent-grid", "--method", "mlp-ensemble"]);
    assert!(!o.status.success());
}
