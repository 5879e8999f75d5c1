use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ddiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddiff")).args(args).output().expect("binary runs")
}

fn only_run_dir(parent: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(parent).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

const TINY: &[&str] = &[
    "--set", "data.synth.nodes=4",
    "--set", "data.synth.steps=160",
    "--set", "data.windows.history=4",
    "--set", "data.windows.horizon=4",
    "--set", "data.windows.stride=4",
    "--set", "data.eval_stride=8",
    "--set", "model.blocks=1",
    "--set", "model.hidden=8",
    "--set", "model.heads=2",
    "--set", "schedule.steps=20",
    "--set", "train.epochs=2",
    "--set", "train.batch_size=8",
    "--set", "sampling.samples=2",
];

fn with_tiny<'a>(head: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(TINY);
    v.extend_from_slice(&["--out", out, "--seed", "3"]);
    v
}

#[test]
fn schedule_prints_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddiff(&["schedule", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let run = only_run_dir(dir.path());
    let text = fs::read_to_string(run.join("accelerated_steps.csv")).unwrap();
    assert_eq!(
        text,
        "beta_end,50,100,200,300,400,500\n0.1,37,52,74,91,105,117\n0.2,26,37,52,64,74,83\n\
         0.3,21,30,43,53,61,68\n0.4,18,26,37,45,53,59\n"
    );
    assert!(run.join("config.json").exists());
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddiff(&["train", "--set", "train.batch_size=0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"hidden": 64, "hiden": 3}}"#).unwrap();
    let out = ddiff(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_sample_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let (t, s, e) = (format!("{root}/t"), format!("{root}/s"), format!("{root}/e"));
    assert!(ddiff(&with_tiny(&["train"], &t)).status.success());
    let ck = only_run_dir(Path::new(&t)).join("checkpoint.json");
    let ck = ck.to_str().unwrap();
    let out = ddiff(&with_tiny(&["sample", "--checkpoint", ck, "--deterministic"], &s));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let info: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(only_run_dir(Path::new(&s)).join("sampling.json")).unwrap()).unwrap();
    assert_eq!(info["start_step"], info["accelerated_step"]);
    let out = ddiff(&with_tiny(&["evaluate", "--checkpoint", ck, "--emit-plots"], &e));
    assert!(out.status.success());
    let run = only_run_dir(Path::new(&e));
    let scores: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("scores.json")).unwrap()).unwrap();
    for key in ["mae", "rmse", "crps"] {
        assert!(scores[key].as_f64().unwrap() >= 0.0);
    }
    assert!(run.join("horizon_plot.csv").exists());

    let b = format!("{root}/b");
    let out = ddiff(&with_tiny(&["evaluate", "--baseline", "ode"], &b));
    assert!(out.status.success());
}

#[test]
fn synth_and_ode_forecast() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let (a, b) = (format!("{root}/a"), format!("{root}/b"));
    assert!(ddiff(&with_tiny(&["synth"], &a)).status.success());
    let run = only_run_dir(Path::new(&a));
    for f in ["series.csv", "coords.csv", "adjacency.csv", "synth.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let series = format!("data.path=\"{}\"", run.join("series.csv").display());
    let coords = format!("graph.coords=\"{}\"", run.join("coords.csv").display());
    let mut args = with_tiny(&["forecast-ode"], &b);
    args.extend_from_slice(&["--set", &series, "--set", &coords]);
    let out = ddiff(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(only_run_dir(Path::new(&b)).join("ode_forecast.csv").exists());
}
