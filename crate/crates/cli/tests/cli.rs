use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vicsearch"));
    c.env_remove("RUST_LOG").env_remove("MODEL_API_KEY");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Small linear-plus-periodic series written as CSV.
fn write_data(dir: &Path, n: usize) -> PathBuf {
    let mut text = String::from("x,y\n");
    for i in 0..n {
        let x = i as f64 / (n - 1) as f64;
        let y = 0.5 * x + (2.0 * std::f64::consts::PI * x / 0.25).sin() + 0.01 * ((i * 7919) % 13) as f64;
        text.push_str(&format!("{x},{y}\n"));
    }
    let path = dir.join("series.csv");
    std::fs::write(&path, text).unwrap();
    path
}

fn write_config(dir: &Path, value: Value) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn small_config(data: &Path) -> Value {
    serde_json::json!({
        "data": data.to_str().unwrap(),
        "rounds": 2,
        "n_restarts": 1,
        "proposer": "greedy",
        "evaluator": "heuristic",
        "greedy_limit": 3,
        "grid_points": 50,
        "seed": 11
    })
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Finished two-round heuristic run in `dir/run`.
fn finished_run(dir: &Path) -> PathBuf {
    let data = write_data(dir, 40);
    let cfg = write_config(dir, small_config(&data));
    let out = dir.join("run");
    let o = run(&["discover", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn discover_prints_the_summary_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 40);
    let cfg = write_config(dir.path(), small_config(&data));
    let out = dir.path().join("run");
    let o = run(&["discover", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("best kernel: "));
    assert!(stdout.contains("VIC: "));
    assert!(stdout.contains("test: "));
    for rel in ["config.json", "report.md", "rounds/r1/log.json", "rounds/r2/log.json", "plots/mse_over_rounds.png"] {
        assert!(out.join(rel).exists(), "{rel}");
    }
}

#[test]
fn missing_config_and_bad_flags_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&run(&["discover", "--config", missing.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["discover", "--proposer", "oracle"])), 2);
    assert_eq!(code(&run(&["discover", "--no-such-flag"])), 2);
    // no data file at all
    assert_eq!(code(&run(&["discover", "--evaluator", "heuristic", "--proposer", "greedy"])), 2);
    let cfg = write_config(dir.path(), serde_json::json!({ "unknown_key": 1 }));
    assert_eq!(code(&run(&["discover", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn exhausted_script_aborts_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 30);
    let mut v = small_config(&data);
    v["proposer"] = "scripted".into();
    v["script"] = serde_json::json!([["SE"]]);
    let cfg = write_config(dir.path(), v);
    let out = dir.path().join("run");
    let o = run(&["discover", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
}

#[test]
fn flag_overrides_win_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 40);
    let cfg = write_config(dir.path(), small_config(&data));
    let out = dir.path().join("run");
    let o = run(&[
        "discover", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--rounds", "1", "--alpha", "0", "--seed", "99", "--top-k", "2", "--gamma", "0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = read_json(&out.join("config.json"));
    assert_eq!(echoed["rounds"], 1);
    assert_eq!(echoed["alpha"], 0.0);
    assert_eq!(echoed["seed"], 99);
    assert_eq!(echoed["top_k"], 2);
    assert_eq!(echoed["recency_gamma"], 0.5);
    assert_eq!(echoed["greedy_limit"], 3);

    // with alpha = 0 the selected model is the minimum-BIC candidate
    let log = read_json(&out.join("rounds/r1/log.json"));
    let min_bic = log["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|c| c["score"]["bic"].as_f64())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(log["best"]["score"].as_f64().unwrap(), -min_bic);
}

#[test]
fn baseline_forces_greedy_top_one_bic() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 40);
    let mut v = small_config(&data);
    v["proposer"] = "agent".into();
    v["evaluator"] = "vlm".into();
    v["top_k"] = 3.into();
    v["rounds"] = 1.into();
    let cfg = write_config(dir.path(), v);
    let out = dir.path().join("run");
    let o = run(&["baseline", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = read_json(&out.join("config.json"));
    assert_eq!(echoed["top_k"], 1);
    assert_eq!(echoed["alpha"], 0.0);
    assert_eq!(echoed["proposer"], "greedy");
    assert!(out.join("report.md").exists());
    assert!(out.join("plots/mse_over_rounds.png").exists());
}

#[test]
fn report_is_byte_stable_and_offline() {
    let dir = tempfile::tempdir().unwrap();
    let out = finished_run(dir.path());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());

    let report = |_: usize| {
        let o = bin()
            .args(["report", "--out", out.to_str().unwrap()])
            .env("MODEL_BASE_URL", &url)
            .env("MODEL_API_KEY", "sk-unused")
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (
            std::fs::read(out.join("report.md")).unwrap(),
            std::fs::read(out.join("plots/mse_over_rounds.png")).unwrap(),
        )
    };
    let first = report(0);
    let second = report(1);
    assert_eq!(first, second);
    let text = String::from_utf8(first.0).unwrap();
    let log = read_json(&out.join("rounds/r2/log.json"));
    assert!(text.contains(log["best"]["model"].as_str().unwrap()));
    assert_eq!(log["rmse_series"].as_array().unwrap().len(), 2);
    assert!(matches!(listener.accept(), Err(e) if e.kind() == std::io::ErrorKind::WouldBlock));
}

#[test]
fn corrupt_logs_exit_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = finished_run(dir.path());
    std::fs::write(out.join("rounds/r2/log.json"), "{ not json").unwrap();
    let o = run(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn fit_and_evaluate_print_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 40);
    let d = data.to_str().unwrap();
    let o = run(&["fit", "--data", d, "--model", "lin + per", "--restarts", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["kernel"], "LIN + PER");
    assert!(v["bic"].as_f64().unwrap().is_finite());

    let plots = dir.path().join("eval");
    let o = run(&[
        "evaluate", "--data", d, "--model", "LIN + PER", "--restarts", "2", "--evaluator", "heuristic",
        "--out", plots.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let total = v["evaluator_total"].as_f64().unwrap();
    assert!((0.0..=150.0).contains(&total));
    assert!(v["vic"].as_f64().is_some());

    assert_eq!(code(&run(&["fit", "--data", d, "--model", "SE +"])), 2);

    let o = run(&["fit", "--data", d, "--mode", "sr", "--model", "c0*x + c1*sin(c2*x)"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["coefficients"].as_array().unwrap().len(), 3);
}

#[test]
fn sr_subcommand_runs_scripted_functions() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 40);
    let mut v = small_config(&data);
    v["proposer"] = "scripted".into();
    v["rounds"] = 1.into();
    v["script"] = serde_json::json!([["c0*x + c1", "c0*x + c1*sin(c2*x)"]]);
    let cfg = write_config(dir.path(), v);
    let out = dir.path().join("run");
    let o = run(&["sr", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("best function: "));
    assert_eq!(read_json(&out.join("config.json"))["mode"], "sr");
}

#[test]
fn documented_reference_config_is_the_default() {
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.md")).unwrap();
    let start = doc.find("```json\n").unwrap() + "```json\n".len();
    let block = &doc[start..start + doc[start..].find("```").unwrap()];
    let default = vicsearch_core::search::RunConfig::default();
    assert_eq!(block.trim_end(), serde_json::to_string_pretty(&default).unwrap());
    assert_eq!(vicsearch_core::search::RunConfig::from_json(block).unwrap(), default);
}
