use std::sync::Arc;

use proptest::prelude::*;
use vicsearch_core::dataset::standardize_and_split;
use vicsearch_core::evaluator::{EvaluatorBackend, EvaluatorKind};
use vicsearch_core::prompts::PromptSet;
use vicsearch_core::search::{read_round_logs, CandidateStatus, Mode, ProposerKind, RoundLog, RunConfig};
use vicsearch_core::symreg::{
    fit_function_xy, mean_predictor, nmse, parse_function, run_sr_discovery, AgentFunctionProposer,
    GreedyFunctionProposer, ScriptedFunctionProposer, SrCandidateLog, SrFitOptions,
};
use vicsearch_core::vlm::ScriptedClient;
use vicsearch_core::{Dataset, RawSeries};

const NGUYEN_TEMPLATE: &str = "c0*x^3 + c1*x^2 + c2*x";

fn nguyen1(n: usize) -> Dataset {
    let x: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let y = x.iter().map(|x| x * x * x + x * x + x).collect();
    standardize_and_split(&RawSeries::new("nguyen1", x, y).unwrap(), 0.0, 0.0).unwrap()
}

fn config(rounds: usize) -> RunConfig {
    RunConfig {
        mode: Mode::Sr,
        rounds: Some(rounds),
        proposer: ProposerKind::Scripted,
        evaluator: EvaluatorKind::Heuristic,
        seed: 3,
        grid_points: 80,
        ..RunConfig::default()
    }
}

/// A scripted config and the matching proposer.
fn scripted(rounds: &[&[&str]]) -> (RunConfig, ScriptedFunctionProposer) {
    let script: Vec<Vec<String>> = rounds.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect();
    let cfg = RunConfig { script: script.clone(), ..config(rounds.len()) };
    (cfg, ScriptedFunctionProposer { rounds: script })
}

fn r_squared(pred: &[f64], y: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = pred.iter().zip(y).map(|(p, v)| (v - p).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

#[test]
fn scripted_run_recovers_the_generating_template() {
    let ds = nguyen1(40);
    let dir = tempfile::tempdir().unwrap();
    let (cfg, mut p) = scripted(&[&["c0*x", "c0*sin(c1*x)"], &[NGUYEN_TEMPLATE]]);
    let out = run_sr_discovery(&cfg, &ds, dir.path(), &mut p, &EvaluatorBackend::Heuristic).unwrap();
    assert_eq!(out.best.text(), NGUYEN_TEMPLATE);
    let (x, y) = ds.train_raw();
    assert!(r_squared(&out.best.predict(&x), &y) >= 0.999);
    for c in &out.best.coefficients {
        assert!((c - 1.0).abs() < 1e-6, "{:?}", out.best.coefficients);
    }
    let logs: Vec<RoundLog<SrCandidateLog>> = read_round_logs(dir.path()).unwrap();
    assert_eq!(logs.len(), 2);
    assert_eq!(logs[0].references, ["c0"]);
    assert_eq!(logs[1].best.score_name, "combined");
    assert!(logs[1].best.model.starts_with(NGUYEN_TEMPLATE));
    assert!(logs[1].rmse.train.unwrap() < 1e-6);
}

#[test]
fn functions_that_blow_up_on_the_grid_are_never_selected() {
    // Finite on the training inputs (x <= 0.8) but overflowing at x = 1.2.
    let x: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
    let y: Vec<f64> = x.iter().map(|x| 2.0 * x + 0.1).collect();
    let ds = standardize_and_split(&RawSeries::new("line", x, y).unwrap(), 0.2, 0.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (cfg, mut p) = scripted(&[&["c0*exp(exp(6.5*x))", "c0*x^2"]]);
    let out = run_sr_discovery(&cfg, &ds, dir.path(), &mut p, &EvaluatorBackend::Heuristic).unwrap();
    assert_eq!(out.best.text(), "c0*x^2");

    let logs: Vec<RoundLog<SrCandidateLog>> = read_round_logs(dir.path()).unwrap();
    let blowup = &logs[0].candidates[0];
    assert_eq!(blowup.status, CandidateStatus::Pooled);
    let s = blowup.score.as_ref().unwrap();
    assert!(!s.finite);
    assert_eq!(s.nmse, f64::INFINITY);
    assert_eq!(s.combined, f64::NEG_INFINITY);
    let raw = std::fs::read_to_string(dir.path().join("rounds/r1/log.json")).unwrap();
    assert!(raw.contains("\"combined\": null"));
}

#[test]
fn greedy_and_agent_proposers_drive_the_loop() {
    let ds = nguyen1(30);
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { proposer: ProposerKind::Greedy, ..config(2) };
    let out =
        run_sr_discovery(&cfg, &ds, dir.path(), &mut GreedyFunctionProposer { limit: 8 }, &EvaluatorBackend::Heuristic)
            .unwrap();
    assert!(out.score.nmse < 0.1, "{:?}", out.score);

    let client = Arc::new(ScriptedClient::new([
        "```tool\nperiodogram source=data\n```".to_string(),
        format!("next functions: [\"{NGUYEN_TEMPLATE}\"]"),
    ]));
    let mut agent = AgentFunctionProposer { client: client.clone(), prompts: PromptSet::embedded(), max_steps: 5, greedy_limit: 8 };
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { proposer: ProposerKind::Agent, ..config(1) };
    let out = run_sr_discovery(&cfg, &ds, dir.path(), &mut agent, &EvaluatorBackend::Heuristic).unwrap();
    assert_eq!(out.best.text(), NGUYEN_TEMPLATE);
    assert!(dir.path().join("transcripts/r1.txt").exists());
    assert_eq!(client.remaining(), 0);
}

#[test]
fn identical_sr_runs_write_identical_logs() {
    let ds = nguyen1(30);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, mut p) = scripted(&[&["c0*x + c1", "c0*exp(c1*x)"], &["c0*x^2 + c1*x"]]);
        run_sr_discovery(&cfg, &ds, dir.path(), &mut p, &EvaluatorBackend::Heuristic).unwrap();
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("rounds/r2/log.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timestamp");
        v
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn mean_predictor_has_unit_nmse(y in prop::collection::vec(-1e3f64..1e3, 2..200)) {
        prop_assume!(y.iter().any(|v| *v != y[0]));
        let m = mean_predictor(&y);
        let pred = m.predict(&vec![0.0; y.len()]);
        prop_assert_eq!(nmse(&pred, &y).unwrap(), 1.0);
    }

    #[test]
    fn nmse_is_invariant_to_affine_rescaling(
        y in prop::collection::vec(-10.0f64..10.0, 5..50),
        noise in prop::collection::vec(-1.0f64..1.0, 50),
        a in 0.1f64..100.0,
        b in -100.0f64..100.0,
    ) {
        prop_assume!(y.iter().any(|v| (v - y[0]).abs() > 1e-3));
        let pred: Vec<f64> = y.iter().zip(&noise).map(|(v, e)| v + e).collect();
        let scaled_y: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let scaled_p: Vec<f64> = pred.iter().map(|v| a * v + b).collect();
        let base = nmse(&pred, &y).unwrap();
        prop_assert!((nmse(&scaled_p, &scaled_y).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn linear_templates_are_solved_exactly(c0 in -5.0f64..5.0, c1 in -5.0f64..5.0, seed in any::<u64>()) {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let y: Vec<f64> = x.iter().map(|x| c0 * x + c1).collect();
        let f = fit_function_xy(&parse_function("c0*x + c1").unwrap(), &x, &y, &SrFitOptions::default(), seed).unwrap();
        prop_assert!((f.coefficients[0] - c0).abs() < 1e-8 && (f.coefficients[1] - c1).abs() < 1e-8);
    }
}
