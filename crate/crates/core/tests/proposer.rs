mod common;

use std::sync::Arc;

use vicsearch_core::dataset::standardize_and_split;
use vicsearch_core::fitting::fit;
use vicsearch_core::kernel::{neighbors, parse};
use vicsearch_core::proposer::{
    run_agent_loop, AgentProposer, AgentSettings, FallbackReason, GreedyProposer, ProposalRequest, Proposer, ProposerError,
    Reference, ScriptedProposer, MAX_STRIKES,
};
use vicsearch_core::proposer::tools::periodogram;
use vicsearch_core::vlm::{ChatBackend, FixtureClient, RecordingClient, ScriptedClient};
use vicsearch_core::{Dataset, RawSeries};

fn dataset() -> Dataset {
    let (x, y) = common::lin_plus_periodic(200, 1);
    standardize_and_split(&RawSeries::new("synthetic", x, y).unwrap(), 0.2, 0.0).unwrap()
}

fn lin_reference(ds: &Dataset) -> Vec<Reference> {
    let model = fit(&parse("LIN").unwrap(), ds, 2, None, 3).unwrap();
    vec![Reference { model, score: None }]
}

const TRACE: [&str; 4] = [
    "The data rises slowly and oscillates. Let me see how the linear model fits.\n```tool\nrender_prediction_plot model=0\n```",
    "The mean misses the oscillation. Checking the residuals.\n```tool\nresidual_stats model=0\n```",
    "The residuals look periodic.\n```tool\nperiodogram source=residuals model=0\n```",
    "There is a dominant period near 0.1.\nnext kernels: [\"LIN + PER\", \"LIN + PER * SE\", \"LIN + PER init: PER.period=0.1\"]",
];

#[test]
fn four_step_trace_terminates_with_parseable_candidates() {
    let ds = dataset();
    let refs = lin_reference(&ds);
    let client = ScriptedClient::new(TRACE);
    let out = run_agent_loop(&client, &refs, &ds, &AgentSettings::default()).unwrap();
    assert_eq!(out.steps, 4);
    assert_eq!(out.fallback, None);
    let texts: Vec<String> = out.candidates.iter().map(|c| c.expr.canonical_text()).collect();
    assert_eq!(texts, ["LIN + PER", "LIN + PER * SE", "LIN + PER"]);
    assert_eq!(out.candidates[2].init.as_ref().unwrap().0["PER.period"], 0.1);

    let transcript = out.context.transcript();
    assert!(transcript.contains("Observation from `periodogram`"));
    assert!(transcript.contains("dominant peak: yes"), "{transcript}");
    // every request carries the full history so far
    let calls = client.calls();
    assert_eq!(calls.len(), 4);
    for w in calls.windows(2) {
        assert!(w[1].len() > w[0].len());
    }
}

#[test]
fn recorded_trace_replays_identically() {
    let ds = dataset();
    let refs = lin_reference(&ds);
    let dir = tempfile::tempdir().unwrap();
    let recorder = RecordingClient::new(ScriptedClient::new(TRACE), dir.path());
    let first = run_agent_loop(&recorder, &refs, &ds, &AgentSettings::default()).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 4);

    let replay = FixtureClient::new(dir.path());
    let second = run_agent_loop(&replay, &refs, &ds, &AgentSettings::default()).unwrap();
    assert_eq!(second.steps, 4);
    assert_eq!(first.candidates, second.candidates);
    assert_eq!(first.context.transcript(), second.context.transcript());
}

#[test]
fn garbage_replies_fall_back_to_greedy() {
    let ds = dataset();
    let refs = lin_reference(&ds);
    let client = ScriptedClient::new(vec!["next kernels: [\"RQ ???\"]"; MAX_STRIKES]);
    let out = run_agent_loop(&client, &refs, &ds, &AgentSettings::default()).unwrap();
    assert_eq!(out.fallback, Some(FallbackReason::ParseFailures));
    assert_eq!(out.steps, MAX_STRIKES);
    let expected: Vec<_> = neighbors(&parse("LIN").unwrap());
    let got: Vec<_> = out.candidates.iter().map(|c| c.expr.clone()).collect();
    assert_eq!(got, expected);
}

#[test]
fn an_analysis_reply_resets_the_strike_count() {
    let ds = dataset();
    let refs = lin_reference(&ds);
    let client = ScriptedClient::new([
        "next kernels: [\"RQ\"]",
        "next kernels: [\"RQ\"]",
        "Thinking about the structure.",
        "next kernels: [\"RQ\"]",
        "next kernels: [\"SE\"]",
    ]);
    let out = run_agent_loop(&client, &refs, &ds, &AgentSettings::default()).unwrap();
    assert_eq!(out.fallback, None);
    assert_eq!(out.steps, 5);
}

#[test]
fn budget_and_client_errors_fall_back() {
    let ds = dataset();
    let refs = lin_reference(&ds);
    let settings = AgentSettings { max_steps: 2, ..AgentSettings::default() };
    let out = run_agent_loop(&ScriptedClient::new(["hmm", "hmm", "hmm"]), &refs, &ds, &settings).unwrap();
    assert_eq!(out.fallback, Some(FallbackReason::BudgetExhausted));
    assert_eq!(out.steps, 2);

    let out = run_agent_loop(&ScriptedClient::new(Vec::<String>::new()), &refs, &ds, &AgentSettings::default()).unwrap();
    assert!(matches!(out.fallback, Some(FallbackReason::ClientError(_))));
    assert!(!out.candidates.is_empty());
}

#[test]
fn tool_failures_are_reported_back_not_fatal() {
    let ds = dataset();
    let refs = lin_reference(&ds);
    let client = ScriptedClient::new(["```tool\nresidual_stats model=7\n```", "next kernels: [SE]"]);
    let out = run_agent_loop(&client, &refs, &ds, &AgentSettings::default()).unwrap();
    assert_eq!(out.steps, 2);
    assert!(out.context.transcript().contains("out of range"));
}

#[test]
fn residual_periodogram_finds_the_generating_period() {
    let ds = dataset();
    let refs = lin_reference(&ds);
    let (x, r) = vicsearch_core::proposer::tools::gp_residuals(&refs[0].model, &ds).unwrap();
    let p = periodogram(&x, &r).unwrap();
    assert!(p.dominant);
    let (period, _) = p.top_periods[0];
    assert!((period - 0.1).abs() / 0.1 < 0.05, "{period}");
}

#[test]
fn proposers_through_the_common_interface() {
    let ds = dataset();
    let refs = lin_reference(&ds);
    let request = ProposalRequest { round: 2, references: &refs, dataset: &ds, plot_dir: None };

    let greedy = GreedyProposer { limit: 5 }.propose(&request).unwrap();
    assert_eq!(greedy.candidates.len(), 5);

    let mut scripted = ScriptedProposer::new(vec![vec!["SE".into()], vec!["PER + SE".into()]]);
    assert_eq!(scripted.propose(&request).unwrap().candidates[0].expr.canonical_text(), "PER + SE");
    let late = ProposalRequest { round: 3, ..request.clone() };
    assert_eq!(scripted.propose(&late), Err(ProposerError::Exhausted { round: 3 }));

    let client: Arc<dyn ChatBackend> = Arc::new(ScriptedClient::new(TRACE));
    let mut agent = AgentProposer { client, settings: AgentSettings::default() };
    let p = agent.propose(&request).unwrap();
    assert_eq!(p.steps, 4);
    assert!(p.transcript.unwrap().contains("next kernels:"));
}
