mod common;

use common::*;
use irag_core::agent::{read_trajectories, run_agent, trajectory_json, AgentConfig, ScriptedClient, FINALIZE_PROMPT};
use irag_core::agent::{Role, Trajectory};
use irag_core::engine::SessionState;
use irag_core::eval::{render_report, run_benchmark, ReportFormat, RunnerConfig};
use irag_core::training::{export_sft, filter_trajectories, reward, validate_trajectory, write_sft};

#[test]
fn toy_benchmark_matches_golden_log() {
    let run = toy_benchmark(2);
    golden_matches(&trajectory_log(&run)).unwrap();
    assert_eq!(run.report.overall.em, 100.0);
    assert_eq!(run.report.overall.f1, 100.0);
    assert_eq!(run.report.overall.errors, 0);
}

#[test]
fn worker_count_does_not_change_the_log() {
    assert_eq!(trajectory_log(&toy_benchmark(1)), trajectory_log(&toy_benchmark(4)));
}

#[test]
fn report_breaks_down_by_dataset() {
    let report = toy_benchmark(2).report;
    let names: Vec<&str> = report.datasets.iter().map(|d| d.dataset.as_str()).collect();
    assert_eq!(names, ["toy_multihop", "toy_single"]);
    assert_eq!(report.datasets[1].num_examples, 4);
    let run = toy_benchmark(1);
    let turns: usize = run.outcomes.iter().map(|o| o.turns).sum();
    assert!((report.overall.avg_turns - turns as f64 / 5.0).abs() < 1e-12);
    let text = render_report(&report, ReportFormat::Csv).unwrap();
    assert!(text.lines().next().unwrap().starts_with("dataset,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn never_answering_agent_stops_after_cap_plus_one() {
    let engine = toy_engine();
    let client = stubborn_client();
    let traj = run_agent("Who knows?", &client, &engine, SessionState::default(), &AgentConfig::default()).unwrap();
    assert_eq!(traj.steps.len(), 8);
    assert!(traj.steps[..7].iter().all(|s| !s.forced));
    assert!(traj.steps[7].forced);
    assert_eq!(traj.final_answer, None);
    let requests = client.requests();
    assert_eq!(requests.len(), 8);
    let last = requests.last().unwrap();
    assert!(last.tools.is_none());
    assert_eq!(last.messages.last().unwrap().content, FINALIZE_PROMPT);
    assert_eq!(reward(&traj, &["x".into()]).total, -1);
}

#[test]
fn failed_episodes_score_zero_without_stopping_the_batch() {
    let engine = toy_engine();
    let mut dataset = toy_dataset();
    dataset.truncate(2);
    // Only the first question has a script; the second one errors out.
    let client = ScriptedClient::keyed([(
        "released first".to_string(),
        vec!["<think>Known.</think>\nThe Jaws of Death".to_string()],
    )]);
    let run = run_benchmark(
        &dataset,
        &engine,
        &client,
        &SessionState::default(),
        &RunnerConfig::Agent(AgentConfig::default()),
        2,
    )
    .unwrap();
    assert_eq!(run.outcomes[0].em, 1.0);
    assert_eq!(run.outcomes[1].em, 0.0);
    assert!(run.outcomes[1].error.as_deref().unwrap().contains("no script matches"));
    assert_eq!(run.report.overall.em, 50.0);
    assert_eq!(run.report.overall.errors, 1);
}

#[test]
fn trajectories_survive_serialization() {
    let run = toy_benchmark(2);
    let trajs: Vec<Trajectory> = run.trajectories.into_iter().map(Option::unwrap).collect();
    let text: String = trajs.iter().map(|t| format!("{}\n", trajectory_json(t))).collect();
    assert_eq!(read_trajectories(&text).unwrap(), trajs);
}

#[test]
fn sft_export_of_filtered_toy_runs() {
    let run = toy_benchmark(2);
    let golds = toy_dataset();
    let mut pairs: Vec<(Trajectory, Vec<String>)> =
        run.trajectories.into_iter().zip(&golds).map(|(t, ex)| (t.unwrap(), ex.answers.clone())).collect();
    // A wrong answer and an invalid run must be filtered out.
    let mut wrong = pairs[1].0.clone();
    wrong.final_answer = Some("Steven Spielberg".into());
    pairs.push((wrong, vec!["William Grefe".into()]));
    let stubborn =
        run_agent("Who knows?", &stubborn_client(), &toy_engine(), SessionState::default(), &AgentConfig::default())
            .unwrap();
    pairs.push((stubborn, vec!["x".into()]));

    let kept = filter_trajectories(&pairs);
    assert_eq!(kept.len(), 5);
    let mut records = Vec::new();
    for (traj, (_, gold)) in kept.iter().zip(&pairs) {
        assert!(validate_trajectory(traj).valid);
        assert_eq!(reward(traj, gold).total, 1);
        let rec = export_sft(traj).unwrap();
        assert_eq!(rec.messages.len(), rec.loss_mask.len());
        for (m, &mask) in rec.messages.iter().zip(&rec.loss_mask) {
            if m.content.contains("<tool_response>") {
                assert!(!mask);
            }
            assert_eq!(mask, m.role == Role::Assistant && !m.content.contains("<tool_response>"));
        }
        let assistant: Vec<&str> =
            rec.messages.iter().filter(|m| m.role == Role::Assistant).map(|m| m.content.as_str()).collect();
        let steps: Vec<&str> = traj.steps.iter().map(|s| s.assistant.as_str()).collect();
        assert_eq!(assistant, steps);
        records.push(rec);
    }
    let mut out = Vec::new();
    write_sft(&mut out, &records).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 5);
}
