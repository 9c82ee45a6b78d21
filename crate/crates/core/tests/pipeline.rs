use bumper_core::config::BumperConfig;
use bumper_core::fixtures;
use bumper_core::guidelines::{CheckVariant, Granularity, Verdict};
use bumper_core::llm::{LlmClient, MockResponse, MockRule, MockScript};
use bumper_core::pipeline::{AskOptions, Bumper, CheckClass, Thread};

const MATCH: &str = "Select the actions needed to answer the question";
const AGG: &str = "Answer the question using only the action results";
const CHAD: &str = "When should the next SIA be run in Chad?";

fn measles_config() -> (tempfile::TempDir, BumperConfig) {
    let dir = tempfile::tempdir().unwrap();
    let path = fixtures::MEASLES.write_to(dir.path(), false).unwrap();
    (dir, BumperConfig::load(path).unwrap())
}

fn fixture(fx: fixtures::Fixture) -> (tempfile::TempDir, Bumper) {
    let dir = tempfile::tempdir().unwrap();
    let path = fx.write_to(dir.path(), false).unwrap();
    (dir, Bumper::load(path, None).unwrap())
}

fn select(json: &str) -> MockRule {
    MockRule::contains([MATCH], vec![MockResponse::new(json, 1.0)])
}

fn evidence(text: &str) -> MockRule {
    MockRule::contains([AGG], vec![MockResponse::new(text, 1.0)])
}

#[test]
fn rugby_second_worst_attack() {
    let (_dir, bumper) = fixture(fixtures::RUGBY);
    let a = bumper.answer(&[], "Which team has the second worst attack?", AskOptions::default());
    assert_eq!(a.check_class, CheckClass::CheckFlag, "{a:?}");
    assert_eq!(a.actions_used, ["attack_statistic"]);
    assert!(a.evidence.contains("Wales"));
    let probes = a.outcome.unwrap().element_probes.unwrap();
    assert_eq!(probes.len(), 3);
}

#[test]
fn methodology_question_uses_retrieval() {
    let (_dir, bumper) = fixture(fixtures::MEASLES);
    let a = bumper.answer(&[], "What data does the measles model use?", AskOptions::default());
    assert_eq!(a.actions_used, ["methodology_retrieval"]);
    assert_eq!(a.check_class, CheckClass::CheckFlag);
}

#[test]
fn whole_variant_scores_the_token_probability() {
    let (_dir, bumper) = fixture(fixtures::MEASLES);
    let opts = AskOptions { variant: Some(CheckVariant::new(Granularity::Whole, true)), ..Default::default() };
    let a = bumper.answer(&[], CHAD, opts);
    let outcome = a.outcome.unwrap();
    assert_eq!(outcome.verdict, Verdict::Pass);
    assert!((outcome.score - 0.807).abs() < 1e-12);
    assert_eq!(a.diagnostics["variant"], "whole-explain");
}

#[test]
fn per_element_score_follows_the_scripted_probabilities() {
    let (_dir, bumper) = fixture(fixtures::MEASLES);
    let a = bumper.answer(&[], CHAD, AskOptions::default());
    // criteria all 0.95; topics: methods "no" at 0.75, susceptibility "no" at 0.6, others "yes" at 0.95
    let expected = 0.95f64.powi(3) * (1.0 - 0.75 * 0.05 * 0.6 * 0.05);
    assert!((a.score().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn check_failure_keeps_the_evidence_in_diagnostics() {
    let (_dir, config) = measles_config();
    let script = MockScript::default()
        .with_rule(select(r#"{"actions": ["sia_months"]}"#))
        .with_rule(evidence("Some evidence."));
    let bumper = Bumper::new(config, LlmClient::mock(script)).unwrap();
    // the selection has no country argument, so the lookup is a domain error
    let a = bumper.answer(&[], CHAD, AskOptions::default());
    assert_eq!(a.check_class, CheckClass::Error);
    assert!(a.evidence.contains("Missing argument country"), "{}", a.evidence);

    let (_dir, config) = measles_config();
    let script = MockScript::default()
        .with_rule(select(r#"{"actions": [{"name": "sia_months", "args": {"country": "Chad"}}]}"#))
        .with_rule(evidence("Some evidence."));
    let bumper = Bumper::new(config, LlmClient::mock(script)).unwrap();
    let a = bumper.answer(&[], CHAD, AskOptions::default());
    assert_eq!(a.check_class, CheckClass::Error);
    assert!(a.outcome.is_none());
    assert_eq!(a.diagnostics["unchecked_evidence"], "Some evidence.");
}

#[test]
fn unparsable_verdict_is_a_check_fail() {
    let (_dir, config) = measles_config();
    let script = MockScript::default()
        .with_rule(select(r#"{"actions": [{"name": "sia_months", "args": {"country": "Chad"}}]}"#))
        .with_rule(evidence("July to October."))
        .with_rule(MockRule::contains(["Statement:"], vec![MockResponse::new("maybe so", 0.9)]));
    let bumper = Bumper::new(config, LlmClient::mock(script)).unwrap();
    let a = bumper.answer(&[], CHAD, AskOptions::default());
    assert_eq!(a.check_class, CheckClass::CheckFail);
    assert_eq!(a.score(), Some(0.0));
    assert_eq!(a.diagnostics["note"], "unparsable verdict");
}

#[test]
fn partial_action_failure_still_aggregates() {
    let (_dir, config) = measles_config();
    let script = MockScript::default()
        .with_rule(select(
            r#"{"actions": [{"name": "sia_months", "args": {"country": "Antarctica"}},
                            {"name": "sia_months", "args": {"country": "Chad"}}]}"#,
        ))
        .with_rule(MockRule::contains(
            [AGG, "Error: No data for Antarctica", "Recommended SIA months for Chad"],
            vec![MockResponse::new("Only Chad has data: July to October.", 1.0)],
        ))
        .with_rule(MockRule::contains(["Statement:"], vec![MockResponse::new("yes.", 0.9)]));
    let bumper = Bumper::new(config, LlmClient::mock(script)).unwrap();
    let a = bumper.answer(&[], "SIAs in Antarctica and Chad?", AskOptions::default());
    assert_eq!(a.check_class, CheckClass::CheckFlag, "{a:?}");
    assert_eq!(a.evidence, "Only Chad has data: July to October.");
}

#[test]
fn unparsable_selection_is_an_error() {
    let (_dir, config) = measles_config();
    let bumper = Bumper::new(config, LlmClient::mock(MockScript::default().with_rule(select("I think sia_months")))).unwrap();
    assert_eq!(bumper.answer(&[], CHAD, AskOptions::default()).check_class, CheckClass::Error);
}

#[test]
fn empty_query_is_rejected() {
    let (_dir, bumper) = fixture(fixtures::MEASLES);
    assert_eq!(bumper.answer(&[], "  ", AskOptions::default()).check_class, CheckClass::Error);
}

#[test]
fn thread_context_reaches_the_prompts() {
    let (_dir, config) = measles_config();
    let script = MockScript::default()
        .with_rule(MockRule::contains(
            [MATCH, "Conversation so far:", "User: When should the next SIA be run in Chad?", "Question: And in Pakistan?"],
            vec![MockResponse::new(r#"{"actions": [{"name": "sia_months", "args": {"country": "Pakistan"}}]}"#, 1.0)],
        ))
        .with_rule(select(r#"{"actions": [{"name": "sia_months", "args": {"country": "Chad"}}]}"#))
        .with_rule(MockRule::contains([AGG, "Conversation so far:"], vec![MockResponse::new("Pakistan: July and August.", 1.0)]))
        .with_rule(evidence("Chad: July to October."))
        .with_rule(MockRule::contains(["Statement:"], vec![MockResponse::new("yes.", 0.9)]));
    let bumper = Bumper::new(config, LlmClient::mock(script)).unwrap();
    let mut thread = Thread::new();
    let first = bumper.ask(&mut thread, CHAD);
    let second = bumper.ask(&mut thread, "And in Pakistan?");
    assert_eq!(first.evidence, "Chad: July to October.");
    assert_eq!(second.evidence, "Pakistan: July and August.");
    assert_eq!(thread.turns().len(), 2);
    assert!(thread.turns()[1].answered_at >= thread.turns()[1].asked_at);
}

#[test]
fn answers_are_deterministic_under_the_mock() {
    let (_dir, bumper) = fixture(fixtures::MEASLES);
    let a = bumper.answer(&[], CHAD, AskOptions::default());
    let b = bumper.answer(&[], CHAD, AskOptions::default());
    assert_eq!(a, b);
}
