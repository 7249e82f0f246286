mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use tasktree::service::{ServiceError, ServiceSettings, SessionService};
use tasktree::store::{load_session, EventStore};
use tasktree::Gateway;
use tasktree_core::{EventBody, NodeId, NodeStatus, TemplateKind};

#[tokio::test]
async fn create_plan_trip() {
    let provider = tokyo();
    let svc = service(provider.clone());
    let state = svc.create_session(PLAN_TRIP, None).await.unwrap();
    let titles: Vec<&str> = state.children().iter().map(|c| c.title()).collect();
    assert!(titles.contains(&"Decide on dates and duration"));
    assert!(titles.contains(&"Make hotel and flight arrangements"));
    assert!(titles.contains(&"Check travel documents"));
    assert_eq!(state.root().status(), NodeStatus::Ready);

    let prompt = &provider.transcript()[0].prompt;
    assert!(prompt.contains("Personalization Cue: None\nMy Context: None"));
}

#[tokio::test]
async fn create_with_context_reaches_prompt() {
    let provider = tokyo();
    let svc = service(provider.clone());
    let state = svc.create_session(BOOK_FLIGHT, Some(TODDLER)).await.unwrap();
    assert_eq!(state.context().revision, 1);
    assert!(provider.transcript()[0]
        .prompt
        .contains("My Context: I am traveling with a toddler"));
    assert!(state
        .children()
        .iter()
        .any(|c| c.title().contains("child-friendly facilities")));
}

#[tokio::test]
async fn blank_query_rejected_without_calls() {
    let provider = tokyo();
    let svc = service(provider.clone());
    assert!(matches!(
        svc.create_session("  ", None).await,
        Err(ServiceError::EmptyQuery)
    ));
    assert_eq!(provider.transcript_len(), 0);
    assert!(svc.session_ids().is_empty());
}

const GARBAGE: &str = r#"
version = 1
[[rule]]
kind = "decompose"
response = "I'd be happy to help with that!"
"#;

#[tokio::test]
async fn decomposition_failure_after_one_retry() {
    let provider = scripted(GARBAGE);
    let svc = service(provider.clone());
    let err = svc.create_session("q", None).await.unwrap_err();
    let ServiceError::DecompositionFailed { state, .. } = err else {
        panic!("expected DecompositionFailed, got {err:?}");
    };
    assert_eq!(provider.transcript_len(), 2);
    assert_eq!(state.root().status(), NodeStatus::Error);
    assert!(state.root().error_detail().is_some());
    // the session still exists and its log replays to the same state
    let live = svc.get_session(state.session_id()).unwrap();
    assert_eq!(*state, live);
    let events = svc.events(state.session_id()).unwrap();
    assert_eq!(tasktree_core::replay(&events).unwrap(), live);
}

#[tokio::test]
async fn malformed_first_reply_recovers_on_retry() {
    let provider = scripted(
        r#"
version = 1
[[rule]]
kind = "decompose"
response = '{"sub_problems": ["a", "b",]}'
times = 1
[[rule]]
kind = "decompose"
response = '{"sub_problems": ["a", "b"]}'
"#,
    );
    let svc = service(provider.clone());
    let state = svc.create_session("q", None).await.unwrap();
    assert_eq!(state.children().len(), 2);
    assert_eq!(provider.transcript_len(), 2);
}

#[tokio::test]
async fn expand_then_cache() {
    let provider = tokyo();
    let svc = service(provider.clone());
    let s = svc.create_session(PLAN_TRIP, None).await.unwrap();
    let best_time = s
        .children()
        .iter()
        .find(|c| c.title() == "Check the best time to visit")
        .unwrap()
        .id()
        .clone();
    let first = svc.expand_node(s.session_id(), &best_time, false).await.unwrap();
    assert!(!first.cached);
    for want in ["late August", "September", "early October"] {
        assert!(first.option_set.options.iter().any(|o| o == want));
    }
    assert_eq!(first.option_set.recommended, "late September");
    assert_eq!(first.node.option_count, Some(6));

    let calls = provider.transcript_len();
    let again = svc.expand_node(s.session_id(), &best_time, false).await.unwrap();
    assert!(again.cached);
    assert_eq!(again.option_set, first.option_set);
    assert_eq!(provider.transcript_len(), calls);

    let forced = svc.expand_node(s.session_id(), &best_time, true).await.unwrap();
    assert!(!forced.cached);
    assert_eq!(provider.transcript_len(), calls + 1);
}

#[tokio::test]
async fn options_prompt_bindings() {
    let provider = tokyo();
    let svc = service(provider.clone());
    let s = svc.create_session(BOOK_FLIGHT, None).await.unwrap();
    let sid = s.session_id();
    svc.expand_node(sid, &child(1), false).await.unwrap();
    svc.set_node_selection(sid, &child(1), [0].into_iter().collect()).unwrap();
    svc.expand_node(sid, &child(2), false).await.unwrap();
    let prompt = provider.transcript().pop().unwrap().prompt;
    assert!(prompt.starts_with("User: Choose departure dates and flexibility\n"));
    assert!(prompt.ends_with("User: Choose departure dates and flexibility\nOutput:"));
    assert!(prompt.contains("The user wants to: I want to book a flight to Tokyo\n"));
    assert!(prompt.contains(
        "Personalization Cue: - Compare airlines and fares to Tokyo: Japan Airlines JL44 nonstop from London Heathrow, about 14 hours\nMy Context: None"
    ));
}

#[tokio::test]
async fn expand_guards() {
    let svc = service(tokyo());
    let s = svc.create_session(PLAN_TRIP, None).await.unwrap();
    let sid = s.session_id();
    assert!(matches!(
        svc.expand_node(sid, &NodeId::root(), false).await,
        Err(ServiceError::Model(tasktree_core::ModelError::NotExpandable(_)))
    ));
    assert!(matches!(
        svc.expand_node(sid, &child(9), false).await,
        Err(ServiceError::Model(tasktree_core::ModelError::UnknownNode(_)))
    ));
    assert!(matches!(
        svc.expand_node("nope", &child(1), false).await,
        Err(ServiceError::UnknownSession(_))
    ));
}

#[tokio::test]
async fn expand_failure_marks_node() {
    let provider = scripted(
        r#"
version = 1
[[rule]]
kind = "decompose"
response = '{"sub_problems": ["a", "b"]}'
[[rule]]
kind = "options"
response = "no json here"
"#,
    );
    let svc = service(provider.clone());
    let s = svc.create_session("q", None).await.unwrap();
    let err = svc.expand_node(s.session_id(), &child(1), false).await.unwrap_err();
    assert!(matches!(err, ServiceError::GenerationFailed { .. }));
    assert_eq!(provider.transcript_len(), 3);
    let state = svc.get_session(s.session_id()).unwrap();
    let node = state.node(&child(1)).unwrap();
    assert_eq!(node.status(), NodeStatus::Error);
    assert!(node.error_detail().is_some());
    let last = svc.events(s.session_id()).unwrap().pop().unwrap();
    assert_eq!(last.body.kind(), "NodeErrored");
}

#[tokio::test]
async fn low_option_count_retried_once() {
    let provider = scripted(
        r#"
version = 1
[[rule]]
kind = "decompose"
response = '{"sub_problems": ["a"]}'
[[rule]]
kind = "options"
response = '{"recommended": "r", "options": ["x", "y", "z"]}'
"#,
    );
    let svc = service(provider.clone());
    let s = svc.create_session("q", None).await.unwrap();
    let exp = svc.expand_node(s.session_id(), &child(1), false).await.unwrap();
    assert_eq!(provider.transcript_len(), 3);
    assert!(exp.option_set.is_low());
    assert_eq!(exp.node.status, NodeStatus::Ready);
}

#[tokio::test]
async fn selection_replacement_and_atomicity() {
    let svc = service(tokyo());
    let s = svc.create_session(BOOK_FLIGHT, None).await.unwrap();
    let sid = s.session_id();
    svc.expand_node(sid, &child(1), false).await.unwrap();

    let v = svc.set_node_selection(sid, &child(1), [0].into_iter().collect()).unwrap();
    assert_eq!(v.selected, [0].into_iter().collect());
    svc.set_node_selection(sid, &child(1), [1, 2].into_iter().collect()).unwrap();
    let v = svc.set_node_selection(sid, &child(1), [2].into_iter().collect()).unwrap();
    assert_eq!(v.selected, [2].into_iter().collect());

    let before = svc.events(sid).unwrap().len();
    let state_before = svc.get_session(sid).unwrap();
    let err = svc
        .set_node_selection(sid, &child(1), [99].into_iter().collect())
        .unwrap_err();
    assert_eq!(err.code(), "index_out_of_range");
    let err = svc
        .set_node_selection(sid, &child(2), [0].into_iter().collect())
        .unwrap_err();
    assert_eq!(err.code(), "options_not_ready");
    assert_eq!(svc.events(sid).unwrap().len(), before);
    assert_eq!(svc.get_session(sid).unwrap(), state_before);
}

#[tokio::test]
async fn preferences_regenerate_children() {
    let provider = tokyo();
    let svc = service(provider.clone());
    let s = svc.create_session(BOOK_FLIGHT, None).await.unwrap();
    let sid = s.session_id();
    svc.expand_node(sid, &child(1), false).await.unwrap();
    svc.set_node_selection(sid, &child(1), [0].into_iter().collect()).unwrap();

    let mark = provider.transcript_len();
    let state = svc.update_preferences(sid, TODDLER).await.unwrap();
    assert_eq!(state.context().revision, 1);
    assert_eq!(state.generation(), 2);
    assert!(state
        .children()
        .iter()
        .any(|c| c.title() == "Investigate child-friendly facilities on potential flights"));
    // old selection fed the regeneration prompt, then went away with its node
    let prompt = &provider.transcript()[mark].prompt;
    assert!(prompt.contains(
        "Personalization Cue: - Compare airlines and fares to Tokyo: Japan Airlines JL44 nonstop from London Heathrow, about 14 hours"
    ));
    assert_eq!(state.selection_digest().to_string(), "None");

    let kinds: Vec<&str> = svc.events(sid).unwrap().iter().map(|e| e.body.kind()).collect();
    assert_eq!(&kinds[kinds.len() - 2..], ["PreferencesUpdated", "SubtasksGenerated"]);
}

#[tokio::test]
async fn clearing_preferences_still_regenerates() {
    let provider = tokyo();
    let svc = service(provider.clone());
    let s = svc.create_session(BOOK_FLIGHT, Some(TODDLER)).await.unwrap();
    let state = svc.update_preferences(s.session_id(), "").await.unwrap();
    assert_eq!(state.context().revision, 2);
    assert!(state.context().text.is_empty());
    assert_eq!(provider.transcript_len(), 2);
    assert!(provider.transcript()[1].prompt.contains("My Context: None"));
    assert!(state.children().iter().any(|c| c.title() == "Compare airlines and fares to Tokyo"));
}

#[tokio::test]
async fn preference_failure_keeps_children() {
    let provider = scripted(
        r#"
version = 1
[[rule]]
kind = "decompose"
contains = ["My Context: None"]
response = '{"sub_problems": ["a", "b"]}'
[[rule]]
kind = "decompose"
fail = "refusal"
response = "service unavailable"
"#,
    );
    let svc = service(provider.clone());
    let s = svc.create_session("q", None).await.unwrap();
    let err = svc.update_preferences(s.session_id(), TODDLER).await.unwrap_err();
    let ServiceError::DecompositionFailed { state, .. } = err else {
        panic!("expected DecompositionFailed");
    };
    assert_eq!(state.context().revision, 1);
    assert_eq!(state.context().text, TODDLER);
    assert_eq!(state.children(), s.children());
    assert_eq!(state.root().status(), NodeStatus::Ready);
    assert!(state.root().warning().unwrap().contains("service unavailable"));
    // refusals are not retried
    assert_eq!(provider.transcript_len(), 2);
    let events = svc.events(s.session_id()).unwrap();
    assert_eq!(tasktree_core::replay(&events).unwrap(), *state);
}

#[tokio::test]
async fn summarize_sentinels_and_passthrough() {
    let text = "  Line one.\n\n  * bullet {with braces}  \n";
    let provider = scripted(&format!(
        r#"
version = 1
[[rule]]
kind = "decompose"
response = '{{"sub_problems": ["a"]}}'
[[rule]]
kind = "summarize"
response = '''{text}'''
"#
    ));
    let svc = service(provider.clone());
    let s = svc.create_session("q", None).await.unwrap();
    let out = svc.summarize(s.session_id()).await.unwrap();
    assert_eq!(out.summary, text);
    assert_eq!(out.state.summary(), Some(text));
    assert_eq!(out.state.root().status(), NodeStatus::Ready);
    let prompt = &provider.transcript()[1].prompt;
    assert!(prompt.contains("Personalization: None\nContext: None"));
}

#[tokio::test]
async fn summarize_carries_context_and_selection() {
    let provider = tokyo();
    let svc = service(provider.clone());
    let s = svc.create_session(BOOK_FLIGHT, Some(TODDLER)).await.unwrap();
    let sid = s.session_id();
    svc.expand_node(sid, &child(2), false).await.unwrap();
    svc.set_node_selection(sid, &child(2), [0].into_iter().collect()).unwrap();
    svc.summarize(sid).await.unwrap();
    let captured = provider.transcript().pop().unwrap();
    assert_eq!(captured.kind, TemplateKind::Summarize);
    assert!(captured.prompt.contains("Context: I am traveling with a toddler"));
    assert!(captured.prompt.contains(
        "- Investigate child-friendly facilities on potential flights: Reserve a bassinet seat on a Japan Airlines long-haul flight"
    ));
}

#[tokio::test]
async fn summarize_failure_appends_nothing() {
    let provider = scripted(
        r#"
version = 1
[[rule]]
kind = "decompose"
response = '{"sub_problems": ["a"]}'
"#,
    );
    let svc = service(provider.clone());
    let s = svc.create_session("q", None).await.unwrap();
    let before = svc.events(s.session_id()).unwrap();
    let err = svc.summarize(s.session_id()).await.unwrap_err();
    assert_eq!(err.code(), "generation_failed");
    assert_eq!(svc.events(s.session_id()).unwrap(), before);
    assert_eq!(svc.get_session(s.session_id()).unwrap(), s);
}

#[tokio::test]
async fn root_operations_are_exclusive() {
    let provider = scripted(
        r#"
version = 1
[[rule]]
kind = "decompose"
response = '{"sub_problems": ["a"]}'
[[rule]]
kind = "summarize"
response = "done"
latency_ms = 300
"#,
    );
    let svc = Arc::new(service(provider));
    let s = svc.create_session("q", None).await.unwrap();
    let sid = s.session_id().to_string();
    let bg = {
        let svc = svc.clone();
        let sid = sid.clone();
        tokio::spawn(async move { svc.summarize(&sid).await })
    };
    tokio::time::sleep(Duration::from_millis(50)).await;
    let busy = svc.update_preferences(&sid, "x").await.unwrap_err();
    assert_eq!(busy.code(), "busy");
    assert_eq!(svc.summarize(&sid).await.unwrap_err().code(), "busy");
    assert_eq!(bg.await.unwrap().unwrap().summary, "done");
    // the rejected update left no trace
    assert_eq!(svc.get_session(&sid).unwrap().context().revision, 0);
}

#[tokio::test]
async fn regeneration_supersedes_inflight_expand() {
    let provider = scripted(
        r#"
version = 1
[[rule]]
kind = "decompose"
contains = ["My Context: None"]
response = '{"sub_problems": ["a", "b"]}'
[[rule]]
kind = "decompose"
response = '{"sub_problems": ["c", "d"]}'
[[rule]]
kind = "options"
response = '{"recommended": "r", "options": ["1", "2", "3", "4", "5"]}'
latency_ms = 300
"#,
    );
    let svc = Arc::new(service(provider));
    let s = svc.create_session("q", None).await.unwrap();
    let sid = s.session_id().to_string();
    let bg = {
        let svc = svc.clone();
        let sid = sid.clone();
        tokio::spawn(async move { svc.expand_node(&sid, &child(1), false).await })
    };
    tokio::time::sleep(Duration::from_millis(50)).await;
    svc.update_preferences(&sid, "new").await.unwrap();
    let err = bg.await.unwrap().unwrap_err();
    assert_eq!(err.code(), "superseded");
    let state = svc.get_session(&sid).unwrap();
    assert_eq!(state.child(1).unwrap().title(), "c");
    assert!(state.child(1).unwrap().option_set().is_none());
    assert_eq!(tasktree_core::replay(&svc.events(&sid).unwrap()).unwrap(), state);
}

#[tokio::test]
async fn gateway_timeout_becomes_node_error() {
    let provider = scripted(
        r#"
version = 1
[[rule]]
kind = "decompose"
response = '{"sub_problems": ["a"]}'
[[rule]]
kind = "options"
response = '{"recommended": "r", "options": ["1", "2", "3", "4", "5"]}'
latency_ms = 2000
"#,
    );
    let gateway = Gateway::new(provider).with_backoff(Duration::from_millis(1));
    let settings = ServiceSettings {
        timeout: Duration::from_millis(50),
        ..ServiceSettings::default()
    };
    let svc = SessionService::new(Arc::new(gateway), None, settings);
    let s = svc.create_session("q", None).await.unwrap();
    let err = svc.expand_node(s.session_id(), &child(1), false).await.unwrap_err();
    let ServiceError::GenerationFailed { detail, .. } = err else {
        panic!("expected GenerationFailed");
    };
    assert!(detail.contains("no reply within"), "{detail}");
}

#[tokio::test]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let provider = tokyo();
    let (sid, live) = {
        let svc = service_with(provider.clone(), Some(EventStore::open(dir.path()).unwrap()));
        let s = svc.create_session(BOOK_FLIGHT, None).await.unwrap();
        let sid = s.session_id().to_string();
        svc.expand_node(&sid, &child(1), false).await.unwrap();
        svc.set_node_selection(&sid, &child(1), [0, 3].into_iter().collect()).unwrap();
        (sid.clone(), svc.get_session(&sid).unwrap())
    };
    let store = EventStore::open(dir.path()).unwrap();
    let (from_disk, events) = load_session(&store.path_for(&sid)).unwrap();
    assert_eq!(from_disk, live);
    assert!(events.iter().all(|e| e.session_id == sid));

    let svc = service_with(provider, Some(store));
    assert_eq!(svc.load_existing().unwrap().0, 1);
    assert_eq!(svc.get_session(&sid).unwrap(), live);
    // and it keeps appending where it left off
    svc.set_node_selection(&sid, &child(1), [1].into_iter().collect()).unwrap();
    let (again, events) = load_session(&svc.store().unwrap().path_for(&sid)).unwrap();
    assert_eq!(again, svc.get_session(&sid).unwrap());
    assert_eq!(events.last().unwrap().seq, events.len() as u64);
    assert!(matches!(
        events.last().unwrap().body,
        EventBody::SelectionChanged { .. }
    ));
}
