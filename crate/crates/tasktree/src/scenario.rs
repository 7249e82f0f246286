//! Scripted end-to-end scenarios.
//!
//! A scenario file names a provider script and lists API-level steps, each
//! with optional expectations. Children are addressed by 1-based position
//! in the tree as it stands when the step runs.
//!
//! ```toml
//! version = 1
//! name = "toddler flight"
//! script = "tokyo.script.toml"      # relative to this file
//! check_propagation = true          # default
//!
//! [[step]]
//! action = "create"                 # create | expand | select | preferences | summarize
//! query = "I want to book a flight to Tokyo"
//! [step.expect]
//! children_min = 3
//! prompt_contains = ["My Context: None"]
//! ```
//!
//! With `check_propagation`, every prompt sent during a step must contain the
//! preference text in force for that step and the text of every option that
//! was selected before it.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Deserialize;
use tasktree_core::{NodeId, SessionEvent, SessionState};
use thiserror::Error;

use crate::gateway::Gateway;
use crate::scripted::{Captured, ScriptedProvider};
use crate::service::{ServiceError, ServiceSettings, SessionService};
use crate::store::EventStore;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
#[error("invalid scenario: {0}")]
pub struct ScenarioInvalid(pub String);

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum Action {
    Create {
        query: String,
        #[serde(default)]
        user_context: Option<String>,
    },
    Expand {
        child: usize,
        #[serde(default)]
        force: bool,
    },
    Select {
        child: usize,
        indices: BTreeSet<usize>,
    },
    Preferences {
        text: String,
    },
    Summarize,
}

impl Action {
    pub fn label(&self) -> &'static str {
        match self {
            Action::Create { .. } => "create",
            Action::Expand { .. } => "expand",
            Action::Select { .. } => "select",
            Action::Preferences { .. } => "preferences",
            Action::Summarize => "summarize",
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    pub children_min: Option<usize>,
    pub children_max: Option<usize>,
    pub child_title_contains: Option<String>,
    #[serde(default)]
    pub prompt_contains: Vec<String>,
    #[serde(default)]
    pub prompt_excludes: Vec<String>,
    /// Selectable entries, recommendation included.
    pub option_count: Option<usize>,
    #[serde(default)]
    pub options_contain: Vec<String>,
    pub selected: Option<BTreeSet<usize>>,
    pub summary_contains: Option<String>,
    pub gateway_calls: Option<usize>,
    /// Error code the step must fail with.
    pub error: Option<String>,
    pub context_revision: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Step {
    #[serde(flatten)]
    pub action: Action,
    #[serde(default)]
    pub expect: Expect,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u32,
    pub name: String,
    pub script: PathBuf,
    #[serde(default = "default_true")]
    pub check_propagation: bool,
    #[serde(default, rename = "step")]
    pub steps: Vec<Step>,
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioInvalid> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioInvalid(e.to_string()))?;
        if file.version != SCENARIO_VERSION {
            return Err(ScenarioInvalid(format!(
                "unsupported scenario version {} (expected {SCENARIO_VERSION})",
                file.version
            )));
        }
        if file.steps.is_empty() {
            return Err(ScenarioInvalid("scenario has no steps".into()));
        }
        if !matches!(file.steps[0].action, Action::Create { .. }) {
            return Err(ScenarioInvalid("first step must be `create`".into()));
        }
        if let Some(i) = file.steps[1..]
            .iter()
            .position(|s| matches!(s.action, Action::Create { .. }))
        {
            return Err(ScenarioInvalid(format!("step {} creates a second session", i + 2)));
        }
        Ok(file)
    }

    /// Load and resolve the script path against the scenario's directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioInvalid> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioInvalid(format!("cannot read {}: {e}", path.display())))?;
        let mut file = Self::from_toml(&text)?;
        if file.script.is_relative() {
            if let Some(dir) = path.parent() {
                file.script = dir.join(&file.script);
            }
        }
        Ok(file)
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub index: usize,
    pub action: &'static str,
    pub failures: Vec<String>,
    pub latency: Duration,
    pub prompts: Vec<Captured>,
}

impl StepReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Outcome without timing, stable across runs.
    pub fn outcome_line(&self) -> String {
        if self.passed() {
            format!("step {} {}: pass", self.index, self.action)
        } else {
            format!(
                "step {} {}: FAIL: {}",
                self.index,
                self.action,
                self.failures.join("; ")
            )
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub steps: Vec<StepReport>,
    pub final_state: Option<SessionState>,
    pub events: Vec<SessionEvent>,
    pub log_path: Option<PathBuf>,
    pub gateway_calls: usize,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(StepReport::passed)
    }

    pub fn outcome_lines(&self) -> Vec<String> {
        self.steps.iter().map(StepReport::outcome_line).collect()
    }

    pub fn prompts(&self) -> impl Iterator<Item = &Captured> {
        self.steps.iter().flat_map(|s| s.prompts.iter())
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", self.name)?;
        for step in &self.steps {
            writeln!(
                f,
                "{} ({:.1} ms)",
                step.outcome_line(),
                step.latency.as_secs_f64() * 1000.0
            )?;
        }
        let failed = self.steps.iter().filter(|s| !s.passed()).count();
        write!(
            f,
            "{}: {} step(s), {} failed, {} model call(s)",
            if failed == 0 { "PASS" } else { "FAIL" },
            self.steps.len(),
            failed,
            self.gateway_calls
        )
    }
}

/// What the propagation check expects every prompt of a step to carry.
struct Carried {
    context: String,
    options: Vec<String>,
}

fn carried(before: Option<&SessionState>, action: &Action) -> Carried {
    let context = match action {
        Action::Preferences { text } => text.clone(),
        Action::Create { user_context, .. } => user_context.clone().unwrap_or_default(),
        _ => before.map(|s| s.context().text.clone()).unwrap_or_default(),
    };
    let options = before
        .map(|s| {
            s.selection_digest()
                .entries
                .into_iter()
                .map(|e| e.option_text)
                .collect()
        })
        .unwrap_or_default();
    Carried { context, options }
}

fn child_id(state: Option<&SessionState>, position: usize) -> Result<NodeId, String> {
    state
        .and_then(|s| s.child(position))
        .map(|n| n.id().clone())
        .ok_or_else(|| format!("no child at position {position}"))
}

enum Outcome {
    State,
    Options(Vec<String>, BTreeSet<usize>),
    Selected(BTreeSet<usize>),
    Summary(String),
}

pub async fn run(
    scenario: &ScenarioFile,
    data_dir: Option<&Path>,
) -> Result<ScenarioReport, ScenarioInvalid> {
    let provider = Arc::new(
        ScriptedProvider::load(&scenario.script).map_err(|e| ScenarioInvalid(e.to_string()))?,
    );
    let store = data_dir
        .map(EventStore::open)
        .transpose()
        .map_err(|e| ScenarioInvalid(e.to_string()))?;
    let gateway = Arc::new(Gateway::new(provider.clone()).with_backoff(Duration::from_millis(1)));
    let service = SessionService::new(gateway, store, ServiceSettings::default());
    run_with(scenario, &service, &provider).await
}

/// Run against a caller-supplied service whose gateway talks to `provider`.
pub async fn run_with(
    scenario: &ScenarioFile,
    service: &SessionService,
    provider: &ScriptedProvider,
) -> Result<ScenarioReport, ScenarioInvalid> {
    let mut session_id: Option<String> = None;
    let mut reports = Vec::with_capacity(scenario.steps.len());

    for (i, step) in scenario.steps.iter().enumerate() {
        let before = session_id.as_deref().and_then(|id| service.get_session(id).ok());
        let carry = carried(before.as_ref(), &step.action);
        let mark = provider.transcript_len();
        let started = Instant::now();
        let result = execute(service, &mut session_id, before.as_ref(), &step.action).await;
        let latency = started.elapsed();
        let prompts: Vec<Captured> = provider.transcript().split_off(mark);
        let after = session_id.as_deref().and_then(|id| service.get_session(id).ok());

        let mut failures = Vec::new();
        check(&step.expect, &result, after.as_ref(), &prompts, &mut failures);
        if scenario.check_propagation {
            check_propagation(&carry, &prompts, &mut failures);
        }
        reports.push(StepReport {
            index: i + 1,
            action: step.action.label(),
            failures,
            latency,
            prompts,
        });
    }

    let final_state = session_id.as_deref().and_then(|id| service.get_session(id).ok());
    let events = session_id
        .as_deref()
        .and_then(|id| service.events(id).ok())
        .unwrap_or_default();
    let log_path = match (service.store(), &session_id) {
        (Some(store), Some(id)) => Some(store.path_for(id)),
        _ => None,
    };
    Ok(ScenarioReport {
        name: scenario.name.clone(),
        steps: reports,
        final_state,
        events,
        log_path,
        gateway_calls: provider.transcript_len(),
    })
}

async fn execute(
    service: &SessionService,
    session_id: &mut Option<String>,
    before: Option<&SessionState>,
    action: &Action,
) -> Result<Outcome, (String, String)> {
    let fail = |e: ServiceError| (e.code().to_string(), e.to_string());
    let sid = || {
        session_id
            .clone()
            .ok_or_else(|| ("no_session".to_string(), "no session yet".to_string()))
    };
    match action {
        Action::Create { query, user_context } => {
            let result = service.create_session(query, user_context.as_deref()).await;
            match result {
                Ok(state) => {
                    *session_id = Some(state.session_id().to_string());
                    Ok(Outcome::State)
                }
                Err(e) => {
                    if let ServiceError::DecompositionFailed { state, .. } = &e {
                        *session_id = Some(state.session_id().to_string());
                    }
                    Err(fail(e))
                }
            }
        }
        Action::Expand { child, force } => {
            let id = child_id(before, *child).map_err(|m| ("no_child".to_string(), m))?;
            let exp = service.expand_node(&sid()?, &id, *force).await.map_err(fail)?;
            Ok(Outcome::Options(
                exp.option_set.entries().map(str::to_string).collect(),
                exp.node.selected,
            ))
        }
        Action::Select { child, indices } => {
            let id = child_id(before, *child).map_err(|m| ("no_child".to_string(), m))?;
            let view = service
                .set_node_selection(&sid()?, &id, indices.clone())
                .map_err(fail)?;
            Ok(Outcome::Selected(view.selected))
        }
        Action::Preferences { text } => {
            service.update_preferences(&sid()?, text).await.map_err(fail)?;
            Ok(Outcome::State)
        }
        Action::Summarize => {
            let s = service.summarize(&sid()?).await.map_err(fail)?;
            Ok(Outcome::Summary(s.summary))
        }
    }
}

fn check(
    expect: &Expect,
    result: &Result<Outcome, (String, String)>,
    state: Option<&SessionState>,
    prompts: &[Captured],
    failures: &mut Vec<String>,
) {
    match (result, &expect.error) {
        (Err((code, _)), Some(want)) if code == want => {}
        (Err((code, msg)), Some(want)) => {
            failures.push(format!("expected error `{want}`, got `{code}`: {msg}"))
        }
        (Err((code, msg)), None) => failures.push(format!("unexpected error `{code}`: {msg}")),
        (Ok(_), Some(want)) => failures.push(format!("expected error `{want}`, step succeeded")),
        (Ok(_), None) => {}
    }

    if let Some(n) = expect.gateway_calls {
        if prompts.len() != n {
            failures.push(format!("expected {n} model call(s), saw {}", prompts.len()));
        }
    }
    for needle in &expect.prompt_contains {
        if prompts.is_empty() {
            failures.push(format!("expected a prompt containing {needle:?}, none sent"));
        }
        for p in prompts.iter().filter(|p| !p.prompt.contains(needle.as_str())) {
            failures.push(format!("{} prompt lacks {needle:?}", p.kind));
        }
    }
    for needle in &expect.prompt_excludes {
        for p in prompts.iter().filter(|p| p.prompt.contains(needle.as_str())) {
            failures.push(format!("{} prompt contains excluded {needle:?}", p.kind));
        }
    }

    let children = state.map(|s| s.children()).unwrap_or_default();
    if let Some(min) = expect.children_min {
        if children.len() < min {
            failures.push(format!("expected at least {min} children, have {}", children.len()));
        }
    }
    if let Some(max) = expect.children_max {
        if children.len() > max {
            failures.push(format!("expected at most {max} children, have {}", children.len()));
        }
    }
    if let Some(needle) = &expect.child_title_contains {
        if !children.iter().any(|c| c.title().contains(needle.as_str())) {
            let titles: Vec<&str> = children.iter().map(|c| c.title()).collect();
            failures.push(format!("no child title contains {needle:?}; titles: {titles:?}"));
        }
    }
    if let Some(rev) = expect.context_revision {
        let have = state.map(|s| s.context().revision);
        if have != Some(rev) {
            failures.push(format!("expected context revision {rev}, have {have:?}"));
        }
    }

    let options = match result {
        Ok(Outcome::Options(entries, _)) => Some(entries),
        _ => None,
    };
    if let Some(n) = expect.option_count {
        match options {
            Some(entries) if entries.len() == n => {}
            Some(entries) => failures.push(format!("expected {n} options, got {}", entries.len())),
            None => failures.push("expected options, step produced none".to_string()),
        }
    }
    for needle in &expect.options_contain {
        if !options.is_some_and(|o| o.iter().any(|e| e.contains(needle.as_str()))) {
            failures.push(format!("no option contains {needle:?}"));
        }
    }
    if let Some(want) = &expect.selected {
        let have = match result {
            Ok(Outcome::Selected(s)) | Ok(Outcome::Options(_, s)) => Some(s),
            _ => None,
        };
        if have != Some(want) {
            failures.push(format!("expected selection {want:?}, have {have:?}"));
        }
    }
    if let Some(needle) = &expect.summary_contains {
        match result {
            Ok(Outcome::Summary(text)) if text.contains(needle.as_str()) => {}
            Ok(Outcome::Summary(text)) => {
                failures.push(format!("summary lacks {needle:?}: {text:?}"))
            }
            _ => failures.push("expected a summary".to_string()),
        }
    }
    if let (Ok(Outcome::State), None) = (result, state) {
        failures.push("session missing after step".to_string());
    }
}

fn check_propagation(carry: &Carried, prompts: &[Captured], failures: &mut Vec<String>) {
    for p in prompts {
        if !carry.context.trim().is_empty() && !p.prompt.contains(carry.context.as_str()) {
            failures.push(format!(
                "{} prompt does not carry the current context {:?}",
                p.kind, carry.context
            ));
        }
        for option in &carry.options {
            if !p.prompt.contains(option.as_str()) {
                failures.push(format!("{} prompt does not carry selected option {option:?}", p.kind));
            }
        }
    }
}
