//! Session orchestration: decomposition, options, preferences, selection and
//! summary, on top of the gateway and the event store.
//!
//! Each session sits behind its own mutex. Model calls run with the lock
//! released and the affected node marked `generating`; the result is
//! committed after re-acquiring the lock. Every committed change is an event
//! appended to the session log before the in-memory state moves.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tasktree_core::{
    parse_options, parse_subtasks, render, EventBody, ExplorationNode, ModelError, NodeId,
    NodeStatus, OptionSet, ParseError, PromptBindings, PromptError, PromptTemplate,
    SessionEvent, SessionState, Severity, SubTaskList, TemplateKind, DEFAULT_MAX_DEPTH,
};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, GatewayRequest, DEFAULT_MAX_ATTEMPTS, DEFAULT_TIMEOUT};
use crate::store::{load_session, EventStore, LogError, LogWriter};

/// Milliseconds since the Unix epoch.
pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub type StatusObserver = Arc<dyn Fn(&StatusChange) + Send + Sync>;

fn system_clock() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A node's status as observed at one moment. `generation` tells apart
/// children that share an id across regenerations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatusChange {
    pub session_id: String,
    pub node_id: NodeId,
    pub generation: u32,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeStatusView {
    pub id: NodeId,
    pub title: String,
    pub status: NodeStatus,
    pub option_count: Option<usize>,
    pub selected: BTreeSet<usize>,
}

impl From<&ExplorationNode> for NodeStatusView {
    fn from(node: &ExplorationNode) -> Self {
        Self {
            id: node.id().clone(),
            title: node.title().to_string(),
            status: node.status(),
            option_count: node.option_set().map(OptionSet::selectable_len),
            selected: node.selected().clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Expansion {
    pub node: NodeStatusView,
    pub option_set: OptionSet,
    /// True when served from the node's stored options without a model call.
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub summary: String,
    pub state: SessionState,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0} is busy with another generation")]
    Busy(NodeId),
    #[error("sub-tasks were replaced while {0} was generating; result discarded")]
    Superseded(NodeId),
    #[error("decomposition failed: {detail}")]
    DecompositionFailed {
        detail: String,
        state: Box<SessionState>,
    },
    #[error("generation failed for {node}: {detail}")]
    GenerationFailed { node: NodeId, detail: String },
    #[error("storage failure: {0}")]
    Storage(#[from] LogError),
    #[error("prompt rendering failed: {0}")]
    Prompt(#[from] PromptError),
}

impl ServiceError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::EmptyQuery => "empty_query",
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::Model(e) => match e {
                ModelError::EmptyQuery => "empty_query",
                ModelError::InvalidMaxDepth(_) => "invalid_max_depth",
                ModelError::NoChildren => "no_children",
                ModelError::TooManyChildren(_) => "too_many_children",
                ModelError::BlankTitle(_) => "blank_title",
                ModelError::InvalidNodeId(_) => "invalid_node_id",
                ModelError::UnknownNode(_) => "unknown_node",
                ModelError::NotExpandable(_) => "not_expandable",
                ModelError::OptionsNotReady(_) => "options_not_ready",
                ModelError::IndexOutOfRange { .. } => "index_out_of_range",
            },
            ServiceError::Busy(_) => "busy",
            ServiceError::Superseded(_) => "superseded",
            ServiceError::DecompositionFailed { .. } => "decomposition_failed",
            ServiceError::GenerationFailed { .. } => "generation_failed",
            ServiceError::Storage(_) => "storage",
            ServiceError::Prompt(_) => "prompt",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceSettings {
    pub timeout: Duration,
    pub max_attempts: u32,
    pub max_depth: u8,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

struct LiveSession {
    state: SessionState,
    events: Vec<SessionEvent>,
    writer: LogWriter,
}

fn emit_diff(before: Option<&SessionState>, after: &SessionState, observer: &Option<StatusObserver>) {
    let Some(observer) = observer else { return };
    for node in after.nodes() {
        let prior = before
            .filter(|b| node.id().is_root() || b.generation() == after.generation())
            .and_then(|b| b.node(node.id()))
            .map(ExplorationNode::status);
        if prior != Some(node.status()) {
            observer(&StatusChange {
                session_id: after.session_id().to_string(),
                node_id: node.id().clone(),
                generation: if node.id().is_root() { 0 } else { after.generation() },
                status: node.status(),
            });
        }
    }
}

impl LiveSession {
    fn commit(
        &mut self,
        body: EventBody,
        now: u64,
        observer: &Option<StatusObserver>,
    ) -> Result<(), ServiceError> {
        let event = SessionEvent {
            seq: self.events.len() as u64 + 1,
            session_id: self.state.session_id().to_string(),
            timestamp: now,
            body,
        };
        let next = self.state.apply(&event)?;
        self.writer.append(&event)?;
        emit_diff(Some(&self.state), &next, observer);
        tracing::debug!(session = %event.session_id, seq = event.seq, kind = event.body.kind(), "event committed");
        self.state = next;
        self.events.push(event);
        Ok(())
    }

    /// In-memory status change that is not logged.
    fn set_transient(
        &mut self,
        id: &NodeId,
        status: NodeStatus,
        observer: &Option<StatusObserver>,
    ) -> Result<(), ServiceError> {
        let next = self.state.set_status(id, status)?;
        emit_diff(Some(&self.state), &next, observer);
        self.state = next;
        Ok(())
    }
}

enum Failure {
    Gateway(GatewayError),
    Parse(ParseError),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Gateway(e) => e.fmt(f),
            Failure::Parse(e) => e.fmt(f),
        }
    }
}

pub struct SessionService {
    gateway: Arc<Gateway>,
    store: Option<EventStore>,
    sessions: RwLock<HashMap<String, Arc<Mutex<LiveSession>>>>,
    clock: Clock,
    observer: Option<StatusObserver>,
    settings: ServiceSettings,
}

impl SessionService {
    /// Without a store, sessions live in memory only.
    pub fn new(gateway: Arc<Gateway>, store: Option<EventStore>, settings: ServiceSettings) -> Self {
        Self {
            gateway,
            store,
            sessions: RwLock::new(HashMap::new()),
            clock: Arc::new(system_clock),
            observer: None,
            settings,
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_observer(mut self, observer: StatusObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn store(&self) -> Option<&EventStore> {
        self.store.as_ref()
    }

    /// Load every log in the store. Corrupt logs are skipped and returned.
    pub fn load_existing(&self) -> Result<(usize, Vec<LogError>), LogError> {
        let Some(store) = &self.store else {
            return Ok((0, Vec::new()));
        };
        let mut loaded = 0;
        let mut bad = Vec::new();
        for path in store.list()? {
            match load_session(&path) {
                Ok((state, events)) => {
                    let id = state.session_id().to_string();
                    let writer = store.reopen(&id)?;
                    self.sessions
                        .write()
                        .expect("session map poisoned")
                        .insert(id, Arc::new(Mutex::new(LiveSession { state, events, writer })));
                    loaded += 1;
                }
                Err(e) => {
                    tracing::warn!(error = %e, "skipping unreadable session log");
                    bad.push(e);
                }
            }
        }
        Ok((loaded, bad))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sessions
            .read()
            .expect("session map poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>, ServiceError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    pub fn get_session(&self, id: &str) -> Result<SessionState, ServiceError> {
        let live = self.session(id)?;
        let guard = live.lock().expect("session lock poisoned");
        Ok(guard.state.clone())
    }

    pub fn events(&self, id: &str) -> Result<Vec<SessionEvent>, ServiceError> {
        let live = self.session(id)?;
        let guard = live.lock().expect("session lock poisoned");
        Ok(guard.events.clone())
    }

    fn request(&self, kind: TemplateKind, prompt: String) -> GatewayRequest {
        GatewayRequest::new(kind, prompt)
            .with_timeout(self.settings.timeout)
            .with_max_attempts(self.settings.max_attempts)
    }

    async fn call(&self, kind: TemplateKind, prompt: &str) -> Result<String, GatewayError> {
        self.gateway
            .complete(self.request(kind, prompt.to_string()))
            .await
            .map(|r| r.raw_text)
    }

    /// Malformed output gets one retry; gateway errors already went through
    /// the gateway's own retry policy and are final.
    async fn decompose(&self, prompt: &str) -> Result<SubTaskList, Failure> {
        let mut last = None;
        for _ in 0..2 {
            let raw = self
                .call(TemplateKind::Decompose, prompt)
                .await
                .map_err(Failure::Gateway)?;
            match parse_subtasks(&raw) {
                Ok(list) => return Ok(list),
                Err(e) => {
                    tracing::warn!(error = %e, "unusable decomposition output");
                    last = Some(e);
                }
            }
        }
        Err(Failure::Parse(last.expect("loop ran")))
    }

    /// Like [`Self::decompose`], and a short option list also earns one
    /// retry; the longer of the two lists wins.
    async fn options(&self, prompt: &str) -> Result<OptionSet, Failure> {
        let once = async {
            let raw = self
                .call(TemplateKind::Options, prompt)
                .await
                .map_err(Failure::Gateway)?;
            parse_options(&raw).map_err(Failure::Parse)
        };
        match once.await {
            Ok(set) if !set.is_low() => Ok(set),
            Ok(low) => {
                tracing::warn!(count = low.options.len(), "few options, retrying once");
                let retry = self.call(TemplateKind::Options, prompt).await;
                match retry.map(|raw| parse_options(&raw)) {
                    Ok(Ok(set)) if set.options.len() > low.options.len() => Ok(set),
                    _ => Ok(low),
                }
            }
            Err(Failure::Parse(e)) => {
                tracing::warn!(error = %e, "unusable options output, retrying once");
                let raw = self
                    .call(TemplateKind::Options, prompt)
                    .await
                    .map_err(Failure::Gateway)?;
                parse_options(&raw).map_err(Failure::Parse)
            }
            Err(e) => Err(e),
        }
    }

    fn register(&self, live: LiveSession) -> Arc<Mutex<LiveSession>> {
        let id = live.state.session_id().to_string();
        let live = Arc::new(Mutex::new(live));
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(id, live.clone());
        live
    }

    pub async fn create_session(
        &self,
        query: &str,
        user_context: Option<&str>,
    ) -> Result<SessionState, ServiceError> {
        if query.trim().is_empty() {
            return Err(ServiceError::EmptyQuery);
        }
        let session_id = uuid::Uuid::new_v4().to_string();
        let writer = match &self.store {
            Some(store) => store.create(&session_id)?,
            None => LogWriter::detached(),
        };
        let now = (self.clock)();
        let created = SessionEvent {
            seq: 1,
            session_id: session_id.clone(),
            timestamp: now,
            body: EventBody::SessionCreated {
                query: query.to_string(),
                max_depth: self.settings.max_depth,
            },
        };
        let state = SessionState::from_created(&created)?;
        let mut live = LiveSession {
            state,
            events: Vec::new(),
            writer,
        };
        live.writer.append(&created)?;
        emit_diff(None, &live.state, &self.observer);
        live.events.push(created);
        let context = user_context.filter(|c| !c.trim().is_empty());
        if let Some(text) = context {
            live.commit(
                EventBody::PreferencesUpdated { text: text.to_string() },
                now,
                &self.observer,
            )?;
        }
        let root = NodeId::root();
        live.set_transient(&root, NodeStatus::Generating, &self.observer)?;
        let prompt = render(
            &PromptTemplate::builtin(TemplateKind::Decompose),
            &PromptBindings::new(query)
                .with_selected_options(live.state.selection_digest().to_string())
                .with_user_context(live.state.context().text.clone()),
        )?;
        let handle = self.register(live);
        tracing::info!(session = %session_id, "session created");

        let outcome = self.decompose(&prompt).await;
        let mut live = handle.lock().expect("session lock poisoned");
        self.finish_decomposition(&mut live, outcome)?;
        Ok(live.state.clone())
    }

    /// Commit the result of a root-level decomposition. On failure the root
    /// keeps existing children (warning) or becomes an error if it has none.
    fn finish_decomposition(
        &self,
        live: &mut LiveSession,
        outcome: Result<SubTaskList, Failure>,
    ) -> Result<(), ServiceError> {
        let now = (self.clock)();
        let detail = match outcome {
            Ok(list) => {
                match live.commit(
                    EventBody::SubtasksGenerated {
                        titles: list.titles,
                        warnings: list.warnings,
                    },
                    now,
                    &self.observer,
                ) {
                    Ok(()) => return Ok(()),
                    Err(ServiceError::Model(e)) => e.to_string(),
                    Err(other) => return Err(other),
                }
            }
            Err(f) => f.to_string(),
        };
        let severity = if live.state.children().is_empty() {
            Severity::Error
        } else {
            Severity::Warning
        };
        live.commit(
            EventBody::NodeErrored {
                node_id: NodeId::root(),
                detail: detail.clone(),
                severity,
            },
            now,
            &self.observer,
        )?;
        Err(ServiceError::DecompositionFailed {
            detail,
            state: Box::new(live.state.clone()),
        })
    }

    pub async fn expand_node(
        &self,
        session_id: &str,
        node_id: &NodeId,
        force: bool,
    ) -> Result<Expansion, ServiceError> {
        let handle = self.session(session_id)?;
        let (prompt, generation) = {
            let mut live = handle.lock().expect("session lock poisoned");
            let node = live.state.expandable(node_id)?;
            if node.status() == NodeStatus::Generating {
                return Err(ServiceError::Busy(node_id.clone()));
            }
            if let (Some(set), false) = (node.option_set(), force) {
                if node.status() == NodeStatus::Ready {
                    return Ok(Expansion {
                        node: node.into(),
                        option_set: set.clone(),
                        cached: true,
                    });
                }
            }
            let prompt = render(
                &PromptTemplate::builtin(TemplateKind::Options),
                &PromptBindings::new(node.title())
                    .with_context(live.state.query())
                    .with_selected_options(live.state.selection_digest().to_string())
                    .with_user_context(live.state.context().text.clone()),
            )?;
            let generation = live.state.generation();
            live.set_transient(node_id, NodeStatus::Generating, &self.observer)?;
            (prompt, generation)
        };

        let outcome = self.options(&prompt).await;

        let mut live = handle.lock().expect("session lock poisoned");
        let still_ours = live.state.generation() == generation
            && live
                .state
                .node(node_id)
                .is_some_and(|n| n.status() == NodeStatus::Generating);
        if !still_ours {
            return Err(ServiceError::Superseded(node_id.clone()));
        }
        let now = (self.clock)();
        match outcome {
            Ok(set) => {
                live.commit(
                    EventBody::OptionsGenerated {
                        node_id: node_id.clone(),
                        option_set: set.clone(),
                    },
                    now,
                    &self.observer,
                )?;
                let node = live.state.node(node_id).expect("node just committed");
                Ok(Expansion {
                    node: node.into(),
                    option_set: set,
                    cached: false,
                })
            }
            Err(f) => {
                let detail = f.to_string();
                live.commit(
                    EventBody::NodeErrored {
                        node_id: node_id.clone(),
                        detail: detail.clone(),
                        severity: Severity::Error,
                    },
                    now,
                    &self.observer,
                )?;
                Err(ServiceError::GenerationFailed {
                    node: node_id.clone(),
                    detail,
                })
            }
        }
    }

    pub async fn update_preferences(
        &self,
        session_id: &str,
        text: &str,
    ) -> Result<SessionState, ServiceError> {
        let handle = self.session(session_id)?;
        let prompt = {
            let mut live = handle.lock().expect("session lock poisoned");
            if live.state.root().status() == NodeStatus::Generating {
                return Err(ServiceError::Busy(NodeId::root()));
            }
            live.commit(
                EventBody::PreferencesUpdated { text: text.to_string() },
                (self.clock)(),
                &self.observer,
            )?;
            // The digest still reflects the children about to be replaced.
            let prompt = render(
                &PromptTemplate::builtin(TemplateKind::Decompose),
                &PromptBindings::new(live.state.query())
                    .with_selected_options(live.state.selection_digest().to_string())
                    .with_user_context(live.state.context().text.clone()),
            )?;
            live.set_transient(&NodeId::root(), NodeStatus::Generating, &self.observer)?;
            prompt
        };

        let outcome = self.decompose(&prompt).await;

        let mut live = handle.lock().expect("session lock poisoned");
        self.finish_decomposition(&mut live, outcome)?;
        Ok(live.state.clone())
    }

    pub fn set_node_selection(
        &self,
        session_id: &str,
        node_id: &NodeId,
        indices: BTreeSet<usize>,
    ) -> Result<NodeStatusView, ServiceError> {
        let handle = self.session(session_id)?;
        let mut live = handle.lock().expect("session lock poisoned");
        live.commit(
            EventBody::SelectionChanged {
                node_id: node_id.clone(),
                indices,
            },
            (self.clock)(),
            &self.observer,
        )?;
        Ok(live.state.node(node_id).expect("node just committed").into())
    }

    pub async fn summarize(&self, session_id: &str) -> Result<Summary, ServiceError> {
        let handle = self.session(session_id)?;
        let root = NodeId::root();
        let (prompt, prior) = {
            let mut live = handle.lock().expect("session lock poisoned");
            let prior = live.state.root().status();
            if prior == NodeStatus::Generating {
                return Err(ServiceError::Busy(root));
            }
            let prompt = render(
                &PromptTemplate::builtin(TemplateKind::Summarize),
                &PromptBindings::new(live.state.query())
                    .with_selected_options(live.state.selection_digest().to_string())
                    .with_user_context(live.state.context().text.clone()),
            )?;
            live.set_transient(&root, NodeStatus::Generating, &self.observer)?;
            (prompt, prior)
        };

        let outcome = self.call(TemplateKind::Summarize, &prompt).await;

        let mut live = handle.lock().expect("session lock poisoned");
        live.set_transient(&root, prior, &self.observer)?;
        match outcome {
            Ok(summary) => {
                live.commit(
                    EventBody::SummaryGenerated {
                        summary: summary.clone(),
                    },
                    (self.clock)(),
                    &self.observer,
                )?;
                Ok(Summary {
                    summary,
                    state: live.state.clone(),
                })
            }
            Err(e) => Err(ServiceError::GenerationFailed {
                node: root,
                detail: e.to_string(),
            }),
        }
    }
}
