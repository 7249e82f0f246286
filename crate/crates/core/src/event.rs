//! Append-only session events and the fold that rebuilds state from them.
//!
//! Live operations and replay share [`SessionState::apply`], so a log read
//! back from disk lands on the same state the service held in memory. Only
//! committed outcomes are events; transient `generating` marks are not.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, NodeId, SessionState};
use crate::parse::{OptionSet, ParseWarning};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    /// The node failed; its status becomes `error`.
    Error,
    /// The node keeps its previous content and carries a note.
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    SessionCreated {
        query: String,
        max_depth: u8,
    },
    SubtasksGenerated {
        titles: Vec<String>,
        #[serde(default)]
        warnings: Vec<ParseWarning>,
    },
    OptionsGenerated {
        node_id: NodeId,
        option_set: OptionSet,
    },
    SelectionChanged {
        node_id: NodeId,
        indices: BTreeSet<usize>,
    },
    PreferencesUpdated {
        text: String,
    },
    SummaryGenerated {
        summary: String,
    },
    NodeErrored {
        node_id: NodeId,
        detail: String,
        severity: Severity,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::SessionCreated { .. } => "SessionCreated",
            EventBody::SubtasksGenerated { .. } => "SubtasksGenerated",
            EventBody::OptionsGenerated { .. } => "OptionsGenerated",
            EventBody::SelectionChanged { .. } => "SelectionChanged",
            EventBody::PreferencesUpdated { .. } => "PreferencesUpdated",
            EventBody::SummaryGenerated { .. } => "SummaryGenerated",
            EventBody::NodeErrored { .. } => "NodeErrored",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub session_id: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("log is empty")]
    Empty,
    #[error("first event is {0}, expected SessionCreated")]
    MissingCreation(&'static str),
    #[error("sequence gap: expected seq {expected}, found {found}")]
    Gap { expected: u64, found: u64 },
    #[error("event {seq} belongs to session `{found}`")]
    ForeignSession { seq: u64, found: String },
    #[error("event {seq} cannot be applied: {source}")]
    Rejected { seq: u64, source: ModelError },
}

impl SessionState {
    /// Start a state from a `SessionCreated` event.
    pub fn from_created(event: &SessionEvent) -> Result<Self, ModelError> {
        match &event.body {
            EventBody::SessionCreated { query, max_depth } => {
                SessionState::new(event.session_id.clone(), query, *max_depth, event.timestamp)
            }
            _ => Err(ModelError::EmptyQuery),
        }
    }

    /// Fold one event into the state.
    pub fn apply(&self, event: &SessionEvent) -> Result<Self, ModelError> {
        let next = match &event.body {
            EventBody::SessionCreated { .. } => return SessionState::from_created(event),
            EventBody::SubtasksGenerated { titles, .. } => self.attach_children(titles)?,
            EventBody::OptionsGenerated { node_id, option_set } => {
                self.set_options(node_id, option_set.clone())?
            }
            EventBody::SelectionChanged { node_id, indices } => {
                self.set_selection(node_id, indices)?
            }
            EventBody::PreferencesUpdated { text } => self.update_context(text),
            EventBody::SummaryGenerated { summary } => self.set_summary(summary),
            EventBody::NodeErrored {
                node_id,
                detail,
                severity: Severity::Error,
            } => self.record_error(node_id, detail)?,
            EventBody::NodeErrored {
                node_id,
                detail,
                severity: Severity::Warning,
            } => self.record_warning(node_id, detail)?,
        };
        Ok(next.touch(event.timestamp))
    }
}

/// Rebuild a session from its complete log. The log must start with
/// `SessionCreated` at seq 1 and continue without gaps.
pub fn replay(events: &[SessionEvent]) -> Result<SessionState, ReplayError> {
    let (first, rest) = events.split_first().ok_or(ReplayError::Empty)?;
    if !matches!(first.body, EventBody::SessionCreated { .. }) {
        return Err(ReplayError::MissingCreation(first.body.kind()));
    }
    if first.seq != 1 {
        return Err(ReplayError::Gap {
            expected: 1,
            found: first.seq,
        });
    }
    let mut state = SessionState::from_created(first).map_err(|source| ReplayError::Rejected {
        seq: first.seq,
        source,
    })?;
    for (event, expected) in rest.iter().zip(2u64..) {
        if event.seq != expected {
            return Err(ReplayError::Gap {
                expected,
                found: event.seq,
            });
        }
        if event.session_id != first.session_id {
            return Err(ReplayError::ForeignSession {
                seq: event.seq,
                found: event.session_id.clone(),
            });
        }
        if matches!(event.body, EventBody::SessionCreated { .. }) {
            return Err(ReplayError::Rejected {
                seq: event.seq,
                source: ModelError::EmptyQuery,
            });
        }
        state = state.apply(event).map_err(|source| ReplayError::Rejected {
            seq: event.seq,
            source,
        })?;
    }
    Ok(state)
}
