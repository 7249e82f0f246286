//! Core of the task-exploration engine.
//!
//! Everything here is pure: the exploration tree and its transitions, the
//! three prompt templates and their renderer, the parser that pulls JSON
//! objects out of model output, and the event records whose replay rebuilds
//! a session. No I/O, no clocks, no threads. Callers pass timestamps in.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod event;
pub mod model;
pub mod parse;
pub mod prompt;

pub use event::{replay, EventBody, ReplayError, SessionEvent, Severity};
pub use model::{
    ExplorationNode, ModelError, NodeId, NodeStatus, PersonalContext, SelectionDigest,
    SessionState, DEFAULT_MAX_DEPTH, MAX_CHILDREN,
};
pub use parse::{
    extract_object, parse_options, parse_subtasks, strip_fences, OptionSet, ParseError,
    ParseWarning, RawExtraction, SubTaskList,
};
pub use prompt::{golden_digest, render, PromptBindings, PromptError, PromptTemplate, TemplateKind};
