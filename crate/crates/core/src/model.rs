//! The exploration tree.
//!
//! A session is a root node holding the user's original query plus one layer
//! of sub-task children. Each child can carry a generated [`OptionSet`] and the
//! indices the user picked from it. A single free-form preference text is
//! shared by every node.
//!
//! All transitions take `&self` and return a fresh [`SessionState`]; nothing
//! here mutates in place, so a failed transition leaves the caller's value
//! untouched.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::OptionSet;

/// Upper bound on sub-tasks under the root.
pub const MAX_CHILDREN: usize = 8;

/// Root plus one layer of children.
pub const DEFAULT_MAX_DEPTH: u8 = 2;

const ROOT_SEGMENT: &str = "n0";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("max depth must be at least 2, got {0}")]
    InvalidMaxDepth(u8),
    #[error("decomposition produced no sub-tasks")]
    NoChildren,
    #[error("{0} sub-tasks exceeds the limit of 8")]
    TooManyChildren(usize),
    #[error("sub-task {0} has a blank title")]
    BlankTitle(usize),
    #[error("invalid node id `{0}`")]
    InvalidNodeId(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} cannot hold options")]
    NotExpandable(NodeId),
    #[error("node {0} has no options yet")]
    OptionsNotReady(NodeId),
    #[error("option index {index} out of range for node {node} ({len} selectable entries)")]
    IndexOutOfRange { node: NodeId, index: usize, len: usize },
}

/// Dot-separated path identifying a node: `n0` is the root, `n0.3` its third
/// child. Child positions are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn root() -> Self {
        NodeId(ROOT_SEGMENT.to_string())
    }

    pub fn parse(raw: &str) -> Result<Self, ModelError> {
        let mut segments = raw.split('.');
        if segments.next() != Some(ROOT_SEGMENT) {
            return Err(ModelError::InvalidNodeId(raw.to_string()));
        }
        for seg in segments {
            let valid = !seg.is_empty()
                && !seg.starts_with('0')
                && seg.bytes().all(|b| b.is_ascii_digit())
                && seg.parse::<u32>().is_ok();
            if !valid {
                return Err(ModelError::InvalidNodeId(raw.to_string()));
            }
        }
        Ok(NodeId(raw.to_string()))
    }

    /// Id of the `position`-th child (1-based) of this node.
    pub fn child(&self, position: usize) -> Self {
        debug_assert!(position >= 1);
        let mut s = self.0.clone();
        s.push('.');
        s.push_str(&position.to_string());
        NodeId(s)
    }

    /// Number of path segments: the root is at depth 1, its children at 2.
    pub fn depth(&self) -> usize {
        self.0.split('.').count()
    }

    pub fn is_root(&self) -> bool {
        self.0 == ROOT_SEGMENT
    }

    pub fn parent(&self) -> Option<Self> {
        self.0.rfind('.').map(|i| NodeId(self.0[..i].to_string()))
    }

    /// 1-based position under the parent, `None` for the root.
    pub fn position(&self) -> Option<usize> {
        self.0.rfind('.').and_then(|i| self.0[i + 1..].parse().ok())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn positions(&self) -> impl Iterator<Item = u64> + '_ {
        self.0.split('.').skip(1).map(|s| s.parse().unwrap_or(u64::MAX))
    }
}

impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.positions().cmp(other.positions())
    }
}

impl PartialOrd for NodeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for NodeId {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        NodeId::parse(&value)
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> Self {
        id.0
    }
}

impl core::str::FromStr for NodeId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Idle,
    Generating,
    Ready,
    Error,
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeStatus::Idle => "idle",
            NodeStatus::Generating => "generating",
            NodeStatus::Ready => "ready",
            NodeStatus::Error => "error",
        })
    }
}

/// One unit of interaction: the root query or one sub-task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationNode {
    id: NodeId,
    title: String,
    status: NodeStatus,
    #[serde(default)]
    option_set: Option<OptionSet>,
    #[serde(default)]
    selected: BTreeSet<usize>,
    #[serde(default)]
    error_detail: Option<String>,
    #[serde(default)]
    warning: Option<String>,
}

impl ExplorationNode {
    fn new(id: NodeId, title: String) -> Self {
        Self {
            id,
            title,
            status: NodeStatus::Idle,
            option_set: None,
            selected: BTreeSet::new(),
            error_detail: None,
            warning: None,
        }
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn status(&self) -> NodeStatus {
        self.status
    }

    pub fn option_set(&self) -> Option<&OptionSet> {
        self.option_set.as_ref()
    }

    /// Selected indices into the unified list (0 = recommended).
    pub fn selected(&self) -> &BTreeSet<usize> {
        &self.selected
    }

    pub fn error_detail(&self) -> Option<&str> {
        self.error_detail.as_deref()
    }

    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    fn set_ready_or_idle(&mut self) {
        self.status = if self.id.is_root() || self.option_set.is_some() {
            NodeStatus::Ready
        } else {
            NodeStatus::Idle
        };
    }
}

/// Free-form preference text shared by every node.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonalContext {
    pub text: String,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigestEntry {
    pub node_title: String,
    pub option_text: String,
}

/// Every selected option across the tree, ordered by node id then option
/// index. Its `Display` form is what fills the `{selected_options}` slot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionDigest {
    pub entries: Vec<DigestEntry>,
}

impl SelectionDigest {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for SelectionDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return f.write_str("None");
        }
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "- {}: {}", e.node_title, e.option_text)?;
        }
        Ok(())
    }
}

/// Full state of one exploration session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    session_id: String,
    root: ExplorationNode,
    children: Vec<ExplorationNode>,
    context: PersonalContext,
    max_depth: u8,
    summary: Option<String>,
    /// Milliseconds since the Unix epoch.
    created_at: u64,
    updated_at: u64,
    /// Set by a preference change, cleared when children are replaced.
    needs_regeneration: bool,
    /// Bumped each time the children are replaced.
    generation: u32,
}

impl SessionState {
    pub fn new(
        session_id: impl Into<String>,
        query: &str,
        max_depth: u8,
        now: u64,
    ) -> Result<Self, ModelError> {
        if query.trim().is_empty() {
            return Err(ModelError::EmptyQuery);
        }
        if max_depth < DEFAULT_MAX_DEPTH {
            return Err(ModelError::InvalidMaxDepth(max_depth));
        }
        Ok(Self {
            session_id: session_id.into(),
            root: ExplorationNode::new(NodeId::root(), query.to_string()),
            children: Vec::new(),
            context: PersonalContext::default(),
            max_depth,
            summary: None,
            created_at: now,
            updated_at: now,
            needs_regeneration: false,
            generation: 0,
        })
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn root(&self) -> &ExplorationNode {
        &self.root
    }

    pub fn query(&self) -> &str {
        &self.root.title
    }

    pub fn children(&self) -> &[ExplorationNode] {
        &self.children
    }

    /// Child at 1-based `position`.
    pub fn child(&self, position: usize) -> Option<&ExplorationNode> {
        position.checked_sub(1).and_then(|i| self.children.get(i))
    }

    pub fn context(&self) -> &PersonalContext {
        &self.context
    }

    pub fn max_depth(&self) -> u8 {
        self.max_depth
    }

    pub fn summary(&self) -> Option<&str> {
        self.summary.as_deref()
    }

    pub fn created_at(&self) -> u64 {
        self.created_at
    }

    pub fn updated_at(&self) -> u64 {
        self.updated_at
    }

    pub fn needs_regeneration(&self) -> bool {
        self.needs_regeneration
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    /// Root first, then children in order.
    pub fn nodes(&self) -> impl Iterator<Item = &ExplorationNode> {
        core::iter::once(&self.root).chain(self.children.iter())
    }

    pub fn node(&self, id: &NodeId) -> Option<&ExplorationNode> {
        self.nodes().find(|n| &n.id == id)
    }

    /// Replace all children with fresh idle nodes `n0.1..n0.k`. Previous
    /// children, their options and their selections are dropped.
    pub fn attach_children<S: AsRef<str>>(&self, titles: &[S]) -> Result<Self, ModelError> {
        if titles.is_empty() {
            return Err(ModelError::NoChildren);
        }
        if titles.len() > MAX_CHILDREN {
            return Err(ModelError::TooManyChildren(titles.len()));
        }
        if let Some(i) = titles.iter().position(|t| t.as_ref().trim().is_empty()) {
            return Err(ModelError::BlankTitle(i + 1));
        }
        let root_id = NodeId::root();
        let mut next = self.clone();
        next.children = titles
            .iter()
            .enumerate()
            .map(|(i, t)| ExplorationNode::new(root_id.child(i + 1), t.as_ref().to_string()))
            .collect();
        next.root.status = NodeStatus::Ready;
        next.root.error_detail = None;
        next.root.warning = None;
        next.needs_regeneration = false;
        next.generation = next.generation.wrapping_add(1);
        Ok(next)
    }

    /// Replace the node's selection with exactly `indices`.
    pub fn set_selection(
        &self,
        id: &NodeId,
        indices: &BTreeSet<usize>,
    ) -> Result<Self, ModelError> {
        let node = self.node(id).ok_or_else(|| ModelError::UnknownNode(id.clone()))?;
        let set = node
            .option_set
            .as_ref()
            .ok_or_else(|| ModelError::OptionsNotReady(id.clone()))?;
        let len = set.selectable_len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(ModelError::IndexOutOfRange {
                node: id.clone(),
                index: bad,
                len,
            });
        }
        self.with_node(id, |n| n.selected = indices.clone())
    }

    pub fn selection_digest(&self) -> SelectionDigest {
        let mut nodes: Vec<&ExplorationNode> = self
            .nodes()
            .filter(|n| !n.selected.is_empty() && n.option_set.is_some())
            .collect();
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let entries = nodes
            .into_iter()
            .flat_map(|n| {
                let set = n.option_set.as_ref();
                n.selected.iter().filter_map(move |&i| {
                    set.and_then(|s| s.entry(i)).map(|text| DigestEntry {
                        node_title: n.title.clone(),
                        option_text: text.to_string(),
                    })
                })
            })
            .collect();
        SelectionDigest { entries }
    }

    /// Replace the preference text. Empty text clears it. Always bumps the
    /// revision and flags the children for regeneration.
    pub fn update_context(&self, text: &str) -> Self {
        let mut next = self.clone();
        next.context.text = text.to_string();
        next.context.revision += 1;
        next.needs_regeneration = true;
        next
    }

    /// Store freshly generated options on a child. Any previous selection
    /// referred to the old list and is cleared.
    pub fn set_options(&self, id: &NodeId, options: OptionSet) -> Result<Self, ModelError> {
        self.expandable(id)?;
        self.with_node(id, |n| {
            n.option_set = Some(options);
            n.selected.clear();
            n.status = NodeStatus::Ready;
            n.error_detail = None;
        })
    }

    /// Transient status change (e.g. marking a node as generating while a
    /// model call is in flight).
    pub fn set_status(&self, id: &NodeId, status: NodeStatus) -> Result<Self, ModelError> {
        let node = self.node(id).ok_or_else(|| ModelError::UnknownNode(id.clone()))?;
        if status == NodeStatus::Ready && !id.is_root() && node.option_set.is_none() {
            return Err(ModelError::OptionsNotReady(id.clone()));
        }
        self.with_node(id, |n| n.status = status)
    }

    pub fn record_error(&self, id: &NodeId, detail: &str) -> Result<Self, ModelError> {
        self.with_node(id, |n| {
            n.status = NodeStatus::Error;
            n.error_detail = Some(detail.to_string());
        })
    }

    /// Soft failure: the node keeps what it had and carries a note.
    pub fn record_warning(&self, id: &NodeId, detail: &str) -> Result<Self, ModelError> {
        self.with_node(id, |n| {
            n.warning = Some(detail.to_string());
            if n.status == NodeStatus::Generating {
                n.set_ready_or_idle();
            }
        })
    }

    pub fn set_summary(&self, text: &str) -> Self {
        let mut next = self.clone();
        next.summary = Some(text.to_string());
        next
    }

    pub fn touch(&self, now: u64) -> Self {
        let mut next = self.clone();
        next.updated_at = now;
        next
    }

    /// Checks that `id` names a child that may receive options.
    pub fn expandable(&self, id: &NodeId) -> Result<&ExplorationNode, ModelError> {
        let node = self.node(id).ok_or_else(|| ModelError::UnknownNode(id.clone()))?;
        if id.is_root() || id.depth() > usize::from(self.max_depth) {
            return Err(ModelError::NotExpandable(id.clone()));
        }
        Ok(node)
    }

    fn with_node(
        &self,
        id: &NodeId,
        f: impl FnOnce(&mut ExplorationNode),
    ) -> Result<Self, ModelError> {
        let mut next = self.clone();
        let node = if id.is_root() {
            &mut next.root
        } else {
            next.children
                .iter_mut()
                .find(|n| &n.id == id)
                .ok_or_else(|| ModelError::UnknownNode(id.clone()))?
        };
        f(node);
        Ok(next)
    }
}
