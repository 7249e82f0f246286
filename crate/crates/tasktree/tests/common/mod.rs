#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tasktree::scripted::{ScenarioScript, ScriptedProvider};
use tasktree::service::{ServiceSettings, SessionService, StatusChange};
use tasktree::store::EventStore;
use tasktree::Gateway;
use tasktree_core::{NodeId, NodeStatus};

pub const BOOK_FLIGHT: &str = "I want to book a flight to Tokyo";
pub const PLAN_TRIP: &str = "I want to plan a trip to Tokyo";
pub const TODDLER: &str = "I am traveling with a toddler";

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn tokyo() -> Arc<ScriptedProvider> {
    Arc::new(ScriptedProvider::load(&fixture("tokyo.script.toml")).unwrap())
}

pub fn scripted(toml: &str) -> Arc<ScriptedProvider> {
    Arc::new(ScriptedProvider::new(ScenarioScript::from_toml(toml).unwrap()))
}

pub fn service_with(provider: Arc<ScriptedProvider>, store: Option<EventStore>) -> SessionService {
    let gateway = Gateway::new(provider).with_backoff(Duration::from_millis(1));
    SessionService::new(Arc::new(gateway), store, ServiceSettings::default())
}

pub fn service(provider: Arc<ScriptedProvider>) -> SessionService {
    service_with(provider, None)
}

/// Collects status changes and groups them per node instance.
#[derive(Clone, Default)]
pub struct Recorder(Arc<Mutex<Vec<StatusChange>>>);

impl Recorder {
    pub fn observer(&self) -> tasktree::service::StatusObserver {
        let sink = self.0.clone();
        Arc::new(move |c: &StatusChange| sink.lock().unwrap().push(c.clone()))
    }

    pub fn changes(&self) -> Vec<StatusChange> {
        self.0.lock().unwrap().clone()
    }

    pub fn sequences(&self) -> BTreeMap<(u32, NodeId), Vec<NodeStatus>> {
        let mut out: BTreeMap<(u32, NodeId), Vec<NodeStatus>> = BTreeMap::new();
        for c in self.changes() {
            out.entry((c.generation, c.node_id.clone())).or_default().push(c.status);
        }
        out
    }

    pub fn clear(&self) {
        self.0.lock().unwrap().clear();
    }
}

pub fn child(n: usize) -> NodeId {
    NodeId::root().child(n)
}
