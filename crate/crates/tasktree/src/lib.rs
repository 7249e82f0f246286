//! Task-exploration service: model gateway, session orchestration with
//! event-sourced persistence, the HTTP API, and scripted scenarios.

pub mod api;
pub mod config;
pub mod gateway;
pub mod http_provider;
pub mod scenario;
pub mod scripted;
pub mod service;
pub mod store;

pub use gateway::{Gateway, GatewayError, GatewayRequest, GatewayResponse, Provider, ProviderCall, ProviderError};
pub use scripted::{ScenarioScript, ScriptedProvider};
pub use service::{ServiceError, ServiceSettings, SessionService, StatusChange};
pub use store::{EventStore, LogError};
