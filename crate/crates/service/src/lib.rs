//! Orchestration around the TeleAssist core: configuration, the per-frame pipeline,
//! frame sources, the operator command grammar and the HTTP/WebSocket service.

pub mod backend;
pub mod command;
pub mod config;
pub mod pipeline;
pub mod record;
pub mod scenario;
pub mod server;
