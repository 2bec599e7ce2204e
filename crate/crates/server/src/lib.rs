//! HTTP serving for the toy diffusion engine: the public API, the bounded
//! job pool, task tracking, and the cluster router.

pub mod admission;
pub mod app;
pub mod backend;
pub mod bench;
pub mod cluster;
pub mod error;
pub mod schema;
pub mod tasks;
pub mod zoo;

pub use app::{router, serve, AppState, Mode, RunningServer, ServerConfig};
pub use error::ApiError;
