//! HTTP control plane for the loomline digital twin.
//!
//! Scenarios are registered with `POST /api/scenarios`, runs are started with
//! `POST /api/runs` and watched through a server-sent event stream at
//! `GET /api/runs/{id}/events`. Finished runs are written to the run store.

pub mod api;
pub mod session;

use std::io;

use tokio::net::TcpListener;

pub use api::{router, AppState};
pub use session::{RunState, Session};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

/// Serves the API on an already bound listener until the process ends.
pub async fn serve(listener: TcpListener, state: AppState) -> io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
