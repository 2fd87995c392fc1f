//! Session service, live telemetry and command-line front end for the
//! click-rendering simulator.
//!
//! The HTTP interface is described in `docs/api.md`; file layouts in
//! `docs/schemas.md`.

pub mod api;
pub mod artifacts;
pub mod store;
pub mod svg;
pub mod telemetry;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use tokio::net::TcpListener;

/// Environment variable overriding the session directory.
pub const DATA_DIR_ENV: &str = "CLICKSIM_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "clicksim-data";

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
}

/// Binds, reports the bound address through `on_bound`, and serves until
/// `shutdown` resolves.
pub async fn serve(
    config: ServeConfig,
    on_bound: impl FnOnce(SocketAddr),
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let store = Arc::new(store::Store::open(&config.data_dir)?);
    let listener = TcpListener::bind(config.addr).await?;
    let addr = listener.local_addr()?;
    on_bound(addr);
    axum::serve(listener, api::router(store)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}
