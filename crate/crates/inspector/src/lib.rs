//! HTTP inspector for an NW-head model: per-query predictions, weight and
//! influence rankings, and a live support-exclusion loop.
//!
//! Embeddings are computed once when the workspace is loaded; exclusions only
//! renormalize cached weights.

pub mod api;
pub mod state;

use std::net::SocketAddr;
use std::path::PathBuf;

use axum::routing::{get, post};
use axum::Router;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub use state::{effective_support, AppState, Session, SessionView, Workspace};

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/summary", get(api::summary))
        .route("/api/predict/{id}", get(api::predict))
        .route("/api/influence/{id}", get(api::influence))
        .route(
            "/api/exclusions",
            get(api::get_exclusions)
                .post(api::update_exclusions)
                .delete(api::clear_exclusions),
        )
        .route("/api/tau", post(api::set_tau))
        .route("/api/reliability", get(api::reliability))
        .route("/api/queries", get(api::queries))
        .with_state(state)
        .layer(CorsLayer::permissive());
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(addr: SocketAddr, state: AppState, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "inspector listening");
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
