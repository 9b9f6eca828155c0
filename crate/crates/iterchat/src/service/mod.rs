//! Annotation service: task leasing, validated gain submissions, timing
//! statistics and labeled export over HTTP.

pub mod api;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

pub use api::router;
pub use store::{Clock, ManualClock, Store, StoreError, SystemClock};

pub struct ServeOptions {
    pub addr: SocketAddr,
    pub ui_dir: Option<PathBuf>,
}

/// Serve until Ctrl-C.
pub fn serve_blocking(store: Arc<Store>, options: ServeOptions) -> std::io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(options.addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(store, options.ui_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
