//! Teleoperation server: the binary state stream, the episode hub and the
//! thin-client bridge in one process, plus the `teleop` command line.

pub mod cli;
pub mod client;
pub mod config;
pub mod conn;
pub mod host;
pub mod http;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use teleop_core::par::Execution;
use teleop_core::Registry;
use teleop_hub::{Hub, Store, Tokens};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::config::Config;
use crate::host::{Host, HostOptions};

/// Token file inside the store directory.
pub const TOKEN_FILE: &str = "tokens.json";

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {what} on {addr}: {source}")]
    Bind {
        what: &'static str,
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("registry: {0}")]
    Registry(String),
    #[error("store {path}: {message}")]
    Store { path: String, message: String },
    #[error("tokens: {0}")]
    Tokens(String),
}

impl ServeError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServeError::Bind { .. } => cli::EXIT_CONNECT,
            ServeError::Registry(_) | ServeError::Tokens(_) => cli::EXIT_CONFIG,
            ServeError::Store { .. } => cli::EXIT_RUNTIME,
        }
    }
}

/// Bundled assets plus every configured path (directories or single files).
pub fn load_registry(paths: &[impl AsRef<Path>]) -> Result<Registry, ServeError> {
    let mut registry = Registry::bundled();
    for p in paths {
        let p = p.as_ref();
        let err = |m: String| ServeError::Registry(format!("{}: {m}", p.display()));
        if p.is_dir() {
            registry.load_dir(p).map_err(|e| ServeError::Registry(e.to_string()))?;
            continue;
        }
        let text = std::fs::read_to_string(p).map_err(|e| err(e.to_string()))?;
        match p.extension().and_then(|e| e.to_str()) {
            Some("robot") => registry.add_robot(&text).map(drop).map_err(|e| err(e.to_string()))?,
            Some("scene") => registry.add_scene(&text).map(drop).map_err(|e| err(e.to_string()))?,
            _ => return Err(err("expected a directory, a .robot or a .scene file".into())),
        }
    }
    Ok(registry)
}

/// Opens the store and its token table, and provisions configured tokens.
pub fn open_hub(config: &Config) -> Result<Hub, ServeError> {
    let dir = &config.store.dir;
    let store = Store::open(dir, config.store.capacity_bytes).map_err(|e| ServeError::Store {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let tokens = Tokens::open(&dir.join(TOKEN_FILE)).map_err(|e| ServeError::Tokens(e.to_string()))?;
    for t in &config.tokens {
        tokens
            .provision(&t.token, &t.user, t.admin)
            .map_err(|e| ServeError::Tokens(format!("token for `{}`: {e}", t.user)))?;
    }
    let mut hub = Hub::new(store, tokens);
    hub.max_upload_bytes = config.store.max_upload_bytes;
    Ok(hub)
}

/// A running server. Dropping it does not stop it; call [`Server::shutdown`].
pub struct Server {
    pub stream_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub host: Arc<Host>,
    stop: Arc<tokio::sync::Notify>,
    tasks: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for Server {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Server")
            .field("stream_addr", &self.stream_addr)
            .field("http_addr", &self.http_addr)
            .finish_non_exhaustive()
    }
}

impl Server {
    /// Binds both ports and starts serving. Must run inside a tokio runtime.
    pub async fn start(config: &Config) -> Result<Self, ServeError> {
        let registry = Arc::new(load_registry(&config.registry.paths)?);
        let hub = Arc::new(open_hub(config)?);
        let bind = |what, addr| async move {
            TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { what, addr, source })
        };
        let stream = bind("stream port", config.server.stream_addr).await?;
        let http = bind("http port", config.server.http_addr).await?;
        let stream_addr = stream.local_addr().expect("bound");
        let http_addr = http.local_addr().expect("bound");

        let host = Host::start(
            registry,
            hub,
            HostOptions {
                params: config.session_params(),
                max_sessions: config.server.max_sessions,
                reconnect_window: Duration::from_secs_f64(config.server.reconnect_window_s),
                require_token: config.server.require_token,
                execution: Execution::Parallel,
            },
        );
        let stop = Arc::new(tokio::sync::Notify::new());

        let accept_host = Arc::clone(&host);
        let accept = tokio::spawn(async move {
            loop {
                let (socket, peer) = match stream.accept().await {
                    Ok(s) => s,
                    Err(e) => {
                        tracing::warn!(error = %e, "accept failed");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                        continue;
                    }
                };
                let _ = socket.set_nodelay(true);
                let (r, w) = socket.into_split();
                tokio::spawn(conn::serve_stream(Arc::clone(&accept_host), r, w, peer.to_string()));
            }
        });

        let app = http::router(Arc::clone(&host), config.server.ui_dir.as_deref());
        let notified = Arc::clone(&stop);
        let web = tokio::spawn(async move {
            let shutdown = async move { notified.notified().await };
            if let Err(e) = axum::serve(http, app).with_graceful_shutdown(shutdown).await {
                tracing::error!(error = %e, "http server failed");
            }
        });

        Ok(Self {
            stream_addr,
            http_addr,
            host,
            stop,
            tasks: vec![accept, web],
        })
    }

    /// Stops accepting, closes every session and stores open episodes.
    pub async fn shutdown(self) {
        self.stop.notify_waiters();
        for t in &self.tasks {
            t.abort();
        }
        let host = Arc::clone(&self.host);
        let _ = tokio::task::spawn_blocking(move || host.shutdown()).await;
    }
}
