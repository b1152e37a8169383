//! Server configuration, a TOML file. Unknown keys are rejected.
//!
//! ```toml
//! [server]
//! stream_addr = "127.0.0.1:7447"
//! http_addr = "127.0.0.1:8080"
//! max_sessions = 64
//! reconnect_window_s = 30.0
//! ui_dir = "ui/dist"
//! require_token = false
//!
//! [sim]
//! tracking = "inline"        # or "digest"
//! profile_window = 1000
//! [sim.ik]                   # any IK parameter, e.g. dt, alpha, d_margin
//! dt = 0.005
//!
//! [registry]
//! paths = ["assets/"]        # extra *.robot / *.scene directories
//!
//! [store]
//! dir = "teleop-store"
//! capacity_bytes = 10_000_000_000
//! max_upload_bytes = 268435456
//!
//! [[tokens]]
//! user = "alice"
//! token = "a long random string of at least 32 bytes"
//! admin = false
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use teleop_core::episode::TrackingMode;
use teleop_core::session::{SessionParams, DEFAULT_MAX_SESSIONS};
use teleop_core::IkParams;

pub const STORE_DIR_ENV: &str = "TELEOP_STORE_DIR";
pub const DEFAULT_STREAM_ADDR: &str = "127.0.0.1:7447";
pub const DEFAULT_HTTP_ADDR: &str = "127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub server: ServerSection,
    pub sim: SimSection,
    pub registry: RegistrySection,
    pub store: StoreSection,
    pub tokens: Vec<TokenEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub stream_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub max_sessions: usize,
    pub reconnect_window_s: f64,
    pub ui_dir: Option<PathBuf>,
    /// Refuse handshakes without a valid token.
    pub require_token: bool,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            stream_addr: DEFAULT_STREAM_ADDR.parse().unwrap(),
            http_addr: DEFAULT_HTTP_ADDR.parse().unwrap(),
            max_sessions: DEFAULT_MAX_SESSIONS,
            reconnect_window_s: 30.0,
            ui_dir: None,
            require_token: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub tracking: TrackingMode,
    pub profile_window: usize,
    pub ik: IkParams,
}

impl Default for SimSection {
    fn default() -> Self {
        let p = SessionParams::default();
        Self {
            tracking: p.tracking_mode,
            profile_window: p.profile_window,
            ik: p.ik,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrySection {
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreSection {
    pub dir: PathBuf,
    pub capacity_bytes: Option<u64>,
    pub max_upload_bytes: usize,
}

impl Default for StoreSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("teleop-store"),
            capacity_bytes: None,
            max_upload_bytes: teleop_hub::DEFAULT_MAX_UPLOAD,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenEntry {
    pub user: String,
    pub token: String,
    #[serde(default)]
    pub admin: bool,
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        // relative registry and ui paths are taken from the config's directory
        let base = path.parent().unwrap_or(Path::new(""));
        for p in &mut cfg.registry.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(ui) = &mut cfg.server.ui_dir {
            if ui.is_relative() {
                *ui = base.join(&*ui);
            }
        }
        if cfg.store.dir.is_relative() {
            cfg.store.dir = base.join(&cfg.store.dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let ik = &self.sim.ik;
        if !(ik.dt > 0.0 && ik.dt <= 0.1) {
            return Err(ConfigError::Invalid(format!("sim.ik.dt must be in (0, 0.1], got {}", ik.dt)));
        }
        if !(ik.alpha > 0.0) || !(ik.damping >= 0.0) || !(ik.d_margin >= 0.0) {
            return Err(ConfigError::Invalid("sim.ik: alpha > 0, damping >= 0 and d_margin >= 0 required".into()));
        }
        if self.server.max_sessions == 0 {
            return Err(ConfigError::Invalid("server.max_sessions must be at least 1".into()));
        }
        if !(self.server.reconnect_window_s >= 0.0) {
            return Err(ConfigError::Invalid("server.reconnect_window_s must be >= 0".into()));
        }
        Ok(())
    }

    /// Applies `TELEOP_STORE_DIR` if set.
    pub fn with_env(mut self) -> Self {
        if let Some(dir) = std::env::var_os(STORE_DIR_ENV).filter(|d| !d.is_empty()) {
            self.store.dir = PathBuf::from(dir);
        }
        self
    }

    pub fn session_params(&self) -> SessionParams {
        SessionParams {
            ik: self.sim.ik,
            tracking_mode: self.sim.tracking,
            profile_window: self.sim.profile_window,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_file() {
        let c = Config::parse("", Path::new("x.toml")).unwrap();
        assert_eq!(c.server.stream_addr.port(), 7447);
        assert_eq!(c.server.max_sessions, 64);
        assert_eq!(c.session_params(), SessionParams::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = Config::parse("[server]\nstream_adr = \"127.0.0.1:1\"\n", Path::new("c.toml")).unwrap_err();
        assert!(e.to_string().contains("stream_adr"), "{e}");
        let e = Config::parse("[sim.ik]\ngain = 3\n", Path::new("c.toml")).unwrap_err();
        assert!(e.to_string().contains("gain"), "{e}");
    }

    #[test]
    fn overrides_and_relative_paths() {
        let text = "[sim.ik]\nalpha = 4.0\n[store]\ndir = \"data\"\n[registry]\npaths = [\"assets\"]\n";
        let c = Config::parse(text, Path::new("/etc/teleop/server.toml")).unwrap();
        assert_eq!(c.sim.ik.alpha, 4.0);
        assert_eq!(c.sim.ik.dt, 0.005);
        assert_eq!(c.store.dir, Path::new("/etc/teleop/data"));
        assert_eq!(c.registry.paths[0], Path::new("/etc/teleop/assets"));
        assert!(Config::parse("[sim.ik]\ndt = 0\n", Path::new("c.toml")).is_err());
    }
}
