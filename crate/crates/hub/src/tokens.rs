//! API tokens. Only SHA-256 digests of tokens are kept on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::store::write_atomic;

/// Random bytes per issued token.
pub const TOKEN_BYTES: usize = 32;
const FINGERPRINT_HEX: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum TokenError {
    #[error("invalid user id `{0}`: use 1-64 characters from [A-Za-z0-9_.-]")]
    BadUser(String),
    #[error("token is already assigned to user `{0}`")]
    Taken(String),
    #[error("token too short ({0} bytes, need at least {TOKEN_BYTES})")]
    TooShort(usize),
    #[error("token file {path}: {message}")]
    File { path: PathBuf, message: String },
}

/// An authenticated caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub user_id: String,
    pub fingerprint: String,
    pub admin: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub user_id: String,
    pub token_sha256: String,
    #[serde(default)]
    pub admin: bool,
    pub issued_us: u64,
    #[serde(default)]
    pub revoked_us: Option<u64>,
    /// Came from server config; never written to the token file.
    #[serde(skip)]
    pub provisioned: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct TokenFile {
    tokens: Vec<TokenRecord>,
}

pub fn valid_user_id(user: &str) -> bool {
    (1..=64).contains(&user.len())
        && user.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.')
        && user != "."
        && user != ".."
}

fn digest(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

/// Hex prefix of the token digest, safe to log and to embed in episodes.
pub fn fingerprint(token: &str) -> String {
    digest(token)[..FINGERPRINT_HEX].to_string()
}

/// Token table keyed by digest. Persistent records live in an optional file;
/// tokens provisioned from server config are kept in memory only.
#[derive(Debug, Default)]
pub struct Tokens {
    path: Option<PathBuf>,
    records: RwLock<BTreeMap<String, TokenRecord>>,
}

impl Tokens {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists; issued tokens are written back to it.
    pub fn open(path: &Path) -> Result<Self, TokenError> {
        let file_err = |message: String| TokenError::File {
            path: path.to_path_buf(),
            message,
        };
        let file: TokenFile = match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| file_err(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => TokenFile::default(),
            Err(e) => return Err(file_err(e.to_string())),
        };
        let mut records = BTreeMap::new();
        for r in file.tokens {
            if !valid_user_id(&r.user_id) {
                return Err(TokenError::BadUser(r.user_id));
            }
            records.insert(r.token_sha256.clone(), r);
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            records: RwLock::new(records),
        })
    }

    fn insert(&self, token: &str, user: &str, admin: bool, persist: bool) -> Result<(), TokenError> {
        if !valid_user_id(user) {
            return Err(TokenError::BadUser(user.to_string()));
        }
        if token.len() < TOKEN_BYTES {
            return Err(TokenError::TooShort(token.len()));
        }
        let key = digest(token);
        let mut records = self.records.write().unwrap();
        if let Some(existing) = records.get(&key) {
            if existing.user_id != user {
                return Err(TokenError::Taken(existing.user_id.clone()));
            }
        }
        records.insert(
            key,
            TokenRecord {
                user_id: user.to_string(),
                token_sha256: digest(token),
                admin,
                issued_us: teleop_core::protocol::now_us(),
                revoked_us: None,
                provisioned: !persist,
            },
        );
        if persist {
            self.save(&records)?;
        }
        Ok(())
    }

    /// Registers a known token (from config) without persisting it.
    pub fn provision(&self, token: &str, user: &str, admin: bool) -> Result<(), TokenError> {
        self.insert(token, user, admin, false)
    }

    /// Generates, records and returns a fresh token for `user`.
    pub fn issue(&self, user: &str, admin: bool) -> Result<String, TokenError> {
        let mut raw = [0u8; TOKEN_BYTES];
        rand::rng().fill_bytes(&mut raw);
        let token = hex::encode(raw);
        self.insert(&token, user, admin, true)?;
        Ok(token)
    }

    /// Marks a token revoked. Returns false for unknown tokens.
    pub fn revoke(&self, token: &str) -> Result<bool, TokenError> {
        let mut records = self.records.write().unwrap();
        let Some(r) = records.get_mut(&digest(token)) else {
            return Ok(false);
        };
        r.revoked_us.get_or_insert(teleop_core::protocol::now_us());
        self.save(&records)?;
        Ok(true)
    }

    pub fn authenticate(&self, token: &str) -> Option<Principal> {
        let key = digest(token);
        if !self.records.read().unwrap().contains_key(&key) {
            self.reload();
        }
        let records = self.records.read().unwrap();
        let r = records.get(&key)?;
        if r.revoked_us.is_some() {
            return None;
        }
        Some(Principal {
            user_id: r.user_id.clone(),
            fingerprint: fingerprint(token),
            admin: r.admin,
        })
    }

    /// Merges records written by another process, e.g. `admin issue-token`
    /// while the server runs.
    fn reload(&self) {
        let Some(path) = &self.path else { return };
        let Ok(bytes) = std::fs::read(path) else { return };
        let Ok(file) = serde_json::from_slice::<TokenFile>(&bytes) else { return };
        let mut records = self.records.write().unwrap();
        for r in file.tokens.into_iter().filter(|r| valid_user_id(&r.user_id)) {
            records.insert(r.token_sha256.clone(), r);
        }
    }

    fn save(&self, records: &BTreeMap<String, TokenRecord>) -> Result<(), TokenError> {
        let Some(path) = &self.path else { return Ok(()) };
        let file = TokenFile {
            tokens: records.values().filter(|r| !r.provisioned).cloned().collect(),
        };
        let bytes = serde_json::to_vec_pretty(&file).expect("token file serializes");
        write_atomic(path, &bytes, None).map_err(|e| TokenError::File {
            path: path.clone(),
            message: e.to_string(),
        })
    }
}
