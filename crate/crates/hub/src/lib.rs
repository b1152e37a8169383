//! Episode hub: a directory store for recorded episodes with per-user
//! attribution, and the token-authenticated HTTP API in front of it.

pub mod api;
pub mod store;
pub mod tokens;

pub use store::{Fault, Index, IndexEntry, Store, StoreError, Stored};
pub use tokens::{Principal, TokenError, Tokens};

/// Default cap on a single upload.
pub const DEFAULT_MAX_UPLOAD: usize = 256 << 20;

#[derive(Debug)]
pub struct Hub {
    pub store: Store,
    pub tokens: Tokens,
    pub max_upload_bytes: usize,
}

impl Hub {
    pub fn new(store: Store, tokens: Tokens) -> Self {
        Self {
            store,
            tokens,
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
        }
    }
}
