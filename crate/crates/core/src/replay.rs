//! Re-simulation of recorded episodes.

use crate::episode::{EpisodeLog, Record, TrackingMode};
use crate::protocol::TrackingPayload;
use crate::registry::{Registry, RegistryError};
use crate::session::{Session, SessionError, SessionParams, TrackingInput};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("robot model hash mismatch: episode has {recorded}, registry has {registered}")]
    ModelHash { recorded: String, registered: String },
    #[error("scene hash mismatch: episode has {recorded}, registry has {registered}")]
    SceneHash { recorded: String, registered: String },
    #[error("episode stores tracking digests only and cannot be replayed")]
    DigestOnly,
    #[error("episode dimensions (n={n}, m={m}) do not match the registered scene")]
    Dimensions { n: usize, m: usize },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("record {index}: stored tracking payload does not decode")]
    Tracking { index: usize },
}

/// Outcome of re-feeding an episode's tracking stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub ticks: usize,
    /// Records whose re-simulated bytes differ from the stored ones.
    pub diverging: usize,
    pub first_divergence: Option<u32>,
    /// Re-simulated records, aligned with the stored ones.
    pub records: Vec<Record>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.diverging == 0
    }
}

/// Rebuilds the episode's initial state and steps it once per record,
/// delivering each stored tracking payload on the tick it arrived.
pub fn replay(log: &EpisodeLog, registry: &Registry) -> Result<ReplayReport, ReplayError> {
    let meta = log.meta();
    let scene = registry.scene(&meta.scene_id)?.clone();
    if scene.model.hash != meta.model_hash {
        return Err(ReplayError::ModelHash {
            recorded: meta.model_hash.clone(),
            registered: scene.model.hash.clone(),
        });
    }
    if scene.scene.hash != meta.scene_hash {
        return Err(ReplayError::SceneHash {
            recorded: meta.scene_hash.clone(),
            registered: scene.scene.hash.clone(),
        });
    }
    if meta.tracking != TrackingMode::Inline {
        return Err(ReplayError::DigestOnly);
    }
    if (scene.model.dof(), scene.scene.objects.len()) != (meta.n, meta.m) {
        return Err(ReplayError::Dimensions { n: meta.n, m: meta.m });
    }
    let params = SessionParams {
        ik: meta.ik,
        tracking_mode: meta.tracking,
        ..SessionParams::default()
    };
    let mut session = Session::from_snapshot(0, scene, params, &meta.initial, meta.reset_seed)?;
    let mailbox = session.mailbox();
    let mut held = false;
    let mut carried = vec![false; log.records().len()];
    let mut report = ReplayReport {
        ticks: 0,
        diverging: 0,
        first_divergence: None,
        records: Vec::with_capacity(log.records().len()),
    };
    for (index, stored) in log.records().iter().enumerate() {
        let status = stored.status();
        if let (Some(bytes), Some(st)) = (stored.tracking_payload(), status) {
            // an input held over from before the episode shows up as
            // present-but-stale on the first record
            if st.fresh || !held {
                carried[index] = !st.fresh;
                let payload = TrackingPayload::decode(bytes).map_err(|_| ReplayError::Tracking { index })?;
                mailbox.post(TrackingInput {
                    seq: index as u32 + 1,
                    sent_us: 0,
                    received_us: 0,
                    payload,
                });
                held = true;
            }
        }
        session.step();
        report.ticks += 1;
    }
    if let Some(replayed) = session.end_episode() {
        report.records = replayed.records().to_vec();
    }
    for (i, stored) in log.records().iter().enumerate() {
        let same = report.records.get(i).is_some_and(|r| replay_equal(r, stored, carried[i]));
        if !same {
            report.diverging += 1;
            report.first_divergence.get_or_insert(stored.tick);
        }
    }
    Ok(report)
}

/// Byte equality. A `carried` record held an input from before the episode
/// that the replay had to deliver fresh, so its freshness bit is ignored.
fn replay_equal(a: &Record, b: &Record, carried: bool) -> bool {
    let (mut x, mut y) = (a.encode(), b.encode());
    if carried {
        if let (Some(lx), Some(ly)) = (x.last_mut(), y.last_mut()) {
            *lx &= !0b1000;
            *ly &= !0b1000;
        }
    }
    x == y
}
