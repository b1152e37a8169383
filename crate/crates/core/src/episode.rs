//! Episode container (`.dxe`).
//!
//! ```text
//! "DXE1" | metadata length (u32) | metadata (UTF-8 JSON) | records
//! ```
//!
//! Records have a fixed stride determined by the metadata:
//!
//! | field     | bytes                                      |
//! |-----------|--------------------------------------------|
//! | tick      | 4 (u32)                                    |
//! | sim_time  | 8 (f64)                                    |
//! | q         | 4n (f32)                                   |
//! | v_cmd     | 4n (f32)                                   |
//! | aperture  | 4 per gripper (f32, normalized command)    |
//! | tracking  | 700 inline payload, or 8-byte digest       |
//! | objects   | 28m (float32 pose)                         |
//! | status    | 1                                          |
//!
//! Status bits 0–1 hold the IK solve status, bit 2 is set when a tracking
//! payload was in effect and bit 3 when it arrived on this tick.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use crate::diffik::{IkParams, SolveStatus};
use crate::protocol::{WirePose, POSE_LEN, TRACKING_PAYLOAD_LEN};

pub const MAGIC: [u8; 4] = *b"DXE1";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "dxe";
pub const DIGEST_LEN: usize = 8;
/// Upper bound on the metadata block.
pub const MAX_METADATA_LEN: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrackingMode {
    /// Full 700-byte payload per record; the episode is replayable.
    #[default]
    Inline,
    /// First 8 bytes of the payload's SHA-256.
    Digest,
}

impl TrackingMode {
    pub fn field_len(self) -> usize {
        match self {
            TrackingMode::Inline => TRACKING_PAYLOAD_LEN,
            TrackingMode::Digest => DIGEST_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub object: usize,
    pub gripper: usize,
    /// Object pose in the gripper frame, `x y z qw qx qy qz`.
    pub offset: [f64; 7],
}

/// Exact simulation state at the start of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: u64,
    pub q: Vec<f64>,
    pub apertures: Vec<f64>,
    /// `x y z qw qx qy qz` per object.
    pub objects: Vec<[f64; 7]>,
    pub attached: Vec<Attachment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub format_version: u32,
    pub episode_id: Uuid,
    pub user_id: String,
    /// Hex prefix of the uploader token's SHA-256, empty when anonymous.
    pub token_fingerprint: String,
    pub scene_id: String,
    pub scene_hash: String,
    pub robot: String,
    pub model_hash: String,
    pub start_wall_us: u64,
    pub end_wall_us: u64,
    pub tick_count: u64,
    pub dt: f64,
    pub n: usize,
    pub m: usize,
    pub grippers: usize,
    pub tracking: TrackingMode,
    pub reset_seed: u64,
    pub ik: IkParams,
    pub initial: Snapshot,
}

impl EpisodeMeta {
    pub fn stride(&self) -> usize {
        record_stride(self.n, self.m, self.grippers, self.tracking)
    }
}

pub fn record_stride(n: usize, m: usize, grippers: usize, tracking: TrackingMode) -> usize {
    4 + 8 + 4 * n + 4 * n + 4 * grippers + tracking.field_len() + POSE_LEN * m + 1
}

/// Unpacked status byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordStatus {
    pub ik: SolveStatus,
    pub has_tracking: bool,
    pub fresh: bool,
}

impl RecordStatus {
    pub fn to_byte(self) -> u8 {
        self.ik.code() | (self.has_tracking as u8) << 2 | (self.fresh as u8) << 3
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        if b & 0xF0 != 0 {
            return None;
        }
        Some(Self {
            ik: SolveStatus::from_code(b & 0b11)?,
            has_tracking: b & 0b100 != 0,
            fresh: b & 0b1000 != 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub tick: u32,
    pub sim_time: f64,
    pub q: Vec<f32>,
    pub v_cmd: Vec<f32>,
    pub apertures: Vec<f32>,
    /// Inline payload or digest, zero-filled when no tracking was in effect.
    pub tracking: Vec<u8>,
    pub objects: Vec<WirePose>,
    pub status: u8,
}

impl Record {
    pub fn status(&self) -> Option<RecordStatus> {
        RecordStatus::from_byte(self.status)
    }

    /// Tracking payload bytes, if stored inline and present.
    pub fn tracking_payload(&self) -> Option<&[u8]> {
        let present = self.status().is_some_and(|s| s.has_tracking);
        (present && self.tracking.len() == TRACKING_PAYLOAD_LEN).then_some(self.tracking.as_slice())
    }

    /// The record's on-disk bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.tick.to_le_bytes());
        out.extend_from_slice(&self.sim_time.to_le_bytes());
        for v in self.q.iter().chain(&self.v_cmd).chain(&self.apertures) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.tracking);
        for o in &self.objects {
            for v in o.position.iter().chain(&o.orientation) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.push(self.status);
    }

    fn read(bytes: &[u8], meta: &EpisodeMeta) -> Self {
        let mut at = 0;
        let mut take = |len: usize| {
            let s = &bytes[at..at + len];
            at += len;
            s
        };
        let f32s = |b: &[u8]| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect() };
        let tick = u32::from_le_bytes(take(4).try_into().unwrap());
        let sim_time = f64::from_le_bytes(take(8).try_into().unwrap());
        let q = f32s(take(4 * meta.n));
        let v_cmd = f32s(take(4 * meta.n));
        let apertures = f32s(take(4 * meta.grippers));
        let tracking = take(meta.tracking.field_len()).to_vec();
        let objects = f32s(take(POSE_LEN * meta.m))
            .chunks_exact(7)
            .map(|c| WirePose {
                position: [c[0], c[1], c[2]],
                orientation: [c[3], c[4], c[5], c[6]],
            })
            .collect();
        let status = take(1)[0];
        Self {
            tick,
            sim_time,
            q,
            v_cmd,
            apertures,
            tracking,
            objects,
            status,
        }
    }
}

/// First 8 bytes of the SHA-256 of a tracking payload.
pub fn tracking_digest(payload: &[u8]) -> [u8; DIGEST_LEN] {
    Sha256::digest(payload)[..DIGEST_LEN].try_into().unwrap()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EpisodeError {
    #[error("episode has no records")]
    Empty,
    #[error("bad magic at byte 0")]
    BadMagic,
    #[error("truncated at byte {offset}: {what} needs {needed} more bytes")]
    Truncated {
        offset: usize,
        what: &'static str,
        needed: usize,
    },
    #[error("metadata at byte {offset}: {message}")]
    Metadata { offset: usize, message: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("record {index} at byte {offset}: tick {got}, expected {expected}")]
    TickGap {
        index: usize,
        offset: usize,
        expected: u64,
        got: u32,
    },
    #[error("metadata declares {declared} ticks, file holds {found} records (ends at byte {offset})")]
    TickCount {
        declared: u64,
        found: usize,
        offset: usize,
    },
    #[error("record {index}: {message}")]
    RecordShape { index: usize, message: String },
}

/// A finalized episode: metadata plus records that passed integrity checks.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    meta: EpisodeMeta,
    records: Vec<Record>,
}

impl EpisodeLog {
    /// Validates and seals an episode.
    pub fn new(mut meta: EpisodeMeta, records: Vec<Record>) -> Result<Self, EpisodeError> {
        if records.is_empty() {
            return Err(EpisodeError::Empty);
        }
        meta.tick_count = records.len() as u64;
        let header = 8 + meta_json(&meta).len();
        check_records(&meta, &records, header)?;
        Ok(Self { meta, records })
    }

    pub fn meta(&self) -> &EpisodeMeta {
        &self.meta
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn id(&self) -> Uuid {
        self.meta.episode_id
    }

    /// Attribution is assigned by whoever persists the episode.
    pub fn set_owner(&mut self, user_id: &str, token_fingerprint: &str) {
        self.meta.user_id = user_id.to_string();
        self.meta.token_fingerprint = token_fingerprint.to_string();
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = meta_json(&self.meta);
        let stride = self.meta.stride();
        let mut out = Vec::with_capacity(8 + json.len() + stride * self.records.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for r in &self.records {
            r.write(&mut out);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, EpisodeError> {
        if bytes.len() < 8 {
            if bytes.len() < 4 || bytes[..4] == MAGIC {
                return Err(EpisodeError::Truncated {
                    offset: bytes.len(),
                    what: "header",
                    needed: 8 - bytes.len(),
                });
            }
        }
        if bytes[..4] != MAGIC {
            return Err(EpisodeError::BadMagic);
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if len > MAX_METADATA_LEN {
            return Err(EpisodeError::Metadata {
                offset: 4,
                message: format!("length {len} exceeds limit"),
            });
        }
        if bytes.len() < 8 + len {
            return Err(EpisodeError::Truncated {
                offset: bytes.len(),
                what: "metadata",
                needed: 8 + len - bytes.len(),
            });
        }
        let meta: EpisodeMeta = serde_json::from_slice(&bytes[8..8 + len]).map_err(|e| EpisodeError::Metadata {
            offset: 8,
            message: e.to_string(),
        })?;
        if meta.format_version != FORMAT_VERSION {
            return Err(EpisodeError::UnsupportedVersion(meta.format_version));
        }
        let stride = meta.stride();
        let body = &bytes[8 + len..];
        let whole = body.len() / stride;
        if body.len() % stride != 0 {
            let offset = 8 + len + whole * stride;
            return Err(EpisodeError::Truncated {
                offset: bytes.len(),
                what: "record",
                needed: stride - (bytes.len() - offset),
            });
        }
        if whole as u64 != meta.tick_count {
            return Err(EpisodeError::TickCount {
                declared: meta.tick_count,
                found: whole,
                offset: bytes.len(),
            });
        }
        let records: Vec<Record> = body.chunks_exact(stride).map(|c| Record::read(c, &meta)).collect();
        if records.is_empty() {
            return Err(EpisodeError::Empty);
        }
        check_records(&meta, &records, 8 + len)?;
        Ok(Self { meta, records })
    }

    /// Hex SHA-256 of the serialized file.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn meta_json(meta: &EpisodeMeta) -> Vec<u8> {
    serde_json::to_vec(meta).expect("metadata serializes")
}

fn check_records(meta: &EpisodeMeta, records: &[Record], header_len: usize) -> Result<(), EpisodeError> {
    let stride = meta.stride();
    let start = meta.initial.tick + 1;
    for (i, r) in records.iter().enumerate() {
        let shape = |message: &str| EpisodeError::RecordShape {
            index: i,
            message: message.to_string(),
        };
        if r.q.len() != meta.n || r.v_cmd.len() != meta.n {
            return Err(shape("joint count differs from metadata"));
        }
        if r.objects.len() != meta.m {
            return Err(shape("object count differs from metadata"));
        }
        if r.apertures.len() != meta.grippers {
            return Err(shape("gripper count differs from metadata"));
        }
        if r.tracking.len() != meta.tracking.field_len() {
            return Err(shape("tracking field length differs from mode"));
        }
        if r.status().is_none() {
            return Err(shape("invalid status byte"));
        }
        let expected = start + i as u64;
        if r.tick as u64 != expected {
            return Err(EpisodeError::TickGap {
                index: i,
                offset: header_len + i * stride,
                expected,
                got: r.tick,
            });
        }
    }
    Ok(())
}

/// Accumulates records for the episode in progress.
#[derive(Debug, Clone)]
pub struct Recorder {
    meta: EpisodeMeta,
    records: Vec<Record>,
}

impl Recorder {
    pub fn new(meta: EpisodeMeta) -> Self {
        Self { meta, records: Vec::new() }
    }

    pub fn id(&self) -> Uuid {
        self.meta.episode_id
    }

    pub fn meta(&self) -> &EpisodeMeta {
        &self.meta
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn finish(mut self, end_wall_us: u64) -> Result<EpisodeLog, EpisodeError> {
        self.meta.end_wall_us = end_wall_us;
        EpisodeLog::new(self.meta, self.records)
    }
}
