use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::hand::{HandFrame, Handedness, Keypoint, KEYPOINT_COUNT};

pub const MAGIC: [u8; 2] = *b"DX";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
/// Bytes per SE(3) pose: 3 position + 4 quaternion float32.
pub const POSE_LEN: usize = 28;
pub const TRACKING_PAYLOAD_LEN: usize = KEYPOINT_COUNT * POSE_LEN;
pub const MAX_CONTROL_ARG: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PacketKind {
    Tracking = 1,
    State = 2,
    Control = 3,
    Ack = 4,
}

impl PacketKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(PacketKind::Tracking),
            2 => Some(PacketKind::State),
            3 => Some(PacketKind::Control),
            4 => Some(PacketKind::Ack),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown packet kind {0}")]
    UnknownKind(u8),
    #[error("truncated packet: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("expected {expected:?} packet, got {got:?}")]
    KindMismatch { expected: PacketKind, got: PacketKind },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("unknown control op {0}")]
    BadControlOp(u8),
    #[error("string field is not valid UTF-8")]
    Utf8,
}

impl DecodeError {
    /// Stable numeric code per error class.
    pub fn code(&self) -> u16 {
        match self {
            DecodeError::BadMagic(_) => 1,
            DecodeError::BadVersion(_) => 2,
            DecodeError::Truncated { .. } => 3,
            DecodeError::KindMismatch { .. } => 4,
            DecodeError::UnknownKind(_) => 5,
            DecodeError::TrailingBytes(_) => 6,
            DecodeError::BadControlOp(_) => 7,
            DecodeError::Utf8 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHeader {
    pub kind: PacketKind,
    pub session_id: u32,
    pub seq: u32,
    pub timestamp_us: u64,
}

impl PacketHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..2].copy_from_slice(&MAGIC);
        out[2] = VERSION;
        out[3] = self.kind as u8;
        out[4..8].copy_from_slice(&self.session_id.to_le_bytes());
        out[8..12].copy_from_slice(&self.seq.to_le_bytes());
        out[12..20].copy_from_slice(&self.timestamp_us.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < HEADER_LEN {
            return Err(DecodeError::Truncated {
                needed: HEADER_LEN,
                got: bytes.len(),
            });
        }
        if bytes[..2] != MAGIC {
            return Err(DecodeError::BadMagic([bytes[0], bytes[1]]));
        }
        if bytes[2] != VERSION {
            return Err(DecodeError::BadVersion(bytes[2]));
        }
        let kind = PacketKind::from_byte(bytes[3]).ok_or(DecodeError::UnknownKind(bytes[3]))?;
        Ok(Self {
            kind,
            session_id: u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            seq: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            timestamp_us: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
        })
    }
}

/// Float32 SE(3) pose as carried on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WirePose {
    pub position: [f32; 3],
    /// (w, x, y, z)
    pub orientation: [f32; 4],
}

impl WirePose {
    pub fn from_f64(position: &Vector3<f64>, orientation: &UnitQuaternion<f64>) -> Self {
        let q = orientation.quaternion();
        Self {
            position: [position.x as f32, position.y as f32, position.z as f32],
            orientation: [q.w as f32, q.i as f32, q.j as f32, q.k as f32],
        }
    }

    pub fn position_f64(&self) -> Vector3<f64> {
        Vector3::new(self.position[0] as f64, self.position[1] as f64, self.position[2] as f64)
    }

    /// Renormalized orientation (float32 rounding leaves it unit within ~1e-7).
    pub fn orientation_f64(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation.map(|v| v as f64);
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    fn write(&self, out: &mut Vec<u8>) {
        for v in self.position.iter().chain(&self.orientation) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read(bytes: &[u8]) -> Self {
        let f = |i: usize| f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        Self {
            position: [f(0), f(1), f(2)],
            orientation: [f(3), f(4), f(5), f(6)],
        }
    }
}

/// 25 keypoint poses, 700 bytes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingPayload(pub [WirePose; KEYPOINT_COUNT]);

impl TrackingPayload {
    pub fn from_frame(frame: &HandFrame) -> Self {
        Self(frame.keypoints.map(|k| WirePose::from_f64(&k.position, &k.orientation)))
    }

    pub fn to_frame(&self, timestamp_us: u64) -> HandFrame {
        HandFrame {
            keypoints: self.0.map(|p| Keypoint {
                position: p.position_f64(),
                orientation: p.orientation_f64(),
            }),
            timestamp_us,
            handedness: Handedness::Right,
        }
    }

    pub fn encode(&self) -> [u8; TRACKING_PAYLOAD_LEN] {
        let mut out = Vec::with_capacity(TRACKING_PAYLOAD_LEN);
        for p in &self.0 {
            p.write(&mut out);
        }
        out.try_into().expect("25 poses are 700 bytes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        exact_len(bytes, TRACKING_PAYLOAD_LEN)?;
        let mut poses = [WirePose::default(); KEYPOINT_COUNT];
        for (i, p) in poses.iter_mut().enumerate() {
            *p = WirePose::read(&bytes[i * POSE_LEN..]);
        }
        Ok(Self(poses))
    }
}

/// Joint values and object poses, `4 + 4n + 28m` bytes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StatePayload {
    pub joints: Vec<f32>,
    pub objects: Vec<WirePose>,
}

impl StatePayload {
    pub fn encoded_len(n: usize, m: usize) -> usize {
        4 + 4 * n + POSE_LEN * m
    }

    pub fn encode(&self) -> Vec<u8> {
        assert!(self.joints.len() <= u16::MAX as usize && self.objects.len() <= u16::MAX as usize);
        let mut out = Vec::with_capacity(Self::encoded_len(self.joints.len(), self.objects.len()));
        out.extend_from_slice(&(self.joints.len() as u16).to_le_bytes());
        out.extend_from_slice(&(self.objects.len() as u16).to_le_bytes());
        for j in &self.joints {
            out.extend_from_slice(&j.to_le_bytes());
        }
        for o in &self.objects {
            o.write(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        at_least(bytes, 4)?;
        let n = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        let m = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
        exact_len(bytes, Self::encoded_len(n, m))?;
        let joints = (0..n)
            .map(|i| f32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()))
            .collect();
        let base = 4 + 4 * n;
        let objects = (0..m).map(|i| WirePose::read(&bytes[base + POSE_LEN * i..])).collect();
        Ok(Self { joints, objects })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ControlOp {
    Reset = 1,
    SwitchTask = 2,
    StartEpisode = 3,
    EndEpisode = 4,
}

impl ControlOp {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(ControlOp::Reset),
            2 => Some(ControlOp::SwitchTask),
            3 => Some(ControlOp::StartEpisode),
            4 => Some(ControlOp::EndEpisode),
            _ => None,
        }
    }
}

/// `op (u8) | arg length (u8) | arg (UTF-8) | seed (u64)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlPayload {
    pub op: ControlOp,
    pub arg: String,
    /// Reset randomization seed, 0 lets the server choose.
    pub seed: u64,
}

impl ControlPayload {
    pub fn new(op: ControlOp, arg: impl Into<String>, seed: u64) -> Self {
        let mut arg = arg.into();
        truncate_utf8(&mut arg, MAX_CONTROL_ARG);
        Self { op, arg, seed }
    }

    pub fn encode(&self) -> Vec<u8> {
        let arg = self.arg.as_bytes();
        let len = arg.len().min(MAX_CONTROL_ARG);
        let mut out = Vec::with_capacity(10 + len);
        out.push(self.op as u8);
        out.push(len as u8);
        out.extend_from_slice(&arg[..len]);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        at_least(bytes, 2)?;
        let op = ControlOp::from_byte(bytes[0]).ok_or(DecodeError::BadControlOp(bytes[0]))?;
        let len = bytes[1] as usize;
        exact_len(bytes, 2 + len + 8)?;
        let arg = std::str::from_utf8(&bytes[2..2 + len]).map_err(|_| DecodeError::Utf8)?.to_string();
        let seed = u64::from_le_bytes(bytes[2 + len..].try_into().unwrap());
        Ok(Self { op, arg, seed })
    }
}

/// Server-to-client acknowledgement codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AckCode {
    /// Session bound; message is `<scene_id> <n> <m>`.
    Bound = 0,
    UnknownScene = 1,
    Capacity = 2,
    UnknownSession = 3,
    /// Episode persisted; message is the episode id.
    EpisodeStored = 4,
    /// Episode closed without a file (zero records or store refused it).
    EpisodeDiscarded = 5,
    Unauthorized = 6,
    /// Tracking packet `acked_seq` was consumed by a simulation step.
    Consumed = 7,
    /// Control applied; message is `<scene_id> <n> <m>`.
    Applied = 8,
}

impl AckCode {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => AckCode::Bound,
            1 => AckCode::UnknownScene,
            2 => AckCode::Capacity,
            3 => AckCode::UnknownSession,
            4 => AckCode::EpisodeStored,
            5 => AckCode::EpisodeDiscarded,
            6 => AckCode::Unauthorized,
            7 => AckCode::Consumed,
            8 => AckCode::Applied,
            _ => return None,
        })
    }
}

/// `acked seq (u32) | code (u8) | message length (u8) | message (UTF-8)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckPayload {
    pub acked_seq: u32,
    pub code: AckCode,
    pub message: String,
}

impl AckPayload {
    pub fn new(acked_seq: u32, code: AckCode, message: impl Into<String>) -> Self {
        let mut message = message.into();
        truncate_utf8(&mut message, MAX_CONTROL_ARG);
        Self {
            acked_seq,
            code,
            message,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let msg = self.message.as_bytes();
        let len = msg.len().min(MAX_CONTROL_ARG);
        let mut out = Vec::with_capacity(6 + len);
        out.extend_from_slice(&self.acked_seq.to_le_bytes());
        out.push(self.code as u8);
        out.push(len as u8);
        out.extend_from_slice(&msg[..len]);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        at_least(bytes, 6)?;
        let code = AckCode::from_byte(bytes[4]).ok_or(DecodeError::UnknownKind(bytes[4]))?;
        let len = bytes[5] as usize;
        exact_len(bytes, 6 + len)?;
        Ok(Self {
            acked_seq: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
            code,
            message: std::str::from_utf8(&bytes[6..]).map_err(|_| DecodeError::Utf8)?.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Tracking(TrackingPayload),
    State(StatePayload),
    Control(ControlPayload),
    Ack(AckPayload),
}

impl Body {
    pub fn kind(&self) -> PacketKind {
        match self {
            Body::Tracking(_) => PacketKind::Tracking,
            Body::State(_) => PacketKind::State,
            Body::Control(_) => PacketKind::Control,
            Body::Ack(_) => PacketKind::Ack,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Body::Tracking(p) => p.encode().to_vec(),
            Body::State(p) => p.encode(),
            Body::Control(p) => p.encode(),
            Body::Ack(p) => p.encode(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub header: PacketHeader,
    pub body: Body,
}

impl Packet {
    /// Header followed by payload (no length prefix).
    pub fn encode(&self) -> Vec<u8> {
        debug_assert_eq!(self.header.kind, self.body.kind());
        let mut out = self.header.encode().to_vec();
        out.extend_from_slice(&self.body.encode());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let header = PacketHeader::decode(bytes)?;
        let payload = &bytes[HEADER_LEN..];
        let body = match header.kind {
            PacketKind::Tracking => Body::Tracking(TrackingPayload::decode(payload)?),
            PacketKind::State => Body::State(StatePayload::decode(payload)?),
            PacketKind::Control => Body::Control(ControlPayload::decode(payload)?),
            PacketKind::Ack => Body::Ack(AckPayload::decode(payload)?),
        };
        Ok(Self { header, body })
    }
}

fn expect_kind(header: &PacketHeader, expected: PacketKind) -> Result<(), DecodeError> {
    if header.kind != expected {
        return Err(DecodeError::KindMismatch {
            expected,
            got: header.kind,
        });
    }
    Ok(())
}

/// Encodes a hand frame as a full tracking packet.
pub fn encode_tracking(frame: &HandFrame, session_id: u32, seq: u32) -> Vec<u8> {
    Packet {
        header: PacketHeader {
            kind: PacketKind::Tracking,
            session_id,
            seq,
            timestamp_us: frame.timestamp_us,
        },
        body: Body::Tracking(TrackingPayload::from_frame(frame)),
    }
    .encode()
}

/// Decodes a tracking packet; the frame timestamp is the header timestamp.
pub fn decode_tracking(bytes: &[u8]) -> Result<(PacketHeader, HandFrame), DecodeError> {
    let header = PacketHeader::decode(bytes)?;
    expect_kind(&header, PacketKind::Tracking)?;
    let payload = TrackingPayload::decode(&bytes[HEADER_LEN..])?;
    Ok((header, payload.to_frame(header.timestamp_us)))
}

pub fn encode_state(state: &StatePayload, session_id: u32, seq: u32, timestamp_us: u64) -> Vec<u8> {
    Packet {
        header: PacketHeader {
            kind: PacketKind::State,
            session_id,
            seq,
            timestamp_us,
        },
        body: Body::State(state.clone()),
    }
    .encode()
}

pub fn decode_state(bytes: &[u8]) -> Result<(PacketHeader, StatePayload), DecodeError> {
    let header = PacketHeader::decode(bytes)?;
    expect_kind(&header, PacketKind::State)?;
    Ok((header, StatePayload::decode(&bytes[HEADER_LEN..])?))
}

fn at_least(bytes: &[u8], needed: usize) -> Result<(), DecodeError> {
    if bytes.len() < needed {
        return Err(DecodeError::Truncated {
            needed,
            got: bytes.len(),
        });
    }
    Ok(())
}

fn exact_len(bytes: &[u8], needed: usize) -> Result<(), DecodeError> {
    at_least(bytes, needed)?;
    if bytes.len() > needed {
        return Err(DecodeError::TrailingBytes(bytes.len() - needed));
    }
    Ok(())
}

fn truncate_utf8(s: &mut String, max: usize) {
    if s.len() > max {
        let mut cut = max;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
    }
}

/// Byte sizes reproducing the packet-size comparison table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketSizeReport {
    pub n: usize,
    pub m: usize,
    /// 25 keypoints × SE(3).
    pub tracking: usize,
    /// 26 poses (hand plus head) × SE(3).
    pub tracking_with_head: usize,
    /// Joint and object data, `4n + 28m`.
    pub state: usize,
    /// State payload as encoded, including the 4-byte count prefix.
    pub state_encoded: usize,
    /// Two 480×640 RGB uint8 images.
    pub stereo_baseline: usize,
    pub ratio: f64,
}

pub const STEREO_BASELINE_BYTES: usize = 2 * 480 * 640 * 3;

/// Packet sizes for a robot with `n` joints and a scene with `m` objects.
///
/// The ratio divides the stereo baseline by the state data size; an empty
/// state still puts its count prefix on the wire, so that is the divisor.
pub fn packet_size_report(n: usize, m: usize) -> PacketSizeReport {
    let state = 4 * n + POSE_LEN * m;
    let state_encoded = StatePayload::encoded_len(n, m);
    let divisor = if state == 0 { state_encoded } else { state };
    PacketSizeReport {
        n,
        m,
        tracking: TRACKING_PAYLOAD_LEN,
        tracking_with_head: (KEYPOINT_COUNT + 1) * POSE_LEN,
        state: if state == 0 { state_encoded } else { state },
        state_encoded,
        stereo_baseline: STEREO_BASELINE_BYTES,
        ratio: STEREO_BASELINE_BYTES as f64 / divisor as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand::HandRig;
    use nalgebra::Isometry3;

    #[test]
    fn tracking_payload_is_700_bytes() {
        let f = HandRig.frame(&Isometry3::translation(0.1, 0.2, 0.3), 0.4, 17);
        let bytes = encode_tracking(&f, 9, 3);
        assert_eq!(bytes.len(), HEADER_LEN + 700);
        assert_eq!(TrackingPayload::from_frame(&f).encode().len(), 25 * 28);
    }

    #[test]
    fn first_keypoint_golden_bytes() {
        let mut f = HandFrame::collapsed(Vector3::zeros(), 0);
        f.keypoints[0].position = Vector3::new(1.0, 2.0, 3.0);
        let payload = TrackingPayload::from_frame(&f).encode();
        let expected: Vec<u8> = [1.0f32, 2.0, 3.0, 1.0, 0.0, 0.0, 0.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        assert_eq!(&payload[..28], expected.as_slice());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let f = HandFrame::collapsed(Vector3::zeros(), 0);
        let good = encode_tracking(&f, 1, 1);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let mut bad_version = good.clone();
        bad_version[2] = 2;
        let truncated = &good[..good.len() - 1];
        let state = encode_state(&StatePayload::default(), 1, 1, 0);
        let errs = [
            decode_tracking(&bad_magic).unwrap_err(),
            decode_tracking(&bad_version).unwrap_err(),
            decode_tracking(truncated).unwrap_err(),
            decode_tracking(&state).unwrap_err(),
        ];
        let mut codes: Vec<u16> = errs.iter().map(|e| e.code()).collect();
        codes.dedup();
        assert_eq!(codes.len(), 4, "{errs:?}");
    }

    #[test]
    fn state_sizes() {
        assert_eq!(StatePayload::default().encode().len(), 4);
        let p = StatePayload {
            joints: vec![0.0; 58],
            objects: vec![WirePose::default(); 50],
        };
        assert_eq!(p.encode().len(), 4 + 1632);
    }

    #[test]
    fn control_round_trip() {
        let c = ControlPayload::new(ControlOp::SwitchTask, "mug_basket", 0);
        assert_eq!(ControlPayload::decode(&c.encode()).unwrap(), c);
        assert!(matches!(ControlPayload::decode(&[9, 0]), Err(DecodeError::BadControlOp(9))));
        let long = ControlPayload::new(ControlOp::Reset, "é".repeat(200), 1);
        assert!(long.arg.len() <= MAX_CONTROL_ARG);
    }

    #[test]
    fn size_report_rows() {
        let r = packet_size_report(58, 50);
        assert_eq!(
            (r.tracking, r.tracking_with_head, r.state, r.stereo_baseline),
            (700, 728, 1632, 1_843_200)
        );
        assert!(r.ratio > 1000.0);
        assert_eq!(r.ratio.round(), 1129.0);
        let empty = packet_size_report(0, 0);
        assert_eq!(empty.state, 4);
        assert_eq!(empty.ratio, 460_800.0);
    }
}
