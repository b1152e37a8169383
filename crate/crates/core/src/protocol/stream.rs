use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use super::codec::{Body, DecodeError, Packet, PacketHeader, HEADER_LEN};
use super::now_us;

/// Upper bound on a single framed packet.
pub const MAX_FRAME_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FramingError {
    #[error("frame length {0} outside [{HEADER_LEN}, {MAX_FRAME_LEN}]")]
    BadLength(usize),
}

/// Prefixes an encoded packet with its u32 length.
pub fn encode_frame(packet: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + packet.len());
    out.extend_from_slice(&(packet.len() as u32).to_le_bytes());
    out.extend_from_slice(packet);
    out
}

fn check_len(len: usize) -> Result<(), FramingError> {
    if !(HEADER_LEN..=MAX_FRAME_LEN).contains(&len) {
        return Err(FramingError::BadLength(len));
    }
    Ok(())
}

/// Incremental length-prefix decoder for arbitrarily split input.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, `Ok(None)` when more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, FramingError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(self.buf[..4].try_into().unwrap()) as usize;
        check_len(len)?;
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let frame = self.buf[4..4 + len].to_vec();
        self.buf.drain(..4 + len);
        Ok(Some(frame))
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Framing(#[from] FramingError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Reads one frame; `Ok(None)` on clean EOF at a frame boundary.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Vec<u8>>, StreamError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    check_len(len)?;
    let mut frame = vec![0u8; len];
    r.read_exact(&mut frame).await?;
    Ok(Some(frame))
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, packet: &[u8]) -> std::io::Result<()> {
    w.write_all(&encode_frame(packet)).await?;
    w.flush().await
}

/// Drops packets whose sequence number is not strictly greater than the last
/// accepted one.
#[derive(Debug, Clone, Default)]
pub struct SeqFilter {
    last: Option<u32>,
    dropped: u64,
}

impl SeqFilter {
    pub fn accept(&mut self, seq: u32) -> bool {
        if self.last.is_some_and(|last| seq <= last) {
            self.dropped += 1;
            return false;
        }
        self.last = Some(seq);
        true
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn last(&self) -> Option<u32> {
        self.last
    }
}

/// Reading half of a packet stream with stale-sequence filtering.
pub struct PacketReader<R> {
    inner: R,
    filter: SeqFilter,
}

impl<R: AsyncRead + Unpin> PacketReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            filter: SeqFilter::default(),
        }
    }

    /// Next in-order packet, `Ok(None)` at EOF.
    pub async fn recv(&mut self) -> Result<Option<Packet>, StreamError> {
        loop {
            let Some(frame) = read_frame(&mut self.inner).await? else {
                return Ok(None);
            };
            let packet = Packet::decode(&frame)?;
            if self.filter.accept(packet.header.seq) {
                return Ok(Some(packet));
            }
        }
    }

    pub fn dropped(&self) -> u64 {
        self.filter.dropped()
    }
}

/// Writing half; stamps headers with a monotonically increasing sequence.
pub struct PacketWriter<W> {
    inner: W,
    session_id: u32,
    next_seq: u32,
}

impl<W: AsyncWrite + Unpin> PacketWriter<W> {
    pub fn new(inner: W, session_id: u32) -> Self {
        Self {
            inner,
            session_id,
            next_seq: 1,
        }
    }

    pub fn set_session(&mut self, session_id: u32) {
        self.session_id = session_id;
    }

    pub fn session_id(&self) -> u32 {
        self.session_id
    }

    /// Sends `body` timestamped now, returning the sequence number used.
    pub async fn send(&mut self, body: Body) -> std::io::Result<u32> {
        self.send_at(body, now_us()).await
    }

    pub async fn send_at(&mut self, body: Body, timestamp_us: u64) -> std::io::Result<u32> {
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        let packet = Packet {
            header: PacketHeader {
                kind: body.kind(),
                session_id: self.session_id,
                seq,
                timestamp_us,
            },
            body,
        };
        write_frame(&mut self.inner, &packet.encode()).await?;
        Ok(seq)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{AckCode, AckPayload};

    #[test]
    fn decoder_handles_split_input() {
        let a = encode_frame(&[7u8; 20]);
        let b = encode_frame(&[9u8; 25]);
        let all: Vec<u8> = a.iter().chain(&b).copied().collect();
        let mut dec = FrameDecoder::default();
        let mut out = Vec::new();
        for chunk in all.chunks(3) {
            dec.push(chunk);
            while let Some(f) = dec.next_frame().unwrap() {
                out.push(f);
            }
        }
        assert_eq!(out, vec![vec![7u8; 20], vec![9u8; 25]]);
        assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn decoder_rejects_short_length() {
        let mut dec = FrameDecoder::default();
        dec.push(&3u32.to_le_bytes());
        assert_eq!(dec.next_frame(), Err(FramingError::BadLength(3)));
    }

    #[test]
    fn seq_filter_drops_stale() {
        let mut f = SeqFilter::default();
        assert!(f.accept(1));
        assert!(f.accept(3));
        assert!(!f.accept(2));
        assert!(!f.accept(3));
        assert!(f.accept(4));
        assert_eq!(f.dropped(), 2);
    }

    #[tokio::test]
    async fn duplex_round_trip() {
        let (a, b) = tokio::io::duplex(4096);
        let mut w = PacketWriter::new(a, 5);
        let mut r = PacketReader::new(b);
        w.send(Body::Ack(AckPayload::new(1, AckCode::Consumed, ""))).await.unwrap();
        let p = r.recv().await.unwrap().unwrap();
        assert_eq!(p.header.session_id, 5);
        assert_eq!(p.header.seq, 1);
        drop(w);
        assert!(r.recv().await.unwrap().is_none());
    }
}
