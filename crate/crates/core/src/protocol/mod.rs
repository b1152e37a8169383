//! Binary packet formats and the framed duplex stream.
//!
//! Every packet is a 20-byte header followed by a kind-specific payload.
//! All integers and floats are little-endian; quaternions are scalar-first.
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 2    | magic `DX`                              |
//! | 2      | 1    | version (1)                             |
//! | 3      | 1    | kind: 1 tracking, 2 state, 3 control, 4 ack |
//! | 4      | 4    | session id (u32)                        |
//! | 8      | 4    | sequence number (u32), per direction    |
//! | 12     | 8    | sender timestamp, µs since Unix epoch   |
//!
//! On a byte stream each packet is prefixed with its length as a u32.

mod codec;
mod mailbox;
mod stream;

pub use codec::*;
pub use mailbox::{Mailbox, MailboxStats};
pub use stream::{
    encode_frame, read_frame, write_frame, FrameDecoder, FramingError, PacketReader, PacketWriter, SeqFilter,
    StreamError, MAX_FRAME_LEN,
};

/// Microseconds since the Unix epoch.
pub fn now_us() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}
