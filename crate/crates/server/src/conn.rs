//! Per-connection packet loop, shared by the TCP stream and the `/ws` bridge.

use std::sync::Arc;

use futures_util::{Stream, StreamExt};
use teleop_core::protocol::{Body, Packet, SeqFilter, StreamError};
use teleop_core::session::TrackingInput;
use tokio::io::{AsyncRead, AsyncWrite, AsyncWriteExt};
use tokio::sync::mpsc;

use crate::host::{Bound, Host, SEND_QUEUE};

/// Runs one connection until the peer leaves, the frames stop making sense,
/// or another connection takes the session over.
///
/// `incoming` yields packets without their length prefix; `tx` carries
/// complete frames back to the transport.
pub async fn serve_packets<S>(host: Arc<Host>, mut incoming: S, tx: mpsc::Sender<Vec<u8>>, peer: &str)
where
    S: Stream<Item = Result<Vec<u8>, StreamError>> + Unpin,
{
    let mut filter = SeqFilter::default();
    let mut tx = Some(tx);
    let mut bound: Option<Bound> = None;
    while let Some(item) = incoming.next().await {
        let packet = match item.and_then(|f| Packet::decode(&f).map_err(StreamError::from)) {
            Ok(p) => p,
            Err(e) => {
                tracing::warn!(peer, error = %e, "dropping connection");
                break;
            }
        };
        if let Some(b) = &bound {
            if !host.is_current(b) {
                tracing::info!(peer, session = b.session, "superseded by a newer connection");
                return;
            }
        }
        if !filter.accept(packet.header.seq) {
            if let Some(b) = &bound {
                host.note_dropped(b.session);
            }
            continue;
        }
        let Some(b) = &bound else {
            let Some(sender) = tx.take() else { break };
            match host.handshake(&packet, sender.clone()) {
                Ok(b) => bound = Some(b),
                Err(refusal) => {
                    let _ = sender.send(refusal).await;
                    break;
                }
            }
            continue;
        };
        match packet.body {
            Body::Tracking(payload) if packet.header.session_id == b.session => {
                b.mailbox.post(TrackingInput::new(packet.header.seq, packet.header.timestamp_us, payload));
            }
            Body::Control(c) if packet.header.session_id == b.session => {
                host.control(b.session, packet.header.seq, &c);
            }
            _ => {}
        }
    }
    if let Some(b) = &bound {
        host.detach(b);
    }
}

/// Serves a byte-stream transport such as a TCP socket.
pub async fn serve_stream<R, W>(host: Arc<Host>, reader: R, mut writer: W, peer: String)
where
    R: AsyncRead + Unpin + Send + 'static,
    W: AsyncWrite + Unpin + Send + 'static,
{
    let (tx, mut rx) = mpsc::channel::<Vec<u8>>(SEND_QUEUE);
    let write = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if writer.write_all(&frame).await.is_err() {
                break;
            }
            // drain whatever queued meanwhile before flushing
            while let Ok(more) = rx.try_recv() {
                if writer.write_all(&more).await.is_err() {
                    return;
                }
            }
            if writer.flush().await.is_err() {
                break;
            }
        }
        let _ = writer.shutdown().await;
    });
    let frames = futures_util::stream::unfold(reader, |mut r| async move {
        match teleop_core::protocol::read_frame(&mut r).await {
            Ok(Some(f)) => Some((Ok(f), r)),
            Ok(None) => None,
            Err(e) => Some((Err(e), r)),
        }
    });
    serve_packets(host, Box::pin(frames), tx, &peer).await;
    // the writer ends once the session link drops its sender
    let _ = write.await;
}
