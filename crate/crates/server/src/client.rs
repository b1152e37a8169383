//! Stream client used by `synth` and `report latency`.
//!
//! Sending and receiving run independently: the receive task decodes every
//! incoming packet, counts state packets and forwards acks over a channel.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion};
use teleop_core::hand::HandRig;
use teleop_core::protocol::{
    now_us, AckCode, AckPayload, Body, ControlOp, ControlPayload, PacketReader, PacketWriter, StatePayload,
    TrackingPayload,
};
use teleop_core::script::{Event, Script, OPERATOR_RATE_HZ};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio::time::Instant;
use uuid::Uuid;

/// Simulated seconds the session keeps running after the last directive.
pub const SETTLE_S: f64 = 0.5;
/// How long to wait for the final episode ack.
pub const ACK_TIMEOUT: Duration = Duration::from_secs(15);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot connect to {addr}: {source}")]
    Connect { addr: String, source: std::io::Error },
    #[error("server refused the session ({code:?}): {message}")]
    Refused { code: AckCode, message: String },
    #[error("connection lost: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("script: {0}")]
    Script(String),
    #[error("http: {0}")]
    Http(String),
}

/// Counters updated by the receive task.
#[derive(Debug, Default)]
pub struct Received {
    pub states: AtomicU64,
    /// Distinct (n, m) state shapes in arrival order.
    pub shapes: Mutex<Vec<(usize, usize)>>,
    /// Packets dropped by the receive sequence filter.
    pub stale: AtomicU64,
    pub latest: Mutex<Option<StatePayload>>,
}

#[derive(Debug, Clone)]
pub struct ReceivedAck {
    pub ack: AckPayload,
    pub received_us: u64,
}

pub struct Client {
    writer: PacketWriter<OwnedWriteHalf>,
    pub session: u32,
    pub scene: String,
    pub dims: (usize, usize),
    pub received: Arc<Received>,
    acks: mpsc::UnboundedReceiver<ReceivedAck>,
}

fn parse_bound(msg: &str) -> Option<(String, usize, usize)> {
    let mut w = msg.split_whitespace();
    let scene = w.next()?.to_string();
    let n = w.next()?.parse().ok()?;
    let m = w.next()?.parse().ok()?;
    Some((scene, n, m))
}

impl Client {
    /// Opens a new session on `scene`.
    pub async fn connect(addr: &str, scene: &str, token: Option<&str>, seed: u64) -> Result<Self, ClientError> {
        let arg = match token {
            Some(t) => format!("{scene} {t}"),
            None => scene.to_string(),
        };
        Self::handshake(addr, 0, arg, seed).await
    }

    /// Rebinds to a session whose connection was lost.
    pub async fn resume(addr: &str, session: u32, token: Option<&str>) -> Result<Self, ClientError> {
        Self::handshake(addr, session, token.unwrap_or("").to_string(), 0).await
    }

    async fn handshake(addr: &str, session: u32, arg: String, seed: u64) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await.map_err(|source| ClientError::Connect {
            addr: addr.to_string(),
            source,
        })?;
        stream.set_nodelay(true)?;
        let (r, w) = stream.into_split();
        let mut writer = PacketWriter::new(w, session);
        let mut reader = PacketReader::new(r);
        let hello = writer
            .send(Body::Control(ControlPayload::new(ControlOp::SwitchTask, arg, seed)))
            .await?;
        let (session, scene, n, m) = loop {
            let packet = reader
                .recv()
                .await
                .map_err(|e| ClientError::Protocol(e.to_string()))?
                .ok_or_else(|| ClientError::Protocol("server closed during handshake".into()))?;
            let Body::Ack(a) = packet.body else { continue };
            if a.acked_seq != hello {
                continue;
            }
            if a.code != AckCode::Bound {
                return Err(ClientError::Refused {
                    code: a.code,
                    message: a.message,
                });
            }
            let (scene, n, m) =
                parse_bound(&a.message).ok_or_else(|| ClientError::Protocol(format!("bad bound ack `{}`", a.message)))?;
            break (packet.header.session_id, scene, n, m);
        };
        writer.set_session(session);
        let received = Arc::new(Received::default());
        let (ack_tx, acks) = mpsc::unbounded_channel();
        tokio::spawn(receive(reader, Arc::clone(&received), ack_tx));
        Ok(Self {
            writer,
            session,
            scene,
            dims: (n, m),
            received,
            acks,
        })
    }

    pub async fn send_tracking(&mut self, payload: TrackingPayload) -> Result<u32, ClientError> {
        Ok(self.writer.send_at(Body::Tracking(payload), now_us()).await?)
    }

    pub async fn send_control(&mut self, c: ControlPayload) -> Result<u32, ClientError> {
        Ok(self.writer.send(Body::Control(c)).await?)
    }

    /// Next ack, if one arrives within `timeout`.
    pub async fn next_ack(&mut self, timeout: Duration) -> Option<ReceivedAck> {
        tokio::time::timeout(timeout, self.acks.recv()).await.ok().flatten()
    }

    fn try_ack(&mut self) -> Option<ReceivedAck> {
        self.acks.try_recv().ok()
    }

    /// Updates the expected state shape after an applied switch.
    fn note_applied(&mut self, a: &AckPayload) {
        if let Some((scene, n, m)) = parse_bound(&a.message) {
            self.scene = scene;
            self.dims = (n, m);
        }
    }
}

async fn receive(
    mut reader: PacketReader<tokio::net::tcp::OwnedReadHalf>,
    received: Arc<Received>,
    acks: mpsc::UnboundedSender<ReceivedAck>,
) {
    while let Ok(Some(packet)) = reader.recv().await {
        received.stale.store(reader.dropped(), Ordering::Relaxed);
        match packet.body {
            Body::State(s) => {
                let shape = (s.joints.len(), s.objects.len());
                let mut shapes = received.shapes.lock().unwrap();
                if shapes.last() != Some(&shape) {
                    shapes.push(shape);
                }
                drop(shapes);
                received.states.fetch_add(1, Ordering::Relaxed);
                *received.latest.lock().unwrap() = Some(s);
            }
            Body::Ack(ack) => {
                let _ = acks.send(ReceivedAck {
                    ack,
                    received_us: now_us(),
                });
            }
            _ => {}
        }
    }
}

/// Result of running a script against a server.
#[derive(Debug, Clone, Default)]
pub struct SynthOutcome {
    pub session: u32,
    pub directives: usize,
    pub episodes: Vec<Uuid>,
    /// Messages of episode acks that did not store anything.
    pub discarded: Vec<String>,
    /// Refusals of switch directives.
    pub refused: Vec<String>,
    pub tracking_sent: u64,
    pub states: u64,
    pub shapes: Vec<(usize, usize)>,
}

fn collect(outcome: &mut SynthOutcome, client: &mut Client, r: &ReceivedAck) {
    match r.ack.code {
        AckCode::EpisodeStored => match Uuid::parse_str(&r.ack.message) {
            Ok(id) => outcome.episodes.push(id),
            Err(_) => outcome.discarded.push(r.ack.message.clone()),
        },
        AckCode::EpisodeDiscarded => outcome.discarded.push(r.ack.message.clone()),
        AckCode::UnknownScene => outcome.refused.push(r.ack.message.clone()),
        AckCode::Applied => client.note_applied(&r.ack),
        _ => {}
    }
}

/// Plays `script` in real time: tracking at the operator rate, controls at
/// their directive boundaries, then `end_episode` once the world settled.
pub async fn run_script(addr: &str, script: &Script, token: Option<&str>) -> Result<SynthOutcome, ClientError> {
    let mut outcome = SynthOutcome {
        directives: script.directives.len(),
        ..Default::default()
    };
    if script.directives.is_empty() {
        return Ok(outcome);
    }
    let scene = script
        .scene
        .as_deref()
        .ok_or_else(|| ClientError::Script(format!("script `{}` names no scene", script.name)))?;
    let mut client = Client::connect(addr, scene, token, script.seed).await?;
    outcome.session = client.session;
    let timeline = script.timeline(OPERATOR_RATE_HZ);
    let start = Instant::now();
    for ev in &timeline {
        tokio::time::sleep_until(start + Duration::from_secs_f64(ev.at)).await;
        match &ev.event {
            Event::Tracking(frame) => {
                client.send_tracking(TrackingPayload::from_frame(frame)).await?;
                outcome.tracking_sent += 1;
            }
            Event::Control(c) => {
                client.send_control(c.clone()).await?;
            }
        }
        while let Some(r) = client.try_ack() {
            collect(&mut outcome, &mut client, &r);
        }
    }
    let last = timeline.last().map_or(0.0, |e| e.at);
    tokio::time::sleep_until(start + Duration::from_secs_f64(last + SETTLE_S)).await;
    let end = client.send_control(ControlPayload::new(ControlOp::EndEpisode, "", 0)).await?;
    loop {
        let r = client.next_ack(ACK_TIMEOUT).await.ok_or(ClientError::Timeout("the final episode ack"))?;
        collect(&mut outcome, &mut client, &r);
        let done = r.ack.acked_seq == end
            && matches!(r.ack.code, AckCode::EpisodeStored | AckCode::EpisodeDiscarded);
        if done {
            break;
        }
    }
    outcome.states = client.received.states.load(Ordering::Relaxed);
    outcome.shapes = client.received.shapes.lock().unwrap().clone();
    Ok(outcome)
}

/// Half round trips measured by the client: tracking send to the ack that
/// reports its consumption, halved.
#[derive(Debug, Clone)]
pub struct LatencyOutcome {
    pub session: u32,
    pub scene: String,
    pub dims: (usize, usize),
    pub states: u64,
    pub half_rtt_us: Vec<f64>,
    pub stale: u64,
}

/// Streams a held hand pose at the operator rate until `ticks` state
/// packets arrived.
pub async fn measure(addr: &str, scene: &str, token: Option<&str>, ticks: u64) -> Result<LatencyOutcome, ClientError> {
    let mut client = Client::connect(addr, scene, token, 1).await?;
    let wrist = Isometry3::from_parts(
        Translation3::new(0.41, -0.30, 0.18),
        UnitQuaternion::from_quaternion(Quaternion::new(0.0, 0.0, 1.0, 0.0)),
    );
    let period = Duration::from_secs_f64(1.0 / OPERATOR_RATE_HZ);
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut sent: HashMap<u32, u64> = HashMap::new();
    let mut half_rtt = Vec::new();
    // generous: the ticker runs at 1/dt, so this is a stall guard only
    let deadline = Instant::now() + Duration::from_secs(60);
    while client.received.states.load(Ordering::Relaxed) < ticks {
        if Instant::now() > deadline {
            return Err(ClientError::Timeout("state packets"));
        }
        tokio::select! {
            _ = interval.tick() => {
                let t0 = now_us();
                let frame = HandRig.frame(&wrist, 0.0, t0);
                let seq = client.send_tracking(TrackingPayload::from_frame(&frame)).await?;
                sent.insert(seq, t0);
            }
            Some(r) = client.acks.recv() => {
                if r.ack.code == AckCode::Consumed {
                    if let Some(t0) = sent.remove(&r.ack.acked_seq) {
                        half_rtt.push(r.received_us.saturating_sub(t0) as f64 / 2.0);
                    }
                }
            }
        }
    }
    let end = client.send_control(ControlPayload::new(ControlOp::EndEpisode, "", 0)).await?;
    while let Some(r) = client.next_ack(ACK_TIMEOUT).await {
        if r.ack.acked_seq == end {
            break;
        }
    }
    Ok(LatencyOutcome {
        session: client.session,
        scene: client.scene.clone(),
        dims: client.dims,
        states: client.received.states.load(Ordering::Relaxed),
        half_rtt_us: half_rtt,
        stale: client.received.stale.load(Ordering::Relaxed),
    })
}
