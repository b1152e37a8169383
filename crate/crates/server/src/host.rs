//! Server-side state shared by the ticker, the connections and the HTTP API.
//!
//! One ticker thread steps every bound session once per `dt` and pushes a
//! state packet to its connection. Connections post tracking into session
//! mailboxes and apply controls. Finished episodes go to a store worker
//! thread, which also sends the episode acks so they keep their order.

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc as std_mpsc;
use std::sync::{Arc, Mutex, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;
use teleop_core::episode::EpisodeLog;
use teleop_core::par::Execution;
use teleop_core::protocol::{
    encode_frame, now_us, AckCode, AckPayload, Body, ControlOp, ControlPayload, Mailbox, MailboxStats, Packet,
    PacketHeader,
};
use teleop_core::session::profile::TimingSummary;
use teleop_core::session::{Owner, SessionError, SessionParams, SessionPool, TrackingInput};
use teleop_core::Registry;
use teleop_hub::{Hub, Principal};
use tokio::sync::mpsc;

/// Outgoing frames queued per connection before new ones are dropped.
pub const SEND_QUEUE: usize = 1024;

#[derive(Debug, Clone)]
pub struct HostOptions {
    pub params: SessionParams,
    pub max_sessions: usize,
    pub reconnect_window: Duration,
    pub require_token: bool,
    pub execution: Execution,
}

impl Default for HostOptions {
    fn default() -> Self {
        Self {
            params: SessionParams::default(),
            max_sessions: teleop_core::session::DEFAULT_MAX_SESSIONS,
            reconnect_window: Duration::from_secs(30),
            require_token: false,
            execution: Execution::Parallel,
        }
    }
}

struct Binding {
    conn: u64,
    tx: mpsc::Sender<Vec<u8>>,
}

/// Transport side of a session.
struct Link {
    binding: Option<Binding>,
    detached_at: Option<Instant>,
    /// Server-to-client sequence, kept across reconnects.
    next_seq: u32,
    /// Stale tracking or control packets dropped by the receive filter.
    dropped: u64,
    /// Frames not queued because the connection fell behind.
    overflow: u64,
}

impl Link {
    fn new(binding: Binding) -> Self {
        Self {
            binding: Some(binding),
            detached_at: None,
            next_seq: 1,
            dropped: 0,
            overflow: 0,
        }
    }
}

/// What a connection holds once its handshake succeeded.
#[derive(Clone)]
pub struct Bound {
    pub session: u32,
    pub conn: u64,
    pub mailbox: Arc<Mailbox<TrackingInput>>,
}

/// Session diagnostics served over HTTP.
#[derive(Debug, Serialize)]
pub struct SessionReport {
    pub session_id: u32,
    pub scene_id: String,
    pub tick: u64,
    pub bound: bool,
    pub dropped_stale: u64,
    pub send_overflow: u64,
    pub mailbox: MailboxCounts,
    /// `None` until enough ticks consumed fresh input.
    pub profile: Option<TimingSummary>,
}

#[derive(Debug, Serialize)]
pub struct MailboxCounts {
    pub posted: u64,
    pub taken: u64,
    pub overwritten: u64,
}

impl From<MailboxStats> for MailboxCounts {
    fn from(s: MailboxStats) -> Self {
        Self {
            posted: s.posted,
            taken: s.taken,
            overwritten: s.overwritten,
        }
    }
}

pub struct Host {
    registry: Arc<Registry>,
    hub: Arc<Hub>,
    options: HostOptions,
    pool: Mutex<SessionPool>,
    links: Mutex<BTreeMap<u32, Link>>,
    next_conn: AtomicU64,
    store_tx: Mutex<Option<std_mpsc::Sender<Job>>>,
    stop: AtomicBool,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl std::fmt::Debug for Host {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Host").field("options", &self.options).finish_non_exhaustive()
    }
}

fn ack(acked_seq: u32, code: AckCode, message: impl Into<String>) -> Body {
    Body::Ack(AckPayload::new(acked_seq, code, message))
}

/// Encodes a single framed packet outside any session link.
pub fn frame(session: u32, seq: u32, body: Body) -> Vec<u8> {
    let packet = Packet {
        header: PacketHeader {
            kind: body.kind(),
            session_id: session,
            seq,
            timestamp_us: now_us(),
        },
        body,
    };
    encode_frame(&packet.encode())
}

impl Host {
    /// Creates the host and starts its ticker and store threads.
    pub fn start(registry: Arc<Registry>, hub: Arc<Hub>, options: HostOptions) -> Arc<Self> {
        let (store_tx, store_rx) = std_mpsc::channel();
        let host = Arc::new(Self {
            pool: Mutex::new(SessionPool::new(Arc::clone(&registry), options.params, options.max_sessions)),
            registry,
            hub,
            options,
            links: Mutex::new(BTreeMap::new()),
            next_conn: AtomicU64::new(1),
            store_tx: Mutex::new(Some(store_tx)),
            stop: AtomicBool::new(false),
            threads: Mutex::new(Vec::new()),
        });
        let weak = Arc::downgrade(&host);
        let ticker = std::thread::Builder::new()
            .name("ticker".into())
            .spawn(move || run_ticker(weak))
            .expect("spawn ticker");
        let weak = Arc::downgrade(&host);
        let hub = Arc::clone(&host.hub);
        let store = std::thread::Builder::new()
            .name("store".into())
            .spawn(move || run_store(weak, hub, store_rx))
            .expect("spawn store worker");
        host.threads.lock().unwrap().extend([ticker, store]);
        host
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub fn dt(&self) -> f64 {
        self.options.params.dt()
    }

    pub fn next_conn_id(&self) -> u64 {
        self.next_conn.fetch_add(1, Ordering::Relaxed)
    }

    /// Queues `body` to the session's live connection, if any.
    pub fn send(&self, session: u32, body: Body) {
        let mut links = self.links.lock().unwrap();
        let Some(link) = links.get_mut(&session) else { return };
        let Some(binding) = &link.binding else { return };
        let seq = link.next_seq;
        link.next_seq = link.next_seq.wrapping_add(1);
        if let Err(mpsc::error::TrySendError::Full(_)) = binding.tx.try_send(frame(session, seq, body)) {
            link.overflow += 1;
        }
    }

    fn owner_for(&self, token: Option<&str>) -> Result<Owner, String> {
        match token {
            None if self.options.require_token => Err("token required".into()),
            None => Ok(Owner::default()),
            Some(t) => match self.hub.tokens.authenticate(t) {
                Some(Principal {
                    user_id, fingerprint, ..
                }) => Ok(Owner {
                    user_id,
                    token_fingerprint: fingerprint,
                }),
                None => Err("invalid or revoked token".into()),
            },
        }
    }

    fn bound_message(&self, session: u32) -> String {
        let pool = self.pool.lock().unwrap();
        match pool.get(session) {
            Ok(s) => {
                let (n, m) = s.dims();
                format!("{} {n} {m}", s.scene().scene.id)
            }
            Err(e) => e.to_string(),
        }
    }

    /// Binds a connection from its first packet.
    ///
    /// Session 0 asks for a new session: a `switch_task` control whose
    /// argument is `<scene_id> [token]`. A nonzero session id resumes that
    /// session with argument `[token]`, which must identify its owner. On
    /// failure the returned frame is the refusal to send before closing.
    pub fn handshake(&self, packet: &Packet, tx: mpsc::Sender<Vec<u8>>) -> Result<Bound, Vec<u8>> {
        let seq = packet.header.seq;
        let requested = packet.header.session_id;
        let refuse = |code, msg: String| frame(requested, 1, ack(seq, code, msg));
        let Body::Control(control) = &packet.body else {
            return Err(refuse(AckCode::UnknownSession, "expected a switch_task handshake".into()));
        };
        if control.op != ControlOp::SwitchTask {
            return Err(refuse(AckCode::UnknownSession, "expected a switch_task handshake".into()));
        }
        let mut words = control.arg.split_whitespace();
        let conn = self.next_conn_id();
        let session = if requested == 0 {
            let scene = words.next().unwrap_or("");
            let owner = self.owner_for(words.next()).map_err(|m| refuse(AckCode::Unauthorized, m))?;
            let id = {
                let mut pool = self.pool.lock().unwrap();
                pool.create(scene, control.seed, owner.clone()).map_err(|e| match e {
                    SessionError::Capacity(_) => refuse(AckCode::Capacity, e.to_string()),
                    _ => refuse(AckCode::UnknownScene, e.to_string()),
                })?
            };
            self.links.lock().unwrap().insert(id, Link::new(Binding { conn, tx }));
            tracing::info!(session = id, scene, user = %owner.user_id, "session created");
            id
        } else {
            let owner = {
                let pool = self.pool.lock().unwrap();
                match pool.get(requested) {
                    Ok(s) => s.owner().clone(),
                    Err(e) => return Err(refuse(AckCode::UnknownSession, e.to_string())),
                }
            };
            let presented = match words.next() {
                Some(t) => self.owner_for(Some(t)).map_err(|m| refuse(AckCode::Unauthorized, m))?,
                None => Owner::default(),
            };
            if presented != owner {
                return Err(refuse(AckCode::Unauthorized, format!("session {requested} belongs to another user")));
            }
            let mut links = self.links.lock().unwrap();
            let Some(link) = links.get_mut(&requested) else {
                return Err(refuse(AckCode::UnknownSession, format!("no session {requested}")));
            };
            // a newer connection wins over a stale one
            link.binding = Some(Binding { conn, tx });
            link.detached_at = None;
            tracing::info!(session = requested, "session resumed");
            requested
        };
        let mailbox = self.pool.lock().unwrap().get(session).expect("bound session exists").mailbox();
        let msg = self.bound_message(session);
        self.send(session, ack(seq, AckCode::Bound, msg));
        Ok(Bound {
            session,
            conn,
            mailbox,
        })
    }

    /// Whether `bound` is still the session's live binding.
    pub fn is_current(&self, bound: &Bound) -> bool {
        let links = self.links.lock().unwrap();
        links
            .get(&bound.session)
            .and_then(|l| l.binding.as_ref())
            .is_some_and(|b| b.conn == bound.conn)
    }

    pub fn note_dropped(&self, session: u32) {
        if let Some(link) = self.links.lock().unwrap().get_mut(&session) {
            link.dropped += 1;
        }
    }

    /// Unbinds a closed connection. The session pauses and waits for a
    /// reconnect until the window runs out.
    pub fn detach(&self, bound: &Bound) {
        let mut links = self.links.lock().unwrap();
        if let Some(link) = links.get_mut(&bound.session) {
            if link.binding.as_ref().is_some_and(|b| b.conn == bound.conn) {
                link.binding = None;
                link.detached_at = Some(Instant::now());
                tracing::info!(session = bound.session, "connection closed; session paused");
            }
        }
    }

    fn queue(&self, job: Job) {
        if let Some(tx) = self.store_tx.lock().unwrap().as_ref() {
            let _ = tx.send(job);
        }
    }

    /// Applies a control packet from a bound connection.
    ///
    /// Acks go through the store worker queue: a finished episode is
    /// acknowledged (`EpisodeStored` or `EpisodeDiscarded`) before the
    /// control's own `Applied` ack. `end_episode` has only the episode ack.
    pub fn control(&self, session: u32, seq: u32, c: &ControlPayload) {
        let outcome = {
            let mut pool = self.pool.lock().unwrap();
            match c.op {
                ControlOp::Reset => pool.get_mut(session).map(|s| s.reset(c.seed)),
                ControlOp::SwitchTask => {
                    let scene = c.arg.split_whitespace().next().unwrap_or("");
                    pool.switch_task(session, scene, c.seed)
                }
                ControlOp::StartEpisode => pool.get_mut(session).map(|s| {
                    s.start_episode();
                    None
                }),
                ControlOp::EndEpisode => pool.get_mut(session).map(|s| s.end_episode()),
            }
        };
        match outcome {
            Err(e @ SessionError::UnknownScene(_)) => self.queue(Job::Ack {
                session,
                body: ack(seq, AckCode::UnknownScene, e.to_string()),
            }),
            Err(e) => self.queue(Job::Ack {
                session,
                body: ack(seq, AckCode::UnknownSession, e.to_string()),
            }),
            Ok(log) => {
                if log.is_some() || c.op == ControlOp::EndEpisode {
                    self.queue(Job::Episode {
                        session,
                        acked_seq: seq,
                        log,
                    });
                }
                if c.op != ControlOp::EndEpisode {
                    self.queue(Job::Ack {
                        session,
                        body: ack(seq, AckCode::Applied, self.bound_message(session)),
                    });
                }
            }
        }
    }

    /// Steps every bound session once and streams the results.
    pub fn tick(&self) {
        let bound: HashSet<u32> = {
            let links = self.links.lock().unwrap();
            links.iter().filter(|(_, l)| l.binding.is_some()).map(|(&id, _)| id).collect()
        };
        if bound.is_empty() {
            return;
        }
        let out: Vec<_> = {
            let mut pool = self.pool.lock().unwrap();
            let reports = pool.step_where(self.options.execution, |id| bound.contains(&id));
            reports
                .into_iter()
                .map(|(id, r)| (id, r.consumed, pool.get(id).expect("stepped").state().payload()))
                .collect()
        };
        for (id, consumed, state) in out {
            if let Some(seq) = consumed {
                self.send(id, ack(seq, AckCode::Consumed, ""));
            }
            self.send(id, Body::State(state));
        }
    }

    /// Closes sessions whose connection has been gone longer than the
    /// reconnect window, storing their open episodes.
    pub fn expire(&self) {
        let window = self.options.reconnect_window;
        let expired: Vec<u32> = {
            let mut links = self.links.lock().unwrap();
            let ids: Vec<u32> = links
                .iter()
                .filter(|(_, l)| l.detached_at.is_some_and(|t| t.elapsed() >= window))
                .map(|(&id, _)| id)
                .collect();
            for id in &ids {
                links.remove(id);
            }
            ids
        };
        for id in expired {
            let closed = self.pool.lock().unwrap().close(id);
            tracing::info!(session = id, "reconnect window elapsed; session closed");
            if let Ok(Some(log)) = closed {
                self.queue(Job::Episode {
                    session: id,
                    acked_seq: 0,
                    log: Some(log),
                });
            }
        }
    }

    pub fn session_ids(&self) -> Vec<u32> {
        self.pool.lock().unwrap().ids()
    }

    pub fn report(&self, session: u32) -> Option<SessionReport> {
        let (scene_id, tick, mailbox, profile) = {
            let pool = self.pool.lock().unwrap();
            let s = pool.get(session).ok()?;
            (
                s.scene().scene.id.clone(),
                s.state().tick,
                s.mailbox().stats(),
                s.profile().summary().ok(),
            )
        };
        let links = self.links.lock().unwrap();
        let link = links.get(&session);
        Some(SessionReport {
            session_id: session,
            scene_id,
            tick,
            bound: link.is_some_and(|l| l.binding.is_some()),
            dropped_stale: link.map_or(0, |l| l.dropped),
            send_overflow: link.map_or(0, |l| l.overflow),
            mailbox: mailbox.into(),
            profile,
        })
    }

    /// Stops the threads and stores every open episode.
    pub fn shutdown(&self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let ids = self.session_ids();
        for id in ids {
            let closed = self.pool.lock().unwrap().close(id);
            if let Ok(Some(log)) = closed {
                self.queue(Job::Episode {
                    session: id,
                    acked_seq: 0,
                    log: Some(log),
                });
            }
        }
        self.links.lock().unwrap().clear();
        self.store_tx.lock().unwrap().take();
        let threads: Vec<_> = self.threads.lock().unwrap().drain(..).collect();
        for t in threads {
            if t.thread().id() != std::thread::current().id() {
                let _ = t.join();
            }
        }
    }
}

enum Job {
    Episode {
        session: u32,
        acked_seq: u32,
        log: Option<EpisodeLog>,
    },
    Ack {
        session: u32,
        body: Body,
    },
}

fn run_ticker(host: Weak<Host>) {
    let Some(dt) = host.upgrade().map(|h| Duration::from_secs_f64(h.dt())) else { return };
    let mut next = Instant::now();
    loop {
        {
            let Some(h) = host.upgrade() else { return };
            if h.stop.load(Ordering::SeqCst) {
                return;
            }
            h.tick();
            h.expire();
        }
        next += dt;
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else if now - next > dt * 20 {
            // far behind; drop the backlog instead of bursting
            next = now;
        }
    }
}

fn store_episode(hub: &Hub, log: &EpisodeLog) -> Result<uuid::Uuid, String> {
    let meta = log.meta();
    let who = Principal {
        user_id: meta.user_id.clone(),
        fingerprint: meta.token_fingerprint.clone(),
        admin: false,
    };
    hub.store.put(&who, &log.to_bytes()).map(|s| s.episode_id).map_err(|e| e.to_string())
}

fn run_store(host: Weak<Host>, hub: Arc<Hub>, rx: std_mpsc::Receiver<Job>) {
    for job in rx {
        match job {
            Job::Episode {
                session,
                acked_seq,
                log,
            } => {
                let body = match log {
                    None => ack(acked_seq, AckCode::EpisodeDiscarded, "no open episode"),
                    Some(log) => match store_episode(&hub, &log) {
                        Ok(id) => {
                            tracing::info!(session, episode = %id, ticks = log.records().len(), "episode stored");
                            ack(acked_seq, AckCode::EpisodeStored, id.to_string())
                        }
                        Err(e) => {
                            tracing::error!(session, episode = %log.id(), error = %e, "episode not stored");
                            ack(acked_seq, AckCode::EpisodeDiscarded, e)
                        }
                    },
                };
                if let Some(h) = host.upgrade() {
                    h.send(session, body);
                }
            }
            Job::Ack { session, body } => {
                if let Some(h) = host.upgrade() {
                    h.send(session, body);
                }
            }
        }
    }
}
