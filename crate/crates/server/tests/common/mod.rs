#![allow(dead_code)]

use std::time::Duration;

use teleop_core::protocol::{read_frame, write_frame, Body, ControlOp, ControlPayload, Packet, PacketHeader};
use teleop_server::config::{Config, TokenEntry};
use teleop_server::Server;
use tokio::net::TcpStream;

pub const ALICE: &str = "alice-token-0123456789abcdef0123456789";
pub const BOB: &str = "bob-token-0123456789abcdef0123456789abc";

pub struct Running {
    pub server: Server,
    pub stream: String,
    pub http: String,
    pub dir: tempfile::TempDir,
}

/// A config on ephemeral ports with a fresh store and two users.
pub fn config(dir: &std::path::Path) -> Config {
    let mut c = Config::default();
    c.server.stream_addr = "127.0.0.1:0".parse().unwrap();
    c.server.http_addr = "127.0.0.1:0".parse().unwrap();
    c.store.dir = dir.join("store");
    c.tokens = vec![
        TokenEntry {
            user: "alice".into(),
            token: ALICE.into(),
            admin: false,
        },
        TokenEntry {
            user: "bob".into(),
            token: BOB.into(),
            admin: false,
        },
    ];
    c
}

pub async fn start_with(edit: impl FnOnce(&mut Config)) -> Running {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    edit(&mut c);
    let server = Server::start(&c).await.unwrap();
    Running {
        stream: server.stream_addr.to_string(),
        http: format!("http://{}", server.http_addr),
        server,
        dir,
    }
}

pub async fn start() -> Running {
    start_with(|_| {}).await
}

/// GET returning status and body, off the async runtime.
pub async fn http_get(url: String, token: Option<&str>) -> (u16, String) {
    let token = token.map(str::to_string);
    tokio::task::spawn_blocking(move || {
        let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        let mut req = agent.get(&url);
        if let Some(t) = token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.call().unwrap();
        (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
    })
    .await
    .unwrap()
}

/// A bare stream connection that writes packets with explicit sequence numbers.
pub struct Raw {
    pub socket: TcpStream,
    pub session: u32,
}

impl Raw {
    pub async fn connect(addr: &str) -> Self {
        let socket = TcpStream::connect(addr).await.unwrap();
        socket.set_nodelay(true).unwrap();
        Self { socket, session: 0 }
    }

    pub async fn send(&mut self, seq: u32, body: Body) {
        let packet = Packet {
            header: PacketHeader {
                kind: body.kind(),
                session_id: self.session,
                seq,
                timestamp_us: 0,
            },
            body,
        };
        write_frame(&mut self.socket, &packet.encode()).await.unwrap();
    }

    /// Next packet, or `None` once the server has closed the connection.
    pub async fn recv(&mut self) -> Option<Packet> {
        match tokio::time::timeout(Duration::from_secs(10), read_frame(&mut self.socket)).await {
            Ok(Ok(Some(f))) => Some(Packet::decode(&f).unwrap()),
            Ok(Ok(None)) | Ok(Err(_)) => None,
            Err(_) => panic!("no packet within 10 s"),
        }
    }

    /// Sends the opening handshake and returns the server's answer.
    pub async fn hello(&mut self, session: u32, arg: &str, seed: u64) -> Packet {
        self.session = session;
        self.send(1, Body::Control(ControlPayload::new(ControlOp::SwitchTask, arg, seed))).await;
        loop {
            let p = self.recv().await.expect("handshake answer");
            if matches!(p.body, Body::Ack(_)) {
                self.session = p.header.session_id;
                return p;
            }
        }
    }
}

/// `teleop serve` as a child process, killed on drop.
pub struct Serve {
    pub child: std::process::Child,
    pub stream: String,
    pub http: String,
    pub banner: String,
}

pub const BIN: &str = env!("CARGO_BIN_EXE_teleop");

/// Writes a config on ephemeral ports under `dir` plus `extra` TOML and
/// returns its path.
pub fn write_config(dir: &std::path::Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("teleop.toml");
    let text = format!(
        "[server]\nstream_addr = \"127.0.0.1:0\"\nhttp_addr = \"127.0.0.1:0\"\n\n[store]\ndir = \"store\"\n\n\
         [[tokens]]\nuser = \"alice\"\ntoken = \"{ALICE}\"\n\n[[tokens]]\nuser = \"bob\"\ntoken = \"{BOB}\"\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

impl Serve {
    pub fn spawn(config: &std::path::Path) -> Self {
        use std::io::BufRead;
        let mut child = std::process::Command::new(BIN)
            .args(["serve", "--config"])
            .arg(config)
            .env_remove("TELEOP_STORE_DIR")
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::null())
            .spawn()
            .unwrap();
        let mut lines = std::io::BufReader::new(child.stdout.take().unwrap()).lines();
        let (mut stream, mut http, mut banner) = (String::new(), String::new(), String::new());
        for line in lines.by_ref() {
            let line = line.unwrap();
            banner += &line;
            banner.push('\n');
            let mut words = line.split_whitespace();
            match words.next() {
                Some("stream") => stream = words.next().unwrap().to_string(),
                Some("http") => http = format!("http://{}", words.next().unwrap()),
                Some("ready") => break,
                _ => {}
            }
        }
        assert!(!stream.is_empty() && !http.is_empty(), "no banner: {banner}");
        // keep draining stdout so the child never blocks on it
        std::thread::spawn(move || lines.for_each(drop));
        Self {
            child,
            stream,
            http,
            banner,
        }
    }
}

impl Drop for Serve {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn teleop(args: &[&str]) -> Output {
    let out = std::process::Command::new(BIN)
        .args(args)
        .env_remove("TELEOP_STORE_DIR")
        .output()
        .unwrap();
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Blocking GET returning status and body bytes.
pub fn get_bytes(url: &str, token: Option<&str>) -> (u16, Vec<u8>) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut req = agent.get(url);
    if let Some(t) = token {
        req = req.header("Authorization", format!("Bearer {t}"));
    }
    let mut resp = req.call().unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().with_config().limit(256 << 20).read_to_vec().unwrap())
}

/// A short recorded episode on `scene` attributed to `user` ("" for
/// anonymous), with the hand swept by `seed`.
pub fn recorded_episode(scene: &str, seed: u64, user: &str) -> teleop_core::episode::EpisodeLog {
    use teleop_core::hand::HandFrame;
    use teleop_core::protocol::TrackingPayload;
    use teleop_core::session::{Owner, SessionParams, TrackingInput};
    let r = teleop_core::Registry::bundled();
    let owner = Owner {
        user_id: user.to_string(),
        token_fingerprint: String::new(),
    };
    let mut s = teleop_core::Session::new(1, r.scene(scene).unwrap().clone(), SessionParams::default(), seed, owner);
    for k in 0..60u32 {
        let t = k as f64 / 60.0;
        let p = nalgebra::Vector3::new(0.4 + 0.1 * t, -0.1 + 0.2 * t, 0.3);
        s.mailbox().post(TrackingInput::new(k + 1, 0, TrackingPayload::from_frame(&HandFrame::collapsed(p, 0))));
        s.step();
    }
    s.end_episode().unwrap()
}

/// Blocking POST returning status and body bytes.
pub fn post_bytes(url: &str, token: Option<&str>, body: &[u8]) -> (u16, Vec<u8>) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut req = agent.post(url);
    if let Some(t) = token {
        req = req.header("Authorization", format!("Bearer {t}"));
    }
    let mut resp = req.send(body).unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_to_vec().unwrap())
}
