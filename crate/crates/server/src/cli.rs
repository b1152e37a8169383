//! The `teleop` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use teleop_core::episode::EpisodeLog;
use teleop_core::protocol::{packet_size_report, PacketSizeReport};
use teleop_core::replay::{replay, ReplayError};
use teleop_core::script::parse_script;
use teleop_core::session::profile::ROW_NAMES;
use teleop_core::{parse_robot, parse_scene, Registry};
use teleop_hub::Tokens;

use crate::client::{self, ClientError};
use crate::config::{Config, DEFAULT_STREAM_ADDR, STORE_DIR_ENV};
use crate::{load_registry, Server, TOKEN_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONNECT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "teleop", version, about = "State-streaming teleoperation server and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the stream server, the episode hub and the UI bridge.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Drive a synthetic operator from a script.
    Synth {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value = DEFAULT_STREAM_ADDR)]
        addr: String,
        /// Hub token the recorded episodes are attributed to.
        #[arg(long)]
        token: Option<String>,
    },
    /// Re-simulate a recorded episode.
    Replay {
        file: PathBuf,
        /// 1 verifies tick by tick; other values print a paced trajectory.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Extra robot/scene files or directories.
        #[arg(long)]
        registry: Vec<PathBuf>,
    },
    /// Print packet-size or latency tables.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
    /// Robot, scene and script files.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
    /// Hub administration.
    Admin {
        #[command(subcommand)]
        command: AdminCommand,
    },
}

#[derive(Debug, Subcommand)]
enum ReportKind {
    PacketSizes {
        #[arg(long, default_value_t = 58)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        m: usize,
    },
    Latency {
        #[arg(long, default_value = DEFAULT_STREAM_ADDR)]
        addr: String,
        /// HTTP address of the same server; defaults to port 8080 on the stream host.
        #[arg(long)]
        http: Option<String>,
        #[arg(long, default_value_t = 1000)]
        ticks: u64,
        #[arg(long, default_value = "sort_bolts")]
        scene: String,
        #[arg(long)]
        token: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum ModelCommand {
    Validate { file: PathBuf },
}

#[derive(Debug, Subcommand)]
enum AdminCommand {
    IssueToken {
        #[arg(long)]
        user: String,
        #[arg(long)]
        admin: bool,
        /// Store directory; otherwise TELEOP_STORE_DIR, then the config's.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Parses `args` and runs the command, returning the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Serve { config } => {
            init_logging("info");
            serve(config.as_deref())
        }
        Command::Synth { script, addr, token } => {
            init_logging("warn");
            synth(&script, &addr, token.as_deref())
        }
        Command::Replay { file, speed, registry } => replay_file(&file, speed, &registry),
        Command::Report {
            kind: ReportKind::PacketSizes { n, m },
        } => {
            print!("{}", packet_table(&packet_size_report(n, m)));
            EXIT_OK
        }
        Command::Report {
            kind: ReportKind::Latency {
                addr,
                http,
                ticks,
                scene,
                token,
            },
        } => {
            init_logging("warn");
            latency(&addr, http.as_deref(), ticks, &scene, token.as_deref())
        }
        Command::Model {
            command: ModelCommand::Validate { file },
        } => validate(&file),
        Command::Admin {
            command: AdminCommand::IssueToken {
                user,
                admin,
                store,
                config,
            },
        } => issue_token(&user, admin, store, config.as_deref()),
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .expect("tokio runtime")
}

async fn terminated() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        if let Ok(mut term) = signal(SignalKind::terminate()) {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
            return;
        }
    }
    let _ = tokio::signal::ctrl_c().await;
}

fn serve(config: Option<&Path>) -> i32 {
    let cfg = match config.map(Config::load).unwrap_or_else(|| Ok(Config::default())) {
        Ok(c) => c.with_env(),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    runtime().block_on(async {
        let server = match Server::start(&cfg).await {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {e}");
                return e.exit_code();
            }
        };
        print!("{}", banner(&server, &cfg));
        let _ = std::io::stdout().flush();
        terminated().await;
        tracing::info!("shutting down");
        server.shutdown().await;
        EXIT_OK
    })
}

fn banner(server: &Server, cfg: &Config) -> String {
    let registry = server.host.registry();
    let hub = server.host.hub();
    let mut out = format!("teleop {}\n", env!("CARGO_PKG_VERSION"));
    out += &format!("stream  {}\n", server.stream_addr);
    out += &format!("http    {}  (bridge at /ws)\n", server.http_addr);
    out += &format!(
        "store   {}  ({} episodes)\n",
        cfg.store.dir.display(),
        hub.store.index().entries.len()
    );
    match &cfg.server.ui_dir {
        Some(d) if d.is_dir() => out += &format!("ui      {}\n", d.display()),
        _ => out += "ui      none\n",
    }
    out += &format!("tick    {} ms\n", cfg.sim.ik.dt * 1e3);
    out += "scenes\n";
    for id in registry.scene_ids() {
        if let Ok(s) = registry.scene(id) {
            out += &format!(
                "  {id:<16} {:<10} n={:<3} m={}\n",
                s.model.name,
                s.model.dof(),
                s.scene.objects.len()
            );
        }
    }
    out += "ready\n";
    out
}

fn client_exit(e: &ClientError) -> i32 {
    match e {
        ClientError::Connect { .. } => EXIT_CONNECT,
        ClientError::Script(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn synth(path: &Path, addr: &str, token: Option<&str>) -> i32 {
    let script = match std::fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| parse_script(&t).map_err(|e| e.to_string()))
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let outcome = match runtime().block_on(client::run_script(addr, &script, token)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return client_exit(&e);
        }
    };
    if outcome.directives == 0 {
        println!("script {}: 0 directives completed", script.name);
        return EXIT_OK;
    }
    println!(
        "script {}: {} directives completed in session {} ({} tracking packets sent, {} states received)",
        script.name, outcome.directives, outcome.session, outcome.tracking_sent, outcome.states
    );
    for id in &outcome.episodes {
        println!("episode {id}");
    }
    for d in &outcome.discarded {
        println!("discarded {d}");
    }
    for r in &outcome.refused {
        eprintln!("error: switch refused: {r}");
    }
    if outcome.refused.is_empty() {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    }
}

fn replay_file(path: &Path, speed: f64, extra: &[PathBuf]) -> i32 {
    if !(speed > 0.0) {
        eprintln!("error: --speed must be positive");
        return EXIT_CONFIG;
    }
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_RUNTIME;
        }
    };
    let log = match EpisodeLog::parse(&bytes) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let registry = match load_registry(extra) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let meta = log.meta();
    if speed != 1.0 {
        return playback(&log, speed);
    }
    match replay(&log, &registry) {
        Ok(report) if report.matches() => {
            println!(
                "MATCH: 0 diverging ticks of {} (episode {}, scene {})",
                report.ticks,
                log.id(),
                meta.scene_id
            );
            EXIT_OK
        }
        Ok(report) => {
            println!(
                "DIVERGED: {} diverging ticks of {}, first at tick {}",
                report.diverging,
                report.ticks,
                report.first_divergence.unwrap_or(0)
            );
            EXIT_RUNTIME
        }
        Err(e @ ReplayError::ModelHash { .. }) => {
            eprintln!("refused: {e}");
            EXIT_RUNTIME
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Paced printout of the stored trajectory, a line per simulated 0.25 s.
fn playback(log: &EpisodeLog, speed: f64) -> i32 {
    let meta = log.meta();
    let records = log.records();
    let dt = meta.ik.dt;
    let every = ((0.25 / dt).round() as usize).max(1);
    println!("episode {} on {} ({} ticks, speed {speed}x)", log.id(), meta.scene_id, records.len());
    let mut out = std::io::stdout().lock();
    for (k, r) in records.iter().enumerate() {
        if k % every == 0 || k + 1 == records.len() {
            let q: Vec<String> = r.q.iter().take(4).map(|v| format!("{v:+.3}")).collect();
            let more = if r.q.len() > 4 { " .." } else { "" };
            let first = r.objects.first().map(|o| {
                format!(" obj0 ({:+.3} {:+.3} {:+.3})", o.position[0], o.position[1], o.position[2])
            });
            let _ = writeln!(
                out,
                "t={:>7.3}s tick {:>6} q [{}{more}]{}",
                r.sim_time,
                r.tick,
                q.join(" "),
                first.unwrap_or_default()
            );
            let _ = out.flush();
        }
        if speed.is_finite() {
            std::thread::sleep(Duration::from_secs_f64(dt / speed));
        }
    }
    EXIT_OK
}

fn thousands(v: usize) -> String {
    let s = v.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Packet sizes against an uncompressed stereo video stream.
pub fn packet_table(r: &PacketSizeReport) -> String {
    let rows = [
        ("Hand tracking (25 keypoints)", format!("{} B", thousands(r.tracking))),
        ("Hand tracking + head (26 poses)", format!("{} B", thousands(r.tracking_with_head))),
        (
            &*format!("Simulation state (n={}, m={})", r.n, r.m),
            format!("{} B", thousands(r.state)),
        ),
        ("Stereo RGB 2x480x640 baseline", format!("{} B", thousands(r.stereo_baseline))),
        ("Reduction (baseline / state)", format!("{:.1}x", r.ratio)),
    ]
    .map(|(a, b)| (a.to_string(), b));
    let mut out = String::from("Packet sizes\n");
    for (label, value) in rows {
        out += &format!("  {label:<34} {value:>14}\n");
    }
    out += "  baseline counts raw frames, no video compression\n";
    out
}

#[derive(Debug, Deserialize)]
struct StatsView {
    count: usize,
    mean: f64,
    p50: f64,
    p99: f64,
    max: f64,
}

#[derive(Debug, Deserialize)]
struct ProfileView {
    ticks: u64,
    packet_travel_us: StatsView,
    sim_step_us: StatsView,
    total_us: StatsView,
}

#[derive(Debug, Deserialize)]
struct SessionView {
    profile: Option<ProfileView>,
    dropped_stale: u64,
}

#[derive(Debug, Deserialize)]
struct ManifestView {
    robot: RobotView,
}

#[derive(Debug, Deserialize)]
struct RobotView {
    name: String,
}

fn get_json<T: for<'de> Deserialize<'de>>(url: &str) -> Result<T, String> {
    let mut resp = ureq::get(url).call().map_err(|e| format!("{url}: {e}"))?;
    let text = resp.body_mut().read_to_string().map_err(|e| format!("{url}: {e}"))?;
    if !resp.status().is_success() {
        return Err(format!("{url}: {} {text}", resp.status()));
    }
    serde_json::from_str(&text).map_err(|e| format!("{url}: {e}"))
}

fn default_http(addr: &str) -> String {
    let host = addr.rsplit_once(':').map_or(addr, |(h, _)| h);
    format!("{host}:8080")
}

fn latency(addr: &str, http: Option<&str>, ticks: u64, scene: &str, token: Option<&str>) -> i32 {
    let outcome = match runtime().block_on(client::measure(addr, scene, token, ticks)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return client_exit(&e);
        }
    };
    let http = http.map_or_else(|| default_http(addr), str::to_string);
    let session: SessionView = match get_json(&format!("http://{http}/api/v1/sessions/{}/profile", outcome.session)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONNECT;
        }
    };
    let robot = get_json::<ManifestView>(&format!("http://{http}/api/v1/scenes/{}", outcome.scene))
        .map(|m| m.robot.name)
        .unwrap_or_else(|_| "?".into());
    let Some(p) = session.profile else {
        eprintln!("error: the session recorded too few samples for a profile");
        return EXIT_RUNTIME;
    };
    let (n, m) = outcome.dims;
    println!(
        "Time profile: {} ticks on {} ({robot}, n={n}, m={m}), {} samples",
        p.ticks, outcome.scene, p.sim_step_us.count
    );
    println!("  {:<20} {:>10} {:>10} {:>10} {:>10}", "(µs)", "mean", "p50", "p99", "max");
    for (name, s) in ROW_NAMES.iter().zip([&p.packet_travel_us, &p.sim_step_us, &p.total_us]) {
        println!("  {name:<20} {:>10.1} {:>10.1} {:>10.1} {:>10.1}", s.mean, s.p50, s.p99, s.max);
    }
    if !outcome.half_rtt_us.is_empty() {
        let mut h = outcome.half_rtt_us.clone();
        h.sort_by(f64::total_cmp);
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        println!(
            "client half round trip: mean {mean:.1} µs, p50 {:.1} µs over {} acks",
            h[h.len() / 2],
            h.len()
        );
    }
    println!(
        "states received {}, stale dropped: client {}, server {}",
        outcome.states, outcome.stale, session.dropped_stale
    );
    EXIT_OK
}

fn validate(path: &Path) -> i32 {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let kind = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_string)
        .or_else(|| text.split_whitespace().find(|w| !w.starts_with('#')).map(str::to_string))
        .unwrap_or_default();
    let result = match kind.as_str() {
        "robot" => parse_robot(&text).map(|r| {
            format!(
                "robot {}: {} dof, {} links, {} spheres, {} collision pairs, {} grippers, hash {}",
                r.name,
                r.dof(),
                r.links.len(),
                r.spheres.len(),
                r.collision_pairs().len(),
                r.grippers.len(),
                r.hash
            )
        }).map_err(|e| e.to_string()),
        "scene" => parse_scene(&text).map_err(|e| e.to_string()).and_then(|s| {
            let mut registry = with_siblings(path);
            registry.add_scene(&text).map_err(|e| e.to_string())?;
            let r = registry.scene(&s.id).map_err(|e| e.to_string())?;
            Ok(format!(
                "scene {}: robot {} (n={}), {} objects, {} randomized, hash {}",
                s.id,
                r.model.name,
                r.model.dof(),
                s.objects.len(),
                s.randomization.len(),
                s.hash
            ))
        }),
        "script" => parse_script(&text).map_err(|e| e.to_string()).and_then(|s| {
            s.validate(&with_siblings(path)).map_err(|e| e.to_string())?;
            Ok(format!(
                "script {}: {} directives, {:.2} s, scene {}",
                s.name,
                s.directives.len(),
                s.duration(),
                s.scene.as_deref().unwrap_or("-")
            ))
        }),
        other => Err(format!("cannot tell the file type (`{other}`); use .robot, .scene or .script")),
    };
    match result {
        Ok(summary) => {
            println!("ok: {summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            EXIT_CONFIG
        }
    }
}

/// Bundled assets plus robots and scenes next to `path`.
fn with_siblings(path: &Path) -> Registry {
    let mut registry = Registry::bundled();
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let Ok(entries) = std::fs::read_dir(dir) else { return registry };
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    for ext in ["robot", "scene"] {
        for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == ext) && f.as_path() != path) {
            let Ok(text) = std::fs::read_to_string(f) else { continue };
            let _ = if ext == "robot" {
                registry.add_robot(&text).map(drop).map_err(drop)
            } else {
                registry.add_scene(&text).map(drop).map_err(drop)
            };
        }
    }
    registry
}

fn issue_token(user: &str, admin: bool, store: Option<PathBuf>, config: Option<&Path>) -> i32 {
    let dir = match store {
        Some(d) => d,
        None => match std::env::var_os(STORE_DIR_ENV).filter(|d| !d.is_empty()) {
            Some(d) => PathBuf::from(d),
            None => match config.map(Config::load).unwrap_or_else(|| Ok(Config::default())) {
                Ok(c) => c.store.dir,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_CONFIG;
                }
            },
        },
    };
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("error: {}: {e}", dir.display());
        return EXIT_RUNTIME;
    }
    let tokens = match Tokens::open(&dir.join(TOKEN_FILE)) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    match tokens.issue(user, admin) {
        Ok(token) => {
            println!("{token}");
            eprintln!("issued {} token for `{user}` in {}", if admin { "an admin" } else { "a" }, dir.display());
            EXIT_OK
        }
        Err(e @ teleop_hub::TokenError::BadUser(_)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
