//! Acceptance suite. Runs every criterion in turn, prints one
//! `PASS`/`FAIL` line each and exits nonzero if any failed.

#[path = "../../core/tests/support/mod.rs"]
mod support;

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{get_bytes, post_bytes, recorded_episode, teleop, write_config, Raw, Serve, ALICE, BOB};
use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::Rng;
use support::oracles::{self, DenseQp};
use teleop_core::diffik::{integrate, solve_velocity, velocity_bounds, Target};
use teleop_core::hand::HandFrame;
use teleop_core::protocol::*;
use teleop_core::qp::{self, QpProblem, QpSettings, QpStatus};
use teleop_core::script::{parse_script, run_lockstep, OPERATOR_RATE_HZ};
use teleop_core::session::{Owner, SessionParams};
use teleop_core::{fixtures, forward_kinematics, min_self_distance, parse_robot, site_jacobian};
use teleop_core::{IkParams, Registry, Session, SolveStatus, TargetSet};
use teleop_hub::{Fault, Principal, Store, StoreError};

type Check = fn() -> String;

const CRITERIA: &[(&str, f64, Check)] = &[
    ("packet sizes", 1.0, packet_sizes),
    ("latency profile", 30.0, latency_profile),
    ("solver correctness", 60.0, solver_correctness),
    ("kinematics properties", 10.0, kinematics_properties),
    ("safety invariant", 10.0, safety_invariant),
    ("protocol fidelity", 10.0, protocol_fidelity),
    ("end-to-end determinism", 60.0, end_to_end_determinism),
    ("hub api contract", 30.0, hub_api_contract),
    ("reset semantics", 30.0, reset_semantics),
];

fn main() {
    let quiet = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, limit, check) in CRITERIA {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) if secs <= *limit => println!("PASS {name}: {detail} ({secs:.1} s)"),
            Ok(detail) => {
                failed += 1;
                println!("FAIL {name}: took {secs:.1} s, limit {limit} s; {detail}");
            }
            Err(payload) => {
                failed += 1;
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                println!("FAIL {name}: {msg} ({secs:.1} s)");
            }
        }
    }
    std::panic::set_hook(quiet);
    println!("{} of {} criteria passed", CRITERIA.len() - failed, CRITERIA.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn row_value(stdout: &str, label: &str) -> String {
    let line = stdout
        .lines()
        .find(|l| l.trim_start().starts_with(label))
        .unwrap_or_else(|| panic!("no `{label}` row in:\n{stdout}"));
    line.rsplit("  ").next().unwrap().trim().to_string()
}

fn packet_sizes() -> String {
    let out = teleop(&["report", "packet-sizes", "--n", "58", "--m", "50"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let s = &out.stdout;
    assert_eq!(row_value(s, "Hand tracking (25"), "700 B");
    assert_eq!(row_value(s, "Hand tracking + head"), "728 B");
    assert_eq!(row_value(s, "Simulation state (n=58, m=50)"), "1,632 B");
    assert_eq!(row_value(s, "Stereo RGB"), "1,843,200 B");
    let ratio: f64 = row_value(s, "Reduction").trim_end_matches('x').parse().unwrap();
    assert!(ratio >= 1000.0, "ratio {ratio}");
    format!("700 / 728 / 1,632 / 1,843,200 B, ratio {ratio}x")
}

/// The four numbers after a profile row's label.
fn profile_row(stdout: &str, label: &str) -> [f64; 4] {
    let line = stdout
        .lines()
        .find(|l| l.trim_start().starts_with(label))
        .unwrap_or_else(|| panic!("no `{label}` row in:\n{stdout}"));
    let nums: Vec<f64> = line[line.find(label).unwrap() + label.len()..]
        .split_whitespace()
        .map(|w| w.parse().unwrap())
        .collect();
    nums.try_into().unwrap()
}

fn latency_profile() -> String {
    let dir = tempfile::tempdir().unwrap();
    let server = Serve::spawn(&write_config(dir.path(), ""));
    let out = teleop(&[
        "report", "latency", "--addr", &server.stream, "--http", server.http.trim_start_matches("http://"),
        "--ticks", "1000", "--scene", "sort_bolts",
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(out.stdout.contains("(dualarm7,"), "{}", out.stdout);
    let travel = profile_row(&out.stdout, "Packet Travel Time");
    let step = profile_row(&out.stdout, "Simulation Step");
    let total = profile_row(&out.stdout, "Total");
    assert!(step[0] <= 5000.0, "mean simulation step {} µs", step[0]);
    assert!(total[0] <= 10_000.0, "mean total {} µs", total[0]);
    format!(
        "dualarm7 mean travel {:.0} µs, step {:.0} µs, total {:.0} µs",
        travel[0], step[0], total[0]
    )
}

fn random_qp(rng: &mut impl Rng, n: usize, k: usize) -> DenseQp {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let lo: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..-0.1)).collect();
    let hi: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    let a = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |i, _| 0.5 * (lo[i] + hi[i]));
    let ax0 = &a * &x0;
    let b = (0..k).map(|r| ax0[r] - rng.random_range(0.0..0.5) + rng.random_range(0.0..0.6)).collect();
    DenseQp { h, g, lo, hi, a, b }
}

fn tip_targets(p: Vector3<f64>) -> TargetSet {
    TargetSet {
        entries: (0..4).map(|site| Target { site, position: p }).collect(),
        aperture_command: 1.0,
        gripper: None,
    }
}

fn solver_correctness() -> String {
    // (a) one joint, closed form
    let planar1 = parse_robot(fixtures::PLANAR1).unwrap();
    let p = IkParams::default();
    let theta: f64 = 0.01;
    let target = TargetSet {
        entries: vec![Target {
            site: 0,
            position: Vector3::new(theta.cos(), theta.sin(), 0.0),
        }],
        aperture_command: 1.0,
        gripper: None,
    };
    let v = solve_velocity(&planar1, &[0.0], &target, &p).unwrap().v[0];
    let closed = p.alpha * theta / (1.0 + p.damping);
    assert!((v - closed).abs() <= 1e-4, "1-DoF: {v} vs {closed}");

    // (b) QP against the exhaustive active-set oracle
    let mut rng = support::rng(101);
    let (mut checked, mut worst_gap) = (0, 0.0f64);
    while checked < 30 {
        let n = 2 + checked % 7;
        let p = random_qp(&mut rng, n, checked % 5);
        let Some((_, best)) = oracles::exhaustive_qp(&p) else { continue };
        let sol = qp::solve(
            &QpProblem {
                h: &p.h,
                g: &p.g,
                lo: &p.lo,
                hi: &p.hi,
                a: &p.a,
                b: &p.b,
            },
            &QpSettings::default(),
        )
        .unwrap();
        assert_eq!(sol.status, QpStatus::Converged);
        let gap = (p.objective(&sol.x) - best).abs();
        assert!(gap <= 1e-6, "QP instance {checked}: gap {gap}");
        assert!(p.violation(&sol.x) <= 1e-8);
        worst_gap = worst_gap.max(gap);
        checked += 1;
    }

    // (c) planar2 convergence within 2 s of simulated time
    let planar2 = parse_robot(fixtures::PLANAR2).unwrap();
    let mut worst_err = 0.0f64;
    for _ in 0..20 {
        let q_goal = [rng.random_range(-2.0..2.0), rng.random_range(0.3..2.8)];
        let goal = forward_kinematics(&planar2, &q_goal).unwrap().site_position(0);
        let targets = tip_targets(goal);
        let mut q = vec![0.3, 0.6];
        for _ in 0..(2.0 / p.dt).round() as usize {
            let cmd = solve_velocity(&planar2, &q, &targets, &p).unwrap();
            q = integrate(&planar2, &q, &cmd.v, p.dt);
        }
        let err = (forward_kinematics(&planar2, &q).unwrap().site_position(0) - goal).norm();
        assert!(err <= 1e-3, "planar2 error {err} towards {goal:?}");
        worst_err = worst_err.max(err);
    }

    // (d) bounds hold on every returned velocity
    let dual = parse_robot(fixtures::DUALARM7).unwrap();
    let mut solves = 0;
    while solves < 100_000 {
        let model = if solves % 20 == 0 { &dual } else { &planar2 };
        let mut q = support::random_q(model, &mut rng);
        for (i, v) in q.iter_mut().enumerate() {
            let j = model.dof_joint(i);
            match rng.random_range(0..6) {
                0 => *v = j.upper,
                1 => *v = j.lower,
                2 => *v = j.upper - rng.random_range(0.0..1e-3),
                _ => {}
            }
        }
        let params = IkParams {
            alpha: rng.random_range(0.1..50.0),
            dt: rng.random_range(0.001..0.02),
            limit_horizon: rng.random_range(0.1..1.0),
            ..IkParams::default()
        };
        let sites = model.sites.len();
        let targets = TargetSet {
            entries: (0..4)
                .map(|_| Target {
                    site: rng.random_range(0..sites),
                    position: Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-0.5..1.0),
                    ),
                })
                .collect(),
            aperture_command: 1.0,
            gripper: None,
        };
        let cmd = solve_velocity(model, &q, &targets, &params).unwrap();
        let (lo, hi) = velocity_bounds(model, &q, &params);
        for i in 0..q.len() {
            assert!(lo[i] <= cmd.v[i] && cmd.v[i] <= hi[i], "solve {solves}: v[{i}] = {} outside [{}, {}]", cmd.v[i], lo[i], hi[i]);
        }
        solves += 1;
    }
    format!("1-DoF Δ {:.1e}, 30 QPs worst gap {worst_gap:.1e}, planar2 worst error {worst_err:.1e} m, {solves} bounded solves", (v - closed).abs())
}

fn kinematics_properties() -> String {
    let mut rng = support::rng(102);
    let mut parts = Vec::new();
    for text in [fixtures::PLANAR2, fixtures::DUALARM7] {
        let model = parse_robot(text).unwrap();
        let (mut jac_worst, mut fk_worst) = (0.0f64, 0.0f64);
        for _ in 0..50 {
            let q = support::random_q(&model, &mut rng);
            let poses = forward_kinematics(&model, &q).unwrap();
            for (s, e) in oracles::site_positions(&model, &q).iter().enumerate() {
                fk_worst = fk_worst.max((poses.site_position(s) - Vector3::from(*e)).abs().max());
            }
            for (s, site) in model.sites.iter().enumerate() {
                let jac = site_jacobian(&model, &q, &site.name).unwrap();
                jac_worst = jac_worst.max((jac - oracles::fd_jacobian(&model, &q, s, 1e-6)).abs().max());
            }
        }
        assert!(jac_worst <= 1e-5, "{}: Jacobian vs finite differences {jac_worst}", model.name);
        assert!(fk_worst <= 1e-9, "{}: FK vs composition {fk_worst}", model.name);
        parts.push(format!("{} |ΔJ| {jac_worst:.1e}, |ΔFK| {fk_worst:.1e}", model.name));
    }
    parts.join("; ")
}

fn safety_invariant() -> String {
    let r = Registry::bundled();
    let script = parse_script(fixtures::NEAR_COLLISION_SCRIPT).unwrap();
    let scene = r.scene(script.scene.as_deref().unwrap()).unwrap().clone();
    let mut s = Session::new(1, scene, SessionParams::default(), script.seed, Owner::default());
    let margin = s.params().ik.d_margin;
    let (mut ticks, mut relaxed, mut closest) = (0usize, 0usize, f64::INFINITY);
    run_lockstep(&mut s, &r, &script.timeline(OPERATOR_RATE_HZ), 0.5, |s, _| {
        ticks += 1;
        if s.last_status() == SolveStatus::InfeasibleRelaxed {
            relaxed += 1;
            return;
        }
        let d = min_self_distance(&s.scene().model, &s.state().q).unwrap().distance;
        assert!(d >= margin - 1e-6, "tick {}: distance {d} below margin {margin}", s.state().tick);
        closest = closest.min(d);
    });
    assert!(ticks > 0);
    format!("{ticks} ticks, closest {closest:.6} m against margin {margin} m, {relaxed} relaxed")
}

fn random_pose(rng: &mut impl Rng) -> WirePose {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.random_range(0.2..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    let v = q.quaternion();
    WirePose {
        position: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
        orientation: [v.w as f32, v.i as f32, v.j as f32, v.k as f32],
    }
}

fn round_trip(packet: &Packet) {
    let framed = encode_frame(&packet.encode());
    let mut d = FrameDecoder::default();
    d.push(&framed);
    let back = Packet::decode(&d.next_frame().unwrap().unwrap()).unwrap();
    assert_eq!(&back, packet);
    assert_eq!(encode_frame(&back.encode()), framed);
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/golden")
}

fn pose_of(v: &serde_json::Value) -> WirePose {
    let p: Vec<f32> = serde_json::from_value(v[0].clone()).unwrap();
    let q: Vec<f32> = serde_json::from_value(v[1].clone()).unwrap();
    WirePose {
        position: [p[0], p[1], p[2]],
        orientation: [q[0], q[1], q[2], q[3]],
    }
}

/// Rebuilds each golden packet from its listed fields and compares bytes.
fn check_goldens() -> usize {
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(golden_dir().join("vectors.json")).unwrap()).unwrap();
    let vectors = index["vectors"].as_array().unwrap();
    for g in vectors {
        let f = &g["fields"];
        let body = match g["kind"].as_u64().unwrap() {
            1 => {
                let poses: Vec<WirePose> = f["keypoints"].as_array().unwrap().iter().map(pose_of).collect();
                Body::Tracking(TrackingPayload(poses.try_into().unwrap()))
            }
            2 => Body::State(StatePayload {
                joints: serde_json::from_value(f["joints"].clone()).unwrap(),
                objects: f["objects"].as_array().unwrap().iter().map(pose_of).collect(),
            }),
            3 => Body::Control(ControlPayload::new(
                ControlOp::from_byte(f["op"].as_u64().unwrap() as u8).unwrap(),
                f["arg"].as_str().unwrap(),
                f["seed"].as_u64().unwrap(),
            )),
            4 => Body::Ack(AckPayload::new(
                f["acked_seq"].as_u64().unwrap() as u32,
                AckCode::from_byte(f["code"].as_u64().unwrap() as u8).unwrap(),
                f["msg"].as_str().unwrap(),
            )),
            k => panic!("golden kind {k}"),
        };
        let packet = Packet {
            header: PacketHeader {
                kind: body.kind(),
                session_id: g["session_id"].as_u64().unwrap() as u32,
                seq: g["seq"].as_u64().unwrap() as u32,
                timestamp_us: g["timestamp_us"].as_u64().unwrap(),
            },
            body,
        };
        let bytes = std::fs::read(golden_dir().join(g["file"].as_str().unwrap())).unwrap();
        assert_eq!(encode_frame(&packet.encode()), bytes, "golden {} differs", g["name"]);
        assert_eq!(bytes.len() as u64, g["frame_len"].as_u64().unwrap());
    }
    vectors.len()
}

fn protocol_fidelity() -> String {
    const N: usize = 10_000;
    let mut rng = support::rng(103);
    let header = |kind, rng: &mut rand_chacha::ChaCha8Rng| PacketHeader {
        kind,
        session_id: rng.random(),
        seq: rng.random(),
        timestamp_us: rng.random(),
    };
    for _ in 0..N {
        let poses: Vec<WirePose> = (0..teleop_core::hand::KEYPOINT_COUNT).map(|_| random_pose(&mut rng)).collect();
        round_trip(&Packet {
            header: header(PacketKind::Tracking, &mut rng),
            body: Body::Tracking(TrackingPayload(poses.try_into().unwrap())),
        });
    }
    // from f64 hand frames the loss is exactly the cast to f32
    for _ in 0..N {
        let p = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let frame = HandFrame::collapsed(p, rng.random());
        let (_, back) = decode_tracking(&encode_tracking(&frame, 1, 1)).unwrap();
        let got = back.keypoints[0].position;
        for k in 0..3 {
            assert_eq!(got[k], p[k] as f32 as f64);
        }
    }
    for _ in 0..N {
        let n = rng.random_range(0..64);
        let m = rng.random_range(0..16);
        round_trip(&Packet {
            header: header(PacketKind::State, &mut rng),
            body: Body::State(StatePayload {
                joints: (0..n).map(|_| rng.random_range(-10.0f32..10.0)).collect(),
                objects: (0..m).map(|_| random_pose(&mut rng)).collect(),
            }),
        });
    }
    for _ in 0..N {
        let len = rng.random_range(0..=MAX_CONTROL_ARG);
        let arg: String = (0..len).map(|_| rng.random_range(b' '..=b'~') as char).collect();
        round_trip(&Packet {
            header: header(PacketKind::Control, &mut rng),
            body: Body::Control(ControlPayload::new(ControlOp::from_byte(rng.random_range(1..=4)).unwrap(), arg, rng.random())),
        });
    }
    for _ in 0..N {
        let len = rng.random_range(0..80);
        let msg: String = (0..len).map(|_| rng.random_range('a'..='ω')).collect();
        round_trip(&Packet {
            header: header(PacketKind::Ack, &mut rng),
            body: Body::Ack(AckPayload::new(rng.random(), AckCode::from_byte(rng.random_range(0..=8)).unwrap(), msg)),
        });
    }
    let goldens = check_goldens();

    // the stream reader drops every packet not newer than the last accepted
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let (delivered, dropped, sent) = rt.block_on(async {
        let (mut w, r) = tokio::io::duplex(1 << 20);
        let mut seqs: Vec<u32> = (1..=500).collect();
        for i in 0..seqs.len() {
            let j = rng.random_range(i.saturating_sub(8)..(i + 8).min(seqs.len()));
            seqs.swap(i, j);
        }
        for &s in &seqs {
            write_frame(&mut w, &encode_state(&StatePayload::default(), 1, s, 0)).await.unwrap();
        }
        drop(w);
        let mut reader = PacketReader::new(r);
        let mut got = Vec::new();
        while let Some(p) = reader.recv().await.unwrap() {
            got.push(p.header.seq);
        }
        assert!(got.windows(2).all(|w| w[0] < w[1]));
        (got.len() as u64, reader.dropped(), seqs.len() as u64)
    });
    assert_eq!(delivered + dropped, sent);

    // and the server counts what it drops, per session
    let server_dropped = rt.block_on(async {
        let s = common::start().await;
        let mut raw = Raw::connect(&s.stream).await;
        raw.hello(0, "planar_reach", 1).await;
        let hand = TrackingPayload::from_frame(&HandFrame::collapsed(Vector3::new(0.5, 0.2, 0.1), 0));
        raw.send(7, Body::Tracking(hand.clone())).await;
        raw.send(5, Body::Tracking(hand)).await;
        tokio::time::sleep(Duration::from_millis(200)).await;
        let report = s.server.host.report(raw.session).unwrap();
        s.server.shutdown().await;
        (report.dropped_stale, report.mailbox.posted)
    });
    assert_eq!(server_dropped, (1, 1), "server dropped/posted after seq 7 then 5");
    format!(
        "{N} round trips per kind, {goldens} golden frames byte-exact, reader dropped {dropped} of {sent} shuffled, server counted seq 5 after 7"
    )
}

fn end_to_end_determinism() -> String {
    let mut runs = Vec::new();
    for round in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let server = Serve::spawn(&write_config(dir.path(), ""));
        let script = dir.path().join("pick_place.script");
        std::fs::write(&script, fixtures::PICK_PLACE_SCRIPT).unwrap();
        let out = teleop(&["synth", "--script", script.to_str().unwrap(), "--addr", &server.stream, "--token", ALICE]);
        assert_eq!(out.code, 0, "round {round}: {}{}", out.stdout, out.stderr);
        let ids: Vec<&str> = out.stdout.lines().filter_map(|l| l.strip_prefix("episode ")).collect();
        assert_eq!(ids.len(), 1, "{}", out.stdout);
        let (status, bytes) = get_bytes(&format!("{}/api/v1/episodes/{}", server.http, ids[0]), Some(ALICE));
        assert_eq!(status, 200);
        let file = dir.path().join("fetched.dxe");
        std::fs::write(&file, &bytes).unwrap();
        let out = teleop(&["replay", file.to_str().unwrap()]);
        assert_eq!(out.code, 0, "round {round}: {}{}", out.stdout, out.stderr);
        let ticks: usize = out
            .stdout
            .strip_prefix("MATCH: 0 diverging ticks of ")
            .unwrap_or_else(|| panic!("{}", out.stdout))
            .split_whitespace()
            .next()
            .unwrap()
            .parse()
            .unwrap();
        runs.push(ticks);
    }
    format!("two clean-store runs replayed with 0 diverging ticks ({} and {} ticks)", runs[0], runs[1])
}

fn listing(http: &str, token: &str) -> serde_json::Value {
    let (status, body) = get_bytes(&format!("{http}/api/v1/get-my-data"), Some(token));
    assert_eq!(status, 200);
    serde_json::from_slice(&body).unwrap()
}

fn dxe_count(root: &std::path::Path) -> usize {
    fn walk(p: &std::path::Path, n: &mut usize) {
        for e in std::fs::read_dir(p).unwrap().flatten() {
            let path = e.path();
            if path.is_dir() {
                walk(&path, n);
            } else if path.extension().is_some_and(|x| x == "dxe") && !path.starts_with(p.join("tmp")) {
                *n += 1;
            }
        }
    }
    let mut n = 0;
    walk(root, &mut n);
    n
}

fn hub_api_contract() -> String {
    let dir = tempfile::tempdir().unwrap();
    let store_dir = dir.path().join("store");
    let server = Serve::spawn(&write_config(dir.path(), ""));
    let http = server.http.clone();

    // upload, list, fetch
    let mut ids = Vec::new();
    for seed in 1..=3 {
        let log = recorded_episode("sort_bolts", seed, "alice");
        let (status, body) = post_bytes(&format!("{http}/api/v1/log"), Some(ALICE), &log.to_bytes());
        assert_eq!(status, 201, "{}", String::from_utf8_lossy(&body));
        ids.push((log.id().to_string(), log.to_bytes()));
    }
    let listed = listing(&http, ALICE);
    assert_eq!(listed.as_array().unwrap().len(), 3);
    for (id, bytes) in &ids {
        let (status, back) = get_bytes(&format!("{http}/api/v1/episodes/{id}"), Some(ALICE));
        assert_eq!((status, &back), (200, bytes));
    }
    assert_eq!(listing(&http, BOB), serde_json::json!([]));

    // 401 on a bad token
    let bad = Some("definitely-not-a-token-000000000000000");
    assert_eq!(get_bytes(&format!("{http}/api/v1/get-my-data"), bad).0, 401);
    assert_eq!(get_bytes(&format!("{http}/api/v1/get-my-data"), None).0, 401);
    assert_eq!(post_bytes(&format!("{http}/api/v1/log"), bad, &ids[0].1).0, 401);
    assert_eq!(get_bytes(&format!("{http}/api/v1/episodes/{}", ids[0].0), bad).0, 401);

    // 403 across users
    assert_eq!(get_bytes(&format!("{http}/api/v1/episodes/{}", ids[0].0), Some(BOB)).0, 403);
    assert_eq!(post_bytes(&format!("{http}/api/v1/log"), Some(BOB), &ids[0].1).0, 403);

    // duplicate uploads are idempotent
    let (status, body) = post_bytes(&format!("{http}/api/v1/log"), Some(ALICE), &ids[1].1);
    assert_eq!(status, 200);
    let echoed: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(echoed["episode_id"], ids[1].0.as_str());
    assert_eq!(listing(&http, ALICE).as_array().unwrap().len(), 3);
    drop(server);

    // the index rebuilt from the episode files equals the maintained one
    let store = Store::open(&store_dir, None).unwrap();
    let before = store.index();
    assert_eq!(before.entries.len(), 3);
    assert_eq!(store.rebuild().unwrap(), before);
    assert_eq!(store.index_on_disk().unwrap(), before);
    std::fs::remove_file(store_dir.join("index.json")).unwrap();
    assert_eq!(Store::open(&store_dir, None).unwrap().index(), before);

    // a write cut off at any point leaves the store as it was
    let alice = Principal {
        user_id: "alice".into(),
        fingerprint: String::new(),
        admin: false,
    };
    let store = Store::open(&store_dir, None).unwrap();
    let extra = recorded_episode("mug_basket", 9, "alice").to_bytes();
    let cuts: Vec<usize> = (0..extra.len()).step_by(37).chain([extra.len() - 1]).collect();
    for &k in &cuts {
        store.inject(Fault::EpisodeWrite { after: k });
        assert!(matches!(store.put(&alice, &extra), Err(StoreError::Io(_))), "cut at {k}");
        assert_eq!(store.index(), before);
        assert_eq!(dxe_count(&store_dir), 3, "cut at {k}");
    }
    let reopened = Store::open(&store_dir, None).unwrap();
    assert_eq!(reopened.index(), before);
    assert_eq!(reopened.index_on_disk().unwrap(), before);
    store.inject(Fault::IndexWrite { after: 10 });
    store.put(&alice, &extra).unwrap();
    let repaired = Store::open(&store_dir, None).unwrap();
    assert_eq!(repaired.index().entries.len(), 4);
    assert_eq!(repaired.index_on_disk().unwrap(), repaired.index());
    format!(
        "upload/list/fetch, 401, 403, idempotent duplicate, rebuild equivalence, {} truncated writes left the store consistent",
        cuts.len()
    )
}

fn yaw_of(relative: &UnitQuaternion<f64>) -> f64 {
    let q = relative.quaternion();
    2.0 * q.k.atan2(q.w)
}

fn reset_semantics() -> String {
    let r = Registry::bundled();
    let scene = r.scene("sort_bolts").unwrap();
    let session = |seed| Session::new(1, scene.clone(), SessionParams::default(), seed, Owner::default());
    let a = session(42);
    assert_eq!(a.state(), session(42).state());
    let mut c = session(5);
    assert_ne!(a.state().object_poses, c.state().object_poses);
    c.reset(42);
    assert_eq!(c.state().object_poses, a.state().object_poses);

    let spec = &scene.scene;
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); spec.randomization.len() * 4];
    for seed in 1..=1000u64 {
        c.reset(seed);
        for (ri, rnd) in spec.randomization.iter().enumerate() {
            let declared = spec.objects[rnd.object].pose;
            let pose = c.state().object_poses[rnd.object];
            let dp = pose.translation.vector - declared.translation.vector;
            let dyaw = yaw_of(&(pose.rotation * declared.rotation.inverse()));
            for (k, d) in [dp.x, dp.y, dp.z, dyaw].into_iter().enumerate() {
                let (lo, hi) = (rnd.lo[k], rnd.hi[k]);
                assert!(lo - 1e-12 <= d && d <= hi + 1e-12, "seed {seed} object {}: {d} outside [{lo}, {hi}]", rnd.object);
                if hi > lo {
                    samples[ri * 4 + k].push((d - lo) / (hi - lo));
                }
            }
        }
    }
    let crit = support::ks_critical_01(1000);
    let mut worst = 0.0f64;
    let mut tested = 0;
    for col in samples.iter().filter(|c| !c.is_empty()) {
        let d = support::ks_uniform(col);
        assert!(d < crit, "KS D = {d} ≥ {crit}");
        worst = worst.max(d);
        tested += 1;
    }
    format!("seeded resets reproduce, 1000 resets in bounds, {tested} marginals max KS D {worst:.4} < {crit:.4}")
}
