//! Per-operator simulation sessions.
//!
//! A session owns the world state for one scene. Each [`Session::step`]
//! consumes the freshest tracking packet (if any), retargets it, solves one
//! IK step, drives the gripper, updates grasps and appends a record to the
//! open episode.

pub mod grasp;
mod pool;
pub mod profile;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;

use crate::diffik::{self, IkError, IkParams, SolveStatus, TargetSet, VelocityCommand};
use crate::episode::{
    tracking_digest, Attachment, EpisodeLog, EpisodeMeta, Record, RecordStatus, Recorder, Snapshot, TrackingMode,
    FORMAT_VERSION,
};
use crate::kinematics;
use crate::protocol::{now_us, Mailbox, StatePayload, TrackingPayload, WirePose, TRACKING_PAYLOAD_LEN};
use crate::registry::ResolvedScene;
use crate::scene::Randomization;

pub use pool::{SessionError, SessionPool, DEFAULT_MAX_SESSIONS};
pub use profile::{InsufficientSamples, Stats, TimingProfile, TimingSummary};

pub const DEFAULT_DT: f64 = 0.005;

/// World state streamed to the operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub tick: u64,
    pub sim_time: f64,
    pub q: Vec<f64>,
    /// Normalized aperture command in effect per gripper.
    pub gripper_apertures: Vec<f64>,
    pub object_poses: Vec<Isometry3<f64>>,
    /// Object index to gripper index.
    pub attached: BTreeMap<usize, usize>,
}

impl SimState {
    pub fn payload(&self) -> StatePayload {
        StatePayload {
            joints: self.q.iter().map(|&v| v as f32).collect(),
            objects: self
                .object_poses
                .iter()
                .map(|p| WirePose::from_f64(&p.translation.vector, &p.rotation))
                .collect(),
        }
    }
}

/// A received tracking packet waiting in the mailbox.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingInput {
    pub seq: u32,
    /// Sender timestamp from the packet header.
    pub sent_us: u64,
    pub received_us: u64,
    pub payload: TrackingPayload,
}

impl TrackingInput {
    pub fn new(seq: u32, sent_us: u64, payload: TrackingPayload) -> Self {
        Self {
            seq,
            sent_us,
            received_us: now_us(),
            payload,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionParams {
    pub ik: IkParams,
    pub tracking_mode: TrackingMode,
    pub profile_window: usize,
}

impl Default for SessionParams {
    fn default() -> Self {
        Self {
            ik: IkParams::default(),
            tracking_mode: TrackingMode::Inline,
            profile_window: profile::DEFAULT_WINDOW,
        }
    }
}

impl SessionParams {
    pub fn dt(&self) -> f64 {
        self.ik.dt
    }
}

/// Who episodes recorded in a session are attributed to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Owner {
    pub user_id: String,
    pub token_fingerprint: String,
}

impl Default for Owner {
    fn default() -> Self {
        Self {
            user_id: "anonymous".into(),
            token_fingerprint: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub tick: u64,
    /// Sequence number of the tracking packet consumed this tick.
    pub consumed: Option<u32>,
    pub status: SolveStatus,
}

/// Seeds drawn from entropy are never zero, so a recorded seed always
/// reproduces its placement.
fn effective_seed(seed: u64) -> u64 {
    if seed != 0 {
        return seed;
    }
    loop {
        let s: u64 = rand::random();
        if s != 0 {
            return s;
        }
    }
}

fn pose_to_array(p: &Isometry3<f64>) -> [f64; 7] {
    let t = p.translation.vector;
    let r = p.rotation.quaternion();
    [t.x, t.y, t.z, r.w, r.i, r.j, r.k]
}

fn pose_from_array(a: &[f64; 7]) -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::new(a[0], a[1], a[2]),
        UnitQuaternion::new_unchecked(Quaternion::new(a[3], a[4], a[5], a[6])),
    )
}

/// Object poses for a reset with `seed`: declared pose plus uniform offsets.
pub fn sample_object_poses(scene: &ResolvedScene, seed: u64) -> Vec<Isometry3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scene
        .scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, obj)| match scene.scene.randomization_for(i) {
            None => obj.pose,
            Some(r) => {
                let mut d = [0.0; 4];
                for k in 0..4 {
                    d[k] = if r.lo[k] == r.hi[k] {
                        r.lo[k]
                    } else {
                        rng.random_range(r.lo[k]..=r.hi[k])
                    };
                }
                Randomization::apply(&obj.pose, d)
            }
        })
        .collect()
}

fn home_apertures(scene: &ResolvedScene) -> Vec<f64> {
    let model = &scene.model;
    model
        .grippers
        .iter()
        .map(|g| match g.aperture_joint {
            Some(j) => {
                let d = model.joints[j].dof.expect("aperture joint moves");
                let (a, b) = g.range;
                ((scene.home[d] - a) / (b - a)).clamp(0.0, 1.0)
            }
            None => 1.0,
        })
        .collect()
}

pub struct Session {
    id: u32,
    scene: ResolvedScene,
    params: SessionParams,
    owner: Owner,
    state: SimState,
    /// Object index to (gripper, object pose in gripper frame).
    grasps: BTreeMap<usize, (usize, Isometry3<f64>)>,
    seed: u64,
    mailbox: Arc<Mailbox<TrackingInput>>,
    held: Option<TrackingInput>,
    recorder: Option<Recorder>,
    profile: TimingProfile,
    last_status: SolveStatus,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("scene", &self.scene.scene.id)
            .field("tick", &self.state.tick)
            .finish_non_exhaustive()
    }
}

impl Session {
    /// Creates a session in the scene's reset state and opens an episode.
    pub fn new(id: u32, scene: ResolvedScene, params: SessionParams, seed: u64, owner: Owner) -> Self {
        let dof = scene.model.dof();
        let mut s = Self {
            id,
            state: SimState {
                tick: 0,
                sim_time: 0.0,
                q: vec![0.0; dof],
                gripper_apertures: Vec::new(),
                object_poses: Vec::new(),
                attached: BTreeMap::new(),
            },
            scene,
            params,
            owner,
            grasps: BTreeMap::new(),
            seed: 0,
            mailbox: Arc::new(Mailbox::new()),
            held: None,
            recorder: None,
            profile: TimingProfile::new(params.profile_window),
            last_status: SolveStatus::Converged,
        };
        s.place(seed);
        s.open_episode();
        s
    }

    /// Rebuilds a session at an episode's initial state, for replay.
    pub fn from_snapshot(
        id: u32,
        scene: ResolvedScene,
        params: SessionParams,
        snapshot: &Snapshot,
        seed: u64,
    ) -> Result<Self, SessionError> {
        let model = &scene.model;
        let m = scene.scene.objects.len();
        if snapshot.q.len() != model.dof()
            || snapshot.objects.len() != m
            || snapshot.apertures.len() != model.grippers.len()
            || snapshot.attached.iter().any(|a| a.object >= m || a.gripper >= model.grippers.len())
        {
            return Err(SessionError::SnapshotMismatch);
        }
        let grasps: BTreeMap<usize, (usize, Isometry3<f64>)> = snapshot
            .attached
            .iter()
            .map(|a| (a.object, (a.gripper, pose_from_array(&a.offset))))
            .collect();
        let state = SimState {
            tick: snapshot.tick,
            sim_time: snapshot.tick as f64 * params.dt(),
            q: snapshot.q.clone(),
            gripper_apertures: snapshot.apertures.clone(),
            object_poses: snapshot.objects.iter().map(pose_from_array).collect(),
            attached: grasps.iter().map(|(&o, &(g, _))| (o, g)).collect(),
        };
        let mut s = Self {
            id,
            scene,
            params,
            owner: Owner::default(),
            state,
            grasps,
            seed,
            mailbox: Arc::new(Mailbox::new()),
            held: None,
            recorder: None,
            profile: TimingProfile::new(params.profile_window),
            last_status: SolveStatus::Converged,
        };
        s.open_episode();
        Ok(s)
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn scene(&self) -> &ResolvedScene {
        &self.scene
    }

    pub fn params(&self) -> &SessionParams {
        &self.params
    }

    pub fn owner(&self) -> &Owner {
        &self.owner
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mailbox(&self) -> Arc<Mailbox<TrackingInput>> {
        Arc::clone(&self.mailbox)
    }

    pub fn profile(&self) -> &TimingProfile {
        &self.profile
    }

    pub fn episode_id(&self) -> Option<Uuid> {
        self.recorder.as_ref().map(Recorder::id)
    }

    pub fn last_status(&self) -> SolveStatus {
        self.last_status
    }

    /// `(n, m)` of the state payload.
    pub fn dims(&self) -> (usize, usize) {
        (self.scene.model.dof(), self.scene.scene.objects.len())
    }

    fn place(&mut self, seed: u64) {
        let seed = effective_seed(seed);
        self.seed = seed;
        self.state = SimState {
            tick: 0,
            sim_time: 0.0,
            q: self.scene.home.clone(),
            gripper_apertures: home_apertures(&self.scene),
            object_poses: sample_object_poses(&self.scene, seed),
            attached: BTreeMap::new(),
        };
        self.grasps.clear();
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            tick: self.state.tick,
            q: self.state.q.clone(),
            apertures: self.state.gripper_apertures.clone(),
            objects: self.state.object_poses.iter().map(pose_to_array).collect(),
            attached: self
                .grasps
                .iter()
                .map(|(&object, (gripper, offset))| Attachment {
                    object,
                    gripper: *gripper,
                    offset: pose_to_array(offset),
                })
                .collect(),
        }
    }

    fn open_episode(&mut self) {
        let (n, m) = self.dims();
        let meta = EpisodeMeta {
            format_version: FORMAT_VERSION,
            episode_id: Uuid::new_v4(),
            user_id: self.owner.user_id.clone(),
            token_fingerprint: self.owner.token_fingerprint.clone(),
            scene_id: self.scene.scene.id.clone(),
            scene_hash: self.scene.scene.hash.clone(),
            robot: self.scene.model.name.clone(),
            model_hash: self.scene.model.hash.clone(),
            start_wall_us: now_us(),
            end_wall_us: 0,
            tick_count: 0,
            dt: self.params.dt(),
            n,
            m,
            grippers: self.scene.model.grippers.len(),
            tracking: self.params.tracking_mode,
            reset_seed: self.seed,
            ik: self.params.ik,
            initial: self.snapshot(),
        };
        self.recorder = Some(Recorder::new(meta));
    }

    fn close_episode(&mut self) -> Option<EpisodeLog> {
        let recorder = self.recorder.take()?;
        let id = recorder.id();
        match recorder.finish(now_us()) {
            Ok(log) => Some(log),
            Err(e) => {
                tracing::info!(session = self.id, episode = %id, "episode discarded: {e}");
                None
            }
        }
    }

    /// Opens an episode if none is open; returns the open episode id.
    pub fn start_episode(&mut self) -> Uuid {
        if self.recorder.is_none() {
            self.open_episode();
        }
        self.episode_id().expect("episode open")
    }

    /// Finalizes the open episode without opening a new one.
    pub fn end_episode(&mut self) -> Option<EpisodeLog> {
        self.close_episode()
    }

    /// Home pose, fresh object placement, cleared grasps and a new episode.
    /// Returns the finalized previous episode.
    pub fn reset(&mut self, seed: u64) -> Option<EpisodeLog> {
        let done = self.close_episode();
        self.place(seed);
        self.open_episode();
        done
    }

    /// Swaps in another scene (possibly with another robot) and resets.
    pub fn switch_task(&mut self, scene: ResolvedScene, seed: u64) -> Option<EpisodeLog> {
        let done = self.close_episode();
        self.scene = scene;
        self.held = None;
        self.place(seed);
        self.open_episode();
        done
    }

    /// Finalizes the open episode, consuming the session.
    pub fn close(mut self) -> Option<EpisodeLog> {
        self.close_episode()
    }

    /// Retargeted hand input in effect, if any.
    fn targets(&self) -> Option<TargetSet> {
        let input = self.held.as_ref()?;
        let frame = input.payload.to_frame(input.sent_us);
        match diffik::map_hand_to_targets(&frame, &self.scene.model, &self.scene.scene.calibration) {
            Ok(t) => Some(t),
            Err(IkError::NoGripper(_)) => None,
            Err(e) => {
                tracing::warn!(session = self.id, "retargeting failed: {e}");
                None
            }
        }
    }

    /// Velocities that move each aperture joint toward its commanded opening
    /// at the joint speed limit.
    fn aperture_drive(&self, dt: f64) -> Vec<(usize, f64)> {
        let model = &self.scene.model;
        let mut out = Vec::new();
        for (g, gripper) in model.grippers.iter().enumerate() {
            let Some(j) = gripper.aperture_joint else { continue };
            let joint = &model.joints[j];
            let d = joint.dof.expect("aperture joint moves");
            let (a_min, a_max) = gripper.range;
            let target = (a_min + self.state.gripper_apertures[g] * (a_max - a_min)).clamp(joint.lower, joint.upper);
            out.push((d, ((target - self.state.q[d]) / dt).clamp(-joint.vlimit, joint.vlimit)));
        }
        out
    }

    /// Velocity command for this tick. Aperture joints follow their drive;
    /// the remaining joints track the hand input, or hold without one.
    fn command(&mut self, dt: f64) -> VelocityCommand {
        let dof = self.scene.model.dof();
        let targets = self.targets();
        if let (Some(t), Some(slot)) = (&targets, self.state.gripper_apertures.first_mut()) {
            *slot = t.aperture_command;
        }
        let drive = self.aperture_drive(dt);
        let mut cmd = match &targets {
            None => VelocityCommand::zero(dof),
            Some(t) => match diffik::solve_velocity_fixed(&self.scene.model, &self.state.q, t, &self.params.ik, &drive) {
                Ok(cmd) => cmd,
                Err(e) => {
                    tracing::warn!(session = self.id, "IK solve failed: {e}");
                    let mut cmd = VelocityCommand::zero(dof);
                    cmd.status = SolveStatus::InfeasibleRelaxed;
                    cmd
                }
            },
        };
        if targets.is_none() {
            for &(d, v) in &drive {
                cmd.v[d] = v;
            }
        }
        cmd
    }

    /// Advances the world by one tick.
    pub fn step(&mut self) -> StepReport {
        let started = Instant::now();
        let fresh = self.mailbox.take();
        let consumed = fresh.as_ref().map(|i| (i.seq, i.sent_us, i.received_us));
        if let Some(input) = fresh {
            self.held = Some(input);
        }

        let model = Arc::clone(&self.scene.model);
        let dt = self.params.dt();
        let cmd = self.command(dt);
        self.state.q = diffik::integrate(&model, &self.state.q, &cmd.v, dt);

        let poses = kinematics::fk(&model, &self.state.q);
        let frames = grasp::gripper_frames(&model, &poses);
        grasp::update(
            &self.scene.scene.grasp,
            &self.scene.scene.objects,
            &frames,
            &self.state.gripper_apertures,
            &mut self.state.object_poses,
            &mut self.grasps,
            dt,
        );
        self.state.attached = self.grasps.iter().map(|(&o, &(g, _))| (o, g)).collect();
        self.state.tick += 1;
        self.state.sim_time = self.state.tick as f64 * dt;
        self.last_status = cmd.status;

        if let Some(rec) = self.recorder.as_mut() {
            let status = RecordStatus {
                ik: cmd.status,
                has_tracking: self.held.is_some(),
                fresh: consumed.is_some(),
            };
            let tracking = match (&self.held, self.params.tracking_mode) {
                (Some(h), TrackingMode::Inline) => h.payload.encode().to_vec(),
                (Some(h), TrackingMode::Digest) => tracking_digest(&h.payload.encode()).to_vec(),
                (None, mode) => vec![0; mode.field_len()],
            };
            debug_assert!(tracking.len() == TRACKING_PAYLOAD_LEN || self.params.tracking_mode == TrackingMode::Digest);
            rec.push(Record {
                tick: self.state.tick as u32,
                sim_time: self.state.sim_time,
                q: self.state.q.iter().map(|&v| v as f32).collect(),
                v_cmd: cmd.v.iter().map(|&v| v as f32).collect(),
                apertures: self.state.gripper_apertures.iter().map(|&v| v as f32).collect(),
                tracking,
                objects: self.state.payload().objects,
                status: status.to_byte(),
            });
        }

        self.profile.tick();
        if let Some((_, sent, received)) = consumed {
            let step_us = started.elapsed().as_secs_f64() * 1e6;
            self.profile.record(received as f64 - sent as f64, step_us);
        }
        StepReport {
            tick: self.state.tick,
            consumed: consumed.map(|c| c.0),
            status: cmd.status,
        }
    }

    /// Records produced so far in the open episode.
    pub fn open_records(&self) -> usize {
        self.recorder.as_ref().map_or(0, Recorder::len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand::HandRig;
    use crate::registry::Registry;
    use nalgebra::Vector3;

    fn session(scene: &str, seed: u64) -> Session {
        let r = Registry::bundled();
        Session::new(1, r.scene(scene).unwrap().clone(), SessionParams::default(), seed, Owner::default())
    }

    #[test]
    fn same_seed_same_initial_state() {
        assert_eq!(session("sort_bolts", 42).state(), session("sort_bolts", 42).state());
        assert_ne!(session("sort_bolts", 42).state(), session("sort_bolts", 43).state());
    }

    #[test]
    fn holds_without_input() {
        let mut s = session("sort_bolts", 1);
        let q0 = s.state().q.clone();
        for _ in 0..100 {
            s.step();
        }
        assert_eq!(s.state().q, q0);
        assert_eq!(s.state().tick, 100);
    }

    #[test]
    fn burst_consumes_last() {
        let mut s = session("planar_reach", 1);
        let mb = s.mailbox();
        let frame = HandRig.frame(&Isometry3::translation(1.0, 1.0, 0.0), 0.0, 0);
        for seq in 1..=10 {
            mb.post(TrackingInput::new(seq, 0, TrackingPayload::from_frame(&frame)));
        }
        assert_eq!(s.step().consumed, Some(10));
        assert_eq!(s.step().consumed, None);
        assert_eq!(mb.stats().overwritten, 9);
    }

    #[test]
    fn reset_finalizes_and_reopens() {
        let mut s = session("sort_bolts", 5);
        for _ in 0..3 {
            s.step();
        }
        let first = s.episode_id().unwrap();
        let log = s.reset(5).unwrap();
        assert_eq!(log.id(), first);
        assert_eq!(log.records().len(), 3);
        assert_ne!(s.episode_id().unwrap(), first);
        assert_eq!(s.state().tick, 0);
        // nothing recorded yet: discarded
        assert!(s.reset(6).is_none());
    }

    #[test]
    fn zero_width_ranges_give_declared_poses() {
        let r = Registry::bundled();
        let mut scene = r.scene("mug_basket").unwrap().clone();
        let mut spec = (*scene.scene).clone();
        for rz in &mut spec.randomization {
            rz.lo = [0.0; 4];
            rz.hi = [0.0; 4];
        }
        scene.scene = Arc::new(spec);
        let poses = sample_object_poses(&scene, 99);
        for (p, o) in poses.iter().zip(&scene.scene.objects) {
            assert_eq!(p, &o.pose);
        }
    }

    #[test]
    fn continuity_bound() {
        let mut s = session("sort_bolts", 3);
        let wrist = Isometry3::from_parts(
            Translation3::new(0.3, -0.2, 0.3),
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI),
        );
        let frame = HandRig.frame(&wrist, 0.0, 0);
        s.mailbox().post(TrackingInput::new(1, 0, TrackingPayload::from_frame(&frame)));
        let vmax = s.scene().model.velocity_limits().into_iter().fold(0.0, f64::max);
        for _ in 0..200 {
            let q0 = s.state().q.clone();
            s.step();
            let dq = s.state().q.iter().zip(&q0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dq <= vmax * 0.005 + 1e-12);
        }
    }
}
