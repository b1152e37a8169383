//! Synthetic operator scripts.
//!
//! ```text
//! script pick {
//!   scene sort_bolts;
//!   seed 7;
//!   start 0.41 -0.30 0.18 0 0 1 0;    # wrist pose x y z qw qx qy qz
//!   aperture 1;                       # initial normalized opening
//!   move_hand 0.42 -0.30 0.13 0 0 1 0 1.5;
//!   set_grip 0 0.3;
//!   wait 0.2;
//!   press_reset 42;
//!   switch mug_basket;
//! }
//! ```
//!
//! Hand motion interpolates linearly in position and by slerp in
//! orientation. `press_reset` and `switch` take no time.

use nalgebra::{Isometry3, Translation3, UnitQuaternion};

use crate::desc::{self, Node, Span};
use crate::episode::EpisodeLog;
use crate::hand::{HandFrame, HandRig};
use crate::model::{missing, pose7, unknown, ModelError, SemanticCode};
use crate::protocol::{ControlOp, ControlPayload, TrackingPayload};
use crate::registry::Registry;
use crate::session::{Session, StepReport, TrackingInput};

/// Tracking emission rate of a synthetic operator.
pub const OPERATOR_RATE_HZ: f64 = 90.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    MoveHand { pose: Isometry3<f64>, duration: f64 },
    SetGrip { aperture: f64, duration: f64 },
    PressReset { seed: u64 },
    Switch { scene: String },
    Wait { duration: f64 },
}

impl Directive {
    pub fn duration(&self) -> f64 {
        match self {
            Directive::MoveHand { duration, .. } | Directive::SetGrip { duration, .. } | Directive::Wait { duration } => {
                *duration
            }
            Directive::PressReset { .. } | Directive::Switch { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub name: String,
    /// Scene requested at connect.
    pub scene: Option<String>,
    /// Seed for the initial placement.
    pub seed: u64,
    pub start: Isometry3<f64>,
    pub aperture: f64,
    pub directives: Vec<(Directive, Span)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Tracking(HandFrame),
    Control(ControlPayload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedEvent {
    /// Seconds from script start.
    pub at: f64,
    pub event: Event,
}

fn invalid(span: Span, message: impl Into<String>) -> ModelError {
    ModelError::semantic(SemanticCode::InvalidRange, span, message)
}

fn duration(node: &Node, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(invalid(node.span, format!("`{}` duration must be positive", node.keyword)))
    }
}

fn aperture(node: &Node, value: f64) -> Result<f64, ModelError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(invalid(node.span, "aperture must lie in [0, 1]"))
    }
}

pub fn parse_script(text: &str) -> Result<Script, ModelError> {
    let nodes = desc::parse(text)?;
    let root = match nodes.as_slice() {
        [s] if s.keyword == "script" => s,
        [] => return Err(missing(Span { line: 1, col: 1 }, "script", "document")),
        [s, ..] => return Err(unknown(s, "document")),
    };
    let mut script = Script {
        name: root.name()?.to_string(),
        scene: None,
        seed: 0,
        start: Isometry3::identity(),
        aperture: 1.0,
        directives: Vec::new(),
    };
    for node in root.expect_block()? {
        let d = match node.keyword.as_str() {
            "scene" => {
                script.scene = Some(node.word()?.to_string());
                continue;
            }
            "seed" => {
                script.seed = node.expect_arity(1)?[0].parse()?;
                continue;
            }
            "start" => {
                script.start = pose7(node)?;
                continue;
            }
            "aperture" => {
                let [a] = node.numbers::<1>()?;
                script.aperture = aperture(node, a)?;
                continue;
            }
            "move_hand" => {
                let v = node.numbers::<8>()?;
                let pose_node = Node {
                    args: node.args[..7].to_vec(),
                    ..node.clone()
                };
                Directive::MoveHand {
                    pose: pose7(&pose_node)?,
                    duration: duration(node, v[7])?,
                }
            }
            "set_grip" => {
                let [a, t] = node.numbers::<2>()?;
                Directive::SetGrip {
                    aperture: aperture(node, a)?,
                    duration: duration(node, t)?,
                }
            }
            "wait" => {
                let [t] = node.numbers::<1>()?;
                Directive::Wait {
                    duration: duration(node, t)?,
                }
            }
            "press_reset" => Directive::PressReset {
                seed: node.expect_arity(1)?[0].parse()?,
            },
            "switch" => Directive::Switch {
                scene: node.word()?.to_string(),
            },
            _ => return Err(unknown(node, "script")),
        };
        script.directives.push((d, node.span));
    }
    Ok(script)
}

impl Script {
    /// Checks that every referenced scene is registered.
    pub fn validate(&self, registry: &Registry) -> Result<(), ModelError> {
        if let Some(s) = &self.scene {
            if registry.scene(s).is_err() {
                return Err(ModelError::semantic(
                    SemanticCode::DanglingReference,
                    Span { line: 1, col: 1 },
                    format!("unknown scene `{s}`"),
                ));
            }
        }
        for (d, span) in &self.directives {
            if let Directive::Switch { scene } = d {
                if registry.scene(scene).is_err() {
                    return Err(ModelError::semantic(
                        SemanticCode::DanglingReference,
                        *span,
                        format!("unknown scene `{scene}`"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.directives.iter().map(|(d, _)| d.duration()).sum()
    }

    /// Wrist pose and aperture at time `t`, plus the index of the directive
    /// in progress.
    fn hand_at(&self, t: f64) -> (Isometry3<f64>, f64) {
        let (mut pose, mut ap) = (self.start, self.aperture);
        let mut t0 = 0.0;
        for (d, _) in &self.directives {
            let dur = d.duration();
            let s = if dur > 0.0 { ((t - t0) / dur).clamp(0.0, 1.0) } else { 1.0 };
            if t < t0 {
                break;
            }
            match d {
                Directive::MoveHand { pose: to, .. } => pose = interpolate(&pose, to, s),
                Directive::SetGrip { aperture: to, .. } => ap += (to - ap) * s,
                _ => {}
            }
            t0 += dur;
        }
        (pose, ap)
    }

    /// The emitted event stream: tracking frames at `rate_hz` across the
    /// script's duration, with controls at their directive boundaries (ahead
    /// of a tracking sample at the same instant).
    pub fn timeline(&self, rate_hz: f64) -> Vec<TimedEvent> {
        if self.directives.is_empty() {
            return Vec::new();
        }
        let mut controls = Vec::new();
        let mut t0 = 0.0;
        for (d, _) in &self.directives {
            match d {
                Directive::PressReset { seed } => controls.push((t0, ControlPayload::new(ControlOp::Reset, "", *seed))),
                Directive::Switch { scene } => {
                    controls.push((t0, ControlPayload::new(ControlOp::SwitchTask, scene.clone(), 0)))
                }
                _ => {}
            }
            t0 += d.duration();
        }
        let total = t0;
        let samples = (total * rate_hz).floor() as usize;
        let mut times: Vec<f64> = (0..=samples).map(|k| k as f64 / rate_hz).collect();
        if times.last().is_some_and(|&t| t < total) {
            times.push(total);
        }
        let mut out = Vec::with_capacity(times.len() + controls.len());
        let mut c = controls.into_iter().peekable();
        for t in times {
            while let Some((at, _)) = c.peek() {
                if *at > t {
                    break;
                }
                let (at, payload) = c.next().unwrap();
                out.push(TimedEvent {
                    at,
                    event: Event::Control(payload),
                });
            }
            let (pose, ap) = self.hand_at(t);
            out.push(TimedEvent {
                at: t,
                event: Event::Tracking(HandRig.frame(&pose, 1.0 - ap, (t * 1e6).round() as u64)),
            });
        }
        out.extend(c.map(|(at, payload)| TimedEvent {
            at,
            event: Event::Control(payload),
        }));
        out
    }
}

fn interpolate(a: &Isometry3<f64>, b: &Isometry3<f64>, s: f64) -> Isometry3<f64> {
    let t = a.translation.vector.lerp(&b.translation.vector, s);
    let r = a.rotation.try_slerp(&b.rotation, s, 1e-9).unwrap_or(b.rotation);
    Isometry3::from_parts(Translation3::from(t), UnitQuaternion::new_normalize(*r.quaternion()))
}

/// Runs a timeline against a session in simulated time, delivering every
/// event due at or before each tick and stepping once per tick.
///
/// Steps continue for `settle` seconds past the last event. The open
/// episode is closed at the end. Returns every finalized episode in order.
pub fn run_lockstep(
    session: &mut Session,
    registry: &Registry,
    events: &[TimedEvent],
    settle: f64,
    mut on_tick: impl FnMut(&Session, &StepReport),
) -> Vec<EpisodeLog> {
    let dt = session.params().dt();
    let end = events.last().map_or(0.0, |e| e.at) + settle;
    let ticks = (end / dt).ceil() as u64;
    let mailbox = session.mailbox();
    let mut done = Vec::new();
    let mut next = 0;
    let mut seq = 0u32;
    for k in 0..ticks {
        let now = k as f64 * dt;
        while next < events.len() && events[next].at <= now + 1e-12 {
            match &events[next].event {
                Event::Tracking(frame) => {
                    seq += 1;
                    mailbox.post(TrackingInput {
                        seq,
                        sent_us: frame.timestamp_us,
                        received_us: frame.timestamp_us,
                        payload: TrackingPayload::from_frame(frame),
                    });
                }
                Event::Control(c) => match c.op {
                    ControlOp::Reset => done.extend(session.reset(c.seed)),
                    ControlOp::SwitchTask => {
                        if let Ok(scene) = registry.scene(&c.arg) {
                            done.extend(session.switch_task(scene.clone(), c.seed));
                        }
                    }
                    ControlOp::StartEpisode => {
                        session.start_episode();
                    }
                    ControlOp::EndEpisode => done.extend(session.end_episode()),
                },
            }
            next += 1;
        }
        let report = session.step();
        on_tick(session, &report);
    }
    done.extend(session.end_episode());
    done
}
