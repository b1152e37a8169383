//! Scene descriptions: which robot to load, the objects on the table, reset
//! randomization ranges and grasp thresholds.
//!
//! ```text
//! scene pick {
//!   robot planar2 { base 0 0 0 1 0 0 0; home 0.3 0.6; }
//!   object cube { shape box 0.02 0.02 0.02; pose 0.5 0 0 1 0 0 0; graspable true; }
//!   randomize cube { x -0.01 0.01; y -0.01 0.01; yaw -0.5 0.5; }
//!   success cube { min 0.4 -0.1 0; max 0.6 0.1 0.1; }
//!   grasp { radius 0.04; close 0.3; open 0.6; descent 1.0; }
//!   calibration { rotation 1 0 0 0; translation 0 0 0; scale 1; }
//! }
//! ```
//!
//! An object pose names the center of its bottom face, so an object resting
//! on the floor has z = 0. Randomization ranges are offsets from the declared
//! pose; `yaw` rotates about the world z axis.

use std::collections::HashMap;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};

use crate::desc::{self, Node, Span};
use crate::hand::Calibration;
use crate::model::{description_hash, missing, pose7, unit_quaternion, unknown, ModelError, SemanticCode};

pub type SceneError = ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct RobotRef {
    pub robot: String,
    pub base: Isometry3<f64>,
    /// Joint vector at reset; the model's mid configuration when absent.
    pub home: Option<Vec<f64>>,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Full extents along x, y, z.
    Box { size: Vector3<f64> },
    Sphere { radius: f64 },
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    /// Height of the top face above the object origin.
    pub fn height(&self) -> f64 {
        match *self {
            Shape::Box { size } => size.z,
            Shape::Sphere { radius } => 2.0 * radius,
            Shape::Cylinder { height, .. } => height,
        }
    }

    /// Horizontal half-extents of the footprint (axis-aligned in the object frame).
    pub fn half_footprint(&self) -> (f64, f64) {
        match *self {
            Shape::Box { size } => (0.5 * size.x, 0.5 * size.y),
            Shape::Sphere { radius } | Shape::Cylinder { radius, .. } => (radius, radius),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub id: String,
    pub shape: Shape,
    pub pose: Isometry3<f64>,
    pub graspable: bool,
}

/// Uniform offsets applied to one object's declared pose at reset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Randomization {
    pub object: usize,
    /// Lower bounds of (dx, dy, dz, dyaw).
    pub lo: [f64; 4],
    /// Upper bounds of (dx, dy, dz, dyaw).
    pub hi: [f64; 4],
}

impl Randomization {
    /// Pose for offsets `d = (dx, dy, dz, dyaw)`.
    pub fn apply(initial: &Isometry3<f64>, d: [f64; 4]) -> Isometry3<f64> {
        let t = initial.translation.vector + Vector3::new(d[0], d[1], d[2]);
        let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), d[3]) * initial.rotation;
        Isometry3::from_parts(Translation3::from(t), r)
    }
}

/// Target region for an object. Reported, never enforced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessRegion {
    pub object: usize,
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl SuccessRegion {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }
}

/// Quasi-static grasp thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspParams {
    /// Attach distance from the fingertip midpoint, meters.
    pub radius: f64,
    /// Attach when the aperture command drops below this.
    pub close: f64,
    /// Release when the aperture command rises above this.
    pub open: f64,
    /// Fall speed of released objects, m/s.
    pub descent: f64,
}

impl Default for GraspParams {
    fn default() -> Self {
        Self {
            radius: 0.04,
            close: 0.3,
            open: 0.6,
            descent: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub id: String,
    pub robots: Vec<RobotRef>,
    pub objects: Vec<ObjectSpec>,
    pub randomization: Vec<Randomization>,
    pub success: Vec<SuccessRegion>,
    pub grasp: GraspParams,
    pub calibration: Calibration,
    /// Hex SHA-256 of the description text.
    pub hash: String,
}

impl SceneSpec {
    pub fn object_index(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    pub fn randomization_for(&self, object: usize) -> Option<&Randomization> {
        self.randomization.iter().find(|r| r.object == object)
    }
}

fn invalid_range(span: Span, message: impl Into<String>) -> ModelError {
    ModelError::semantic(SemanticCode::InvalidRange, span, message)
}

fn positive(node: &Node, values: &[f64]) -> Result<(), ModelError> {
    if values.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(())
    } else {
        Err(ModelError::semantic(
            SemanticCode::InvalidRadius,
            node.span,
            format!("`{}` dimensions must be positive", node.keyword),
        ))
    }
}

/// Parses a scene description document.
pub fn parse_scene(text: &str) -> Result<SceneSpec, SceneError> {
    let nodes = desc::parse(text)?;
    let scene = match nodes.as_slice() {
        [s] if s.keyword == "scene" => s,
        [] => return Err(missing(Span { line: 1, col: 1 }, "scene", "document")),
        [s] => return Err(unknown(s, "document")),
        [_, second, ..] => {
            return Err(ModelError::semantic(
                SemanticCode::DuplicateName,
                second.span,
                "more than one top-level block",
            ))
        }
    };
    let id = scene.name()?.to_string();
    let mut robots = Vec::new();
    let mut objects: Vec<ObjectSpec> = Vec::new();
    let mut object_spans = Vec::new();
    let mut randomize_nodes = Vec::new();
    let mut success_nodes = Vec::new();
    let mut grasp = GraspParams::default();
    let mut calibration = Calibration::default();

    for node in scene.expect_block()? {
        match node.keyword.as_str() {
            "robot" => robots.push(robot_ref(node)?),
            "object" => {
                let obj = object(node)?;
                if objects.iter().any(|o| o.id == obj.id) {
                    return Err(ModelError::semantic(
                        SemanticCode::DuplicateName,
                        node.span,
                        format!("duplicate object `{}`", obj.id),
                    ));
                }
                objects.push(obj);
                object_spans.push(node.span);
            }
            "randomize" => randomize_nodes.push(node),
            "success" => success_nodes.push(node),
            "grasp" => grasp = grasp_block(node)?,
            "calibration" => calibration = calibration_block(node)?,
            _ => return Err(unknown(node, "scene")),
        }
    }
    if robots.is_empty() {
        return Err(missing(scene.span, "robot", "scene"));
    }
    if objects.len() > u16::MAX as usize {
        return Err(invalid_range(scene.span, "too many objects for the state packet"));
    }

    let ids: HashMap<&str, usize> = objects.iter().enumerate().map(|(i, o)| (o.id.as_str(), i)).collect();
    let lookup = |node: &Node| -> Result<usize, ModelError> {
        let name = node.name()?;
        ids.get(name).copied().ok_or_else(|| {
            ModelError::semantic(
                SemanticCode::DanglingReference,
                node.span,
                format!("unknown object `{name}`"),
            )
        })
    };

    let mut randomization: Vec<Randomization> = Vec::new();
    for node in randomize_nodes {
        let object = lookup(node)?;
        if randomization.iter().any(|r| r.object == object) {
            return Err(ModelError::semantic(
                SemanticCode::DuplicateName,
                node.span,
                format!("object `{}` randomized twice", objects[object].id),
            ));
        }
        let (mut lo, mut hi) = ([0.0; 4], [0.0; 4]);
        for field in node.expect_block()? {
            let axis = match field.keyword.as_str() {
                "x" => 0,
                "y" => 1,
                "z" => 2,
                "yaw" => 3,
                _ => return Err(unknown(field, "randomize")),
            };
            let [a, b] = field.numbers::<2>()?;
            if !(a <= b) || !a.is_finite() || !b.is_finite() {
                return Err(invalid_range(field.span, format!("range `{}` requires lo <= hi", field.keyword)));
            }
            lo[axis] = a;
            hi[axis] = b;
        }
        randomization.push(Randomization { object, lo, hi });
    }

    let mut success = Vec::new();
    for node in success_nodes {
        let object = lookup(node)?;
        let (mut min, mut max) = (None, None);
        for field in node.expect_block()? {
            match field.keyword.as_str() {
                "min" => min = Some(Vector3::from(field.numbers::<3>()?)),
                "max" => max = Some(Vector3::from(field.numbers::<3>()?)),
                _ => return Err(unknown(field, "success")),
            }
        }
        let min = min.ok_or_else(|| missing(node.span, "min", "success"))?;
        let max = max.ok_or_else(|| missing(node.span, "max", "success"))?;
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(invalid_range(node.span, "success region requires min <= max"));
        }
        success.push(SuccessRegion { object, min, max });
    }

    Ok(SceneSpec {
        id,
        robots,
        objects,
        randomization,
        success,
        grasp,
        calibration,
        hash: description_hash(text),
    })
}

fn robot_ref(node: &Node) -> Result<RobotRef, ModelError> {
    let mut base = Isometry3::identity();
    let mut home = None;
    for field in node.children() {
        match field.keyword.as_str() {
            "base" => base = pose7(field)?,
            "home" => home = Some(field.number_list()?),
            _ => return Err(unknown(field, "robot")),
        }
    }
    Ok(RobotRef {
        robot: node.name()?.to_string(),
        base,
        home,
        span: node.span,
    })
}

fn object(node: &Node) -> Result<ObjectSpec, ModelError> {
    let id = node.name()?.to_string();
    let (mut shape, mut pose, mut graspable) = (None, None, None);
    for field in node.expect_block()? {
        match field.keyword.as_str() {
            "shape" => {
                let kind = field.args.first().map(|w| w.text.as_str()).unwrap_or("");
                let dims: Vec<f64> = field.args.iter().skip(1).map(|w| w.parse()).collect::<Result<_, _>>()?;
                let s = match (kind, dims.as_slice()) {
                    ("box", &[x, y, z]) => Shape::Box {
                        size: Vector3::new(x, y, z),
                    },
                    ("sphere", &[r]) => Shape::Sphere { radius: r },
                    ("cylinder", &[r, h]) => Shape::Cylinder { radius: r, height: h },
                    _ => {
                        return Err(ModelError::semantic(
                            SemanticCode::UnknownKey,
                            field.span,
                            "shape must be `box x y z`, `sphere r` or `cylinder r h`",
                        ))
                    }
                };
                positive(field, &dims)?;
                shape = Some(s);
            }
            "pose" => pose = Some(pose7(field)?),
            "graspable" => graspable = Some(field.boolean()?),
            _ => return Err(unknown(field, "object")),
        }
    }
    Ok(ObjectSpec {
        id,
        shape: shape.ok_or_else(|| missing(node.span, "shape", "object"))?,
        pose: pose.ok_or_else(|| missing(node.span, "pose", "object"))?,
        graspable: graspable.unwrap_or(false),
    })
}

fn grasp_block(node: &Node) -> Result<GraspParams, ModelError> {
    let mut g = GraspParams::default();
    for field in node.expect_block()? {
        let [v] = field.numbers::<1>()?;
        match field.keyword.as_str() {
            "radius" => g.radius = v,
            "close" => g.close = v,
            "open" => g.open = v,
            "descent" => g.descent = v,
            _ => return Err(unknown(field, "grasp")),
        }
    }
    positive(node, &[g.radius, g.descent])?;
    if !(0.0 <= g.close && g.close <= g.open && g.open <= 1.0) {
        return Err(invalid_range(node.span, "grasp thresholds require 0 <= close <= open <= 1"));
    }
    Ok(g)
}

fn calibration_block(node: &Node) -> Result<Calibration, ModelError> {
    let mut c = Calibration::default();
    for field in node.expect_block()? {
        match field.keyword.as_str() {
            "rotation" => {
                let [w, x, y, z] = field.numbers::<4>()?;
                c.rotation = unit_quaternion(w, x, y, z, field.span)?;
            }
            "translation" => c.translation = Vector3::from(field.numbers::<3>()?),
            "scale" => {
                let [s] = field.numbers::<1>()?;
                positive(field, &[s])?;
                c.scale = s;
            }
            _ => return Err(unknown(field, "calibration")),
        }
    }
    Ok(c)
}
