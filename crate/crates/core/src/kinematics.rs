//! Forward kinematics, site Jacobians and sphere-based self-distance.

use nalgebra::{DMatrix, Isometry3, Point3, Translation3, UnitQuaternion, Vector3};

use crate::model::{JointKind, RobotModel};

/// Central finite-difference step for the collision gradient.
pub const COLLISION_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KinematicsError {
    #[error("joint vector has {got} entries, model has {expected} dof")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("joint vector contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("unknown site `{0}`")]
    UnknownSite(String),
}

/// World poses of every link and site.
#[derive(Debug, Clone, PartialEq)]
pub struct Poses {
    pub links: Vec<Isometry3<f64>>,
    pub sites: Vec<Isometry3<f64>>,
    /// World-frame axis of each joint (after its origin transform).
    pub joint_axes: Vec<Vector3<f64>>,
    /// World-frame anchor of each joint.
    pub joint_anchors: Vec<Vector3<f64>>,
}

impl Poses {
    pub fn site_position(&self, site: usize) -> Vector3<f64> {
        self.sites[site].translation.vector
    }
}

pub(crate) fn check_dims(model: &RobotModel, q: &[f64]) -> Result<(), KinematicsError> {
    if q.len() != model.dof() {
        return Err(KinematicsError::DimensionMismatch {
            expected: model.dof(),
            got: q.len(),
        });
    }
    if let Some(i) = q.iter().position(|v| !v.is_finite()) {
        return Err(KinematicsError::NonFinite(i));
    }
    Ok(())
}

/// Composes origin and joint motion transforms root-to-leaf.
pub fn forward_kinematics(model: &RobotModel, q: &[f64]) -> Result<Poses, KinematicsError> {
    check_dims(model, q)?;
    Ok(fk(model, q))
}

pub(crate) fn fk(model: &RobotModel, q: &[f64]) -> Poses {
    let mut links = vec![Isometry3::identity(); model.links.len()];
    links[0] = model.base;
    let mut joint_axes = vec![Vector3::zeros(); model.joints.len()];
    let mut joint_anchors = vec![Vector3::zeros(); model.joints.len()];
    for &ji in model.joint_order() {
        let joint = &model.joints[ji];
        let frame = links[joint.parent] * joint.origin;
        joint_axes[ji] = frame.rotation * joint.axis;
        joint_anchors[ji] = frame.translation.vector;
        let motion = match (joint.kind, joint.dof) {
            (JointKind::Hinge, Some(d)) => Isometry3::from_parts(
                Translation3::identity(),
                UnitQuaternion::from_scaled_axis(joint.axis * q[d]),
            ),
            (JointKind::Slide, Some(d)) => {
                Isometry3::from_parts(Translation3::from(joint.axis * q[d]), UnitQuaternion::identity())
            }
            _ => Isometry3::identity(),
        };
        links[joint.child] = frame * motion;
    }
    let sites = model
        .sites
        .iter()
        .map(|s| links[s.link] * Translation3::from(s.offset))
        .collect();
    Poses {
        links,
        sites,
        joint_axes,
        joint_anchors,
    }
}

/// Position Jacobian (3 x dof) of a named site.
pub fn site_jacobian(model: &RobotModel, q: &[f64], site: &str) -> Result<DMatrix<f64>, KinematicsError> {
    let idx = model
        .site_index(site)
        .ok_or_else(|| KinematicsError::UnknownSite(site.to_string()))?;
    check_dims(model, q)?;
    let poses = fk(model, q);
    Ok(site_jacobian_at(model, &poses, idx))
}

/// Position Jacobian of site `idx` given precomputed poses.
pub fn site_jacobian_at(model: &RobotModel, poses: &Poses, idx: usize) -> DMatrix<f64> {
    let site = &model.sites[idx];
    point_jacobian(model, poses, site.link, &poses.site_position(idx))
}

/// Jacobian of a point rigidly attached to `link`.
pub fn point_jacobian(model: &RobotModel, poses: &Poses, link: usize, point: &Vector3<f64>) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(3, model.dof());
    for &d in model.chain(link) {
        let ji = model.dof_joint_index(d);
        let joint = &model.joints[ji];
        let axis = poses.joint_axes[ji];
        let col = match joint.kind {
            JointKind::Hinge => axis.cross(&(point - poses.joint_anchors[ji])),
            JointKind::Slide => axis,
            JointKind::Fixed => continue,
        };
        jac.fixed_view_mut::<3, 1>(0, d).copy_from(&col);
    }
    jac
}

/// Result of the self-distance query.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionReport {
    /// Signed clearance in meters, negative on penetration, `+inf` without eligible pairs.
    pub distance: f64,
    /// d(distance)/dq of the witness pair.
    pub gradient: Vec<f64>,
    pub witness: Option<(usize, usize)>,
}

fn sphere_centers(model: &RobotModel, poses: &Poses) -> Vec<Point3<f64>> {
    model
        .spheres
        .iter()
        .map(|s| poses.links[s.link] * Point3::from(s.center))
        .collect()
}

fn pair_clearance(model: &RobotModel, centers: &[Point3<f64>], (a, b): (usize, usize)) -> f64 {
    (centers[a] - centers[b]).norm() - model.spheres[a].radius - model.spheres[b].radius
}

/// Clearance of every eligible sphere pair.
pub fn pair_distances(model: &RobotModel, q: &[f64]) -> Vec<((usize, usize), f64)> {
    let poses = fk(model, q);
    let centers = sphere_centers(model, &poses);
    model
        .collision_pairs()
        .iter()
        .map(|&p| (p, pair_clearance(model, &centers, p)))
        .collect()
}

/// Central-difference gradient of one pair's clearance.
pub fn pair_gradient(model: &RobotModel, q: &[f64], pair: (usize, usize)) -> Vec<f64> {
    let mut probe = q.to_vec();
    let mut grad = vec![0.0; q.len()];
    let (la, lb) = (model.spheres[pair.0].link, model.spheres[pair.1].link);
    for (i, g) in grad.iter_mut().enumerate() {
        // joints outside both chains cannot move either sphere
        if !model.chain(la).contains(&i) && !model.chain(lb).contains(&i) {
            continue;
        }
        let eval = |probe: &[f64]| {
            let poses = fk(model, probe);
            pair_clearance(model, &sphere_centers(model, &poses), pair)
        };
        probe[i] = q[i] + COLLISION_FD_STEP;
        let plus = eval(&probe);
        probe[i] = q[i] - COLLISION_FD_STEP;
        let minus = eval(&probe);
        probe[i] = q[i];
        *g = (plus - minus) / (2.0 * COLLISION_FD_STEP);
    }
    grad
}

/// Minimum clearance over eligible sphere pairs, with the gradient of the
/// witness pair.
pub fn min_self_distance(model: &RobotModel, q: &[f64]) -> Result<CollisionReport, KinematicsError> {
    check_dims(model, q)?;
    let witness = pair_distances(model, q)
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1));
    Ok(match witness {
        None => CollisionReport {
            distance: f64::INFINITY,
            gradient: vec![0.0; q.len()],
            witness: None,
        },
        Some((pair, distance)) => CollisionReport {
            distance,
            gradient: pair_gradient(model, q, pair),
            witness: Some(pair),
        },
    })
}
