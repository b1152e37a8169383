//! Hand-to-robot retargeting and the constrained differential IK step.
//!
//! Each tick solves
//!
//! ```text
//! min_v  Σ_p ‖J_p(q) v + α e_p‖² + λ‖v‖²
//! s.t.   v_lo(q) ≤ v ≤ v_hi(q)
//!        ∇d_k(q)ᵀ v · dt ≥ d_margin − d_k(q)   for sphere pairs k near contact
//! ```
//!
//! with `e_p = site position − target`, and integrates `q ← q + v·dt`.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::hand::{layout, Calibration, HandFrame, APERTURE_REFERENCE};
use crate::kinematics::{self, KinematicsError};
use crate::model::{GripperKind, RobotModel};
use crate::par::{self, Execution};
use crate::qp::{self, Constraint, QpError, QpProblem, QpSettings, QpStatus};

/// Collision rows are added only for pairs closer than `d_margin` plus this band.
pub const COLLISION_TRIGGER_BAND: f64 = 0.05;
/// At most this many sphere pairs become constraint rows per solve.
pub const MAX_COLLISION_ROWS: usize = 4;
/// Position-limit slack tolerated at API boundaries.
pub const LIMIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkParams {
    /// Tracking gain α, 1/s.
    pub alpha: f64,
    /// Tikhonov weight λ.
    pub damping: f64,
    /// Control step, s.
    pub dt: f64,
    /// Minimum allowed sphere clearance, m.
    pub d_margin: f64,
    /// Fraction β of the remaining joint range that may be covered in one step.
    pub limit_horizon: f64,
    pub qp_max_iter: usize,
    pub qp_tol: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            damping: 1e-6,
            dt: 0.005,
            d_margin: 0.01,
            limit_horizon: 1.0,
            qp_max_iter: 200,
            qp_tol: 1e-8,
        }
    }
}

impl IkParams {
    pub fn validate(&self) -> Result<(), IkError> {
        let positive = [self.alpha, self.damping, self.dt, self.limit_horizon, self.qp_tol];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.qp_max_iter == 0 {
            return Err(IkError::InvalidParams("alpha, damping, dt, limit_horizon, qp_tol and qp_max_iter must be positive"));
        }
        if !(self.d_margin.is_finite() && self.d_margin >= 0.0) {
            return Err(IkError::InvalidParams("d_margin must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IkError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("robot `{0}` has no gripper to retarget onto")]
    NoGripper(String),
    #[error("calibration scale must be positive")]
    InvalidCalibration,
    #[error("invalid IK parameters: {0}")]
    InvalidParams(&'static str),
    #[error("joint {index} = {value} outside [{lower}, {upper}]")]
    OutOfLimits {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("target for site {0} is not finite")]
    NonFiniteTarget(usize),
    #[error("target references site index {0} not in the model")]
    UnknownSite(usize),
    #[error("aperture command {0} outside [0, 1]")]
    InvalidAperture(f64),
    #[error("prescribed velocity for dof {0} not in the model")]
    FixedDof(usize),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub site: usize,
    pub position: Vector3<f64>,
}

/// The tracked site set with target positions and the gripper opening command.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub entries: Vec<Target>,
    /// Normalized opening, 0 = closed.
    pub aperture_command: f64,
    /// Gripper the entries belong to, if produced by retargeting.
    pub gripper: Option<usize>,
}

impl TargetSet {
    /// Targets pinned to the current site positions (zero tracking error).
    pub fn hold(model: &RobotModel, q: &[f64], sites: &[usize]) -> Result<Self, IkError> {
        let poses = kinematics::forward_kinematics(model, q)?;
        Ok(Self {
            entries: sites
                .iter()
                .map(|&s| Target {
                    site: s,
                    position: poses.site_position(s),
                })
                .collect(),
            aperture_command: 1.0,
            gripper: None,
        })
    }

    fn validate(&self, model: &RobotModel) -> Result<(), IkError> {
        for t in &self.entries {
            if t.site >= model.sites.len() {
                return Err(IkError::UnknownSite(t.site));
            }
            if !t.position.iter().all(|v| v.is_finite()) {
                return Err(IkError::NonFiniteTarget(t.site));
            }
        }
        if !(0.0..=1.0).contains(&self.aperture_command) {
            return Err(IkError::InvalidAperture(self.aperture_command));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    IterationCapped,
    InfeasibleRelaxed,
}

impl SolveStatus {
    pub fn code(self) -> u8 {
        match self {
            SolveStatus::Converged => 0,
            SolveStatus::IterationCapped => 1,
            SolveStatus::InfeasibleRelaxed => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SolveStatus::Converged),
            1 => Some(SolveStatus::IterationCapped),
            2 => Some(SolveStatus::InfeasibleRelaxed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveConstraint {
    LowerBound(usize),
    UpperBound(usize),
    /// Sphere pair kept at the clearance margin.
    Collision(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityCommand {
    pub v: Vec<f64>,
    pub status: SolveStatus,
    pub active_constraints: Vec<ActiveConstraint>,
}

impl VelocityCommand {
    pub fn zero(dof: usize) -> Self {
        Self {
            v: vec![0.0; dof],
            status: SolveStatus::Converged,
            active_constraints: Vec::new(),
        }
    }
}

/// Retargets a hand frame onto the first gripper of `model`.
pub fn map_hand_to_targets(hand: &HandFrame, model: &RobotModel, calibration: &Calibration) -> Result<TargetSet, IkError> {
    map_hand_to_gripper(hand, model, 0, calibration)
}

/// Maps the tracked hand keypoints through `calibration` onto the tracking
/// sites of gripper `gripper`. Keypoint orientations are ignored.
pub fn map_hand_to_gripper(
    hand: &HandFrame,
    model: &RobotModel,
    gripper: usize,
    calibration: &Calibration,
) -> Result<TargetSet, IkError> {
    let g = model
        .grippers
        .get(gripper)
        .ok_or_else(|| IkError::NoGripper(model.name.clone()))?;
    if !(calibration.scale > 0.0) {
        return Err(IkError::InvalidCalibration);
    }
    let keypoints: &[usize] = match g.kind {
        GripperKind::ParallelJaw => &layout::PARALLEL_JAW,
        GripperKind::Dexterous => &layout::DEXTEROUS,
    };
    let entries = g
        .sites
        .iter()
        .zip(keypoints)
        .map(|(&site, &kp)| Target {
            site,
            position: calibration.apply(&hand.position(kp)),
        })
        .collect();
    let span = (hand.position(layout::THUMB_TIP) - hand.position(layout::INDEX_TIP)).norm();
    Ok(TargetSet {
        entries,
        aperture_command: (span / APERTURE_REFERENCE).clamp(0.0, 1.0),
        gripper: Some(gripper),
    })
}

fn check_limits(model: &RobotModel, q: &[f64]) -> Result<(), IkError> {
    kinematics::check_dims(model, q)?;
    for (i, &value) in q.iter().enumerate() {
        let j = model.dof_joint(i);
        if value < j.lower - LIMIT_TOLERANCE || value > j.upper + LIMIT_TOLERANCE {
            return Err(IkError::OutOfLimits {
                index: i,
                value,
                lower: j.lower,
                upper: j.upper,
            });
        }
    }
    Ok(())
}

/// Configuration-dependent velocity box: the joint speed limit, tightened so
/// one step of length `dt` covers at most `β` of the remaining range.
pub fn velocity_bounds(model: &RobotModel, q: &[f64], params: &IkParams) -> (Vec<f64>, Vec<f64>) {
    let beta = params.limit_horizon;
    let mut lo = Vec::with_capacity(q.len());
    let mut hi = Vec::with_capacity(q.len());
    for (i, &qi) in q.iter().enumerate() {
        let j = model.dof_joint(i);
        // clamp guards against roundoff pushing a boundary bound past zero
        hi.push(j.vlimit.min(beta * (j.upper - qi) / params.dt).max(0.0));
        lo.push((-j.vlimit).max(beta * (j.lower - qi) / params.dt).min(0.0));
    }
    (lo, hi)
}

/// Sum of squared site-to-target distances.
pub fn tracking_cost(model: &RobotModel, q: &[f64], targets: &TargetSet) -> Result<f64, IkError> {
    let poses = kinematics::forward_kinematics(model, q)?;
    Ok(targets
        .entries
        .iter()
        .map(|t| (poses.site_position(t.site) - t.position).norm_squared())
        .sum())
}

/// One constrained differential IK solve.
pub fn solve_velocity(
    model: &RobotModel,
    q: &[f64],
    targets: &TargetSet,
    params: &IkParams,
) -> Result<VelocityCommand, IkError> {
    solve_velocity_fixed(model, q, targets, params, &[])
}

/// Like [`solve_velocity`], with the velocities of some dofs prescribed
/// (`(dof, v)` pairs). Prescribed dofs are substituted out of the QP so the
/// collision rows see their motion; their values are clamped into the box.
pub fn solve_velocity_fixed(
    model: &RobotModel,
    q: &[f64],
    targets: &TargetSet,
    params: &IkParams,
    fixed: &[(usize, f64)],
) -> Result<VelocityCommand, IkError> {
    params.validate()?;
    check_limits(model, q)?;
    targets.validate(model)?;
    let n = model.dof();
    let poses = kinematics::fk(model, q);

    let mut h = DMatrix::<f64>::identity(n, n) * params.damping;
    let mut g = DVector::<f64>::zeros(n);
    for t in &targets.entries {
        let jac = kinematics::site_jacobian_at(model, &poses, t.site);
        let err = poses.site_position(t.site) - t.position;
        h += jac.transpose() * &jac;
        g += jac.transpose() * err * params.alpha;
    }
    // exact symmetry for the Cholesky check
    h = (&h + h.transpose()) * 0.5;

    let (lo, hi) = velocity_bounds(model, q, params);

    let mut near: Vec<((usize, usize), f64)> = kinematics::pair_distances(model, q)
        .into_iter()
        .filter(|&(_, d)| d < params.d_margin + COLLISION_TRIGGER_BAND)
        .collect();
    near.sort_by(|a, b| a.1.total_cmp(&b.1));
    near.truncate(MAX_COLLISION_ROWS);
    let mut a = DMatrix::zeros(near.len(), n);
    let mut b = Vec::with_capacity(near.len());
    for (r, &(pair, d)) in near.iter().enumerate() {
        let grad = kinematics::pair_gradient(model, q, pair);
        for (c, gc) in grad.iter().enumerate() {
            a[(r, c)] = gc * params.dt;
        }
        b.push(params.d_margin - d);
    }

    let mut pinned = vec![None; n];
    for &(i, vi) in fixed {
        if i >= n {
            return Err(IkError::FixedDof(i));
        }
        pinned[i] = Some(vi.clamp(lo[i], hi[i]));
    }
    let free: Vec<usize> = (0..n).filter(|&i| pinned[i].is_none()).collect();
    let vp = DVector::from_iterator(n, pinned.iter().map(|p| p.unwrap_or(0.0)));
    let (h, g, lo, hi, a, b) = if free.len() == n {
        (h, g, lo, hi, a, b)
    } else {
        let g_full = &g + &h * &vp;
        let b_full = DVector::from_column_slice(&b) - &a * &vp;
        (
            h.select_rows(&free).select_columns(&free),
            g_full.select_rows(&free),
            free.iter().map(|&i| lo[i]).collect(),
            free.iter().map(|&i| hi[i]).collect(),
            a.select_columns(&free),
            b_full.as_slice().to_vec(),
        )
    };
    let nf = free.len();

    let problem = QpProblem {
        h: &h,
        g: &g,
        lo: &lo,
        hi: &hi,
        a: &a,
        b: &b,
    };
    let settings = QpSettings {
        max_iter: params.qp_max_iter,
        tol: params.qp_tol,
    };
    let sol = qp::solve(&problem, &settings)?;

    let (v, status) = match sol.status {
        QpStatus::Converged => (sol.x, SolveStatus::Converged),
        QpStatus::IterationCapped => (sol.x, SolveStatus::IterationCapped),
        QpStatus::Infeasible => {
            // collision rows in the least-squares sense, projected onto the box
            let pinv = a.clone().pseudo_inverse(1e-12).map_err(|_| IkError::Qp(QpError::NonFinite))?;
            let mut v = pinv * DVector::from_column_slice(&b);
            for i in 0..nf {
                v[i] = v[i].clamp(lo[i], hi[i]);
            }
            (v, SolveStatus::InfeasibleRelaxed)
        }
    };
    let active_constraints = match status {
        SolveStatus::InfeasibleRelaxed => near.iter().map(|&((x, y), _)| ActiveConstraint::Collision(x, y)).collect(),
        _ => sol
            .active
            .iter()
            .map(|&(c, _)| match c {
                Constraint::Lower(i) => ActiveConstraint::LowerBound(free[i]),
                Constraint::Upper(i) => ActiveConstraint::UpperBound(free[i]),
                Constraint::Row(r) => ActiveConstraint::Collision(near[r].0 .0, near[r].0 .1),
            })
            .collect(),
    };
    let mut full = vp;
    for (k, &i) in free.iter().enumerate() {
        full[i] = v[k];
    }
    Ok(VelocityCommand {
        v: full.as_slice().to_vec(),
        status,
        active_constraints,
    })
}

/// `clamp(q + v·dt, q_lo, q_hi)`.
pub fn integrate(model: &RobotModel, q: &[f64], v: &[f64], dt: f64) -> Vec<f64> {
    let mut next: Vec<f64> = q.iter().zip(v).map(|(qi, vi)| qi + vi * dt).collect();
    model.clamp(&mut next);
    next
}

/// Solves a batch of independent problems on one model.
pub fn solve_batch(
    mode: Execution,
    model: &RobotModel,
    jobs: &[(Vec<f64>, TargetSet)],
    params: &IkParams,
) -> Vec<Result<VelocityCommand, IkError>> {
    par::map(mode, jobs, |(q, targets)| solve_velocity(model, q, targets, params))
}
