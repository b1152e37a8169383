//! Reference implementations used to check the library. They share no code
//! with it beyond reading the parsed model fields.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use teleop_core::model::{JointKind, RobotModel};

pub type Mat4 = [[f64; 4]; 4];

pub fn identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Homogeneous matrix from a translation and a (w, x, y, z) quaternion.
pub fn from_quat(t: [f64; 3], q: [f64; 4]) -> Mat4 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y), t[0]],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x), t[1]],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y), t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Rotation by `angle` about unit `axis` (Rodrigues).
pub fn rodrigues(axis: [f64; 3], angle: f64) -> Mat4 {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let k = 1.0 - c;
    [
        [c + x * x * k, x * y * k - z * s, x * z * k + y * s, 0.0],
        [y * x * k + z * s, c + y * y * k, y * z * k - x * s, 0.0],
        [z * x * k - y * s, z * y * k + x * s, c + z * z * k, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub fn translation(t: [f64; 3]) -> Mat4 {
    let mut m = identity();
    m[0][3] = t[0];
    m[1][3] = t[1];
    m[2][3] = t[2];
    m
}

pub fn apply(m: &Mat4, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
    }
    out
}

fn iso_to_mat(iso: &nalgebra::Isometry3<f64>) -> Mat4 {
    let t = iso.translation.vector;
    let q = iso.rotation.quaternion();
    from_quat([t.x, t.y, t.z], [q.w, q.i, q.j, q.k])
}

/// Joint vector index for each joint, assigned in declaration order of the
/// moving joints.
fn dof_of_joint(model: &RobotModel) -> Vec<Option<usize>> {
    let mut next = 0;
    model
        .joints
        .iter()
        .map(|j| match j.kind {
            JointKind::Fixed => None,
            _ => {
                next += 1;
                Some(next - 1)
            }
        })
        .collect()
}

/// World transforms of every link, resolved by repeatedly sweeping the joint
/// list until each child has a known parent.
pub fn link_transforms(model: &RobotModel, q: &[f64]) -> Vec<Mat4> {
    let dofs = dof_of_joint(model);
    let mut known: Vec<Option<Mat4>> = vec![None; model.links.len()];
    known[0] = Some(iso_to_mat(&model.base));
    loop {
        let mut progress = false;
        for (ji, j) in model.joints.iter().enumerate() {
            if known[j.child].is_some() {
                continue;
            }
            let Some(parent) = known[j.parent] else { continue };
            let axis = [j.axis.x, j.axis.y, j.axis.z];
            let motion = match (j.kind, dofs[ji]) {
                (JointKind::Hinge, Some(d)) => rodrigues(axis, q[d]),
                (JointKind::Slide, Some(d)) => translation([axis[0] * q[d], axis[1] * q[d], axis[2] * q[d]]),
                _ => identity(),
            };
            known[j.child] = Some(mul(&mul(&parent, &iso_to_mat(&j.origin)), &motion));
            progress = true;
        }
        if !progress {
            break;
        }
    }
    known.into_iter().map(|m| m.expect("every link reachable")).collect()
}

pub fn site_positions(model: &RobotModel, q: &[f64]) -> Vec<[f64; 3]> {
    let links = link_transforms(model, q);
    model
        .sites
        .iter()
        .map(|s| apply(&links[s.link], [s.offset.x, s.offset.y, s.offset.z]))
        .collect()
}

/// Central-difference Jacobian of one site's position.
pub fn fd_jacobian(model: &RobotModel, q: &[f64], site: usize, h: f64) -> DMatrix<f64> {
    let n = q.len();
    let mut jac = DMatrix::zeros(3, n);
    let mut probe = q.to_vec();
    for i in 0..n {
        probe[i] = q[i] + h;
        let plus = site_positions(model, &probe)[site];
        probe[i] = q[i] - h;
        let minus = site_positions(model, &probe)[site];
        probe[i] = q[i];
        for r in 0..3 {
            jac[(r, i)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    jac
}

fn links_adjacent(model: &RobotModel, a: usize, b: usize) -> bool {
    model
        .joints
        .iter()
        .any(|j| (j.parent, j.child) == (a, b) || (j.parent, j.child) == (b, a))
}

/// Minimum clearance over every sphere pair on distinct, non-adjacent links.
pub fn brute_force_distance(model: &RobotModel, q: &[f64]) -> f64 {
    let links = link_transforms(model, q);
    let centers: Vec<[f64; 3]> = model
        .spheres
        .iter()
        .map(|s| apply(&links[s.link], [s.center.x, s.center.y, s.center.z]))
        .collect();
    let mut best = f64::INFINITY;
    for a in 0..model.spheres.len() {
        for b in 0..model.spheres.len() {
            let (sa, sb) = (&model.spheres[a], &model.spheres[b]);
            if a == b || sa.link == sb.link || links_adjacent(model, sa.link, sb.link) {
                continue;
            }
            let d = ((centers[a][0] - centers[b][0]).powi(2)
                + (centers[a][1] - centers[b][1]).powi(2)
                + (centers[a][2] - centers[b][2]).powi(2))
            .sqrt()
                - sa.radius
                - sb.radius;
            best = best.min(d);
        }
    }
    best
}

/// Box- and row-constrained strictly convex QP
/// `min ½xᵀHx + gᵀx  s.t.  lo ≤ x ≤ hi, Ax ≥ b`.
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub a: DMatrix<f64>,
    pub b: Vec<f64>,
}

impl DenseQp {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..x.len() {
            worst = worst.max(self.lo[i] - x[i]).max(x[i] - self.hi[i]);
        }
        let ax = &self.a * x;
        for (r, b) in self.b.iter().enumerate() {
            worst = worst.max(b - ax[r]);
        }
        worst
    }
}

/// Enumerates every assignment of each variable to {free, lower, upper} and
/// each row to {inactive, active}, solves the equality-constrained problem
/// for each and keeps the best feasible point. Exponential; n ≤ 8.
pub fn exhaustive_qp(p: &DenseQp) -> Option<(DVector<f64>, f64)> {
    let n = p.g.len();
    let k = p.b.len();
    assert!(n <= 8, "exhaustive oracle is limited to 8 variables");
    let mut best: Option<(DVector<f64>, f64)> = None;
    let var_states = 3usize.pow(n as u32);
    for vs in 0..var_states {
        let mut code = vs;
        let mut fixed = vec![None; n];
        for (i, f) in fixed.iter_mut().enumerate() {
            *f = match code % 3 {
                0 => None,
                1 => Some(p.lo[i]),
                _ => Some(p.hi[i]),
            };
            code /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
        for rows in 0..(1usize << k) {
            let active: Vec<usize> = (0..k).filter(|r| rows >> r & 1 == 1).collect();
            if active.len() > free.len() {
                continue;
            }
            let Some(x) = solve_equality(p, &fixed, &free, &active) else { continue };
            if p.violation(&x) > 1e-9 {
                continue;
            }
            let f = p.objective(&x);
            if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
                best = Some((x, f));
            }
        }
    }
    best
}

fn solve_equality(p: &DenseQp, fixed: &[Option<f64>], free: &[usize], active: &[usize]) -> Option<DVector<f64>> {
    let n = fixed.len();
    let nf = free.len();
    let na = active.len();
    let xfix = DVector::from_iterator(n, fixed.iter().map(|v| v.unwrap_or(0.0)));
    let mut kkt = DMatrix::zeros(nf + na, nf + na);
    let mut rhs = DVector::zeros(nf + na);
    let hx = &p.h * &xfix;
    let ax = &p.a * &xfix;
    for (r, &i) in free.iter().enumerate() {
        for (c, &j) in free.iter().enumerate() {
            kkt[(r, c)] = p.h[(i, j)];
        }
        for (c, &row) in active.iter().enumerate() {
            kkt[(r, nf + c)] = -p.a[(row, i)];
            kkt[(nf + c, r)] = p.a[(row, i)];
        }
        rhs[r] = -(p.g[i] + hx[i]);
    }
    for (c, &row) in active.iter().enumerate() {
        rhs[nf + c] = p.b[row] - ax[row];
    }
    let mut x = xfix;
    if nf + na > 0 {
        let lu = kkt.lu();
        if lu.determinant().abs() < 1e-12 {
            return None;
        }
        let sol = lu.solve(&rhs)?;
        for (r, &i) in free.iter().enumerate() {
            x[i] = sol[r];
        }
    }
    Some(x)
}
