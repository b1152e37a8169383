//! Dense strictly convex QP with box and linear inequality constraints.
//!
//! ```text
//! minimize   ½ xᵀHx + gᵀx
//! subject to lo ≤ x ≤ hi,  Ax ≥ b
//! ```
//!
//! Solved with the Goldfarb–Idnani dual active-set method: start at the
//! unconstrained minimizer and repeatedly add the most violated constraint,
//! dropping active constraints whose multipliers would turn negative. Every
//! iterate is dual feasible, so no feasible starting point is needed and an
//! empty primal feasible set is detected directly. Problem sizes here are a
//! few dozen variables at most, so projections are recomputed densely each
//! step instead of being updated by factorization downdates.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("Hessian is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value in problem data")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("lower bound {lo} exceeds upper bound {hi} at index {index}")]
    InvalidBounds { index: usize, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    Lower(usize),
    Upper(usize),
    Row(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Converged,
    IterationCapped,
    /// The box and the general rows have no common point.
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    /// Active constraints with their multipliers.
    pub active: Vec<(Constraint, f64)>,
    pub iterations: usize,
    /// Max of stationarity, primal, dual and complementarity residuals.
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct QpProblem<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub lo: &'a [f64],
    pub hi: &'a [f64],
    pub a: &'a DMatrix<f64>,
    pub b: &'a [f64],
}

impl QpProblem<'_> {
    fn n(&self) -> usize {
        self.g.len()
    }

    fn normal(&self, c: Constraint) -> DVector<f64> {
        match c {
            Constraint::Lower(i) => {
                let mut v = DVector::zeros(self.n());
                v[i] = 1.0;
                v
            }
            Constraint::Upper(i) => {
                let mut v = DVector::zeros(self.n());
                v[i] = -1.0;
                v
            }
            Constraint::Row(r) => self.a.row(r).transpose(),
        }
    }

    fn rhs(&self, c: Constraint) -> f64 {
        match c {
            Constraint::Lower(i) => self.lo[i],
            Constraint::Upper(i) => -self.hi[i],
            Constraint::Row(r) => self.b[r],
        }
    }

    /// Slack `nᵀx − rhs`, negative when violated.
    fn slack(&self, c: Constraint, x: &DVector<f64>) -> f64 {
        match c {
            Constraint::Lower(i) => x[i] - self.lo[i],
            Constraint::Upper(i) => self.hi[i] - x[i],
            Constraint::Row(r) => self.a.row(r).dot(&x.transpose()) - self.b[r],
        }
    }

    fn constraints(&self) -> impl Iterator<Item = Constraint> + '_ {
        let n = self.n();
        (0..n)
            .filter(|&i| self.lo[i].is_finite())
            .map(Constraint::Lower)
            .chain((0..n).filter(|&i| self.hi[i].is_finite()).map(Constraint::Upper))
            .chain((0..self.b.len()).map(Constraint::Row))
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::Dimension("H must be n x n"));
        }
        if self.lo.len() != n || self.hi.len() != n {
            return Err(QpError::Dimension("bounds must have length n"));
        }
        if self.a.nrows() != self.b.len() || (self.a.nrows() > 0 && self.a.ncols() != n) {
            return Err(QpError::Dimension("A must be k x n with k = len(b)"));
        }
        let finite = self.h.iter().all(|v| v.is_finite())
            && self.g.iter().all(|v| v.is_finite())
            && self.a.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite());
        let no_nan = self.lo.iter().chain(self.hi).all(|v| !v.is_nan());
        if !finite || !no_nan {
            return Err(QpError::NonFinite);
        }
        for i in 0..n {
            if self.lo[i] > self.hi[i] {
                return Err(QpError::InvalidBounds {
                    index: i,
                    lo: self.lo[i],
                    hi: self.hi[i],
                });
            }
        }
        let scale = self.h.amax().max(1.0);
        if (self.h - self.h.transpose()).amax() > 1e-9 * scale {
            return Err(QpError::NotPositiveDefinite);
        }
        Ok(())
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(self.h * x)) + self.g.dot(x)
    }

    /// Largest constraint violation at `x`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        self.constraints()
            .map(|c| (-self.slack(c, x)).max(0.0))
            .fold(0.0, f64::max)
    }

    fn kkt_residual(&self, x: &DVector<f64>, active: &[(Constraint, f64)]) -> f64 {
        let mut grad = self.h * x + self.g;
        for &(c, lambda) in active {
            grad -= self.normal(c) * lambda;
        }
        let mut res = grad.amax().max(self.violation(x));
        for &(c, lambda) in active {
            res = res.max((-lambda).max(0.0)).max((lambda * self.slack(c, x)).abs());
        }
        res
    }
}

/// Solves the QP. The returned point always lies inside the box.
pub fn solve(p: &QpProblem<'_>, settings: &QpSettings) -> Result<QpSolution, QpError> {
    p.validate()?;
    let n = p.n();
    let h_inv = p
        .h
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite)?
        .inverse();

    let mut x = -(&h_inv * p.g);
    let mut active: Vec<(Constraint, f64)> = Vec::new();
    let mut iterations = 0;
    let mut status = QpStatus::Converged;
    let eps = 1e-12;

    'outer: loop {
        // most violated inactive constraint
        let candidate = p
            .constraints()
            .filter(|c| !active.iter().any(|(a, _)| a == c))
            .map(|c| (c, p.slack(c, &x)))
            .filter(|&(c, s)| s < -feasibility_tol(p, c, &x))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((added, _)) = candidate else {
            break;
        };
        let n_add = p.normal(added);
        let b_add = p.rhs(added);
        let mut lambda_add = 0.0;

        loop {
            iterations += 1;
            if iterations > settings.max_iter {
                status = QpStatus::IterationCapped;
                break 'outer;
            }
            let (z, r) = step_directions(p, &h_inv, &active, &n_add);

            // largest dual step keeping active multipliers nonnegative
            let mut t_dual = f64::INFINITY;
            let mut drop = None;
            for (j, (&rj, &(_, lj))) in r.iter().zip(&active).enumerate() {
                if rj > eps {
                    let t = lj / rj;
                    if t < t_dual {
                        t_dual = t;
                        drop = Some(j);
                    }
                }
            }
            let zn = z.dot(&n_add);
            let t_primal = if z.amax() > eps && zn > eps {
                (b_add - n_add.dot(&x)) / zn
            } else {
                f64::INFINITY
            };
            let t = t_dual.min(t_primal);
            if !t.is_finite() {
                status = QpStatus::Infeasible;
                break 'outer;
            }
            if t_primal.is_finite() {
                x += &z * t;
            }
            for (j, entry) in active.iter_mut().enumerate() {
                entry.1 -= t * r[j];
            }
            lambda_add += t;
            if t_primal <= t_dual {
                active.push((added, lambda_add));
                break;
            }
            let j = drop.expect("finite dual step has a blocking constraint");
            active.remove(j);
        }
    }

    // enforce the box exactly; only roundoff-level changes for solved problems
    for i in 0..n {
        x[i] = x[i].clamp(p.lo[i], p.hi[i]);
    }
    let kkt_residual = p.kkt_residual(&x, &active);
    if status == QpStatus::Converged {
        let scale = 1.0_f64.max(p.g.amax()).max(p.h.amax());
        if kkt_residual > settings.tol * scale {
            status = QpStatus::IterationCapped;
        }
    }
    Ok(QpSolution {
        x,
        status,
        active,
        iterations,
        kkt_residual,
    })
}

fn feasibility_tol(p: &QpProblem<'_>, c: Constraint, x: &DVector<f64>) -> f64 {
    let scale = match c {
        Constraint::Row(r) => p.b[r].abs() + p.a.row(r).abs().sum() * x.amax(),
        _ => p.rhs(c).abs(),
    };
    1e-12 * (1.0 + scale)
}

/// Primal step `z = H⁻¹(I − N N*) n` and dual step `r = N* n` for the
/// current active set, where `N* = (Nᵀ H⁻¹ N)⁻¹ Nᵀ H⁻¹`.
fn step_directions(
    p: &QpProblem<'_>,
    h_inv: &DMatrix<f64>,
    active: &[(Constraint, f64)],
    n_add: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let h_inv_n = h_inv * n_add;
    if active.is_empty() {
        return (h_inv_n, DVector::zeros(0));
    }
    let n = p.n();
    let mut normals = DMatrix::zeros(n, active.len());
    for (j, &(c, _)) in active.iter().enumerate() {
        normals.set_column(j, &p.normal(c));
    }
    let h_inv_nn = h_inv * &normals;
    let gram = normals.transpose() * &h_inv_nn;
    let r = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&(normals.transpose() * &h_inv_n)),
        None => gram
            .lu()
            .solve(&(normals.transpose() * &h_inv_n))
            .unwrap_or_else(|| DVector::zeros(active.len())),
    };
    let z = h_inv_n - h_inv_nn * &r;
    (z, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve_box(h: DMatrix<f64>, g: DVector<f64>, lo: &[f64], hi: &[f64]) -> QpSolution {
        let a = DMatrix::zeros(0, g.len());
        let p = QpProblem {
            h: &h,
            g: &g,
            lo,
            hi,
            a: &a,
            b: &[],
        };
        solve(&p, &QpSettings::default()).unwrap()
    }

    #[test]
    fn unconstrained_quadratic() {
        let s = solve_box(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-1.0, -1.0]),
            &[-10.0, -10.0],
            &[10.0, 10.0],
        );
        assert_eq!(s.status, QpStatus::Converged);
        assert_eq!(s.x.as_slice(), &[1.0, 1.0]);
        assert!(s.active.is_empty());
    }

    #[test]
    fn separable_box_clamp() {
        let s = solve_box(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-1.0, -1.0]),
            &[0.0, 0.0],
            &[0.5, 0.5],
        );
        assert_eq!(s.status, QpStatus::Converged);
        assert!((s.x[0] - 0.5).abs() < 1e-15 && (s.x[1] - 0.5).abs() < 1e-15);
        assert_eq!(s.active.len(), 2);
        for (c, l) in &s.active {
            assert!(matches!(c, Constraint::Upper(_)));
            assert!((l - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn general_row_active() {
        // min ½|x|² s.t. x0 + x1 ≥ 1  ->  (0.5, 0.5)
        let h = DMatrix::identity(2, 2);
        let g = DVector::zeros(2);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let p = QpProblem {
            h: &h,
            g: &g,
            lo: &[-5.0, -5.0],
            hi: &[5.0, 5.0],
            a: &a,
            b: &[1.0],
        };
        let s = solve(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Converged);
        assert!((s.x[0] - 0.5).abs() < 1e-12 && (s.x[1] - 0.5).abs() < 1e-12);
        assert!(s.kkt_residual < 1e-12);
    }

    #[test]
    fn infeasible_row_against_box() {
        let h = DMatrix::identity(1, 1);
        let g = DVector::zeros(1);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let p = QpProblem {
            h: &h,
            g: &g,
            lo: &[-1.0],
            hi: &[1.0],
            a: &a,
            b: &[2.0],
        };
        let s = solve(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        assert!(s.x[0] >= -1.0 && s.x[0] <= 1.0);
    }

    #[test]
    fn degenerate_box_is_fixed() {
        let s = solve_box(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![3.0, -3.0]),
            &[0.0, 0.2],
            &[0.0, 0.2],
        );
        assert_eq!(s.x.as_slice(), &[0.0, 0.2]);
    }

    #[test]
    fn rejects_indefinite() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let g = DVector::zeros(2);
        let a = DMatrix::zeros(0, 2);
        let p = QpProblem {
            h: &h,
            g: &g,
            lo: &[-1.0, -1.0],
            hi: &[1.0, 1.0],
            a: &a,
            b: &[],
        };
        assert_eq!(solve(&p, &QpSettings::default()).unwrap_err(), QpError::NotPositiveDefinite);
    }

    #[test]
    fn rejects_nan() {
        let h = DMatrix::identity(1, 1);
        let g = DVector::from_vec(vec![f64::NAN]);
        let a = DMatrix::zeros(0, 1);
        let p = QpProblem {
            h: &h,
            g: &g,
            lo: &[-1.0],
            hi: &[1.0],
            a: &a,
            b: &[],
        };
        assert_eq!(solve(&p, &QpSettings::default()).unwrap_err(), QpError::NonFinite);
    }
}
