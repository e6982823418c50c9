//! Dense convex QP solver for small MPC problems.
//!
//! ```text
//!     minimize     1/2 x' H x + f' x
//!     subject to   A x <= b,   lb <= x <= ub
//! ```
//!
//! All constraints are stacked into a single `G x <= g` system and the dual is
//! solved by Hildreth's coordinate ascent. The active set read off the dual
//! multipliers is then polished by solving the equality-constrained problem on
//! that set, adding or dropping constraints until the KKT conditions hold to
//! tolerance. If the polish cannot certify optimality the iterate is pushed
//! back into the feasible region by cyclic halfspace projections, so the
//! returned point is always feasible.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::QpError;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
}

impl QpProblem {
    /// Problem with no constraints at all.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
        }
    }

    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.lb = lb;
        self.ub = ub;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    /// Largest constraint violation at `x` (zero when feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim() {
            worst = worst.max(self.lb[i] - x[i]).max(x[i] - self.ub[i]);
        }
        if self.a_ineq.nrows() > 0 {
            let r = &self.a_ineq * x - &self.b_ineq;
            worst = worst.max(r.max());
        }
        worst
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.h.shape() != (n, n) {
            return Err(QpError::Dimension(format!(
                "H is {:?}, expected {n}x{n}",
                self.h.shape()
            )));
        }
        if self.lb.len() != n || self.ub.len() != n {
            return Err(QpError::Dimension("bound vectors must match f".into()));
        }
        if self.a_ineq.ncols() != n || self.a_ineq.nrows() != self.b_ineq.len() {
            return Err(QpError::Dimension("A and b are inconsistent".into()));
        }
        if let Some(i) = (0..n).find(|&i| self.lb[i] > self.ub[i]) {
            return Err(QpError::InfeasibleBounds(i));
        }
        let finite = self
            .h
            .iter()
            .chain(self.f.iter())
            .chain(self.a_ineq.iter())
            .chain(self.b_ineq.iter());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(QpError::Dimension("non-finite problem data".into()));
        }
        Ok(())
    }
}

/// Which original constraint a stacked row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintRef {
    Inequality(usize),
    Upper(usize),
    Lower(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    /// Unconstrained minimizer was already feasible.
    Unconstrained,
    /// KKT conditions hold to tolerance.
    Converged,
    /// Iteration cap reached; the point is feasible but not certified optimal.
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Constraints with a strictly positive multiplier at the solution.
    pub active: Vec<ConstraintRef>,
    pub kkt_residual: f64,
    pub objective: f64,
}

struct Stacked {
    g: DMatrix<f64>,
    rhs: DVector<f64>,
    refs: Vec<ConstraintRef>,
}

fn stack_constraints(p: &QpProblem) -> Stacked {
    let n = p.dim();
    let mut rows: Vec<(DVector<f64>, f64, ConstraintRef)> = Vec::new();
    for i in 0..p.a_ineq.nrows() {
        let row = p.a_ineq.row(i).transpose();
        if row.iter().all(|v| *v == 0.0) {
            // 0 <= b is either vacuous or hopeless; nothing to enforce on x.
            continue;
        }
        rows.push((row, p.b_ineq[i], ConstraintRef::Inequality(i)));
    }
    for i in 0..n {
        if p.ub[i].is_finite() {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            rows.push((e, p.ub[i], ConstraintRef::Upper(i)));
        }
    }
    for i in 0..n {
        if p.lb[i].is_finite() {
            let mut e = DVector::zeros(n);
            e[i] = -1.0;
            rows.push((e, -p.lb[i], ConstraintRef::Lower(i)));
        }
    }
    let m = rows.len();
    let mut g = DMatrix::zeros(m, n);
    let mut rhs = DVector::zeros(m);
    let mut refs = Vec::with_capacity(m);
    for (k, (row, b, r)) in rows.into_iter().enumerate() {
        g.row_mut(k).copy_from(&row.transpose());
        rhs[k] = b;
        refs.push(r);
    }
    Stacked { g, rhs, refs }
}

fn factor_hessian(h: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, QpError> {
    let sym = (h + h.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok(c);
    }
    let n = h.nrows().max(1);
    let eps = 1e-9 * sym.trace() / n as f64;
    if eps > 0.0 {
        let reg = &sym + DMatrix::identity(h.nrows(), h.ncols()) * eps;
        if let Some(c) = reg.cholesky() {
            return Ok(c);
        }
    }
    Err(QpError::NotPositiveDefinite)
}

/// Solves `prob` to tolerance `tol`, spending at most `max_iter` dual sweeps.
pub fn qp_solve(prob: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    prob.validate()?;
    let chol = factor_hessian(&prob.h)?;
    let stacked = stack_constraints(prob);
    let m = stacked.g.nrows();

    let x_free = -chol.solve(&prob.f);
    let free_violation = if m > 0 {
        (&stacked.g * &x_free - &stacked.rhs).max()
    } else {
        f64::NEG_INFINITY
    };
    if free_violation <= tol {
        return Ok(finish(
            prob,
            &stacked,
            x_free,
            DVector::zeros(m),
            QpStatus::Unconstrained,
            0,
        ));
    }

    // Hildreth: minimize 1/2 l'Ml + l'k over l >= 0.
    let hinv_gt = chol.solve(&stacked.g.transpose());
    let mmat = &stacked.g * &hinv_gt;
    let kvec = &stacked.rhs - &stacked.g * &x_free;
    let mut lambda = DVector::<f64>::zeros(m);
    let mut iterations = 0;
    let mut dual_converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut change = 0.0;
        let mut size = 0.0;
        for i in 0..m {
            let mii = mmat[(i, i)];
            if mii <= 0.0 {
                continue;
            }
            let w = kvec[i] + mmat.row(i).dot(&lambda.transpose()) - mii * lambda[i];
            let next = (-w / mii).max(0.0);
            change += (next - lambda[i]).abs();
            size += next.abs();
            lambda[i] = next;
        }
        if change <= tol * tol * (1.0 + size) {
            dual_converged = true;
            break;
        }
        // The dual often identifies the active set long before it converges.
        if iterations % 8 == 0 {
            if let Some((x, lam)) = polish(prob, &chol, &stacked, &lambda, tol) {
                return Ok(finish(
                    prob,
                    &stacked,
                    x,
                    lam,
                    QpStatus::Converged,
                    iterations,
                ));
            }
        }
    }

    if let Some((x, lam)) = polish(prob, &chol, &stacked, &lambda, tol) {
        return Ok(finish(
            prob,
            &stacked,
            x,
            lam,
            QpStatus::Converged,
            iterations,
        ));
    }

    let mut x = &x_free - &hinv_gt * &lambda;
    restore_feasibility(&stacked, &mut x, tol);
    let status = if dual_converged && prob.max_violation(&x) <= tol {
        QpStatus::Converged
    } else {
        QpStatus::MaxIterations
    };
    Ok(finish(prob, &stacked, x, lambda, status, iterations))
}

/// Solves with the default tolerance and iteration cap.
pub fn qp_solve_default(prob: &QpProblem) -> Result<QpSolution, QpError> {
    qp_solve(prob, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

fn finish(
    prob: &QpProblem,
    stacked: &Stacked,
    mut x: DVector<f64>,
    lambda: DVector<f64>,
    status: QpStatus,
    iterations: usize,
) -> QpSolution {
    if prob.max_violation(&x) > 0.5 * DEFAULT_TOL.min(1e-9) {
        restore_feasibility(stacked, &mut x, 1e-12);
    }
    let grad = &prob.h * &x + &prob.f + stacked.g.transpose() * &lambda;
    let kkt_residual = grad.amax();
    let active = lambda
        .iter()
        .zip(&stacked.refs)
        .filter(|(l, _)| **l > 0.0)
        .map(|(_, r)| *r)
        .collect();
    let objective = prob.objective(&x);
    QpSolution {
        x,
        status,
        iterations,
        active,
        kkt_residual,
        objective,
    }
}

/// Equality-constrained solve on the working set `w`. Returns the primal
/// point and the multipliers of the rows in `w`.
fn solve_working_set(
    chol: &Cholesky<f64, Dyn>,
    x_free: &DVector<f64>,
    stacked: &Stacked,
    w: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = x_free.len();
    if w.is_empty() {
        return Some((x_free.clone(), DVector::zeros(0)));
    }
    let mut gw = DMatrix::zeros(w.len(), n);
    let mut hw = DVector::zeros(w.len());
    for (k, &i) in w.iter().enumerate() {
        gw.row_mut(k).copy_from(&stacked.g.row(i));
        hw[k] = stacked.rhs[i];
    }
    let hinv_gwt = chol.solve(&gw.transpose());
    let schur = &gw * &hinv_gwt;
    let rhs = &gw * x_free - &hw;
    let schur_chol = schur.cholesky()?;
    let mut lam = schur_chol.solve(&rhs);
    let mut x = x_free - &hinv_gwt * &lam;
    // Iterative refinement against round-off when H is poorly conditioned.
    for _ in 0..2 {
        let r = &gw * &x - &hw;
        let dl = schur_chol.solve(&r);
        x -= &hinv_gwt * &dl;
        lam += dl;
    }
    Some((x, lam))
}

fn polish(
    prob: &QpProblem,
    chol: &Cholesky<f64, Dyn>,
    stacked: &Stacked,
    lambda: &DVector<f64>,
    tol: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = stacked.g.nrows();
    let x_free = -chol.solve(&prob.f);
    let lam_scale = lambda.amax().max(1.0);
    let mut w: Vec<usize> = (0..m).filter(|&i| lambda[i] > 1e-10 * lam_scale).collect();
    let mut seen: Vec<Vec<usize>> = Vec::new();

    for _ in 0..(2 * m + 10) {
        w.sort_unstable();
        if seen.contains(&w) {
            return None;
        }
        seen.push(w.clone());

        let Some((x, lam_w)) = solve_working_set(chol, &x_free, stacked, &w) else {
            // Dependent rows in the working set: drop the newest and retry.
            w.pop()?;
            continue;
        };

        if let Some((k, &most_negative)) =
            lam_w.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))
        {
            if most_negative < -tol * lam_scale.max(1.0) {
                w.remove(k);
                continue;
            }
        }

        let residual = &stacked.g * &x - &stacked.rhs;
        let worst = (0..m)
            .filter(|i| !w.contains(i))
            .max_by(|&a, &b| residual[a].total_cmp(&residual[b]));
        match worst {
            Some(i) if residual[i] > tol => {
                w.push(i);
                continue;
            }
            _ => {}
        }

        let mut full = DVector::zeros(m);
        for (k, &i) in w.iter().enumerate() {
            full[i] = lam_w[k].max(0.0);
        }
        return Some((x, full));
    }
    None
}

/// Cyclic projections onto violated halfspaces until `x` is feasible to `tol`.
fn restore_feasibility(stacked: &Stacked, x: &mut DVector<f64>, tol: f64) {
    let m = stacked.g.nrows();
    for _ in 0..100_000 {
        let mut worst: f64 = 0.0;
        for i in 0..m {
            let row = stacked.g.row(i);
            let r = row.dot(&x.transpose()) - stacked.rhs[i];
            if r > 0.0 {
                worst = worst.max(r);
                let nn = row.norm_squared();
                // Overshoot slightly so the row lands strictly inside.
                let shift = (r + 0.25 * tol) / nn;
                *x -= row.transpose() * shift;
            }
        }
        if worst <= tol {
            return;
        }
    }
}
