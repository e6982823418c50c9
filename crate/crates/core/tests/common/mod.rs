//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use doa_sim::qp_solver::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// All constraints of `p` as rows of `G x <= g`.
pub fn stacked(p: &QpProblem) -> (Vec<DVector<f64>>, Vec<f64>) {
    let n = p.dim();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..p.a_ineq.nrows() {
        rows.push(p.a_ineq.row(i).transpose());
        rhs.push(p.b_ineq[i]);
    }
    for i in 0..n {
        if p.ub[i].is_finite() {
            rows.push(DVector::from_fn(n, |j, _| if j == i { 1.0 } else { 0.0 }));
            rhs.push(p.ub[i]);
        }
        if p.lb[i].is_finite() {
            rows.push(DVector::from_fn(n, |j, _| if j == i { -1.0 } else { 0.0 }));
            rhs.push(-p.lb[i]);
        }
    }
    (rows, rhs)
}

/// Minimizer of a strictly convex QP by trying every working set of at most
/// `n` constraints and keeping the best KKT point (feasible, non-negative
/// multipliers).
pub fn enumerate_active_sets(p: &QpProblem) -> DVector<f64> {
    let n = p.dim();
    let (rows, rhs) = stacked(p);
    let m = rows.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1u32 << m) {
        let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = set.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::<f64>::zeros(n + k, n + k);
        let mut b = DVector::<f64>::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        for (r, &i) in set.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = rows[i][j];
                kkt[(j, n + r)] = rows[i][j];
            }
            b[n + r] = rhs[i];
        }
        for j in 0..n {
            b[j] = -p.f[j];
        }
        if kkt.clone().svd(false, false).rank(1e-10) < n + k {
            continue;
        }
        let Some(sol) = kkt.full_piv_lu().solve(&b) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        let lambda = sol.rows(n, k);
        if lambda.iter().any(|l| *l < -1e-10) {
            continue;
        }
        if p.max_violation(&x) > 1e-10 {
            continue;
        }
        let obj = p.objective(&x);
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, x));
        }
    }
    best.expect("a feasible strictly convex QP has a KKT point")
        .1
}

/// Random strictly convex QP with `n` variables that is feasible by
/// construction: every constraint holds at a hidden point `x0`.
pub fn random_problem<R: Rng>(rng: &mut R, n: usize) -> QpProblem {
    let l = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(n, n) * rng.random_range(0.05..1.0);
    let f = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let lb = DVector::from_fn(n, |i, _| {
        if rng.random_bool(0.7) {
            x0[i] - rng.random_range(0.0..1.0)
        } else {
            f64::NEG_INFINITY
        }
    });
    let ub = DVector::from_fn(n, |i, _| {
        if rng.random_bool(0.7) {
            x0[i] + rng.random_range(0.0..1.0)
        } else {
            f64::INFINITY
        }
    });
    let m = rng.random_range(0..=3);
    let a = DMatrix::<f64>::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let b = &a * &x0 + DVector::from_fn(m, |_, _| rng.random_range(0.0..0.5));
    QpProblem::unconstrained(h, f)
        .with_bounds(lb, ub)
        .with_inequalities(a, b)
}

/// Largest absolute difference, scaled by the larger magnitude when above one.
pub fn scaled_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
