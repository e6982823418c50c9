//! Constrained receding-horizon controllers for the infusion rate.
//!
//! Both controllers minimize
//!
//! ```text
//!     J = sum_{j=n1}^{n2} delta(j) (y(k+j) - w)^2 + sum_{i=1}^{nu} alpha(i) du(k+i-1)^2
//! ```
//!
//! over the move sequence `du`, subject to `u_min <= u <= u_max` on the
//! cumulative input and `|du| <= du_max` on every move. Predictions come from
//! the ZOH-discretized linear PK model; the BIS map is replaced by a straight
//! line through the current effect-site concentration (see [`linearize_output`]).
//!
//! * [`mpc_ss_step`] starts the prediction from an EKF state estimate.
//! * [`mpc_baseline_step`] runs its own open-loop copy of the nominal model and
//!   corrects the predictions with a constant output bias `d = z - y_model`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::patient_model::{bis_of, bis_slope, Concentrations, DiscreteModel, PatientParams};
use crate::qp_solver::{
    qp_solve, ConstraintRef, QpProblem, QpStatus, DEFAULT_MAX_ITER, DEFAULT_TOL,
};

/// A weighting sequence given either as one constant or element by element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weights {
    Constant(f64),
    Sequence(Vec<f64>),
}

impl Weights {
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Weights::Constant(v) => *v,
            Weights::Sequence(v) => v[i],
        }
    }

    fn check(&self, name: &str, len: usize) -> Result<(), ModelError> {
        match self {
            Weights::Constant(v) if !(v.is_finite() && *v >= 0.0) => {
                Err(ModelError::invalid(name, "weights must be finite and >= 0"))
            }
            Weights::Sequence(v) if v.len() != len => Err(ModelError::invalid(
                name,
                format!("expected {len} weights, got {}", v.len()),
            )),
            Weights::Sequence(v) if v.iter().any(|w| !(w.is_finite() && *w >= 0.0)) => {
                Err(ModelError::invalid(name, "weights must be finite and >= 0"))
            }
            _ => Ok(()),
        }
    }

    fn any_positive(&self) -> bool {
        match self {
            Weights::Constant(v) => *v > 0.0,
            Weights::Sequence(v) => v.iter().any(|w| *w > 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub n1: usize,
    pub n2: usize,
    pub nu: usize,
    pub delta: Weights,
    pub alpha: Weights,
    pub setpoint: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub du_max: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            n1: 1,
            n2: 300,
            nu: 5,
            delta: Weights::Constant(1.0),
            alpha: Weights::Constant(20.0),
            setpoint: 50.0,
            u_min: 0.0,
            u_max: 300.0,
            du_max: 0.2,
        }
    }
}

impl MpcConfig {
    pub fn horizon_len(&self) -> usize {
        self.n2 + 1 - self.n1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n1 < 1 || self.n1 > self.n2 {
            return Err(ModelError::invalid("mpc.n1", "need 1 <= n1 <= n2"));
        }
        if self.nu < 1 || self.nu > self.horizon_len() {
            return Err(ModelError::invalid("mpc.nu", "need 1 <= nu <= n2 - n1 + 1"));
        }
        self.delta.check("mpc.delta", self.horizon_len())?;
        self.alpha.check("mpc.alpha", self.nu)?;
        if !self.delta.any_positive() {
            return Err(ModelError::invalid(
                "mpc.delta",
                "at least one output weight must be positive",
            ));
        }
        if !(self.setpoint > 0.0 && self.setpoint < 100.0) {
            return Err(ModelError::invalid("mpc.setpoint", "must lie in (0, 100)"));
        }
        if !(self.u_min.is_finite()
            && self.u_max.is_finite()
            && self.u_min >= 0.0
            && self.u_min < self.u_max)
        {
            return Err(ModelError::invalid("mpc.u_min", "need 0 <= u_min < u_max"));
        }
        if !(self.du_max > 0.0 && self.du_max.is_finite()) {
            return Err(ModelError::invalid("mpc.du_max", "must be positive"));
        }
        Ok(())
    }

    /// Checks that the setpoint can be held by an infusion strictly inside the bounds.
    pub fn check_reachable(&self, params: &PatientParams) -> Result<f64, ModelError> {
        if self.setpoint >= params.bis0 {
            return Err(ModelError::invalid(
                "mpc.setpoint",
                "must be below the awake BIS",
            ));
        }
        let u_ss = params.steady_infusion_for_bis(self.setpoint)?;
        if !(u_ss > self.u_min && u_ss < self.u_max) {
            return Err(ModelError::invalid(
                "mpc.setpoint",
                format!(
                    "steady infusion {u_ss:.3} lies outside ({}, {})",
                    self.u_min, self.u_max
                ),
            ));
        }
        Ok(u_ss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerStatus {
    Qp(QpStatus),
    /// QP could not be set up or solved; the previous input was held.
    Failed(String),
}

impl ControllerStatus {
    pub fn is_failure(&self) -> bool {
        matches!(self, ControllerStatus::Failed(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub xe_lin: f64,
    pub slope: f64,
    /// Output bias added to the model predictions (zero for the state-space MPC).
    pub offset: f64,
    pub active: Vec<ConstraintRef>,
    pub rate_limited_up: bool,
    pub rate_limited_down: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerOutput {
    pub u: f64,
    pub du: f64,
    pub predicted_bis: Vec<f64>,
    pub qp_status: ControllerStatus,
    pub diagnostics: Diagnostics,
}

/// Straight-line BIS model around the current effect-site concentration.
///
/// The tangent of the Emax curve is flat at `xe = 0` whenever `gamma > 1`,
/// which would leave an awake patient with zero predicted sensitivity to the
/// infusion. The line is therefore drawn through the current point and the
/// concentration that produces `target_bis` (a secant), and falls back to the
/// tangent once the two coincide. Returns `(bis(xe_lin), slope)`.
pub fn linearize_output(
    params: &PatientParams,
    xe_lin: f64,
    target_bis: f64,
) -> Result<(f64, f64), ModelError> {
    let bis_lin = bis_of(params, xe_lin)?;
    let target = target_bis.clamp(1e-3 * params.bis0, params.bis0 * (1.0 - 1e-9));
    let xe_target = params.xe_for_bis(target)?;
    let gap = xe_target - xe_lin;
    let slope = if gap.abs() > 1e-6 * params.ec50 {
        (bis_of(params, xe_target)? - bis_lin) / gap
    } else {
        bis_slope(params, xe_lin)?
    };
    Ok((bis_lin, slope))
}

/// Lifted prediction of `xe` over the horizon: free response plus the
/// dynamic matrix mapping moves to `xe`.
struct Prediction {
    xe_free: Vec<f64>,
    /// `dyn_matrix[(j, m)]` = change of `xe(k+n1+j)` per unit move `du(k+m)`.
    dyn_matrix: DMatrix<f64>,
}

fn predict_effect_site(
    cfg: &MpcConfig,
    model: &DiscreteModel,
    x0: &Concentrations,
    u_prev: f64,
) -> Prediction {
    // Unit-step response of every state: step[j] = sum_{i<j} A^i B.
    let mut step = Vec::with_capacity(cfg.n2 + 1);
    let mut acc = Concentrations::zeros();
    let mut a_pow_b = model.b_d;
    step.push(acc);
    for _ in 0..cfg.n2 {
        acc += a_pow_b;
        step.push(acc);
        a_pow_b = model.a_d * a_pow_b;
    }

    let mut xe_free = Vec::with_capacity(cfg.horizon_len());
    let mut x = *x0;
    for j in 1..=cfg.n2 {
        x = model.a_d * x + model.b_d * u_prev;
        if j >= cfg.n1 {
            xe_free.push(x[3]);
        }
    }

    let rows = cfg.horizon_len();
    let mut dyn_matrix = DMatrix::zeros(rows, cfg.nu);
    for r in 0..rows {
        let j = cfg.n1 + r;
        for m in 0..cfg.nu.min(j) {
            dyn_matrix[(r, m)] = step[j - m][3];
        }
    }
    Prediction {
        xe_free,
        dyn_matrix,
    }
}

fn hold(
    cfg: &MpcConfig,
    u_prev: f64,
    xe_lin: f64,
    slope: f64,
    offset: f64,
    reason: String,
) -> ControllerOutput {
    ControllerOutput {
        u: u_prev.clamp(cfg.u_min, cfg.u_max),
        du: 0.0,
        predicted_bis: Vec::new(),
        qp_status: ControllerStatus::Failed(reason),
        diagnostics: Diagnostics {
            xe_lin,
            slope,
            offset,
            active: Vec::new(),
            rate_limited_up: false,
            rate_limited_down: false,
        },
    }
}

/// Shared MPC core: predict from `x0`, add `offset` to the output, solve, take the first move.
fn solve_horizon(
    cfg: &MpcConfig,
    model: &DiscreteModel,
    params: &PatientParams,
    x0: &Concentrations,
    offset: f64,
    u_prev: f64,
) -> ControllerOutput {
    let xe_lin = x0[3].max(0.0);
    let (bis_lin, slope) = match linearize_output(params, xe_lin, cfg.setpoint - offset) {
        Ok(v) => v,
        Err(e) => return hold(cfg, u_prev, xe_lin, f64::NAN, offset, e.to_string()),
    };

    let pred = predict_effect_site(cfg, model, x0, u_prev);
    let rows = cfg.horizon_len();
    let nu = cfg.nu;

    let y_free = DVector::from_iterator(
        rows,
        pred.xe_free
            .iter()
            .map(|xe| bis_lin + slope * (xe - xe_lin) + offset),
    );
    let g = &pred.dyn_matrix * slope;
    let error = y_free.add_scalar(-cfg.setpoint);

    let mut gtd = g.transpose();
    for r in 0..rows {
        let w = cfg.delta.at(r);
        gtd.column_mut(r).scale_mut(w);
    }
    let mut h = &gtd * &g;
    for i in 0..nu {
        h[(i, i)] += cfg.alpha.at(i);
    }
    h *= 2.0;
    let f = &gtd * &error * 2.0;

    let lower_ones = DMatrix::from_fn(nu, nu, |i, j| if j <= i { 1.0 } else { 0.0 });
    let mut a_ineq = DMatrix::zeros(2 * nu, nu);
    a_ineq.view_mut((0, 0), (nu, nu)).copy_from(&lower_ones);
    a_ineq
        .view_mut((nu, 0), (nu, nu))
        .copy_from(&(-&lower_ones));
    let mut b_ineq = DVector::zeros(2 * nu);
    for i in 0..nu {
        b_ineq[i] = cfg.u_max - u_prev;
        b_ineq[nu + i] = u_prev - cfg.u_min;
    }
    let problem = QpProblem::unconstrained(h, f)
        .with_bounds(
            DVector::from_element(nu, -cfg.du_max),
            DVector::from_element(nu, cfg.du_max),
        )
        .with_inequalities(a_ineq, b_ineq);

    let solution = match qp_solve(&problem, DEFAULT_TOL, DEFAULT_MAX_ITER) {
        Ok(s) => s,
        Err(e) => return hold(cfg, u_prev, xe_lin, slope, offset, e.to_string()),
    };

    let du = solution.x[0].clamp(-cfg.du_max, cfg.du_max);
    let u = (u_prev + du).clamp(cfg.u_min, cfg.u_max);
    let predicted = &y_free + &g * &solution.x;

    ControllerOutput {
        u,
        du: u - u_prev,
        predicted_bis: predicted.iter().copied().collect(),
        qp_status: ControllerStatus::Qp(solution.status),
        diagnostics: Diagnostics {
            xe_lin,
            slope,
            offset,
            rate_limited_up: solution.active.contains(&ConstraintRef::Upper(0)),
            rate_limited_down: solution.active.contains(&ConstraintRef::Lower(0)),
            active: solution.active,
        },
    }
}

/// State-feedback MPC step from the filter estimate `x_hat`.
pub fn mpc_ss_step(
    cfg: &MpcConfig,
    model: &DiscreteModel,
    params: &PatientParams,
    x_hat: &Concentrations,
    u_prev: f64,
) -> ControllerOutput {
    solve_horizon(cfg, model, params, x_hat, 0.0, u_prev)
}

/// Open-loop nominal model run alongside the baseline controller.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub x_model: Concentrations,
    /// Model BIS delayed by the nominal transport delay, oldest first.
    bis_line: VecDeque<f64>,
}

impl BaselineState {
    pub fn new(
        params: &PatientParams,
        x0: Concentrations,
        delay_steps: usize,
    ) -> Result<Self, ModelError> {
        let bis = bis_of(params, x0[3])?;
        Ok(Self {
            x_model: x0,
            bis_line: std::iter::repeat_n(bis, delay_steps + 1).collect(),
        })
    }

    /// Model BIS as the monitor would show it now.
    pub fn delayed_model_bis(&self) -> f64 {
        *self.bis_line.front().expect("delay line is never empty")
    }

    fn advance(&mut self, model: &DiscreteModel, params: &PatientParams, u: f64) {
        self.x_model = model.a_d * self.x_model + model.b_d * u;
        self.x_model.iter_mut().for_each(|c| *c = c.max(0.0));
        let bis = bis_of(params, self.x_model[3]).expect("model state is non-negative");
        self.bis_line.push_back(bis);
        self.bis_line.pop_front();
    }
}

/// Output-feedback MPC step from the measured BIS `z`.
///
/// The bias between `z` and the delayed model output is assumed constant over
/// the horizon and added to the undelayed model predictions. The internal
/// model is advanced with the applied input before returning.
pub fn mpc_baseline_step(
    cfg: &MpcConfig,
    model: &DiscreteModel,
    params: &PatientParams,
    z: f64,
    internal: &mut BaselineState,
    u_prev: f64,
) -> ControllerOutput {
    let out = if z.is_finite() {
        let offset = z - internal.delayed_model_bis();
        solve_horizon(cfg, model, params, &internal.x_model, offset, u_prev)
    } else {
        hold(
            cfg,
            u_prev,
            internal.x_model[3],
            f64::NAN,
            0.0,
            "non-finite measurement".into(),
        )
    };
    internal.advance(model, params, out.u);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patient_model::{discretize, steady_state};
    use approx::assert_relative_eq;

    fn nominal() -> (PatientParams, DiscreteModel) {
        let p = PatientParams::nominal();
        let m = discretize(&p, 1.0).unwrap();
        (p, m)
    }

    #[test]
    fn default_config_is_valid_and_reachable() {
        let cfg = MpcConfig::default();
        cfg.validate().unwrap();
        let u_ss = cfg.check_reachable(&PatientParams::nominal()).unwrap();
        assert!(u_ss > 0.0 && u_ss < 300.0);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cfg = MpcConfig {
            nu: 0,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("mpc.nu"));
        let cfg = MpcConfig {
            n1: 5,
            n2: 4,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("mpc.n1"));
        let cfg = MpcConfig {
            delta: Weights::Constant(0.0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MpcConfig {
            alpha: Weights::Sequence(vec![1.0; 3]),
            ..Default::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("mpc.alpha"));
    }

    #[test]
    fn at_setpoint_steady_state_no_move() {
        let (p, m) = nominal();
        let cfg = MpcConfig::default();
        let u_ss = p.steady_infusion_for_bis(cfg.setpoint).unwrap();
        let x_ss = steady_state(&p, u_ss).unwrap();
        let out = mpc_ss_step(&cfg, &m, &p, &x_ss, u_ss);
        assert!(
            out.du.abs() <= 1e-8 * cfg.du_max.max(1.0),
            "du = {}",
            out.du
        );
        assert!(matches!(
            out.qp_status,
            ControllerStatus::Qp(QpStatus::Unconstrained)
        ));
    }

    #[test]
    fn induction_from_awake_is_rate_limited() {
        let (p, m) = nominal();
        let cfg = MpcConfig::default();
        let out = mpc_ss_step(&cfg, &m, &p, &Concentrations::zeros(), 0.0);
        assert_relative_eq!(out.u, 0.2, epsilon = 1e-12);
        assert!(out.diagnostics.rate_limited_up);
        assert!(out.diagnostics.active.contains(&ConstraintRef::Upper(0)));
        assert_eq!(out.predicted_bis.len(), cfg.horizon_len());
    }

    #[test]
    fn single_step_horizon_matches_scalar_closed_form() {
        let (p, m) = nominal();
        let (delta, alpha) = (1.0, 1e-6);
        let cfg = MpcConfig {
            n1: 1,
            n2: 1,
            nu: 1,
            delta: Weights::Constant(delta),
            alpha: Weights::Constant(alpha),
            du_max: 1e6,
            u_max: 1e6,
            ..Default::default()
        };
        let u_prev = 60.0;
        let x0 = Concentrations::new(3.4, 8.0, 4.0, 3.35);
        // Independent scalar derivation: y1 = c + s * (xe1 - xe0).
        let xe_target = p.xe_for_bis(cfg.setpoint).unwrap();
        let s = (bis_of(&p, xe_target).unwrap() - bis_of(&p, x0[3]).unwrap()) / (xe_target - x0[3]);
        let xe_free = (m.a_d * x0 + m.b_d * u_prev)[3];
        let y_free = bis_of(&p, x0[3]).unwrap() + s * (xe_free - x0[3]);
        let g = s * m.b_d[3];
        let e = cfg.setpoint - y_free;
        let expected = delta * g * e / (delta * g * g + alpha);

        let out = mpc_ss_step(&cfg, &m, &p, &x0, u_prev);
        assert!(out.diagnostics.active.is_empty());
        assert!(expected.abs() > 1.0);
        assert_relative_eq!(out.du, expected, max_relative = 1e-8);
    }

    #[test]
    fn bounds_hold_near_the_ceiling_and_floor() {
        let (p, m) = nominal();
        let cfg = MpcConfig::default();
        let out = mpc_ss_step(&cfg, &m, &p, &Concentrations::zeros(), 299.9);
        assert!(out.u <= 300.0 && out.u >= 299.9 - 0.2);
        let heavy = Concentrations::new(10.0, 10.0, 10.0, 10.0);
        let out = mpc_ss_step(&cfg, &m, &p, &heavy, 0.1);
        assert!(out.u >= 0.0 && out.u <= 0.1);
    }

    #[test]
    fn baseline_with_zero_bias_is_open_loop_mpc() {
        let (p, m) = nominal();
        let cfg = MpcConfig::default();
        let x0 = Concentrations::new(1.0, 0.5, 0.2, 0.8);
        let mut internal = BaselineState::new(&p, x0, m.delay_steps).unwrap();
        let z = internal.delayed_model_bis();
        let out = mpc_baseline_step(&cfg, &m, &p, z, &mut internal, 30.0);
        assert_eq!(out.diagnostics.offset, 0.0);
        let reference = mpc_ss_step(&cfg, &m, &p, &x0, 30.0);
        assert_eq!(out.u, reference.u);
        assert_eq!(internal.x_model, m.a_d * x0 + m.b_d * out.u);
    }

    #[test]
    fn qp_failure_holds_previous_input() {
        let (p, m) = nominal();
        let cfg = MpcConfig::default();
        let mut internal = BaselineState::new(&p, Concentrations::zeros(), 3).unwrap();
        let out = mpc_baseline_step(&cfg, &m, &p, f64::NAN, &mut internal, 42.0);
        assert!(out.qp_status.is_failure());
        assert_eq!(out.u, 42.0);
    }

    #[test]
    fn secant_slope_is_never_flat_away_from_target() {
        let p = PatientParams::nominal();
        let (bis, slope) = linearize_output(&p, 0.0, 50.0).unwrap();
        assert_eq!(bis, 100.0);
        assert_relative_eq!(slope, -50.0 / 3.3, max_relative = 1e-12);
        let (_, tangent) = linearize_output(&p, 3.3, 50.0).unwrap();
        assert_relative_eq!(tangent, bis_slope(&p, 3.3).unwrap(), max_relative = 1e-12);
    }
}
