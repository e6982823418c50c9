//! Extended Kalman filter for the hidden concentrations.
//!
//! The process model is linear, so prediction is an exact Kalman step. The
//! only nonlinearity is the Emax map from `xe` to BIS, which is linearized at
//! every update. The BIS reading at step `k` reflects the state at
//! `k - delay_steps`, so the filter keeps the trajectory of its own recent
//! estimates: the innovation is formed against the estimate from `delay_steps`
//! ago, the correction is applied there, and then carried forward through the
//! newer entries by the state-transition matrix. The covariance tracks that
//! lagged estimate, which keeps it 4x4.

use std::collections::VecDeque;

use nalgebra::{Matrix4, RowVector4, Vector4};
use serde::{Deserialize, Serialize};

use crate::patient_model::{bis_of, bis_slope, Concentrations, DiscreteModel, PatientParams};

/// Where the measurement Jacobian is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linearization {
    /// At the current (lagged) effect-site estimate.
    #[default]
    AtEstimate,
    /// Always at the half-effect concentration.
    AtEc50,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfTuning {
    /// Process-noise variance per state, (µg/mL)².
    pub q: f64,
    /// Measurement-noise variance, BIS².
    pub r: f64,
    /// Initial error variance per state, (µg/mL)².
    pub p0: f64,
    pub linearization: Linearization,
}

impl Default for EkfTuning {
    fn default() -> Self {
        Self {
            q: 1e-6,
            r: 1.0,
            p0: 1e-2,
            linearization: Linearization::AtEstimate,
        }
    }
}

impl EkfTuning {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return Err("ekf.q must be finite and >= 0".into());
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err("ekf.r must be finite and > 0".into());
        }
        if !(self.p0 >= 0.0 && self.p0.is_finite()) {
            return Err("ekf.p0 must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    Applied {
        innovation: f64,
        gain_norm: f64,
    },
    /// Measurement was not finite; the filter is unchanged.
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    /// Current estimate.
    pub x_hat: Concentrations,
    /// Error covariance of the estimate `delay_steps` back.
    pub p: Matrix4<f64>,
    pub q: Matrix4<f64>,
    pub r: f64,
    pub linearization: Linearization,
    /// Past estimates, oldest first; the back equals `x_hat`.
    history: VecDeque<Concentrations>,
    depth: usize,
}

impl EkfState {
    /// Filter starting at `x0`, assumed to have been held over the delay window.
    pub fn new(x0: Concentrations, tuning: &EkfTuning, delay_steps: usize) -> Self {
        let depth = delay_steps + 1;
        Self {
            x_hat: x0,
            p: Matrix4::identity() * tuning.p0,
            q: Matrix4::identity() * tuning.q,
            r: tuning.r,
            linearization: tuning.linearization,
            history: std::iter::repeat_n(x0, depth).collect(),
            depth,
        }
    }

    /// Estimate from `lag` steps ago (clamped to the stored window).
    pub fn lagged(&self, lag: usize) -> Concentrations {
        let lag = lag.min(self.history.len() - 1);
        self.history[self.history.len() - 1 - lag]
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Time update under infusion `u`.
    pub fn predict(&mut self, model: &DiscreteModel, u: f64) {
        self.x_hat = model.a_d * self.x_hat + model.b_d * u;
        self.p = model.a_d * self.p * model.a_d.transpose() + self.q;
        symmetrize(&mut self.p);
        self.history.push_back(self.x_hat);
        while self.history.len() > self.depth {
            self.history.pop_front();
        }
    }

    /// Measurement update with a BIS reading that lags the state by `delay_steps`.
    pub fn update(
        &mut self,
        model: &DiscreteModel,
        z: f64,
        params: &PatientParams,
        delay_steps: usize,
    ) -> UpdateOutcome {
        if !z.is_finite() {
            return UpdateOutcome::Rejected;
        }
        let lag = delay_steps.min(self.history.len() - 1);
        let lag_index = self.history.len() - 1 - lag;
        let x_lag = self.history[lag_index];
        let xe = x_lag[3].max(0.0);
        let predicted = bis_of(params, xe).expect("estimates are clamped non-negative");
        let xe_lin = match self.linearization {
            Linearization::AtEstimate => xe,
            Linearization::AtEc50 => params.ec50,
        };
        let slope = bis_slope(params, xe_lin).expect("linearization point is non-negative");
        let h = RowVector4::new(0.0, 0.0, 0.0, slope);

        let innovation = z - predicted;
        let ph = self.p * h.transpose();
        let s = (h * ph)[0] + self.r;
        let gain: Vector4<f64> = ph / s;

        let mut correction = gain * innovation;
        for entry in self.history.iter_mut().skip(lag_index) {
            *entry += correction;
            entry.iter_mut().for_each(|c| *c = c.max(0.0));
            correction = model.a_d * correction;
        }
        self.x_hat = *self.history.back().expect("history is never empty");

        self.p = (Matrix4::identity() - gain * h) * self.p;
        symmetrize(&mut self.p);

        UpdateOutcome::Applied {
            innovation,
            gain_norm: gain.norm(),
        }
    }
}

fn symmetrize(p: &mut Matrix4<f64>) {
    *p = (*p + p.transpose()) * 0.5;
}
