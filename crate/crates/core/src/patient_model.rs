//! Propofol PK-PD virtual patient.
//!
//! Three-compartment mammillary pharmacokinetics with an effect-site
//! compartment, a sigmoid Emax map from effect-site concentration to BIS, and a
//! pure transport delay on the measured BIS. State ordering everywhere is
//! `[x1, x2, x3, xe]` in µg/mL.

use std::collections::VecDeque;

use nalgebra::{Matrix4, Matrix5, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Default patient mass used to turn µg/kg/min into a mass flow.
pub const DEFAULT_WEIGHT_KG: f64 = 70.0;
/// Default controller and simulator sampling period, seconds.
pub const DEFAULT_TS: f64 = 0.2;

pub type Concentrations = Vector4<f64>;

/// Per-patient model constants. Rate constants are in 1/s, `v1` in liters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientParams {
    pub v1: f64,
    pub k10: f64,
    pub k12: f64,
    pub k21: f64,
    pub k13: f64,
    pub k31: f64,
    pub ke0: f64,
    pub td: f64,
    pub bis0: f64,
    pub gamma: f64,
    pub ec50: f64,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    DEFAULT_WEIGHT_KG
}

impl PatientParams {
    /// Average-population design model.
    pub fn nominal() -> Self {
        Self {
            v1: 9.5855,
            k10: 0.0028,
            k12: 0.0042,
            k21: 8.495e-4,
            k13: 0.0017,
            k31: 6.182e-5,
            ke0: 39e-3,
            td: 12.9,
            bis0: 100.0,
            gamma: 2.0,
            ec50: 3.3,
            weight: DEFAULT_WEIGHT_KG,
        }
    }

    pub fn patient1() -> Self {
        Self {
            v1: 10.450,
            k10: 0.0029,
            k12: 0.0044,
            k21: 8.506e-4,
            k13: 0.0018,
            k31: 6.659e-5,
            ke0: 24.8e-3,
            td: 4.0,
            bis0: 100.0,
            gamma: 2.0,
            ec50: 2.7,
            weight: DEFAULT_WEIGHT_KG,
        }
    }

    pub fn patient2() -> Self {
        Self {
            v1: 8.947,
            k10: 0.0027,
            k12: 0.0042,
            k21: 8.485e-4,
            k13: 0.0017,
            k31: 5.810e-5,
            ke0: 83.1e-3,
            td: 29.0,
            bis0: 100.0,
            gamma: 2.3,
            ec50: 4.0,
            weight: DEFAULT_WEIGHT_KG,
        }
    }

    /// Looks up one of the built-in parameter rows by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "nominal" => Some(Self::nominal()),
            "patient1" => Some(Self::patient1()),
            "patient2" => Some(Self::patient2()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("v1", self.v1),
            ("k10", self.k10),
            ("k12", self.k12),
            ("k21", self.k21),
            ("k13", self.k13),
            ("k31", self.k31),
            ("ke0", self.ke0),
            ("td", self.td),
            ("bis0", self.bis0),
            ("gamma", self.gamma),
            ("ec50", self.ec50),
            ("weight", self.weight),
        ];
        for (field, value) in fields {
            if !value.is_finite() {
                return Err(ModelError::invalid(field, "must be finite"));
            }
        }
        for (field, value) in [
            ("v1", self.v1),
            ("k10", self.k10),
            ("k12", self.k12),
            ("k21", self.k21),
            ("k13", self.k13),
            ("k31", self.k31),
            ("ke0", self.ke0),
            ("ec50", self.ec50),
            ("weight", self.weight),
        ] {
            if value <= 0.0 {
                return Err(ModelError::invalid(field, "must be strictly positive"));
            }
        }
        if self.gamma < 1.0 {
            return Err(ModelError::invalid("gamma", "must be >= 1"));
        }
        if self.td < 0.0 {
            return Err(ModelError::invalid("td", "must be >= 0"));
        }
        if !(self.bis0 > 0.0 && self.bis0 <= 100.0) {
            return Err(ModelError::invalid("bis0", "must lie in (0, 100]"));
        }
        Ok(())
    }

    /// Central volume in mL, so that µg / mL comes out of the balance.
    pub fn v1_ml(&self) -> f64 {
        self.v1 * 1000.0
    }

    /// Continuous-time system matrix of the four-state linear PK + effect-site model.
    pub fn system_matrix(&self) -> Matrix4<f64> {
        Matrix4::new(
            -(self.k10 + self.k12 + self.k13),
            self.k21,
            self.k31,
            0.0,
            self.k12,
            -self.k21,
            0.0,
            0.0,
            self.k13,
            0.0,
            -self.k31,
            0.0,
            self.ke0,
            0.0,
            0.0,
            -self.ke0,
        )
    }

    /// Input column: (µg/mL/s) per (µg/kg/min).
    pub fn input_vector(&self) -> Vector4<f64> {
        Vector4::new(self.weight / (60.0 * self.v1_ml()), 0.0, 0.0, 0.0)
    }

    /// Effect-site concentration producing the given BIS (inverse Emax map).
    pub fn xe_for_bis(&self, bis: f64) -> Result<f64, ModelError> {
        if !(bis > 0.0 && bis <= self.bis0) {
            return Err(ModelError::Domain(format!(
                "BIS {bis} outside (0, {}]",
                self.bis0
            )));
        }
        Ok(self.ec50 * (self.bis0 / bis - 1.0).powf(1.0 / self.gamma))
    }

    /// Constant infusion (µg/kg/min) whose steady state maps to `bis`.
    pub fn steady_infusion_for_bis(&self, bis: f64) -> Result<f64, ModelError> {
        let xe = self.xe_for_bis(bis)?;
        // At equilibrium x1 = xe and only k10 clears drug.
        Ok(self.k10 * xe / self.input_vector()[0])
    }
}

/// Time derivative of the concentrations under infusion `u` (µg/kg/min).
pub fn continuous_derivative(params: &PatientParams, x: &Concentrations, u: f64) -> Concentrations {
    params.system_matrix() * x + params.input_vector() * u
}

/// Sigmoid Emax map from effect-site concentration to BIS.
pub fn bis_of(params: &PatientParams, xe: f64) -> Result<f64, ModelError> {
    if xe.is_nan() || xe < 0.0 {
        return Err(ModelError::Domain(format!("negative concentration {xe}")));
    }
    let xg = xe.powf(params.gamma);
    let eg = params.ec50.powf(params.gamma);
    if xg.is_infinite() {
        return Ok(0.0);
    }
    Ok(params.bis0 * (1.0 - xg / (xg + eg)))
}

/// Derivative of [`bis_of`] with respect to `xe`.
pub fn bis_slope(params: &PatientParams, xe: f64) -> Result<f64, ModelError> {
    if xe.is_nan() || xe < 0.0 {
        return Err(ModelError::Domain(format!("negative concentration {xe}")));
    }
    let g = params.gamma;
    let xg = xe.powf(g);
    let eg = params.ec50.powf(g);
    let denom = xg + eg;
    Ok(-params.bis0 * g * xe.powf(g - 1.0) * eg / (denom * denom))
}

/// Zero-order-hold realization of the linear PK + effect-site model.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a_d: Matrix4<f64>,
    pub b_d: Vector4<f64>,
    pub ts: f64,
    pub delay_steps: usize,
}

/// Samples the continuous model with a zero-order hold of period `ts`.
///
/// Both `a_d` and `b_d` come out of a single exponential of the augmented
/// matrix `[[A, B], [0, 0]] * ts`.
pub fn discretize(params: &PatientParams, ts: f64) -> Result<DiscreteModel, ModelError> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(ModelError::invalid("ts", "must be positive and finite"));
    }
    params.validate()?;
    let a = params.system_matrix();
    let b = params.input_vector();
    let mut aug = Matrix5::<f64>::zeros();
    aug.fixed_view_mut::<4, 4>(0, 0).copy_from(&(a * ts));
    aug.fixed_view_mut::<4, 1>(0, 4).copy_from(&(b * ts));
    let phi = aug.exp();
    let a_d: Matrix4<f64> = phi.fixed_view::<4, 4>(0, 0).into_owned();
    let b_d: Vector4<f64> = phi.fixed_view::<4, 1>(0, 4).into_owned();
    if a_d.iter().chain(b_d.iter()).any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("discretized model"));
    }
    Ok(DiscreteModel {
        a_d,
        b_d,
        ts,
        delay_steps: delay_steps(params.td, ts),
    })
}

/// Transport delay in whole samples, rounded to nearest.
pub fn delay_steps(td: f64, ts: f64) -> usize {
    (td / ts).round().max(0.0) as usize
}

/// True plant state: concentrations plus the BIS transport-delay line.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientState {
    pub x: Concentrations,
    /// Past true BIS values, oldest first. Holds `delay_steps + 1` entries;
    /// the back is the current BIS and the front is what the monitor shows.
    delay_buffer: VecDeque<f64>,
}

impl PatientState {
    /// Drug-free, awake patient.
    pub fn awake(params: &PatientParams, delay_steps: usize) -> Self {
        Self::at(params, Concentrations::zeros(), delay_steps)
            .expect("zero concentrations are in the PD domain")
    }

    /// Patient resting at `x`, with the delay line filled as if `x` had been
    /// held for the whole delay.
    pub fn at(
        params: &PatientParams,
        x: Concentrations,
        delay_steps: usize,
    ) -> Result<Self, ModelError> {
        let bis = bis_of(params, x[3])?;
        Ok(Self {
            x,
            delay_buffer: std::iter::repeat_n(bis, delay_steps + 1).collect(),
        })
    }

    /// BIS as currently displayed, i.e. the value from `delay_steps` ago.
    pub fn delayed_bis(&self) -> f64 {
        *self
            .delay_buffer
            .front()
            .expect("delay buffer is never empty")
    }

    pub fn delay_len(&self) -> usize {
        self.delay_buffer.len()
    }
}

/// Advances the plant one sample under constant infusion `u`.
pub fn step(model: &DiscreteModel, params: &PatientParams, state: &mut PatientState, u: f64) {
    state.x = model.a_d * state.x + model.b_d * u;
    // Round-off can push an exactly-zero compartment to -1e-300 or so.
    state.x.iter_mut().for_each(|c| *c = c.max(0.0));
    let bis = bis_of(params, state.x[3]).expect("concentrations are clamped non-negative");
    state.delay_buffer.push_back(bis);
    state.delay_buffer.pop_front();
}

/// Monitor reading: delayed BIS plus Gaussian noise, clamped to [0, 100].
pub fn measure<R: Rng + ?Sized>(state: &PatientState, noise_sd: f64, rng: &mut R) -> f64 {
    let clean = state.delayed_bis();
    let noisy = if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).expect("noise_sd is finite and positive");
        clean + normal.sample(rng)
    } else {
        clean
    };
    noisy.clamp(0.0, 100.0)
}

/// Steady state reached under constant infusion, from `A x + B u = 0`.
pub fn steady_state(params: &PatientParams, u: f64) -> Option<Concentrations> {
    let rhs = -params.input_vector() * u;
    params.system_matrix().lu().solve(&rhs)
}
