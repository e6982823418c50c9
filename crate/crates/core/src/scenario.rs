//! Closed-loop experiments: a true patient, a controller designed on the
//! nominal model, trace recording, run metrics, and the transport-delay
//! tolerance search.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controllers::{mpc_baseline_step, mpc_ss_step, BaselineState, MpcConfig};
use crate::error::SimError;
use crate::estimator::{EkfState, EkfTuning};
use crate::patient_model::{
    bis_of, discretize, measure, step, Concentrations, PatientParams, PatientState,
};

/// Half-width of the band used for `settling_time`.
pub const SETTLING_BAND: f64 = 5.0;
/// Default acceptable band around the setpoint for `in_bound`.
pub const DEFAULT_BAND: f64 = 10.0;
pub const DEFAULT_DURATION: f64 = 1800.0;
pub const DEFAULT_RESOLUTION: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    StateSpaceEkf,
    Baseline,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 2] = [ControllerKind::StateSpaceEkf, ControllerKind::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::StateSpaceEkf => "state-space-ekf",
            ControllerKind::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "state-space-ekf" => Ok(ControllerKind::StateSpaceEkf),
            "baseline" => Ok(ControllerKind::Baseline),
            other => Err(format!(
                "unknown controller `{other}` (expected state-space-ekf or baseline)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// True plant.
    pub patient: PatientParams,
    /// Design model used by the controller and the observer.
    pub nominal: PatientParams,
    pub controller: ControllerKind,
    pub mpc: MpcConfig,
    pub ekf: EkfTuning,
    pub ts: f64,
    pub duration: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Plant state at t = 0.
    pub plant_x0: Concentrations,
    /// Controller-side initial state (EKF estimate or baseline model).
    pub estimate_x0: Concentrations,
}

impl Scenario {
    /// Induction from an awake patient with all defaults.
    pub fn new(patient: PatientParams, nominal: PatientParams, controller: ControllerKind) -> Self {
        Self {
            patient,
            nominal,
            controller,
            mpc: MpcConfig::default(),
            ekf: EkfTuning::default(),
            ts: crate::patient_model::DEFAULT_TS,
            duration: DEFAULT_DURATION,
            noise_sd: 0.0,
            seed: 0,
            plant_x0: Concentrations::zeros(),
            estimate_x0: Concentrations::zeros(),
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.ts).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.patient
            .validate()
            .map_err(|e| prefixed("patient", e))?;
        self.nominal
            .validate()
            .map_err(|e| prefixed("nominal", e))?;
        self.mpc.validate()?;
        self.mpc.check_reachable(&self.nominal)?;
        self.ekf.validate().map_err(SimError::InvalidScenario)?;
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(SimError::InvalidScenario(
                "scenario.ts must be positive".into(),
            ));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(SimError::InvalidScenario(
                "scenario.duration must be positive".into(),
            ));
        }
        let ratio = self.duration / self.ts;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(SimError::InvalidScenario(format!(
                "scenario.ts = {} does not divide scenario.duration = {}",
                self.ts, self.duration
            )));
        }
        if self.duration < 10.0 * self.patient.td {
            return Err(SimError::InvalidScenario(format!(
                "scenario.duration = {} is shorter than 10 x patient.td = {}",
                self.duration,
                10.0 * self.patient.td
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(SimError::InvalidScenario(
                "scenario.noise_sd must be >= 0".into(),
            ));
        }
        if self
            .plant_x0
            .iter()
            .chain(self.estimate_x0.iter())
            .any(|c| !(*c >= 0.0 && c.is_finite()))
        {
            return Err(SimError::InvalidScenario(
                "initial concentrations must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn prefixed(section: &str, e: crate::error::ModelError) -> SimError {
    match e {
        crate::error::ModelError::InvalidParam { field, reason } => {
            crate::error::ModelError::InvalidParam {
                field: format!("{section}.{field}"),
                reason,
            }
            .into()
        }
        other => other.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    /// Infusion applied over `[t, t + ts)`, µg/kg/min.
    pub u: f64,
    pub x: [f64; 4],
    /// Controller-side state: EKF estimate, or the baseline's internal model.
    pub x_hat: [f64; 4],
    pub bis_true: f64,
    pub bis_meas: f64,
    pub setpoint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub ts: f64,
    pub controller: ControllerKind,
    pub rows: Vec<TraceRow>,
    /// Steps at which the controller failed and held its previous input.
    pub controller_failures: Vec<usize>,
}

pub const CSV_HEADER: [&str; 13] = [
    "t_s",
    "u_ugkgmin",
    "x1",
    "x2",
    "x3",
    "xe",
    "x1_hat",
    "x2_hat",
    "x3_hat",
    "xe_hat",
    "bis_true",
    "bis_meas",
    "setpoint",
];

impl SimTrace {
    pub fn duration(&self) -> f64 {
        self.rows.len() as f64 * self.ts
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            let fields = [
                r.t, r.u, r.x[0], r.x[1], r.x[2], r.x[3], r.x_hat[0], r.x_hat[1], r.x_hat[2],
                r.x_hat[3], r.bis_true, r.bis_meas, r.setpoint,
            ];
            w.write_record(fields.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads back a trace written by [`SimTrace::write_csv`].
    pub fn read_csv<R: std::io::Read>(
        input: R,
        ts: f64,
        controller: ControllerKind,
    ) -> Result<Self, csv::Error> {
        let mut rd = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().unwrap_or(f64::NAN))
                .collect();
            if v.len() != CSV_HEADER.len() {
                continue;
            }
            rows.push(TraceRow {
                t: v[0],
                u: v[1],
                x: [v[2], v[3], v[4], v[5]],
                x_hat: [v[6], v[7], v[8], v[9]],
                bis_true: v[10],
                bis_meas: v[11],
                setpoint: v[12],
            });
        }
        Ok(Self {
            ts,
            controller,
            rows,
            controller_failures: Vec::new(),
        })
    }
}

/// Runs one closed-loop experiment.
///
/// Per step: read the monitor, update the observer (state-space controller
/// only), compute the next infusion, record, advance the plant.
pub fn run_closed_loop(sc: &Scenario) -> Result<SimTrace, SimError> {
    sc.validate()?;
    let plant_model = discretize(&sc.patient, sc.ts)?;
    let design_model = discretize(&sc.nominal, sc.ts)?;
    let design_delay = design_model.delay_steps;

    let mut plant = PatientState::at(&sc.patient, sc.plant_x0, plant_model.delay_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);

    let mut ekf = EkfState::new(sc.estimate_x0, &sc.ekf, design_delay);
    let mut baseline = BaselineState::new(&sc.nominal, sc.estimate_x0, design_delay)?;

    let n = sc.steps();
    let mut rows = Vec::with_capacity(n);
    let mut failures = Vec::new();
    let mut u_prev = 0.0;

    for k in 0..n {
        let z = measure(&plant, sc.noise_sd, &mut rng);
        let (out, x_hat) = match sc.controller {
            ControllerKind::StateSpaceEkf => {
                if k > 0 {
                    ekf.predict(&design_model, u_prev);
                }
                ekf.update(&design_model, z, &sc.nominal, design_delay);
                let out = mpc_ss_step(&sc.mpc, &design_model, &sc.nominal, &ekf.x_hat, u_prev);
                (out, ekf.x_hat)
            }
            ControllerKind::Baseline => {
                let x_model = baseline.x_model;
                let out = mpc_baseline_step(
                    &sc.mpc,
                    &design_model,
                    &sc.nominal,
                    z,
                    &mut baseline,
                    u_prev,
                );
                (out, x_model)
            }
        };
        if out.qp_status.is_failure() {
            failures.push(k);
        }
        rows.push(TraceRow {
            t: k as f64 * sc.ts,
            u: out.u,
            x: plant.x.into(),
            x_hat: x_hat.into(),
            bis_true: bis_of(&sc.patient, plant.x[3])?,
            bis_meas: z,
            setpoint: sc.mpc.setpoint,
        });
        step(&plant_model, &sc.patient, &mut plant, out.u);
        u_prev = out.u;
    }

    Ok(SimTrace {
        ts: sc.ts,
        controller: sc.controller,
        rows,
        controller_failures: failures,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// First time after which BIS stays within ±5 of the setpoint; `inf` if never.
    pub settling_time: f64,
    /// Largest drop of BIS below the setpoint.
    pub undershoot: f64,
    /// Integrated infusion, µg/kg.
    pub total_drug: f64,
    /// Mean |BIS - setpoint| over the final 20% of the run.
    pub steady_state_error: f64,
    /// First time after which BIS stays within ±band; `inf` if never.
    pub band_entry_time: f64,
    pub band: f64,
    pub in_bound: bool,
    /// Why `in_bound` is false, when it is.
    pub reason: Option<String>,
}

impl RunMetrics {
    /// Flat `key = value` summary, one metric per line.
    pub fn to_summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "settling_time_s = {}\n",
            fmt_metric(self.settling_time)
        ));
        s.push_str(&format!(
            "undershoot_bis = {}\n",
            fmt_metric(self.undershoot)
        ));
        s.push_str(&format!(
            "total_drug_ugkg = {}\n",
            fmt_metric(self.total_drug)
        ));
        s.push_str(&format!(
            "steady_state_error_bis = {}\n",
            fmt_metric(self.steady_state_error)
        ));
        s.push_str(&format!(
            "band_entry_time_s = {}\n",
            fmt_metric(self.band_entry_time)
        ));
        s.push_str(&format!("band_bis = {}\n", fmt_metric(self.band)));
        s.push_str(&format!("in_bound = {}\n", self.in_bound));
        if let Some(r) = &self.reason {
            s.push_str(&format!("reason = {r:?}\n"));
        }
        s
    }
}

/// Formats a metric so the summary stays valid TOML (`inf` is a TOML float).
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else if v.is_nan() {
        "nan".into()
    } else {
        let s = v.to_string();
        if s.contains('.') || s.contains('e') {
            s
        } else {
            format!("{s}.0")
        }
    }
}

/// Earliest time after which `|bis - setpoint| <= band` for the rest of the trace.
fn entry_time(trace: &SimTrace, band: f64) -> f64 {
    let mut entry = None;
    for r in trace.rows.iter().rev() {
        if (r.bis_true - r.setpoint).abs() <= band {
            entry = Some(r.t);
        } else {
            break;
        }
    }
    entry.unwrap_or(f64::INFINITY)
}

pub fn compute_metrics(trace: &SimTrace, band: f64) -> RunMetrics {
    let rows = &trace.rows;
    if rows.is_empty() {
        return RunMetrics {
            settling_time: f64::INFINITY,
            undershoot: 0.0,
            total_drug: 0.0,
            steady_state_error: f64::INFINITY,
            band_entry_time: f64::INFINITY,
            band,
            in_bound: false,
            reason: Some("empty trace".into()),
        };
    }

    let settling_time = entry_time(trace, SETTLING_BAND);
    let band_entry_time = entry_time(trace, band);
    let undershoot = rows
        .iter()
        .map(|r| r.setpoint - r.bis_true)
        .fold(0.0f64, f64::max);
    let total_drug = rows
        .windows(2)
        .map(|w| 0.5 * (w[0].u + w[1].u) * (w[1].t - w[0].t) / 60.0)
        .sum();
    let tail_start = (rows.len() as f64 * 0.8).floor() as usize;
    let tail = &rows[tail_start.min(rows.len() - 1)..];
    let steady_state_error = tail
        .iter()
        .map(|r| (r.bis_true - r.setpoint).abs())
        .sum::<f64>()
        / tail.len() as f64;

    let half = 0.5 * trace.duration();
    let reason = if rows.len() < 5 {
        Some(format!(
            "trace of {} rows is shorter than the settling window",
            rows.len()
        ))
    } else if band_entry_time.is_infinite() {
        Some(format!("BIS never settles within ±{band} of the setpoint"))
    } else if band_entry_time > half {
        Some(format!(
            "BIS settles within ±{band} only at t = {band_entry_time} s, after half the run"
        ))
    } else if steady_state_error > SETTLING_BAND {
        Some(format!(
            "steady-state error {steady_state_error} exceeds {SETTLING_BAND}"
        ))
    } else {
        None
    };

    RunMetrics {
        settling_time,
        undershoot,
        total_drug,
        steady_state_error,
        band_entry_time,
        band,
        in_bound: reason.is_none(),
        reason,
    }
}

/// One probe of the delay search.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayProbe {
    pub patient_td: f64,
    pub in_bound: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayTolerance {
    pub controller: ControllerKind,
    /// Delay the controller was designed for.
    pub nominal_td: f64,
    /// Plant delay the search starts from.
    pub reference_td: f64,
    /// Largest tolerated increase of the plant delay over `reference_td`.
    pub increase: f64,
    /// True when the search stopped at the scenario's maximum admissible delay.
    pub capped: bool,
    /// Smallest plant delay, below `reference_td`, that is still tolerated.
    pub min_td: f64,
    /// Probes at `increase ± resolution` agree with a monotone boundary.
    pub boundary_verified: bool,
    pub probes: Vec<DelayProbe>,
}

impl DelayTolerance {
    /// Largest tolerated plant delay in absolute terms.
    pub fn max_td(&self) -> f64 {
        self.reference_td + self.increase
    }
}

fn probe(
    template: &Scenario,
    td: f64,
    band: f64,
    probes: &mut Vec<DelayProbe>,
) -> Result<bool, SimError> {
    if let Some(p) = probes.iter().find(|p| p.patient_td == td) {
        return Ok(p.in_bound);
    }
    let mut sc = template.clone();
    sc.patient.td = td;
    let trace = run_closed_loop(&sc)?;
    let ok = compute_metrics(&trace, band).in_bound && trace.controller_failures.is_empty();
    probes.push(DelayProbe {
        patient_td: td,
        in_bound: ok,
    });
    Ok(ok)
}

/// Largest increase of the true patient delay, with the controller still
/// designed for `template.nominal.td`, that keeps the run in bound.
///
/// Assumes `in_bound` is monotone in the delay: the search doubles the
/// increase until a probe fails, then bisects down to `resolution`.
pub fn max_tolerable_delay(
    template: &Scenario,
    band: f64,
    resolution: f64,
) -> Result<DelayTolerance, SimError> {
    template.validate()?;
    if resolution.is_nan() || resolution < template.ts {
        return Err(SimError::InvalidScenario(format!(
            "resolution {resolution} must be at least the sampling period {}",
            template.ts
        )));
    }
    let reference = template.patient.td;
    let ceiling = template.duration / 10.0;
    let mut probes = Vec::new();

    if !probe(template, reference, band, &mut probes)? {
        return Err(SimError::Mistuned(format!(
            "{} is out of bound with no delay mismatch (patient td = {reference} s)",
            template.controller
        )));
    }

    // Grow the bracket.
    let mut good = 0.0;
    let mut bad = None;
    let mut trial = (8.0 * resolution).min(ceiling - reference);
    while trial > good {
        if probe(template, reference + trial, band, &mut probes)? {
            good = trial;
            trial = (trial * 2.0).min(ceiling - reference);
        } else {
            bad = Some(trial);
            break;
        }
    }

    let capped = bad.is_none();
    if let Some(mut hi) = bad {
        while hi - good > resolution {
            let mid = 0.5 * (good + hi);
            if probe(template, reference + mid, band, &mut probes)? {
                good = mid;
            } else {
                hi = mid;
            }
        }
    }

    let mut boundary_verified = true;
    if !capped {
        boundary_verified &= !probe(template, reference + good + resolution, band, &mut probes)?;
    }
    if good >= resolution {
        boundary_verified &= probe(template, reference + good - resolution, band, &mut probes)?;
    }

    // Decreasing direction, down to zero delay.
    let min_td = if probe(template, 0.0, band, &mut probes)? {
        0.0
    } else {
        let (mut lo, mut hi) = (0.0, reference);
        while hi - lo > resolution {
            let mid = 0.5 * (lo + hi);
            if probe(template, mid, band, &mut probes)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };

    Ok(DelayTolerance {
        controller: template.controller,
        nominal_td: template.nominal.td,
        reference_td: reference,
        increase: good,
        capped,
        min_td,
        boundary_verified,
        probes,
    })
}
