//! Discrete Dynamic Movement Primitives.
//!
//! A primitive is a critically damped spring system pulled towards a goal,
//! plus a forcing term driven by an exponentially decaying phase variable.
//! The forcing term is a normalized mixture of Gaussian basis functions whose
//! weights are regressed from a single demonstration, so the learned shape
//! generalizes over start, goal and duration.
//!
//! ```text
//! tau * dz/dt = alpha_z * (beta_z * (g - y) - z) + f(x)
//! tau * dy/dt = z
//! tau * dx/dt = -alpha_x * x
//! f(x)        = (sum_i psi_i(x) w_i / sum_i psi_i(x)) * x * (g - y0)
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// JSON document version written by [`DmpModel::to_json`].
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Per-DOF amplitude `|g - y0|` below which the amplitude scaling is skipped.
pub const DEGENERATE_AMPLITUDE: f64 = 1e-6;

/// Rollouts must resolve the motion with at least this many steps per `tau`.
pub const MIN_STEPS_PER_TAU: f64 = 50.0;

/// Default rollout length as a multiple of `tau`. The forcing term decays
/// only as fast as the phase, so at 1.5 tau a fitted primitive can still sit
/// about 1e-3 per unit amplitude short of the goal; 2 tau leaves < 5e-4.
pub const DEFAULT_SETTLE_FACTOR: f64 = 2.0;

/// Default integration steps per `tau`.
pub const DEFAULT_STEPS_PER_TAU: f64 = 200.0;

// Normalizer floor for the basis mixture.
const MIN_ACTIVATION: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DmpError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("insufficient data: need at least 3 samples, got {0}")]
    InsufficientData(usize),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("step {dt} s too coarse for tau {tau} s (need dt <= tau/50)")]
    Resolution { dt: f64, tau: f64 },
    #[error("integration diverged at t = {0} s")]
    Divergence(f64),
    #[error("malformed model document: {0}")]
    Format(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// One trajectory sample: time in seconds, position in meters per DOF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub y: Vec<f64>,
}

impl Sample {
    pub fn new(t: f64, y: impl Into<Vec<f64>>) -> Self {
        Self { t, y: y.into() }
    }
}

/// Time-stamped multi-DOF positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    dof: usize,
    samples: Vec<Sample>,
}

impl Trajectory {
    /// Builds a trajectory, checking DOF consistency, finiteness and
    /// strictly increasing timestamps.
    pub fn new(samples: Vec<Sample>) -> Result<Self, DmpError> {
        let dof = samples.first().map(|s| s.y.len()).unwrap_or(0);
        let traj = Self { dof, samples };
        traj.validate()?;
        Ok(traj)
    }

    /// Convenience constructor for evenly described 1-DOF data.
    pub fn from_scalar(times: &[f64], values: &[f64]) -> Result<Self, DmpError> {
        if times.len() != values.len() {
            return Err(DmpError::InvalidTrajectory(format!(
                "{} timestamps but {} values",
                times.len(),
                values.len()
            )));
        }
        Self::new(
            times
                .iter()
                .zip(values)
                .map(|(&t, &y)| Sample::new(t, vec![y]))
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<(), DmpError> {
        if self.samples.is_empty() {
            return Ok(());
        }
        if self.dof == 0 {
            return Err(DmpError::InvalidTrajectory(
                "zero degrees of freedom".into(),
            ));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.y.len() != self.dof {
                return Err(DmpError::InvalidTrajectory(format!(
                    "sample {i} has {} DOF, expected {}",
                    s.y.len(),
                    self.dof
                )));
            }
            if !s.t.is_finite() || s.y.iter().any(|v| !v.is_finite()) {
                return Err(DmpError::InvalidTrajectory(format!(
                    "sample {i} is not finite"
                )));
            }
        }
        for (i, pair) in self.samples.windows(2).enumerate() {
            if pair[1].t <= pair[0].t {
                return Err(DmpError::InvalidTrajectory(format!(
                    "timestamps not strictly increasing at sample {} ({} after {})",
                    i + 1,
                    pair[1].t,
                    pair[0].t
                )));
            }
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn first(&self) -> Option<&Sample> {
        self.samples.first()
    }

    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    /// Time span between the first and last sample.
    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Linear interpolation at `t`, clamped to the end samples.
    pub fn position_at(&self, t: f64) -> Option<Vec<f64>> {
        let first = self.samples.first()?;
        let last = self.samples.last()?;
        if t <= first.t {
            return Some(first.y.clone());
        }
        if t >= last.t {
            return Some(last.y.clone());
        }
        let idx = self.samples.partition_point(|s| s.t <= t);
        let (a, b) = (&self.samples[idx - 1], &self.samples[idx]);
        let u = (t - a.t) / (b.t - a.t);
        Some(
            a.y.iter()
                .zip(&b.y)
                .map(|(ya, yb)| ya + u * (yb - ya))
                .collect(),
        )
    }

    /// Resamples onto `n` evenly spaced instants spanning the same interval.
    pub fn resample_uniform(&self, n: usize) -> Result<Self, DmpError> {
        if n < 2 || self.samples.len() < 2 {
            return Err(DmpError::InsufficientData(self.samples.len().min(n)));
        }
        let t0 = self.samples[0].t;
        let span = self.duration();
        let samples = (0..n)
            .map(|k| {
                let t = if k + 1 == n {
                    t0 + span
                } else {
                    t0 + span * k as f64 / (n - 1) as f64
                };
                Sample::new(t, self.position_at(t).expect("non-empty"))
            })
            .collect();
        Ok(Self {
            dof: self.dof,
            samples,
        })
    }

    /// Writes `t,y0,y1,...` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DmpError> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dof).map(|d| format!("y{d}")));
        out.write_record(&header)
            .map_err(|e| DmpError::Csv(e.to_string()))?;
        for s in &self.samples {
            let mut row = vec![s.t.to_string()];
            row.extend(s.y.iter().map(f64::to_string));
            out.write_record(&row)
                .map_err(|e| DmpError::Csv(e.to_string()))?;
        }
        out.flush().map_err(|e| DmpError::Csv(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Reads `t,y0,y1,...` CSV and validates the result.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DmpError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| DmpError::Csv(e.to_string()))?
            .clone();
        if header.get(0) != Some("t") {
            return Err(DmpError::Csv("first column must be `t`".into()));
        }
        for (d, name) in header.iter().skip(1).enumerate() {
            if name != format!("y{d}") {
                return Err(DmpError::Csv(format!(
                    "column {} should be `y{d}`, got `{name}`",
                    d + 1
                )));
            }
        }
        let mut samples = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| DmpError::Csv(e.to_string()))?;
            let values = record
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| DmpError::Csv(format!("`{f}`: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            samples.push(Sample::new(values[0], values[1..].to_vec()));
        }
        Self::new(samples)
    }
}

/// Hyperparameters for fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmpConfig {
    pub n_basis: usize,
    pub alpha_z: f64,
    pub beta_z: f64,
    pub alpha_x: f64,
    pub regularization: f64,
}

impl Default for DmpConfig {
    fn default() -> Self {
        Self {
            n_basis: 25,
            alpha_z: 25.0,
            beta_z: 6.25,
            alpha_x: 4.0,
            regularization: 1e-8,
        }
    }
}

impl DmpConfig {
    /// Default gains with `n_basis` kernels.
    pub fn with_basis(n_basis: usize) -> Self {
        Self {
            n_basis,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DmpError> {
        if self.n_basis < 2 {
            return Err(DmpError::InvalidParameter(format!(
                "n_basis must be >= 2, got {}",
                self.n_basis
            )));
        }
        for (name, v) in [
            ("alpha_z", self.alpha_z),
            ("beta_z", self.beta_z),
            ("alpha_x", self.alpha_x),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DmpError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(DmpError::InvalidParameter(format!(
                "regularization must be >= 0, got {}",
                self.regularization
            )));
        }
        Ok(())
    }
}

/// A fitted primitive. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmpModel {
    /// `weights[dof][basis]`.
    pub weights: Vec<Vec<f64>>,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    pub alpha_z: f64,
    pub beta_z: f64,
    pub alpha_x: f64,
    pub tau: f64,
    pub y0: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    version: u32,
    #[serde(flatten)]
    model: DmpModel,
}

/// Numerical scheme used by [`DmpModel::rollout_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

/// Full set of rollout parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSpec {
    pub y0: Vec<f64>,
    pub goal: Vec<f64>,
    pub tau: f64,
    pub dt: f64,
    pub settle_factor: f64,
    pub integrator: Integrator,
}

/// `x(t) = exp(-alpha_x * t / tau)`.
pub fn canonical_phase(t: f64, tau: f64, alpha_x: f64) -> Result<f64, DmpError> {
    if !(tau > 0.0) {
        return Err(DmpError::InvalidParameter(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if !(alpha_x > 0.0) {
        return Err(DmpError::InvalidParameter(format!(
            "alpha_x must be positive, got {alpha_x}"
        )));
    }
    if !(t >= 0.0) {
        return Err(DmpError::InvalidParameter(format!(
            "t must be non-negative, got {t}"
        )));
    }
    Ok((-alpha_x * t / tau).exp())
}

/// Basis centers spaced uniformly in time, hence exponentially in phase,
/// and widths from the spacing to the next center.
pub fn basis_layout(n_basis: usize, alpha_x: f64) -> (Vec<f64>, Vec<f64>) {
    let centers: Vec<f64> = (0..n_basis)
        .map(|i| (-alpha_x * i as f64 / (n_basis - 1) as f64).exp())
        .collect();
    let mut widths: Vec<f64> = centers
        .windows(2)
        .map(|c| 1.0 / (2.0 * (c[1] - c[0]).powi(2)))
        .collect();
    let last = *widths.last().expect("n_basis >= 2");
    widths.push(last);
    (centers, widths)
}

fn central_differences(values: &[f64], dt: f64) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|k| match k {
            0 => (values[1] - values[0]) / dt,
            k if k == n - 1 => (values[n - 1] - values[n - 2]) / dt,
            k => (values[k + 1] - values[k - 1]) / (2.0 * dt),
        })
        .collect()
}

/// Amplitude factor applied to the forcing term for one DOF. DOFs whose
/// fitted amplitude was degenerate were regressed with unit scaling, which is
/// kept unless the requested amplitude is itself non-degenerate.
fn amplitude_scale(fitted: f64, requested: f64) -> f64 {
    if fitted.abs() < DEGENERATE_AMPLITUDE && requested.abs() < DEGENERATE_AMPLITUDE {
        1.0
    } else {
        requested
    }
}

/// Fits a primitive to one demonstration by locally weighted ridge regression.
pub fn fit_dmp(demo: &Trajectory, config: &DmpConfig) -> Result<DmpModel, DmpError> {
    config.validate()?;
    demo.validate()?;
    if demo.len() < 3 {
        return Err(DmpError::InsufficientData(demo.len()));
    }
    let tau = demo.duration();
    if !(tau > 0.0) {
        return Err(DmpError::InvalidTrajectory("zero duration".into()));
    }

    let uniform = demo.resample_uniform(demo.len())?;
    let n = uniform.len();
    let dt = tau / (n - 1) as f64;
    let t0 = uniform.samples[0].t;
    let phases: Vec<f64> = uniform
        .samples
        .iter()
        .map(|s| (-config.alpha_x * (s.t - t0) / tau).exp())
        .collect();
    let (centers, widths) = basis_layout(config.n_basis, config.alpha_x);

    let y0 = uniform.samples[0].y.clone();
    let g = uniform.samples[n - 1].y.clone();
    let mut weights = Vec::with_capacity(demo.dof());

    for d in 0..demo.dof() {
        let y: Vec<f64> = uniform.samples.iter().map(|s| s.y[d]).collect();
        let yd = central_differences(&y, dt);
        let ydd = central_differences(&yd, dt);
        let amplitude = g[d] - y0[d];
        let scale = if amplitude.abs() < DEGENERATE_AMPLITUDE {
            1.0
        } else {
            amplitude
        };

        let (mut sf, mut ss) = (vec![0.0; config.n_basis], vec![0.0; config.n_basis]);
        for k in 0..n {
            let f_target =
                tau * tau * ydd[k] - config.alpha_z * (config.beta_z * (g[d] - y[k]) - tau * yd[k]);
            let s = phases[k] * scale;
            for i in 0..config.n_basis {
                let psi = (-widths[i] * (phases[k] - centers[i]).powi(2)).exp();
                sf[i] += psi * s * f_target;
                ss[i] += psi * s * s;
            }
        }
        weights.push(
            sf.iter()
                .zip(&ss)
                .map(|(num, den)| {
                    let den = den + config.regularization;
                    if den > 0.0 {
                        num / den
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
    }

    Ok(DmpModel {
        weights,
        centers,
        widths,
        alpha_z: config.alpha_z,
        beta_z: config.beta_z,
        alpha_x: config.alpha_x,
        tau,
        y0,
        g,
    })
}

impl DmpModel {
    pub fn dof(&self) -> usize {
        self.y0.len()
    }

    pub fn n_basis(&self) -> usize {
        self.centers.len()
    }

    /// Checks the structural invariants of a model, e.g. after deserializing.
    pub fn validate(&self) -> Result<(), DmpError> {
        let n = self.centers.len();
        if n < 2 {
            return Err(DmpError::Format(format!(
                "need at least 2 basis functions, got {n}"
            )));
        }
        if self.widths.len() != n {
            return Err(DmpError::Format(
                "widths and centers differ in length".into(),
            ));
        }
        if self.centers.windows(2).any(|c| c[1] >= c[0]) {
            return Err(DmpError::Format(
                "centers must be strictly decreasing".into(),
            ));
        }
        if self.widths.iter().any(|h| !(*h > 0.0)) {
            return Err(DmpError::Format("widths must be positive".into()));
        }
        for (name, v) in [
            ("alpha_z", self.alpha_z),
            ("beta_z", self.beta_z),
            ("alpha_x", self.alpha_x),
            ("tau", self.tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DmpError::Format(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.y0.is_empty()
            || self.g.len() != self.y0.len()
            || self.weights.len() != self.y0.len()
        {
            return Err(DmpError::Format(
                "y0, g and weights must share one DOF count".into(),
            ));
        }
        if self.weights.iter().any(|w| w.len() != n) {
            return Err(DmpError::Format(
                "every weight vector needs one entry per basis".into(),
            ));
        }
        Ok(())
    }

    fn mixture(&self, x: f64, dof: usize) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for ((c, h), w) in self
            .centers
            .iter()
            .zip(&self.widths)
            .zip(&self.weights[dof])
        {
            let psi = (-h * (x - c).powi(2)).exp();
            num += psi * w;
            den += psi;
        }
        if den < MIN_ACTIVATION {
            0.0
        } else {
            num / den
        }
    }

    /// Forcing term at phase `x` for one DOF, using the recorded amplitude.
    pub fn forcing_term(&self, x: f64, dof: usize) -> f64 {
        self.mixture(x, dof) * x * (self.g[dof] - self.y0[dof])
    }

    /// Rollout with the default settle factor and RK4.
    pub fn rollout(
        &self,
        y0: &[f64],
        goal: &[f64],
        tau: f64,
        dt: f64,
    ) -> Result<Trajectory, DmpError> {
        self.rollout_with(&RolloutSpec {
            y0: y0.to_vec(),
            goal: goal.to_vec(),
            tau,
            dt,
            settle_factor: DEFAULT_SETTLE_FACTOR,
            integrator: Integrator::Rk4,
        })
    }

    /// Rollout on the recorded start, goal and duration.
    pub fn reproduce(&self) -> Result<Trajectory, DmpError> {
        self.rollout(
            &self.y0,
            &self.g,
            self.tau,
            self.tau / DEFAULT_STEPS_PER_TAU,
        )
    }

    /// Integrates the primitive from `spec.y0` towards `spec.goal` for
    /// `spec.settle_factor * spec.tau` seconds. Starts at rest.
    pub fn rollout_with(&self, spec: &RolloutSpec) -> Result<Trajectory, DmpError> {
        let dof = self.dof();
        if spec.y0.len() != dof || spec.goal.len() != dof {
            return Err(DmpError::InvalidParameter(format!(
                "start/goal must have {dof} DOF, got {}/{}",
                spec.y0.len(),
                spec.goal.len()
            )));
        }
        if !(spec.tau > 0.0 && spec.tau.is_finite()) {
            return Err(DmpError::InvalidParameter(format!(
                "tau must be positive, got {}",
                spec.tau
            )));
        }
        if !(spec.dt > 0.0) {
            return Err(DmpError::InvalidParameter(format!(
                "dt must be positive, got {}",
                spec.dt
            )));
        }
        if spec.dt > spec.tau / MIN_STEPS_PER_TAU * (1.0 + 1e-12) {
            return Err(DmpError::Resolution {
                dt: spec.dt,
                tau: spec.tau,
            });
        }
        if !(spec.settle_factor > 0.0) {
            return Err(DmpError::InvalidParameter(
                "settle_factor must be positive".into(),
            ));
        }

        let scales: Vec<f64> = (0..dof)
            .map(|d| amplitude_scale(self.g[d] - self.y0[d], spec.goal[d] - spec.y0[d]))
            .collect();
        let system = System {
            model: self,
            goal: &spec.goal,
            scales: &scales,
            tau: spec.tau,
        };

        let horizon = spec.settle_factor * spec.tau;
        let steps = ((horizon / spec.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = horizon / steps as f64;

        // state = [x, y_0..y_d, z_0..z_d]
        let mut state = vec![0.0; 1 + 2 * dof];
        state[0] = 1.0;
        state[1..=dof].copy_from_slice(&spec.y0);
        let mut samples = Vec::with_capacity(steps + 1);
        samples.push(Sample::new(0.0, spec.y0.clone()));

        for k in 1..=steps {
            match spec.integrator {
                Integrator::Euler => system.euler_step(&mut state, h),
                Integrator::Rk4 => system.rk4_step(&mut state, h),
            }
            let t = k as f64 * h;
            if state.iter().any(|v| !v.is_finite()) {
                return Err(DmpError::Divergence(t));
            }
            samples.push(Sample::new(t, state[1..=dof].to_vec()));
        }
        Ok(Trajectory { dof, samples })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelDocument {
            version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DmpError> {
        let doc: ModelDocument =
            serde_json::from_str(text).map_err(|e| DmpError::Format(e.to_string()))?;
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(DmpError::Format(format!(
                "unsupported model version {}",
                doc.version
            )));
        }
        doc.model.validate()?;
        Ok(doc.model)
    }
}

struct System<'a> {
    model: &'a DmpModel,
    goal: &'a [f64],
    scales: &'a [f64],
    tau: f64,
}

impl System<'_> {
    fn derivative(&self, state: &[f64], out: &mut [f64]) {
        let dof = self.goal.len();
        let x = state[0];
        let m = self.model;
        out[0] = -m.alpha_x * x / self.tau;
        for d in 0..dof {
            let y = state[1 + d];
            let z = state[1 + dof + d];
            let f = m.mixture(x, d) * x * self.scales[d];
            out[1 + d] = z / self.tau;
            out[1 + dof + d] = (m.alpha_z * (m.beta_z * (self.goal[d] - y) - z) + f) / self.tau;
        }
    }

    fn euler_step(&self, state: &mut [f64], h: f64) {
        let mut k = vec![0.0; state.len()];
        self.derivative(state, &mut k);
        state.iter_mut().zip(&k).for_each(|(s, d)| *s += h * d);
    }

    fn rk4_step(&self, state: &mut [f64], h: f64) {
        let n = state.len();
        let (mut k1, mut k2, mut k3, mut k4) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut tmp = vec![0.0; n];
        self.derivative(state, &mut k1);
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * h * k1[i];
        }
        self.derivative(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * h * k2[i];
        }
        self.derivative(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = state[i] + h * k3[i];
        }
        self.derivative(&tmp, &mut k4);
        for i in 0..n {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}
