//! Closed-loop simulation of a policy: fixed-step integration, scheduled
//! observation switches, instantaneous displacement perturbations and
//! Lyapunov monitoring.
//!
//! Step `k` at `t_k = k·dt` runs in this order: apply any due observation
//! switch, apply any due perturbation, record `(x, v, V)`, check
//! convergence, then integrate to `k + 1`. The observation is held fixed
//! within a step.

use std::borrow::Cow;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::linalg::norm;
use crate::policy::{CompiledPolicy, PolicyParams};
use crate::state::{Observation, StateVector};

/// `‖e‖` below which a step counts toward convergence.
pub const CONVERGENCE_RADIUS: f64 = 1e-4;
/// Consecutive steps inside the radius needed to declare convergence.
pub const CONVERGENCE_WINDOW: usize = 10;
/// Increase of `V` between consecutive steps counted as a violation.
pub const VIOLATION_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

impl std::str::FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            _ => Err(Error::Validation(format!("unknown integrator `{s}`; expected euler or rk4"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledObservation {
    pub time: f64,
    pub observation: Observation,
}

/// Source of the non-controllable state during a rollout.
#[derive(Clone, Debug, PartialEq)]
pub enum ObservationProvider {
    /// One payload for the whole rollout.
    Static(Observation),
    /// Keeps the initial state's payload until the first switch; each entry
    /// takes over at its time.
    Scheduled(Vec<ScheduledObservation>),
}

impl ObservationProvider {
    pub fn scheduled(switches: Vec<ScheduledObservation>) -> Result<Self> {
        for w in switches.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::Validation(format!(
                    "observation switch times must be strictly increasing ({} then {})",
                    w[0].time, w[1].time
                )));
            }
        }
        if let Some(s) = switches.iter().find(|s| !(s.time >= 0.0 && s.time.is_finite())) {
            return Err(Error::Validation(format!("invalid switch time {}", s.time)));
        }
        Ok(ObservationProvider::Scheduled(switches))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationEvent {
    pub time: f64,
    pub delta: Vec<f64>,
}

impl PerturbationEvent {
    pub fn new(time: f64, delta: Vec<f64>) -> Result<Self> {
        if !(time >= 0.0 && time.is_finite()) {
            return Err(Error::Validation(format!("perturbation time must be >= 0, got {time}")));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("perturbation delta must be finite".into()));
        }
        Ok(Self { time, delta })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub dt: f64,
    pub horizon: f64,
    pub method: Integrator,
    /// Maximum commanded speed; longer velocities are rescaled, keeping
    /// their direction.
    pub clamp: Option<f64>,
    /// End early once converged and no events are pending.
    pub stop_on_convergence: bool,
}

impl RolloutOptions {
    pub fn new(dt: f64, horizon: f64) -> Self {
        Self {
            dt,
            horizon,
            method: Integrator::Rk4,
            clamp: None,
            stop_on_convergence: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Validation(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Validation(format!("horizon must be positive, got {}", self.horizon)));
        }
        if let Some(c) = self.clamp {
            if !(c > 0.0) {
                return Err(Error::Validation(format!("clamp must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Number of integration steps; the record holds one more sample.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Perturbation { delta: Vec<f64> },
    ObservationSwitch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedEvent {
    pub step: usize,
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// One recorded step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub t: f64,
    pub xc: Vec<f64>,
    pub v: Vec<f64>,
    #[serde(rename = "V")]
    pub lyapunov: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub lyapunov: Vec<f64>,
    pub events: Vec<AppliedEvent>,
    pub converged: bool,
    pub convergence_time: Option<f64>,
}

impl RolloutRecord {
    fn empty(dt: f64) -> Self {
        Self {
            dt,
            times: Vec::new(),
            states: Vec::new(),
            velocities: Vec::new(),
            lyapunov: Vec::new(),
            events: Vec::new(),
            converged: false,
            convergence_time: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    fn push(&mut self, s: StepSample) {
        self.times.push(s.t);
        self.states.push(s.xc);
        self.velocities.push(s.v);
        self.lyapunov.push(s.lyapunov);
    }

    /// `t,xc_0..,v_0..,V`.
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for k in 0..d {
            write!(out, ",xc_{k}").unwrap();
        }
        for k in 0..d {
            write!(out, ",v_{k}").unwrap();
        }
        out.push_str(",V\n");
        for i in 0..self.len() {
            write!(out, "{}", self.times[i]).unwrap();
            for x in self.states[i].iter().chain(&self.velocities[i]) {
                write!(out, ",{x}").unwrap();
            }
            writeln!(out, ",{}", self.lyapunov[i]).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

/// Steppable closed-loop simulator. Backs [`integrate`] and live rollouts
/// that receive commands between steps.
#[derive(Clone, Debug)]
pub struct Simulator<'a> {
    policy: Cow<'a, CompiledPolicy>,
    x: Vec<f64>,
    observation: Observation,
    features: Vec<f64>,
    step: usize,
    dt: f64,
    method: Integrator,
    clamp: Option<f64>,
    streak: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(
        policy: &'a CompiledPolicy,
        x0: &StateVector,
        dt: f64,
        method: Integrator,
        clamp: Option<f64>,
    ) -> Result<Self> {
        Self::build(Cow::Borrowed(policy), x0, dt, method, clamp)
    }

    fn build(
        policy: Cow<'a, CompiledPolicy>,
        x0: &StateVector,
        dt: f64,
        method: Integrator,
        clamp: Option<f64>,
    ) -> Result<Self> {
        RolloutOptions { dt, horizon: dt, method, clamp, stop_on_convergence: false }.validate()?;
        x0.validate()?;
        if x0.d_c() != policy.d_c() {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: policy.d_c(),
                found: x0.d_c(),
            });
        }
        let features = policy.embed(&x0.observation)?;
        Ok(Self {
            policy,
            x: x0.controllable.clone(),
            observation: x0.observation.clone(),
            features,
            step: 0,
            dt,
            method,
            clamp,
            streak: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn controllable(&self) -> &[f64] {
        &self.x
    }

    pub fn observation(&self) -> &Observation {
        &self.observation
    }

    pub fn policy(&self) -> &CompiledPolicy {
        &self.policy
    }

    pub fn error_norm(&self) -> f64 {
        norm(&self.policy.error(&self.x))
    }

    pub fn set_observation(&mut self, obs: Observation) -> Result<()> {
        self.features = self.policy.embed(&obs)?;
        self.observation = obs;
        Ok(())
    }

    pub fn perturb(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.x.len() {
            return Err(Error::DimensionMismatch {
                context: "perturbation delta",
                expected: self.x.len(),
                found: delta.len(),
            });
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("perturbation delta must be finite".into()));
        }
        self.x.iter_mut().zip(delta).for_each(|(x, d)| *x += d);
        self.streak = 0;
        Ok(())
    }

    fn field(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.policy.velocity_from_features(x, &self.features);
        if let Some(max) = self.clamp {
            let n = norm(&v);
            if n > max {
                v.iter_mut().for_each(|c| *c *= max / n);
            }
        }
        v
    }

    /// Current `(t, x, v, V)`.
    pub fn sample(&self) -> StepSample {
        let e = self.policy.error(&self.x);
        StepSample {
            t: self.time(),
            xc: self.x.clone(),
            v: self.field(&self.x),
            lyapunov: e.iter().map(|v| v * v).sum(),
        }
    }

    /// Updates the convergence streak from the current state; true once the
    /// state has stayed inside the radius for the full window.
    pub fn observe_convergence(&mut self) -> bool {
        if self.error_norm() < CONVERGENCE_RADIUS {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.streak >= CONVERGENCE_WINDOW
    }

    /// Time at which the current convergence window started.
    pub fn window_start(&self) -> Option<f64> {
        (self.streak > 0).then(|| (self.step + 1 - self.streak) as f64 * self.dt)
    }

    /// Integrates one step.
    pub fn advance(&mut self) -> Result<()> {
        let h = self.dt;
        let axpy = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> {
            x.iter().zip(k).map(|(a, b)| a + s * b).collect()
        };
        let next = match self.method {
            Integrator::Euler => axpy(&self.x, &self.field(&self.x), h),
            Integrator::Rk4 => {
                let k1 = self.field(&self.x);
                let k2 = self.field(&axpy(&self.x, &k1, h / 2.0));
                let k3 = self.field(&axpy(&self.x, &k2, h / 2.0));
                let k4 = self.field(&axpy(&self.x, &k3, h));
                self.x
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                    .collect()
            }
        };
        self.step += 1;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: self.step });
        }
        self.x = next;
        Ok(())
    }
}

impl Simulator<'static> {
    pub fn owned(
        policy: CompiledPolicy,
        x0: &StateVector,
        dt: f64,
        method: Integrator,
        clamp: Option<f64>,
    ) -> Result<Self> {
        Self::build(Cow::Owned(policy), x0, dt, method, clamp)
    }
}

pub fn integrate(
    params: &PolicyParams,
    x0: &StateVector,
    provider: &ObservationProvider,
    perturbations: &[PerturbationEvent],
    options: &RolloutOptions,
) -> Result<RolloutRecord> {
    integrate_compiled(&CompiledPolicy::new(params)?, x0, provider, perturbations, options)
}

/// [`integrate`] against an already compiled policy.
pub fn integrate_compiled(
    policy: &CompiledPolicy,
    x0: &StateVector,
    provider: &ObservationProvider,
    perturbations: &[PerturbationEvent],
    options: &RolloutOptions,
) -> Result<RolloutRecord> {
    options.validate()?;
    let start = match provider {
        ObservationProvider::Static(obs) => StateVector {
            controllable: x0.controllable.clone(),
            observation: obs.clone(),
        },
        ObservationProvider::Scheduled(_) => x0.clone(),
    };
    let mut sim = Simulator::new(policy, &start, options.dt, options.method, options.clamp)?;
    let switches: &[ScheduledObservation] = match provider {
        ObservationProvider::Static(_) => &[],
        ObservationProvider::Scheduled(s) => s,
    };
    for s in switches {
        if !s.observation.same_layout(&start.observation) {
            return Err(Error::ObservationShape(format!(
                "observation scheduled at t = {} has a different layout than the initial one",
                s.time
            )));
        }
    }
    let mut perturbations: Vec<&PerturbationEvent> = perturbations.iter().collect();
    perturbations.sort_by(|a, b| a.time.total_cmp(&b.time));
    for p in &perturbations {
        PerturbationEvent::new(p.time, p.delta.clone())?;
        if p.delta.len() != policy.d_c() {
            return Err(Error::DimensionMismatch {
                context: "perturbation delta",
                expected: policy.d_c(),
                found: p.delta.len(),
            });
        }
    }

    // Event times within this slack of a step time fire at that step.
    let slack = options.dt * 1e-9;
    let steps = options.steps();
    let mut next_switch = 0;
    let mut next_perturb = 0;
    let mut record = RolloutRecord::empty(options.dt);
    for k in 0..=steps {
        let t = sim.time();
        while next_switch < switches.len() && switches[next_switch].time <= t + slack {
            sim.set_observation(switches[next_switch].observation.clone())?;
            record.events.push(AppliedEvent { step: k, time: t, kind: EventKind::ObservationSwitch });
            next_switch += 1;
        }
        while next_perturb < perturbations.len() && perturbations[next_perturb].time <= t + slack {
            let delta = &perturbations[next_perturb].delta;
            sim.perturb(delta)?;
            record.events.push(AppliedEvent {
                step: k,
                time: t,
                kind: EventKind::Perturbation { delta: delta.clone() },
            });
            next_perturb += 1;
        }
        record.push(sim.sample());
        let converged = sim.observe_convergence();
        let pending = next_switch < switches.len() || next_perturb < perturbations.len();
        if converged && options.stop_on_convergence && !pending {
            break;
        }
        if k < steps {
            sim.advance()?;
        }
    }
    if sim.streak >= CONVERGENCE_WINDOW {
        record.converged = true;
        record.convergence_time = sim.window_start();
    }
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStats {
    pub final_error: f64,
    pub converged: bool,
    pub convergence_time: Option<f64>,
    pub lyapunov_violations: usize,
}

/// Final error, convergence and the number of steps where `V` rose by more
/// than [`VIOLATION_TOLERANCE`], not counting steps where an event fired.
pub fn convergence_stats(record: &RolloutRecord) -> Result<ConvergenceStats> {
    let last = *record
        .lyapunov
        .last()
        .ok_or_else(|| Error::Validation("empty rollout record".into()))?;
    let event_steps: std::collections::BTreeSet<usize> = record.events.iter().map(|e| e.step).collect();
    let lyapunov_violations = record
        .lyapunov
        .windows(2)
        .enumerate()
        .filter(|(i, w)| !event_steps.contains(&(i + 1)) && w[1] - w[0] > VIOLATION_TOLERANCE)
        .count();
    Ok(ConvergenceStats {
        final_error: last.sqrt(),
        converged: record.converged,
        convergence_time: record.convergence_time,
        lyapunov_violations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub x: [f64; 2],
    pub v: [f64; 2],
}

/// Policy velocities on a regular 2-D grid. Samples are row-major: the
/// second coordinate selects the row, the first the column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub bounds: [(f64, f64); 2],
    pub resolution: [usize; 2],
    pub samples: Vec<FieldSample>,
}

impl FieldGrid {
    /// `x0,x1,v0,v1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x0,x1,v0,v1\n");
        for s in &self.samples {
            writeln!(out, "{},{},{},{}", s.x[0], s.x[1], s.v[0], s.v[1]).unwrap();
        }
        out
    }
}

pub fn vector_field_grid(
    params: &PolicyParams,
    obs: &Observation,
    bounds: [(f64, f64); 2],
    resolution: [usize; 2],
    exec: Execution,
) -> Result<FieldGrid> {
    if params.d_c() != 2 {
        return Err(Error::Validation(format!(
            "vector field grids need d_c = 2, policy has d_c = {}",
            params.d_c()
        )));
    }
    if resolution.iter().any(|&r| r < 2) {
        return Err(Error::Validation(format!("grid resolution must be >= 2, got {resolution:?}")));
    }
    if bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
        return Err(Error::Validation(format!("grid bounds must satisfy lo < hi, got {bounds:?}")));
    }
    let policy = CompiledPolicy::new(params)?;
    let features = policy.embed(obs)?;
    let [nx, ny] = resolution;
    let coord = |k: usize, i: usize, n: usize| {
        let (lo, hi) = bounds[k];
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    };
    let samples = exec::map_range(exec, nx * ny, |idx| {
        let x = [coord(0, idx % nx, nx), coord(1, idx / nx, ny)];
        let v = policy.velocity_from_features(&x, &features);
        FieldSample { x, v: [v[0], v[1]] }
    });
    Ok(FieldGrid { bounds, resolution, samples })
}
