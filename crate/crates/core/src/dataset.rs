//! Demonstrations: state-only trajectories, finite-difference velocity
//! targets, the attractor, and the on-disk JSON format.
//!
//! File layout (UTF-8 JSON, version 1):
//!
//! ```json
//! {"version":1,"dt":0.01,"d_c":2,"obs_kind":"vector","d_nc":3,
//!  "trajectories":[{"states":[{"xc":[0.0,0.0],"xnc":[1.0,0.0,0.0]}, ...]}]}
//! ```
//!
//! Image datasets use `"obs_kind":"image"`, `"image_shape":[H,W]` and per-state
//! `"xnc_image"`: base64 of the row-major pixels as little-endian `f64`.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::state::{Image, ObsKind, Observation, StateVector};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    dt: f64,
    states: Vec<StateVector>,
}

impl Trajectory {
    pub fn new(dt: f64, states: Vec<StateVector>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Validation(format!("dt must be positive, got {dt}")));
        }
        if states.len() < 3 {
            return Err(Error::Validation(format!(
                "trajectory has M = {} states; need M ≥ 3",
                states.len()
            )));
        }
        let first = &states[0];
        for (t, s) in states.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::Validation(format!("state {t}: {e}")))?;
            if s.d_c() != first.d_c() {
                return Err(Error::Validation(format!(
                    "state {t} has d_c = {}, expected {}",
                    s.d_c(),
                    first.d_c()
                )));
            }
            if !s.observation.same_layout(&first.observation) {
                return Err(Error::Validation(format!(
                    "state {t} has a different observation layout than state 0"
                )));
            }
        }
        Ok(Self { dt, states })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn d_c(&self) -> usize {
        self.states[0].d_c()
    }

    pub fn obs_kind(&self) -> ObsKind {
        self.states[0].observation.kind()
    }

    /// `(M − 1)·dt`.
    pub fn duration(&self) -> f64 {
        (self.states.len() - 1) as f64 * self.dt
    }

    pub fn initial(&self) -> &StateVector {
        &self.states[0]
    }

    pub fn final_controllable(&self) -> &[f64] {
        &self.states[self.states.len() - 1].controllable
    }

    /// Axis-aligned bounding-box diagonal of the controllable path.
    pub fn bbox_diagonal(&self) -> f64 {
        let d = self.d_c();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for s in &self.states {
            for k in 0..d {
                lo[k] = lo[k].min(s.controllable[k]);
                hi[k] = hi[k].max(s.controllable[k]);
            }
        }
        lo.iter().zip(&hi).map(|(l, h)| (h - l) * (h - l)).sum::<f64>().sqrt()
    }

    /// Centered moving average of the controllable part over an odd window,
    /// shrinking at the ends. Observations are kept as-is.
    pub fn smoothed(&self, window: usize) -> Result<Self> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::Validation(format!(
                "smoothing window must be odd and positive, got {window}"
            )));
        }
        let half = window / 2;
        let m = self.states.len();
        let states = (0..m)
            .map(|t| {
                let r = half.min(t).min(m - 1 - t);
                let span = &self.states[t - r..=t + r];
                let mut xc = vec![0.0; self.d_c()];
                for s in span {
                    for (a, b) in xc.iter_mut().zip(&s.controllable) {
                        *a += b;
                    }
                }
                xc.iter_mut().for_each(|v| *v /= span.len() as f64);
                StateVector {
                    controllable: xc,
                    observation: self.states[t].observation.clone(),
                }
            })
            .collect();
        Self::new(self.dt, states)
    }
}

/// Velocity targets from positions: central differences inside, one-sided
/// differences at both ends.
pub fn estimate_velocities(traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let dt = traj.dt;
    if !(dt > 0.0) {
        return Err(Error::Validation(format!("dt must be positive, got {dt}")));
    }
    let x = &traj.states;
    let m = x.len();
    let diff = |a: &[f64], b: &[f64], h: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(p, q)| (p - q) / h).collect()
    };
    let mut v = Vec::with_capacity(m);
    v.push(diff(&x[1].controllable, &x[0].controllable, dt));
    for t in 1..m - 1 {
        v.push(diff(&x[t + 1].controllable, &x[t - 1].controllable, 2.0 * dt));
    }
    v.push(diff(&x[m - 1].controllable, &x[m - 2].controllable, dt));
    Ok(v)
}

/// Mean of the final controllable state over all trajectories.
pub fn compute_attractor(trajs: &[Trajectory]) -> Result<Vec<f64>> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::Validation("cannot compute an attractor from no trajectories".into()))?;
    let d = first.d_c();
    let mut acc = vec![0.0; d];
    for t in trajs {
        if t.d_c() != d {
            return Err(Error::Validation("trajectories disagree on d_c".into()));
        }
        for (a, x) in acc.iter_mut().zip(t.final_controllable()) {
            *a += x;
        }
    }
    let k = trajs.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub state: StateVector,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    samples: Vec<Sample>,
    attractor: Vec<f64>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let attractor = compute_attractor(&trajectories)?;
        let first = &trajectories[0];
        for (i, t) in trajectories.iter().enumerate() {
            if !t.initial().observation.same_layout(&first.initial().observation) {
                return Err(Error::Validation(format!(
                    "trajectory {i} has a different observation layout than trajectory 0"
                )));
            }
        }
        let mut samples = Vec::new();
        for t in &trajectories {
            for (s, v) in t.states.iter().zip(estimate_velocities(t)?) {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Validation("non-finite velocity target".into()));
                }
                samples.push(Sample {
                    state: s.clone(),
                    target: v,
                });
            }
        }
        Ok(Self {
            trajectories,
            samples,
            attractor,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_trajectories(path)?)
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn attractor(&self) -> &[f64] {
        &self.attractor
    }

    pub fn d_c(&self) -> usize {
        self.attractor.len()
    }

    pub fn obs_kind(&self) -> ObsKind {
        self.trajectories[0].obs_kind()
    }

    /// A representative observation (of the first state).
    pub fn observation_template(&self) -> &Observation {
        &self.trajectories[0].initial().observation
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> Result<String> {
        let json = trajectories_to_json(&self.trajectories)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }
}

/// Per-dimension affine standardization of the controllable state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn fit(dataset: &Dataset) -> Self {
        let d = dataset.d_c();
        let n = dataset.samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in &dataset.samples {
            for (m, x) in mean.iter_mut().zip(&s.state.controllable) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for s in &dataset.samples {
            for k in 0..d {
                let dx = s.state.controllable[k] - mean[k];
                var[k] += dx * dx / n;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    pub fn apply_to(&self, dataset: &Dataset) -> Result<Dataset> {
        let trajs = dataset
            .trajectories
            .iter()
            .map(|t| {
                let states = t
                    .states
                    .iter()
                    .map(|s| StateVector {
                        controllable: self.apply(&s.controllable),
                        observation: s.observation.clone(),
                    })
                    .collect();
                Trajectory::new(t.dt, states)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(trajs)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    version: u64,
    dt: f64,
    d_c: usize,
    obs_kind: ObsKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d_nc: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_shape: Option<[usize; 2]>,
    trajectories: Vec<TrajectoryFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryFile {
    states: Vec<StateFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    xc: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xnc: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xnc_image: Option<String>,
}

pub fn encode_f64_base64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(bytes)
}

pub fn decode_f64_base64(s: &str) -> Result<Vec<f64>> {
    let bytes = BASE64
        .decode(s)
        .map_err(|e| Error::Parse(format!("invalid base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse(format!(
            "base64 payload of {} bytes is not a whole number of f64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Parses and validates the trajectory JSON format.
pub fn parse_trajectories(json: &str) -> Result<Vec<Trajectory>> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let file: DatasetFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse(format!("at `{path}`: {inner}"))
    })?;

    if file.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: file.version,
            supported: FORMAT_VERSION,
        });
    }
    if file.d_c == 0 {
        return Err(Error::Validation("d_c must be >= 1".into()));
    }
    if file.trajectories.is_empty() {
        return Err(Error::Validation("dataset has no trajectories".into()));
    }
    let image_shape = match (file.obs_kind, file.image_shape, file.d_nc) {
        (ObsKind::Image, Some([h, w]), None) => Some((h, w)),
        (ObsKind::Image, None, _) => {
            return Err(Error::Validation("image datasets need `image_shape`".into()))
        }
        (ObsKind::Image, Some(_), Some(_)) => {
            return Err(Error::Validation("`d_nc` is only valid for vector datasets".into()))
        }
        (ObsKind::Vector, Some(_), _) => {
            return Err(Error::Validation(
                "`image_shape` is only valid for image datasets".into(),
            ))
        }
        (ObsKind::Vector, None, _) => None,
    };
    let d_nc = file.d_nc.unwrap_or(0);

    file.trajectories
        .into_iter()
        .enumerate()
        .map(|(ti, tf)| {
            let states = tf
                .states
                .into_iter()
                .enumerate()
                .map(|(si, sf)| {
                    let at = |msg: String| {
                        Error::Validation(format!("trajectories[{ti}].states[{si}]: {msg}"))
                    };
                    if sf.xc.len() != file.d_c {
                        return Err(at(format!("xc has length {}, expected d_c = {}", sf.xc.len(), file.d_c)));
                    }
                    let observation = match (image_shape, sf.xnc, sf.xnc_image) {
                        (None, xnc, None) => {
                            let v = xnc.unwrap_or_default();
                            if v.len() != d_nc {
                                return Err(at(format!("xnc has length {}, expected d_nc = {d_nc}", v.len())));
                            }
                            Observation::Vector(v)
                        }
                        (Some((h, w)), None, Some(b64)) => {
                            let px = decode_f64_base64(&b64).map_err(|e| at(e.to_string()))?;
                            Observation::Image(Image::new(h, w, px).map_err(|e| at(e.to_string()))?)
                        }
                        (None, _, Some(_)) => return Err(at("xnc_image in a vector dataset".into())),
                        (Some(_), Some(_), _) => return Err(at("xnc in an image dataset".into())),
                        (Some(_), None, None) => return Err(at("missing xnc_image".into())),
                    };
                    StateVector::new(sf.xc, observation).map_err(|e| at(e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            Trajectory::new(file.dt, states)
                .map_err(|e| Error::Validation(format!("trajectories[{ti}]: {e}")))
        })
        .collect()
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path)?;
    parse_trajectories(&text)
}

/// Canonical JSON encoding. All trajectories must share `dt` and layout.
pub fn trajectories_to_json(trajs: &[Trajectory]) -> Result<String> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::Validation("nothing to serialize".into()))?;
    let template = &first.initial().observation;
    for t in trajs {
        if t.dt.to_bits() != first.dt.to_bits() {
            return Err(Error::Validation("trajectories with different dt cannot share a file".into()));
        }
        if !t.initial().observation.same_layout(template) || t.d_c() != first.d_c() {
            return Err(Error::Validation("trajectories with different layouts cannot share a file".into()));
        }
    }
    let (obs_kind, d_nc, image_shape) = match template {
        Observation::Vector(v) => (ObsKind::Vector, Some(v.len()), None),
        Observation::Image(img) => (ObsKind::Image, None, Some([img.height(), img.width()])),
    };
    let file = DatasetFile {
        version: FORMAT_VERSION,
        dt: first.dt,
        d_c: first.d_c(),
        obs_kind,
        d_nc,
        image_shape,
        trajectories: trajs
            .iter()
            .map(|t| TrajectoryFile {
                states: t
                    .states
                    .iter()
                    .map(|s| match &s.observation {
                        Observation::Vector(v) => StateFile {
                            xc: s.controllable.clone(),
                            xnc: Some(v.clone()),
                            xnc_image: None,
                        },
                        Observation::Image(img) => StateFile {
                            xc: s.controllable.clone(),
                            xnc: None,
                            xnc_image: Some(encode_f64_base64(img.pixels())),
                        },
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Parse(e.to_string()))
}

pub fn save_trajectories(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    std::fs::write(path, trajectories_to_json(trajs)?)?;
    Ok(())
}
