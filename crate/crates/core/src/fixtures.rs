//! Synthetic tasks and policies: line, sine and curve demonstrations in the
//! plane, procedurally drawn sign images, and random certified policies.
//!
//! Demonstrations follow a path `p(s)` from `start` to `end` under an
//! exponentially decelerating phase `s(t) = (1 − e^{−kt}) / (1 − e^{−kT})`,
//! so each demo settles onto its endpoint like a stable system would.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policy::{ElementaryDs, PolicyParams};
use crate::state::{Image, Observation, StateVector};
use crate::weightnet::{HiddenLayer, WeightNetConfig, WeightNetParams};
use crate::autodiff::softplus_inv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Line,
    Sine,
    Curve,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Line, Shape::Sine, Shape::Curve];

    pub fn index(self) -> usize {
        match self {
            Shape::Line => 0,
            Shape::Sine => 1,
            Shape::Curve => 2,
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(Shape::Line),
            "sine" => Ok(Shape::Sine),
            "curve" => Ok(Shape::Curve),
            _ => Err(Error::Validation(format!("unknown shape `{s}`; expected line, sine or curve"))),
        }
    }
}

/// Phase rate for the multi-task fixtures. With the default rate most
/// samples crowd the shared endpoint, which leaves the image network little
/// signal to tell the tasks apart.
pub const MULTITASK_RATE: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSpec {
    pub start: [f64; 2],
    pub end: [f64; 2],
    /// Sideways offset of the sine and curve paths, in task units.
    pub amplitude: f64,
    pub samples: usize,
    pub dt: f64,
    /// Phase rate `k`; larger settles sooner.
    pub rate: f64,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self {
            start: [0.0, 0.0],
            end: [1.0, 1.0],
            amplitude: 0.2,
            samples: 200,
            dt: 0.01,
            rate: 5.0,
        }
    }
}

impl DemoSpec {
    pub fn duration(&self) -> f64 {
        (self.samples - 1) as f64 * self.dt
    }

    pub fn phase(&self, t: f64) -> f64 {
        let k = self.rate;
        (1.0 - (-k * t).exp()) / (1.0 - (-k * self.duration()).exp())
    }

    /// Point at phase `s ∈ [0, 1]` of a path.
    pub fn point(&self, shape: Shape, s: f64) -> [f64; 2] {
        let dx = self.end[0] - self.start[0];
        let dy = self.end[1] - self.start[1];
        let len = (dx * dx + dy * dy).sqrt();
        let (nx, ny) = if len > 0.0 { (-dy / len, dx / len) } else { (0.0, 0.0) };
        let offset = self.amplitude
            * match shape {
                Shape::Line => 0.0,
                Shape::Sine => (2.0 * std::f64::consts::PI * s).sin(),
                Shape::Curve => (std::f64::consts::PI * s).sin(),
            };
        [
            self.start[0] + s * dx + offset * nx,
            self.start[1] + s * dy + offset * ny,
        ]
    }

    /// Demonstration of one shape with a fixed observation payload.
    pub fn trajectory(&self, shape: Shape, observation: &Observation) -> Result<Trajectory> {
        if self.samples < 3 || !(self.rate > 0.0) {
            return Err(Error::Fixture("demo needs >= 3 samples and a positive rate".into()));
        }
        let states = (0..self.samples)
            .map(|i| {
                // Pin the last sample so every demo ends exactly on `end`.
                let s = if i + 1 == self.samples { 1.0 } else { self.phase(i as f64 * self.dt) };
                StateVector::new(self.point(shape, s).to_vec(), observation.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(self.dt, states)
    }
}

/// One demonstration, no observation.
pub fn single_task(shape: Shape, spec: &DemoSpec) -> Result<Dataset> {
    Dataset::new(vec![spec.trajectory(shape, &Observation::empty())?])
}

/// Line, sine and curve demos keyed by a one-hot observation
/// (`[1,0,0]` = line, `[0,1,0]` = sine, `[0,0,1]` = curve).
pub fn multitask_onehot(spec: &DemoSpec) -> Result<Dataset> {
    let trajs = Shape::ALL
        .iter()
        .map(|&s| spec.trajectory(s, &Observation::one_hot(3, s.index())?))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajs)
}

/// Line, sine and curve demos keyed by a drawn sign image.
pub fn multitask_images(spec: &DemoSpec, size: usize) -> Result<Dataset> {
    let trajs = Shape::ALL
        .iter()
        .map(|&s| spec.trajectory(s, &Observation::Image(sign_image(s, size)?)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajs)
}

pub fn onehot_for(shape: Shape) -> Observation {
    Observation::one_hot(3, shape.index()).expect("index < 3")
}

/// Anti-aliased glyph on a black `size × size` canvas: a diagonal stroke,
/// one period of a sine wave, or three quarters of a circle.
pub fn sign_image(shape: Shape, size: usize) -> Result<Image> {
    if size < 8 {
        return Err(Error::Fixture(format!("sign images need size >= 8, got {size}")));
    }
    let n = size as f64;
    let m = 0.15 * n;
    let samples = 256;
    let polyline: Vec<(f64, f64)> = (0..=samples)
        .map(|i| {
            let u = i as f64 / samples as f64;
            match shape {
                Shape::Line => (m + u * (n - 2.0 * m), n - m - u * (n - 2.0 * m)),
                Shape::Sine => (
                    m + u * (n - 2.0 * m),
                    n / 2.0 - 0.28 * n * (2.0 * std::f64::consts::PI * u).sin(),
                ),
                Shape::Curve => {
                    let a = 1.5 * std::f64::consts::PI * u;
                    (n / 2.0 + 0.33 * n * a.cos(), n / 2.0 - 0.33 * n * a.sin())
                }
            }
        })
        .collect();
    let half_width = (n / 32.0).max(0.75);
    let mut pixels = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = polyline
                .windows(2)
                .map(|w| segment_distance(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            // One-pixel linear falloff past the stroke edge.
            pixels[y * size + x] = (1.0 - (d - half_width)).clamp(0.0, 1.0);
        }
    }
    Image::new(size, size, pixels)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let u = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - u * vx, wy - u * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Ranges for [`random_policy`].
#[derive(Clone, Debug)]
pub struct RandomPolicySpec {
    pub d_c: usize,
    pub n_systems: usize,
    /// Range of the post-softplus diagonal of `L`.
    pub diag: (f64, f64),
    /// Bound on strictly-lower `L` entries.
    pub lower: f64,
    /// Bound on `C` entries.
    pub skew: f64,
    pub hidden: Vec<usize>,
    pub attractor_bound: f64,
}

impl RandomPolicySpec {
    pub fn new(d_c: usize, n_systems: usize) -> Self {
        Self {
            d_c,
            n_systems,
            diag: (0.5, 2.0),
            lower: 0.5,
            skew: 1.0,
            hidden: vec![16],
            attractor_bound: 1.0,
        }
    }
}

/// Raw parameters drawn uniformly from the spec's ranges, with a random
/// MLP over `x_c` alone. Certified by construction.
pub fn random_policy(spec: &RandomPolicySpec, rng: &mut impl Rng) -> Result<PolicyParams> {
    let d = spec.d_c;
    let eps = crate::policy::DEFAULT_DIAG_FLOOR;
    let systems = (0..spec.n_systems)
        .map(|_| {
            let mut raw = Matrix::zeros(d, d);
            let mut c = Matrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    c.as_mut_slice()[i * d + j] = rng.random_range(-spec.skew..=spec.skew);
                    if j < i {
                        raw.as_mut_slice()[i * d + j] = rng.random_range(-spec.lower..=spec.lower);
                    }
                }
                let diag = rng.random_range(spec.diag.0..=spec.diag.1);
                raw.as_mut_slice()[i * d + i] = softplus_inv(diag - eps);
            }
            ElementaryDs::new(raw, c)
        })
        .collect::<Result<Vec<_>>>()?;
    let hidden = spec
        .hidden
        .iter()
        .map(|&width| HiddenLayer {
            width,
            activation: crate::weightnet::Activation::Tanh,
        })
        .collect();
    let net = WeightNetParams::init(WeightNetConfig::vector(d, 0, hidden, spec.n_systems), rng)?;
    let attractor = (0..d)
        .map(|_| rng.random_range(-spec.attractor_bound..=spec.attractor_bound))
        .collect();
    PolicyParams::new(systems, net, attractor, eps)
}

/// A single reparameterized system `A = a·I` (`a > 0`) with a constant
/// weight network.
pub fn isotropic_policy(d_c: usize, a: f64, attractor: Vec<f64>) -> Result<PolicyParams> {
    if !(a > 0.0) {
        return Err(Error::Fixture(format!("isotropic gain must be positive, got {a}")));
    }
    let eps = crate::policy::DEFAULT_DIAG_FLOOR;
    let mut raw = Matrix::zeros(d_c, d_c);
    for i in 0..d_c {
        raw.as_mut_slice()[i * d_c + i] = softplus_inv(a.sqrt() - eps);
    }
    let sys = ElementaryDs::new(raw, Matrix::zeros(d_c, d_c))?;
    let net = WeightNetParams::from_blocks(
        WeightNetConfig::vector(d_c, 0, vec![], 1),
        vec![vec![0.0; d_c], vec![0.0]],
    )?;
    PolicyParams::new(vec![sys], net, attractor, eps)
}
