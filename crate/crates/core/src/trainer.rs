//! Imitation learning: MSE on velocity targets, Adam over the raw
//! parameters, seeded shuffling.
//!
//! The attractor is fixed from the data and never optimized. Every
//! optimizer step keeps the certificate valid because the update acts on
//! unconstrained parameters only.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::linalg::{norm, Matrix};
use crate::policy::{CompiledPolicy, ElementaryDs, PolicyParams, DEFAULT_DIAG_FLOOR};
use crate::state::Observation;
use crate::weightnet::{
    default_conv_layers, default_hidden, Activation, HiddenLayer, WeightNetConfig, WeightNetParams,
};

/// Samples per gradient work unit. Fixed so results do not depend on the
/// execution mode or thread count.
/// Initial skew half-width. Identical systems at init give the weight head
/// no gradient to separate them.
pub const DEFAULT_INIT_SKEW: f64 = 0.1;

pub const GRADIENT_CHUNK: usize = 32;

/// Shape of the weight network, independent of dataset dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetSpec {
    /// MLP on `[x_c; x_nc]`; vector observations only.
    Mlp {
        #[serde(default = "default_widths")]
        hidden: Vec<usize>,
    },
    /// Conv front-end on image observations, then an MLP.
    Conv {
        #[serde(default = "default_widths")]
        hidden: Vec<usize>,
    },
}

fn default_widths() -> Vec<usize> {
    default_hidden().iter().map(|h| h.width).collect()
}

impl NetSpec {
    /// The default for an observation: MLP for vectors, conv for images.
    pub fn for_observation(obs: &Observation) -> Self {
        match obs {
            Observation::Vector(_) => NetSpec::Mlp {
                hidden: default_widths(),
            },
            Observation::Image(_) => NetSpec::Conv {
                hidden: default_widths(),
            },
        }
    }

    fn hidden(&self) -> Vec<HiddenLayer> {
        let (NetSpec::Mlp { hidden } | NetSpec::Conv { hidden }) = self;
        hidden
            .iter()
            .map(|&width| HiddenLayer {
                width,
                activation: Activation::Tanh,
            })
            .collect()
    }

    pub fn build(&self, d_c: usize, obs: &Observation, n_systems: usize) -> Result<WeightNetConfig> {
        let cfg = match (self, obs) {
            (NetSpec::Mlp { .. }, Observation::Vector(v)) => {
                WeightNetConfig::vector(d_c, v.len(), self.hidden(), n_systems)
            }
            (NetSpec::Conv { .. }, Observation::Image(img)) => {
                WeightNetConfig::conv(d_c, img.shape(), default_conv_layers(), self.hidden(), n_systems)
            }
            (NetSpec::Mlp { .. }, Observation::Image(_)) => {
                return Err(Error::Validation("an mlp network cannot take image observations; use conv".into()))
            }
            (NetSpec::Conv { .. }, Observation::Vector(_)) => {
                return Err(Error::Validation("a conv network needs image observations".into()))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for NetSpec {
    type Err = Error;

    /// `mlp`, `mlp:32,32`, `conv`, `conv:64`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, widths) = match s.split_once(':') {
            Some((k, w)) => (k, Some(w)),
            None => (s, None),
        };
        let hidden = match widths {
            None => default_widths(),
            Some(w) => w
                .split(',')
                .map(|p| match p.trim().parse::<usize>() {
                    Ok(n) if n > 0 => Ok(n),
                    _ => Err(Error::Validation(format!("bad hidden width `{p}` in `{s}`"))),
                })
                .collect::<Result<_>>()?,
        };
        match kind {
            "mlp" => Ok(NetSpec::Mlp { hidden }),
            "conv" => Ok(NetSpec::Conv { hidden }),
            _ => Err(Error::Validation(format!(
                "unknown network `{s}`; expected mlp[:w,..] or conv[:w,..]"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_systems: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// `None` picks [`NetSpec::for_observation`].
    pub net: Option<NetSpec>,
    pub eps: f64,
    /// Half-width of the uniform draw for the initial skew entries. Zero
    /// makes every system identical at init.
    pub init_skew: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_systems: 5,
            epochs: 1000,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
            net: None,
            eps: DEFAULT_DIAG_FLOOR,
            init_skew: DEFAULT_INIT_SKEW,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_systems == 0 {
            return Err(Error::Validation("n_systems must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.init_skew >= 0.0 && self.init_skew.is_finite()) {
            return Err(Error::Validation(format!(
                "init_skew must be finite and >= 0, got {}",
                self.init_skew
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Validation(format!("eps must be positive, got {}", self.eps)));
        }
        if let Some(NetSpec::Mlp { hidden } | NetSpec::Conv { hidden }) = &self.net {
            if hidden.contains(&0) {
                return Err(Error::Validation("hidden widths must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn net_spec(&self, obs: &Observation) -> NetSpec {
        self.net.clone().unwrap_or_else(|| NetSpec::for_observation(obs))
    }
}

/// Fresh parameters: every system starts with `L = I` and a skew part drawn
/// from `U(-init_skew, init_skew)`, so `A = I + C - Cᵀ`. The network draws
/// first, then the skew entries system by system.
pub fn init_params(dataset: &Dataset, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PolicyParams> {
    config.validate()?;
    let d = dataset.d_c();
    let obs = dataset.observation_template();
    let net_cfg = config.net_spec(obs).build(d, obs, config.n_systems)?;
    let net = WeightNetParams::init(net_cfg, rng)?;
    let systems = (0..config.n_systems)
        .map(|_| {
            let base = ElementaryDs::identity(d, config.eps);
            if config.init_skew == 0.0 {
                return Ok(base);
            }
            let r = config.init_skew;
            let c = Matrix::from_row_major(d, d, (0..d * d).map(|_| rng.random_range(-r..r)).collect())?;
            ElementaryDs::new(base.l_raw().clone(), c)
        })
        .collect::<Result<Vec<_>>>()?;
    PolicyParams::new(systems, net, dataset.attractor().to_vec(), config.eps)
}

/// `(1/B) Σ ‖π(x) − ẋ_target‖²`, evaluated without a tape.
pub fn imitation_loss(params: &PolicyParams, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Validation("imitation loss of an empty batch".into()));
    }
    let policy = CompiledPolicy::new(params)?;
    let mut total = 0.0;
    for s in batch {
        let v = policy.velocity(&s.state)?;
        if s.target.len() != v.len() {
            return Err(Error::DimensionMismatch {
                context: "velocity target",
                expected: v.len(),
                found: s.target.len(),
            });
        }
        total += v.iter().zip(&s.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Loss and its gradient with respect to [`PolicyParams::flatten`].
pub fn loss_and_gradient(
    params: &PolicyParams,
    batch: &[&Sample],
    exec: Execution,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Validation("imitation loss of an empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<&[&Sample]> = batch.chunks(GRADIENT_CHUNK).collect();
    let parts = exec::map(exec, &chunks, |chunk| chunk_gradient(params, chunk, scale));
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.num_parameters()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

fn chunk_gradient(params: &PolicyParams, chunk: &[&Sample], scale: f64) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let blocks = params.bind(&mut tape);
    let states: Vec<_> = chunk.iter().map(|s| &s.state).collect();
    let v = params.velocity_graph(&mut tape, &blocks, &states)?;
    let d = params.d_c();
    let mut targets = Vec::with_capacity(chunk.len() * d);
    for s in chunk {
        if s.target.len() != d {
            return Err(Error::DimensionMismatch {
                context: "velocity target",
                expected: d,
                found: s.target.len(),
            });
        }
        targets.extend_from_slice(&s.target);
    }
    let t = tape.constant(Tensor::matrix(chunk.len(), d, targets));
    let diff = tape.sub(v, t);
    let sq = tape.mul(diff, diff);
    let total = tape.sum(sq);
    let loss = tape.scale(total, scale);
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(params.num_parameters());
    for b in &blocks {
        flat.extend_from_slice(grads.get(*b));
    }
    Ok((tape.scalar_value(loss), flat))
}

/// Adam on a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Snapshot handed to the progress callback after each epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochReport<'a> {
    pub epoch: usize,
    /// Sample-weighted mean of the mini-batch losses seen during the epoch.
    pub loss: f64,
    pub params: &'a PolicyParams,
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    train_with(dataset, config, Execution::default(), |_| {})
}

pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    exec: Execution,
    mut progress: impl FnMut(EpochReport<'_>),
) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_params(dataset, config, &mut rng)?;
    let samples = dataset.samples();
    let batch_size = config.batch_size.min(samples.len());
    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for idx in order.chunks(batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let (loss, grad) = loss_and_gradient(&params, &batch, exec)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            weighted += loss * batch.len() as f64;
            adam.step(&mut flat, &grad);
            params = params
                .unflatten(&flat)
                .map_err(|_| Error::TrainingDiverged { epoch })?;
        }
        let loss = weighted / samples.len() as f64;
        log::debug!("epoch {epoch}: loss {loss:.6e}");
        history.push(loss);
        progress(EpochReport {
            epoch,
            loss,
            params: &params,
        });
    }

    let final_loss = imitation_loss(&params, samples)?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: config.epochs,
        });
    }
    Ok(Checkpoint {
        config: config.clone(),
        policy: params,
        meta: TrainingMeta {
            final_loss,
            epochs: config.epochs,
            loss_history: history,
            dataset_fingerprint: dataset.fingerprint()?,
            demo_dt: dataset.trajectories()[0].dt(),
        },
    })
}

/// Largest commanded speed over the training states; a cheap sanity scale
/// for clamps and field plots.
pub fn max_target_speed(dataset: &Dataset) -> f64 {
    dataset
        .samples()
        .iter()
        .map(|s| norm(&s.target))
        .fold(0.0, f64::max)
}
