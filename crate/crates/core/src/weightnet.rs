//! The mixture-weight network Ψ: an optional convolutional front-end for
//! image observations, an MLP, and a softmax head.
//!
//! Vector observations feed the MLP with `[x_c; x_nc]`. Image observations go
//! through the conv stack first and the flattened features are appended to
//! `x_c`. The same parameters drive two evaluation paths: a plain forward pass
//! used by rollouts and a taped pass used for training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, ConvDims};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::state::{Image, ObsKind, Observation, StateVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontEnd {
    /// Vector observations of length `d_nc`.
    Vector { d_nc: usize },
    /// Grayscale `height × width` images through conv → tanh → max-pool stages; the flattened
    /// features are scaled by `1/√len` before the MLP.
    Conv {
        height: usize,
        width: usize,
        layers: Vec<ConvLayerSpec>,
    },
}

/// Output layer of Ψ. Softmax is the only head that keeps every weight
/// strictly positive, so it is the only one offered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightHead {
    Softmax,
}

impl WeightHead {
    pub fn is_positive(self) -> bool {
        matches!(self, WeightHead::Softmax)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightNetConfig {
    pub d_c: usize,
    pub front_end: FrontEnd,
    pub hidden: Vec<HiddenLayer>,
    pub output_dim: usize,
    pub head: WeightHead,
}

pub fn default_hidden() -> Vec<HiddenLayer> {
    vec![
        HiddenLayer {
            width: 32,
            activation: Activation::Tanh,
        };
        2
    ]
}

/// LeNet-style reduction: two conv stages of 8 and 16 channels, 5×5 kernels,
/// 2×2 max-pooling.
pub fn default_conv_layers() -> Vec<ConvLayerSpec> {
    vec![
        ConvLayerSpec {
            channels: 8,
            kernel: 5,
            pool: 2,
        },
        ConvLayerSpec {
            channels: 16,
            kernel: 5,
            pool: 2,
        },
    ]
}

#[derive(Clone, Copy, Debug)]
struct ConvStage {
    dims: ConvDims,
    pool: usize,
}

impl ConvStage {
    fn pooled_h(&self) -> usize {
        self.dims.out_h() / self.pool
    }
    fn pooled_w(&self) -> usize {
        self.dims.out_w() / self.pool
    }
}

impl WeightNetConfig {
    pub fn vector(d_c: usize, d_nc: usize, hidden: Vec<HiddenLayer>, n_systems: usize) -> Self {
        Self {
            d_c,
            front_end: FrontEnd::Vector { d_nc },
            hidden,
            output_dim: n_systems,
            head: WeightHead::Softmax,
        }
    }

    pub fn conv(
        d_c: usize,
        (height, width): (usize, usize),
        layers: Vec<ConvLayerSpec>,
        hidden: Vec<HiddenLayer>,
        n_systems: usize,
    ) -> Self {
        Self {
            d_c,
            front_end: FrontEnd::Conv {
                height,
                width,
                layers,
            },
            hidden,
            output_dim: n_systems,
            head: WeightHead::Softmax,
        }
    }

    pub fn obs_kind(&self) -> ObsKind {
        match self.front_end {
            FrontEnd::Vector { .. } => ObsKind::Vector,
            FrontEnd::Conv { .. } => ObsKind::Image,
        }
    }

    fn conv_stages(&self) -> Result<Vec<ConvStage>> {
        let FrontEnd::Conv {
            height,
            width,
            layers,
        } = &self.front_end
        else {
            return Ok(Vec::new());
        };
        let (mut h, mut w, mut c) = (*height, *width, 1usize);
        let mut stages = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            if l.channels == 0 || l.kernel == 0 || l.pool == 0 {
                return Err(Error::InvalidParameter(format!(
                    "conv layer {i} has a zero-sized channel/kernel/pool"
                )));
            }
            if l.kernel > h || l.kernel > w {
                return Err(Error::InvalidParameter(format!(
                    "conv layer {i}: kernel {} does not fit a {h}x{w} input",
                    l.kernel
                )));
            }
            let dims = ConvDims {
                batch: 1,
                in_ch: c,
                height: h,
                width: w,
                out_ch: l.channels,
                kernel: l.kernel,
            };
            let stage = ConvStage { dims, pool: l.pool };
            if stage.pooled_h() == 0 || stage.pooled_w() == 0 {
                return Err(Error::InvalidParameter(format!(
                    "conv layer {i}: pool {} collapses a {}x{} map",
                    l.pool,
                    dims.out_h(),
                    dims.out_w()
                )));
            }
            h = stage.pooled_h();
            w = stage.pooled_w();
            c = l.channels;
            stages.push(stage);
        }
        Ok(stages)
    }

    /// Length of the observation features appended to `x_c`.
    pub fn feature_len(&self) -> Result<usize> {
        match &self.front_end {
            FrontEnd::Vector { d_nc } => Ok(*d_nc),
            FrontEnd::Conv { height, width, .. } => Ok(match self.conv_stages()?.last() {
                Some(s) => s.dims.out_ch * s.pooled_h() * s.pooled_w(),
                None => height * width,
            }),
        }
    }

    pub fn mlp_input_len(&self) -> Result<usize> {
        Ok(self.d_c + self.feature_len()?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_c == 0 {
            return Err(Error::InvalidParameter("d_c must be >= 1".into()));
        }
        if self.output_dim == 0 {
            return Err(Error::InvalidParameter(
                "weight network needs at least one output (N >= 1)".into(),
            ));
        }
        if self.hidden.iter().any(|h| h.width == 0) {
            return Err(Error::InvalidParameter("hidden layer of width 0".into()));
        }
        if let FrontEnd::Conv { height, width, .. } = self.front_end {
            if height == 0 || width == 0 {
                return Err(Error::InvalidParameter("image shape must be positive".into()));
            }
        }
        self.conv_stages().map(|_| ())
    }

    /// Shapes of the trainable blocks, in [`WeightNetParams::blocks`] order.
    pub fn block_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::new();
        for s in self.conv_stages()? {
            let k = s.dims.kernel;
            shapes.push(vec![s.dims.out_ch, s.dims.in_ch, k, k]);
            shapes.push(vec![s.dims.out_ch]);
        }
        let mut fan_in = self.mlp_input_len()?;
        for h in &self.hidden {
            shapes.push(vec![fan_in, h.width]);
            shapes.push(vec![h.width]);
            fan_in = h.width;
        }
        shapes.push(vec![fan_in, self.output_dim]);
        shapes.push(vec![self.output_dim]);
        Ok(shapes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightNetParams {
    config: WeightNetConfig,
    /// Alternating weight/bias buffers, conv stages first, then dense layers.
    blocks: Vec<Vec<f64>>,
}

impl WeightNetParams {
    /// Weights ~ U(±1/√fan_in), biases zero.
    pub fn init(config: WeightNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let blocks = config
            .block_shapes()?
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            })
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn from_blocks(config: WeightNetConfig, blocks: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.block_shapes()?;
        if shapes.len() != blocks.len() {
            return Err(Error::DimensionMismatch {
                context: "weight network block count",
                expected: shapes.len(),
                found: blocks.len(),
            });
        }
        for (s, b) in shapes.iter().zip(&blocks) {
            let n: usize = s.iter().product();
            if n != b.len() {
                return Err(Error::DimensionMismatch {
                    context: "weight network block size",
                    expected: n,
                    found: b.len(),
                });
            }
            crate::error::ensure_finite(b, "weight network parameter")?;
        }
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &WeightNetConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.blocks
    }

    fn stages(&self) -> Vec<ConvStage> {
        self.config
            .conv_stages()
            .expect("validated at construction")
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        match (&self.config.front_end, obs) {
            (FrontEnd::Vector { d_nc }, Observation::Vector(v)) if v.len() == *d_nc => Ok(()),
            (FrontEnd::Vector { d_nc }, Observation::Vector(v)) => Err(Error::ObservationShape(
                format!("expected a vector observation of length {d_nc}, got {}", v.len()),
            )),
            (FrontEnd::Conv { height, width, .. }, Observation::Image(img))
                if img.shape() == (*height, *width) =>
            {
                Ok(())
            }
            (FrontEnd::Conv { height, width, .. }, Observation::Image(img)) => {
                Err(Error::ObservationShape(format!(
                    "expected a {height}x{width} image, got {}x{}",
                    img.height(),
                    img.width()
                )))
            }
            (FrontEnd::Vector { .. }, Observation::Image(_)) => Err(Error::ObservationShape(
                "weight network expects vector observations, got an image".into(),
            )),
            (FrontEnd::Conv { .. }, Observation::Vector(_)) => Err(Error::ObservationShape(
                "weight network expects image observations, got a vector".into(),
            )),
        }
    }

    /// Observation features: the vector itself, or the flattened conv output.
    pub fn embed(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        let Observation::Image(img) = obs else {
            return Ok(obs.values().to_vec());
        };
        let mut x = img.pixels().to_vec();
        for (i, s) in self.stages().iter().enumerate() {
            let mut conv = vec![0.0; s.dims.out_ch * s.dims.out_h() * s.dims.out_w()];
            kernels::conv2d_forward(
                &x,
                &self.blocks[2 * i],
                &self.blocks[2 * i + 1],
                s.dims,
                &mut conv,
            );
            conv.iter_mut().for_each(|v| *v = v.tanh());
            let mut pooled = vec![0.0; s.dims.out_ch * s.pooled_h() * s.pooled_w()];
            kernels::maxpool_forward(
                &conv,
                s.dims.out_ch,
                s.dims.out_h(),
                s.dims.out_w(),
                s.pool,
                &mut pooled,
            );
            x = pooled;
        }
        let scale = feature_scale(x.len());
        x.iter_mut().for_each(|v| *v *= scale);
        Ok(x)
    }

    /// Softmax weights from `x_c` and precomputed observation features.
    pub fn weights_from_features(&self, x_c: &[f64], features: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = x_c.iter().chain(features).copied().collect();
        let first_dense = 2 * self.stages().len();
        let n_dense = self.config.hidden.len() + 1;
        for layer in 0..n_dense {
            let w = &self.blocks[first_dense + 2 * layer];
            let b = &self.blocks[first_dense + 2 * layer + 1];
            let out_dim = b.len();
            let mut next = b.clone();
            for (i, &hv) in h.iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                for (n, wv) in next.iter_mut().zip(&w[i * out_dim..(i + 1) * out_dim]) {
                    *n += hv * wv;
                }
            }
            if let Some(hl) = self.config.hidden.get(layer) {
                activate(hl.activation, &mut next);
            }
            h = next;
        }
        kernels::softmax_in_place(&mut h);
        h
    }

    /// Mixture weights `w(x)`: strictly positive and summing to one.
    pub fn forward(&self, state: &StateVector) -> Result<Vec<f64>> {
        if state.d_c() != self.config.d_c {
            return Err(Error::DimensionMismatch {
                context: "weight network controllable input",
                expected: self.config.d_c,
                found: state.d_c(),
            });
        }
        let features = self.embed(&state.observation)?;
        Ok(self.weights_from_features(&state.controllable, &features))
    }

    /// Taped forward pass over a batch. `params` are the tape nodes holding
    /// this network's blocks (as from [`Self::blocks`]); returns `B × N`
    /// weights.
    pub fn graph(&self, tape: &mut Tape, params: &[NodeId], states: &[&StateVector]) -> Result<NodeId> {
        let batch = states.len();
        let d_c = self.config.d_c;
        let mut xc = Vec::with_capacity(batch * d_c);
        for s in states {
            if s.d_c() != d_c {
                return Err(Error::DimensionMismatch {
                    context: "weight network controllable input",
                    expected: d_c,
                    found: s.d_c(),
                });
            }
            self.check_obs(&s.observation)?;
            xc.extend_from_slice(&s.controllable);
        }
        let xc = tape.constant(Tensor::matrix(batch, d_c, xc));

        let features = match &self.config.front_end {
            FrontEnd::Vector { d_nc } => {
                let data = states
                    .iter()
                    .flat_map(|s| s.observation.values().iter().copied())
                    .collect();
                tape.constant(Tensor::matrix(batch, *d_nc, data))
            }
            FrontEnd::Conv { height, width, .. } => {
                // Identical images share one pass through the conv stack.
                let (unique, index) = dedup_images(states);
                let mut data = Vec::with_capacity(unique.len() * height * width);
                for img in &unique {
                    data.extend_from_slice(img.pixels());
                }
                let mut x = tape.constant(Tensor::new(vec![unique.len(), 1, *height, *width], data)?);
                let stages = self.stages();
                for (i, s) in stages.iter().enumerate() {
                    let c = tape.conv2d(x, params[2 * i], params[2 * i + 1]);
                    let r = tape.tanh(c);
                    x = tape.max_pool2d(r, s.pool);
                }
                let flat_len = tape.value(x).len() / unique.len();
                let flat = tape.reshape(x, vec![unique.len(), flat_len]);
                let flat = tape.scale(flat, feature_scale(flat_len));
                tape.gather_rows(flat, &index)
            }
        };

        let mut h = tape.concat_cols(&[xc, features]);
        let first_dense = 2 * self.stages().len();
        for layer in 0..=self.config.hidden.len() {
            let z = tape.matmul(h, params[first_dense + 2 * layer]);
            let z = tape.add_bias(z, params[first_dense + 2 * layer + 1]);
            h = match self.config.hidden.get(layer).map(|l| l.activation) {
                Some(Activation::Tanh) => tape.tanh(z),
                Some(Activation::Relu) => tape.relu(z),
                None => z,
            };
        }
        Ok(tape.softmax_rows(h))
    }
}

/// Conv features are divided by `√len` so their total contribution to the
/// first dense layer stays O(1) next to the few entries of `x_c`.
fn feature_scale(len: usize) -> f64 {
    1.0 / (len as f64).sqrt()
}

fn activate(act: Activation, v: &mut [f64]) {
    match act {
        Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
        Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
    }
}

fn dedup_images<'a>(states: &[&'a StateVector]) -> (Vec<&'a Image>, Vec<usize>) {
    let mut unique: Vec<&'a Observation> = Vec::new();
    let mut index = Vec::with_capacity(states.len());
    for s in states {
        let pos = unique
            .iter()
            .position(|u| u.bits_eq(&s.observation))
            .unwrap_or_else(|| {
                unique.push(&s.observation);
                unique.len() - 1
            });
        index.push(pos);
    }
    let images = unique
        .into_iter()
        .map(|o| match o {
            Observation::Image(img) => img,
            Observation::Vector(_) => unreachable!("checked by check_obs"),
        })
        .collect();
    (images, index)
}
