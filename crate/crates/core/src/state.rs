//! Full system state: a controllable part the policy commands and an
//! observed-only part that modulates the mixture weights.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Grayscale image with row-major pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ObservationShape(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::ObservationShape(format!(
                "image {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::ObservationShape(format!(
                "pixel value {p} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// The non-controllable payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observation {
    Vector(Vec<f64>),
    Image(Image),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsKind {
    Vector,
    Image,
}

impl Observation {
    pub fn empty() -> Self {
        Observation::Vector(Vec::new())
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::Validation(format!(
                "one-hot index {index} out of range for length {len}"
            )));
        }
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Ok(Observation::Vector(v))
    }

    pub fn kind(&self) -> ObsKind {
        match self {
            Observation::Vector(_) => ObsKind::Vector,
            Observation::Image(_) => ObsKind::Image,
        }
    }

    /// Vector length, or `H·W` for images.
    pub fn len(&self) -> usize {
        match self {
            Observation::Vector(v) => v.len(),
            Observation::Image(img) => img.pixels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Observation::Vector(v) => v,
            Observation::Image(img) => &img.pixels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Observation::Vector(v) => ensure_finite(v, "non-controllable state"),
            Observation::Image(img) => {
                // Re-run the constructor checks; deserialized images bypass them.
                Image::new(img.height, img.width, img.pixels.clone()).map(|_| ())
            }
        }
    }

    /// Whether two payloads have the same kind and dimensions.
    pub fn same_layout(&self, other: &Observation) -> bool {
        match (self, other) {
            (Observation::Vector(a), Observation::Vector(b)) => a.len() == b.len(),
            (Observation::Image(a), Observation::Image(b)) => a.shape() == b.shape(),
            _ => false,
        }
    }

    /// Bitwise identity, used to deduplicate payloads.
    pub fn bits_eq(&self, other: &Observation) -> bool {
        self.same_layout(other)
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub controllable: Vec<f64>,
    pub observation: Observation,
}

impl StateVector {
    pub fn new(controllable: Vec<f64>, observation: Observation) -> Result<Self> {
        let s = Self {
            controllable,
            observation,
        };
        s.validate()?;
        Ok(s)
    }

    /// A state with no observed part.
    pub fn controllable_only(controllable: Vec<f64>) -> Result<Self> {
        Self::new(controllable, Observation::empty())
    }

    pub fn d_c(&self) -> usize {
        self.controllable.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.controllable.is_empty() {
            return Err(Error::Validation(
                "controllable state must have d_c >= 1".into(),
            ));
        }
        ensure_finite(&self.controllable, "controllable state")?;
        self.observation.validate()
    }
}
