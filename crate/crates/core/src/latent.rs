//! Latent grids and seeded noise.
//!
//! A [`Latent`] is a rank-3 (audio-like `C×W×H`) or rank-4 (video-like
//! `C×F×W×H`) grid of finite `f64` values stored row-major, last dimension
//! fastest.
//!
//! Noise generator: ChaCha20 (`rand_chacha` 0.9.0, `SeedableRng::seed_from_u64`)
//! feeding the ziggurat `StandardNormal` sampler of `rand_distr` 0.5.1. Both
//! versions are pinned exactly in the manifest because the bit stream is part
//! of the reproducibility contract.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of elements in a grid.
pub const DEFAULT_MAX_ELEMENTS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::with_cap(dims, DEFAULT_MAX_ELEMENTS)
    }

    pub fn with_cap(dims: impl Into<Vec<usize>>, max_elements: usize) -> Result<Self> {
        let dims = dims.into();
        let invalid = |reason: &str| Error::InvalidShape {
            dims: dims.clone(),
            reason: reason.to_string(),
        };
        if dims.len() != 3 && dims.len() != 4 {
            return Err(invalid("rank must be 3 or 4"));
        }
        if dims.contains(&0) {
            return Err(invalid("every extent must be at least 1"));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| invalid("element count overflows"))?;
        if count > max_elements {
            return Err(invalid(&format!(
                "{count} elements exceeds the cap of {max_elements}"
            )));
        }
        Ok(Shape { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn channels(&self) -> usize {
        self.dims[0]
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.dims
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseSeed(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    shape: Shape,
    values: Vec<f64>,
}

impl Latent {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape} ({} elements)",
                values.len(),
                shape.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Latent { shape, values })
    }

    /// Builds a latent from values already known to be finite and of the right length.
    pub(crate) fn from_parts_unchecked(shape: Shape, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), shape.len());
        Latent { shape, values }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self + scale * direction`, elementwise.
    pub fn add_scaled(&self, scale: f64, direction: &Latent) -> Result<Latent> {
        self.ensure_same_shape(direction)?;
        let values = self
            .values
            .iter()
            .zip(&direction.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Latent::new(self.shape.clone(), values)
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.add_scaled(-1.0, other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Latent> {
        Latent::new(self.shape.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn distance(&self, other: &Latent) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Elementwise mean of a non-empty set of same-shaped latents.
    ///
    /// Uses the running update `m += (x − m) / k`, so a set of identical
    /// latents averages to exactly that latent.
    pub fn mean_of(latents: &[Latent]) -> Result<Latent> {
        let first = latents
            .first()
            .ok_or_else(|| Error::Precondition("mean of zero latents".into()))?;
        let mut acc = first.values.clone();
        for (k, z) in latents.iter().enumerate().skip(1) {
            first.ensure_same_shape(z)?;
            let count = (k + 1) as f64;
            for (a, v) in acc.iter_mut().zip(&z.values) {
                *a += (v - *a) / count;
            }
        }
        Ok(Latent::from_parts_unchecked(first.shape.clone(), acc))
    }
}

pub fn alloc_latent(shape: &Shape, fill: f64) -> Result<Latent> {
    Latent::new(shape.clone(), vec![fill; shape.len()])
}

/// Standard normal noise, a pure function of `(shape, seed)`.
pub fn gaussian_noise(shape: &Shape, seed: NoiseSeed) -> Latent {
    let mut rng = ChaCha20Rng::seed_from_u64(seed.0);
    let values = (0..shape.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Latent::from_parts_unchecked(shape.clone(), values)
}
