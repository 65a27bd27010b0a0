//! Exactly invertible stand-ins for the VAE between signal space and latent space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Codec {
    Identity,
    /// Encoding divides channel `c` by `scales[c]`; decoding multiplies it back.
    DiagonalScale { scales: Vec<f64> },
}

impl Codec {
    pub fn diagonal_scale(scales: Vec<f64>) -> Result<Self> {
        let codec = Codec::DiagonalScale { scales };
        codec.validate()?;
        Ok(codec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Codec::Identity => Ok(()),
            Codec::DiagonalScale { scales } => {
                if scales.is_empty() {
                    return Err(Error::InvalidCodec("no channel scales".into()));
                }
                if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                    return Err(Error::InvalidCodec(format!(
                        "scale {s} is not a positive finite number"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn encode(&self, x: &Latent) -> Result<Latent> {
        self.apply(x, |v, s| v / s)
    }

    pub fn decode(&self, z: &Latent) -> Result<Latent> {
        self.apply(z, |v, s| v * s)
    }

    fn apply(&self, x: &Latent, op: impl Fn(f64, f64) -> f64) -> Result<Latent> {
        self.validate()?;
        let scales = match self {
            Codec::Identity => return Ok(x.clone()),
            Codec::DiagonalScale { scales } => scales,
        };
        let channels = x.shape().channels();
        if scales.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "codec has {} channel scales, latent has {channels} channels",
                scales.len()
            )));
        }
        let per_channel = x.len() / channels;
        let values = x
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| op(v, scales[i / per_channel]))
            .collect();
        Latent::new(x.shape().clone(), values)
    }
}

pub fn codec_encode(x: &Latent, codec: &Codec) -> Result<Latent> {
    codec.encode(x)
}

pub fn codec_decode(z: &Latent, codec: &Codec) -> Result<Latent> {
    codec.decode(z)
}
