//! A small transformer velocity model with fixed random weights.
//!
//! The latent is cut into `p × p` spatial patches (per frame for rank-4
//! latents), each patch becomes a token, and every layer runs RMS-normed
//! self-attention, cross-attention to the prompt embeddings and a GELU
//! feed-forward block, each with a residual connection. Every attention map
//! passes through an optional [`AttentionHook`] after the softmax and before
//! it is applied to the values.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::control::{AttentionMaps, LayerAttention};
use super::prompt::{Prompt, DEFAULT_TEXT_WIDTH};
use crate::error::{Error, Result};
use crate::latent::{Latent, Shape};
use crate::scheduler::Denoiser;

/// Upper bound on patch tokens; self maps are `tokens²` per head.
pub const MAX_TOKENS: usize = 4096;

/// Reference size of the full-scale audio DiT: depth, hidden width, parameter count.
pub const REFERENCE_DIT_DEPTH: usize = 96;
pub const REFERENCE_DIT_HIDDEN: usize = 1024;
pub const REFERENCE_DIT_PARAMETERS: u64 = 1_620_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patch_size: usize,
    pub text_width: usize,
    /// Latent channels the input projection is built for.
    pub channels: usize,
    pub weight_seed: u64,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        ToyDenoiserConfig {
            layers: 2,
            heads: 4,
            width: 64,
            patch_size: 2,
            text_width: DEFAULT_TEXT_WIDTH,
            channels: 1,
            weight_seed: 0,
        }
    }
}

impl ToyDenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("width", self.width),
            ("patch_size", self.patch_size),
            ("text_width", self.text_width),
            ("channels", self.channels),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Precondition(format!("toy denoiser {name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Precondition(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width > 4096 || self.layers > 64 || self.heads > 64 || self.patch_size > 64 {
            return Err(Error::Precondition("toy denoiser config is too large".into()));
        }
        Ok(())
    }

    fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::SelfAttention => "self",
            AttentionKind::CrossAttention => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSite {
    pub layer: usize,
    pub head: usize,
    pub kind: AttentionKind,
    pub t: f64,
}

/// Observes, and may replace, every attention map of a forward pass.
///
/// The returned map is the one multiplied into the values. It must keep the
/// shape of the map it was given.
pub trait AttentionHook {
    fn on_attention(&mut self, site: &AttentionSite, map: Array2<f64>) -> Result<Array2<f64>>;
}

impl<F> AttentionHook for F
where
    F: FnMut(&AttentionSite, Array2<f64>) -> Result<Array2<f64>>,
{
    fn on_attention(&mut self, site: &AttentionSite, map: Array2<f64>) -> Result<Array2<f64>> {
        self(site, map)
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    self_q: Array2<f64>,
    self_k: Array2<f64>,
    self_v: Array2<f64>,
    self_o: Array2<f64>,
    cross_q: Array2<f64>,
    cross_k: Array2<f64>,
    cross_v: Array2<f64>,
    cross_o: Array2<f64>,
    ff_in: Array2<f64>,
    ff_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: ToyDenoiserConfig,
    embed: Array2<f64>,
    time: Array2<f64>,
    layers: Vec<LayerWeights>,
    unembed: Array2<f64>,
}

fn dense(rng: &mut ChaCha20Rng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let scale = gain / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Sinusoidal features of a scalar, `width` wide.
fn sinusoid(x: f64, width: usize) -> Array1<f64> {
    let half = width / 2;
    let mut out = Array1::zeros(width);
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        out[2 * k] = (x * freq).sin();
        out[2 * k + 1] = (x * freq).cos();
    }
    out
}

fn rms_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

fn softmax_rows(mut scores: Array2<f64>) -> Array2<f64> {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    scores
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Patch grid of a latent: (frames, rows of patches, columns of patches).
struct Patching {
    channels: usize,
    frames: usize,
    height: usize,
    width: usize,
    p: usize,
}

impl Patching {
    fn new(shape: &Shape, cfg: &ToyDenoiserConfig) -> Result<Self> {
        let d = shape.dims();
        let (channels, frames, height, width) = match *d {
            [c, h, w] => (c, 1, h, w),
            [c, f, h, w] => (c, f, h, w),
            _ => unreachable!("Shape guarantees rank 3 or 4"),
        };
        let p = cfg.patch_size;
        if channels != cfg.channels {
            return Err(Error::ShapeMismatch(format!(
                "toy denoiser expects {} channels, latent {shape} has {channels}",
                cfg.channels
            )));
        }
        if height % p != 0 || width % p != 0 {
            return Err(Error::ShapeMismatch(format!(
                "latent {shape} is not divisible into {p}x{p} patches"
            )));
        }
        let patching = Patching {
            channels,
            frames,
            height,
            width,
            p,
        };
        if patching.tokens() > MAX_TOKENS {
            return Err(Error::ShapeMismatch(format!(
                "latent {shape} yields {} patch tokens, limit is {MAX_TOKENS}",
                patching.tokens()
            )));
        }
        Ok(patching)
    }

    fn tokens(&self) -> usize {
        self.frames * (self.height / self.p) * (self.width / self.p)
    }

    /// Calls `f(token, feature, flat_index)` for every latent element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (p, ph, pw) = (self.p, self.height / self.p, self.width / self.p);
        for c in 0..self.channels {
            for fr in 0..self.frames {
                for y in 0..self.height {
                    for x in 0..self.width {
                        let token = (fr * ph + y / p) * pw + x / p;
                        let feature = (c * p + y % p) * p + x % p;
                        let flat = ((c * self.frames + fr) * self.height + y) * self.width + x;
                        f(token, feature, flat);
                    }
                }
            }
        }
    }
}

impl ToyDenoiser {
    pub fn new(cfg: ToyDenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.weight_seed);
        let w = cfg.width;
        let embed = dense(&mut rng, cfg.patch_dim(), w, 1.0);
        let time = dense(&mut rng, w, w, 1.0);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                self_q: dense(&mut rng, w, w, 1.0),
                self_k: dense(&mut rng, w, w, 1.0),
                self_v: dense(&mut rng, w, w, 1.0),
                self_o: dense(&mut rng, w, w, 0.5),
                cross_q: dense(&mut rng, w, w, 1.0),
                cross_k: dense(&mut rng, cfg.text_width, w, 1.0),
                cross_v: dense(&mut rng, cfg.text_width, w, 1.0),
                cross_o: dense(&mut rng, w, w, 0.5),
                ff_in: dense(&mut rng, w, 4 * w, 1.0),
                ff_out: dense(&mut rng, 4 * w, w, 0.5),
            })
            .collect();
        let unembed = dense(&mut rng, w, cfg.patch_dim(), 1.0);
        Ok(ToyDenoiser {
            cfg,
            embed,
            time,
            layers,
            unembed,
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.cfg
    }

    /// Velocity at `(z, t)` under `prompt`, plus the attention maps actually consumed.
    pub fn forward(
        &self,
        z: &Latent,
        t: f64,
        prompt: &Prompt,
        mut hook: Option<&mut dyn AttentionHook>,
    ) -> Result<(Latent, AttentionMaps)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTime(format!("toy denoiser evaluated at t={t}")));
        }
        let text = prompt.embeddings();
        if text.ncols() != self.cfg.text_width {
            return Err(Error::ShapeMismatch(format!(
                "prompt embeddings are {} wide, model expects {}",
                text.ncols(),
                self.cfg.text_width
            )));
        }
        let patching = Patching::new(z.shape(), &self.cfg)?;
        let n_tokens = patching.tokens();

        let mut patches = Array2::zeros((n_tokens, self.cfg.patch_dim()));
        let values = z.values();
        patching.for_each(|tok, feat, flat| patches[[tok, feat]] = values[flat]);

        let mut h = patches.dot(&self.embed);
        let t_emb = sinusoid(1000.0 * t, self.cfg.width).dot(&self.time);
        for (i, mut row) in h.rows_mut().into_iter().enumerate() {
            row += &sinusoid(i as f64, self.cfg.width);
            row += &t_emb;
        }

        let mut record = AttentionMaps::default();
        for (li, lw) in self.layers.iter().enumerate() {
            let mut layer = LayerAttention::default();

            let normed = rms_norm(&h);
            let out = self.attend(
                &normed,
                normed.view(),
                [&lw.self_q, &lw.self_k, &lw.self_v, &lw.self_o],
                AttentionSite {
                    layer: li,
                    head: 0,
                    kind: AttentionKind::SelfAttention,
                    t,
                },
                &mut hook,
                &mut layer.self_maps,
            )?;
            h += &out;

            let normed = rms_norm(&h);
            let out = self.attend(
                &normed,
                text.view(),
                [&lw.cross_q, &lw.cross_k, &lw.cross_v, &lw.cross_o],
                AttentionSite {
                    layer: li,
                    head: 0,
                    kind: AttentionKind::CrossAttention,
                    t,
                },
                &mut hook,
                &mut layer.cross_maps,
            )?;
            h += &out;

            let normed = rms_norm(&h);
            let hidden = normed.dot(&lw.ff_in).mapv_into(gelu);
            h += &hidden.dot(&lw.ff_out);

            record.layers.push(layer);
        }

        let out = rms_norm(&h).dot(&self.unembed);
        let mut velocity = vec![0.0; z.len()];
        patching.for_each(|tok, feat, flat| velocity[flat] = out[[tok, feat]]);
        let velocity = Latent::new(z.shape().clone(), velocity)
            .map_err(|_| Error::NonFiniteVelocity { t })?;
        Ok((velocity, record))
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        queries: &Array2<f64>,
        keys: ArrayView2<f64>,
        [wq, wk, wv, wo]: [&Array2<f64>; 4],
        site: AttentionSite,
        hook: &mut Option<&mut dyn AttentionHook>,
        consumed: &mut Vec<Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let dh = self.cfg.width / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = queries.dot(wq);
        let k = keys.dot(wk);
        let v = keys.dot(wv);
        let mut concat = Array2::zeros((queries.nrows(), self.cfg.width));
        for head in 0..self.cfg.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let map = softmax_rows(scores);
            let expected = map.dim();
            let map = match hook.as_deref_mut() {
                Some(hook) => {
                    let site = AttentionSite { head, ..site };
                    let edited = hook.on_attention(&site, map)?;
                    if edited.dim() != expected {
                        return Err(Error::HookShapeViolation {
                            kind: site.kind.name(),
                            expected,
                            got: edited.dim(),
                        });
                    }
                    edited
                }
                None => map,
            };
            concat.slice_mut(cols).assign(&map.dot(&v.slice(cols)));
            consumed.push(map);
        }
        Ok(concat.dot(wo))
    }
}

impl Denoiser<Prompt> for ToyDenoiser {
    fn velocity(&self, z: &Latent, t: f64, prompt: &Prompt) -> Result<Latent> {
        self.forward(z, t, prompt, None).map(|(v, _)| v)
    }
}

/// Sum over heads of the attention each latent position pays to each token, for inspection.
pub fn mean_cross_attention(maps: &AttentionMaps) -> Option<Array2<f64>> {
    let all: Vec<&Array2<f64>> = maps.layers.iter().flat_map(|l| &l.cross_maps).collect();
    let first = all.first()?;
    let mut acc = Array2::zeros(first.dim());
    for m in &all {
        acc += *m;
    }
    Some(acc / all.len() as f64)
}
