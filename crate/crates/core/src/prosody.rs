//! Pitch and energy contours: extraction, per-utterance normalization,
//! 256-bin tokenization, cents perturbation and prosody-embedding providers.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Normal, StandardNormal};
use serde_json::json;

use crate::container::Container;
use crate::synthdata::{energy_probe, pitch_probe, ToyUtterance, World};
use crate::{seeded_rng, Error, Result};

pub const PROSODY_BINS: usize = 256;
/// Token for unvoiced pitch frames; sits just past the regular bins.
pub const UNVOICED_TOKEN: u32 = PROSODY_BINS as u32;
pub const PITCH_VOCAB: usize = PROSODY_BINS + 1;
pub const CLAMP: f64 = 4.0;
pub const CENTS_MENU: [i32; 4] = [-400, -200, 200, 400];

pub const EMBEDDING_KIND: &str = "prosody_embedding";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyContour {
    /// Hz, 0 when unvoiced.
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl ProsodyContour {
    pub fn new(pitch: Vec<f64>, energy: Vec<f64>) -> Result<Self> {
        if pitch.len() != energy.len() {
            return Err(Error::shape("contour length", pitch.len(), energy.len()));
        }
        if pitch
            .iter()
            .chain(&energy)
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::invalid(
                "pitch and energy must be finite and nonnegative",
            ));
        }
        Ok(Self { pitch, energy })
    }

    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }
}

/// Reads the contour the generator used for this utterance.
pub fn extract_contour(utt: &ToyUtterance) -> ProsodyContour {
    ProsodyContour {
        pitch: utt.pitch.clone(),
        energy: utt.energy.clone(),
    }
}

/// Estimates a contour from mel frames alone.
pub fn estimate_contour(mel: ArrayView2<'_, f64>) -> ProsodyContour {
    ProsodyContour {
        pitch: pitch_probe(mel),
        energy: energy_probe(mel),
    }
}

/// Normalized contour; `None` marks an unvoiced pitch frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedContour {
    pub pitch: Vec<Option<f64>>,
    pub energy: Vec<f64>,
}

/// Mean 0, population std 1. A (numerically) constant input maps to zeros.
pub fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if values.len() < 2 || std <= 1e-12 * (1.0 + mean.abs()) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// z-scores the present entries and leaves the gaps alone.
pub fn zscore_sparse(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let mut z = zscore(&present).into_iter();
    values
        .iter()
        .map(|v| v.map(|_| z.next().expect("one per present value")))
        .collect()
}

/// Per-utterance z-score of voiced pitch (Hz) and of energy.
pub fn normalize(contour: &ProsodyContour) -> NormalizedContour {
    let pitch: Vec<Option<f64>> = contour
        .pitch
        .iter()
        .map(|&p| (p > 0.0).then_some(p))
        .collect();
    NormalizedContour {
        pitch: zscore_sparse(&pitch),
        energy: zscore(&contour.energy),
    }
}

impl NormalizedContour {
    pub fn renormalize(&self) -> Self {
        Self {
            pitch: zscore_sparse(&self.pitch),
            energy: zscore(&self.energy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProsodyTokens {
    /// In `[0, 256]`; 256 is [`UNVOICED_TOKEN`].
    pub pitch: Vec<u32>,
    pub energy: Vec<u32>,
}

/// Clamps to [-4, 4] and bins uniformly; lower edges are inclusive.
pub fn bin_value(v: f64, bins: usize) -> u32 {
    let c = v.clamp(-CLAMP, CLAMP);
    let b = ((c + CLAMP) / (2.0 * CLAMP) * bins as f64).floor() as usize;
    b.min(bins - 1) as u32
}

pub fn tokenize_prosody(norm: &NormalizedContour, bins: usize) -> ProsodyTokens {
    ProsodyTokens {
        pitch: norm
            .pitch
            .iter()
            .map(|p| p.map_or(bins as u32, |v| bin_value(v, bins)))
            .collect(),
        energy: norm.energy.iter().map(|&v| bin_value(v, bins)).collect(),
    }
}

pub fn cents_ratio(cents: f64) -> f64 {
    2f64.powf(cents / 1200.0)
}

pub fn shift_pitch(pitch: &[f64], cents: f64) -> Vec<f64> {
    let r = cents_ratio(cents);
    pitch
        .iter()
        .map(|&p| if p > 0.0 { p * r } else { 0.0 })
        .collect()
}

/// Uniform draw from the perturbation menu.
pub fn sample_cents(rng: &mut crate::Rng) -> i32 {
    CENTS_MENU[rng.random_range(0..CENTS_MENU.len())]
}

/// Shifts every voiced frame by `cents` and re-renders the mel.
pub fn perturb_pitch(world: &World, utt: &ToyUtterance, cents: i32) -> Result<ToyUtterance> {
    world.rerender_with_pitch(utt, shift_pitch(&utt.pitch, cents as f64))
}

/// Source of frame-aligned prosody embeddings.
pub trait ProsodyProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn encode(&self, utt: &ToyUtterance) -> Result<Array2<f64>>;
}

/// Contour-shape encoder: normalized pitch, voicing, normalized energy and
/// their frame deltas through a fixed random projection and `tanh`. It never
/// sees the envelope, so it cannot carry timbre.
#[derive(Debug, Clone)]
pub struct ToyEmotionEncoder {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

pub const TOY_FEATURES: usize = 5;
pub const TOY_EMBED_DIM: usize = 8;
pub const TOY_ENCODER_SEED: u64 = 0xE2;

impl ToyEmotionEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let normal = Normal::new(0.0, 1.0 / (TOY_FEATURES as f64).sqrt()).expect("valid std");
        Self {
            weight: Array2::from_shape_simple_fn((dim, TOY_FEATURES), || rng.sample(normal)),
            bias: Array1::from_shape_simple_fn(dim, || 0.1 * rng.sample::<f64, _>(StandardNormal)),
        }
    }

    /// Raw per-frame features before projection.
    pub fn features(contour: &ProsodyContour) -> Array2<f64> {
        let n = normalize(contour);
        let t = contour.len();
        let zp: Vec<f64> = n.pitch.iter().map(|p| p.unwrap_or(0.0)).collect();
        let delta = |v: &[f64], i: usize| {
            let a = v[i.saturating_sub(1)];
            let b = v[(i + 1).min(t - 1)];
            0.5 * (b - a)
        };
        Array2::from_shape_fn((t, TOY_FEATURES), |(i, j)| match j {
            0 => zp[i],
            1 => f64::from(u8::from(n.pitch[i].is_some())),
            2 => n.energy[i],
            3 => delta(&zp, i),
            _ => delta(&n.energy, i),
        })
    }
}

impl Default for ToyEmotionEncoder {
    fn default() -> Self {
        Self::new(TOY_EMBED_DIM, TOY_ENCODER_SEED)
    }
}

impl ProsodyProvider for ToyEmotionEncoder {
    fn name(&self) -> &str {
        "toy-emotion"
    }

    fn dim(&self) -> usize {
        self.weight.nrows()
    }

    fn encode(&self, utt: &ToyUtterance) -> Result<Array2<f64>> {
        if utt.frames() == 0 {
            return Err(Error::Provider("empty utterance".into()));
        }
        let f = Self::features(&extract_contour(utt));
        Ok((f.dot(&self.weight.t()) + &self.bias).mapv(f64::tanh))
    }
}

/// Reads externally computed embeddings, one file per utterance id.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    pub dir: PathBuf,
    pub dim: usize,
}

impl PrecomputedProvider {
    pub fn new(dir: impl Into<PathBuf>, dim: usize) -> Self {
        Self {
            dir: dir.into(),
            dim,
        }
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.bin"))
    }
}

impl ProsodyProvider for PrecomputedProvider {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, utt: &ToyUtterance) -> Result<Array2<f64>> {
        let path = self.path_for(&utt.id);
        let (emb, rate) = read_embedding(&path)
            .map_err(|e| Error::Provider(format!("{}: {e}", path.display())))?;
        if emb.nrows() != utt.frames() || emb.ncols() != self.dim {
            return Err(Error::Provider(format!(
                "{}: expected {}x{}, found {}x{}",
                path.display(),
                utt.frames(),
                self.dim,
                emb.nrows(),
                emb.ncols()
            )));
        }
        if (rate - utt.frame_rate).abs() > 1e-9 {
            return Err(Error::Provider(format!(
                "{}: frame rate {rate} differs from utterance rate {}",
                path.display(),
                utt.frame_rate
            )));
        }
        Ok(emb)
    }
}

pub fn write_embedding(path: &Path, emb: &Array2<f64>, frame_rate: f64) -> Result<()> {
    let mut c = Container::new(
        EMBEDDING_KIND,
        EMBEDDING_VERSION,
        json!({ "frames": emb.nrows(), "h": emb.ncols(), "frame_rate": frame_rate }),
    );
    c.push_matrix_f64("embedding", emb)?;
    c.write(path)
}

/// Returns the embedding and its frame rate.
pub fn read_embedding(path: &Path) -> Result<(Array2<f64>, f64)> {
    let c = Container::read(path, EMBEDDING_KIND, EMBEDDING_VERSION)?;
    let emb = c.matrix_f64("embedding")?;
    let frames: usize = c.meta_field("frames")?;
    let h: usize = c.meta_field("h")?;
    if emb.dim() != (frames, h) {
        return Err(Error::Format {
            kind: EMBEDDING_KIND.into(),
            reason: "header disagrees with array shape".into(),
        });
    }
    Ok((emb, c.meta_field("frame_rate")?))
}

/// Applies the pitch perturbation first, then encodes.
pub fn prosody_embed(
    world: &World,
    utt: &ToyUtterance,
    provider: &dyn ProsodyProvider,
    cents: Option<i32>,
) -> Result<Array2<f64>> {
    let emb = match cents {
        Some(c) if c != 0 => provider.encode(&perturb_pitch(world, utt, c)?)?,
        _ => provider.encode(utt)?,
    };
    if emb.nrows() != utt.frames() || emb.iter().any(|v| !v.is_finite()) {
        return Err(Error::Provider(format!(
            "{} returned an unusable embedding",
            provider.name()
        )));
    }
    Ok(emb)
}

/// Means over `parts` equal time slices, concatenated; a fixed-size summary.
pub fn pooled(emb: ArrayView2<'_, f64>, parts: usize) -> Array1<f64> {
    let t = emb.nrows();
    let h = emb.ncols();
    let mut out = Array1::zeros(parts * h);
    for p in 0..parts {
        let a = p * t / parts;
        let b = ((p + 1) * t / parts).max(a + 1).min(t);
        let m = emb
            .slice(ndarray::s![a..b, ..])
            .mean_axis(ndarray::Axis(0))
            .expect("nonempty slice");
        out.slice_mut(ndarray::s![p * h..(p + 1) * h]).assign(&m);
    }
    out
}
