//! Mask-and-reconstruct training masks and inference prompt assembly.
//!
//! During training one contiguous region of 2 to 3 seconds stays visible and
//! every other frame is a reconstruction target. At conversion time the
//! reference utterance is the visible prompt and the whole source span is
//! generated.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::{Error, Real, Result};

/// Shortest visible region during training, in seconds.
pub const MIN_VISIBLE_SECONDS: f64 = 2.0;
/// Longest visible region during training, in seconds.
pub const MAX_VISIBLE_SECONDS: f64 = 3.0;

/// Per-frame flags, `true` = masked (to be generated).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    flags: Vec<bool>,
}

impl MaskSpec {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn all(len: usize, masked: bool) -> Self {
        Self {
            flags: vec![masked; len],
        }
    }

    /// Everything masked except `visible`.
    pub fn with_visible(len: usize, visible: std::ops::Range<usize>) -> Self {
        let flags = (0..len).map(|i| !visible.contains(&i)).collect();
        Self { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_masked(&self, frame: usize) -> bool {
        self.flags[frame]
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Maximal runs of unmasked frames.
    pub fn visible_runs(&self) -> Vec<std::ops::Range<usize>> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &m) in self.flags.iter().enumerate() {
            match (m, start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    runs.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push(s..self.flags.len());
        }
        runs
    }

    pub fn concat(&self, other: &MaskSpec) -> MaskSpec {
        let mut flags = self.flags.clone();
        flags.extend_from_slice(&other.flags);
        MaskSpec { flags }
    }
}

/// Visible-region length bounds in frames for a frame rate.
pub fn visible_frame_bounds(frame_rate: f64) -> (usize, usize) {
    (
        (MIN_VISIBLE_SECONDS * frame_rate).round() as usize,
        (MAX_VISIBLE_SECONDS * frame_rate).round() as usize,
    )
}

/// Draws a training mask: one contiguous visible region whose frame count is
/// uniform over the 2 to 3 second range, placed uniformly; the complement is
/// masked. Utterances too short for a 2 s region get a visible region of half
/// their length.
pub fn sample_training_mask(
    num_frames: usize,
    frame_rate: f64,
    rng: &mut crate::Rng,
) -> Result<MaskSpec> {
    if num_frames < 2 {
        return Err(Error::invalid(format!(
            "training mask needs at least 2 frames, got {num_frames}"
        )));
    }
    if !(frame_rate > 0.0) {
        return Err(Error::invalid("frame rate must be positive"));
    }
    let (lo, hi) = visible_frame_bounds(frame_rate);
    let visible = if num_frames < lo + 1 {
        (num_frames / 2).max(1)
    } else {
        rng.random_range(lo..=hi.min(num_frames - 1))
    };
    let start = rng.random_range(0..=num_frames - visible);
    Ok(MaskSpec::with_visible(num_frames, start..start + visible))
}

/// Replaces masked frames with standard-normal noise; visible frames are
/// copied unchanged.
pub fn apply_mask<F: Real>(
    mel: &Array2<F>,
    mask: &MaskSpec,
    rng: &mut crate::Rng,
) -> Result<Array2<F>> {
    if mel.nrows() != mask.len() {
        return Err(Error::shape("mask length", mel.nrows(), mask.len()));
    }
    let mut out = mel.clone();
    for (mut row, &m) in out.outer_iter_mut().zip(mask.flags()) {
        if m {
            row.mapv_inplace(|_| F::of(rng.sample(StandardNormal)));
        }
    }
    Ok(out)
}

/// Conditioning and initial state for one conversion.
#[derive(Debug, Clone)]
pub struct InferencePrompt<F> {
    /// Semantic embeddings, reference rows then source rows.
    pub s_concat: Array2<F>,
    /// Reference mel rows, then noise rows for the source span.
    pub m_init: Array2<F>,
    /// `false` on reference rows, `true` on source rows.
    pub mask: MaskSpec,
    pub p_concat: Option<Array2<F>>,
    pub reference_frames: usize,
}

impl<F: Real> InferencePrompt<F> {
    pub fn source_frames(&self) -> usize {
        self.mask.len() - self.reference_frames
    }

    /// The generated source span: the last `T_s` rows of an integrated state.
    pub fn generated<'a>(&self, output: &'a Array2<F>) -> ndarray::ArrayView2<'a, F> {
        output.slice(s![self.reference_frames.., ..])
    }
}

/// Concatenates reference and source along time; the reference mel is the
/// visible prompt and the source mel span starts as noise.
pub fn build_inference_prompt<F: Real>(
    ref_mel: &Array2<F>,
    ref_s: &Array2<F>,
    src_s: &Array2<F>,
    ref_p: Option<&Array2<F>>,
    src_p: Option<&Array2<F>>,
    rng: &mut crate::Rng,
) -> Result<InferencePrompt<F>> {
    let (tr, ts) = (ref_mel.nrows(), src_s.nrows());
    if tr == 0 {
        return Err(Error::invalid(
            "in-context prompt needs a non-empty reference",
        ));
    }
    if ts == 0 {
        return Err(Error::invalid("source span is empty"));
    }
    if ref_s.nrows() != tr {
        return Err(Error::shape("reference semantic rows", tr, ref_s.nrows()));
    }
    if ref_s.ncols() != src_s.ncols() {
        return Err(Error::shape("semantic dim", ref_s.ncols(), src_s.ncols()));
    }
    let p_concat = match (ref_p, src_p) {
        (None, None) => None,
        (Some(rp), Some(sp)) => {
            if rp.nrows() != tr || sp.nrows() != ts {
                return Err(Error::shape(
                    "prosody rows",
                    format!("{tr}+{ts}"),
                    format!("{}+{}", rp.nrows(), sp.nrows()),
                ));
            }
            if rp.ncols() != sp.ncols() {
                return Err(Error::shape("prosody dim", rp.ncols(), sp.ncols()));
            }
            Some(concatenate![Axis(0), *rp, *sp])
        }
        _ => {
            return Err(Error::invalid(
                "prosody must be given for both reference and source or neither",
            ))
        }
    };
    let noise =
        Array2::from_shape_simple_fn((ts, ref_mel.ncols()), || F::of(rng.sample(StandardNormal)));
    Ok(InferencePrompt {
        s_concat: concatenate![Axis(0), *ref_s, *src_s],
        m_init: concatenate![Axis(0), *ref_mel, noise],
        mask: MaskSpec::all(tr, false).concat(&MaskSpec::all(ts, true)),
        p_concat,
        reference_frames: tr,
    })
}
