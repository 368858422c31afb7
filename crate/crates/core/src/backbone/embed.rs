//! Sinusoidal embeddings for the flow time `t` and for frame positions.

use ndarray::Array2;

use crate::{Error, Result};

/// Highest angular frequency (rad per unit `t`) in the time embedding. The
/// lowest is 1 rad, which keeps the embedding injective on `[0, 1]`.
pub const TIME_MAX_FREQUENCY: f64 = 1000.0;

/// Sinusoidal embedding of a flow time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    pub t: f64,
    pub embedding: Vec<f64>,
}

/// Frequencies of the time embedding, geometric from 1 to
/// [`TIME_MAX_FREQUENCY`].
pub fn time_frequencies(half: usize) -> Vec<f64> {
    if half == 1 {
        return vec![1.0];
    }
    (0..half)
        .map(|j| TIME_MAX_FREQUENCY.powf(j as f64 / (half - 1) as f64))
        .collect()
}

/// `[sin(w_0 t) .. sin(w_{h-1} t), cos(w_0 t) .. cos(w_{h-1} t)]`.
pub fn sinusoidal_time_embed(t: f64, dim: usize) -> Result<TimeEmbedding> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
    }
    let freqs = time_frequencies(dim / 2);
    let mut embedding = Vec::with_capacity(dim);
    embedding.extend(freqs.iter().map(|w| (w * t).sin()));
    embedding.extend(freqs.iter().map(|w| (w * t).cos()));
    Ok(TimeEmbedding { t, embedding })
}

/// Transformer-style frame position table, `len x dim`, same sin/cos halves
/// layout as the time embedding with frequencies `10000^(-j/half)`.
pub fn frame_positions(len: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut pe = Array2::zeros((len, dim));
    for i in 0..len {
        for j in 0..half {
            let w = 10000f64.powf(-(j as f64) / half as f64);
            pe[[i, j]] = (i as f64 * w).sin();
            pe[[i, half + j]] = (i as f64 * w).cos();
        }
    }
    pe
}
