//! Objective metrics: cosine similarity of timbre estimates, pitch and energy
//! Pearson correlation, and frame-level content recovery.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::synthdata::{energy_probe, pitch_probe, timbre_probe, Corpus, ToyUtterance, World};
use crate::tokenizer::Codebook;
use crate::{Error, Result};

/// Why a metric has no value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Undefined {
    LengthMismatch,
    TooShort,
    ZeroNorm,
    ZeroVariance,
    FewVoicedFrames,
}

impl std::fmt::Display for Undefined {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::LengthMismatch => "length mismatch",
            Self::TooShort => "too few samples",
            Self::ZeroNorm => "zero-norm input",
            Self::ZeroVariance => "zero variance",
            Self::FewVoicedFrames => "fewer than 10 common voiced frames",
        };
        f.write_str(s)
    }
}

pub type Metric = std::result::Result<f64, Undefined>;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Metric {
    if a.len() != b.len() {
        return Err(Undefined::LengthMismatch);
    }
    if a.is_empty() {
        return Err(Undefined::TooShort);
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Undefined::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Metric {
    if x.len() != y.len() {
        return Err(Undefined::LengthMismatch);
    }
    if x.len() < 2 {
        return Err(Undefined::TooShort);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Undefined::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson over frames voiced in both tracks (pitch 0 = unvoiced).
pub fn pitch_correlation(a: &[f64], b: &[f64]) -> Metric {
    if a.len() != b.len() {
        return Err(Undefined::LengthMismatch);
    }
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .iter()
        .zip(b)
        .filter(|(p, q)| **p > 0.0 && **q > 0.0)
        .map(|(p, q)| (*p, *q))
        .unzip();
    if x.len() < 10 {
        return Err(Undefined::FewVoicedFrames);
    }
    pearson(&x, &y)
}

/// Maps k-means tokens of a feature stream back to content symbols through
/// the majority symbol of each cluster.
#[derive(Debug, Clone)]
pub struct ContentProbe {
    pub codebook: Codebook,
    pub label_map: Vec<u32>,
}

impl ContentProbe {
    /// Fits the cluster-to-symbol map on a corpus.
    pub fn fit(codebook: Codebook, corpus: &Corpus) -> Result<Self> {
        let k = codebook.k();
        let mut counts = vec![std::collections::BTreeMap::<u32, usize>::new(); k];
        for u in &corpus.utterances {
            let tokens = codebook.assign(u.stream(&codebook.stream)?)?;
            for (&tok, &sym) in tokens.iter().zip(&u.content) {
                *counts[tok as usize].entry(sym).or_default() += 1;
            }
        }
        let label_map = counts
            .iter()
            .map(|c| {
                c.iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map_or(0, |(&s, _)| s)
            })
            .collect();
        Ok(Self {
            codebook,
            label_map,
        })
    }

    pub fn decode(&self, world: &World, mel: ArrayView2<'_, f64>) -> Result<Vec<u32>> {
        let feats = world.ssl_features(mel, &self.codebook.stream)?;
        Ok(self
            .codebook
            .assign(&feats)?
            .into_iter()
            .map(|t| self.label_map[t as usize])
            .collect())
    }

    pub fn accuracy(&self, world: &World, mel: ArrayView2<'_, f64>, truth: &[u32]) -> Result<f64> {
        if mel.nrows() != truth.len() {
            return Err(Error::shape("content frames", truth.len(), mel.nrows()));
        }
        let decoded = self.decode(world, mel)?;
        let hits = decoded.iter().zip(truth).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / truth.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub source: String,
    pub reference: String,
    /// Timbre cosine against the reference speaker.
    pub secs: Option<f64>,
    /// Timbre cosine against the source speaker, for comparison.
    pub secs_source: Option<f64>,
    pub pitch_corr: Option<f64>,
    pub energy_corr: Option<f64>,
    pub content_accuracy: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl PairMetrics {
    pub fn closer_to_reference(&self) -> bool {
        matches!((self.secs, self.secs_source), (Some(r), Some(s)) if r > s)
    }
}

/// Scores a converted mel against its source and reference utterances.
pub fn evaluate_conversion(
    converted: &Array2<f64>,
    source: &ToyUtterance,
    reference: &ToyUtterance,
    probe: &ContentProbe,
    world: &World,
) -> Result<PairMetrics> {
    if converted.nrows() != source.frames() {
        return Err(Error::shape(
            "converted frames",
            source.frames(),
            converted.nrows(),
        ));
    }
    let mut undefined = Vec::new();
    let mut keep = |name: &str, m: Metric| match m {
        Ok(v) => Some(v),
        Err(why) => {
            undefined.push(format!("{name}: {why}"));
            None
        }
    };
    let conv_timbre = timbre_probe(converted.view())?;
    let secs = keep(
        "secs",
        cosine_similarity(&conv_timbre, &timbre_probe(reference.mel.view())?),
    );
    let secs_source = keep(
        "secs_source",
        cosine_similarity(&conv_timbre, &timbre_probe(source.mel.view())?),
    );
    let pitch_corr = keep(
        "pitch_corr",
        pitch_correlation(
            &pitch_probe(converted.view()),
            &pitch_probe(source.mel.view()),
        ),
    );
    let energy_corr = keep(
        "energy_corr",
        pearson(
            &energy_probe(converted.view()),
            &energy_probe(source.mel.view()),
        ),
    );
    Ok(PairMetrics {
        source: source.id.clone(),
        reference: reference.id.clone(),
        secs,
        secs_source,
        pitch_corr,
        energy_corr,
        content_accuracy: probe.accuracy(world, converted.view(), &source.content)?,
        undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub secs: Option<f64>,
    pub secs_source: Option<f64>,
    pub pitch_corr: Option<f64>,
    pub energy_corr: Option<f64>,
    pub content_accuracy: Option<f64>,
    /// Fraction of pairs whose output is closer to the reference timbre.
    pub reference_win_rate: Option<f64>,
    pub pairs: Vec<PairMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn new(label: &str, pairs: Vec<PairMetrics>) -> Self {
        let n = pairs.len();
        Self {
            label: label.to_string(),
            secs: mean_defined(pairs.iter().map(|p| p.secs)),
            secs_source: mean_defined(pairs.iter().map(|p| p.secs_source)),
            pitch_corr: mean_defined(pairs.iter().map(|p| p.pitch_corr)),
            energy_corr: mean_defined(pairs.iter().map(|p| p.energy_corr)),
            content_accuracy: mean_defined(pairs.iter().map(|p| Some(p.content_accuracy))),
            reference_win_rate: (n > 0).then(|| {
                pairs.iter().filter(|p| p.closer_to_reference()).count() as f64 / n as f64
            }),
            pairs,
        }
    }

    pub fn has_undefined(&self) -> bool {
        self.pairs.iter().any(|p| !p.undefined.is_empty())
    }

    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("null".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:<16} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "source", "reference", "secs", "secs_src", "pitch_r", "energy_r", "content"
        );
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{:<16} {:<16} {:>8} {:>8} {:>8} {:>8} {:>8.4}",
                p.source,
                p.reference,
                f(p.secs),
                f(p.secs_source),
                f(p.pitch_corr),
                f(p.energy_corr),
                p.content_accuracy
            );
        }
        let _ = writeln!(
            s,
            "{:<33} {:>8} {:>8} {:>8} {:>8} {:>8}",
            format!("mean [{}]", self.label),
            f(self.secs),
            f(self.secs_source),
            f(self.pitch_corr),
            f(self.energy_corr),
            f(self.content_accuracy)
        );
        let _ = writeln!(
            s,
            "closer to reference than source: {}",
            f(self.reference_win_rate)
        );
        let _ = writeln!(
            s,
            "content = frame accuracy of decoded content symbols (intelligibility surrogate)"
        );
        s
    }
}

/// Ridge-regularized least squares with an intercept. Returns the
/// (features + 1) x outputs coefficient matrix, intercept in the last row.
pub fn fit_linear(x: &Array2<f64>, y: &Array2<f64>, ridge: f64) -> Result<Array2<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape("probe rows", x.nrows(), y.nrows()));
    }
    let (n, d) = x.dim();
    let xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[[i, j]] } else { 1.0 });
    let mut gram = xa.transpose() * &xa;
    for j in 0..d {
        gram[(j, j)] += ridge;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("probe design is singular"))?;
    let mut w = Array2::zeros((d + 1, y.ncols()));
    for k in 0..y.ncols() {
        let yk = DVector::from_fn(n, |i, _| y[[i, k]]);
        let sol = chol.solve(&(xa.transpose() * yk));
        for j in 0..=d {
            w[[j, k]] = sol[j];
        }
    }
    Ok(w)
}

pub fn predict_linear(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols();
    x.dot(&w.slice(ndarray::s![..d, ..])) + w.row(d)
}

/// Coefficient of determination pooled over output columns.
pub fn r_squared(y: &Array2<f64>, pred: &Array2<f64>) -> f64 {
    let mean = y.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let ss_res = (y - pred).mapv(|v| v * v).sum();
    let ss_tot = (y - &mean).mapv(|v| v * v).sum();
    1.0 - ss_res / ss_tot
}
