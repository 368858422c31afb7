//! Glue between the corpus, the tokenizer, the prosody providers and the
//! generator: building conditioning, training sets, conversion pairs.

use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::eval::{evaluate_conversion, ContentProbe, MetricReport};
use crate::flow::FlowConfig;
use crate::model::{Conditioning, ConversionInput, ModelConfig, TrainItem, Variant, VcModel};
use crate::prosody::{extract_contour, prosody_embed, sample_cents, ProsodyProvider};
use crate::real::cast;
use crate::synthdata::{Corpus, ToyUtterance, MEL_DIM};
use crate::tokenizer::Codebook;
use crate::{derive_seed, seeded_rng, Error, Real, Result};

pub const CONVERTED_KIND: &str = "converted_mel";
pub const CONVERTED_VERSION: u32 = 1;

/// Transformer size; the rest of [`ModelConfig`] follows from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub width: usize,
    pub time_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Width of the learned pitch and energy token embeddings.
    pub prosody_token_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            width: 64,
            time_dim: 16,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            prosody_token_dim: 16,
        }
    }
}

/// `provider_dim` is the prosody-embedding width; only the embedding
/// variant uses it.
pub fn model_config(
    variant: Variant,
    shape: ModelShape,
    codebook: &Codebook,
    provider_dim: usize,
    frame_rate: f64,
) -> ModelConfig {
    ModelConfig {
        variant,
        mel_dim: MEL_DIM,
        codebook_size: codebook.k(),
        semantic_dim: codebook.embed_dim(),
        prosody_dim: match variant {
            Variant::Icl => 0,
            Variant::IclPitchEnergy => shape.prosody_token_dim,
            Variant::IclProsodyEmbed => provider_dim,
        },
        width: shape.width,
        time_dim: shape.time_dim,
        layers: shape.layers,
        heads: shape.heads,
        ffn_dim: shape.ffn_dim,
        frame_rate,
        stream: codebook.stream.clone(),
    }
}

/// Conditioning for one utterance. `cents` perturbs pitch before the
/// prosody provider runs; it is ignored by the other variants.
pub fn conditioning<F: Real>(
    corpus: &Corpus,
    utt: &ToyUtterance,
    codebook: &Codebook,
    variant: Variant,
    provider: Option<&dyn ProsodyProvider>,
    cents: Option<i32>,
) -> Result<Conditioning<F>> {
    let tokens = codebook.assign(utt.stream(&codebook.stream)?)?;
    match variant {
        Variant::Icl => Conditioning::for_variant(variant, tokens, None, None),
        Variant::IclPitchEnergy => {
            Conditioning::for_variant(variant, tokens, Some(&extract_contour(utt)), None)
        }
        Variant::IclProsodyEmbed => {
            let p =
                provider.ok_or_else(|| Error::Provider("no prosody provider configured".into()))?;
            let emb = prosody_embed(&corpus.world, utt, p, cents)?;
            Conditioning::for_variant(variant, tokens, None, Some(&emb))
        }
    }
}

/// One training item per utterance; each draws its own cents perturbation.
pub fn training_set<F: Real>(
    corpus: &Corpus,
    codebook: &Codebook,
    variant: Variant,
    provider: Option<&dyn ProsodyProvider>,
    seed: u64,
) -> Result<Vec<TrainItem<F>>> {
    let mut rng = seeded_rng(derive_seed(seed, 0xCE17));
    corpus
        .utterances
        .iter()
        .map(|u| {
            let cents = sample_cents(&mut rng);
            Ok(TrainItem {
                mel: cast(&u.mel),
                cond: conditioning(corpus, u, codebook, variant, provider, Some(cents))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub source: String,
    pub reference: String,
}

/// `n` source/reference pairs drawn with distinct speakers.
pub fn sample_pairs(corpus: &Corpus, n: usize, seed: u64) -> Result<Vec<Pair>> {
    let u = &corpus.utterances;
    if corpus.speakers.len() < 2 {
        return Err(Error::invalid("pairs need at least two speakers"));
    }
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = rng.random_range(0..u.len());
        let b = rng.random_range(0..u.len());
        if u[a].speaker != u[b].speaker {
            out.push(Pair {
                source: u[a].id.clone(),
                reference: u[b].id.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertOptions {
    pub seed: u64,
    /// Pairs integrated together in one batched solve.
    pub batch: usize,
    /// Length of the centered reference window used as the prompt; `None`
    /// keeps the whole reference.
    pub prompt_seconds: Option<f64>,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 10,
            prompt_seconds: Some(3.0),
        }
    }
}

/// Centered window of `seconds` within `len` frames.
pub fn prompt_window(len: usize, seconds: Option<f64>, frame_rate: f64) -> std::ops::Range<usize> {
    match seconds {
        Some(s) => {
            let n = ((s * frame_rate).round() as usize)
                .clamp(1, len.max(1))
                .min(len);
            let start = (len - n) / 2;
            start..start + n
        }
        None => 0..len,
    }
}

/// Converts each pair (source content, reference timbre). Conversions run
/// `batch` pairs at a time; each pair's noise comes from its own seed, so the
/// result does not depend on the batch size.
pub fn convert_pairs<F: Real>(
    model: &VcModel<F>,
    corpus: &Corpus,
    codebook: &Codebook,
    provider: Option<&dyn ProsodyProvider>,
    pairs: &[Pair],
    flow: &FlowConfig,
    opts: &ConvertOptions,
) -> Result<Vec<Array2<f64>>> {
    let variant = model.config.variant;
    let batch = opts.batch.max(1);
    let mut out = Vec::with_capacity(pairs.len());
    for (ci, chunk) in pairs.chunks(batch).enumerate() {
        let mut prepared = Vec::with_capacity(chunk.len());
        for p in chunk {
            let r = corpus.get(&p.reference)?;
            let s = corpus.get(&p.source)?;
            let w = prompt_window(r.frames(), opts.prompt_seconds, r.frame_rate);
            prepared.push((
                cast::<f64, F>(&r.mel.slice(ndarray::s![w.clone(), ..]).to_owned()),
                conditioning::<F>(corpus, r, codebook, variant, provider, None)?.slice(w)?,
                conditioning::<F>(corpus, s, codebook, variant, provider, None)?,
            ));
        }
        let requests: Vec<ConversionInput<'_, F>> = prepared
            .iter()
            .enumerate()
            .map(|(i, (m, rc, sc))| ConversionInput {
                reference_mel: m,
                reference: rc,
                source: sc,
                seed: derive_seed(opts.seed, (ci * batch + i) as u64),
            })
            .collect();
        out.extend(model.convert(&requests, flow)?.iter().map(cast::<F, f64>));
    }
    Ok(out)
}

/// Scores converted mels against their pairs.
pub fn evaluate_pairs(
    label: &str,
    corpus: &Corpus,
    probe: &ContentProbe,
    pairs: &[Pair],
    converted: &[Array2<f64>],
) -> Result<MetricReport> {
    if pairs.len() != converted.len() {
        return Err(Error::shape("converted set", pairs.len(), converted.len()));
    }
    let rows = pairs
        .iter()
        .zip(converted)
        .map(|(p, c)| {
            evaluate_conversion(
                c,
                corpus.get(&p.source)?,
                corpus.get(&p.reference)?,
                probe,
                &corpus.world,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(label, rows))
}

/// Writes one converted mel with the pair it came from.
pub fn write_converted(path: &Path, mel: &Array2<f64>, pair: &Pair) -> Result<()> {
    let mut c = Container::new(
        CONVERTED_KIND,
        CONVERTED_VERSION,
        serde_json::to_value(pair)?,
    );
    c.push_matrix_f64("mel", mel)?;
    c.write(path)
}

pub fn read_converted(path: &Path) -> Result<(Array2<f64>, Pair)> {
    let c = Container::read(path, CONVERTED_KIND, CONVERTED_VERSION)?;
    Ok((
        c.matrix_f64("mel")?,
        serde_json::from_value(c.meta.clone())?,
    ))
}
