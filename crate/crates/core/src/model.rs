//! The conditioned voice-conversion generator: backbone vector field plus the
//! learnable token table and, for the pitch/energy variant, prosody tables.

use std::path::Path;

use ndarray::{concatenate, Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis, IxDyn};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{BackboneConfig, NetworkParams, ParamSet};
use crate::container::{ArrayData, Container};
use crate::flow::{
    cfm_loss_with_draws, integrate, integrate_segments, CfmExample, FlowConfig, MaskPolicy,
    PathDraw,
};
use crate::icl::{apply_mask, build_inference_prompt, MaskSpec};
use crate::prosody::{normalize, tokenize_prosody, ProsodyTokens, PITCH_VOCAB, PROSODY_BINS};
use crate::real::cast;
use crate::tokenizer::{embed, embed_grad, Codebook};
use crate::{derive_seed, seeded_rng, Error, Real, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "icl")]
    Icl,
    #[serde(rename = "icl+pitch_energy")]
    IclPitchEnergy,
    #[serde(rename = "icl+prosody_embed")]
    IclProsodyEmbed,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Self::Icl, Self::IclPitchEnergy, Self::IclProsodyEmbed];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Icl => "icl",
            Self::IclPitchEnergy => "icl+pitch_energy",
            Self::IclProsodyEmbed => "icl+prosody_embed",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown variant {s} (expected icl, icl+pitch_energy or icl+prosody_embed)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub mel_dim: usize,
    pub codebook_size: usize,
    pub semantic_dim: usize,
    /// Width of the prosody channel; 0 for the plain variant.
    pub prosody_dim: usize,
    pub width: usize,
    pub time_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub frame_rate: f64,
    /// Feature stream the codebook was fitted on.
    pub stream: String,
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.semantic_dim + self.mel_dim + self.prosody_dim
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_dim: self.input_dim(),
            output_dim: self.mel_dim,
            width: self.width,
            time_dim: self.time_dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.variant, self.prosody_dim) {
            (Variant::Icl, 0) => {}
            (Variant::Icl, _) => {
                return Err(Error::invalid("the icl variant has no prosody channel"))
            }
            (_, 0) => {
                return Err(Error::invalid(format!(
                    "{} needs a prosody channel",
                    self.variant
                )))
            }
            _ => {}
        }
        if self.codebook_size < 2 || self.semantic_dim == 0 || self.mel_dim == 0 {
            return Err(Error::invalid(
                "codebook, semantic and mel dims must be positive",
            ));
        }
        self.backbone().validate()
    }
}

/// Per-utterance prosody conditioning.
#[derive(Debug, Clone, PartialEq)]
pub enum ProsodyInput<F> {
    None,
    Tokens(ProsodyTokens),
    Embedding(Array2<F>),
}

/// Everything the generator sees for one utterance besides the mel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning<F> {
    pub tokens: Vec<u32>,
    pub prosody: ProsodyInput<F>,
}

impl<F: Real> Conditioning<F> {
    pub fn frames(&self) -> usize {
        self.tokens.len()
    }

    /// Builds conditioning from semantic tokens plus the variant's prosody
    /// source: contour tokens from `(pitch, energy)` or a provider embedding.
    pub fn for_variant(
        variant: Variant,
        tokens: Vec<u32>,
        contour: Option<&crate::prosody::ProsodyContour>,
        embedding: Option<&Array2<f64>>,
    ) -> Result<Self> {
        let prosody = match variant {
            Variant::Icl => ProsodyInput::None,
            Variant::IclPitchEnergy => {
                let c = contour
                    .ok_or_else(|| Error::invalid("pitch/energy variant needs a contour"))?;
                ProsodyInput::Tokens(tokenize_prosody(&normalize(c), PROSODY_BINS))
            }
            Variant::IclProsodyEmbed => {
                ProsodyInput::Embedding(cast(embedding.ok_or_else(|| {
                    Error::invalid("prosody-embedding variant needs an embedding")
                })?))
            }
        };
        let c = Self { tokens, prosody };
        c.check_alignment()?;
        Ok(c)
    }

    /// Frames `range` of every channel.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.frames() {
            return Err(Error::invalid(format!(
                "frames {range:?} outside 0..{}",
                self.frames()
            )));
        }
        let prosody = match &self.prosody {
            ProsodyInput::None => ProsodyInput::None,
            ProsodyInput::Tokens(t) => ProsodyInput::Tokens(ProsodyTokens {
                pitch: t.pitch[range.clone()].to_vec(),
                energy: t.energy[range.clone()].to_vec(),
            }),
            ProsodyInput::Embedding(e) => {
                ProsodyInput::Embedding(e.slice(ndarray::s![range.clone(), ..]).to_owned())
            }
        };
        Ok(Self {
            tokens: self.tokens[range].to_vec(),
            prosody,
        })
    }

    fn check_alignment(&self) -> Result<()> {
        let t = self.frames();
        let ok = match &self.prosody {
            ProsodyInput::None => true,
            ProsodyInput::Tokens(p) => p.pitch.len() == t && p.energy.len() == t,
            ProsodyInput::Embedding(e) => e.nrows() == t,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "prosody conditioning is not frame-aligned with the tokens",
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VcModel<F> {
    pub config: ModelConfig,
    pub network: NetworkParams<F>,
    pub token_table: Array2<F>,
    pub pitch_table: Option<Array2<F>>,
    pub energy_table: Option<Array2<F>>,
}

impl<F: Real> ParamSet<F> for VcModel<F> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut t = self.network.tensors();
        t.push(("semantic.embed".into(), self.token_table.view().into_dyn()));
        if let (Some(p), Some(e)) = (&self.pitch_table, &self.energy_table) {
            t.push(("prosody.pitch_embed".into(), p.view().into_dyn()));
            t.push(("prosody.energy_embed".into(), e.view().into_dyn()));
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut t = self.network.tensors_mut();
        t.push(self.token_table.view_mut().into_dyn());
        if let (Some(p), Some(e)) = (&mut self.pitch_table, &mut self.energy_table) {
            t.push(p.view_mut().into_dyn());
            t.push(e.view_mut().into_dyn());
        }
        t
    }
}

/// One training utterance: clean mel and conditioning.
#[derive(Debug, Clone)]
pub struct TrainItem<F> {
    pub mel: Array2<F>,
    pub cond: Conditioning<F>,
}

/// Result of [`VcModel::loss_and_grads`].
#[derive(Debug, Clone)]
pub struct BatchLoss<F> {
    pub loss: f64,
    pub grads: VcModel<F>,
}

/// A single conversion request.
#[derive(Debug, Clone)]
pub struct ConversionInput<'a, F> {
    pub reference_mel: &'a Array2<F>,
    pub reference: &'a Conditioning<F>,
    pub source: &'a Conditioning<F>,
    /// Seeds the initial noise of the source span.
    pub seed: u64,
}

impl<F: Real> VcModel<F> {
    /// Network from `seed`, token table from the codebook, prosody tables
    /// standard normal.
    pub fn init(config: ModelConfig, codebook: &Codebook, seed: u64) -> Result<Self> {
        config.validate()?;
        if codebook.k() != config.codebook_size || codebook.embed_dim() != config.semantic_dim {
            return Err(Error::invalid(format!(
                "codebook is {}x{}, model expects {}x{}",
                codebook.k(),
                codebook.embed_dim(),
                config.codebook_size,
                config.semantic_dim
            )));
        }
        let network = NetworkParams::init(config.backbone(), seed)?;
        let (pitch_table, energy_table) = if config.variant == Variant::IclPitchEnergy {
            let mut rng = seeded_rng(derive_seed(seed, 3));
            let mut table = |rows| {
                Array2::from_shape_simple_fn((rows, config.prosody_dim), || {
                    F::of(rng.sample(StandardNormal))
                })
            };
            (Some(table(PITCH_VOCAB)), Some(table(PROSODY_BINS)))
        } else {
            (None, None)
        };
        Ok(Self {
            token_table: cast(&codebook.embed_table),
            network,
            pitch_table,
            energy_table,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for mut t in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    /// Semantic and prosody rows for one utterance.
    pub fn conditioning_rows(
        &self,
        cond: &Conditioning<F>,
    ) -> Result<(Array2<F>, Option<Array2<F>>)> {
        cond.check_alignment()?;
        let s = embed(&self.token_table, &cond.tokens)?;
        let p = match (&cond.prosody, self.config.variant) {
            (ProsodyInput::None, Variant::Icl) => None,
            (ProsodyInput::Tokens(tok), Variant::IclPitchEnergy) => {
                let pt = self.pitch_table.as_ref().expect("variant carries tables");
                let et = self.energy_table.as_ref().expect("variant carries tables");
                Some(embed(pt, &tok.pitch)? + embed(et, &tok.energy)?)
            }
            (ProsodyInput::Embedding(e), Variant::IclProsodyEmbed) => {
                if e.ncols() != self.config.prosody_dim {
                    return Err(Error::shape(
                        "prosody embedding dim",
                        self.config.prosody_dim,
                        e.ncols(),
                    ));
                }
                Some(e.clone())
            }
            _ => {
                return Err(Error::invalid(format!(
                    "conditioning does not match the {} variant",
                    self.config.variant
                )))
            }
        };
        Ok((s, p))
    }

    /// Masked CFM loss and gradients for every trainable tensor.
    pub fn loss_and_grads(
        &self,
        items: &[&TrainItem<F>],
        masks: &[MaskSpec],
        draws: &[PathDraw<F>],
        flow: &FlowConfig,
    ) -> Result<BatchLoss<F>> {
        let rows: Vec<(Array2<F>, Option<Array2<F>>)> = items
            .iter()
            .map(|it| self.conditioning_rows(&it.cond))
            .collect::<Result<_>>()?;
        let examples: Vec<CfmExample<'_, F>> = items
            .iter()
            .zip(&rows)
            .zip(masks)
            .map(|((it, (s, p)), m)| CfmExample {
                x1: &it.mel,
                s_embed: Some(s),
                p_embed: p.as_ref(),
                mask: m,
            })
            .collect();
        let out = cfm_loss_with_draws(&self.network, &examples, draws, flow, MaskPolicy::Lenient)?;
        let mut grads = self.zeros_like();
        grads.network = out.grads;
        for (it, (ds, dp)) in items.iter().zip(out.d_s_embed.iter().zip(&out.d_p_embed)) {
            let ds = ds.as_ref().expect("semantic channel always present");
            grads.token_table += &embed_grad(self.config.codebook_size, &it.cond.tokens, ds)?;
            if let (ProsodyInput::Tokens(tok), Some(dp)) = (&it.cond.prosody, dp) {
                *grads.pitch_table.as_mut().expect("tables") +=
                    &embed_grad(PITCH_VOCAB, &tok.pitch, dp)?;
                *grads.energy_table.as_mut().expect("tables") +=
                    &embed_grad(PROSODY_BINS, &tok.energy, dp)?;
            }
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        Ok(BatchLoss {
            loss: out.loss,
            grads,
        })
    }

    /// Regenerates the masked frames of `mel` from noise seeded by `seed`;
    /// unmasked frames are kept as given.
    pub fn infill(
        &self,
        mel: &Array2<F>,
        cond: &Conditioning<F>,
        mask: &MaskSpec,
        seed: u64,
        flow: &FlowConfig,
    ) -> Result<Array2<F>> {
        if mel.nrows() != cond.frames() {
            return Err(Error::shape("mel rows", cond.frames(), mel.nrows()));
        }
        let (s, p) = self.conditioning_rows(cond)?;
        let x0 = apply_mask(mel, mask, &mut seeded_rng(seed))?;
        integrate(&self.network, &x0, Some(&s), p.as_ref(), mask, mel, flow)
    }

    /// Generates the source span for each request; requests are batched
    /// through one integration. Returns only the generated source frames.
    pub fn convert(
        &self,
        requests: &[ConversionInput<'_, F>],
        flow: &FlowConfig,
    ) -> Result<Vec<Array2<F>>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let mut prompts = Vec::with_capacity(requests.len());
        for r in requests {
            let (rs, rp) = self.conditioning_rows(r.reference)?;
            let (ss, sp) = self.conditioning_rows(r.source)?;
            if r.reference_mel.nrows() != r.reference.frames() {
                return Err(Error::shape(
                    "reference mel rows",
                    r.reference.frames(),
                    r.reference_mel.nrows(),
                ));
            }
            let mut rng = seeded_rng(r.seed);
            prompts.push(build_inference_prompt(
                r.reference_mel,
                &rs,
                &ss,
                rp.as_ref(),
                sp.as_ref(),
                &mut rng,
            )?);
        }
        let cat = |f: &dyn Fn(&crate::icl::InferencePrompt<F>) -> ndarray::ArrayView2<'_, F>| {
            let views: Vec<_> = prompts.iter().map(f).collect();
            concatenate(Axis(0), &views).expect("column counts agree")
        };
        let s = cat(&|p| p.s_concat.view());
        let m = cat(&|p| p.m_init.view());
        let p = match self.config.variant {
            Variant::Icl => None,
            _ => Some(cat(&|p| {
                p.p_concat.as_ref().expect("prosody present").view()
            })),
        };
        let mask = prompts
            .iter()
            .skip(1)
            .fold(prompts[0].mask.clone(), |acc, p| acc.concat(&p.mask));
        let lengths: Vec<usize> = prompts.iter().map(|p| p.mask.len()).collect();
        let out = integrate_segments(
            &self.network,
            &m,
            Some(&s),
            p.as_ref(),
            &mask,
            &m,
            &lengths,
            flow,
        )?;
        let mut start = 0;
        Ok(prompts
            .iter()
            .map(|p| {
                let seg = out
                    .slice(ndarray::s![start..start + p.mask.len(), ..])
                    .to_owned();
                start += p.mask.len();
                p.generated(&seg).to_owned()
            })
            .collect())
    }

    pub fn to_container(&self, meta_extra: serde_json::Value) -> Result<Container> {
        let mut c = Container::new(
            CHECKPOINT_KIND,
            CHECKPOINT_VERSION,
            json!({ "config": self.config, "dtype": F::DTYPE, "extra": meta_extra }),
        );
        for (name, t) in self.tensors() {
            let shape = t.shape().to_vec();
            let data = match F::DTYPE {
                "f32" => ArrayData::F32(t.iter().map(|v| v.f64() as f32).collect()),
                _ => ArrayData::F64(t.iter().map(|v| v.f64()).collect()),
            };
            c.push(&name, shape, data)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect(CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
        let dtype: String = c.meta_field("dtype")?;
        if dtype != F::DTYPE {
            return Err(Error::Format {
                kind: CHECKPOINT_KIND.into(),
                reason: format!("checkpoint holds {dtype} weights, expected {}", F::DTYPE),
            });
        }
        let config: ModelConfig = c.meta_field("config")?;
        config.validate()?;
        let network = NetworkParams::init(config.backbone(), 0)?;
        let prosody = |rows| {
            (config.variant == Variant::IclPitchEnergy)
                .then(|| Array2::zeros((rows, config.prosody_dim)))
        };
        let mut model = Self {
            token_table: Array2::zeros((config.codebook_size, config.semantic_dim)),
            pitch_table: prosody(PITCH_VOCAB),
            energy_table: prosody(PROSODY_BINS),
            network,
            config,
        };
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let stored: Vec<&str> = c.arrays.iter().map(|a| a.name.as_str()).collect();
        if stored != names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Format {
                kind: CHECKPOINT_KIND.into(),
                reason: "tensor list does not match the configured model".into(),
            });
        }
        for (mut dst, src) in model.tensors_mut().into_iter().zip(&c.arrays) {
            if dst.shape() != src.shape.as_slice() {
                return Err(Error::Format {
                    kind: CHECKPOINT_KIND.into(),
                    reason: format!(
                        "{} has shape {:?}, expected {:?}",
                        src.name,
                        src.shape,
                        dst.shape()
                    ),
                });
            }
            let values: Vec<F> = match &src.data {
                ArrayData::F32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
                ArrayData::F64(v) => v.iter().map(|&x| F::of(x)).collect(),
                ArrayData::U32(_) => {
                    return Err(Error::Format {
                        kind: CHECKPOINT_KIND.into(),
                        reason: format!("{} is not a float tensor", src.name),
                    })
                }
            };
            dst.assign(&ArrayD::from_shape_vec(IxDyn(&src.shape), values).expect("shape checked"));
        }
        if let Some(name) = model.first_non_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, meta_extra: serde_json::Value) -> Result<()> {
        self.to_container(meta_extra)?.write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let c = Container::read(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
        let extra = c
            .meta
            .get("extra")
            .cloned()
            .unwrap_or(serde_json::Value::Null);
        Ok((Self::from_container(&c)?, extra))
    }
}
