//! Synthetic "toy-mel" corpus with independent content, timbre and prosody.
//!
//! A mel frame has 20 bins. The first 12 form a spectral envelope written in
//! an orthonormal DCT-II basis: row 0 carries energy, rows 1..=6 carry the
//! speaker timbre vector and rows 7..=11 carry the content symbol. The last 8
//! bins hold a Gaussian bump at the log-F0 position of voiced frames.
//!
//! Two "pre-trained model" feature streams are computed from the mel by
//! projecting the envelope onto the content rows, adding local context and
//! passing the result through different fixed random projections.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::{derive_seed, seeded_rng, Error, Result};

pub const MEL_DIM: usize = 20;
pub const ENVELOPE_BINS: usize = 12;
pub const PITCH_BINS: usize = MEL_DIM - ENVELOPE_BINS;
pub const TIMBRE_DIM: usize = 6;
pub const CONTENT_DIM: usize = 5;
pub const VOCAB: usize = 16;
pub const SSL_DIM: usize = 16;
/// Symbol 0 is silence, 1..=3 are unvoiced, the rest voiced.
pub const SILENCE: u32 = 0;
pub const FIRST_VOICED: u32 = 4;
pub const F0_LOW: f64 = 50.0;
pub const F0_HIGH: f64 = 320.0;
pub const PITCH_BUMP_HEIGHT: f64 = 2.0;
pub const PITCH_BUMP_WIDTH: f64 = 1.0;
pub const NOISE_STD: f64 = 0.05;
pub const TIMBRE_STD: f64 = 1.5;
pub const DEFAULT_WORLD_SEED: u64 = 0x5eed_1c1;
pub const STREAMS: [&str; 2] = ["ssl_a", "ssl_b"];

pub const UTTERANCE_KIND: &str = "utterance";
pub const UTTERANCE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

pub fn is_voiced(symbol: u32) -> bool {
    symbol >= FIRST_VOICED
}

/// Orthonormal DCT-II matrix; row `k` is the k-th basis vector.
pub fn dct_basis(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
    })
}

pub fn timbre_basis() -> Array2<f64> {
    dct_basis(ENVELOPE_BINS)
        .slice(s![1..=TIMBRE_DIM, ..])
        .to_owned()
}

pub fn content_basis() -> Array2<f64> {
    dct_basis(ENVELOPE_BINS)
        .slice(s![TIMBRE_DIM + 1.., ..])
        .to_owned()
}

/// Fractional pitch-bin position of `f0` (Hz).
pub fn pitch_position(f0: f64) -> f64 {
    (PITCH_BINS - 1) as f64 * (f0 / F0_LOW).ln() / (F0_HIGH / F0_LOW).ln()
}

pub fn position_to_hz(pos: f64) -> f64 {
    F0_LOW * ((F0_HIGH / F0_LOW).ln() * pos / (PITCH_BINS - 1) as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContourClass {
    Rising,
    Falling,
    Peak,
    Valley,
}

impl ContourClass {
    pub const ALL: [ContourClass; 4] = [Self::Rising, Self::Falling, Self::Peak, Self::Valley];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Shape in [-1, 1] at relative position `u` in [0, 1].
    pub fn shape(self, u: f64) -> f64 {
        match self {
            Self::Rising => 2.0 * u - 1.0,
            Self::Falling => 1.0 - 2.0 * u,
            Self::Peak => 1.0 - 8.0 * (u - 0.5).powi(2),
            Self::Valley => 8.0 * (u - 0.5).powi(2) - 1.0,
        }
    }
}

/// The fixed "language" and feature extractors shared by every corpus built
/// from the same world seed.
#[derive(Debug, Clone)]
pub struct World {
    pub seed: u64,
    /// VOCAB x CONTENT_DIM coordinates; silence sits at the origin.
    pub content_patterns: Array2<f64>,
    streams: Vec<StreamExtractor>,
}

#[derive(Debug, Clone)]
struct StreamExtractor {
    name: &'static str,
    /// Context frame pairs (averaged, then scaled) appended after the centre frame.
    offsets: Vec<(isize, isize, f64)>,
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Default for World {
    fn default() -> Self {
        Self::new(DEFAULT_WORLD_SEED)
    }
}

impl World {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(derive_seed(seed, 0));
        // Greedy max-min selection keeps the symbols well apart.
        let radius = 1.5;
        let candidates: Vec<Array1<f64>> = (0..600)
            .map(|_| {
                let v = Array1::from_shape_simple_fn(CONTENT_DIM, || {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let n = v.dot(&v).sqrt();
                v * (radius / n)
            })
            .collect();
        let mut chosen: Vec<Array1<f64>> = vec![Array1::zeros(CONTENT_DIM), candidates[0].clone()];
        while chosen.len() < VOCAB {
            let best = candidates
                .iter()
                .map(|c| {
                    let d = chosen
                        .iter()
                        .map(|p| (c - p).mapv(|v| v * v).sum())
                        .fold(f64::INFINITY, f64::min);
                    (d, c)
                })
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .expect("candidates nonempty")
                .1
                .clone();
            chosen.push(best);
        }
        let mut content_patterns = Array2::zeros((VOCAB, CONTENT_DIM));
        for (i, c) in chosen.iter().enumerate() {
            content_patterns.row_mut(i).assign(c);
        }

        let make = |name, offsets: Vec<(isize, isize, f64)>, stream: u64| {
            let mut rng = seeded_rng(derive_seed(seed, stream));
            let fan_in = CONTENT_DIM * (1 + offsets.len());
            let normal = Normal::new(0.0, 1.2 / (fan_in as f64).sqrt()).expect("valid std");
            StreamExtractor {
                name,
                offsets,
                weight: Array2::from_shape_simple_fn((SSL_DIM, fan_in), || rng.sample(normal)),
                bias: Array1::from_shape_simple_fn(SSL_DIM, || {
                    rng.sample::<f64, _>(StandardNormal) * 0.1
                }),
            }
        };
        let streams = vec![
            make(STREAMS[0], vec![(-1, 1, 1.0)], 1),
            make(STREAMS[1], vec![(-2, -2, 0.3), (2, 2, 0.3)], 2),
        ];
        Self {
            seed,
            content_patterns,
            streams,
        }
    }

    /// Deterministic mel for the given factors; `noise_seed` fixes epsilon.
    pub fn render(
        &self,
        content: &[u32],
        timbre: &[f64],
        pitch: &[f64],
        energy: &[f64],
        noise_seed: u64,
    ) -> Result<Array2<f64>> {
        let t = content.len();
        if t == 0 {
            return Err(Error::invalid("cannot render an empty utterance"));
        }
        if pitch.len() != t || energy.len() != t {
            return Err(Error::shape(
                "contour length",
                t,
                pitch.len().min(energy.len()),
            ));
        }
        if timbre.len() != TIMBRE_DIM {
            return Err(Error::shape("timbre dim", TIMBRE_DIM, timbre.len()));
        }
        if let Some(&bad) = content.iter().find(|&&c| c as usize >= VOCAB) {
            return Err(Error::invalid(format!(
                "content symbol {bad} outside vocabulary"
            )));
        }
        let dct = dct_basis(ENVELOPE_BINS);
        let tb = dct.slice(s![1..=TIMBRE_DIM, ..]);
        let cb = dct.slice(s![TIMBRE_DIM + 1.., ..]);
        let timbre_env = tb.t().dot(&Array1::from(timbre.to_vec()));
        let content_env = self.content_patterns.dot(&cb);
        let mut rng = seeded_rng(noise_seed);
        let mut mel = Array2::zeros((t, MEL_DIM));
        for i in 0..t {
            let mut row = mel.row_mut(i);
            let mut env = row.slice_mut(s![..ENVELOPE_BINS]);
            env.assign(&timbre_env);
            env += &content_env.row(content[i] as usize);
            env += energy[i];
            if pitch[i] > 0.0 {
                let pos = pitch_position(pitch[i]);
                for j in 0..PITCH_BINS {
                    let d = (j as f64 - pos) / PITCH_BUMP_WIDTH;
                    row[ENVELOPE_BINS + j] = PITCH_BUMP_HEIGHT * (-0.5 * d * d).exp();
                }
            }
            for v in row.iter_mut() {
                *v += NOISE_STD * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(mel)
    }

    pub fn stream_names(&self) -> Vec<&'static str> {
        self.streams.iter().map(|s| s.name).collect()
    }

    /// Feature stream `name` computed from a mel.
    pub fn ssl_features(&self, mel: ArrayView2<'_, f64>, name: &str) -> Result<Array2<f64>> {
        let ex = self
            .streams
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown feature stream {name}")))?;
        if mel.ncols() != MEL_DIM {
            return Err(Error::shape("mel dim", MEL_DIM, mel.ncols()));
        }
        let coords = mel.slice(s![.., ..ENVELOPE_BINS]).dot(&content_basis().t());
        let t = mel.nrows() as isize;
        let at = |i: isize| coords.row(i.clamp(0, t - 1) as usize);
        let fan_in = ex.weight.ncols();
        let mut out = Array2::zeros((mel.nrows(), SSL_DIM));
        let mut x = Array1::zeros(fan_in);
        for i in 0..t {
            x.slice_mut(s![..CONTENT_DIM]).assign(&at(i));
            for (k, &(a, b, gain)) in ex.offsets.iter().enumerate() {
                let ctx = (&at(i + a) + &at(i + b)) * (0.5 * gain);
                x.slice_mut(s![CONTENT_DIM * (k + 1)..CONTENT_DIM * (k + 2)])
                    .assign(&ctx);
            }
            let h = ex.weight.dot(&x) + &ex.bias;
            out.row_mut(i as usize).assign(&h.mapv(f64::tanh));
        }
        Ok(out)
    }

    pub fn all_streams(&self, mel: ArrayView2<'_, f64>) -> Result<BTreeMap<String, Array2<f64>>> {
        self.stream_names()
            .into_iter()
            .map(|n| Ok((n.to_string(), self.ssl_features(mel, n)?)))
            .collect()
    }

    /// Assembles an utterance from explicit factors, rendering mel and streams.
    #[allow(clippy::too_many_arguments)]
    pub fn utterance(
        &self,
        id: &str,
        speaker: usize,
        content: Vec<u32>,
        timbre: Vec<f64>,
        pitch: Vec<f64>,
        energy: Vec<f64>,
        contour: ContourClass,
        noise_seed: u64,
        frame_rate: f64,
    ) -> Result<ToyUtterance> {
        let mel = self.render(&content, &timbre, &pitch, &energy, noise_seed)?;
        let ssl = self.all_streams(mel.view())?;
        Ok(ToyUtterance {
            id: id.to_string(),
            speaker,
            content,
            timbre,
            pitch,
            energy,
            contour,
            noise_seed,
            frame_rate,
            mel,
            ssl,
        })
    }

    /// Same utterance spoken with a different timbre (same noise draw).
    pub fn rerender_with_timbre(&self, utt: &ToyUtterance, timbre: &[f64]) -> Result<ToyUtterance> {
        self.utterance(
            &utt.id,
            utt.speaker,
            utt.content.clone(),
            timbre.to_vec(),
            utt.pitch.clone(),
            utt.energy.clone(),
            utt.contour,
            utt.noise_seed,
            utt.frame_rate,
        )
    }

    /// Same utterance with a new pitch track; content and energy unchanged.
    pub fn rerender_with_pitch(&self, utt: &ToyUtterance, pitch: Vec<f64>) -> Result<ToyUtterance> {
        self.utterance(
            &utt.id,
            utt.speaker,
            utt.content.clone(),
            utt.timbre.clone(),
            pitch,
            utt.energy.clone(),
            utt.contour,
            utt.noise_seed,
            utt.frame_rate,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyUtterance {
    pub id: String,
    pub speaker: usize,
    /// Ground-truth content symbol per frame.
    pub content: Vec<u32>,
    pub timbre: Vec<f64>,
    /// Hz per frame, 0 when unvoiced.
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub contour: ContourClass,
    pub noise_seed: u64,
    pub frame_rate: f64,
    pub mel: Array2<f64>,
    pub ssl: BTreeMap<String, Array2<f64>>,
}

impl ToyUtterance {
    pub fn frames(&self) -> usize {
        self.content.len()
    }

    pub fn stream(&self, name: &str) -> Result<&Array2<f64>> {
        self.ssl
            .get(name)
            .ok_or_else(|| Error::invalid(format!("utterance {} has no stream {name}", self.id)))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(
            UTTERANCE_KIND,
            UTTERANCE_VERSION,
            json!({
                "id": self.id,
                "speaker": self.speaker,
                "contour": self.contour,
                "noise_seed": self.noise_seed,
                "frame_rate": self.frame_rate,
                "streams": self.ssl.keys().collect::<Vec<_>>(),
            }),
        );
        c.push_vec_u32("content", &self.content)?;
        c.push_vec_f64("timbre", &self.timbre)?;
        c.push_vec_f64("pitch", &self.pitch)?;
        c.push_vec_f64("energy", &self.energy)?;
        c.push_matrix_f64("mel", &self.mel)?;
        for (name, m) in &self.ssl {
            c.push_matrix_f64(&format!("ssl.{name}"), m)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect(UTTERANCE_KIND, UTTERANCE_VERSION)?;
        let streams: Vec<String> = c.meta_field("streams")?;
        let mut ssl = BTreeMap::new();
        for name in streams {
            let m = c.matrix_f64(&format!("ssl.{name}"))?;
            ssl.insert(name, m);
        }
        let utt = Self {
            id: c.meta_field("id")?,
            speaker: c.meta_field("speaker")?,
            content: c.vec_u32("content")?,
            timbre: c.vec_f64("timbre")?,
            pitch: c.vec_f64("pitch")?,
            energy: c.vec_f64("energy")?,
            contour: c.meta_field("contour")?,
            noise_seed: c.meta_field("noise_seed")?,
            frame_rate: c.meta_field("frame_rate")?,
            mel: c.matrix_f64("mel")?,
            ssl,
        };
        let t = utt.frames();
        let aligned = utt.pitch.len() == t
            && utt.energy.len() == t
            && utt.mel.nrows() == t
            && utt.ssl.values().all(|m| m.nrows() == t);
        if !aligned {
            return Err(Error::Format {
                kind: UTTERANCE_KIND.into(),
                reason: format!("utterance {} fields are not frame-aligned", utt.id),
            });
        }
        Ok(utt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub frame_rate: f64,
    pub seed: u64,
    #[serde(default = "default_world_seed")]
    pub world_seed: u64,
}

fn default_world_seed() -> u64 {
    DEFAULT_WORLD_SEED
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 8,
            utterances_per_speaker: 40,
            min_seconds: 4.0,
            max_seconds: 10.0,
            frame_rate: 50.0,
            seed: 1,
            world_seed: DEFAULT_WORLD_SEED,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 || self.utterances_per_speaker == 0 {
            return Err(Error::invalid(
                "corpus needs at least one speaker and utterance",
            ));
        }
        if !(self.frame_rate > 0.0
            && self.min_seconds > 0.0
            && self.max_seconds >= self.min_seconds)
        {
            return Err(Error::invalid(
                "durations and frame rate must be positive and ordered",
            ));
        }
        if (self.min_seconds * self.frame_rate).round() < 8.0 {
            return Err(Error::invalid("utterances must span at least 8 frames"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: usize,
    pub timbre: Vec<f64>,
    pub base_f0: f64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub world: World,
    pub speakers: Vec<Speaker>,
    pub utterances: Vec<ToyUtterance>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.speakers == other.speakers
            && self.utterances == other.utterances
    }
}

fn sample_speaker(id: usize, rng: &mut crate::Rng) -> Speaker {
    let normal = Normal::new(0.0, TIMBRE_STD).expect("valid std");
    Speaker {
        id,
        timbre: (0..TIMBRE_DIM).map(|_| rng.sample(normal)).collect(),
        base_f0: rng.random_range(90.0..180.0),
    }
}

fn sample_content(frames: usize, frame_rate: f64, rng: &mut crate::Rng) -> Vec<u32> {
    let scale = frame_rate / 50.0;
    let frames_of = |lo: f64, hi: f64, rng: &mut crate::Rng| -> usize {
        let lo = (lo * scale).round().max(1.0) as usize;
        let hi = (hi * scale).round().max(lo as f64) as usize;
        rng.random_range(lo..=hi)
    };
    let mut out = vec![SILENCE; frames_of(10.0, 25.0, rng).min(frames / 4)];
    let tail = frames_of(10.0, 25.0, rng).min(frames / 4);
    let mut last = SILENCE;
    while out.len() < frames - tail {
        let sym = if last != SILENCE && rng.random_bool(0.08) {
            SILENCE
        } else {
            loop {
                let s = rng.random_range(1..VOCAB as u32);
                if s != last {
                    break s;
                }
            }
        };
        let dur = frames_of(4.0, 14.0, rng);
        out.extend(std::iter::repeat_n(sym, dur));
        last = sym;
    }
    out.truncate(frames - tail);
    out.resize(frames, SILENCE);
    out
}

fn sample_prosody(
    content: &[u32],
    base_f0: f64,
    contour: ContourClass,
    rng: &mut crate::Rng,
) -> (Vec<f64>, Vec<f64>) {
    let t = content.len();
    let amp = rng.random_range(3.0..6.0);
    let wobble_cycles = rng.random_range(1.0..3.0);
    let wobble_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let energy_cycles = rng.random_range(1.0..4.0);
    let energy_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pitch = vec![0.0; t];
    let mut energy = vec![0.0; t];
    let mut seg_gain = 1.0;
    for i in 0..t {
        if i == 0 || content[i] != content[i - 1] {
            seg_gain = rng.random_range(0.8..1.2);
        }
        let u = if t > 1 {
            i as f64 / (t - 1) as f64
        } else {
            0.5
        };
        let sym = content[i];
        if sym == SILENCE {
            continue;
        }
        let level = if is_voiced(sym) { 1.0 } else { 0.5 };
        energy[i] = level
            * seg_gain
            * (1.0 + 0.25 * (std::f64::consts::TAU * energy_cycles * u + energy_phase).sin());
        if is_voiced(sym) {
            let semis = amp * contour.shape(u)
                + 0.4 * (std::f64::consts::TAU * wobble_cycles * u + wobble_phase).sin();
            pitch[i] = base_f0 * 2f64.powf(semis / 12.0);
        }
    }
    (pitch, energy)
}

/// Builds a corpus; every utterance draws from its own derived seed.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let world = World::new(spec.world_seed);
    let mut srng = seeded_rng(derive_seed(spec.seed, u64::MAX));
    let speakers: Vec<Speaker> = (0..spec.num_speakers)
        .map(|i| sample_speaker(i, &mut srng))
        .collect();
    let mut utterances = Vec::with_capacity(spec.num_speakers * spec.utterances_per_speaker);
    for sp in &speakers {
        for u in 0..spec.utterances_per_speaker {
            let index = (sp.id * spec.utterances_per_speaker + u) as u64;
            let useed = derive_seed(spec.seed, index);
            let mut rng = seeded_rng(useed);
            let lo = (spec.min_seconds * spec.frame_rate).round() as usize;
            let hi = (spec.max_seconds * spec.frame_rate).round() as usize;
            let frames = rng.random_range(lo..=hi);
            let content = sample_content(frames, spec.frame_rate, &mut rng);
            let contour = ContourClass::ALL[rng.random_range(0..4)];
            let (pitch, energy) = sample_prosody(&content, sp.base_f0, contour, &mut rng);
            utterances.push(world.utterance(
                &format!("spk{:02}_utt{:03}", sp.id, u),
                sp.id,
                content,
                sp.timbre.clone(),
                pitch,
                energy,
                contour,
                derive_seed(useed, 7),
                spec.frame_rate,
            )?);
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        world,
        speakers,
        utterances,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    speaker: usize,
    file: String,
    frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    format_version: u32,
    spec: CorpusSpec,
    speakers: Vec<Speaker>,
    utterances: Vec<ManifestEntry>,
}

impl Corpus {
    pub fn frame_rate(&self) -> f64 {
        self.spec.frame_rate
    }

    pub fn get(&self, id: &str) -> Result<&ToyUtterance> {
        self.utterances
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| Error::invalid(format!("no utterance {id} in corpus")))
    }

    /// Stacks one feature stream over every utterance.
    pub fn stacked_stream(&self, name: &str) -> Result<Array2<f64>> {
        let parts: Vec<ArrayView2<'_, f64>> = self
            .utterances
            .iter()
            .map(|u| u.stream(name).map(|m| m.view()))
            .collect::<Result<_>>()?;
        ndarray::concatenate(ndarray::Axis(0), &parts).map_err(|_| Error::invalid("empty corpus"))
    }

    /// Writes one container per utterance plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let file = format!("{}.bin", u.id);
            u.to_container()?.write(&dir.join(&file))?;
            entries.push(ManifestEntry {
                id: u.id.clone(),
                speaker: u.speaker,
                file,
                frames: u.frames(),
            });
        }
        let manifest = Manifest {
            kind: "corpus".into(),
            format_version: MANIFEST_VERSION,
            spec: self.spec.clone(),
            speakers: self.speakers.clone(),
            utterances: entries,
        };
        let tmp = dir.join(format!("{MANIFEST_FILE}.partial"));
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
        fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.kind != "corpus" {
            return Err(Error::Format {
                kind: "corpus".into(),
                reason: format!("manifest describes a {}", manifest.kind),
            });
        }
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                kind: "corpus".into(),
                expected: MANIFEST_VERSION,
                found: manifest.format_version,
            });
        }
        let utterances = manifest
            .utterances
            .iter()
            .map(|e| {
                ToyUtterance::from_container(&Container::read(
                    &dir.join(&e.file),
                    UTTERANCE_KIND,
                    UTTERANCE_VERSION,
                )?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            world: World::new(manifest.spec.world_seed),
            spec: manifest.spec,
            speakers: manifest.speakers,
            utterances,
        })
    }
}

/// Timbre estimate: the timbre-basis coordinates of the time-averaged envelope.
pub fn timbre_probe(mel: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if mel.nrows() < 10 {
        return Err(Error::invalid(format!(
            "timbre probe needs at least 10 frames, got {}",
            mel.nrows()
        )));
    }
    if mel.ncols() != MEL_DIM {
        return Err(Error::shape("mel dim", MEL_DIM, mel.ncols()));
    }
    let mean = mel
        .slice(s![.., ..ENVELOPE_BINS])
        .mean_axis(ndarray::Axis(0))
        .expect("nonempty");
    Ok(timbre_basis().dot(&mean).to_vec())
}

/// Per-frame pitch (Hz, 0 when unvoiced) read off the pitch bins.
pub fn pitch_probe(mel: ArrayView2<'_, f64>) -> Vec<f64> {
    mel.outer_iter()
        .map(|row| {
            let bins = row.slice(s![ENVELOPE_BINS..]);
            let (j, &peak) = bins
                .iter()
                .enumerate()
                .fold(
                    (0, &f64::NEG_INFINITY),
                    |b, (i, v)| if *v > *b.1 { (i, v) } else { b },
                );
            if peak < 0.5 * PITCH_BUMP_HEIGHT {
                return 0.0;
            }
            let mut pos = j as f64;
            if j > 0 && j + 1 < PITCH_BINS {
                let l = |v: f64| v.max(1e-3).ln();
                let (a, b, c) = (l(bins[j - 1]), l(bins[j]), l(bins[j + 1]));
                let denom = a - 2.0 * b + c;
                if denom < 0.0 {
                    pos += (0.5 * (a - c) / denom).clamp(-1.0, 1.0);
                }
            }
            position_to_hz(pos)
        })
        .collect()
}

/// Per-frame energy: mean envelope level, floored at zero.
pub fn energy_probe(mel: ArrayView2<'_, f64>) -> Vec<f64> {
    mel.slice(s![.., ..ENVELOPE_BINS])
        .outer_iter()
        .map(|r| r.mean().unwrap_or(0.0).max(0.0))
        .collect()
}
