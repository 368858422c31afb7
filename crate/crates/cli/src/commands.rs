use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use iclvc_core::eval::{ContentProbe, MetricReport};
use iclvc_core::model::{Variant, VcModel};
use iclvc_core::pipeline::{self, Pair};
use iclvc_core::prosody::ProsodyProvider;
use iclvc_core::synthdata::{generate_corpus, Corpus};
use iclvc_core::tokenizer::Codebook;
use iclvc_core::train::train as train_loop;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "loss.jsonl";
pub const RUN_CONFIG_FILE: &str = "config.toml";
pub const PAIRS_FILE: &str = "pairs.json";

/// Default artifact locations under the cache directory.
pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn codebook(&self, stream: &str) -> PathBuf {
        self.root.join(format!("codebook_{stream}.bin"))
    }

    pub fn run(&self, variant: Variant, stream: &str) -> PathBuf {
        let v = variant.as_str().replace('+', "_");
        self.root.join("runs").join(format!("{v}_{stream}"))
    }
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn load_codebook(path: &Path) -> anyhow::Result<Codebook> {
    Codebook::load(path).with_context(|| format!("loading codebook {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

/// Writes through a temporary sibling so readers never see partial files.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn gen(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    corpus
        .save(out)
        .with_context(|| format!("writing corpus to {}", out.display()))?;
    eprintln!(
        "wrote {} utterances from {} speakers to {}",
        corpus.utterances.len(),
        corpus.speakers.len(),
        out.display()
    );
    Ok(())
}

pub fn fit_tokenizer(cfg: &RunConfig, corpus: &Path, out: &Path) -> anyhow::Result<()> {
    let corpus = load_corpus(corpus)?;
    let t = &cfg.tokenizer;
    let frames = corpus.stacked_stream(&t.stream)?;
    let codebook = Codebook::fit(&frames, t.k, t.embed_dim, t.max_iters, &t.stream, t.seed)?;
    ensure_parent(out)?;
    codebook.save(out)?;
    eprintln!(
        "fit K={} on {} {} frames (inertia {:.4}) -> {}",
        t.k,
        frames.nrows(),
        t.stream,
        codebook.inertia.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    tokenizer_stream: String,
    tokenizer_k: usize,
    train_seed: u64,
}

fn provider_for(
    cfg: &RunConfig,
    variant: Variant,
) -> anyhow::Result<Option<Box<dyn ProsodyProvider>>> {
    Ok(match variant {
        Variant::IclProsodyEmbed => Some(cfg.prosody.build()?),
        _ => None,
    })
}

pub fn train(cfg: &RunConfig, corpus: &Path, codebook: &Path, out: &Path) -> anyhow::Result<()> {
    let corpus = load_corpus(corpus)?;
    ensure!(
        !corpus.utterances.is_empty(),
        "training needs a non-empty corpus"
    );
    let codebook = load_codebook(codebook)?;
    let variant = cfg.model.variant;
    let provider = provider_for(cfg, variant)?;
    let data = pipeline::training_set::<f32>(
        &corpus,
        &codebook,
        variant,
        provider.as_deref(),
        cfg.train.seed,
    )?;
    let mc = pipeline::model_config(
        variant,
        cfg.model.shape(),
        &codebook,
        provider.as_ref().map_or(0, |p| p.dim()),
        corpus.frame_rate(),
    );
    let mut model = VcModel::<f32>::init(mc, &codebook, cfg.model.seed)?;

    fs::create_dir_all(out)?;
    write_atomic(&out.join(RUN_CONFIG_FILE), toml::to_string(cfg)?.as_bytes())?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let meta = |epoch| {
        serde_json::to_value(CheckpointMeta {
            epoch,
            tokenizer_stream: codebook.stream.clone(),
            tokenizer_k: codebook.k(),
            train_seed: cfg.train.seed,
        })
        .expect("plain struct")
    };
    model.save(&ckpt, meta(0))?;
    let mut log = BufWriter::new(File::create(out.join(LOSS_LOG_FILE))?);
    eprintln!(
        "training {} on {} utterances ({} parameters)",
        variant,
        data.len(),
        iclvc_core::backbone::ParamSet::num_params(&model)
    );
    train_loop(&mut model, &data, &cfg.train, &cfg.flow, |m, entry| {
        serde_json::to_writer(&mut log, entry)?;
        log.write_all(b"\n")?;
        log.flush()?;
        m.save(&ckpt, meta(entry.epoch))?;
        eprintln!("epoch {:>3}  loss {:.5}", entry.epoch, entry.mean_loss);
        Ok(())
    })?;
    Ok(())
}

/// Where conversion pairs come from.
pub enum PairSource {
    Single(String, String),
    File(PathBuf),
    Random(usize),
}

/// One entry of a converted set's index file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvertedEntry {
    pub source: String,
    pub reference: String,
    pub file: String,
}

fn load_checkpoint(path: &Path, codebook: &Codebook) -> anyhow::Result<VcModel<f32>> {
    let (model, extra) = VcModel::<f32>::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let meta: CheckpointMeta = serde_json::from_value(extra).context("checkpoint metadata")?;
    if meta.tokenizer_stream != codebook.stream || meta.tokenizer_k != codebook.k() {
        bail!(
            "checkpoint was trained with a K={} {} codebook, got K={} {}",
            meta.tokenizer_k,
            meta.tokenizer_stream,
            codebook.k(),
            codebook.stream
        );
    }
    Ok(model)
}

pub fn convert(
    cfg: &RunConfig,
    checkpoint: &Path,
    codebook: &Path,
    corpus: &Path,
    job: PairSource,
    out: &Path,
) -> anyhow::Result<()> {
    let codebook = load_codebook(codebook)?;
    let model = load_checkpoint(checkpoint, &codebook)?;
    let corpus = load_corpus(corpus)?;
    let provider = provider_for(cfg, model.config.variant)?;
    if let Some(p) = &provider {
        ensure!(
            p.dim() == model.config.prosody_dim,
            "prosody provider gives {} dims, checkpoint expects {}",
            p.dim(),
            model.config.prosody_dim
        );
    }
    let (pairs, single) = match job {
        PairSource::Single(source, reference) => (vec![Pair { source, reference }], true),
        PairSource::File(p) => {
            let text =
                fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            (
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?,
                false,
            )
        }
        PairSource::Random(n) => (pipeline::sample_pairs(&corpus, n, cfg.convert.seed)?, false),
    };
    let mels = pipeline::convert_pairs(
        &model,
        &corpus,
        &codebook,
        provider.as_deref(),
        &pairs,
        &cfg.flow,
        &cfg.convert.options(),
    )?;
    if single {
        ensure_parent(out)?;
        pipeline::write_converted(out, &mels[0], &pairs[0])?;
        eprintln!("wrote {} ({} frames)", out.display(), mels[0].nrows());
        return Ok(());
    }
    fs::create_dir_all(out)?;
    let mut index = Vec::with_capacity(pairs.len());
    for (i, (pair, mel)) in pairs.iter().zip(&mels).enumerate() {
        let file = format!("{i:04}.bin");
        pipeline::write_converted(&out.join(&file), mel, pair)?;
        index.push(ConvertedEntry {
            source: pair.source.clone(),
            reference: pair.reference.clone(),
            file,
        });
    }
    write_atomic(
        &out.join(PAIRS_FILE),
        serde_json::to_string_pretty(&index)?.as_bytes(),
    )?;
    eprintln!("wrote {} conversions to {}", index.len(), out.display());
    Ok(())
}

pub fn eval(
    corpus: &Path,
    codebook: &Path,
    converted: &Path,
    out: &Path,
    label: &str,
) -> anyhow::Result<MetricReport> {
    let corpus = load_corpus(corpus)?;
    let probe = ContentProbe::fit(load_codebook(codebook)?, &corpus)?;
    let index_path = converted.join(PAIRS_FILE);
    let index: Vec<ConvertedEntry> = serde_json::from_str(
        &fs::read_to_string(&index_path)
            .with_context(|| format!("reading {}", index_path.display()))?,
    )?;
    let mut pairs = Vec::with_capacity(index.len());
    let mut mels = Vec::with_capacity(index.len());
    for e in &index {
        let (mel, pair) = pipeline::read_converted(&converted.join(&e.file))?;
        ensure!(
            pair.source == e.source && pair.reference == e.reference,
            "{} does not hold the pair listed in the index",
            e.file
        );
        pairs.push(pair);
        mels.push(mel);
    }
    let report = pipeline::evaluate_pairs(label, &corpus, &probe, &pairs, &mels)?;
    fs::create_dir_all(out)?;
    let table = report.to_table();
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    write_atomic(
        &out.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    print!("{table}");
    Ok(report)
}
