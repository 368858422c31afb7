use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iclvc_core::flow::Solver;
use iclvc_core::model::Variant;

mod commands;
mod config;

use config::{ProviderKind, RunConfig, DEFAULT_CACHE_DIR};

/// In-context voice conversion on a synthetic toy-mel corpus.
#[derive(Debug, Parser)]
#[command(name = "iclvc", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root for artifacts whose paths are not given explicitly.
    #[arg(long, global = true, env = "ICLVC_CACHE_DIR")]
    cache_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the toy corpus.
    Gen(GenArgs),
    /// Fit a k-means codebook on one feature stream.
    FitTokenizer(FitArgs),
    /// Train the conditioned flow-matching generator.
    Train(TrainArgs),
    /// Convert source utterances to reference speakers.
    Convert(ConvertArgs),
    /// Score a converted set.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    world_seed: Option<u64>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    utterances_per_speaker: Option<usize>,
    #[arg(long)]
    min_seconds: Option<f64>,
    #[arg(long)]
    max_seconds: Option<f64>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Feature stream to cluster (ssl_a or ssl_b).
    #[arg(long)]
    stream: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ProsodyArgs {
    /// Prosody-embedding provider: toy or precomputed.
    #[arg(long, value_parser = parse_provider)]
    provider: Option<ProviderKind>,
    /// Embedding directory for the precomputed provider.
    #[arg(long)]
    provider_dir: Option<PathBuf>,
    #[arg(long)]
    provider_dim: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// icl, icl+pitch_energy or icl+prosody_embed.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for the checkpoint and loss log.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    prosody: ProsodyArgs,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Corpus holding the source and reference utterances.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Single-pair mode: source utterance id.
    #[arg(long, requires = "reference")]
    source: Option<String>,
    /// Single-pair mode: reference utterance id.
    #[arg(long, requires = "source")]
    reference: Option<String>,
    /// JSON list of {source, reference} pairs.
    #[arg(long, conflicts_with = "source")]
    pairs: Option<PathBuf>,
    /// Number of random pairs when neither a pair nor a pairs file is given.
    #[arg(long)]
    num_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    solver: Option<Solver>,
    #[arg(long)]
    steps: Option<usize>,
    /// Seconds of reference used as the prompt (0 = whole reference).
    #[arg(long)]
    prompt_seconds: Option<f64>,
    /// Output file in single-pair mode, directory otherwise.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    prosody: ProsodyArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory written by `convert`.
    #[arg(long)]
    converted: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Report directory; defaults to the converted directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    /// Exit successfully even when some metric is undefined.
    #[arg(long)]
    allow_null: bool,
}

fn parse_provider(s: &str) -> Result<ProviderKind, String> {
    match s {
        "toy" => Ok(ProviderKind::Toy),
        "precomputed" => Ok(ProviderKind::Precomputed),
        _ => Err(format!(
            "unknown provider {s:?}; expected toy or precomputed"
        )),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ProsodyArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.prosody.provider, self.provider);
        set(&mut cfg.prosody.dim, self.provider_dim);
        if self.provider_dir.is_some() {
            cfg.prosody.dir = self.provider_dir;
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cache = cli
        .cache_dir
        .or_else(|| cfg.cache_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR));
    let paths = commands::Paths::new(cache);
    match cli.command {
        Command::Gen(a) => {
            let c = &mut cfg.corpus;
            set(&mut c.seed, a.seed);
            set(&mut c.world_seed, a.world_seed);
            set(&mut c.num_speakers, a.speakers);
            set(&mut c.utterances_per_speaker, a.utterances_per_speaker);
            set(&mut c.min_seconds, a.min_seconds);
            set(&mut c.max_seconds, a.max_seconds);
            cfg.validate()?;
            commands::gen(&cfg, &a.out.unwrap_or_else(|| paths.corpus()))?;
        }
        Command::FitTokenizer(a) => {
            let t = &mut cfg.tokenizer;
            set(&mut t.stream, a.stream);
            set(&mut t.k, a.k);
            set(&mut t.embed_dim, a.embed_dim);
            set(&mut t.seed, a.seed);
            cfg.validate()?;
            let out = a
                .out
                .unwrap_or_else(|| paths.codebook(&cfg.tokenizer.stream));
            commands::fit_tokenizer(&cfg, &a.corpus.unwrap_or_else(|| paths.corpus()), &out)?;
        }
        Command::Train(a) => {
            set(&mut cfg.model.variant, a.variant);
            set(&mut cfg.model.seed, a.seed);
            set(&mut cfg.train.seed, a.seed);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.learning_rate, a.lr);
            a.prosody.apply(&mut cfg);
            cfg.validate()?;
            let codebook = a
                .codebook
                .unwrap_or_else(|| paths.codebook(&cfg.tokenizer.stream));
            let out = a
                .out
                .unwrap_or_else(|| paths.run(cfg.model.variant, &cfg.tokenizer.stream));
            commands::train(
                &cfg,
                &a.corpus.unwrap_or_else(|| paths.corpus()),
                &codebook,
                &out,
            )?;
        }
        Command::Convert(a) => {
            set(&mut cfg.convert.seed, a.seed);
            set(&mut cfg.convert.num_pairs, a.num_pairs);
            set(&mut cfg.convert.prompt_seconds, a.prompt_seconds);
            set(&mut cfg.flow.solver, a.solver);
            set(&mut cfg.flow.ode_steps, a.steps);
            a.prosody.apply(&mut cfg);
            cfg.validate()?;
            let codebook = a
                .codebook
                .unwrap_or_else(|| paths.codebook(&cfg.tokenizer.stream));
            let corpus = a.corpus.unwrap_or_else(|| paths.corpus());
            let job = match (a.source, a.reference, a.pairs) {
                (Some(source), Some(reference), _) => {
                    commands::PairSource::Single(source, reference)
                }
                (_, _, Some(p)) => commands::PairSource::File(p),
                _ => commands::PairSource::Random(cfg.convert.num_pairs),
            };
            commands::convert(&cfg, &a.checkpoint, &codebook, &corpus, job, &a.out)?;
        }
        Command::Eval(a) => {
            cfg.validate()?;
            let codebook = a
                .codebook
                .unwrap_or_else(|| paths.codebook(&cfg.tokenizer.stream));
            let corpus = a.corpus.unwrap_or_else(|| paths.corpus());
            let out = a.out.unwrap_or_else(|| a.converted.clone());
            let label = a.label.unwrap_or_else(|| "converted".into());
            let report = commands::eval(&corpus, &codebook, &a.converted, &out, &label)?;
            if report.has_undefined() && !a.allow_null {
                eprintln!("some metrics are undefined; see the report for the affected pairs");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
