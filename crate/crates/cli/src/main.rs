use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clusum::corpus::write_corpus;
use clusum::pipeline::{parse_override, Pipeline, PipelineConfig};
use clusum::synthetic::{successor_chain, topics, ChainSpec, TopicSpec};
use clusum::Result;

/// Cluster a corpus, then write one abstractive summary per cluster.
#[derive(Parser)]
#[command(name = "clusum", version)]
struct Cli {
    #[command(flatten)]
    settings: Settings,

    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

/// Configuration layers: defaults, then `--config`, then `--set`, then the
/// named flags.
#[derive(Args)]
struct Settings {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any configuration key, e.g. `--set decoder.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[arg(long, global = true)]
    corpus: Option<PathBuf>,

    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,

    /// Reference summaries for ROUGE.
    #[arg(long, global = true)]
    references: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    preset: Option<PresetArg>,

    /// Clustering mode.
    #[arg(long, global = true)]
    mode: Option<ModeArg>,

    /// Number of k-means clusters.
    #[arg(short, long, global = true)]
    k: Option<usize>,

    #[arg(long, global = true)]
    no_pretraining: bool,

    #[arg(long, global = true)]
    no_decoder_init: bool,

    #[arg(long, global = true)]
    unweighted_ce: bool,

    #[arg(long, global = true)]
    no_labels: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Kmeans,
    Labels,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary from the corpus.
    BuildVocab,
    /// Pretrain the encoder with masked language modeling.
    Pretrain,
    /// Fine-tune the label classifier (labels mode).
    Finetune,
    /// Group documents into clusters with weighted centers.
    Cluster,
    /// Train the decoder to reconstruct documents from their embeddings.
    TrainDecoder,
    /// Sample, rank and keep summaries for every cluster.
    Summarize,
    /// Score the summaries.
    Evaluate,
    /// Run every step in order.
    RunAll,
    /// Print the resolved configuration as TOML.
    ShowConfig,
    /// Write a synthetic corpus.
    SynthCorpus(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Documents drawn from disjoint topic vocabularies.
    Topics,
    /// Runs of a deterministic word successor chain.
    Chain,
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "topics")]
    kind: SynthKind,
    #[arg(long, default_value_t = 200)]
    docs: usize,
    #[arg(long, default_value_t = 2)]
    topics: usize,
    /// Words per topic, or chain length.
    #[arg(long, default_value_t = 40)]
    words: usize,
    /// Upper bound of each document's share of shared-pool words.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Attach the topic as a label.
    #[arg(long)]
    labeled: bool,
    #[arg(long = "synth-seed", default_value_t = 0)]
    synth_seed: u64,
}

impl Settings {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut overrides = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        let mut flag = |key: &str, value: toml::Value| overrides.push((key.to_string(), value));
        let path = |p: &PathBuf| toml::Value::String(p.display().to_string());
        if let Some(p) = &self.corpus {
            flag("paths.corpus", path(p));
        }
        if let Some(p) = &self.work_dir {
            flag("paths.work_dir", path(p));
        }
        if let Some(p) = &self.references {
            flag("paths.references", path(p));
        }
        if let Some(seed) = self.seed {
            flag("seed", toml::Value::Integer(seed as i64));
        }
        if let Some(preset) = self.preset {
            let name = match preset {
                PresetArg::Desk => "desk",
                PresetArg::Paper => "paper",
            };
            flag("preset", toml::Value::String(name.into()));
        }
        if let Some(mode) = self.mode {
            let name = match mode {
                ModeArg::Kmeans => "kmeans",
                ModeArg::Labels => "labels",
            };
            flag("clustering.mode", toml::Value::String(name.into()));
        }
        if let Some(k) = self.k {
            flag("clustering.k", toml::Value::Integer(k as i64));
        }
        for (set, key) in [
            (self.no_pretraining, "ablations.no_pretraining"),
            (self.no_decoder_init, "ablations.no_decoder_init"),
            (self.unweighted_ce, "ablations.unweighted_ce"),
            (self.no_labels, "ablations.no_labels"),
        ] {
            if set {
                flag(key, toml::Value::Boolean(true));
            }
        }
        PipelineConfig::load(self.config.as_deref(), &overrides)
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let records = match args.kind {
        SynthKind::Topics => topics(&TopicSpec {
            docs: args.docs,
            topics: args.topics,
            words_per_topic: args.words,
            max_noise: args.noise,
            labeled: args.labeled,
            seed: args.synth_seed,
            ..TopicSpec::default()
        })?,
        SynthKind::Chain => successor_chain(&ChainSpec {
            docs: args.docs,
            words: args.words,
            seed: args.synth_seed,
            ..ChainSpec::default()
        })?,
    };
    write_corpus(&args.out, &records)?;
    println!("{}", args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::SynthCorpus(args) = &cli.command {
        return synth(args);
    }
    let config = cli.settings.resolve()?;
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let pipeline = Pipeline::open(config)?;
    let path = match cli.command {
        Command::BuildVocab => pipeline.build_vocab()?,
        Command::Pretrain => pipeline.pretrain()?,
        Command::Finetune => pipeline.finetune()?,
        Command::Cluster => pipeline.cluster()?,
        Command::TrainDecoder => pipeline.train_decoder()?,
        Command::Summarize => pipeline.summarize()?,
        Command::Evaluate => {
            let (path, report) = pipeline.evaluate()?;
            print!("{}", report.to_table());
            path
        }
        Command::RunAll => {
            let out = pipeline.run_all()?;
            print!("{}", out.report.to_table());
            println!("{}", out.summaries.display());
            out.metrics
        }
        Command::ShowConfig | Command::SynthCorpus(_) => unreachable!("handled above"),
    };
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error ({}): {e}", category.name());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
