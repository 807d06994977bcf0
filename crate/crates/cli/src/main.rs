use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kpgen_core::pipeline::{self, RunConfig};
use kpgen_core::Result;

/// Keyphrase generation toolkit: preprocessing, vocabulary and memory
/// construction, training, beam-search prediction, and evaluation.
#[derive(Parser)]
#[command(name = "kpgen", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every pipeline stage. A config file provides the base
/// values; flags override individual fields.
#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file (JSONL)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Vocabulary file (one token per line)
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Document memory file
    #[arg(long)]
    memory: Option<PathBuf>,
    /// Model checkpoint file
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prediction file (JSONL)
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Evaluation report file
    #[arg(long)]
    report: Option<PathBuf>,
    /// Random seed driving all randomness
    #[arg(long)]
    seed: Option<u64>,
    /// Beam width used by predict
    #[arg(long)]
    beam_size: Option<usize>,
    /// Number of training steps
    #[arg(long)]
    steps: Option<usize>,
    /// Run without the cross-document memory (topic vector forced to zero)
    #[arg(long)]
    disable_memory: bool,
    /// Run without the copy mechanism (generation gate forced to one)
    #[arg(long)]
    disable_copy: bool,
}

impl Common {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.corpus {
            cfg.corpus = p.clone();
        }
        if let Some(p) = &self.vocab {
            cfg.vocab = p.clone();
        }
        if let Some(p) = &self.memory {
            cfg.memory = p.clone();
        }
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = p.clone();
        }
        if let Some(p) = &self.predictions {
            cfg.predictions = p.clone();
        }
        if let Some(p) = &self.report {
            cfg.report = p.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(beam) = self.beam_size {
            cfg.model.beam_size = beam;
        }
        if let Some(steps) = self.steps {
            cfg.steps = steps;
        }
        if self.disable_memory {
            cfg.disable_memory = true;
        }
        if self.disable_copy {
            cfg.disable_copy = true;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize and clean a raw corpus file
    Preprocess {
        /// Raw input corpus (JSONL)
        #[arg(long)]
        input: PathBuf,
        /// Cleaned output corpus (JSONL)
        #[arg(long)]
        output: PathBuf,
    },
    /// Build the frequency-capped vocabulary from the corpus
    BuildVocab(Common),
    /// Build the per-document key/value memory
    BuildMemory(Common),
    /// Train the model; writes a checkpoint and a loss log
    Train(Common),
    /// Decode the corpus with beam search; writes predictions
    Predict(Common),
    /// Score predictions against the corpus gold keyphrases
    Eval(Common),
    /// Dump final-decoder-layer states for the first decoding steps
    DumpStates {
        #[command(flatten)]
        common: Common,
        /// Number of greedy decoding steps per document
        #[arg(long, default_value_t = 3)]
        dump_steps: usize,
    },
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess { input, output } => {
            let n = pipeline::run_preprocess(input, output)?;
            log::info!("wrote {} documents to {}", n, output.display());
        }
        Command::BuildVocab(common) => {
            let cfg = common.build()?;
            let vocab = pipeline::run_build_vocab(&cfg)?;
            log::info!("vocabulary of {} tokens at {}", vocab.size(), cfg.vocab.display());
        }
        Command::BuildMemory(common) => {
            let cfg = common.build()?;
            let mem = pipeline::run_build_memory(&cfg)?;
            log::info!("memory of {} documents at {}", mem.len(), cfg.memory.display());
        }
        Command::Train(common) => {
            let cfg = common.build()?;
            pipeline::run_train(&cfg)?;
            log::info!("checkpoint at {}", cfg.checkpoint.display());
        }
        Command::Predict(common) => {
            let cfg = common.build()?;
            let records = pipeline::run_predict(&cfg)?;
            log::info!(
                "{} prediction records at {}",
                records.len(),
                cfg.predictions.display()
            );
        }
        Command::Eval(common) => {
            let cfg = common.build()?;
            let report = pipeline::run_eval(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::DumpStates { common, dump_steps } => {
            let cfg = common.build()?;
            pipeline::run_dump_states(&cfg, *dump_steps)?;
            log::info!("states at {}", cfg.states.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(pipeline::exit_code(&err) as u8)
        }
    }
}
