//! `halluprobe`: the staged pipeline from corpus generation to reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use halluprobe::corpus::{detokenize, tokenize, TokenizerMode};
use halluprobe::hallucination::{BeamTranslator, HallucinationError, Translator};
use halluprobe::pipeline::{parse_layers, Manifest, Pipeline, PipelineError, RunConfig, Stage};
use halluprobe::report::ReportError;
use halluprobe::transformer::DecoderVariant;

/// Environment variable setting the worker thread count.
const THREADS_VAR: &str = "HALLUPROBE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "halluprobe", version, about = "Natural hallucination detection and layer-wise probing for a desk-scale NMT model")]
struct Cli {
    /// Run config (TOML); the bundled desk-scale config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the artifact root directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides any config value, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic parallel corpus.
    Generate,
    /// Train the model, average its last checkpoints and freeze it.
    Train,
    /// Beam-decode the detection splits, or the lines of `--input`.
    Translate {
        /// Translate this file line by line to stdout instead.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Flag hallucinated translations by adjusted BLEU.
    Detect,
    /// Train and evaluate word-translation probes.
    Probe {
        /// Decoder variants to probe; alone, skips encoder probes.
        #[arg(long, value_enum, value_delimiter = ',')]
        variant: Vec<VariantArg>,
        /// Encoder rows such as `emb,1..2`; alone, skips decoder probes.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Render tables and plots from detection and probe results.
    Report,
    /// Run every stage, skipping those already up to date.
    Run,
    /// Print the resolved config.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Standard,
    NoSelfAtt,
    NoCrossAtt,
}

impl From<VariantArg> for DecoderVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Standard => DecoderVariant::Standard,
            VariantArg::NoSelfAtt => DecoderVariant::NoSelfAttn,
            VariantArg::NoCrossAtt => DecoderVariant::NoCrossAttn,
        }
    }
}

/// Distinct exit codes per error class; clap uses 2 for usage errors.
fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) => 3,
        PipelineError::Missing { .. } => 4,
        PipelineError::Stale { .. } => 5,
        PipelineError::Io { .. } => 6,
        PipelineError::Corpus(_) => 7,
        PipelineError::Transformer(_) => 8,
        PipelineError::Hallucination(HallucinationError::Transformer(_)) => 8,
        PipelineError::Hallucination(_) => 9,
        PipelineError::Probe(_) => 10,
        PipelineError::Report(ReportError::NothingToReport) => 12,
        PipelineError::Report(_) => 11,
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::bundled(),
    };
    cfg = cfg.with_overrides(&cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    Ok(cfg)
}

fn summarize(m: &Manifest, root: &std::path::Path) {
    let dir = root.join(m.stage.dir());
    match m.stage {
        Stage::Detect => {
            if let Some(stats) = m.meta["stats"].as_object() {
                for (split, s) in stats {
                    println!("detect: {split} {}", s.as_str().unwrap_or_default());
                }
            }
        }
        Stage::Report => println!("report: {}", dir.join("report.md").display()),
        _ => println!("{}: {} files in {}", m.stage, m.outputs.len(), dir.display()),
    }
}

fn translate_file(pipe: &Pipeline, input: &std::path::Path) -> Result<(), PipelineError> {
    let vocab = pipe.vocab()?;
    let model = pipe.model()?;
    let tr = BeamTranslator::new(&model, pipe.config().beam.clone())?;
    let text = std::fs::read_to_string(input).map_err(|source| PipelineError::Io {
        path: input.to_path_buf(),
        source,
    })?;
    for line in text.lines() {
        if line.trim().is_empty() {
            println!();
            continue;
        }
        let ids = tokenize(line, &vocab, &TokenizerMode::Word)?;
        let out = tr.translate(&ids)?;
        println!("{}", detokenize(&out, &vocab));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = resolve(&cli)?;
    if let Command::Probe { variant, layers } = &cli.command {
        let layers = layers.as_deref().map(parse_layers).transpose()?;
        let variants = (!variant.is_empty()).then(|| variant.iter().map(|&v| v.into()).collect());
        cfg.select_probes(layers, variants);
    }
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        println!("# config hash {}", cfg.config_hash());
        return Ok(());
    }
    let pipe = Pipeline::new(cfg)?;
    let root = pipe.root().to_path_buf();
    let stage = match &cli.command {
        Command::Generate => Stage::Corpus,
        Command::Train => Stage::Model,
        Command::Translate { input: Some(path) } => return translate_file(&pipe, path),
        Command::Translate { input: None } => Stage::Translate,
        Command::Detect => Stage::Detect,
        Command::Probe { .. } => Stage::Probe,
        Command::Report => Stage::Report,
        Command::Run => {
            for m in pipe.run_all()? {
                summarize(&m, &root);
            }
            return Ok(());
        }
        Command::ShowConfig => unreachable!("handled above"),
    };
    summarize(&pipe.run_stage(stage)?, &root);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    if let Some(n) = std::env::var(THREADS_VAR).ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("{THREADS_VAR}: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
