use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use metadance::experiment::{
    collect_report, format_ablation, run_ablation, run_meta_test, run_meta_train, run_pretrain, ExperimentConfig,
    MetaTestOptions, RunSpec, Variant,
};
use metadance::meta::AdaptConfig;
use metadance::synth::{build_dataset, import_dataset, write_atomic, Split};

#[derive(Parser, Debug)]
#[command(name = "metadance", version, about = "Few-shot pose-guided dance synthesis experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every component seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel episode workers for evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Build a dataset from frames with per-frame keypoint files.
    ImportPoses {
        /// Directory with train/ and test/ subdirectories.
        #[arg(long)]
        input: PathBuf,
    },
    /// Pretrain the generator on single moves.
    Pretrain,
    /// Meta-train one variant from the pretrained weights.
    MetaTrain {
        #[arg(long, default_value = "metadance")]
        variant: String,
        /// Moves per support and query sequence (shots = 2 * moves + 1).
        #[arg(long)]
        moves: Option<usize>,
        /// Initial weights instead of the pretraining checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Adapt and evaluate on test episodes.
    MetaTest {
        #[arg(long, default_value = "metadance")]
        variant: String,
        #[arg(long)]
        moves: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated shot counts, e.g. 3,5,8,10.
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        /// Episode file to replay instead of sampling.
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Inner adaptation steps (0 evaluates the meta-trained weights as is).
        #[arg(long)]
        adapt_steps: Option<usize>,
    },
    /// Evaluate the frame-usage variants and the move-count grid.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        moves: Vec<usize>,
    },
    /// Collect every meta-test summary in the output directory.
    Report,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(w) = common.workers {
        cfg.eval.workers = w;
    }
    let seed = common.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn spec_of(variant: &str, moves: Option<usize>) -> Result<RunSpec> {
    let variant = Variant::parse(variant)?;
    match moves {
        Some(0) => bail!("--moves must be at least 1"),
        Some(m) => Ok(RunSpec::with_moves(variant, m)),
        None => Ok(RunSpec::new(variant)),
    }
}

fn interrupt_flag() -> Result<Arc<AtomicBool>> {
    let flag = Arc::new(AtomicBool::new(false));
    signal_hook::flag::register(signal_hook::consts::SIGINT, Arc::clone(&flag))
        .context("installing the interrupt handler")?;
    Ok(flag)
}

fn write_config_echo(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    write_atomic(path, serde_json::to_string_pretty(cfg)?.as_bytes())?;
    Ok(())
}

fn print_counts(manifest: &metadance::synth::DatasetManifest) {
    for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let clips: Vec<_> = manifest.clips_in(split).collect();
        let frames: usize = clips.iter().map(|c| c.num_frames).sum();
        println!(
            "{name}: {} clips, {} persons, {frames} frames",
            clips.len(),
            manifest.person_ids(split).len()
        );
    }
}

fn finish_training(stop: &AtomicBool, what: &str, step: usize) -> Result<()> {
    if stop.load(Ordering::SeqCst) {
        bail!("{what} interrupted at step {step}; checkpoint saved, rerun to resume");
    }
    println!("{what} finished at step {step}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let dir = cfg.data_dir();
            let manifest = build_dataset(&cfg.data.dataset, &dir)?;
            write_config_echo(&dir.join("config.json"), &cfg)?;
            print_counts(&manifest);
            println!("manifest: {}", dir.join("manifest.json").display());
        }
        Command::ImportPoses { input } => {
            let dir = cfg.data_dir();
            let manifest = import_dataset(&input, &dir, cfg.model.resolution, &cfg.data.dataset.filter)?;
            write_config_echo(&dir.join("config.json"), &cfg)?;
            print_counts(&manifest);
            println!("no flows imported: temporal loss and TWE are disabled for this dataset");
        }
        Command::Pretrain => {
            let dataset = cfg.load_dataset()?;
            let stop = interrupt_flag()?;
            let state = run_pretrain(&cfg, &dataset, Some(&stop))?;
            finish_training(&stop, "pretraining", state.step)?;
        }
        Command::MetaTrain {
            variant,
            moves,
            checkpoint,
        } => {
            let spec = spec_of(&variant, moves)?;
            let dataset = cfg.load_dataset()?;
            let stop = interrupt_flag()?;
            let state = run_meta_train(&cfg, &dataset, spec, checkpoint.as_deref(), Some(&stop))?;
            finish_training(&stop, &spec.stem(), state.step)?;
        }
        Command::MetaTest {
            variant,
            moves,
            checkpoint,
            shots,
            episodes,
            adapt_steps,
        } => {
            let spec = spec_of(&variant, moves)?;
            let dataset = cfg.load_dataset()?;
            let opts = MetaTestOptions {
                shots,
                episodes_file: episodes,
                workers: cli.common.workers,
                checkpoint,
                adapt: adapt_steps.map(|steps| AdaptConfig { steps, ..cfg.eval.adapt }),
                dry: false,
                tag: adapt_steps.map(|s| format!("steps{s}")),
            };
            run_meta_test(&cfg, &dataset, spec, &opts)?;
        }
        Command::Ablate { shots, moves } => {
            let dataset = cfg.load_dataset()?;
            let shots = shots.unwrap_or_else(|| cfg.eval.shots.clone());
            let report = run_ablation(&cfg, &dataset, &Variant::ABLATION, &shots, &moves, cli.common.workers)?;
            println!("{}", format_ablation(&report));
        }
        Command::Report => {
            let text = collect_report(&cfg.out_dir)?;
            write_atomic(&cfg.out_dir.join("report.txt"), text.as_bytes())?;
            print!("{text}");
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<metadance::Error>() {
        Some(e) if e.is_internal() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
