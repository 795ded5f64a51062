use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use capit_core::ablation::{run_ablation, Preset};
use capit_core::checkpoint::Checkpoint;
use capit_core::eval::{evaluate, Embedder};
use capit_core::io;
use capit_core::pairing::{pair_traversals, PoseLog};
use capit_core::synthdata::{generate_dataset, SynthDataset, SOURCE_TRAVERSAL};
use capit_core::training::{latest_checkpoint, run_training, RunConfig, Trainer};
use capit_core::{Error, Image};

/// Seed used when neither `--seed` nor the config file sets one.
const DEFAULT_SEED: u64 = 0;

#[derive(Parser)]
#[command(
    name = "capit",
    version,
    about = "Coarsely aligned paired image translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic coarsely aligned dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pair two pose logs by nearest GPS position.
    Pair {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long = "max-dist")]
        max_dist: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a translator on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate images with a trained checkpoint (file or run directory).
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A dataset directory (its adverse frames) or a directory of PNGs.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score translated frames against a dataset's ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate a preset sweep.
    Ablate {
        /// row1..row5, rows, window, mask-threshold, or gan-mode.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> capit_core::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig {
            seed: DEFAULT_SEED,
            ..RunConfig::default()
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo(cfg: &RunConfig, out_dir: &Path) -> capit_core::Result<()> {
    let text = cfg.echo()?;
    print!("{text}");
    io::write_text(&out_dir.join("config.resolved"), &text)
}

fn read_named_pngs(dir: &Path) -> capit_core::Result<Vec<(String, Image)>> {
    io::list_pngs(dir)?
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((stem, io::read_image(&p)?))
        })
        .collect()
}

fn run(cmd: Command) -> capit_core::Result<()> {
    match cmd {
        Command::Synth { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = generate_dataset(&cfg.synth, &out)?;
            print!("{}", capit_core::config::echo(&cfg.synth)?);
            println!("dataset_hash = {}", ds.hash);
        }
        Command::Pair {
            source,
            target,
            max_dist,
            out,
        } => {
            let m = pair_traversals(&PoseLog::read(&source)?, &PoseLog::read(&target)?, max_dist)?;
            m.write(&out)?;
            println!("max_distance = {max_dist}");
            println!("pairs = {}", m.len());
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = SynthDataset::load(&data)?;
            echo(&cfg, &out)?;
            let outcome = run_training(&ds, &cfg, &out, resume.as_deref())?;
            if let Some(last) = outcome.manifest.rows.last() {
                println!("final_total = {}", last.total);
            }
        }
        Command::Translate {
            checkpoint,
            input,
            out,
        } => {
            let path = if checkpoint.is_dir() {
                latest_checkpoint(&checkpoint)?
            } else {
                checkpoint
            };
            let trainer = Trainer::from_checkpoint(Checkpoint::read(&path)?)?;
            let dir = if input.join("manifest").is_file() {
                input.join("images").join(SOURCE_TRAVERSAL)
            } else {
                input
            };
            let named = read_named_pngs(&dir)?;
            if named.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "no PNG images in {}",
                    dir.display()
                )));
            }
            let images: Vec<Image> = named.iter().map(|(_, img)| img.clone()).collect();
            let translated = trainer.translate(&images)?;
            for ((name, _), img) in named.iter().zip(&translated) {
                io::write_image(&out.join(format!("{name}.png")), img)?;
            }
            println!("checkpoint = {}", path.display());
            println!("translated = {}", translated.len());
        }
        Command::Eval {
            pred,
            data,
            report,
            config,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let ds = SynthDataset::load(&data)?;
            let preds = read_named_pngs(&pred)?;
            let metrics = evaluate(&preds, &ds, &Embedder::new(&cfg.eval)?)?;
            let text = metrics.to_text();
            io::write_text(&report, &text)?;
            print!("{text}");
        }
        Command::Ablate {
            preset,
            data,
            out,
            config,
            seed,
        } => {
            let p: Preset = preset.parse()?;
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = SynthDataset::load(&data)?;
            echo(&cfg, &out)?;
            let report = run_ablation(&ds, p, &preset, &cfg, &out)?;
            let text = report.to_text();
            io::write_text(&out.join("report.csv"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NumericAbort { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
