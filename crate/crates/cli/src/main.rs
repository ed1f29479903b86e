use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maseg_cli::{exit_code, Ctx, PipelineConfig, Preset, Split};
use maseg_core::Result;

#[derive(Parser)]
#[command(
    name = "maseg",
    version,
    about = "Microaneurysm segmentation and morphology pipeline"
)]
struct Cli {
    /// Pipeline config (JSON); missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantoms with ground-truth masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of phantoms; overrides synth.count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Build two-channel network inputs from frame stacks.
    Preprocess(InOut),
    /// Add augmented copies of the training pairs.
    Augment {
        #[command(flatten)]
        io: InOut,
        /// Cycle through rotation angles instead of sampling them.
        #[arg(long)]
        enumerate_rotations: bool,
    },
    /// Train one model per cross-validation fold.
    Train {
        #[command(flatten)]
        io: InOut,
        /// Continue from existing fold checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Write probability maps of every fold's best model.
    Predict {
        /// Directory written by `train`.
        #[arg(long)]
        models: PathBuf,
        #[command(flatten)]
        io: InOut,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Threshold, ensemble and clear probability maps into masks.
    Postprocess {
        #[command(flatten)]
        io: InOut,
        #[arg(long)]
        threshold: Option<f32>,
        #[arg(long)]
        min_area: Option<usize>,
        /// Use only the best model.
        #[arg(long)]
        no_ensemble: bool,
        /// Clear small fragments in each model's mask before the union.
        #[arg(long)]
        clear_before_union: bool,
    },
    /// Dice, IoU and Hausdorff distance between two mask directories.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// LC, NC and BNR of every mask component.
    Quantify {
        #[command(flatten)]
        io: InOut,
        #[arg(long)]
        microns_per_pixel: Option<f64>,
    },
    /// Run every stage on synthetic data.
    Pipeline {
        /// Output root; defaults to paths.out of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the effective configuration with every default spelled out.
    Dump {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
    },
}

#[derive(Args)]
struct InOut {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

fn load_config(cli: &Cli, preset: Option<PresetArg>) -> Result<PipelineConfig> {
    let mut cfg = match (&cli.config, preset) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(PresetArg::Paper)) => PipelineConfig::preset(Preset::Paper),
        (None, _) => PipelineConfig::preset(Preset::Desk),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let preset = match &cli.command {
        Command::Config {
            action: ConfigAction::Dump { preset },
        } => *preset,
        _ => None,
    };
    let mut ctx = Ctx::new(load_config(&cli, preset)?);
    ctx.jobs = cli.jobs.max(1);
    if let Some(seed) = cli.seed {
        ctx.overrides.insert("seed".into(), seed.to_string());
    }
    let set = |ctx: &mut Ctx, key: &str, value: String| {
        ctx.overrides.insert(key.to_string(), value);
    };
    match &cli.command {
        Command::Synth { out, count } => {
            if let Some(n) = count {
                ctx.cfg.synth.count = *n;
                set(&mut ctx, "synth.count", n.to_string());
            }
            maseg_cli::synth(&ctx, out)
        }
        Command::Preprocess(io) => maseg_cli::preprocess(&ctx, &io.input, &io.out),
        Command::Augment {
            io,
            enumerate_rotations,
        } => {
            if *enumerate_rotations {
                ctx.cfg.augment.enumerate_rotations = true;
                set(&mut ctx, "augment.enumerate_rotations", "true".into());
            }
            maseg_cli::augment(&ctx, &io.input, &io.out)
        }
        Command::Train { io, resume } => maseg_cli::train(&ctx, &io.input, &io.out, *resume),
        Command::Predict { models, io, split } => {
            let split = match split {
                SplitArg::Train => Some(Split::Train),
                SplitArg::Test => Some(Split::Test),
                SplitArg::All => None,
            };
            maseg_cli::predict(&ctx, models, &io.input, &io.out, split)
        }
        Command::Postprocess {
            io,
            threshold,
            min_area,
            no_ensemble,
            clear_before_union,
        } => {
            if let Some(t) = threshold {
                ctx.cfg.postproc.threshold = *t;
                set(&mut ctx, "postproc.threshold", t.to_string());
            }
            if let Some(a) = min_area {
                ctx.cfg.postproc.min_area = *a;
                set(&mut ctx, "postproc.min_area", a.to_string());
            }
            if *no_ensemble {
                ctx.cfg.postproc.ensemble = false;
                set(&mut ctx, "postproc.ensemble", "false".into());
            }
            if *clear_before_union {
                ctx.cfg.postproc.clear_before_union = true;
                set(&mut ctx, "postproc.clear_before_union", "true".into());
            }
            maseg_cli::postprocess(&ctx, &io.input, &io.out)
        }
        Command::Evaluate { pred, truth, out } => {
            let s = maseg_cli::evaluate(&ctx, pred, truth, out)?;
            println!(
                "{} pairs: mean Dice {:.4}, mean IoU {:.4}",
                s.count, s.dice.mean, s.iou.mean
            );
            Ok(())
        }
        Command::Quantify {
            io,
            microns_per_pixel,
        } => {
            if let Some(s) = microns_per_pixel {
                ctx.cfg.quantify.microns_per_pixel = Some(*s);
                set(&mut ctx, "quantify.microns_per_pixel", s.to_string());
            }
            maseg_cli::quantify(&ctx, &io.input, &io.out).map(|_| ())
        }
        Command::Pipeline { out } => {
            let root = out.clone().unwrap_or_else(|| ctx.cfg.paths.out.clone());
            let s = maseg_cli::pipeline(&ctx, Path::new(&root))?;
            println!(
                "{} test images: mean Dice {:.4}, BNR Spearman {:.4}",
                s.test_items, s.mean_dice, s.bnr_spearman
            );
            Ok(())
        }
        Command::Config { .. } => {
            ctx.cfg.validate()?;
            print!("{}", ctx.cfg.to_json());
            Ok(())
        }
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
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
