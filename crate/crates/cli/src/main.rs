use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use incalign::io::load_config;
use incalign::{AdaptMode, InitBox, RunConfig};
use incalign_cli::{cmd_ablate, cmd_evaluate, cmd_synth, cmd_track, cmd_train, format_table, CliError, Result, TrackOptions};

#[derive(Parser)]
#[command(name = "incalign", version, about = "Landmark tracking with online model adaptation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic training set and sequence.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all models from annotated images.
    Train {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model container.
        #[arg(long)]
        out: PathBuf,
    },
    /// Track a frame sequence.
    Track {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// none, rep, fit or both (overrides the config).
        #[arg(long)]
        adapt: Option<AdaptMode>,
        #[arg(long)]
        eval_stride: Option<usize>,
        /// Ground-truth annotations named after the frames.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// First-frame box `x,y,width,height` when no ground truth is given.
        #[arg(long, value_parser = parse_box)]
        init_box: Option<InitBox>,
        /// Write frames with the fitted landmarks drawn in.
        #[arg(long)]
        overlays: bool,
    },
    /// Cumulative error distributions of one or more result files.
    Evaluate {
        /// `results.csv` files, optionally as `name=path`.
        #[arg(required = true)]
        results: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track once per adaptation mode and compare.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_box(s: &str) -> std::result::Result<InitBox, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, width, height] if width > 0.0 && height > 0.0 => Ok(InitBox { x, y, width, height }),
        _ => Err("expected x,y,width,height with positive size".into()),
    }
}

fn config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    })
}

fn named(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(arg);
            let name = p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string());
            (name, p)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth { config: c, out } => {
            let s = cmd_synth(&config(c.as_deref())?, &out)?;
            println!("wrote {} training images and {} sequence frames to {}", s.training_images, s.sequence_frames, out.display());
        }
        Command::Train { images, annotations, config: c, out } => {
            let r = cmd_train(&images, &annotations, &config(c.as_deref())?, &out)?;
            println!("shape modes {}, appearance dimension {}", r.shape_modes, r.appearance_dim);
            for (k, v) in r.cascade_residuals.iter().enumerate() {
                println!("residual after stage {k}: {v:.5}");
            }
            println!("model written to {}", out.display());
        }
        Command::Track { model, frames, config: c, out, adapt, eval_stride, gt, init_box, overlays } => {
            let mut tracker = config(c.as_deref())?.tracker;
            if let Some(a) = adapt {
                tracker.adapt = a;
            }
            if let Some(s) = eval_stride {
                tracker.eval_stride = s;
            }
            if gt.is_none() && init_box.is_none() {
                return Err(CliError::Usage("tracking without --gt needs --init-box".into()));
            }
            let s = cmd_track(&TrackOptions { model, frames, out: out.clone(), tracker, gt, init_box, overlays })?;
            let median = s.median_rmse.map(|m| format!(", median Norm RMSE {m:.4}")).unwrap_or_default();
            println!(
                "{} frames: {} aligned, {} misaligned, {} skipped, {} adaptations{median}; results in {}",
                s.frames,
                s.aligned,
                s.misaligned,
                s.skipped,
                s.adaptations,
                out.display()
            );
        }
        Command::Evaluate { results, out } => {
            let runs: Vec<_> = results.iter().map(|r| named(r)).collect();
            print!("{}", format_table(&cmd_evaluate(&runs, &out)?));
        }
        Command::Ablate { model, frames, gt, config: c, out } => {
            let tracker = config(c.as_deref())?.tracker;
            print!("{}", format_table(&cmd_ablate(&model, &frames, &gt, &tracker, &out)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
