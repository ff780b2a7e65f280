use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use mvps_cli::config::PipelineConfig;
use mvps_cli::pipeline::{self, GroundTruth, TIMINGS};

#[derive(Parser, Debug)]
#[command(name = "mvps", version, about = "Multi-view photometric stereo: data, training, inference, fusion, evaluation")]
struct Cli {
    /// TOML configuration file; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    sets: Vec<String>,
    /// Worker threads; 1 gives the fully deterministic mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Seed for both data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict depth, normal and mask maps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scenes to process (default: the test split).
        #[arg(long = "scene")]
        scenes: Vec<String>,
        /// Comma-separated view ids (default: all).
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
    },
    /// Filter and fuse predictions into one PLY per scene.
    Fuse {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chamfer distance and F-score against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth PLY.
        #[arg(long, conflicts_with = "data")]
        gt: Option<PathBuf>,
        /// Dataset root; the ground truth is lifted from its depth maps.
        #[arg(long, requires = "scene")]
        data: Option<PathBuf>,
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Drop points below this world z before measuring.
        #[arg(long)]
        crop_z: Option<f64>,
    },
    /// gen-data, train, infer, fuse and eval into one directory.
    All {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match cli.command {
        Command::GenData { out } => {
            pipeline::cmd_gen_data(&cfg, &out, cli.force)?;
        }
        Command::Train { data, out } => {
            let (outcome, timings) = pipeline::cmd_train(&cfg, &data, &out, cli.force)?;
            timings.write(&out.join(TIMINGS))?;
            if let Some(last) = outcome.records.last() {
                println!("{}", last.line());
            }
        }
        Command::Infer {
            checkpoint,
            data,
            out,
            scenes,
            views,
        } => {
            let timings = pipeline::cmd_infer(&cfg, &checkpoint, &data, &out, &scenes, views.as_deref(), cli.force)?;
            timings.write(&out.join(TIMINGS))?;
        }
        Command::Fuse { pred, data, out } => {
            let timings = pipeline::cmd_fuse(&cfg, &pred, &data, &out, cli.force)?;
            timings.write(&out.join(TIMINGS))?;
        }
        Command::Eval {
            pred,
            gt,
            data,
            scene,
            out,
            crop_z,
        } => {
            if crop_z.is_some() {
                cfg.eval.crop_z = crop_z;
            }
            let gt = match (gt, data, scene) {
                (Some(p), _, _) => GroundTruth::Ply(p),
                (None, Some(root), Some(scene)) => GroundTruth::Dataset { root, scene },
                _ => bail!("eval needs --gt PLY or --data DIR --scene NAME"),
            };
            let report = pipeline::cmd_eval(&cfg, &pred, &gt, &out, cli.force)?;
            print!("{}", report.to_text());
        }
        Command::All { out } => {
            for (scene, r) in pipeline::cmd_all(&cfg, &out, cli.force)? {
                println!("{scene} chamfer_l1={:.6} fscore={:.4}", r.chamfer_l1, r.fscore);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
