//! `psf` — point-cloud part segmentation toolkit.
//!
//! Subcommands: `gen-data` (synthetic labelled shapes), `train`, `eval`,
//! `compose-hsp` (hierarchical grid to dense occupancy), `voxel-iou`, and
//! `selfcheck`. Exit codes: 0 ok, 2 configuration error, 3 data error,
//! 4 numeric-check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use psf_core::data::{generate_synthetic, save_dataset, ShapeFamily};
use psf_core::harness::{evaluate_model, run_selfcheck, run_training, Config, ModelKind};
use psf_core::hgrid::{read_dense_grid, read_hier, voxel_iou, write_raw, write_rle};
use psf_core::{Error, StreamRng};

#[derive(Parser)]
#[command(name = "psf", version, about = "Point-cloud part segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labelled dataset.
    GenData {
        /// Shape family: barbell, lamp, or table.
        #[arg(long)]
        family: String,
        /// Number of shapes.
        #[arg(long)]
        count: usize,
        /// Points per shape.
        #[arg(long)]
        points: usize,
        /// Root seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (manifest plus per-shape files).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory; one model per category.
    Train {
        /// Model: pdnet, sparse, or pointcnn.
        #[arg(long)]
        model: String,
        /// Flat `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (with manifest.txt).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and metric logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        /// Model: pdnet, sparse, or pointcnn.
        #[arg(long)]
        model: String,
        /// Checkpoint file, or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (with manifest.txt).
        #[arg(long)]
        data: PathBuf,
        /// Report output path (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Flat `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compose a hierarchical three-label grid into dense 256^3 occupancy.
    ComposeHsp {
        /// Hierarchy file (text).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output grid file; a `.raw` extension selects the byte dump,
        /// anything else the run-length encoding.
        #[arg(long)]
        out: PathBuf,
    },
    /// Intersection-over-union of two dense occupancy grids.
    VoxelIou { a: PathBuf, b: PathBuf },
    /// Run the built-in oracle and gradient suites.
    Selfcheck,
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, Error> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::empty()),
    }
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenData {
            family,
            count,
            points,
            seed,
            out,
        } => {
            let family = ShapeFamily::parse(&family)?;
            let mut rng = StreamRng::new(seed, "gen-data");
            let split = generate_synthetic(family, count, points, &mut rng)?;
            save_dataset(&out, &split)?;
            println!(
                "wrote {count} {} shapes ({points} points, {} parts) to {}",
                family.name(),
                split.part_count,
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            model,
            config,
            data,
            out,
        } => {
            let kind = ModelKind::parse(&model)?;
            let cfg = load_config(&config)?;
            let summary = run_training(kind, &data, &cfg, &out)?;
            for c in &summary.per_category {
                println!(
                    "{}: {} epochs, loss {:.4}, train mIoU {:.4}{} -> {}",
                    c.category,
                    c.epochs_run,
                    c.final_loss,
                    c.final_train_miou,
                    c.best_val_miou
                        .map(|v| format!(", best val mIoU {v:.4}"))
                        .unwrap_or_default(),
                    c.checkpoint.display()
                );
            }
            Ok(())
        }
        Cmd::Eval {
            model,
            checkpoint,
            data,
            report,
            config,
        } => {
            let kind = ModelKind::parse(&model)?;
            let cfg = load_config(&config)?;
            let result = evaluate_model(kind, &checkpoint, &data, &cfg)?;
            for c in &result.per_category {
                // one machine-readable record per category
                println!("{}", serde_json::to_string(c).expect("category to json"));
            }
            print!("{}", result.summary_table());
            let json = serde_json::to_string_pretty(&result).expect("report to json");
            std::fs::write(&report, json).map_err(|e| Error::Io {
                path: report.display().to_string(),
                source: e,
            })?;
            Ok(())
        }
        Cmd::ComposeHsp { input, out } => {
            let hier = read_hier(&input)?;
            let grid = hier.compose_full();
            if out.extension().is_some_and(|e| e == "raw") {
                write_raw(&out, &grid)?;
            } else {
                write_rle(&out, &grid)?;
            }
            println!(
                "composed 256^3 grid: {} occupied voxels -> {}",
                grid.count_ones(),
                out.display()
            );
            Ok(())
        }
        Cmd::VoxelIou { a, b } => {
            let ga = read_dense_grid(&a)?;
            let gb = read_dense_grid(&b)?;
            println!("{}", voxel_iou(&ga, &gb)?);
            Ok(())
        }
        Cmd::Selfcheck => {
            for line in run_selfcheck()? {
                println!("{line}");
            }
            println!("all checks passed");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
