//! `revcore` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! abort, 4 invariant violation, 1 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use revcore::data::dir::{read_dataset, write_dataset, Manifest};
use revcore::data::metrics::{aggregate, mae, MetricReport};
use revcore::data::ppm::{read_raster, save_image_ppm};
use revcore::data::{make_toy_dataset, Pairing, Raster, ToyKind, PALETTE};
use revcore::generators::Domain;
use revcore::gradcheck::gradcheck_suite;
use revcore::profile::{memprofile, DEFAULT_DEPTHS};
use revcore::train::{inspect, load_generator_pair, read_rgck, Entries};
use revcore::{fit, sequence_forward, DType, Direction, Error, OpKind, Result, Scalar, Tensor, TrainConfig};

#[derive(Parser)]
#[command(name = "revcore", version, about = "Reversible image-to-image translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dir {
    Xy,
    Yx,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (with a checkpoint) after this many iterations of this run.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Translate one image with a checkpoint.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        dir: Dir,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Round-trip random features through a checkpoint's core.
    InvertCore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Spatial extent of the features; defaults to the checkpoint's.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to 1e-4 for f32 and 1e-10 for f64 checkpoints.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Finite-difference and retention-mode gradient checks.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Activation memory of stored versus recompute cores across depths.
    Memprofile {
        #[arg(long, value_delimiter = ',', default_value = "8")]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DEPTHS.to_vec())]
        depths: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Image and segmentation metrics against a dataset's B images.
    Eval {
        #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
        ckpt: Option<PathBuf>,
        /// Directory of predictions named like the dataset's files.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        segmentation: bool,
    },
    /// Write a synthetic dataset.
    MakeDataset {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::InvalidState(_) | Error::Parse { .. } | Error::Io { .. } => 2,
        Error::NonFinite(_) => 3,
        Error::Invariant(_) => 4,
        Error::Internal(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let s = serde_json::to_string(v).map_err(|e| Error::Internal(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            resume,
            stop_after,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::Io {
                path: config.clone(),
                source: e,
            })?;
            let cfg = TrainConfig::from_json(&text)?;
            let outcome = fit(&cfg, resume.as_deref(), stop_after)?;
            print_json(&outcome)
        }
        Command::Translate { ckpt, dir, input, out } => {
            let entries = read_rgck(&ckpt)?;
            let report = match inspect(&entries)?.dtype {
                DType::F32 => translate::<f32>(&entries, dir, &input, &out)?,
                DType::F64 => translate::<f64>(&entries, dir, &input, &out)?,
            };
            print_json(&report)
        }
        Command::InvertCore {
            ckpt,
            trials,
            size,
            seed,
            tol,
        } => {
            let entries = read_rgck(&ckpt)?;
            let dtype = inspect(&entries)?.dtype;
            let (err, tol) = match dtype {
                DType::F32 => (invert_core::<f32>(&entries, trials, size, seed)?, tol.unwrap_or(1e-4)),
                DType::F64 => (invert_core::<f64>(&entries, trials, size, seed)?, tol.unwrap_or(1e-10)),
            };
            print_json(&json!({"trials": trials, "dtype": dtype, "max_error": err, "tolerance": tol}))?;
            if err.is_nan() || err >= tol {
                return Err(Error::Invariant(format!(
                    "core round-trip error {err:.3e} exceeds {tol:.1e}"
                )));
            }
            Ok(())
        }
        Command::Gradcheck { inject_fault } => {
            let fault = match inject_fault {
                Some(name) => Some(
                    OpKind::from_name(&name).ok_or_else(|| Error::InvalidArgument(format!("unknown op {name:?}")))?,
                ),
                None => None,
            };
            let records = gradcheck_suite(fault)?;
            println!("{:<32} {:>13} {:>9}  status", "check", "max_rel_error", "tolerance");
            for r in &records {
                let status = if r.passed { "ok" } else { "FAIL" };
                println!(
                    "{:<32} {:>13.1e} {:>9.0e}  {status}",
                    r.name, r.max_rel_error, r.tolerance
                );
            }
            match records.iter().find(|r| !r.passed) {
                Some(r) => Err(Error::Invariant(format!(
                    "gradcheck failed: {} max rel error {:.1e} (tolerance {:.0e})",
                    r.name, r.max_rel_error, r.tolerance
                ))),
                None => Ok(()),
            }
        }
        Command::Memprofile {
            widths,
            depths,
            size,
            seed,
        } => {
            let profile = memprofile(&widths, &depths, size, seed)?;
            for r in &profile.records {
                print_json(r)?;
            }
            println!();
            println!(
                "{:>5} {:>5} {:>9} {:>16} {:>12} {:>10} {:>10}",
                "width", "depth", "mode", "activation_bytes", "param_bytes", "subnet_evals", "wall_ms"
            );
            for r in &profile.records {
                println!(
                    "{:>5} {:>5} {:>9} {:>16} {:>12} {:>10} {:>10.1}",
                    r.width,
                    r.depth,
                    format!("{:?}", r.mode).to_lowercase(),
                    r.retained_activation_bytes,
                    r.parameter_bytes,
                    r.subnet_eval_count,
                    r.wall_time_ms
                );
            }
            println!();
            for s in &profile.summaries {
                print_json(s)?;
            }
            match profile.summaries.iter().find(|s| !s.holds()) {
                Some(s) => Err(Error::Invariant(format!(
                    "memory invariants fail at width {}: {s:?}",
                    s.width
                ))),
                None => Ok(()),
            }
        }
        Command::Eval {
            ckpt,
            pred,
            data,
            segmentation,
        } => {
            let (ds, _) = read_dataset(&data)?;
            if segmentation && ds.labels.is_none() {
                return Err(Error::InvalidArgument(format!(
                    "{} has no labelsB to score segmentation",
                    data.display()
                )));
            }
            if ds.a.len() != ds.b.len() {
                return Err(Error::InvalidArgument("eval needs a paired dataset".into()));
            }
            let preds = match (ckpt, pred) {
                (Some(ckpt), _) => {
                    let entries = read_rgck(&ckpt)?;
                    match inspect(&entries)?.dtype {
                        DType::F32 => predict::<f32>(&entries, &ds.a)?,
                        DType::F64 => predict::<f64>(&entries, &ds.a)?,
                    }
                }
                (None, Some(dir)) => (0..ds.b.len())
                    .map(|i| read_raster(&dir.join(format!("{i:04}.ppm"))))
                    .collect::<Result<Vec<_>>>()?,
                (None, None) => return Err(Error::InvalidArgument("eval needs --ckpt or --pred".into())),
            };
            let mut reports = Vec::with_capacity(preds.len());
            for (i, (p, t)) in preds.iter().zip(&ds.b).enumerate() {
                let labels = ds.labels.as_ref().map(|l| (l[i].data.as_slice(), &PALETTE[..]));
                reports.push(MetricReport::compute::<f64>(&p.to_tensor(), &t.to_tensor(), labels)?);
            }
            print_json(&json!({"per_image": reports, "aggregate": aggregate(&reports)?}))
        }
        Command::MakeDataset {
            kind,
            n,
            size,
            seed,
            out,
            force,
        } => {
            let kind: ToyKind = kind.parse()?;
            let ds = make_toy_dataset(kind, n, size, seed)?;
            let manifest = Manifest {
                kind: kind.name().to_string(),
                n,
                size,
                seed,
                pairing: Pairing::Paired,
            };
            write_dataset(&ds, &manifest, &out, force)?;
            print_json(&json!({"out": out, "manifest": manifest}))
        }
    }
}

fn translate<T: Scalar>(entries: &Entries, dir: Dir, input: &Path, out: &Path) -> Result<Value> {
    let (pair, store) = load_generator_pair::<T>(entries)?;
    let from = match dir {
        Dir::Xy => Domain::X,
        Dir::Yx => Domain::Y,
    };
    let x = read_raster(input)?.to_tensor::<T>();
    pair.check_image(x.shape(), from)?;
    let (fwd, back): (Tensor<T>, Tensor<T>) = match dir {
        Dir::Xy => {
            let y = pair.translate_xy(&store, &x)?;
            let b = pair.translate_yx(&store, &y)?;
            (y, b)
        }
        Dir::Yx => {
            let y = pair.translate_yx(&store, &x)?;
            let b = pair.translate_xy(&store, &y)?;
            (y, b)
        }
    };
    save_image_ppm(&fwd, out)?;
    let (qx, qb) = (Raster::from_tensor(&x, 0)?, Raster::from_tensor(&back, 0)?);
    let max_levels = qx
        .data
        .iter()
        .zip(&qb.data)
        .map(|(&a, &b)| a.abs_diff(b))
        .max()
        .unwrap_or(0);
    Ok(json!({
        "dtype": T::DTYPE,
        "out": out,
        "cycle_mae": mae(&back, &x)?,
        "cycle_max_abs": max_levels,
    }))
}

/// Worst `max |core^-1(core(h)) - h|` over `trials` uniform feature tensors.
fn invert_core<T: Scalar>(entries: &Entries, trials: usize, size: Option<usize>, seed: u64) -> Result<f64> {
    let (pair, store) = load_generator_pair::<T>(entries)?;
    let size = size.unwrap_or(pair.config.image_size / 4);
    if trials == 0 || size == 0 {
        return Err(Error::InvalidArgument("--trials and --size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let h = Tensor::<T>::uniform(&[1, pair.core.channels(), size, size], -1.0, 1.0, &mut rng);
        let y = sequence_forward(&pair.core, &store, &h, Direction::Xy)?;
        let back = sequence_forward(&pair.core, &store, &y, Direction::Yx)?;
        worst = worst.max(back.max_abs_diff(&h)?.as_f64());
    }
    Ok(worst)
}

fn predict<T: Scalar>(entries: &Entries, inputs: &[Raster]) -> Result<Vec<Raster>> {
    let (pair, store) = load_generator_pair::<T>(entries)?;
    inputs
        .iter()
        .map(|r| Raster::from_tensor(&pair.translate_xy(&store, &r.to_tensor::<T>())?, 0))
        .collect()
}
