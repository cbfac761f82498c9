use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use dhbr_core::checkpoint::{load_trained, Checkpoint};
use dhbr_core::config::RunConfig;
use dhbr_core::dataset::{load_dataset, prepare_hierarchy, write_synthetic, Dataset};
use dhbr_core::eval::{eval_transfer_pairs, evaluate, sample_pairs};
use dhbr_core::mesh::{load_mesh, save_mesh};
use dhbr_core::model::{interpolation_grid, DhbrModel};
use dhbr_core::synth::GeneratorSpec;
use dhbr_core::train::{train, TrainData};

#[derive(Parser)]
#[command(name = "dhbr", version, about = "Disentangled human body mesh autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the sampling hierarchy and write <dataset>/hierarchy.bin.
    Prep {
        #[arg(long)]
        dataset: PathBuf,
        /// Run config supplying the hierarchy ratios and spiral lengths.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's dataset path.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
        /// Per-epoch report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Reconstruction E_avd on a split, plus oracle transfer on synthetic data.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
        split: String,
        /// Per-mesh E_avd table.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Summary as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Number of (shape, pose) pairs for the transfer oracle.
        #[arg(long, default_value_t = 100)]
        pairs: usize,
    },
    /// Decode the shape of one mesh in the pose of another.
    Transfer {
        #[command(flatten)]
        model: ModelArgs,
        shape: PathBuf,
        pose: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Decode a grid of separately interpolated shape and pose codes.
    Interp {
        #[command(flatten)]
        model: ModelArgs,
        a: PathBuf,
        b: PathBuf,
        /// Rows × columns; rows vary shape, columns vary pose.
        #[arg(long, default_value = "4x4")]
        grid: String,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Serve the model over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory holding the template, skeleton and hierarchy.
    #[arg(long)]
    dataset: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<(DhbrModel, Dataset)> {
        let dataset = load_dataset(&self.dataset).with_context(|| format!("loading {}", self.dataset.display()))?;
        let (model, _, _) =
            load_trained(&self.checkpoint, &dataset).with_context(|| format!("loading {}", self.checkpoint.display()))?;
        Ok((model, dataset))
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s.split_once(['x', 'X']).context("grid must look like NxM")?;
    let (r, c): (usize, usize) = (r.trim().parse()?, c.trim().parse()?);
    ensure!(r > 0 && c > 0, "grid dimensions must be positive");
    Ok((r, c))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, count, seed } => {
            ensure!(count > 0, "count must be positive");
            let d = write_synthetic(&out, count, seed, GeneratorSpec::default())?;
            println!(
                "wrote {} meshes ({} vertices) to {}",
                d.meshes.len(),
                d.template.vertex_count(),
                out.display()
            );
        }
        Command::Prep { dataset, config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let d = load_dataset(&dataset)?;
            let h = prepare_hierarchy(&d, &cfg.hierarchy)?;
            println!("hierarchy {:?} vertices, hash {}", h.mesh_sizes(), h.hash());
        }
        Command::Train {
            config,
            dataset,
            epochs,
            seed,
            out,
            report,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let d = load_dataset(&cfg.dataset).with_context(|| format!("loading {}", cfg.dataset.display()))?;
            let h = d
                .load_hierarchy()
                .with_context(|| format!("no usable hierarchy; run `dhbr prep --dataset {}`", cfg.dataset.display()))?;
            let model = DhbrModel::new(cfg.model.clone(), d.template.clone(), d.skeleton.clone(), h)?;
            let outcome = train(
                &cfg,
                model,
                TrainData {
                    meshes: &d.meshes,
                    splits: &d.splits,
                },
                |r| {
                    eprintln!(
                        "epoch {:>3}  lr {:.2e}  loss {:.5}  val E_avd {}  ({:.1}s)",
                        r.epoch,
                        r.lr,
                        r.loss.total,
                        r.val_e_avd.map_or("-".into(), |v| format!("{v:.3} mm")),
                        r.seconds
                    )
                },
            )?;
            Checkpoint::from_model(&outcome.best, &cfg).save(&out)?;
            if let Some(p) = report {
                write_json(&p, &outcome.report)?;
            }
            println!("best epoch {} saved to {}", outcome.report.best_epoch, out.display());
        }
        Command::Eval {
            model,
            split,
            csv,
            json,
            pairs,
        } => {
            let (m, d) = model.load()?;
            let idx: Vec<usize> = match split.as_str() {
                "train" => d.splits.train.clone(),
                "val" => d.splits.val.clone(),
                "test" => d.splits.test.clone(),
                _ => (0..d.meshes.len()).collect(),
            };
            ensure!(!idx.is_empty(), "split {split} is empty");
            let report = evaluate(&m, &d.subset(&idx))?;
            println!("{split}: mean E_avd {:.3} mm over {} meshes", report.mean_e_avd, idx.len());
            if let Some(p) = csv {
                let names: Vec<String> = idx.iter().map(|&i| d.names[i].clone()).collect();
                report.write_csv(&names, &p)?;
            }
            let transfer = match (&d.factors, pairs) {
                (Some(f), n) if n > 0 && idx.len() >= 2 => {
                    let body = f.body_model()?;
                    let p = sample_pairs(&idx, n, 0)?;
                    let t = eval_transfer_pairs(&m, &body, &d.meshes, &f.factors, &p)?;
                    println!(
                        "transfer: E_avd {:.3} mm vs baseline {:.3} mm over {} pairs",
                        t.mean_transfer, t.mean_baseline, n
                    );
                    Some(t)
                }
                _ => None,
            };
            if let Some(p) = json {
                let summary = serde_json::json!({
                    "split": split,
                    "mean_e_avd_mm": report.mean_e_avd,
                    "mesh_count": idx.len(),
                    "transfer_e_avd_mm": transfer.as_ref().map(|t| t.mean_transfer),
                    "baseline_e_avd_mm": transfer.as_ref().map(|t| t.mean_baseline),
                });
                write_json(&p, &summary)?;
            }
        }
        Command::Transfer { model, shape, pose, out } => {
            let (m, _) = model.load()?;
            let a = load_mesh(&shape)?;
            let b = load_mesh(&pose)?;
            save_mesh(&m.pose_transfer(&a, &b)?, &out)?;
        }
        Command::Interp { model, a, b, grid, out } => {
            let (rows, cols) = parse_grid(&grid)?;
            let (m, _) = model.load()?;
            let ca = m.encode_full(&load_mesh(&a)?)?;
            let cb = m.encode_full(&load_mesh(&b)?)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, row) in interpolation_grid(&ca, &cb, rows, cols)?.iter().enumerate() {
                for (j, code) in row.iter().enumerate() {
                    save_mesh(&m.decode(code)?, out.join(format!("interp_{i}_{j}.obj")))?;
                }
            }
            println!("wrote {} meshes to {}", rows * cols, out.display());
        }
        Command::Serve {
            checkpoint,
            dataset_dir,
            port,
            host,
        } => {
            if !checkpoint.is_file() {
                bail!("checkpoint {} does not exist", checkpoint.display());
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(dhbr_service::serve(SocketAddr::new(host, port), checkpoint, dataset_dir))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One line: the chain joined.
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
