use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vesselpatch::commands::{self, PatchSpec, UncertaintyOptions};
use vesselpatch::config::{BudgetConfig, PipelineConfig};
use vesselpatch::maps::ResampleMethod;
use vesselpatch::patching::EdgePolicy;
use vesselpatch::selection::{Scope, SelectionRequest, Strategy};
use vesselpatch::synth::DomainParams;

#[derive(Parser)]
#[command(
    name = "vesselpatch",
    version,
    about = "Patch-based active annotation for vessel segmentation"
)]
struct Cli {
    /// Pipeline config (TOML); supplies defaults for every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for per-image work (0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct GridArgs {
    /// Patch size as WxH, e.g. 260x256.
    #[arg(long, value_parser = parse_dims)]
    patch_size: Option<(usize, usize)>,

    #[arg(long, value_parser = ["exact", "crop"])]
    edge_policy: Option<String>,
}

#[derive(Args, Default)]
struct BudgetArgs {
    /// Fraction of patches kept by the uncertainty stage.
    #[arg(long)]
    c1: Option<f64>,
    /// Fraction of stage-1 patches kept by the vessel-area stage.
    #[arg(long)]
    c2: Option<f64>,
    /// Overall budget fraction (single-stage strategies).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = ["cup", "random", "uncertainty"])]
    strategy: Option<String>,
    #[arg(long, value_parser = ["pooled", "per-image"])]
    scope: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Prediction masks and entropy maps from probability or logit maps.
    Uncertainty {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resample maps to this full-resolution size (WxH) first.
        #[arg(long, value_parser = parse_dims)]
        resize: Option<(usize, usize)>,
        #[arg(long, value_parser = ["nearest", "bilinear"], default_value = "bilinear")]
        resample: String,
    },
    /// Per-patch vessel counts and summed uncertainty.
    Stats {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        uncertainty: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Choose patches for annotation.
    Select {
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// Crop selected patches out of images for annotation.
    Export {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of <id>.pgm images (ground-truth masks for oracle annotation).
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Splice annotated patches into prediction masks.
    Merge {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Annotate by copying ground-truth patches (needs --ground-truth).
        #[arg(long)]
        oracle_annotate: bool,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Dice, IoU, MCC and BM against ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// JSON report path; the table goes next to it as .txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic source/target vessel dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Images per domain.
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, value_parser = parse_dims, default_value = "512x512")]
        size: (usize, usize),
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run uncertainty, stats, select, export, merge and eval from a config.
    Pipeline {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        oracle_annotate: bool,
    },
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let w = w.parse().map_err(|_| format!("bad width in `{s}`"))?;
    let h = h.parse().map_err(|_| format!("bad height in `{s}`"))?;
    Ok((w, h))
}

fn patch_spec(args: &GridArgs, cfg: Option<&PipelineConfig>) -> Result<PatchSpec> {
    let base = cfg.map(|c| c.grid).unwrap_or_default();
    let (patch_width, patch_height) = args
        .patch_size
        .unwrap_or((base.patch_width, base.patch_height));
    let edge_policy = match &args.edge_policy {
        Some(p) => p.parse::<EdgePolicy>()?,
        None => base.edge_policy,
    };
    Ok(PatchSpec {
        patch_width,
        patch_height,
        edge_policy,
    })
}

fn apply_budget(args: &BudgetArgs, cfg: &mut PipelineConfig) -> Result<()> {
    if let Some(s) = &args.strategy {
        cfg.strategy = s.parse::<Strategy>()?;
    }
    if let Some(s) = &args.scope {
        cfg.scope = s.parse::<Scope>()?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.c1.is_some() || args.c2.is_some() || args.alpha.is_some() {
        cfg.budget = BudgetConfig {
            c1: args.c1,
            c2: args.c2,
            alpha: args.alpha,
        };
    }
    Ok(())
}

fn selection_request(args: &BudgetArgs, cfg: Option<&PipelineConfig>) -> Result<SelectionRequest> {
    let strategy = match (&args.strategy, cfg) {
        (Some(s), _) => s.parse::<Strategy>()?,
        (None, Some(c)) => c.strategy,
        (None, None) => Strategy::Cup,
    };
    let scope = match (&args.scope, cfg) {
        (Some(s), _) => s.parse::<Scope>()?,
        (None, Some(c)) => c.scope,
        (None, None) => Scope::Pooled,
    };
    let budget = if args.c1.is_some() || args.c2.is_some() || args.alpha.is_some() {
        BudgetConfig {
            c1: args.c1,
            c2: args.c2,
            alpha: args.alpha,
        }
    } else {
        cfg.map(|c| c.budget).unwrap_or_default()
    };
    let (c1, c2) = budget.resolve(strategy)?;
    Ok(SelectionRequest {
        strategy,
        c1,
        c2,
        scope,
        seed: args.seed.or(cfg.map(|c| c.seed)).unwrap_or(0),
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Some(PipelineConfig::load(path)?),
        None => None,
    };
    let workers = cli.workers.or(cfg.as_ref().map(|c| c.workers)).unwrap_or(0);

    match cli.command {
        Command::Uncertainty {
            maps,
            out,
            resize,
            resample,
        } => {
            let method = if resample == "nearest" {
                ResampleMethod::Nearest
            } else {
                ResampleMethod::Bilinear
            };
            let ids = commands::uncertainty(
                &maps,
                &out,
                &UncertaintyOptions {
                    resize,
                    method,
                    workers,
                },
            )?;
            println!("processed {} maps into {}", ids.len(), out.display());
        }
        Command::Stats {
            predictions,
            uncertainty,
            out,
            grid,
        } => {
            let spec = patch_spec(&grid, cfg.as_ref())?;
            let stats = commands::stats(&predictions, &uncertainty, &spec, &out, workers)?;
            println!("wrote {} patch records to {}", stats.len(), out.display());
        }
        Command::Select { stats, out, budget } => {
            let req = selection_request(&budget, cfg.as_ref())?;
            let m = commands::select(&stats, &req, &out)?;
            println!(
                "selected {} of {} patches -> {}",
                m.entries.len(),
                m.budget.n_total,
                out.display()
            );
        }
        Command::Export {
            manifest,
            images,
            out,
            grid,
        } => {
            let spec = patch_spec(&grid, cfg.as_ref())?;
            let m = commands::read_manifest(&manifest)?;
            let files = commands::export(&m, &images, &spec, &out, workers)?;
            println!("exported {} patches to {}", files.len(), out.display());
        }
        Command::Merge {
            manifest,
            predictions,
            annotations,
            oracle_annotate,
            ground_truth,
            out,
            grid,
        } => {
            let spec = patch_spec(&grid, cfg.as_ref())?;
            let m = commands::read_manifest(&manifest)?;
            // Oracle annotations are staged in a scratch directory, never
            // mixed into a user-supplied one.
            let scratch;
            let ann_dir = match (annotations, oracle_annotate, ground_truth) {
                (Some(_), true, _) => {
                    bail!("--oracle-annotate conflicts with --annotations")
                }
                (Some(dir), false, _) => dir,
                (None, true, Some(gt)) => {
                    scratch = tempfile::tempdir().context("scratch directory")?;
                    commands::export(&m, &gt, &spec, scratch.path(), workers)?;
                    scratch.path().to_path_buf()
                }
                (None, true, None) => bail!("--oracle-annotate needs --ground-truth"),
                (None, false, _) => bail!("pass --annotations DIR or --oracle-annotate"),
            };
            let ids = commands::merge(&m, &predictions, &ann_dir, &spec, &out, workers)?;
            println!("wrote {} enhanced labels to {}", ids.len(), out.display());
        }
        Command::Eval {
            predictions,
            ground_truth,
            out,
        } => {
            let report = commands::eval(&predictions, &ground_truth, &out, workers)?;
            print!("{}", report.to_table());
        }
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => {
            let (width, height) = size;
            let mut source = DomainParams {
                width,
                height,
                ..DomainParams::source_default()
            };
            let mut target = DomainParams {
                width,
                height,
                ..DomainParams::target_default()
            };
            if let Some(s) = seed {
                source.seed = s;
                target.seed = s.wrapping_add(1);
            }
            let ds = commands::synth(&source, &target, (count, count), &out)?;
            println!(
                "wrote {} source and {} target images to {} (probe threshold {:.4})",
                count,
                count,
                out.display(),
                ds.probe.threshold
            );
        }
        Command::Pipeline {
            grid,
            budget,
            oracle_annotate,
        } => {
            let Some(cfg) = cfg.as_mut() else {
                bail!("pipeline needs --config");
            };
            if let Some(w) = cli.workers {
                cfg.workers = w;
            }
            let spec = patch_spec(&grid, Some(cfg))?;
            cfg.grid.patch_width = spec.patch_width;
            cfg.grid.patch_height = spec.patch_height;
            cfg.grid.edge_policy = spec.edge_policy;
            apply_budget(&budget, cfg)?;
            if oracle_annotate {
                cfg.oracle_annotate = true;
            }
            let outcome = commands::pipeline(cfg)?;
            println!(
                "selected {} patches; outputs in {}",
                outcome.manifest.entries.len(),
                cfg.paths.output.display()
            );
            if let (Some(p), Some(e)) = (&outcome.prediction_report, &outcome.enhanced_report) {
                println!("prediction vs ground truth:\n{}", p.to_table());
                println!("enhanced labels vs ground truth:\n{}", e.to_table());
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
