use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sweepvox::config::PipelineConfig;
use sweepvox::formats;
use sweepvox::pipeline::{self, OutputLayout};
use sweepvox::splat::rasterize;

#[derive(Parser)]
#[command(name = "sweepvox", version, about = "Plane-sweep depth, voxel aggregation and splat refinement")]
struct Cli {
    /// key=value pipeline configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (file for `render`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for one per core
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Scene seed for `scene-gen`
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory with ground truth
    SceneGen {
        #[arg(long, default_value_t = 2)]
        boxes: usize,
        #[arg(long, default_value_t = 10)]
        views: usize,
    },
    /// Estimate depth, build the voxel volume and extract boxes
    Run { scene: PathBuf },
    /// Same as `run` with splat refinement switched on
    Refine { scene: PathBuf },
    /// Render a splat file into one camera of a cameras file
    Render {
        splats: PathBuf,
        cameras: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
    },
    /// Score the depth maps and boxes of a run directory
    Eval { scene: PathBuf, run: PathBuf },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    out.context("--out is required for this command")
}

fn summarize(m: &formats::Metrics) {
    let mut s = String::new();
    for d in &m.depth {
        let _ = writeln!(s, "view {:3}  rmse {:.4}  abs_rel {:.4}", d.view, d.rmse, d.abs_rel);
    }
    if let Some(r) = m.mean_rmse() {
        let _ = writeln!(s, "mean rmse {r:.4}");
    }
    for b in &m.boxes {
        let _ = writeln!(s, "gt box {}  best iou {:.3}", b.gt, b.best_iou);
    }
    let _ = writeln!(s, "detections {}", m.detections);
    // a closed pipe is not an error worth reporting
    let _ = std::io::stdout().write_all(s.as_bytes());
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("thread pool")?;
    let cfg = load_config(cli.config.as_deref())?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::SceneGen { boxes, views } => {
            let out = require_out(out)?;
            let (spec, data) = pipeline::synthesize(cli.seed, *boxes, *views)?;
            pipeline::write_scene_dir(out, &spec, &data)?;
            println!("wrote {} views to {}", data.views.len(), out.display());
        }
        Command::Run { scene } | Command::Refine { scene } => {
            let out = require_out(out)?;
            let mut cfg = cfg;
            if matches!(cli.command, Command::Refine { .. }) {
                cfg.refine = true;
            }
            let a = pipeline::run_pipeline_dir(scene, out, &cfg)?;
            if let Some(r) = &a.refinement {
                let first = r.loss_trace.first().copied().unwrap_or(0.0);
                let last = r.loss_trace.last().copied().unwrap_or(0.0);
                println!("refinement loss {first:.6} -> {last:.6} ({} accepted steps)", r.accepted);
            }
            summarize(&a.metrics);
        }
        Command::Render { splats, cameras, view } => {
            let out = require_out(out)?;
            let set = formats::read_splats(splats)?;
            let views = formats::read_cameras(cameras)?;
            let Some(target) = views.get(*view) else {
                bail!("view {view} out of range, {} cameras", views.len());
            };
            let r = rasterize(&set, target);
            formats::write_ppm(out, &r.color)?;
            println!("rendered {}x{} to {}", r.color.cols(), r.color.rows(), out.display());
        }
        Command::Eval { scene, run } => {
            let m = pipeline::eval_dir(scene, run, &cfg)?;
            if let Some(out) = out {
                std::fs::create_dir_all(out).with_context(|| out.display().to_string())?;
                formats::write_metrics(&OutputLayout(out.to_path_buf()).metrics(), &m)?;
            }
            summarize(&m);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
