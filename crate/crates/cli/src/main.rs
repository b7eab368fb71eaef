mod config;
mod plot;
mod train;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use holovox::dataio::dataset::{scene_cameras, write_png};
use holovox::dataio::{generate_dataset, load_grid, save_grid, Checkpoint};
use holovox::eval::evaluate;
use holovox::gradcheck::{full_suite, primitive_reports, SuiteConfig};
use holovox::renderer::render;
use holovox::trainer::sample_generation;
use holovox::{Model, Rng};
use holovox_tensor::Tensor;
use rand::SeedableRng;

use crate::config::RunConfig;

/// A problem with the invocation or its inputs (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

#[derive(Parser)]
#[command(name = "holovox", version, about = "Diffusion over 3D feature voxel grids learned from posed images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic posed-video dataset.
    GenData {
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw grids from pure noise with a trained model.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Side length of the preview render.
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
    /// Render a grid from a ring of cameras.
    Turntable {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 16)]
        views: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
    /// Held-out view PSNR against the mean-color baseline.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Include the composed model paths, not just the primitives.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = SuiteConfig::default().seed)]
        seed: u64,
    },
    /// Loss-curve PNG from a metrics log.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
}

fn load_checkpoint(path: &Path) -> Result<(Model, Checkpoint)> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn gen_data(scenes: usize, frames: usize, size: u32, seed: u64, out: &Path) -> Result<()> {
    let summaries = generate_dataset(out, scenes, frames, size, seed)?;
    for s in &summaries {
        println!(
            "scene {}: {} frames, {} ellipsoids, {:.1}% pixels covered",
            s.id,
            s.frames,
            s.ellipsoids,
            100.0 * s.coverage
        );
    }
    println!("wrote {} scenes to {}", summaries.len(), out.display());
    Ok(())
}

fn sample(ckpt: &Path, n: usize, seed: u64, out: &Path, size: u32) -> Result<()> {
    let (model, ck) = load_checkpoint(ckpt)?;
    create_dir(out)?;
    let mut rng = Rng::seed_from_u64(seed);
    let grids = sample_generation(&model, &ck.state.store, n, &mut rng)?;
    let cam = scene_cameras(1, size, 0.0)?.remove(0);
    for (i, g) in grids.iter().enumerate() {
        let path = out.join(format!("grid_{i:03}.grid"));
        save_grid(&path, g)?;
        let img = render(g, &cam, &ck.state.store, &model.render, &model.config.render)?;
        write_png(&out.join(format!("grid_{i:03}.png")), &to_f64(&img.rgb), size, size)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn turntable(ckpt: &Path, grid: &Path, views: usize, out: &Path, size: u32) -> Result<()> {
    let (model, ck) = load_checkpoint(ckpt)?;
    let g = load_grid(grid).with_context(|| format!("loading grid {}", grid.display()))?;
    if g.shape() != model.config.grid_shape() {
        return Err(Usage(format!(
            "grid {} has shape {:?}, the checkpoint expects {:?}",
            grid.display(),
            g.shape(),
            model.config.grid_shape()
        ))
        .into());
    }
    create_dir(out)?;
    for (i, cam) in scene_cameras(views, size, 0.0)?.iter().enumerate() {
        let img = render(&g, cam, &ck.state.store, &model.render, &model.config.render)?;
        write_png(&out.join(format!("frame_{i:03}.png")), &to_f64(&img.rgb), size, size)?;
    }
    println!("wrote {views} frames to {}", out.display());
    Ok(())
}

fn eval(ckpt: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let (model, ck) = load_checkpoint(ckpt)?;
    let (run, _) = RunConfig::parse(&ck.run, Path::new(".")).context("reading the run config stored in the checkpoint")?;
    let videos = holovox::dataio::load_dataset(dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
    let report = evaluate(&model, &ck.state.store, &videos, ck.train.n_source, run.holdout_every, 0)?;
    for s in &report.scenes {
        println!(
            "scene {}: {} held-out views, PSNR {:.2} dB (baseline {:.2} dB)",
            s.scene, s.held_out, s.psnr, s.baseline_psnr
        );
    }
    println!(
        "mean PSNR {:.2} dB, mean-color baseline {:.2} dB",
        report.mean_psnr, report.mean_baseline_psnr
    );
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn gradcheck(full: bool, seed: u64) -> Result<bool> {
    let cfg = SuiteConfig {
        seed,
        ..SuiteConfig::default()
    };
    let reports = if full { full_suite(&cfg)? } else { primitive_reports(&cfg)? };
    let mut ok = true;
    for r in &reports {
        ok &= r.passed();
        println!(
            "{} {:<32} f{}  points {:>3}  skipped {:>3}  max rel {:.2e}  (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.bits,
            r.coords.len(),
            r.skipped,
            r.max_rel_error(),
            r.tolerance
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} cases, {failed} failed", reports.len());
    Ok(ok)
}

fn set_threads() -> Result<()> {
    let Ok(v) = std::env::var("HOLOVOX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Usage(format!("HOLOVOX_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    set_threads()?;
    match cli.command {
        Command::GenData {
            scenes,
            frames,
            size,
            seed,
            out,
        } => gen_data(scenes, frames, size, seed, &out)?,
        Command::Train { config, resume } => train::run(&config, resume.as_deref())?,
        Command::Sample { ckpt, n, seed, out, size } => sample(&ckpt, n, seed, &out, size)?,
        Command::Turntable {
            ckpt,
            grid,
            views,
            out,
            size,
        } => turntable(&ckpt, &grid, views, &out, size)?,
        Command::Eval { ckpt, dataset, out } => eval(&ckpt, &dataset, &out)?,
        Command::Gradcheck { full, seed } => return gradcheck(full, seed),
        Command::Plot { metrics, out, window } => plot::plot(&metrics, &out, window.max(1))?,
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use holovox::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_)
                | E::Input(_)
                | E::Io { .. }
                | E::Image { .. }
                | E::Cameras { .. }
                | E::Version { .. }
                | E::Malformed(_)
                | E::ShapeMismatch { .. }
                | E::TooFewFrames { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
