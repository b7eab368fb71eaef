use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use holovox::dataio::dataset::write_png;
use holovox::dataio::{load_dataset, Checkpoint};
use holovox::eval::{reconstruct, split_frames, spread};
use holovox::renderer::render;
use holovox::trainer::{train_step_on, LossReport, PosedVideo, TrainState};
use holovox::unprojector::PosedImage;
use holovox::{Model, Rng};
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::Usage;

/// Offset between the parameter-init seed and the training-stream seed.
const TRAIN_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Exclusive hold on a run directory, released on drop.
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("train.lock");
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Usage(format!(
                    "{} exists: another run is training in this directory (delete the file if it is stale)",
                    path.display()
                )),
                _ => Usage(format!("cannot create {}: {e}", path.display())),
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct Split {
    pub train: Vec<PosedVideo>,
    pub full: Vec<PosedVideo>,
}

pub fn load_split(dataset: &Path, holdout_every: usize) -> Result<Split> {
    let full = load_dataset(dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
    let train = full
        .iter()
        .map(|v| v.subset(&split_frames(v.frames.len(), holdout_every).0))
        .collect();
    Ok(Split { train, full })
}

fn checkpoint(model: &Model, cfg: &RunConfig, state: &TrainState) -> Checkpoint {
    Checkpoint {
        model: model.config,
        train: cfg.train,
        state: state.clone(),
        run: cfg.to_text(),
    }
}

/// Renders the first held-out frame of `video` next to its ground truth.
fn held_out_render(model: &Model, state: &TrainState, video: &PosedVideo, cfg: &RunConfig, path: &Path) -> Result<()> {
    let (train, held) = split_frames(video.frames.len(), cfg.holdout_every);
    let Some(&target) = held.first() else {
        return Ok(());
    };
    let sources: Vec<&PosedImage<f32>> = spread(&train, cfg.train.n_source).iter().map(|&i| &video.frames[i]).collect();
    let grid = reconstruct(model, &state.store, &sources, 0)?;
    let frame = &video.frames[target];
    let out = render(&grid, &frame.camera, &state.store, &model.render, &model.config.render)?;
    let [_, h, w] = [frame.image.shape()[0], frame.image.shape()[1], frame.image.shape()[2]];
    let mut side = vec![0.0; 3 * h * 2 * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let src = c * h * w + y * w + x;
                let dst = c * h * 2 * w + y * 2 * w;
                side[dst + x] = frame.image.data()[src] as f64;
                side[dst + w + x] = out.rgb.data()[src] as f64;
            }
        }
    }
    write_png(path, &side, 2 * w as u32, h as u32)?;
    Ok(())
}

/// Lines of an existing metrics log for steps before `step`.
fn kept_log_lines(path: &Path, step: u64) -> Result<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(String::new());
    };
    let mut kept = String::new();
    for line in text.lines() {
        let report: LossReport = serde_json::from_str(line).with_context(|| format!("reading {}", path.display()))?;
        if report.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

pub fn run(config: &Path, resume: Option<&Path>) -> Result<()> {
    let (cfg, notices) = RunConfig::load(config)?;
    for n in &notices {
        eprintln!("notice: {n}");
    }
    if !cfg.dataset.is_dir() {
        return Err(Usage(format!("dataset {} does not exist", cfg.dataset.display())).into());
    }
    let split = load_split(&cfg.dataset, cfg.holdout_every)?;
    let need = cfg.train.n_source + cfg.train.n_target;
    if let Some(v) = split.train.iter().find(|v| v.frames.len() < need) {
        return Err(Usage(format!(
            "scene {} has {} training frames after holding out every {}th, a step needs {need}",
            v.id,
            v.frames.len(),
            cfg.holdout_every
        ))
        .into());
    }
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let _lock = RunLock::acquire(&cfg.out)?;
    let ckpt_dir = cfg.out.join("checkpoints");
    let render_dir = cfg.out.join("renders");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    fs::create_dir_all(&render_dir).with_context(|| format!("creating {}", render_dir.display()))?;

    let (model, mut state) = match resume {
        Some(path) => {
            let (model, ck) = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ck.model != cfg.model {
                return Err(Usage(format!("checkpoint {} was trained with a different model config", path.display())).into());
            }
            println!("resuming from {} at step {}", path.display(), ck.state.step);
            (model, ck.state)
        }
        None => {
            let (model, store) = Model::init::<f32>(cfg.model, cfg.seed)?;
            let state = TrainState::new(store, &cfg.train, Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM));
            (model, state)
        }
    };
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    let log_path = cfg.out.join("metrics.jsonl");
    let kept = if resume.is_some() { kept_log_lines(&log_path, state.step)? } else { String::new() };
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("opening {}", log_path.display()))?);
    log.write_all(kept.as_bytes())?;

    println!(
        "training {} scenes, {} parameters, steps {}..{}",
        split.train.len(),
        state.store.num_scalars(),
        state.step,
        cfg.train.max_steps
    );
    let start = Instant::now();
    let first = state.step;
    let mut window = 0.0;
    let mut count = 0u64;
    while state.step < cfg.train.max_steps {
        let report = train_step_on(&model, &mut state, &split.train, &cfg.train)?;
        writeln!(log, "{}", serde_json::to_string(&report)?)?;
        window += report.photometric;
        count += 1;
        let step = state.step;
        if cfg.print_every > 0 && step % cfg.print_every == 0 {
            log.flush()?;
            println!(
                "step {step:>6}  photo {:.5}  lr {:.2e}  {:.2}s/step",
                window / count as f64,
                report.lr,
                start.elapsed().as_secs_f64() / (step - first) as f64
            );
            window = 0.0;
            count = 0;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            checkpoint(&model, &cfg, &state).save(&ckpt_dir.join(format!("step_{step:06}.ckpt")))?;
        }
        if cfg.render_every > 0 && step % cfg.render_every == 0 {
            held_out_render(&model, &state, &split.full[0], &cfg, &render_dir.join(format!("step_{step:06}.png")))?;
        }
    }
    log.flush()?;
    let last = ckpt_dir.join("last.ckpt");
    checkpoint(&model, &cfg, &state).save(&last)?;
    println!("wrote {}", last.display());
    Ok(())
}
