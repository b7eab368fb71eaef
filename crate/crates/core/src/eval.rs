//! Held-out view reconstruction quality.

use holovox_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::renderer::render;
use crate::trainer::PosedVideo;
use crate::unprojector::PosedImage;

pub fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse.max(1e-12)).log10()
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    s / a.len().max(1) as f64
}

/// Frame positions split into (training, held out); every `every`-th frame
/// is held out. `every = 0` holds out nothing.
pub fn split_frames(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| every == 0 || i % every != every - 1)
}

/// `k` positions spread evenly over `pool`.
pub fn spread(pool: &[usize], k: usize) -> Vec<usize> {
    let k = k.min(pool.len());
    (0..k).map(|i| pool[i * pool.len() / k]).collect()
}

/// Denoised reconstruction of the auxiliary grid built from `sources`.
pub fn reconstruct(model: &Model, store: &ParamStore<f32>, sources: &[&PosedImage<f32>], t: usize) -> Result<Tensor<f32>> {
    let vbar = model.unprojector.build(store, sources)?;
    let zeros = Tensor::zeros(vbar.shape().to_vec());
    let vt = model.schedule.diffuse(&vbar, t, &zeros)?;
    model.denoiser.predict(store, &vt, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene: String,
    pub psnr: f64,
    pub baseline_psnr: f64,
    pub held_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
    pub mean_psnr: f64,
    pub mean_baseline_psnr: f64,
}

/// Per-channel mean of the source images, painted as a constant image.
pub fn mean_color_image(sources: &[&PosedImage<f32>]) -> Vec<f32> {
    let n = sources[0].image.len() / 3;
    let mut mean = [0f64; 3];
    for s in sources {
        for c in 0..3 {
            mean[c] += s.image.data()[c * n..(c + 1) * n].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    let denom = (sources.len() * n) as f64;
    (0..3 * n).map(|i| (mean[i / n] / denom) as f32).collect()
}

pub fn evaluate_video(
    model: &Model,
    store: &ParamStore<f32>,
    video: &PosedVideo,
    n_source: usize,
    holdout_every: usize,
    t: usize,
) -> Result<SceneEval> {
    let (train, held) = split_frames(video.frames.len(), holdout_every);
    if held.is_empty() || train.is_empty() {
        return Err(Error::Input(format!(
            "scene {} has no held-out or no source frames (holdout every {holdout_every})",
            video.id
        )));
    }
    let sources: Vec<&PosedImage<f32>> = spread(&train, n_source).iter().map(|&i| &video.frames[i]).collect();
    let grid = reconstruct(model, store, &sources, t)?;
    let baseline = mean_color_image(&sources);
    let (mut err, mut base_err) = (0.0, 0.0);
    for &i in &held {
        let f = &video.frames[i];
        let out = render(&grid, &f.camera, store, &model.render, &model.config.render)?;
        err += mse(out.rgb.data(), f.image.data());
        base_err += mse(&baseline, f.image.data());
    }
    let k = held.len() as f64;
    Ok(SceneEval {
        scene: video.id.clone(),
        psnr: psnr(err / k),
        baseline_psnr: psnr(base_err / k),
        held_out: held.len(),
    })
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    videos: &[PosedVideo],
    n_source: usize,
    holdout_every: usize,
    t: usize,
) -> Result<EvalReport> {
    let scenes = videos
        .iter()
        .map(|v| evaluate_video(model, store, v, n_source, holdout_every, t))
        .collect::<Result<Vec<_>>>()?;
    let n = scenes.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr: scenes.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_baseline_psnr: scenes.iter().map(|s| s.baseline_psnr).sum::<f64>() / n,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits() {
        let (a, b) = split_frames(10, 5);
        assert_eq!(b, vec![4, 9]);
        assert_eq!(a.len(), 8);
        assert_eq!(spread(&[0, 1, 2, 3, 5, 6, 7, 8], 4), vec![0, 2, 5, 7]);
        assert!((psnr(0.01) - 20.0).abs() < 1e-12);
    }
}
