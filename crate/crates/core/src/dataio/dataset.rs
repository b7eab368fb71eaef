//! On-disk posed-video datasets.
//!
//! ```text
//! scenes/<id>/cameras.json
//! scenes/<id>/scene.json          ground-truth ellipsoids
//! scenes/<id>/frames/frame_0000.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use holovox_tensor::Tensor;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use crate::error::{io_err, Error, Result};
use crate::geometry::{framing_intrinsics, ring_cameras, Camera, Intrinsics};
use crate::trainer::PosedVideo;
use crate::unprojector::PosedImage;
use crate::Rng;

pub const RING_RADIUS: f64 = 3.0;
pub const RING_ELEVATION: f64 = 0.35;
/// Half-width of the world region the default cameras frame at the origin.
pub const FRAMED_HALF_EXTENT: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub file: String,
    pub extrinsic: [f64; 16],
    pub intrinsics: [f64; 4],
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    pub scene: String,
    pub frames: Vec<FrameRecord>,
}

impl FrameRecord {
    pub fn from_camera(file: String, cam: &Camera) -> Self {
        let k = cam.intrinsics();
        Self {
            file,
            extrinsic: cam.extrinsic_row_major(),
            intrinsics: [k.fx, k.fy, k.cx, k.cy],
            width: cam.width(),
            height: cam.height(),
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let [fx, fy, cx, cy] = self.intrinsics;
        Ok(Camera::from_row_major(
            &self.extrinsic,
            Intrinsics { fx, fy, cx, cy },
            self.width,
            self.height,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSummary {
    pub id: String,
    pub frames: usize,
    pub ellipsoids: usize,
    /// Fraction of pixels with any coverage.
    pub coverage: f64,
}

pub fn scene_id(i: usize) -> String {
    format!("{i:04}")
}

/// The default fly-around ring for one scene.
pub fn scene_cameras(n_frames: usize, size: u32, phase: f64) -> Result<Vec<Camera>> {
    let k = framing_intrinsics(size, size, RING_RADIUS, FRAMED_HALF_EXTENT);
    Ok(ring_cameras(n_frames, RING_RADIUS, RING_ELEVATION, phase, k, size, size)?)
}

pub fn write_png(path: &Path, rgb: &[f64], width: u32, height: u32) -> Result<()> {
    let (w, h) = (width as usize, height as usize);
    let mut buf = vec![0u8; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            buf[3 * i + c] = (rgb[c * w * h + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    image::save_buffer_with_format(path, &buf, width, height, image::ColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// `[3, H, W]` in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<(Tensor<f32>, u32, u32)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let n = (w * h) as usize;
    let mut data = vec![0f32; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    Ok((Tensor::new([3, h as usize, w as usize], data)?, w, h))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes `n_scenes` synthetic videos under `out/scenes`.
pub fn generate_dataset(out: &Path, n_scenes: usize, n_frames: usize, size: u32, seed: u64) -> Result<Vec<SceneSummary>> {
    if n_frames < 2 {
        return Err(Error::Input(format!("need at least 2 frames per scene, got {n_frames}")));
    }
    if size == 0 {
        return Err(Error::Input("image size must be positive".into()));
    }
    let mut master = Rng::seed_from_u64(seed);
    let mut summaries = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let scene_seed: u64 = master.random();
        let mut rng = Rng::seed_from_u64(scene_seed);
        let scene = SyntheticScene::random(scene_seed, &mut rng);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let cams = scene_cameras(n_frames, size, phase)?;
        let id = scene_id(i);
        let dir = out.join("scenes").join(&id);
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
        let mut records = Vec::with_capacity(n_frames);
        let mut covered = 0usize;
        for (j, cam) in cams.iter().enumerate() {
            let file = format!("frames/frame_{j:04}.png");
            let img = scene.render(cam);
            let n = (size * size) as usize;
            covered += (0..n).filter(|&p| (0..3).any(|c| img[c * n + p] > 0.5 / 255.0)).count();
            write_png(&dir.join(&file), &img, size, size)?;
            records.push(FrameRecord::from_camera(file, cam));
        }
        write_json(
            &dir.join("cameras.json"),
            &CamerasFile {
                scene: id.clone(),
                frames: records,
            },
        )?;
        write_json(&dir.join("scene.json"), &scene)?;
        summaries.push(SceneSummary {
            id,
            frames: n_frames,
            ellipsoids: scene.ellipsoids.len(),
            coverage: covered as f64 / (n_frames as f64 * (size * size) as f64),
        });
    }
    Ok(summaries)
}

pub fn load_video(dir: &Path, id: &str) -> Result<PosedVideo> {
    let cam_path = dir.join("cameras.json");
    let bad = |msg: String| Error::Cameras {
        scene: id.to_string(),
        msg,
    };
    let text = fs::read_to_string(&cam_path).map_err(|e| bad(e.to_string()))?;
    let file: CamerasFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if file.frames.len() < 2 {
        return Err(bad(format!("{} frames, need at least 2", file.frames.len())));
    }
    let mut frames = Vec::with_capacity(file.frames.len());
    for (index, rec) in file.frames.iter().enumerate() {
        let camera = rec.camera().map_err(|e| bad(format!("frame {index}: {e}")))?;
        let (image, w, h) = read_png(&dir.join(&rec.file))?;
        if (w, h) != (rec.width, rec.height) {
            return Err(bad(format!(
                "frame {index}: image is {w}x{h}, cameras.json says {}x{}",
                rec.width, rec.height
            )));
        }
        if (w, h) != (file.frames[0].width, file.frames[0].height) {
            return Err(bad("frames have mixed resolutions".into()));
        }
        frames.push(PosedImage {
            index,
            image,
            camera,
        });
    }
    Ok(PosedVideo {
        id: id.to_string(),
        frames,
    })
}

/// Every scene under `root/scenes`, in id order.
pub fn load_dataset(root: &Path) -> Result<Vec<PosedVideo>> {
    let scenes = root.join("scenes");
    let entries = fs::read_dir(&scenes).map_err(io_err(&scenes))?;
    let mut dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(io_err(&scenes))?;
        if entry.path().is_dir() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("{} contains no scenes", scenes.display())));
    }
    dirs.iter().map(|(id, dir)| load_video(dir, id)).collect()
}

pub fn load_scene(root: &Path, id: &str) -> Result<SyntheticScene> {
    let path = root.join("scenes").join(id).join("scene.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}
