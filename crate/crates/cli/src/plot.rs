//! Loss-curve PNGs from a metrics log.

use std::path::Path;

use anyhow::{Context, Result};
use holovox::trainer::LossReport;
use image::{Rgb, RgbImage};

use crate::Usage;

const WIDTH: u32 = 800;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 30;

pub fn read_metrics(path: &Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Usage(format!("{}:{}: {e}", path.display(), i + 1)).into()))
        .collect()
}

fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws log10 photometric loss (grey) and its moving average (blue), with
/// the bootstrap loss average in orange when present.
pub fn plot(metrics: &Path, out: &Path, window: usize) -> Result<()> {
    let reports = read_metrics(metrics)?;
    if reports.is_empty() {
        return Err(Usage(format!("{} holds no steps", metrics.display())).into());
    }
    let photo: Vec<f64> = reports.iter().map(|r| r.photometric.max(1e-12).log10()).collect();
    let boot: Vec<f64> = reports.iter().filter_map(|r| r.bootstrap).map(|b| b.max(1e-12).log10()).collect();
    let lo = photo.iter().chain(&boot).copied().fold(f64::INFINITY, f64::min);
    let hi = photo.iter().chain(&boot).copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (pw, ph) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let to_px = |i: usize, n: usize, v: f64| {
        let x = MARGIN as f64 + pw * i as f64 / (n.max(2) - 1) as f64;
        let y = MARGIN as f64 + ph * (hi - v) / span;
        (x.round() as i64, y.round() as i64)
    };
    let axis = Rgb([0, 0, 0]);
    let (m, w, h) = (MARGIN as i64, WIDTH as i64, HEIGHT as i64);
    line(&mut img, (m, h - m), (w - m, h - m), axis);
    line(&mut img, (m, m), (m, h - m), axis);
    let mut draw = |ys: &[f64], color| {
        for i in 1..ys.len() {
            line(&mut img, to_px(i - 1, ys.len(), ys[i - 1]), to_px(i, ys.len(), ys[i]), color);
        }
    };
    draw(&photo, Rgb([200, 200, 200]));
    draw(&moving_average(&photo, window), Rgb([30, 80, 200]));
    if !boot.is_empty() {
        draw(&moving_average(&boot, window), Rgb([230, 120, 20]));
    }
    img.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} steps, log10 loss range [{lo:.3}, {hi:.3}]; wrote {}",
        reports.len(),
        out.display()
    );
    Ok(())
}
