//! Static plot emission: score-vs-frame curves with ground-truth shading
//! and frame overlays with localization boxes, written as PNG files.

use std::path::Path;

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::data::Frame;
use crate::infer::{LocalizedRegion, ScoreSeries};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("empty score series for video {0}")]
    EmptySeries(String),
    #[error("image write failed at {path}: {source}")]
    Write {
        path: String,
        source: image::ImageError,
    },
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const SHADE: Rgb<u8> = Rgb([255, 220, 220]);
const RAW_COLOR: Rgb<u8> = Rgb([160, 160, 160]);
const SMOOTH_COLOR: Rgb<u8> = Rgb([30, 60, 200]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const BOX_COLOR: Rgb<u8> = Rgb([220, 40, 40]);
const HULL_COLOR: Rgb<u8> = Rgb([40, 180, 60]);

fn save(img: &RgbImage, path: &Path) -> Result<(), PlotError> {
    if let Some(parent) = path.parent() {
        let _ = std::fs::create_dir_all(parent);
    }
    img.save(path).map_err(|source| PlotError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    // Bresenham
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Score-vs-frame curve: raw scores in gray, smoothed scores in blue,
/// ground-truth anomalous frames shaded in red when labels are given.
pub fn plot_score_curve(
    series: &ScoreSeries,
    labels: Option<&[u8]>,
    path: &Path,
) -> Result<(), PlotError> {
    let n = series.smoothed.len();
    if n == 0 {
        return Err(PlotError::EmptySeries(series.video_id.clone()));
    }
    let margin = 10u32;
    let plot_w = (n as u32 * 4).clamp(320, 1920);
    let plot_h = 240u32;
    let (width, height) = (plot_w + 2 * margin, plot_h + 2 * margin);
    let mut img = RgbImage::from_pixel(width, height, WHITE);

    let x_of = |t: usize| margin as i64 + (t as f64 / (n.max(2) - 1) as f64 * (plot_w - 1) as f64) as i64;
    if let Some(labels) = labels {
        for (t, &l) in labels.iter().take(n).enumerate() {
            if l == 0 {
                continue;
            }
            let x0 = x_of(t);
            let x1 = if t + 1 < n { x_of(t + 1) } else { x0 + 1 };
            for x in x0..=x1 {
                for y in margin..margin + plot_h {
                    if x >= 0 && (x as u32) < width {
                        img.put_pixel(x as u32, y, SHADE);
                    }
                }
            }
        }
    }

    let all: Vec<f64> = series
        .raw
        .iter()
        .chain(series.smoothed.iter())
        .cloned()
        .collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let y_of = |v: f64| {
        let frac = (v - lo) / span;
        (margin + plot_h - 1) as i64 - (frac * (plot_h - 1) as f64) as i64
    };
    for (data, color) in [(&series.raw, RAW_COLOR), (&series.smoothed, SMOOTH_COLOR)] {
        for t in 1..n {
            draw_line(
                &mut img,
                (x_of(t - 1), y_of(data[t - 1])),
                (x_of(t), y_of(data[t])),
                color,
            );
        }
    }
    // axes
    let bottom = (margin + plot_h - 1) as i64;
    draw_line(&mut img, (margin as i64, bottom), ((margin + plot_w) as i64, bottom), AXIS);
    draw_line(&mut img, (margin as i64, margin as i64), (margin as i64, bottom), AXIS);
    save(&img, path)
}

fn to_rgb(frame: &Frame) -> RgbImage {
    let (h, w, c) = frame.pixels.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = if c >= 3 {
                [
                    (frame.pixels[(i, j, 0)].clamp(0.0, 1.0) * 255.0) as u8,
                    (frame.pixels[(i, j, 1)].clamp(0.0, 1.0) * 255.0) as u8,
                    (frame.pixels[(i, j, 2)].clamp(0.0, 1.0) * 255.0) as u8,
                ]
            } else {
                let v = (frame.pixels[(i, j, 0)].clamp(0.0, 1.0) * 255.0) as u8;
                [v, v, v]
            };
            img.put_pixel(j as u32, i as u32, Rgb(px));
        }
    }
    img
}

/// Frame overlay: the image with localization bounding boxes (red) and the
/// convex hulls of abnormal patch regions (green).
pub fn plot_overlay(
    frame: &Frame,
    regions: &[LocalizedRegion],
    path: &Path,
) -> Result<(), PlotError> {
    let mut img = to_rgb(frame);
    for region in regions {
        let (x0, y0, x1, y1) = region.bbox;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let (x1, y1) = (x1 as i64 - 1, y1 as i64 - 1);
        draw_line(&mut img, (x0, y0), (x1, y0), BOX_COLOR);
        draw_line(&mut img, (x1, y0), (x1, y1), BOX_COLOR);
        draw_line(&mut img, (x1, y1), (x0, y1), BOX_COLOR);
        draw_line(&mut img, (x0, y1), (x0, y0), BOX_COLOR);
        let hull = &region.hull;
        for i in 0..hull.len() {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            draw_line(
                &mut img,
                (a.0 as i64, a.1 as i64),
                (b.0 as i64, b.1 as i64),
                HULL_COLOR,
            );
        }
    }
    save(&img, path)
}
