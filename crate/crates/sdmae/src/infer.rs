//! Inference pipeline: per-pixel anomaly maps from teacher/student
//! reconstructions, spatio-temporal smoothing, per-frame max scores with
//! temporal Gaussian filtering, and patch-level localization.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ExperimentConfig, ScoreStrategy};
use crate::data::{Frame, VideoSequence};
use crate::model::{forward, sample_mask, unpatchify, MaskPlan, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("frame dims {a:?} and {b:?} do not match")]
    DimMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("strategy {0} needs a student prediction but none was given")]
    MissingStudent(&'static str),
    #[error("smoothing kernel {0:?} must have odd dimensions")]
    EvenKernel((usize, usize, usize)),
    #[error("no maps to smooth")]
    EmptyVolume,
    #[error("gaussian sigma {0} must be positive")]
    BadSigma(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-pixel anomaly scores for one frame.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub values: Array2<f64>,
    pub index: usize,
}

/// Frame-level scores for one video, before and after temporal smoothing.
#[derive(Debug, Clone)]
pub struct ScoreSeries {
    pub video_id: String,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

/// Axis-aligned box plus the convex hull of the abnormal patch corners.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedRegion {
    /// (x0, y0, x1, y1): columns then rows, inclusive-exclusive pixel bounds.
    pub bbox: (usize, usize, usize, usize),
    /// Hull vertices as (x, y) pixel coordinates, counter-clockwise.
    pub hull: Vec<(f64, f64)>,
}

fn sq_diff_sum(a: &Array3<f64>, b: &Array3<f64>, out: &mut Array2<f64>) {
    let (h, w, c) = a.dim();
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for l in 0..c {
                let d = a[(i, j, l)] - b[(i, j, l)];
                s += d * d;
            }
            out[(i, j)] += s;
        }
    }
}

/// Per-pixel anomaly map: channel-summed squared differences combined per
/// strategy, plus the squared predicted anomaly channel when present.
pub fn anomaly_map(
    x: &Frame,
    teacher: &Frame,
    student: Option<&Frame>,
    strategy: ScoreStrategy,
    predicted_map: Option<&Array2<f64>>,
) -> Result<ScoreMap, InferError> {
    let dims = x.pixels.dim();
    if teacher.pixels.dim() != dims {
        return Err(InferError::DimMismatch {
            a: dims,
            b: teacher.pixels.dim(),
        });
    }
    if let Some(s) = student {
        if s.pixels.dim() != dims {
            return Err(InferError::DimMismatch {
                a: dims,
                b: s.pixels.dim(),
            });
        }
    }
    let (h, w, _) = dims;
    let mut values = Array2::zeros((h, w));
    // reconstruction term ‖x − x̂‖² is part of every strategy
    sq_diff_sum(&x.pixels, &teacher.pixels, &mut values);
    let need_student = strategy.needs_student();
    if need_student && student.is_none() {
        return Err(InferError::MissingStudent(strategy.as_str()));
    }
    match strategy {
        ScoreStrategy::T => {}
        ScoreStrategy::TS => {
            sq_diff_sum(&x.pixels, &student.unwrap().pixels, &mut values);
        }
        ScoreStrategy::TTsd => {
            sq_diff_sum(&teacher.pixels, &student.unwrap().pixels, &mut values);
        }
        ScoreStrategy::TSTsd => {
            let s = student.unwrap();
            sq_diff_sum(&x.pixels, &s.pixels, &mut values);
            sq_diff_sum(&teacher.pixels, &s.pixels, &mut values);
        }
    }
    if let Some(pm) = predicted_map {
        if pm.dim() != (h, w) {
            return Err(InferError::DimMismatch {
                a: dims,
                b: (pm.dim().0, pm.dim().1, 1),
            });
        }
        for (dst, &v) in values.iter_mut().zip(pm.iter()) {
            *dst += v * v;
        }
    }
    Ok(ScoreMap {
        values,
        index: x.index,
    })
}

/// 3-D mean filter over the stacked (time, height, width) volume with
/// edge-replicated borders.
pub fn smooth_volume(
    maps: &[ScoreMap],
    kernel: (usize, usize, usize),
) -> Result<Vec<ScoreMap>, InferError> {
    if maps.is_empty() {
        return Err(InferError::EmptyVolume);
    }
    let (kt, kh, kw) = kernel;
    if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 || kt == 0 {
        return Err(InferError::EvenKernel(kernel));
    }
    let t_len = maps.len();
    let (h, w) = maps[0].values.dim();
    let (rt, rh, rw) = (kt as isize / 2, kh as isize / 2, kw as isize / 2);
    let norm = 1.0 / (kt * kh * kw) as f64;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len as isize {
        let mut values = Array2::zeros((h, w));
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for dt in -rt..=rt {
                    let mt = &maps[clamp(t + dt, t_len)].values;
                    for di in -rh..=rh {
                        let ii = clamp(i + di, h);
                        for dj in -rw..=rw {
                            acc += mt[(ii, clamp(j + dj, w))];
                        }
                    }
                }
                values[(i as usize, j as usize)] = acc * norm;
            }
        }
        out.push(ScoreMap {
            values,
            index: maps[t as usize].index,
        });
    }
    Ok(out)
}

/// Discrete Gaussian kernel truncated at 4 sigma and renormalized.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Per-frame maxima followed by a 1-D temporal Gaussian (std `sigma`,
/// truncated at 4 sigma, renormalized, edge-replicated).
pub fn frame_scores(
    maps: &[ScoreMap],
    sigma: f64,
    video_id: &str,
) -> Result<ScoreSeries, InferError> {
    if maps.is_empty() {
        return Err(InferError::EmptyVolume);
    }
    if sigma <= 0.0 {
        return Err(InferError::BadSigma(sigma));
    }
    let raw: Vec<f64> = maps
        .iter()
        .map(|m| m.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() as isize / 2;
    let n = raw.len() as isize;
    let smoothed = (0..n)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let src = (t + i as isize - radius).clamp(0, n - 1) as usize;
                    k * raw[src]
                })
                .sum()
        })
        .collect();
    Ok(ScoreSeries {
        video_id: video_id.to_string(),
        raw,
        smoothed,
    })
}

/// Deterministic inference mask for frame `t` of a video: the plan depends
/// only on (seed, video_id, t), so re-scoring is bit-identical.
pub fn inference_mask_plan(
    cfg: &ExperimentConfig,
    video_id: &str,
    t: usize,
) -> Result<MaskPlan, ModelError> {
    let mut hasher = Sha256::new();
    hasher.update(cfg.seed.to_le_bytes());
    hasher.update(video_id.as_bytes());
    hasher.update((t as u64).to_le_bytes());
    let digest = hasher.finalize();
    let frame_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
    sample_mask(cfg.token_count(), cfg.inference_mask_ratio, &mut rng)
}

fn split_channels(pixels: Array3<f64>, c: usize) -> (Array3<f64>, Option<Array2<f64>>) {
    let total = pixels.dim().2;
    if total == c {
        return (pixels, None);
    }
    let image = pixels.slice(ndarray::s![.., .., ..c]).to_owned();
    let extra = pixels.index_axis(Axis(2), total - 1).to_owned();
    (image, Some(extra))
}

/// Score every frame of a video: deterministic mask, one forward pass,
/// strategy-combined anomaly maps, 3-D smoothing, per-frame scores.
/// Returns the series and the smoothed per-frame maps.
pub fn score_video(
    params: &ModelParams,
    video: &VideoSequence,
    cfg: &ExperimentConfig,
) -> Result<(ScoreSeries, Vec<ScoreMap>), InferError> {
    let mut maps = Vec::with_capacity(video.frames.len());
    let needs_student = cfg.score_strategy.needs_student();
    for frame in &video.frames {
        let plan = inference_mask_plan(cfg, &video.video_id, frame.index)?;
        let (t_grid, s_grid) = forward(params, frame, &plan)?;
        let t_pixels = unpatchify(&t_grid)?;
        let (t_image, t_anomaly) = split_channels(t_pixels, cfg.channels);
        let teacher = Frame {
            pixels: t_image,
            index: frame.index,
        };
        let student = if needs_student {
            let s_pixels = unpatchify(&s_grid)?;
            let (s_image, _) = split_channels(s_pixels, cfg.channels);
            Some(Frame {
                pixels: s_image,
                index: frame.index,
            })
        } else {
            None
        };
        let map = anomaly_map(
            frame,
            &teacher,
            student.as_ref(),
            cfg.score_strategy,
            t_anomaly.as_ref(),
        )?;
        maps.push(map);
    }
    let smoothed_maps = smooth_volume(&maps, cfg.smooth_kernel)?;
    let series = frame_scores(&smoothed_maps, cfg.gaussian_sigma, &video.video_id)?;
    Ok((series, smoothed_maps))
}

/// Monotone-chain convex hull; points are (x, y), output counter-clockwise.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Patches with mean score above `threshold` are grouped by 8-connectivity
/// on the patch grid; each component yields the convex hull of its patch
/// corners and the hull's axis-aligned bounding box in pixels.
pub fn localize(map: &ScoreMap, d: usize, threshold: f64) -> Vec<LocalizedRegion> {
    let (h, w) = map.values.dim();
    let (gh, gw) = (h / d, w / d);
    let mut hot = vec![false; gh * gw];
    for pi in 0..gh {
        for pj in 0..gw {
            let mut sum = 0.0;
            for i in 0..d {
                for j in 0..d {
                    sum += map.values[(pi * d + i, pj * d + j)];
                }
            }
            hot[pi * gw + pj] = sum / (d * d) as f64 > threshold;
        }
    }
    // connected components, 8-connectivity
    let mut seen = vec![false; gh * gw];
    let mut regions = Vec::new();
    for start in 0..gh * gw {
        if !hot[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut component = Vec::new();
        seen[start] = true;
        while let Some(idx) = stack.pop() {
            component.push(idx);
            let (pi, pj) = (idx / gw, idx % gw);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ni, nj) = (pi as i64 + di, pj as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= gh as i64 || nj >= gw as i64 {
                        continue;
                    }
                    let nidx = ni as usize * gw + nj as usize;
                    if hot[nidx] && !seen[nidx] {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        let mut corners = Vec::with_capacity(component.len() * 4);
        for idx in component {
            let (pi, pj) = (idx / gw, idx % gw);
            let (y0, x0) = ((pi * d) as f64, (pj * d) as f64);
            let (y1, x1) = (((pi + 1) * d) as f64, ((pj + 1) * d) as f64);
            corners.push((x0, y0));
            corners.push((x1, y0));
            corners.push((x0, y1));
            corners.push((x1, y1));
        }
        let hull = convex_hull(corners);
        let xs: Vec<f64> = hull.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = hull.iter().map(|p| p.1).collect();
        let fmin = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min) as usize;
        let fmax = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) as usize;
        regions.push(LocalizedRegion {
            bbox: (fmin(&xs), fmin(&ys), fmax(&xs), fmax(&ys)),
            hull,
        });
    }
    regions
}

/// CSV lines `frame_index,raw_score,smoothed_score` for one video.
pub fn series_to_csv(series: &ScoreSeries) -> String {
    let mut out = String::from("frame_index,raw_score,smoothed_score\n");
    for (t, (r, s)) in series.raw.iter().zip(series.smoothed.iter()).enumerate() {
        out.push_str(&format!("{t},{r:.12},{s:.12}\n"));
    }
    out
}
