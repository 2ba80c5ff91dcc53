//! Video-frame datasets, the synthetic-anomaly event bank, and training
//! sample construction with overlay compositing.
//!
//! Dataset layout on disk:
//! ```text
//! root/train/<video_id>/<%06d>.png
//! root/test/<video_id>/<%06d>.png
//! root/test_labels/<video_id>.txt        one 0/1 per line
//! root/test_masks/<video_id>/<%06d>.png  optional binary masks
//! ```
//! Event bank layout: `bank/<event_id>/frames/<%06d>.png` plus
//! `bank/<event_id>/masks/<%06d>.png`.

pub mod toy;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use thiserror::Error;

use crate::config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing directory: {0}")]
    MissingDir(PathBuf),
    #[error("video {video_id}: empty frame directory")]
    EmptyVideo { video_id: String },
    #[error("video {video_id}: {labels} labels for {frames} frames")]
    LabelMismatch {
        video_id: String,
        labels: usize,
        frames: usize,
    },
    #[error("cannot decode image {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error("event {event_id}: {clips} clip frames but {masks} masks")]
    ClipMaskMismatch {
        event_id: String,
        clips: usize,
        masks: usize,
    },
    #[error("event {event_id}: mask frame {frame} is all zeros")]
    EmptyMask { event_id: String, frame: usize },
    #[error("event {event_id}: clip frame {frame} dims {clip:?} != mask dims {mask:?}")]
    ClipMaskDims {
        event_id: String,
        frame: usize,
        clip: (usize, usize),
        mask: (usize, usize),
    },
    #[error("overlay at ({row}, {col}) of size {eh}x{ew} exceeds frame {h}x{w}")]
    OutOfBounds {
        row: usize,
        col: usize,
        eh: usize,
        ew: usize,
        h: usize,
        w: usize,
    },
    #[error("cannot augment: event bank is empty")]
    EmptyBank,
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One video frame: h x w x c pixels in [0, 1] plus its index in the video.
#[derive(Debug, Clone)]
pub struct Frame {
    pub pixels: Array3<f64>,
    pub index: usize,
}

/// An ordered video with optional per-frame labels and pixel masks
/// (test splits only).
#[derive(Debug, Clone)]
pub struct VideoSequence {
    pub video_id: String,
    pub frames: Vec<Frame>,
    pub labels: Option<Vec<u8>>,
    pub pixel_masks: Option<Vec<Array2<f64>>>,
}

/// A cropped abnormal clip with aligned binary masks, superimposed onto
/// training frames as a synthetic anomaly. Clip pixels are stored as RGB
/// and converted to the dataset's channel count at compositing time.
#[derive(Debug, Clone)]
pub struct OverlayEvent {
    pub event_id: String,
    /// Per-frame eh x ew x 3 pixels in [0, 1].
    pub clip: Vec<Array3<f64>>,
    /// Per-frame eh x ew masks, {0, 1}-valued.
    pub masks: Vec<Array2<f64>>,
}

/// One training example: a possibly-composited input, the previous frame
/// (composited coherently), the always-clean target, and the binary
/// anomaly map of the overlay.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub input_frame: Frame,
    pub prev_frame: Frame,
    pub target_frame: Frame,
    pub anomaly_map: Array2<f64>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn decode_image(path: &Path) -> Result<image::DynamicImage, DataError> {
    image::open(path).map_err(|e| DataError::BadImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decode, resize to (h, w) and convert to `c` channels, scaled to [0, 1].
fn load_frame_file(
    path: &Path,
    h: usize,
    w: usize,
    c: usize,
    index: usize,
) -> Result<Frame, DataError> {
    let img = decode_image(path)?;
    let img = if img.height() as usize != h || img.width() as usize != w {
        img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let mut pixels = Array3::zeros((h, w, c));
    match c {
        1 => {
            let gray = img.to_luma8();
            for i in 0..h {
                for j in 0..w {
                    pixels[(i, j, 0)] = gray.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0;
                }
            }
        }
        _ => {
            let rgb = img.to_rgb8();
            for i in 0..h {
                for j in 0..w {
                    let px = rgb.get_pixel(j as u32, i as u32).0;
                    for l in 0..c.min(3) {
                        pixels[(i, j, l)] = px[l] as f64 / 255.0;
                    }
                }
            }
        }
    }
    Ok(Frame { pixels, index })
}

fn load_mask_file(path: &Path) -> Result<Array2<f64>, DataError> {
    let gray = decode_image(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        if gray.get_pixel(j as u32, i as u32).0[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

fn load_split(
    root: &Path,
    split: &str,
    cfg: &ExperimentConfig,
) -> Result<Vec<VideoSequence>, DataError> {
    let split_dir = root.join(split);
    if !split_dir.is_dir() {
        return Err(DataError::MissingDir(split_dir));
    }
    let is_test = split == "test";
    let mut videos = Vec::new();
    for video_dir in sorted_entries(&split_dir)? {
        if !video_dir.is_dir() {
            continue;
        }
        let video_id = video_dir
            .file_name()
            .unwrap()
            .to_string_lossy()
            .to_string();
        let frame_paths: Vec<PathBuf> = sorted_entries(&video_dir)?
            .into_iter()
            .filter(|p| p.extension().map_or(false, |e| e == "png"))
            .collect();
        if frame_paths.is_empty() {
            return Err(DataError::EmptyVideo { video_id });
        }
        let mut frames = Vec::with_capacity(frame_paths.len());
        for (t, path) in frame_paths.iter().enumerate() {
            frames.push(load_frame_file(
                path,
                cfg.frame_height,
                cfg.frame_width,
                cfg.channels,
                t,
            )?);
        }

        let labels_path = root.join(format!("{split}_labels")).join(format!("{video_id}.txt"));
        let labels = if labels_path.is_file() {
            if !is_test {
                eprintln!(
                    "warning: labels for training video {video_id} ignored (training is unlabeled)"
                );
                None
            } else {
                let text =
                    std::fs::read_to_string(&labels_path).map_err(|source| DataError::Io {
                        path: labels_path.clone(),
                        source,
                    })?;
                let labels: Vec<u8> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| if l.trim() == "0" { 0 } else { 1 })
                    .collect();
                if labels.len() != frames.len() {
                    return Err(DataError::LabelMismatch {
                        video_id,
                        labels: labels.len(),
                        frames: frames.len(),
                    });
                }
                Some(labels)
            }
        } else {
            None
        };

        let masks_dir = root.join(format!("{split}_masks")).join(&video_id);
        let pixel_masks = if is_test && masks_dir.is_dir() {
            let mut masks = Vec::new();
            for path in sorted_entries(&masks_dir)? {
                if path.extension().map_or(false, |e| e == "png") {
                    masks.push(load_mask_file(&path)?);
                }
            }
            Some(masks)
        } else {
            None
        };

        videos.push(VideoSequence {
            video_id,
            frames,
            labels,
            pixel_masks,
        });
    }
    Ok(videos)
}

/// Load the train and test splits of a dataset under `root`.
/// Returns `(train, test)` video sequences.
pub fn load_dataset(
    root: &Path,
    cfg: &ExperimentConfig,
) -> Result<(Vec<VideoSequence>, Vec<VideoSequence>), DataError> {
    let train = load_split(root, "train", cfg)?;
    let test = load_split(root, "test", cfg)?;
    Ok((train, test))
}

/// Load the event bank of cropped abnormal clips with pixel masks.
pub fn load_event_bank(root: &Path) -> Result<Vec<OverlayEvent>, DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingDir(root.to_path_buf()));
    }
    let mut events = Vec::new();
    for event_dir in sorted_entries(root)? {
        if !event_dir.is_dir() {
            continue;
        }
        let event_id = event_dir
            .file_name()
            .unwrap()
            .to_string_lossy()
            .to_string();
        let frames_dir = event_dir.join("frames");
        let masks_dir = event_dir.join("masks");
        if !frames_dir.is_dir() {
            return Err(DataError::MissingDir(frames_dir));
        }
        if !masks_dir.is_dir() {
            return Err(DataError::MissingDir(masks_dir));
        }
        let frame_paths = sorted_entries(&frames_dir)?;
        let mask_paths = sorted_entries(&masks_dir)?;
        if frame_paths.len() != mask_paths.len() {
            return Err(DataError::ClipMaskMismatch {
                event_id,
                clips: frame_paths.len(),
                masks: mask_paths.len(),
            });
        }
        let mut clip = Vec::new();
        let mut masks = Vec::new();
        for (t, (fp, mp)) in frame_paths.iter().zip(mask_paths.iter()).enumerate() {
            let img = decode_image(fp)?.to_rgb8();
            let (ew, eh) = img.dimensions();
            let mut px = Array3::zeros((eh as usize, ew as usize, 3));
            for i in 0..eh as usize {
                for j in 0..ew as usize {
                    let p = img.get_pixel(j as u32, i as u32).0;
                    for l in 0..3 {
                        px[(i, j, l)] = p[l] as f64 / 255.0;
                    }
                }
            }
            let mask = load_mask_file(mp)?;
            if mask.dim() != (eh as usize, ew as usize) {
                return Err(DataError::ClipMaskDims {
                    event_id,
                    frame: t,
                    clip: (eh as usize, ew as usize),
                    mask: mask.dim(),
                });
            }
            if mask.iter().all(|&v| v == 0.0) {
                return Err(DataError::EmptyMask { event_id, frame: t });
            }
            clip.push(px);
            masks.push(mask);
        }
        events.push(OverlayEvent {
            event_id,
            clip,
            masks,
        });
    }
    Ok(events)
}

/// Convert an RGB clip frame to `c` channels (luminance mean for c = 1).
fn convert_channels(rgb: &Array3<f64>, c: usize) -> Array3<f64> {
    let (h, w, _) = rgb.dim();
    match c {
        1 => Array3::from_shape_fn((h, w, 1), |(i, j, _)| {
            (rgb[(i, j, 0)] + rgb[(i, j, 1)] + rgb[(i, j, 2)]) / 3.0
        }),
        _ => Array3::from_shape_fn((h, w, c), |(i, j, l)| rgb[(i, j, l.min(2))]),
    }
}

/// Paste `event_frame` onto `frame` at `position` wherever `mask` is 1.
/// Returns the composited frame and the full-size anomaly map.
pub fn composite_event(
    frame: &Frame,
    event_frame: &Array3<f64>,
    mask: &Array2<f64>,
    position: (usize, usize),
) -> Result<(Frame, Array2<f64>), DataError> {
    let (h, w, c) = frame.pixels.dim();
    let (eh, ew, _) = event_frame.dim();
    let (row, col) = position;
    if row + eh > h || col + ew > w {
        return Err(DataError::OutOfBounds {
            row,
            col,
            eh,
            ew,
            h,
            w,
        });
    }
    let mut pixels = frame.pixels.clone();
    let mut anomaly_map = Array2::zeros((h, w));
    for i in 0..eh {
        for j in 0..ew {
            if mask[(i, j)] != 0.0 {
                for l in 0..c {
                    pixels[(row + i, col + j, l)] = event_frame[(i, j, l)];
                }
                anomaly_map[(row + i, col + j)] = 1.0;
            }
        }
    }
    Ok((
        Frame {
            pixels,
            index: frame.index,
        },
        anomaly_map,
    ))
}

/// Nearest-neighbour downscale used when an event is larger than the frame.
fn shrink_to_fit(
    clip: &Array3<f64>,
    mask: &Array2<f64>,
    max_h: usize,
    max_w: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (eh, ew, c) = clip.dim();
    if eh <= max_h && ew <= max_w {
        return (clip.clone(), mask.clone());
    }
    let scale = (max_h as f64 / eh as f64).min(max_w as f64 / ew as f64);
    let nh = ((eh as f64 * scale).floor() as usize).max(1);
    let nw = ((ew as f64 * scale).floor() as usize).max(1);
    let out = Array3::from_shape_fn((nh, nw, c), |(i, j, l)| {
        let si = (i as f64 / scale) as usize;
        let sj = (j as f64 / scale) as usize;
        clip[(si.min(eh - 1), sj.min(ew - 1), l)]
    });
    let omask = Array2::from_shape_fn((nh, nw), |(i, j)| {
        let si = (i as f64 / scale) as usize;
        let sj = (j as f64 / scale) as usize;
        mask[(si.min(eh - 1), sj.min(ew - 1))]
    });
    (out, omask)
}

/// Build one training sample. With probability `p`, a bank event is
/// composited onto the current frame (and onto the previous frame with the
/// preceding clip frame, keeping the overlay temporally coherent). The
/// target is always the clean current frame.
pub fn make_training_sample<R: Rng>(
    clean_prev: &Frame,
    clean_cur: &Frame,
    bank: &[OverlayEvent],
    p: f64,
    rng: &mut R,
) -> Result<TrainingSample, DataError> {
    let (h, w, c) = clean_cur.pixels.dim();
    let augment = p > 0.0 && rng.gen::<f64>() < p;
    if !augment {
        return Ok(TrainingSample {
            input_frame: clean_cur.clone(),
            prev_frame: clean_prev.clone(),
            target_frame: clean_cur.clone(),
            anomaly_map: Array2::zeros((h, w)),
        });
    }
    if bank.is_empty() {
        return Err(DataError::EmptyBank);
    }
    let event = &bank[rng.gen_range(0..bank.len())];
    let len = event.clip.len();
    // Offset >= 1 when possible, so the previous frame uses clip[offset-1].
    let offset = if len > 1 { rng.gen_range(1..len) } else { 0 };
    let prev_offset = offset.saturating_sub(1);

    let cur_clip = convert_channels(&event.clip[offset], c);
    let (cur_clip, cur_mask) = shrink_to_fit(&cur_clip, &event.masks[offset], h, w);
    let prev_clip = convert_channels(&event.clip[prev_offset], c);
    let (prev_clip, prev_mask) = shrink_to_fit(&prev_clip, &event.masks[prev_offset], h, w);

    let (eh, ew, _) = cur_clip.dim();
    let row = rng.gen_range(0..=h - eh);
    let col = rng.gen_range(0..=w - ew);

    let (input_frame, anomaly_map) = composite_event(clean_cur, &cur_clip, &cur_mask, (row, col))?;
    // Clamp in case the prev clip frame has different dims.
    let (peh, pew, _) = prev_clip.dim();
    let prow = row.min(h - peh);
    let pcol = col.min(w - pew);
    let (prev_frame, _) = composite_event(clean_prev, &prev_clip, &prev_mask, (prow, pcol))?;

    Ok(TrainingSample {
        input_frame,
        prev_frame,
        target_frame: clean_cur.clone(),
        anomaly_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gray_frame(h: usize, w: usize, fill: f64) -> Frame {
        Frame {
            pixels: Array3::from_elem((h, w, 1), fill),
            index: 0,
        }
    }

    fn tiny_event(frames: usize, eh: usize, ew: usize) -> OverlayEvent {
        let clip = (0..frames)
            .map(|t| Array3::from_elem((eh, ew, 3), 0.1 * (t + 1) as f64))
            .collect();
        let masks = (0..frames).map(|_| Array2::from_elem((eh, ew), 1.0)).collect();
        OverlayEvent {
            event_id: "e".into(),
            clip,
            masks,
        }
    }

    #[test]
    fn composite_zero_mask_is_identity() {
        let f = gray_frame(8, 8, 0.5);
        let ev = Array3::from_elem((4, 4, 1), 0.9);
        let mask = Array2::zeros((4, 4));
        let (out, amap) = composite_event(&f, &ev, &mask, (2, 2)).unwrap();
        assert_eq!(out.pixels, f.pixels);
        assert!(amap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composite_full_mask_changes_exactly_region() {
        let f = gray_frame(8, 8, 0.5);
        let ev = Array3::from_elem((4, 4, 1), 0.9);
        let mask = Array2::from_elem((4, 4), 1.0);
        let (out, amap) = composite_event(&f, &ev, &mask, (1, 3)).unwrap();
        let changed = out
            .pixels
            .iter()
            .zip(f.pixels.iter())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 16);
        assert_eq!(amap.sum(), 16.0);
    }

    #[test]
    fn composite_corner_full_frame() {
        let f = gray_frame(4, 4, 0.2);
        let ev = Array3::from_elem((4, 4, 1), 0.7);
        let mut mask = Array2::zeros((4, 4));
        mask[(0, 0)] = 1.0;
        mask[(3, 3)] = 1.0;
        let (out, _) = composite_event(&f, &ev, &mask, (0, 0)).unwrap();
        assert_eq!(out.pixels[(0, 0, 0)], 0.7);
        assert_eq!(out.pixels[(3, 3, 0)], 0.7);
        assert_eq!(out.pixels[(1, 1, 0)], 0.2);
    }

    #[test]
    fn composite_out_of_bounds_is_error() {
        let f = gray_frame(8, 8, 0.5);
        let ev = Array3::from_elem((4, 4, 1), 0.9);
        let mask = Array2::from_elem((4, 4), 1.0);
        assert!(composite_event(&f, &ev, &mask, (6, 0)).is_err());
    }

    #[test]
    fn sample_without_augmentation_is_clean() {
        let prev = gray_frame(8, 8, 0.3);
        let cur = gray_frame(8, 8, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let s = make_training_sample(&prev, &cur, &[], 0.0, &mut rng).unwrap();
            assert_eq!(s.input_frame.pixels, s.target_frame.pixels);
            assert!(s.anomaly_map.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sample_with_p1_differs_exactly_on_mask_support() {
        let prev = gray_frame(16, 16, 0.3);
        let cur = gray_frame(16, 16, 0.4);
        let bank = vec![tiny_event(4, 5, 5)];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = make_training_sample(&prev, &cur, &bank, 1.0, &mut rng).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let diff = (s.input_frame.pixels[(i, j, 0)] - s.target_frame.pixels[(i, j, 0)])
                    .abs();
                if s.anomaly_map[(i, j)] == 0.0 {
                    assert_eq!(diff, 0.0, "pixel ({i},{j}) changed outside mask");
                } else {
                    assert!(diff > 0.0, "pixel ({i},{j}) unchanged under mask");
                }
            }
        }
    }

    #[test]
    fn augment_rate_matches_probability() {
        let prev = gray_frame(8, 8, 0.3);
        let cur = gray_frame(8, 8, 0.4);
        let bank = vec![tiny_event(4, 3, 3)];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut augmented = 0usize;
        for _ in 0..draws {
            let s = make_training_sample(&prev, &cur, &bank, 0.25, &mut rng).unwrap();
            if s.anomaly_map.sum() > 0.0 {
                augmented += 1;
            }
        }
        let frac = augmented as f64 / draws as f64;
        assert!((frac - 0.25).abs() <= 0.02, "augmented fraction {frac}");
    }

    #[test]
    fn empty_bank_with_positive_p_is_error() {
        let prev = gray_frame(8, 8, 0.3);
        let cur = gray_frame(8, 8, 0.4);
        // p = 1 guarantees the augmentation branch is taken
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_training_sample(&prev, &cur, &[], 1.0, &mut rng),
            Err(DataError::EmptyBank)
        ));
    }

    #[test]
    fn oversized_event_is_shrunk() {
        let prev = gray_frame(8, 8, 0.3);
        let cur = gray_frame(8, 8, 0.4);
        let bank = vec![tiny_event(2, 20, 20)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = make_training_sample(&prev, &cur, &bank, 1.0, &mut rng).unwrap();
        assert!(s.anomaly_map.sum() > 0.0);
    }

    proptest! {
        #[test]
        fn composite_never_touches_unmasked_pixels(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Frame {
                pixels: Array3::from_shape_fn((10, 10, 1), |_| rng.gen::<f64>()),
                index: 0,
            };
            let ev = Array3::from_shape_fn((4, 4, 1), |_| rng.gen::<f64>());
            let mask = Array2::from_shape_fn((4, 4), |_| if rng.gen::<bool>() { 1.0 } else { 0.0 });
            let (out, amap) = composite_event(&f, &ev, &mask, (3, 3)).unwrap();
            for i in 0..10 {
                for j in 0..10 {
                    if amap[(i, j)] == 0.0 {
                        prop_assert_eq!(out.pixels[(i, j, 0)], f.pixels[(i, j, 0)]);
                    }
                }
            }
        }
    }
}
