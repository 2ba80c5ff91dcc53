//! Deterministic toy dataset: textured backgrounds, small sprites moving
//! slowly on fixed lanes (normal), and fast oversized off-lane sprites
//! (test anomalies), plus an event bank of distinct sprite shapes for
//! training augmentation.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Toy generator parameters. Defaults match the desk-scale preset:
/// 8 train videos, 4 test videos, 120 frames each, 64x64 grayscale.
#[derive(Debug, Clone)]
pub struct ToyParams {
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub bank_events: usize,
    pub bank_frames: usize,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            train_videos: 8,
            test_videos: 4,
            frames_per_video: 120,
            height: 64,
            width: 64,
            bank_events: 5,
            bank_frames: 10,
        }
    }
}

/// Summary of a generated toy dataset.
#[derive(Debug, Clone)]
pub struct ToyManifest {
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames_per_video: usize,
    pub bank_events: usize,
    pub seed: u64,
}

impl ToyManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "toy dataset manifest");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "train_videos = {}", self.train_videos);
        let _ = writeln!(s, "test_videos = {}", self.test_videos);
        let _ = writeln!(s, "frames_per_video = {}", self.frames_per_video);
        let _ = writeln!(s, "bank_events = {}", self.bank_events);
        s
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_gray_png(path: &Path, img: &Array2<f64>) -> Result<(), DataError> {
    let (h, w) = img.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = (img[(i, j)].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| DataError::BadImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Bright static block present at the same position in every video. It
/// pins the brightest pixels of every frame to a static, learnable
/// structure, so raw pixel magnitude alone carries no anomaly signal.
const BEACON_POS: (usize, usize) = (2, 2);
const BEACON_SIZE: usize = 9;
const BEACON_INTENSITY: f64 = 0.9;

/// Smooth static background: a coarse random grid bilinearly upsampled,
/// plus the fixed bright beacon block.
fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let gh = 8;
    let gw = 8;
    let grid = Array2::from_shape_fn((gh + 1, gw + 1), |_| rng.gen_range(0.10..0.45));
    let mut bg = Array2::from_shape_fn((h, w), |(i, j)| {
        let fi = i as f64 / h as f64 * gh as f64;
        let fj = j as f64 / w as f64 * gw as f64;
        let (i0, j0) = (fi as usize, fj as usize);
        let (di, dj) = (fi - i0 as f64, fj - j0 as f64);
        let g = &grid;
        g[(i0, j0)] * (1.0 - di) * (1.0 - dj)
            + g[(i0 + 1, j0)] * di * (1.0 - dj)
            + g[(i0, j0 + 1)] * (1.0 - di) * dj
            + g[(i0 + 1, j0 + 1)] * di * dj
    });
    for i in 0..BEACON_SIZE.min(h - BEACON_POS.0) {
        for j in 0..BEACON_SIZE.min(w - BEACON_POS.1) {
            bg[(BEACON_POS.0 + i, BEACON_POS.1 + j)] = BEACON_INTENSITY;
        }
    }
    bg
}

#[derive(Clone, Copy)]
enum Shape {
    Square,
    Diamond,
    Triangle,
    Cross,
    Ring,
    HollowSquare,
    Bar,
}

/// True when (i, j) inside a size x size bounding box belongs to the shape.
fn shape_hit(shape: Shape, i: usize, j: usize, size: usize) -> bool {
    let s = size as i64;
    let (i, j) = (i as i64, j as i64);
    let c = (s - 1) as f64 / 2.0;
    match shape {
        Shape::Square => true,
        Shape::Diamond => (i as f64 - c).abs() + (j as f64 - c).abs() <= c,
        Shape::Triangle => {
            // widening from the top row
            let half = (i + 1) / 2;
            (j as f64 - c).abs() <= half as f64
        }
        Shape::Cross => {
            let t = (s / 3).max(1);
            (i - s / 2).abs() < t || (j - s / 2).abs() < t
        }
        Shape::Ring => {
            let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
            r <= c && r >= c - 2.0
        }
        Shape::HollowSquare => i < 2 || j < 2 || i >= s - 2 || j >= s - 2,
        Shape::Bar => (i - j).abs() <= 1,
    }
}

/// Stamp a shape onto `img` (column positions wrap around); records the
/// painted support in `mask` when given.
fn stamp(
    img: &mut Array2<f64>,
    mask: Option<&mut Array2<f64>>,
    shape: Shape,
    top: i64,
    left: i64,
    size: usize,
    intensity: f64,
) {
    let (h, w) = img.dim();
    let mut mask = mask;
    for i in 0..size {
        for j in 0..size {
            if !shape_hit(shape, i, j, size) {
                continue;
            }
            let ii = top + i as i64;
            if ii < 0 || ii >= h as i64 {
                continue;
            }
            let jj = (left + j as i64).rem_euclid(w as i64) as usize;
            img[(ii as usize, jj)] = intensity;
            if let Some(m) = mask.as_deref_mut() {
                m[(ii as usize, jj)] = 1.0;
            }
        }
    }
}

struct Lane {
    row: i64,
    start_col: i64,
    speed: i64,
    shape: Shape,
}

/// Per-video normal motion: two sprites on fixed lanes, slow speed.
fn make_lanes(h: usize, rng: &mut ChaCha8Rng) -> Vec<Lane> {
    let lane_rows = [h as i64 / 4, 3 * h as i64 / 4 - 5];
    lane_rows
        .iter()
        .enumerate()
        .map(|(k, &row)| Lane {
            row,
            start_col: rng.gen_range(0..64),
            speed: if k == 0 { 1 } else { -1 },
            shape: if k == 0 { Shape::Square } else { Shape::Diamond },
        })
        .collect()
}

const SPRITE_INTENSITY: f64 = 0.9;
const NORMAL_SPRITE_SIZE: usize = 5;
const ANOMALY_SPRITE_SIZE: usize = 12;

struct Anomaly {
    start: usize,
    end: usize,
    row: i64,
    start_col: i64,
    speed: i64,
}

fn render_frame(
    bg: &Array2<f64>,
    lanes: &[Lane],
    anomaly: Option<&Anomaly>,
    t: usize,
) -> (Array2<f64>, Array2<f64>) {
    let mut img = bg.clone();
    let mut mask = Array2::zeros(bg.dim());
    for lane in lanes {
        stamp(
            &mut img,
            None,
            lane.shape,
            lane.row,
            lane.start_col + lane.speed * t as i64,
            NORMAL_SPRITE_SIZE,
            SPRITE_INTENSITY,
        );
    }
    if let Some(a) = anomaly {
        if t >= a.start && t < a.end {
            let dt = (t - a.start) as i64;
            stamp(
                &mut img,
                Some(&mut mask),
                Shape::Square,
                a.row,
                a.start_col + a.speed * dt,
                ANOMALY_SPRITE_SIZE,
                SPRITE_INTENSITY,
            );
        }
    }
    (img, mask)
}

/// Generate the full toy dataset under `out`. Bit-identical output for
/// identical `(params, seed)`.
pub fn generate_toy_dataset(
    out: &Path,
    params: &ToyParams,
    seed: u64,
) -> Result<ToyManifest, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (params.height, params.width);

    // Train split: normal motion only.
    for v in 0..params.train_videos {
        let dir = out.join("train").join(format!("video_{v:02}"));
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let bg = background(h, w, &mut rng);
        let lanes = make_lanes(h, &mut rng);
        for t in 0..params.frames_per_video {
            let (img, _) = render_frame(&bg, &lanes, None, t);
            write_gray_png(&dir.join(format!("{t:06}.png")), &img)?;
        }
    }

    // Test split: normal motion plus one anomalous span per video.
    for v in 0..params.test_videos {
        let dir = out.join("test").join(format!("video_{v:02}"));
        let mask_dir = out.join("test_masks").join(format!("video_{v:02}"));
        let label_dir = out.join("test_labels");
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        std::fs::create_dir_all(&mask_dir).map_err(|e| io_err(&mask_dir, e))?;
        std::fs::create_dir_all(&label_dir).map_err(|e| io_err(&label_dir, e))?;

        let bg = background(h, w, &mut rng);
        let lanes = make_lanes(h, &mut rng);
        let n = params.frames_per_video;
        // Span placed to always leave normal frames on both sides.
        let start = rng.gen_range(n / 4..n / 2);
        let len = rng.gen_range(n / 5..n / 3);
        let anomaly = Anomaly {
            start,
            end: (start + len).min(n - 10),
            row: rng.gen_range(h as i64 / 3..h as i64 / 2),
            start_col: rng.gen_range(0..w as i64),
            speed: if rng.gen::<bool>() { 3 } else { -3 },
        };

        let mut labels = String::new();
        for t in 0..n {
            let (img, mask) = render_frame(&bg, &lanes, Some(&anomaly), t);
            write_gray_png(&dir.join(format!("{t:06}.png")), &img)?;
            write_gray_png(&mask_dir.join(format!("{t:06}.png")), &mask)?;
            let _ = writeln!(labels, "{}", if mask.sum() > 0.0 { 1 } else { 0 });
        }
        let label_path = label_dir.join(format!("video_{v:02}.txt"));
        std::fs::write(&label_path, labels).map_err(|e| io_err(&label_path, e))?;
    }

    // Event bank: distinct shapes drifting inside their clips.
    let bank_shapes = [
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::HollowSquare,
        Shape::Bar,
    ];
    for e in 0..params.bank_events {
        let frames_dir = out.join("bank").join(format!("event_{e:02}")).join("frames");
        let masks_dir = out.join("bank").join(format!("event_{e:02}")).join("masks");
        std::fs::create_dir_all(&frames_dir).map_err(|err| io_err(&frames_dir, err))?;
        std::fs::create_dir_all(&masks_dir).map_err(|err| io_err(&masks_dir, err))?;
        let shape = bank_shapes[e % bank_shapes.len()];
        let size = rng.gen_range(7..10);
        let canvas = size + params.bank_frames; // room to drift one px per frame
        let intensity = rng.gen_range(0.8..0.95);
        for t in 0..params.bank_frames {
            let mut img = Array2::zeros((canvas, canvas));
            let mut mask = Array2::zeros((canvas, canvas));
            stamp(
                &mut img,
                Some(&mut mask),
                shape,
                (t / 2) as i64,
                t as i64,
                size,
                intensity,
            );
            write_gray_png(&frames_dir.join(format!("{t:06}.png")), &img)?;
            write_gray_png(&masks_dir.join(format!("{t:06}.png")), &mask)?;
        }
    }

    let manifest = ToyManifest {
        train_videos: params.train_videos,
        test_videos: params.test_videos,
        frames_per_video: params.frames_per_video,
        bank_events: params.bank_events,
        seed,
    };
    let manifest_path = out.join("manifest.txt");
    std::fs::write(&manifest_path, manifest.to_text()).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::data::{load_dataset, load_event_bank};

    fn small_params() -> ToyParams {
        ToyParams {
            train_videos: 2,
            test_videos: 2,
            frames_per_video: 40,
            ..ToyParams::default()
        }
    }

    fn tree_digest(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
                    files.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn generator_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_toy_dataset(a.path(), &small_params(), 7).unwrap();
        generate_toy_dataset(b.path(), &small_params(), 7).unwrap();
        assert_eq!(tree_digest(a.path()), tree_digest(b.path()));
    }

    #[test]
    fn seed_changes_content_not_structure() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_toy_dataset(a.path(), &small_params(), 7).unwrap();
        generate_toy_dataset(b.path(), &small_params(), 8).unwrap();
        let da = tree_digest(a.path());
        let db = tree_digest(b.path());
        let names_a: Vec<&String> = da.iter().map(|(n, _)| n).collect();
        let names_b: Vec<&String> = db.iter().map(|(n, _)| n).collect();
        assert_eq!(names_a, names_b);
        assert_ne!(da, db);
    }

    #[test]
    fn default_params_load_back_with_expected_counts() {
        let dir = tempfile::tempdir().unwrap();
        generate_toy_dataset(dir.path(), &ToyParams::default(), 3).unwrap();
        let cfg = ExperimentConfig::toy_preset().validate().unwrap();
        let (train, test) = load_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 4);
        for video in &test {
            let labels = video.labels.as_ref().expect("test labels present");
            assert_eq!(labels.len(), 120);
            assert!(labels.iter().any(|&l| l == 1), "no anomalous span");
            assert!(labels.iter().any(|&l| l == 0), "no normal span");
            // labels[t] = 1 iff pixel mask t has a nonzero entry
            let masks = video.pixel_masks.as_ref().expect("test masks present");
            for (t, mask) in masks.iter().enumerate() {
                assert_eq!(labels[t] == 1, mask.sum() > 0.0, "video {} t={t}", video.video_id);
            }
        }
    }

    #[test]
    fn bank_loads_with_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        generate_toy_dataset(dir.path(), &ToyParams::default(), 3).unwrap();
        let bank = load_event_bank(&dir.path().join("bank")).unwrap();
        assert!(bank.len() >= 4);
        for ev in &bank {
            assert!(ev.clip.len() >= 8, "event {} too short", ev.event_id);
            assert_eq!(ev.clip.len(), ev.masks.len());
        }
    }
}
