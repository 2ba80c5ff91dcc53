//! Motion gradients and the token-weighting scheme they drive.
//!
//! A gradient map is the absolute difference of two consecutive frames,
//! each median-filtered with a 3x3 window. Per-token motion statistics
//! reduce each d x d gradient patch to the channel-wise mean of per-channel
//! maxima, and the normalized statistics weight the reconstruction loss.

use ndarray::{Array1, Array3, ArrayView3};
use thiserror::Error;

use crate::data::Frame;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("frame dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("dims ({h}, {w}) not divisible by patch size {d}")]
    NotDivisible { h: usize, w: usize, d: usize },
    #[error("negative motion statistic m[{index}] = {value}")]
    NegativeStat { index: usize, value: f64 },
}

/// Per-pixel motion gradient magnitudes of one frame.
#[derive(Debug, Clone)]
pub struct GradientMap {
    /// h x w x c non-negative values.
    pub values: Array3<f64>,
    /// Frame index the gradient belongs to.
    pub index: usize,
}

/// Per-token motion statistics and their normalized loss weights.
#[derive(Debug, Clone)]
pub struct TokenWeights {
    /// Raw per-token motion statistics, all >= 0.
    pub m: Array1<f64>,
    /// Normalized weights, sum to 1.
    pub w: Array1<f64>,
}

/// 3x3 per-channel median filter with edge replication at the borders.
pub fn median_filter3(frame: &Frame) -> Frame {
    let (h, w, c) = frame.pixels.dim();
    let mut out = Array3::zeros((h, w, c));
    let mut window = [0.0f64; 9];
    for l in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut idx = 0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                        let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        window[idx] = frame.pixels[(ii, jj, l)];
                        idx += 1;
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out[(i, j, l)] = window[4];
            }
        }
    }
    Frame {
        pixels: out,
        index: frame.index,
    }
}

/// Absolute difference of the two median-filtered frames.
pub fn motion_gradient(prev: &Frame, cur: &Frame) -> Result<GradientMap, MotionError> {
    if prev.pixels.dim() != cur.pixels.dim() {
        return Err(MotionError::DimMismatch(prev.pixels.dim(), cur.pixels.dim()));
    }
    let fp = median_filter3(prev);
    let fc = median_filter3(cur);
    let values = (&fc.pixels - &fp.pixels).mapv(f64::abs);
    Ok(GradientMap {
        values,
        index: cur.index,
    })
}

/// All-zero gradient map, used for the first frame of a video.
pub fn zero_gradient(h: usize, w: usize, c: usize, index: usize) -> GradientMap {
    GradientMap {
        values: Array3::zeros((h, w, c)),
        index,
    }
}

/// Per-token motion statistic: channel-wise mean over the per-channel
/// maximum gradient magnitude inside each d x d patch. Token order is
/// row-major over the patch grid.
pub fn patch_motion_stats(grad: &GradientMap, d: usize) -> Result<Array1<f64>, MotionError> {
    let (h, w, c) = grad.values.dim();
    if d == 0 || h % d != 0 || w % d != 0 {
        return Err(MotionError::NotDivisible { h, w, d });
    }
    let (gh, gw) = (h / d, w / d);
    let mut m = Array1::zeros(gh * gw);
    for pi in 0..gh {
        for pj in 0..gw {
            let mut mean = 0.0;
            for l in 0..c {
                let mut max = f64::NEG_INFINITY;
                for j in 0..d {
                    for k in 0..d {
                        max = max.max(grad.values[(pi * d + j, pj * d + k, l)]);
                    }
                }
                mean += max;
            }
            m[pi * gw + pj] = mean / c as f64;
        }
    }
    Ok(m)
}

/// Normalize motion statistics into loss weights. A zero-motion frame
/// falls back to uniform weights.
pub fn token_weights(m: &Array1<f64>) -> Result<TokenWeights, MotionError> {
    for (index, &value) in m.iter().enumerate() {
        if value < 0.0 {
            return Err(MotionError::NegativeStat { index, value });
        }
    }
    let n = m.len();
    let total: f64 = m.sum();
    let w = if total > 0.0 {
        m.mapv(|v| v / total)
    } else {
        Array1::from_elem(n, 1.0 / n as f64)
    };
    Ok(TokenWeights { m: m.clone(), w })
}

/// Add the binary anomaly map (broadcast across channels) onto the
/// gradient map before the weights are computed.
pub fn fuse_anomaly(
    grad: &GradientMap,
    anomaly_map: &ndarray::Array2<f64>,
) -> Result<GradientMap, MotionError> {
    let (h, w, c) = grad.values.dim();
    if anomaly_map.dim() != (h, w) {
        return Err(MotionError::DimMismatch(
            (h, w, c),
            (anomaly_map.dim().0, anomaly_map.dim().1, c),
        ));
    }
    let mut values = grad.values.clone();
    for l in 0..c {
        for i in 0..h {
            for j in 0..w {
                values[(i, j, l)] += anomaly_map[(i, j)];
            }
        }
    }
    Ok(GradientMap {
        values,
        index: grad.index,
    })
}

/// Convenience view of the raw gradient values.
pub fn gradient_view(grad: &GradientMap) -> ArrayView3<'_, f64> {
    grad.values.view()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(pixels: Array3<f64>) -> Frame {
        Frame { pixels, index: 0 }
    }

    /// Brute-force 3x3 median with the same edge-replication policy.
    fn median_oracle(px: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = px.dim();
        let mut out = Array3::zeros((h, w, c));
        for l in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut vals = Vec::with_capacity(9);
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                            let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                            vals.push(px[(ii, jj, l)]);
                        }
                    }
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    out[(i, j, l)] = vals[4];
                }
            }
        }
        out
    }

    #[test]
    fn median_constant_frame_unchanged() {
        let f = frame(Array3::from_elem((6, 6, 1), 0.4));
        let out = median_filter3(&f);
        assert_eq!(out.pixels, f.pixels);
    }

    #[test]
    fn median_removes_salt_pixel() {
        let mut px = Array3::zeros((7, 7, 1));
        px[(3, 3, 0)] = 1.0;
        let out = median_filter3(&frame(px));
        assert_eq!(out.pixels[(3, 3, 0)], 0.0);
    }

    #[test]
    fn median_matches_brute_force_on_handcrafted_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let px = Array3::from_shape_fn((5, 5, 1), |_| rng.gen::<f64>());
        let out = median_filter3(&frame(px.clone()));
        assert_eq!(out.pixels, median_oracle(&px));
    }

    #[test]
    fn gradient_of_identical_frames_is_zero() {
        let f = frame(Array3::from_elem((8, 8, 2), 0.3));
        let g = motion_gradient(&f, &f).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_constant_shift() {
        let a = frame(Array3::from_elem((8, 8, 1), 0.2));
        let b = frame(Array3::from_elem((8, 8, 1), 0.5));
        let g = motion_gradient(&a, &b).unwrap();
        assert!(g.values.iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn gradient_support_confined_to_sprite_motion() {
        // 2px sprite shift; gradient support must stay within the union of
        // the old/new sprite areas dilated by the 3x3 filter footprint.
        let mut a = Array3::from_elem((16, 16, 1), 0.1);
        let mut b = a.clone();
        for i in 4..8 {
            for j in 4..8 {
                a[(i, j, 0)] = 0.9;
                b[(i, j + 2, 0)] = 0.9;
            }
        }
        let g = motion_gradient(&frame(a.clone()), &frame(b.clone())).unwrap();
        // Independent route: direct diff of the filtered frames.
        let direct =
            (&median_oracle(&b) - &median_oracle(&a)).mapv(f64::abs);
        assert_eq!(g.values, direct);
        for i in 0..16 {
            for j in 0..16 {
                let in_union = (3..9).contains(&i) && (3..11).contains(&j);
                if !in_union {
                    assert_eq!(g.values[(i, j, 0)], 0.0, "at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn gradient_dim_mismatch_is_error() {
        let a = frame(Array3::zeros((8, 8, 1)));
        let b = frame(Array3::zeros((8, 6, 1)));
        assert!(motion_gradient(&a, &b).is_err());
    }

    #[test]
    fn patch_stats_single_channel_example() {
        let mut g = zero_gradient(2, 2, 1, 0);
        g.values[(0, 0, 0)] = 0.1;
        g.values[(0, 1, 0)] = 0.4;
        g.values[(1, 0, 0)] = 0.2;
        g.values[(1, 1, 0)] = 0.3;
        let m = patch_motion_stats(&g, 2).unwrap();
        assert_eq!(m.len(), 1);
        assert!((m[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn patch_stats_zero_map() {
        let g = zero_gradient(8, 8, 3, 0);
        let m = patch_motion_stats(&g, 4).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_stats_channel_mean_example() {
        let mut g = zero_gradient(2, 2, 2, 0);
        g.values[(0, 0, 0)] = 0.2;
        g.values[(1, 1, 1)] = 0.6;
        let m = patch_motion_stats(&g, 2).unwrap();
        assert!((m[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn patch_stats_divisibility_error() {
        let g = zero_gradient(9, 8, 1, 0);
        assert!(patch_motion_stats(&g, 4).is_err());
    }

    #[test]
    fn patch_stats_match_brute_force_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let values = Array3::from_shape_fn((16, 16, 2), |_| rng.gen::<f64>());
            let g = GradientMap {
                values: values.clone(),
                index: 0,
            };
            let d = 4;
            let m = patch_motion_stats(&g, d).unwrap();
            let (gh, gw, c) = (16 / d, 16 / d, 2);
            for pi in 0..gh {
                for pj in 0..gw {
                    let mut acc = 0.0;
                    for l in 0..c {
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..d {
                            for k in 0..d {
                                max = max.max(values[(pi * d + j, pj * d + k, l)]);
                            }
                        }
                        acc += max;
                    }
                    let expect = acc / c as f64;
                    assert!((m[pi * gw + pj] - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn weights_normalize_example() {
        let w = token_weights(&ndarray::arr1(&[1.0, 3.0])).unwrap();
        assert!((w.w[0] - 0.25).abs() < 1e-12);
        assert!((w.w[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_motion_falls_back_to_uniform() {
        let w = token_weights(&ndarray::arr1(&[0.0, 0.0])).unwrap();
        assert_eq!(w.w[0], 0.5);
        assert_eq!(w.w[1], 0.5);
    }

    #[test]
    fn single_token_weight_is_one() {
        let w = token_weights(&ndarray::arr1(&[5.0])).unwrap();
        assert_eq!(w.w[0], 1.0);
    }

    #[test]
    fn negative_stat_is_error() {
        assert!(token_weights(&ndarray::arr1(&[0.1, -0.2])).is_err());
    }

    #[test]
    fn fuse_identity_for_zero_map() {
        let g = GradientMap {
            values: Array3::from_elem((4, 4, 2), 0.3),
            index: 1,
        };
        let fused = fuse_anomaly(&g, &Array2::zeros((4, 4))).unwrap();
        assert_eq!(fused.values, g.values);
    }

    #[test]
    fn fuse_concentrates_weights_on_masked_patch() {
        let g = zero_gradient(8, 8, 1, 0);
        let mut a = Array2::zeros((8, 8));
        for i in 0..4 {
            for j in 0..4 {
                a[(i, j)] = 1.0;
            }
        }
        let fused = fuse_anomaly(&g, &a).unwrap();
        let m = patch_motion_stats(&fused, 4).unwrap();
        assert_eq!(m[0], 1.0);
        assert!(m.iter().skip(1).all(|&v| v == 0.0));
        let w = token_weights(&m).unwrap();
        assert_eq!(w.w[0], 1.0);
    }

    #[test]
    fn fuse_adds_under_mask() {
        let mut g = zero_gradient(4, 4, 1, 0);
        g.values.fill(0.2);
        let a = Array2::from_elem((4, 4), 1.0);
        let fused = fuse_anomaly(&g, &a).unwrap();
        assert!(fused.values.iter().all(|&v| (v - 1.2).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(m in proptest::collection::vec(0.0f64..10.0, 1..64)) {
            let w = token_weights(&Array1::from(m)).unwrap();
            prop_assert!((w.w.sum() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn weights_scale_invariant(
            m in proptest::collection::vec(0.0f64..10.0, 1..32),
            k in prop_oneof![Just(1e-3f64), Just(1.0), Just(1e3)],
        ) {
            let m = Array1::from(m);
            let a = token_weights(&m).unwrap();
            let b = token_weights(&m.mapv(|v| v * k)).unwrap();
            for (x, y) in a.w.iter().zip(b.w.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn gradient_symmetric_and_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = frame(Array3::from_shape_fn((6, 6, 1), |_| rng.gen::<f64>()));
            let b = frame(Array3::from_shape_fn((6, 6, 1), |_| rng.gen::<f64>()));
            let g1 = motion_gradient(&a, &b).unwrap();
            let g2 = motion_gradient(&b, &a).unwrap();
            prop_assert!(g1.values.iter().all(|&v| v >= 0.0));
            prop_assert_eq!(g1.values, g2.values);
        }
    }
}
