//! Frame-level ROC-AUC metrics: micro AUC over the concatenation of all
//! test videos and macro AUC as the mean of per-video AUCs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::infer::ScoreSeries;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores ({scores}) and labels ({labels}) differ in length{}", video.as_deref().map(|v| format!(" for video {v}")).unwrap_or_default())]
    LengthMismatch {
        scores: usize,
        labels: usize,
        video: Option<String>,
    },
    #[error("AUC undefined: labels contain a single class{}", video.as_deref().map(|v| format!(" in video {v}")).unwrap_or_default())]
    SingleClass { video: Option<String> },
    #[error("no videos to evaluate")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub micro_auc: f64,
    pub macro_auc: f64,
    pub per_video_auc: BTreeMap<String, f64>,
    pub counted: Vec<String>,
    /// Videos excluded from the macro average (single-class labels).
    pub skipped: Vec<String>,
}

/// ROC-AUC via the rank statistic (Mann-Whitney), ties counted as 1/2.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
            video: None,
        });
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { video: None });
    }
    // average ranks over ties
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied entries share the average rank
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Micro AUC over the concatenated smoothed scores; macro AUC as the mean
/// of per-video AUCs, skipping videos whose labels are single-class.
pub fn evaluate(series: &[(ScoreSeries, Vec<u8>)]) -> Result<EvalResult, EvalError> {
    if series.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut per_video_auc = BTreeMap::new();
    let mut counted = Vec::new();
    let mut skipped = Vec::new();
    for (s, labels) in series {
        if s.smoothed.len() != labels.len() {
            return Err(EvalError::LengthMismatch {
                scores: s.smoothed.len(),
                labels: labels.len(),
                video: Some(s.video_id.clone()),
            });
        }
        all_scores.extend_from_slice(&s.smoothed);
        all_labels.extend_from_slice(labels);
        match roc_auc(&s.smoothed, labels) {
            Ok(auc) => {
                per_video_auc.insert(s.video_id.clone(), auc);
                counted.push(s.video_id.clone());
            }
            Err(EvalError::SingleClass { .. }) => skipped.push(s.video_id.clone()),
            Err(e) => return Err(e),
        }
    }
    let micro_auc = roc_auc(&all_scores, &all_labels)?;
    let macro_auc = if counted.is_empty() {
        f64::NAN
    } else {
        per_video_auc.values().sum::<f64>() / counted.len() as f64
    };
    Ok(EvalResult {
        micro_auc,
        macro_auc,
        per_video_auc,
        counted,
        skipped,
    })
}

/// Plain-text report, also machine readable (key = value per line).
pub fn report(result: &EvalResult) -> String {
    let mut out = String::new();
    out.push_str(&format!("micro_auc = {:.6}\n", result.micro_auc));
    out.push_str(&format!("macro_auc = {:.6}\n", result.macro_auc));
    for (vid, auc) in &result.per_video_auc {
        out.push_str(&format!("video {vid} = {auc:.6}\n"));
    }
    for vid in &result.skipped {
        out.push_str(&format!("video {vid} = skipped (single-class labels)\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive pairwise comparison with half-credit ties.
    fn pairwise_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li == 0 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    fn series(id: &str, smoothed: Vec<f64>) -> ScoreSeries {
        ScoreSeries {
            video_id: id.to_string(),
            raw: smoothed.clone(),
            smoothed,
        }
    }

    #[test]
    fn perfect_separation() {
        let auc = roc_auc(&[0.1, 0.9, 0.8, 0.2], &[0, 1, 1, 0]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn perfect_inversion() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn tie_fixture() {
        let auc = roc_auc(&[0.5, 0.5, 0.7], &[0, 1, 1]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_error() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(EvalError::SingleClass { .. })
        ));
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(roc_auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn matches_pairwise_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..120 {
            let n = rng.gen_range(2..1000);
            // quantized scores so ties actually occur
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round()).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let got = roc_auc(&scores, &labels).unwrap();
            let expect = pairwise_oracle(&scores, &labels);
            assert!((got - expect).abs() < 1e-12, "trial {trial}: {got} vs {expect}");
        }
    }

    #[test]
    fn negated_scores_flip_auc_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 50;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let neg: Vec<f64> = scores.iter().map(|v| -v).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        let b = roc_auc(&neg, &labels).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_video_micro_equals_macro() {
        let s = series("a", vec![0.1, 0.9, 0.2, 0.8]);
        let result = evaluate(&[(s, vec![0, 1, 0, 1])]).unwrap();
        assert_eq!(result.micro_auc, result.macro_auc);
    }

    #[test]
    fn macro_is_mean_of_per_video() {
        let a = series("a", vec![0.1, 0.9]);
        let b = series("b", vec![0.5, 0.5]);
        let result = evaluate(&[(a, vec![0, 1]), (b, vec![0, 1])]).unwrap();
        assert!((result.macro_auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn micro_differs_from_macro_when_concatenation_reorders() {
        // each video separates perfectly; concatenated they interleave
        let a = series("a", vec![0.1, 0.6]);
        let b = series("b", vec![0.7, 0.9]);
        let data = [(a, vec![0u8, 1]), (b, vec![0, 1])];
        let result = evaluate(&data).unwrap();
        assert!((result.macro_auc - 1.0).abs() < 1e-12);
        let all_scores = [0.1, 0.6, 0.7, 0.9];
        let all_labels = [0u8, 1, 0, 1];
        let oracle = pairwise_oracle(&all_scores, &all_labels);
        assert!((result.micro_auc - oracle).abs() < 1e-12);
        assert!(result.micro_auc < 1.0);
    }

    #[test]
    fn single_class_videos_skipped_in_macro() {
        let a = series("a", vec![0.1, 0.9]);
        let b = series("b", vec![0.2, 0.3]);
        let result = evaluate(&[(a, vec![0, 1]), (b, vec![0, 0])]).unwrap();
        assert_eq!(result.skipped, vec!["b".to_string()]);
        assert_eq!(result.counted, vec!["a".to_string()]);
        assert!((result.macro_auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(matches!(evaluate(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn mismatch_error_names_video() {
        let a = series("cam3", vec![0.1, 0.9]);
        let err = evaluate(&[(a, vec![0, 1, 1])]).unwrap_err();
        assert!(err.to_string().contains("cam3"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn invariant_under_monotone_transform(
            seed in 0u64..1000,
            n in 4usize..60,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let transformed: Vec<f64> = scores.iter().map(|v| (3.0 * v).exp()).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            let b = roc_auc(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
