//! Two-stage optimization: the teacher (shared encoder + teacher decoder)
//! is trained with the motion-weighted reconstruction loss, then the
//! student decoder is distilled against the teacher's outputs while every
//! non-student parameter stays frozen.

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::data::{make_training_sample, DataError, OverlayEvent, TrainingSample, VideoSequence};
use crate::model::{
    backward_student, backward_teacher, config_fingerprint, forward_cached, init_model,
    is_student_param, patchify, sample_mask, ModelError, ModelParams, PatchGrid,
};
use crate::motion::{
    fuse_anomaly, motion_gradient, patch_motion_stats, token_weights, MotionError, TokenWeights,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("prediction and target grids have shapes {pred:?} vs {target:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        target: (usize, usize),
    },
    #[error("weights length {weights} does not match {tokens} tokens")]
    WeightsMismatch { weights: usize, tokens: usize },
    #[error("provided parameters were built for a different architecture ({found} vs {expected})")]
    WrongArchitecture { found: String, expected: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Teacher,
    Student,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Student => "student",
        }
    }
}

/// Optimizer and progress state for one training stage.
pub struct TrainState {
    pub stage: Stage,
    pub epoch: usize,
    /// Adam first-moment estimates, parameter-aligned.
    pub moment1: Vec<f64>,
    /// Adam second-moment estimates, parameter-aligned.
    pub moment2: Vec<f64>,
    pub adam_step: u64,
    pub rng: ChaCha8Rng,
    /// Mean loss per completed epoch.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    fn new(stage: Stage, param_count: usize, seed: u64) -> Self {
        TrainState {
            stage,
            epoch: 0,
            moment1: vec![0.0; param_count],
            moment2: vec![0.0; param_count],
            adam_step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss_history: Vec::new(),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update over the entries where `trainable` is set.
fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut TrainState,
    lr: f64,
    trainable: &[bool],
) {
    state.adam_step += 1;
    let t = state.adam_step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..params.len() {
        if !trainable[i] {
            continue;
        }
        let g = grads[i];
        state.moment1[i] = ADAM_BETA1 * state.moment1[i] + (1.0 - ADAM_BETA1) * g;
        state.moment2[i] = ADAM_BETA2 * state.moment2[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = state.moment1[i] / bc1;
        let vhat = state.moment2[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

fn check_shapes(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    weights: &TokenWeights,
) -> Result<(), TrainError> {
    if pred.dim() != target.dim() {
        return Err(TrainError::ShapeMismatch {
            pred: pred.dim(),
            target: target.dim(),
        });
    }
    if weights.w.len() != pred.nrows() {
        return Err(TrainError::WeightsMismatch {
            weights: weights.w.len(),
            tokens: pred.nrows(),
        });
    }
    Ok(())
}

fn weighted_mse(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    weights: &TokenWeights,
) -> Result<f64, TrainError> {
    check_shapes(pred, target, weights)?;
    let n = pred.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let sq: f64 = pred
            .row(i)
            .iter()
            .zip(target.row(i).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += weights.w[i] * sq;
    }
    Ok(total / n as f64)
}

/// L = (1/n) Σ_i w_i ‖p_i − p̂_i‖²₂ over all patch entries; the target
/// comes from the clean frame (plus the anomaly channel when predicted).
pub fn teacher_loss(
    pred: &PatchGrid,
    target: &PatchGrid,
    weights: &TokenWeights,
) -> Result<f64, TrainError> {
    weighted_mse(&pred.patches, &target.patches, weights)
}

/// L = (1/n) Σ_i w_i ‖p̂_i − p̃_i‖²₂; the teacher prediction is a constant
/// target — no gradient flows back into the teacher from this loss.
pub fn student_loss(
    student_pred: &PatchGrid,
    teacher_pred: &PatchGrid,
    weights: &TokenWeights,
) -> Result<f64, TrainError> {
    weighted_mse(&student_pred.patches, &teacher_pred.patches, weights)
}

/// dL/dpred for the weighted MSE: row i is (2 w_i / n)(pred_i − target_i).
/// With `masked_only`, rows of visible tokens get zero gradient and are
/// excluded from the loss sum.
fn loss_and_grad(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    weights: &TokenWeights,
    masked_rows: Option<&[usize]>,
) -> Result<(f64, Array2<f64>), TrainError> {
    check_shapes(pred, target, weights)?;
    let n = pred.nrows();
    let mut grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    let mut include = vec![true; n];
    if let Some(rows) = masked_rows {
        include = vec![false; n];
        for &r in rows {
            include[r] = true;
        }
    }
    for i in 0..n {
        if !include[i] {
            continue;
        }
        let wi = weights.w[i];
        let mut sq = 0.0;
        for j in 0..pred.ncols() {
            let d = pred[(i, j)] - target[(i, j)];
            sq += d * d;
            grad[(i, j)] = 2.0 * wi / n as f64 * d;
        }
        total += wi * sq;
    }
    Ok((total / n as f64, grad))
}

/// The per-sample pieces shared by both stages: augmented input, motion
/// weights (anomaly-fused when augmented), clean target patches, mask plan.
struct PreparedSample {
    sample: TrainingSample,
    weights: TokenWeights,
    target: Array2<f64>,
}

fn prepare_sample(
    cfg: &ExperimentConfig,
    sample: TrainingSample,
) -> Result<PreparedSample, TrainError> {
    let grad = motion_gradient(&sample.prev_frame, &sample.input_frame)?;
    let augmented = sample.anomaly_map.iter().any(|&v| v > 0.0);
    let grad = if augmented {
        fuse_anomaly(&grad, &sample.anomaly_map)?
    } else {
        grad
    };
    let m = patch_motion_stats(&grad, cfg.patch_size)?;
    let weights = token_weights(&m)?;

    let target_pixels = if cfg.predict_anomaly_map {
        let (h, w, _) = sample.target_frame.pixels.dim();
        let anomaly = sample
            .anomaly_map
            .clone()
            .into_shape_with_order((h, w, 1))
            .expect("anomaly map reshapes to one channel");
        concatenate(Axis(2), &[sample.target_frame.pixels.view(), anomaly.view()])
            .expect("channel concatenation")
    } else {
        sample.target_frame.pixels.clone()
    };
    let target = patchify(&target_pixels, cfg.patch_size)?.patches;
    Ok(PreparedSample {
        sample,
        weights,
        target,
    })
}

/// All (video, frame) pairs with a preceding frame, shuffled per epoch.
fn frame_pairs(dataset: &[VideoSequence]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (vi, video) in dataset.iter().enumerate() {
        for t in 1..video.frames.len() {
            pairs.push((vi, t));
        }
    }
    pairs
}

fn run_stage(
    dataset: &[VideoSequence],
    bank: &[OverlayEvent],
    cfg: &ExperimentConfig,
    mut params: ModelParams,
    stage: Stage,
    epochs: usize,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64, &ModelParams),
) -> Result<(ModelParams, TrainState), TrainError> {
    let pairs = frame_pairs(dataset);
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let trainable: Vec<bool> = {
        let mut mask = vec![false; params.data.len()];
        let names: Vec<String> = params.layout.names().map(str::to_owned).collect();
        for name in names {
            let student = is_student_param(&name);
            let include = match stage {
                Stage::Teacher => !student,
                Stage::Student => student,
            };
            if include {
                let (offset, len) = params.layout.span(&name);
                mask[offset..offset + len].fill(true);
            }
        }
        mask
    };

    let mut state = TrainState::new(stage, params.data.len(), seed);
    let n_tokens = cfg.token_count();
    for epoch in 0..epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut state.rng);
        let mut epoch_loss = 0.0;
        let mut epoch_samples = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut batch_grads = vec![0.0; params.data.len()];
            let mut batch_loss = 0.0;
            for &(vi, t) in chunk {
                let video = &dataset[vi];
                let sample = make_training_sample(
                    &video.frames[t - 1],
                    &video.frames[t],
                    bank,
                    cfg.augment_probability,
                    &mut state.rng,
                )?;
                let prep = prepare_sample(cfg, sample)?;
                let plan = sample_mask(n_tokens, cfg.mask_ratio, &mut state.rng)?;
                let cache = forward_cached(&params, &prep.sample.input_frame.pixels, &plan)?;
                let masked_rows = cfg.loss_on_masked_only.then_some(plan.masked.as_slice());
                let (loss, grads) = match stage {
                    Stage::Teacher => {
                        let (loss, d_out) = loss_and_grad(
                            &cache.teacher_out,
                            &prep.target,
                            &prep.weights,
                            masked_rows,
                        )?;
                        (loss, backward_teacher(&params, &cache, &d_out))
                    }
                    Stage::Student => {
                        let (loss, d_out) = loss_and_grad(
                            &cache.student_out,
                            &cache.teacher_out,
                            &prep.weights,
                            masked_rows,
                        )?;
                        (loss, backward_student(&params, &cache, &d_out))
                    }
                };
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, step });
                }
                batch_loss += loss;
                for (acc, g) in batch_grads.iter_mut().zip(grads.iter()) {
                    *acc += g;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in batch_grads.iter_mut() {
                *g *= scale;
            }
            adam_step(
                &mut params.data,
                &batch_grads,
                &mut state,
                cfg.learning_rate,
                &trainable,
            );
            epoch_loss += batch_loss;
            epoch_samples += chunk.len();
        }
        let mean = epoch_loss / epoch_samples as f64;
        state.loss_history.push(mean);
        state.epoch = epoch + 1;
        on_epoch(epoch + 1, mean, &params);
    }
    Ok((params, state))
}

/// Stage 1: initialize a fresh model and train all non-student parameters
/// with the weighted reconstruction loss for `cfg.teacher_epochs` epochs.
pub fn train_teacher(
    dataset: &[VideoSequence],
    bank: &[OverlayEvent],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ModelParams, TrainState), TrainError> {
    train_teacher_logged(dataset, bank, cfg, seed, |_, _, _| {})
}

/// [`train_teacher`] with a per-epoch callback `(epoch, mean_loss, params)`
/// for logging and periodic checkpoints.
pub fn train_teacher_logged(
    dataset: &[VideoSequence],
    bank: &[OverlayEvent],
    cfg: &ExperimentConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64, &ModelParams),
) -> Result<(ModelParams, TrainState), TrainError> {
    let params = init_model(cfg, seed);
    run_stage(
        dataset,
        bank,
        cfg,
        params,
        Stage::Teacher,
        cfg.teacher_epochs,
        seed,
        on_epoch,
    )
}

/// Stage 2: starting from a trained teacher, train only the student
/// decoder against the teacher's (constant) predictions; every other
/// parameter is bit-identical before and after.
pub fn distill_student(
    dataset: &[VideoSequence],
    bank: &[OverlayEvent],
    cfg: &ExperimentConfig,
    params: ModelParams,
    seed: u64,
) -> Result<(ModelParams, TrainState), TrainError> {
    distill_student_logged(dataset, bank, cfg, params, seed, |_, _, _| {})
}

/// [`distill_student`] with a per-epoch callback.
pub fn distill_student_logged(
    dataset: &[VideoSequence],
    bank: &[OverlayEvent],
    cfg: &ExperimentConfig,
    params: ModelParams,
    seed: u64,
    on_epoch: impl FnMut(usize, f64, &ModelParams),
) -> Result<(ModelParams, TrainState), TrainError> {
    let expected = config_fingerprint(cfg);
    if params.fingerprint != expected {
        return Err(TrainError::WrongArchitecture {
            found: params.fingerprint,
            expected,
        });
    }
    run_stage(
        dataset,
        bank,
        cfg,
        params,
        Stage::Student,
        cfg.student_epochs,
        seed,
        on_epoch,
    )
}
