//! Experiment configuration: every knob of the pipeline, with validation,
//! flat key-value (de)serialization and named presets.
//!
//! Precedence when resolving a config: preset defaults < environment
//! variables (`SDMAE_<KEY>`) < config file < explicit `--set` overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

/// Environment variable prefix for config overrides (lowest precedence).
pub const ENV_PREFIX: &str = "SDMAE_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    MissingFile(String),
    #[error("failed to read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse value for key `{key}`: {reason}")]
    Parse { key: String, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: field `{field}` violates rule: {rule}")]
    Invalid { field: String, rule: String },
}

/// How teacher/student outputs are combined into the pixel anomaly map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreStrategy {
    /// Teacher reconstruction error only.
    T,
    /// Teacher + student reconstruction errors.
    TS,
    /// Teacher error + teacher-student discrepancy (default).
    TTsd,
    /// All three terms.
    TSTsd,
}

impl ScoreStrategy {
    pub const ALL: [ScoreStrategy; 4] = [
        ScoreStrategy::T,
        ScoreStrategy::TS,
        ScoreStrategy::TTsd,
        ScoreStrategy::TSTsd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreStrategy::T => "t",
            ScoreStrategy::TS => "t_s",
            ScoreStrategy::TTsd => "t_tsd",
            ScoreStrategy::TSTsd => "t_s_tsd",
        }
    }

    /// True when this strategy needs the student reconstruction.
    pub fn needs_student(&self) -> bool {
        !matches!(self, ScoreStrategy::T)
    }
}

impl fmt::Display for ScoreStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "t" => Ok(ScoreStrategy::T),
            "t_s" => Ok(ScoreStrategy::TS),
            "t_tsd" => Ok(ScoreStrategy::TTsd),
            "t_s_tsd" => Ok(ScoreStrategy::TSTsd),
            other => Err(format!(
                "`{other}` is not one of t, t_s, t_tsd, t_s_tsd"
            )),
        }
    }
}

/// All experiment knobs. Immutable after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Token side length in pixels (d).
    pub patch_size: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    /// Fraction of tokens removed before the encoder during training.
    pub mask_ratio: f64,
    pub encoder_blocks: usize,
    pub encoder_dim: usize,
    pub teacher_decoder_blocks: usize,
    pub student_decoder_blocks: usize,
    pub decoder_dim: usize,
    pub attention_heads: usize,
    /// Predict a per-pixel anomaly map as an extra output channel.
    pub predict_anomaly_map: bool,
    /// Probability of compositing a synthetic anomaly onto a training frame.
    pub augment_probability: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub score_strategy: ScoreStrategy,
    /// Odd (time, height, width) extents of the 3-D mean filter.
    pub smooth_kernel: (usize, usize, usize),
    /// Std of the temporal Gaussian applied to per-frame scores.
    pub gaussian_sigma: f64,
    /// Masking ratio at inference time; 0 disables inference masking.
    pub inference_mask_ratio: f64,
    pub seed: u64,
    /// Restrict the reconstruction loss to masked tokens (ablation knob).
    pub loss_on_masked_only: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::full_default()
    }
}

impl ExperimentConfig {
    /// Full-scale defaults.
    pub fn full_default() -> Self {
        ExperimentConfig {
            patch_size: 16,
            frame_height: 256,
            frame_width: 256,
            channels: 3,
            mask_ratio: 0.5,
            encoder_blocks: 3,
            encoder_dim: 256,
            teacher_decoder_blocks: 3,
            student_decoder_blocks: 1,
            decoder_dim: 128,
            attention_heads: 4,
            predict_anomaly_map: true,
            augment_probability: 0.25,
            learning_rate: 1e-4,
            batch_size: 100,
            teacher_epochs: 100,
            student_epochs: 40,
            score_strategy: ScoreStrategy::TTsd,
            smooth_kernel: (5, 5, 5),
            gaussian_sigma: 3.0,
            inference_mask_ratio: 0.5,
            seed: 0,
            loss_on_masked_only: false,
        }
    }

    /// Desk-scale preset for the bundled toy dataset.
    pub fn toy_preset() -> Self {
        ExperimentConfig {
            patch_size: 8,
            frame_height: 64,
            frame_width: 64,
            channels: 1,
            encoder_dim: 64,
            decoder_dim: 32,
            // desk-scale schedule: far fewer optimizer steps than the
            // full-scale setup, so a proportionally larger step size
            learning_rate: 1e-3,
            teacher_epochs: 10,
            student_epochs: 4,
            batch_size: 16,
            ..Self::full_default()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "full" => Ok(Self::full_default()),
            "toy" => Ok(Self::toy_preset()),
            other => Err(ConfigError::Parse {
                key: "preset".into(),
                reason: format!("unknown preset `{other}` (expected full or toy)"),
            }),
        }
    }

    /// Number of tokens per frame.
    pub fn token_count(&self) -> usize {
        (self.frame_height / self.patch_size) * (self.frame_width / self.patch_size)
    }

    /// Output channels per patch: `c + 1` when the anomaly map is predicted.
    pub fn output_channels(&self) -> usize {
        self.channels + if self.predict_anomaly_map { 1 } else { 0 }
    }

    /// Visible-token count for a given masking ratio.
    pub fn visible_count(&self, ratio: f64) -> usize {
        let n = self.token_count();
        n - ((ratio * n as f64).round() as usize).min(n)
    }

    /// Check every invariant; returns the config unchanged when all hold.
    pub fn validate(self) -> Result<Self, ConfigError> {
        let fail = |field: &str, rule: String| -> Result<Self, ConfigError> {
            Err(ConfigError::Invalid {
                field: field.into(),
                rule,
            })
        };
        if self.patch_size == 0 {
            return fail("patch_size", "must be >= 1".into());
        }
        if self.channels == 0 {
            return fail("channels", "must be >= 1".into());
        }
        if self.frame_height % self.patch_size != 0 {
            return fail(
                "frame_height",
                format!(
                    "h not divisible by d ({} % {} != 0)",
                    self.frame_height, self.patch_size
                ),
            );
        }
        if self.frame_width % self.patch_size != 0 {
            return fail(
                "frame_width",
                format!(
                    "w not divisible by d ({} % {} != 0)",
                    self.frame_width, self.patch_size
                ),
            );
        }
        for (name, ratio) in [
            ("mask_ratio", self.mask_ratio),
            ("inference_mask_ratio", self.inference_mask_ratio),
        ] {
            if !(0.0..1.0).contains(&ratio) || !ratio.is_finite() {
                return fail(name, format!("must be in [0, 1), got {ratio}"));
            }
            if self.visible_count(ratio) == 0 {
                return fail(name, "no visible tokens would remain".into());
            }
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return fail("augment_probability", "must be in [0, 1]".into());
        }
        if self.encoder_blocks < 1 {
            return fail("encoder_blocks", "must be >= 1".into());
        }
        if self.teacher_decoder_blocks < 1 {
            return fail("teacher_decoder_blocks", "must be >= 1".into());
        }
        if self.student_decoder_blocks < 1 {
            return fail("student_decoder_blocks", "must be >= 1".into());
        }
        if self.attention_heads == 0 {
            return fail("attention_heads", "must be >= 1".into());
        }
        if self.encoder_dim == 0 || self.encoder_dim % self.attention_heads != 0 {
            return fail(
                "encoder_dim",
                format!(
                    "must be a positive multiple of attention_heads ({})",
                    self.attention_heads
                ),
            );
        }
        if self.decoder_dim == 0 || self.decoder_dim % self.attention_heads != 0 {
            return fail(
                "decoder_dim",
                format!(
                    "must be a positive multiple of attention_heads ({})",
                    self.attention_heads
                ),
            );
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate", "must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1".into());
        }
        if self.teacher_epochs == 0 {
            return fail("teacher_epochs", "must be >= 1".into());
        }
        if self.student_epochs == 0 {
            return fail("student_epochs", "must be >= 1".into());
        }
        let (kt, kh, kw) = self.smooth_kernel;
        for (axis, k) in [("t", kt), ("h", kh), ("w", kw)] {
            if k == 0 || k % 2 == 0 {
                return fail(
                    "smooth_kernel",
                    format!("{axis} extent must be odd and >= 1, got {k}"),
                );
            }
        }
        if !(self.gaussian_sigma > 0.0) {
            return fail("gaussian_sigma", "must be positive".into());
        }
        Ok(self)
    }

    /// Apply one `key = value` pair.
    fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: fmt::Display,
        {
            value.trim().parse().map_err(|e| ConfigError::Parse {
                key: key.into(),
                reason: format!("{e}"),
            })
        }
        match key {
            "patch_size" => self.patch_size = parse(key, value)?,
            "frame_height" => self.frame_height = parse(key, value)?,
            "frame_width" => self.frame_width = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "encoder_blocks" => self.encoder_blocks = parse(key, value)?,
            "encoder_dim" => self.encoder_dim = parse(key, value)?,
            "teacher_decoder_blocks" => self.teacher_decoder_blocks = parse(key, value)?,
            "student_decoder_blocks" => self.student_decoder_blocks = parse(key, value)?,
            "decoder_dim" => self.decoder_dim = parse(key, value)?,
            "attention_heads" => self.attention_heads = parse(key, value)?,
            "predict_anomaly_map" => self.predict_anomaly_map = parse(key, value)?,
            "augment_probability" => self.augment_probability = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, value)?,
            "student_epochs" => self.student_epochs = parse(key, value)?,
            "score_strategy" => {
                self.score_strategy =
                    value
                        .trim()
                        .parse()
                        .map_err(|e: String| ConfigError::Parse {
                            key: key.into(),
                            reason: e,
                        })?
            }
            "smooth_kernel" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(ConfigError::Parse {
                        key: key.into(),
                        reason: format!("expected `t,h,w`, got `{value}`"),
                    });
                }
                self.smooth_kernel = (
                    parse(key, parts[0])?,
                    parse(key, parts[1])?,
                    parse(key, parts[2])?,
                );
            }
            "gaussian_sigma" => self.gaussian_sigma = parse(key, value)?,
            "inference_mask_ratio" => self.inference_mask_ratio = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "loss_on_masked_only" => self.loss_on_masked_only = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Serialize to the flat key-value file format. Round-trips exactly
    /// through [`load_config`].
    pub fn to_file_string(&self) -> String {
        let (kt, kh, kw) = self.smooth_kernel;
        format!(
            "# sdmae experiment configuration\n\
             patch_size = {}\n\
             frame_height = {}\n\
             frame_width = {}\n\
             channels = {}\n\
             mask_ratio = {}\n\
             encoder_blocks = {}\n\
             encoder_dim = {}\n\
             teacher_decoder_blocks = {}\n\
             student_decoder_blocks = {}\n\
             decoder_dim = {}\n\
             attention_heads = {}\n\
             predict_anomaly_map = {}\n\
             augment_probability = {}\n\
             learning_rate = {}\n\
             batch_size = {}\n\
             teacher_epochs = {}\n\
             student_epochs = {}\n\
             score_strategy = {}\n\
             smooth_kernel = {},{},{}\n\
             gaussian_sigma = {}\n\
             inference_mask_ratio = {}\n\
             seed = {}\n\
             loss_on_masked_only = {}\n",
            self.patch_size,
            self.frame_height,
            self.frame_width,
            self.channels,
            self.mask_ratio,
            self.encoder_blocks,
            self.encoder_dim,
            self.teacher_decoder_blocks,
            self.student_decoder_blocks,
            self.decoder_dim,
            self.attention_heads,
            self.predict_anomaly_map,
            self.augment_probability,
            self.learning_rate,
            self.batch_size,
            self.teacher_epochs,
            self.student_epochs,
            self.score_strategy,
            kt,
            kh,
            kw,
            self.gaussian_sigma,
            self.inference_mask_ratio,
            self.seed,
            self.loss_on_masked_only,
        )
    }
}

/// Parse one `key = value` file line; empty lines and `#` comments skipped.
fn parse_line(line: &str) -> Result<Option<(String, String)>, ConfigError> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
        key: line.into(),
        reason: "expected `key = value`".into(),
    })?;
    Ok(Some((key.trim().to_string(), value.trim().to_string())))
}

fn env_overrides() -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase(), v))
        })
        .collect();
    pairs.sort();
    pairs
}

/// Resolve a config from (in increasing precedence) a preset base,
/// `SDMAE_*` environment variables, an optional config file, and explicit
/// overrides. A `preset` key may appear at any level and rebases the
/// defaults before the remaining keys are applied.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig, ConfigError> {
    // Layers in increasing precedence.
    let mut layers: Vec<Vec<(String, String)>> = vec![env_overrides()];
    if let Some(path) = path {
        if !path.exists() {
            return Err(ConfigError::MissingFile(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut pairs = Vec::new();
        for line in text.lines() {
            if let Some(kv) = parse_line(line)? {
                pairs.push(kv);
            }
        }
        layers.push(pairs);
    }
    layers.push(overrides.to_vec());

    // The highest-precedence `preset` key decides the base.
    let mut cfg = ExperimentConfig::full_default();
    for layer in &layers {
        for (k, v) in layer {
            if k == "preset" {
                cfg = ExperimentConfig::preset(v)?;
            }
        }
    }
    let mut inference_ratio_set = false;
    for layer in &layers {
        for (k, v) in layer {
            if k == "preset" {
                continue;
            }
            if k == "inference_mask_ratio" {
                inference_ratio_set = true;
            }
            cfg.apply_kv(k, v)?;
        }
    }
    // inference_mask_ratio tracks mask_ratio unless set explicitly.
    if !inference_ratio_set {
        cfg.inference_mask_ratio = cfg.mask_ratio;
    }
    cfg.validate()
}
