//! The self-distilled masked auto-encoder: patchification, random masking,
//! a shared encoder of transformer blocks with pointwise projections, a
//! teacher decoder, and a one-block student decoder branching after the
//! teacher's first decoder block.
//!
//! The token embedding is applied to the full frame before masking; masked
//! tokens are then dropped, so all projections inside blocks are pointwise
//! and need no spatial neighborhoods. Parameters live in one flat `f64`
//! buffer with a named layout, which makes the optimizer, checkpointing,
//! hashing and finite-difference checks uniform.

pub mod nn;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::data::Frame;
use nn::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, softmax_rows,
    softmax_rows_backward, LayerNormCache,
};

/// Feed-forward hidden width relative to the block embedding dim.
pub const FF_MULT: usize = 4;

/// Counts encoder evaluations; each forward must add exactly one.
pub static ENCODER_PASSES: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dims ({h}, {w}) not divisible by patch size {d}")]
    NotDivisible { h: usize, w: usize, d: usize },
    #[error("patch grid has {n} patches but grid dims imply {expected}")]
    GridMismatch { n: usize, expected: usize },
    #[error("mask plan covers {plan_n} tokens but config implies {expected}")]
    PlanMismatch { plan_n: usize, expected: usize },
    #[error("masking ratio {ratio} leaves no visible tokens")]
    AllMasked { ratio: f64 },
    #[error("frame dims {got:?} do not match model config {expected:?}")]
    FrameMismatch {
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    #[error("checkpoint fingerprint {found} does not match config {expected}")]
    FingerprintMismatch { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint i/o error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Non-overlapping d x d patches of a frame or map, in row-major grid
/// order; each patch row is flattened in (row, col, channel) order.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    /// [n, d*d*channels]
    pub patches: Array2<f64>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
}

/// Split an h x w x c array into non-overlapping d x d patches.
pub fn patchify(pixels: &Array3<f64>, d: usize) -> Result<PatchGrid, ModelError> {
    let (h, w, c) = pixels.dim();
    if d == 0 || h % d != 0 || w % d != 0 {
        return Err(ModelError::NotDivisible { h, w, d });
    }
    let (gh, gw) = (h / d, w / d);
    let pdim = d * d * c;
    let mut patches = Array2::zeros((gh * gw, pdim));
    for pi in 0..gh {
        for pj in 0..gw {
            let row = pi * gw + pj;
            let mut idx = 0;
            for i in 0..d {
                for j in 0..d {
                    for l in 0..c {
                        patches[(row, idx)] = pixels[(pi * d + i, pj * d + j, l)];
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        grid: (gh, gw),
        patch_size: d,
        channels: c,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> Result<Array3<f64>, ModelError> {
    let (gh, gw) = grid.grid;
    let d = grid.patch_size;
    let c = grid.channels;
    if grid.patches.nrows() != gh * gw || grid.patches.ncols() != d * d * c {
        return Err(ModelError::GridMismatch {
            n: grid.patches.nrows(),
            expected: gh * gw,
        });
    }
    let mut pixels = Array3::zeros((gh * d, gw * d, c));
    for pi in 0..gh {
        for pj in 0..gw {
            let row = pi * gw + pj;
            let mut idx = 0;
            for i in 0..d {
                for j in 0..d {
                    for l in 0..c {
                        pixels[(pi * d + i, pj * d + j, l)] = grid.patches[(row, idx)];
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(pixels)
}

/// Which tokens are visible to the encoder and which are masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub n: usize,
}

/// Draw `round(ratio * n)` masked tokens uniformly without replacement.
pub fn sample_mask<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan, ModelError> {
    let k = ((ratio * n as f64).round() as usize).min(n);
    if k >= n {
        return Err(ModelError::AllMasked { ratio });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let mut masked: Vec<usize> = indices[..k].to_vec();
    let mut visible: Vec<usize> = indices[k..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan { visible, masked, n })
}

#[derive(Debug, Clone)]
struct LayoutEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Named layout of the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(specs: Vec<(String, Vec<usize>)>) -> Self {
        let mut entries = Vec::with_capacity(specs.len());
        let mut index = HashMap::new();
        let mut offset = 0;
        for (name, shape) in specs {
            let len: usize = shape.iter().product();
            index.insert(name.clone(), entries.len());
            entries.push(LayoutEntry {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
        }
        ParamLayout {
            entries,
            index,
            total: offset,
        }
    }

    fn block_specs(specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, dim: usize) {
        let ff = FF_MULT * dim;
        for (suffix, shape) in [
            ("ln1.g", vec![dim]),
            ("ln1.b", vec![dim]),
            ("attn.wq", vec![dim, dim]),
            ("attn.bq", vec![dim]),
            ("attn.wk", vec![dim, dim]),
            ("attn.bk", vec![dim]),
            ("attn.wv", vec![dim, dim]),
            ("attn.bv", vec![dim]),
            ("attn.wo", vec![dim, dim]),
            ("attn.bo", vec![dim]),
            ("ln2.g", vec![dim]),
            ("ln2.b", vec![dim]),
            ("ff.w1", vec![dim, ff]),
            ("ff.b1", vec![ff]),
            ("ff.w2", vec![ff, dim]),
            ("ff.b2", vec![dim]),
        ] {
            specs.push((format!("{prefix}.{suffix}"), shape));
        }
    }

    /// Layout implied by a config; shapes are a pure function of it.
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let pdim = cfg.patch_size * cfg.patch_size * cfg.channels;
        let out_dim = cfg.patch_size * cfg.patch_size * cfg.output_channels();
        let n = cfg.token_count();
        let de = cfg.encoder_dim;
        let dd = cfg.decoder_dim;
        let mut specs = vec![
            ("embed.w".to_string(), vec![pdim, de]),
            ("embed.b".to_string(), vec![de]),
        ];
        for i in 0..cfg.encoder_blocks {
            Self::block_specs(&mut specs, &format!("enc.{i}"), de);
        }
        specs.push(("dec.reduce.w".to_string(), vec![de, dd]));
        specs.push(("dec.reduce.b".to_string(), vec![dd]));
        specs.push(("dec.mask_token".to_string(), vec![dd]));
        specs.push(("dec.pos".to_string(), vec![n, dd]));
        for i in 0..cfg.teacher_decoder_blocks {
            Self::block_specs(&mut specs, &format!("tdec.{i}"), dd);
        }
        specs.push(("thead.w".to_string(), vec![dd, out_dim]));
        specs.push(("thead.b".to_string(), vec![out_dim]));
        for i in 0..cfg.student_decoder_blocks {
            Self::block_specs(&mut specs, &format!("sdec.{i}"), dd);
        }
        specs.push(("shead.w".to_string(), vec![dd, out_dim]));
        specs.push(("shead.b".to_string(), vec![out_dim]));
        ParamLayout::new(specs)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn entry(&self, name: &str) -> &LayoutEntry {
        let idx = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.entries[*idx]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// (offset, len) of a named entry inside the flat buffer.
    pub fn span(&self, name: &str) -> (usize, usize) {
        let e = self.entry(name);
        (e.offset, e.len)
    }
}

/// True for parameters trained in stage 2 (the student decoder).
pub fn is_student_param(name: &str) -> bool {
    name.starts_with("sdec.") || name.starts_with("shead.")
}

/// All learnable parameters plus the config they were shaped from.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

/// Hash of the architecture-determining config fields.
pub fn config_fingerprint(cfg: &ExperimentConfig) -> String {
    let desc = format!(
        "d={};h={};w={};c={};eb={};ed={};tb={};sb={};dd={};heads={};amap={}",
        cfg.patch_size,
        cfg.frame_height,
        cfg.frame_width,
        cfg.channels,
        cfg.encoder_blocks,
        cfg.encoder_dim,
        cfg.teacher_decoder_blocks,
        cfg.student_decoder_blocks,
        cfg.decoder_dim,
        cfg.attention_heads,
        cfg.predict_anomaly_map,
    );
    let digest = Sha256::digest(desc.as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Deterministic initialization: truncated normal (std 0.02) for
/// projections, positional and mask-token embeddings; ones for layer-norm
/// scales; zeros for biases.
pub fn init_model(cfg: &ExperimentConfig, seed: u64) -> ModelParams {
    let layout = ParamLayout::from_config(cfg);
    let mut data = vec![0.0; layout.total()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for entry in &layout.entries {
        let last = entry.name.rsplit('.').next().unwrap();
        let slice = &mut data[entry.offset..entry.offset + entry.len];
        if last == "g" {
            slice.fill(1.0);
        } else if last.starts_with('b') {
            // biases stay zero
        } else {
            for v in slice.iter_mut() {
                *v = trunc_normal(&mut rng, 0.02);
            }
        }
    }
    ModelParams {
        config: cfg.clone(),
        fingerprint: config_fingerprint(cfg),
        layout,
        data,
    }
}

impl ModelParams {
    pub fn view1(&self, name: &str) -> ArrayView1<'_, f64> {
        let e = self.layout.entry(name);
        ArrayView1::from(&self.data[e.offset..e.offset + e.len])
    }

    pub fn view2(&self, name: &str) -> ArrayView2<'_, f64> {
        let e = self.layout.entry(name);
        ArrayView2::from_shape((e.shape[0], e.shape[1]), &self.data[e.offset..e.offset + e.len])
            .unwrap()
    }

    fn owned1(&self, name: &str) -> Array1<f64> {
        self.view1(name).to_owned()
    }

    fn owned2(&self, name: &str) -> Array2<f64> {
        self.view2(name).to_owned()
    }

    /// Exact count of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.data.len()
    }

    /// Hash of the non-student (encoder + teacher decoder) parameters.
    pub fn backbone_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for entry in &self.layout.entries {
            if !is_student_param(&entry.name) {
                hasher.update(entry.name.as_bytes());
                for v in &self.data[entry.offset..entry.offset + entry.len] {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Gradient buffer sharing the parameter layout.
pub struct GradStore<'a> {
    layout: &'a ParamLayout,
    pub data: Vec<f64>,
}

impl<'a> GradStore<'a> {
    pub fn zeros(layout: &'a ParamLayout) -> Self {
        GradStore {
            layout,
            data: vec![0.0; layout.total()],
        }
    }

    fn add1(&mut self, name: &str, g: &Array1<f64>) {
        let e = self.layout.entry(name);
        debug_assert_eq!(e.len, g.len());
        for (dst, src) in self.data[e.offset..e.offset + e.len].iter_mut().zip(g.iter()) {
            *dst += src;
        }
    }

    fn add2(&mut self, name: &str, g: &Array2<f64>) {
        let e = self.layout.entry(name);
        debug_assert_eq!(e.len, g.len());
        for (dst, src) in self.data[e.offset..e.offset + e.len]
            .iter_mut()
            .zip(g.iter())
        {
            *dst += src;
        }
    }
}

struct BlockCache {
    x: Array2<f64>,
    ln1: LayerNormCache,
    xn: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn_concat: Array2<f64>,
    ln2: LayerNormCache,
    yn: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
    out: Array2<f64>,
}

/// Pre-LN transformer block with pointwise q/k/v/out projections and a
/// pointwise feed-forward stage.
fn block_forward(p: &ModelParams, prefix: &str, x: &Array2<f64>, heads: usize) -> BlockCache {
    let dim = x.ncols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let ln1_g = p.owned1(&format!("{prefix}.ln1.g"));
    let ln1_b = p.owned1(&format!("{prefix}.ln1.b"));
    let (xn, ln1) = layer_norm(x, &ln1_g, &ln1_b);

    let q = linear(&xn, &p.owned2(&format!("{prefix}.attn.wq")), &p.owned1(&format!("{prefix}.attn.bq")));
    let k = linear(&xn, &p.owned2(&format!("{prefix}.attn.wk")), &p.owned1(&format!("{prefix}.attn.bk")));
    let v = linear(&xn, &p.owned2(&format!("{prefix}.attn.wv")), &p.owned1(&format!("{prefix}.attn.bv")));

    let n = x.nrows();
    let mut probs = Vec::with_capacity(heads);
    let mut attn_concat = Array2::zeros((n, dim));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let scores = qh.dot(&kh.t()) * scale;
        let ph = softmax_rows(&scores);
        let oh = ph.dot(&vh);
        attn_concat.slice_mut(cols).assign(&oh);
        probs.push(ph);
    }
    let attn_out = linear(
        &attn_concat,
        &p.owned2(&format!("{prefix}.attn.wo")),
        &p.owned1(&format!("{prefix}.attn.bo")),
    );
    let y = x + &attn_out;

    let ln2_g = p.owned1(&format!("{prefix}.ln2.g"));
    let ln2_b = p.owned1(&format!("{prefix}.ln2.b"));
    let (yn, ln2) = layer_norm(&y, &ln2_g, &ln2_b);
    let h_pre = linear(&yn, &p.owned2(&format!("{prefix}.ff.w1")), &p.owned1(&format!("{prefix}.ff.b1")));
    let h_act = gelu(&h_pre);
    let f = linear(&h_act, &p.owned2(&format!("{prefix}.ff.w2")), &p.owned1(&format!("{prefix}.ff.b2")));
    let out = &y + &f;

    BlockCache {
        x: x.clone(),
        ln1,
        xn,
        q,
        k,
        v,
        probs,
        attn_concat,
        ln2,
        yn,
        h_pre,
        h_act,
        out,
    }
}

fn block_backward(
    p: &ModelParams,
    grads: &mut GradStore<'_>,
    prefix: &str,
    cache: &BlockCache,
    d_out: &Array2<f64>,
    heads: usize,
) -> Array2<f64> {
    let dim = cache.x.ncols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // out = y + ff(ln2(y))
    let mut d_y = d_out.clone();
    let (d_h_act, dw2, db2) = linear_backward(&cache.h_act, &p.owned2(&format!("{prefix}.ff.w2")), d_out);
    grads.add2(&format!("{prefix}.ff.w2"), &dw2);
    grads.add1(&format!("{prefix}.ff.b2"), &db2);
    let d_h_pre = gelu_backward(&cache.h_pre, &d_h_act);
    let (d_yn, dw1, db1) = linear_backward(&cache.yn, &p.owned2(&format!("{prefix}.ff.w1")), &d_h_pre);
    grads.add2(&format!("{prefix}.ff.w1"), &dw1);
    grads.add1(&format!("{prefix}.ff.b1"), &db1);
    let ln2_g = p.owned1(&format!("{prefix}.ln2.g"));
    let (d_y2, dg2, dbeta2) = layer_norm_backward(&cache.ln2, &ln2_g, &d_yn);
    grads.add1(&format!("{prefix}.ln2.g"), &dg2);
    grads.add1(&format!("{prefix}.ln2.b"), &dbeta2);
    d_y += &d_y2;

    // y = x + attn_out
    let mut d_x = d_y.clone();
    let (d_attn_concat, dwo, dbo) = linear_backward(
        &cache.attn_concat,
        &p.owned2(&format!("{prefix}.attn.wo")),
        &d_y,
    );
    grads.add2(&format!("{prefix}.attn.wo"), &dwo);
    grads.add1(&format!("{prefix}.attn.bo"), &dbo);

    let n = cache.x.nrows();
    let mut d_q = Array2::zeros((n, dim));
    let mut d_k = Array2::zeros((n, dim));
    let mut d_v = Array2::zeros((n, dim));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_oh = d_attn_concat.slice(cols).to_owned();
        let ph = &cache.probs[h];
        let vh = cache.v.slice(cols).to_owned();
        let qh = cache.q.slice(cols).to_owned();
        let kh = cache.k.slice(cols).to_owned();
        let d_ph = d_oh.dot(&vh.t());
        d_v.slice_mut(cols).assign(&ph.t().dot(&d_oh));
        let d_scores = softmax_rows_backward(ph, &d_ph) * scale;
        d_q.slice_mut(cols).assign(&d_scores.dot(&kh));
        d_k.slice_mut(cols).assign(&d_scores.t().dot(&qh));
    }

    let mut d_xn = Array2::zeros((n, dim));
    for (name, d) in [("wq", &d_q), ("wk", &d_k), ("wv", &d_v)] {
        let w = p.owned2(&format!("{prefix}.attn.{name}"));
        let (dxn, dw, db) = linear_backward(&cache.xn, &w, d);
        grads.add2(&format!("{prefix}.attn.{name}"), &dw);
        grads.add1(&format!("{prefix}.attn.b{}", &name[1..]), &db);
        d_xn += &dxn;
    }
    let ln1_g = p.owned1(&format!("{prefix}.ln1.g"));
    let (d_x1, dg1, dbeta1) = layer_norm_backward(&cache.ln1, &ln1_g, &d_xn);
    grads.add1(&format!("{prefix}.ln1.g"), &dg1);
    grads.add1(&format!("{prefix}.ln1.b"), &dbeta1);
    d_x += &d_x1;
    d_x
}

/// Everything the backward passes need from one forward evaluation.
pub struct ForwardCache {
    plan: MaskPlan,
    patches: Array2<f64>,
    enc: Vec<BlockCache>,
    enc_out: Array2<f64>,
    tdec: Vec<BlockCache>,
    t_feat: Array2<f64>,
    a1: Array2<f64>,
    sdec: Vec<BlockCache>,
    s_feat: Array2<f64>,
    pub teacher_out: Array2<f64>,
    pub student_out: Array2<f64>,
}

/// Forward pass over one frame. The encoder runs exactly once; the student
/// decoder consumes the teacher decoder's first-block output.
pub fn forward_cached(
    params: &ModelParams,
    pixels: &Array3<f64>,
    plan: &MaskPlan,
) -> Result<ForwardCache, ModelError> {
    let cfg = &params.config;
    let expected = (cfg.frame_height, cfg.frame_width, cfg.channels);
    if pixels.dim() != expected {
        return Err(ModelError::FrameMismatch {
            got: pixels.dim(),
            expected,
        });
    }
    let n = cfg.token_count();
    if plan.n != n {
        return Err(ModelError::PlanMismatch {
            plan_n: plan.n,
            expected: n,
        });
    }
    let heads = cfg.attention_heads;

    let grid = patchify(pixels, cfg.patch_size)?;
    let patches = grid.patches;

    // Token embedding over the full frame, then drop masked tokens.
    let embed_full = linear(&patches, &params.owned2("embed.w"), &params.owned1("embed.b"));
    let mut xv = embed_full.select(Axis(0), &plan.visible);

    ENCODER_PASSES.fetch_add(1, Ordering::Relaxed);
    let mut enc = Vec::with_capacity(cfg.encoder_blocks);
    for i in 0..cfg.encoder_blocks {
        let cache = block_forward(params, &format!("enc.{i}"), &xv, heads);
        xv = cache.out.clone();
        enc.push(cache);
    }
    let enc_out = xv;

    // Decoder input: projected visible tokens scattered back, mask tokens
    // elsewhere, plus learned positional embeddings for all n positions.
    let reduced = linear(&enc_out, &params.owned2("dec.reduce.w"), &params.owned1("dec.reduce.b"));
    let dd = cfg.decoder_dim;
    let mask_token = params.owned1("dec.mask_token");
    let pos = params.owned2("dec.pos");
    let mut dec_in = Array2::zeros((n, dd));
    for row in dec_in.rows_mut() {
        let mut row = row;
        row.assign(&mask_token);
    }
    for (i, &tok) in plan.visible.iter().enumerate() {
        dec_in.row_mut(tok).assign(&reduced.row(i));
    }
    dec_in += &pos;

    let mut tdec = Vec::with_capacity(cfg.teacher_decoder_blocks);
    let mut t_feat = dec_in;
    for i in 0..cfg.teacher_decoder_blocks {
        let cache = block_forward(params, &format!("tdec.{i}"), &t_feat, heads);
        t_feat = cache.out.clone();
        tdec.push(cache);
    }
    let a1 = tdec[0].out.clone();
    let teacher_out = linear(&t_feat, &params.owned2("thead.w"), &params.owned1("thead.b"));

    let mut sdec = Vec::with_capacity(cfg.student_decoder_blocks);
    let mut s_feat = a1.clone();
    for i in 0..cfg.student_decoder_blocks {
        let cache = block_forward(params, &format!("sdec.{i}"), &s_feat, heads);
        s_feat = cache.out.clone();
        sdec.push(cache);
    }
    let student_out = linear(&s_feat, &params.owned2("shead.w"), &params.owned1("shead.b"));

    Ok(ForwardCache {
        plan: plan.clone(),
        patches,
        enc,
        enc_out,
        tdec,
        t_feat,
        a1,
        sdec,
        s_feat,
        teacher_out,
        student_out,
    })
}

/// Evaluation-mode forward: teacher and student reconstructions as patch
/// grids with `c + 1` channels when the anomaly map is predicted.
pub fn forward(
    params: &ModelParams,
    frame: &Frame,
    plan: &MaskPlan,
) -> Result<(PatchGrid, PatchGrid), ModelError> {
    let cache = forward_cached(params, &frame.pixels, plan)?;
    let cfg = &params.config;
    let grid = (
        cfg.frame_height / cfg.patch_size,
        cfg.frame_width / cfg.patch_size,
    );
    let wrap = |patches: Array2<f64>| PatchGrid {
        patches,
        grid,
        patch_size: cfg.patch_size,
        channels: cfg.output_channels(),
    };
    Ok((wrap(cache.teacher_out), wrap(cache.student_out)))
}

/// Backprop a teacher-output gradient into all stage-1 parameters
/// (shared encoder + teacher decoder); student entries stay zero.
pub fn backward_teacher(
    params: &ModelParams,
    cache: &ForwardCache,
    d_teacher_out: &Array2<f64>,
) -> Vec<f64> {
    let cfg = &params.config;
    let heads = cfg.attention_heads;
    let mut grads = GradStore::zeros(&params.layout);

    let (mut d_feat, dw, db) = linear_backward(&cache.t_feat, &params.owned2("thead.w"), d_teacher_out);
    grads.add2("thead.w", &dw);
    grads.add1("thead.b", &db);

    for i in (0..cfg.teacher_decoder_blocks).rev() {
        d_feat = block_backward(params, &mut grads, &format!("tdec.{i}"), &cache.tdec[i], &d_feat, heads);
    }
    let d_dec_in = d_feat;

    grads.add2("dec.pos", &d_dec_in);
    let n = cache.plan.n;
    let dd = cfg.decoder_dim;
    let mut d_mask_token = Array1::zeros(dd);
    for &tok in &cache.plan.masked {
        d_mask_token += &d_dec_in.row(tok);
    }
    grads.add1("dec.mask_token", &d_mask_token);

    let nv = cache.plan.visible.len();
    let mut d_reduced = Array2::zeros((nv, dd));
    for (i, &tok) in cache.plan.visible.iter().enumerate() {
        d_reduced.row_mut(i).assign(&d_dec_in.row(tok));
    }
    let (mut d_enc, dw, db) = linear_backward(&cache.enc_out, &params.owned2("dec.reduce.w"), &d_reduced);
    grads.add2("dec.reduce.w", &dw);
    grads.add1("dec.reduce.b", &db);

    for i in (0..cfg.encoder_blocks).rev() {
        d_enc = block_backward(params, &mut grads, &format!("enc.{i}"), &cache.enc[i], &d_enc, heads);
    }

    // Scatter visible-token gradients into the full embedding grid; the
    // masked tokens' embeddings were dropped and receive none.
    let de = cfg.encoder_dim;
    let mut d_embed_full = Array2::zeros((n, de));
    for (i, &tok) in cache.plan.visible.iter().enumerate() {
        d_embed_full.row_mut(tok).assign(&d_enc.row(i));
    }
    let (_, dw, db) = linear_backward(&cache.patches, &params.owned2("embed.w"), &d_embed_full);
    grads.add2("embed.w", &dw);
    grads.add1("embed.b", &db);

    grads.data
}

/// Backprop a student-output gradient into the student decoder parameters
/// only; gradients stop at the teacher's first-block activations.
pub fn backward_student(
    params: &ModelParams,
    cache: &ForwardCache,
    d_student_out: &Array2<f64>,
) -> Vec<f64> {
    let cfg = &params.config;
    let heads = cfg.attention_heads;
    let mut grads = GradStore::zeros(&params.layout);
    let (mut d_feat, dw, db) = linear_backward(&cache.s_feat, &params.owned2("shead.w"), d_student_out);
    grads.add2("shead.w", &dw);
    grads.add1("shead.b", &db);
    for i in (0..cfg.student_decoder_blocks).rev() {
        d_feat = block_backward(params, &mut grads, &format!("sdec.{i}"), &cache.sdec[i], &d_feat, heads);
    }
    // d_feat is the gradient at a1, deliberately discarded (frozen backbone).
    let _ = d_feat;
    let _ = &cache.a1;
    grads.data
}

/// Analytic multiply-add count (2 FLOPs each) for one full forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsBreakdown {
    pub embed: f64,
    pub encoder: f64,
    pub decoder: f64,
    pub heads: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.embed + self.encoder + self.decoder + self.heads
    }
}

fn block_flops(tokens: f64, dim: f64) -> f64 {
    let ff = (FF_MULT as f64) * dim;
    // q/k/v/out projections, attention score + apply matmuls, feed-forward.
    2.0 * tokens * dim * dim * 4.0 + 4.0 * tokens * tokens * dim + 2.0 * 2.0 * tokens * dim * ff
}

/// Closed-form FLOPs per frame: full-frame embedding, encoder at the
/// visible-token count, both decoders at all n tokens.
pub fn estimate_flops(cfg: &ExperimentConfig) -> FlopsBreakdown {
    let n = cfg.token_count() as f64;
    let nv = cfg.visible_count(cfg.inference_mask_ratio) as f64;
    let pdim = (cfg.patch_size * cfg.patch_size * cfg.channels) as f64;
    let out_dim = (cfg.patch_size * cfg.patch_size * cfg.output_channels()) as f64;
    let de = cfg.encoder_dim as f64;
    let dd = cfg.decoder_dim as f64;
    let embed = 2.0 * n * pdim * de;
    let encoder = cfg.encoder_blocks as f64 * block_flops(nv, de);
    let decoder = (cfg.teacher_decoder_blocks + cfg.student_decoder_blocks) as f64
        * block_flops(n, dd)
        + 2.0 * nv * de * dd;
    let heads = 2.0 * 2.0 * n * dd * out_dim;
    FlopsBreakdown {
        embed,
        encoder,
        decoder,
        heads,
    }
}

const CHECKPOINT_MAGIC: &[u8; 6] = b"SDMAE\x01";

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `<base>.bin` (named parameter arrays) and `<base>.manifest`
/// (format version, config fingerprint, stage tag, seed).
pub fn save_checkpoint(
    params: &ModelParams,
    base: &Path,
    stage: &str,
    seed: u64,
) -> Result<(), ModelError> {
    let mut blob = Vec::with_capacity(params.data.len() * 8 + 1024);
    blob.extend_from_slice(CHECKPOINT_MAGIC);
    blob.extend_from_slice(&(params.layout.entries.len() as u32).to_le_bytes());
    for entry in &params.layout.entries {
        blob.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
        blob.extend_from_slice(entry.name.as_bytes());
        blob.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
        for &dim in &entry.shape {
            blob.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in &params.data[entry.offset..entry.offset + entry.len] {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin_path = base.with_extension("bin");
    std::fs::write(&bin_path, blob).map_err(|e| io_err(&bin_path, e))?;
    let manifest = format!(
        "format_version = 1\nfingerprint = {}\nstage = {}\nseed = {}\nparam_count = {}\n",
        params.fingerprint,
        stage,
        seed,
        params.count_parameters()
    );
    let manifest_path = base.with_extension("manifest");
    std::fs::write(&manifest_path, manifest).map_err(|e| io_err(&manifest_path, e))
}

/// Load a checkpoint and verify its fingerprint against `cfg`.
/// Returns the parameters plus the manifest's stage tag and seed.
pub fn load_checkpoint(
    base: &Path,
    cfg: &ExperimentConfig,
) -> Result<(ModelParams, String, u64), ModelError> {
    let manifest_path = base.with_extension("manifest");
    let manifest =
        std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut stage = String::new();
    let mut seed = 0u64;
    let mut fingerprint = String::new();
    for line in manifest.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "stage" => stage = v.trim().to_string(),
                "seed" => {
                    seed = v.trim().parse().map_err(|_| {
                        ModelError::CorruptCheckpoint("bad seed in manifest".into())
                    })?
                }
                "fingerprint" => fingerprint = v.trim().to_string(),
                _ => {}
            }
        }
    }
    let expected = config_fingerprint(cfg);
    if fingerprint != expected {
        return Err(ModelError::FingerprintMismatch {
            found: fingerprint,
            expected,
        });
    }

    let bin_path = base.with_extension("bin");
    let blob = std::fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let corrupt = |msg: &str| ModelError::CorruptCheckpoint(msg.into());
    if blob.len() < 10 || &blob[..6] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let layout = ParamLayout::from_config(cfg);
    let mut data = vec![0.0; layout.total()];
    let mut pos = 6;
    let read_u32 = |blob: &[u8], pos: &mut usize| -> Result<u32, ModelError> {
        if *pos + 4 > blob.len() {
            return Err(ModelError::CorruptCheckpoint("truncated".into()));
        }
        let v = u32::from_le_bytes(blob[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let n_entries = read_u32(&blob, &mut pos)? as usize;
    if n_entries != layout.entries.len() {
        return Err(corrupt("entry count mismatch"));
    }
    for entry in &layout.entries {
        let name_len = read_u32(&blob, &mut pos)? as usize;
        if pos + name_len > blob.len() {
            return Err(corrupt("truncated name"));
        }
        let name = std::str::from_utf8(&blob[pos..pos + name_len])
            .map_err(|_| corrupt("bad name"))?;
        if name != entry.name {
            return Err(corrupt(&format!("unexpected parameter {name}")));
        }
        pos += name_len;
        let ndim = read_u32(&blob, &mut pos)? as usize;
        if ndim != entry.shape.len() {
            return Err(corrupt("rank mismatch"));
        }
        for &dim in &entry.shape {
            if pos + 8 > blob.len() {
                return Err(corrupt("truncated dims"));
            }
            let v = u64::from_le_bytes(blob[pos..pos + 8].try_into().unwrap());
            pos += 8;
            if v as usize != dim {
                return Err(corrupt("shape mismatch"));
            }
        }
        if pos + entry.len * 8 > blob.len() {
            return Err(corrupt("truncated data"));
        }
        for i in 0..entry.len {
            data[entry.offset + i] =
                f64::from_le_bytes(blob[pos..pos + 8].try_into().unwrap());
            pos += 8;
        }
    }
    Ok((
        ModelParams {
            config: cfg.clone(),
            fingerprint: expected,
            layout,
            data,
        },
        stage,
        seed,
    ))
}
