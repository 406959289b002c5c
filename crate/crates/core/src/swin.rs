//! Encoder: patch embedding, windowed scaled-cosine self-attention with a
//! learnable per-offset relative position bias, residual pre-norm blocks with
//! alternating shifted windows, and 2x2 patch merging.
//!
//! Token grids are `[H, W, C]`; stage `s` runs at grid `(image/patch) >> s`
//! with width `embed_dim << s`.

use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use crate::error::{ConfigError, TensorError};
use crate::graph::Var;
use crate::params::{randn_tensor, ModelCtx, ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Minimum learnable attention temperature.
pub const TAU_FLOOR: f64 = 0.01;
/// Additive mask applied to cross-region pairs in shifted windows.
pub const SHIFT_MASK_VALUE: f64 = -100.0;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub stage_depths: Vec<usize>,
    pub heads_per_stage: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    /// CPU-tractable default at 256x256 (stage grids 64, 32, 16).
    pub fn default_256() -> Self {
        Self {
            image_size: 256,
            patch_size: 4,
            embed_dim: 48,
            stage_depths: vec![2, 2, 2],
            heads_per_stage: vec![3, 6, 12],
            window_size: 8,
            mlp_ratio: 4.0,
        }
    }

    /// Documented toy configuration used by the test suite (64x64 inputs,
    /// stage grids 16 and 8).
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            embed_dim: 16,
            stage_depths: vec![2, 2],
            heads_per_stage: vec![2, 4],
            window_size: 4,
            mlp_ratio: 2.0,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Token grid side length at stage `s`.
    pub fn grid(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> stage
    }

    /// Channel width at stage `s`.
    pub fn width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.patch_size == 0 || self.image_size == 0 || self.embed_dim == 0 {
            return fail("image_size, patch_size and embed_dim must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.stage_depths.is_empty() {
            return fail("stage_depths must be non-empty".into());
        }
        if self.heads_per_stage.len() != self.stage_depths.len() {
            return fail(format!(
                "heads_per_stage has {} entries for {} stages",
                self.heads_per_stage.len(),
                self.stage_depths.len()
            ));
        }
        if self.mlp_ratio <= 0.0 {
            return fail("mlp_ratio must be positive".into());
        }
        for s in 0..self.stages() {
            let grid = (self.image_size / self.patch_size) >> s;
            if grid == 0 || ((self.image_size / self.patch_size) % (1 << s)) != 0 {
                return fail(format!("stage {s} grid collapses to zero"));
            }
            if grid % self.window_size != 0 {
                return fail(format!(
                    "stage {s} grid {grid} not divisible by window {}",
                    self.window_size
                ));
            }
            let c = self.width(s);
            let heads = self.heads_per_stage[s];
            if heads == 0 || c % heads != 0 {
                return fail(format!("stage {s} width {c} not divisible by {heads} heads"));
            }
        }
        Ok(())
    }
}

/// Windowed scaled-cosine attention parameters. `log_tau` stores the
/// temperature in log space; the effective tau is `max(exp(log_tau), 0.01)`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub log_tau: ParamId,
    pub bias_table: ParamId,
    pub heads: usize,
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct SwinBlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub attn: AttentionParams,
    pub mlp: MlpParams,
    /// Cyclic shift applied before partitioning (0 or window/2).
    pub shift: usize,
}

#[derive(Debug, Clone)]
pub struct PatchMergeParams {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub proj: ParamId,
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub blocks: Vec<SwinBlockParams>,
    pub merge: Option<PatchMergeParams>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub patch_ln_g: ParamId,
    pub patch_ln_b: ParamId,
    pub stages: Vec<StageParams>,
}

const INIT_STD: f64 = 0.02;
const TAU_INIT: f64 = 0.2;

pub fn init_attention<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    heads: usize,
    window: usize,
) -> AttentionParams {
    let table_rows = (2 * window - 1) * (2 * window - 1);
    AttentionParams {
        w_q: ps.register(format!("{prefix}.wq"), randn_tensor(rng, &[c, c], INIT_STD)),
        b_q: ps.register(format!("{prefix}.bq"), Tensor::zeros(&[c])),
        w_k: ps.register(format!("{prefix}.wk"), randn_tensor(rng, &[c, c], INIT_STD)),
        b_k: ps.register(format!("{prefix}.bk"), Tensor::zeros(&[c])),
        w_v: ps.register(format!("{prefix}.wv"), randn_tensor(rng, &[c, c], INIT_STD)),
        b_v: ps.register(format!("{prefix}.bv"), Tensor::zeros(&[c])),
        w_o: ps.register(format!("{prefix}.wo"), randn_tensor(rng, &[c, c], INIT_STD)),
        b_o: ps.register(format!("{prefix}.bo"), Tensor::zeros(&[c])),
        log_tau: ps.register(
            format!("{prefix}.log_tau"),
            Tensor::full(&[heads], T::from_f64(TAU_INIT.ln())),
        ),
        bias_table: ps.register(
            format!("{prefix}.bias_table"),
            randn_tensor(rng, &[table_rows, heads], INIT_STD),
        ),
        heads,
        window,
    }
}

pub fn init_swin_block<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    heads: usize,
    window: usize,
    shift: usize,
    mlp_ratio: f64,
) -> SwinBlockParams {
    let hidden = ((c as f64) * mlp_ratio).round().max(1.0) as usize;
    SwinBlockParams {
        ln1_g: ps.register(format!("{prefix}.ln1_g"), Tensor::ones(&[c])),
        ln1_b: ps.register(format!("{prefix}.ln1_b"), Tensor::zeros(&[c])),
        ln2_g: ps.register(format!("{prefix}.ln2_g"), Tensor::ones(&[c])),
        ln2_b: ps.register(format!("{prefix}.ln2_b"), Tensor::zeros(&[c])),
        attn: init_attention(ps, rng, &format!("{prefix}.attn"), c, heads, window),
        mlp: MlpParams {
            w1: ps.register(
                format!("{prefix}.mlp.w1"),
                randn_tensor(rng, &[c, hidden], INIT_STD),
            ),
            b1: ps.register(format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden])),
            w2: ps.register(
                format!("{prefix}.mlp.w2"),
                randn_tensor(rng, &[hidden, c], INIT_STD),
            ),
            b2: ps.register(format!("{prefix}.mlp.b2"), Tensor::zeros(&[c])),
        },
        shift,
    }
}

pub fn init_encoder<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    cfg: &EncoderConfig,
) -> EncoderParams {
    let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
    let c0 = cfg.embed_dim;
    let mut stages = Vec::new();
    for s in 0..cfg.stages() {
        let c = cfg.width(s);
        let heads = cfg.heads_per_stage[s];
        let blocks = (0..cfg.stage_depths[s])
            .map(|b| {
                let shift = if b % 2 == 1 { cfg.window_size / 2 } else { 0 };
                init_swin_block(
                    ps,
                    rng,
                    &format!("enc.s{s}.b{b}"),
                    c,
                    heads,
                    cfg.window_size,
                    shift,
                    cfg.mlp_ratio,
                )
            })
            .collect();
        let merge = if s + 1 < cfg.stages() {
            Some(PatchMergeParams {
                ln_g: ps.register(format!("enc.s{s}.merge.ln_g"), Tensor::ones(&[4 * c])),
                ln_b: ps.register(format!("enc.s{s}.merge.ln_b"), Tensor::zeros(&[4 * c])),
                proj: ps.register(
                    format!("enc.s{s}.merge.proj"),
                    randn_tensor(rng, &[4 * c, 2 * c], INIT_STD),
                ),
            })
        } else {
            None
        };
        stages.push(StageParams { blocks, merge });
    }
    EncoderParams {
        patch_w: ps.register("enc.patch.w", randn_tensor(rng, &[patch_dim, c0], INIT_STD)),
        patch_b: ps.register("enc.patch.b", Tensor::zeros(&[c0])),
        patch_ln_g: ps.register("enc.patch.ln_g", Tensor::ones(&[c0])),
        patch_ln_b: ps.register("enc.patch.ln_b", Tensor::zeros(&[c0])),
        stages,
    }
}

/// Relative-position bias row index for every `(i, j)` token pair of a
/// `window x window` grid, into the `(2w-1)^2` offset table.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / window, i % window);
        for j in 0..t {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Split a `[H,W,C]` grid into non-overlapping windows `[nW, window^2, C]`.
pub fn window_partition<T: Scalar>(
    cx: &mut ModelCtx<T>,
    x: Var,
    window: usize,
) -> Result<Var, TensorError> {
    let (h, w, c) = grid_dims(cx, x)?;
    if h % window != 0 || w % window != 0 {
        return Err(TensorError::InvalidShape {
            shape: vec![h, w, c],
            reason: format!("grid not divisible by window {window}"),
        });
    }
    let (nh, nw) = (h / window, w / window);
    let r = cx.g.reshape(x, vec![nh, window, nw, window, c])?;
    let p = cx.g.permute(r, &[0, 2, 1, 3, 4])?;
    cx.g.reshape(p, vec![nh * nw, window * window, c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(
    cx: &mut ModelCtx<T>,
    windows: Var,
    window: usize,
    h: usize,
    w: usize,
) -> Result<Var, TensorError> {
    let shape = cx.g.shape(windows).to_vec();
    let c = match *shape {
        [nw_count, t, c] if t == window * window && nw_count == (h / window) * (w / window) => c,
        _ => {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "window_reverse shape mismatch".into(),
            })
        }
    };
    let (nh, nw) = (h / window, w / window);
    let r = cx.g.reshape(windows, vec![nh, nw, window, window, c])?;
    let p = cx.g.permute(r, &[0, 2, 1, 3, 4])?;
    cx.g.reshape(p, vec![h, w, c])
}

fn grid_dims<T: Scalar>(cx: &ModelCtx<T>, x: Var) -> Result<(usize, usize, usize), TensorError> {
    match *cx.g.shape(x) {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(TensorError::InvalidShape {
            shape: cx.g.shape(x).to_vec(),
            reason: "expected [H,W,C] token grid".into(),
        }),
    }
}

/// Additive attention mask for shifted windows: `0` for pairs in the same
/// contiguous region, `-100` across region boundaries. `[nW, 1, T, T]`.
pub fn shift_attention_mask<T: Scalar>(
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
) -> Tensor<T> {
    let region_of = |v: usize, len: usize| -> usize {
        if v < len - window {
            0
        } else if v < len - shift {
            1
        } else {
            2
        }
    };
    let mut region = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            region[y * w + x] = region_of(y, h) * 3 + region_of(x, w);
        }
    }
    // group into windows
    let (nh, nw) = (h / window, w / window);
    let t = window * window;
    let mut win_region = vec![0usize; nh * nw * t];
    for wy in 0..nh {
        for wx in 0..nw {
            for iy in 0..window {
                for ix in 0..window {
                    let src = (wy * window + iy) * w + (wx * window + ix);
                    win_region[(wy * nw + wx) * t + iy * window + ix] = region[src];
                }
            }
        }
    }
    Tensor::from_fn(&[nh * nw, 1, t, t], |lin| {
        let j = lin % t;
        let i = (lin / t) % t;
        let n = lin / (t * t);
        if win_region[n * t + i] == win_region[n * t + j] {
            T::zero()
        } else {
            T::from_f64(SHIFT_MASK_VALUE)
        }
    })
}

/// Scaled cosine attention per window batch.
///
/// `q`, `k`, `v` are `[..., heads, T, d]`; scores are
/// `cos(q_i, k_j) / tau + B_ij` (+ optional additive mask), rows
/// softmax-normalized, output `weights @ v`. Norms are floored at 1e-8.
pub fn scaled_cosine_attention<T: Scalar>(
    cx: &mut ModelCtx<T>,
    q: Var,
    k: Var,
    v: Var,
    attn: &AttentionParams,
    mask: Option<Var>,
) -> Result<Var, TensorError> {
    let rank = cx.g.shape(q).len();
    if rank < 3 {
        return Err(TensorError::InvalidShape {
            shape: cx.g.shape(q).to_vec(),
            reason: "attention expects [..., heads, T, d]".into(),
        });
    }
    let t = cx.g.shape(q)[rank - 2];

    let qn = l2_normalize_last(cx, q)?;
    let kn = l2_normalize_last(cx, k)?;
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 2, rank - 1);
    let ktn = cx.g.permute(kn, &axes)?;
    let cos = cx.g.matmul(qn, ktn)?;

    // tau: [heads] -> [heads,1,1], exp then floor at 0.01
    let log_tau = cx.param(attn.log_tau);
    let tau = cx.g.exp(log_tau);
    let tau = cx.g.clamp_min(tau, TAU_FLOOR);
    let tau = cx.g.reshape(tau, vec![attn.heads, 1, 1])?;
    let mut scores = cx.g.div(cos, tau)?;

    // relative position bias: [(2w-1)^2, heads] -> [heads, T, T]
    let table = cx.param(attn.bias_table);
    let idx = relative_position_index(attn.window);
    debug_assert_eq!(idx.len(), t * t, "window/T mismatch in attention");
    let bias = cx.g.index_select(table, &idx)?;
    let bias = cx.g.reshape(bias, vec![t, t, attn.heads])?;
    let bias = cx.g.permute(bias, &[2, 0, 1])?;
    scores = cx.g.add(scores, bias)?;

    if let Some(m) = mask {
        scores = cx.g.add(scores, m)?;
    }
    let weights = cx.g.softmax(scores, rank - 1)?;
    cx.g.matmul(weights, v)
}

fn l2_normalize_last<T: Scalar>(cx: &mut ModelCtx<T>, x: Var) -> Result<Var, TensorError> {
    let rank = cx.g.shape(x).len();
    let sq = cx.g.mul(x, x)?;
    let sumsq = cx.g.sum_axis(sq, rank - 1, true)?;
    let floored = cx.g.clamp_min(sumsq, 1e-16);
    let norm = cx.g.sqrt(floored);
    cx.g.div(x, norm)
}

/// One pre-norm residual block: `x + Attn(LN(x))` then `+ MLP(LN(.))`,
/// with cyclic shift and cross-boundary masking when `shift > 0`.
pub fn swin_block<T: Scalar>(
    cx: &mut ModelCtx<T>,
    x: Var,
    p: &SwinBlockParams,
) -> Result<Var, TensorError> {
    let (h, w, c) = grid_dims(cx, x)?;
    let window = p.attn.window;
    let heads = p.attn.heads;
    let d = c / heads;
    let t = window * window;

    let ln1_g = cx.param(p.ln1_g);
    let ln1_b = cx.param(p.ln1_b);
    let mut y = cx.g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
    if p.shift > 0 {
        y = cx.g.roll2d(y, -(p.shift as isize), -(p.shift as isize))?;
    }
    let win = window_partition(cx, y, window)?;
    let n_windows = cx.g.shape(win)[0];
    let flat = cx.g.reshape(win, vec![n_windows * t, c])?;

    let project = |cx: &mut ModelCtx<T>, w_id, b_id| -> Result<Var, TensorError> {
        let wv = cx.param(w_id);
        let bv = cx.param(b_id);
        let proj = cx.g.linear_rows(flat, wv, Some(bv))?;
        let r = cx.g.reshape(proj, vec![n_windows, t, heads, d])?;
        cx.g.permute(r, &[0, 2, 1, 3])
    };
    let q = project(cx, p.attn.w_q, p.attn.b_q)?;
    let k = project(cx, p.attn.w_k, p.attn.b_k)?;
    let v = project(cx, p.attn.w_v, p.attn.b_v)?;

    let mask = if p.shift > 0 {
        Some(cx.g.constant(shift_attention_mask(h, w, window, p.shift)))
    } else {
        None
    };
    let attn_out = scaled_cosine_attention(cx, q, k, v, &p.attn, mask)?;

    let merged = cx.g.permute(attn_out, &[0, 2, 1, 3])?;
    let merged = cx.g.reshape(merged, vec![n_windows * t, c])?;
    let wo = cx.param(p.attn.w_o);
    let bo = cx.param(p.attn.b_o);
    let out = cx.g.linear_rows(merged, wo, Some(bo))?;
    let out = cx.g.reshape(out, vec![n_windows, t, c])?;
    let mut back = window_reverse(cx, out, window, h, w)?;
    if p.shift > 0 {
        back = cx.g.roll2d(back, p.shift as isize, p.shift as isize)?;
    }
    let x = cx.g.add(x, back)?;

    // MLP branch
    let ln2_g = cx.param(p.ln2_g);
    let ln2_b = cx.param(p.ln2_b);
    let z = cx.g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
    let z = cx.g.reshape(z, vec![h * w, c])?;
    let w1 = cx.param(p.mlp.w1);
    let b1 = cx.param(p.mlp.b1);
    let z = cx.g.linear_rows(z, w1, Some(b1))?;
    let z = cx.g.relu(z);
    let w2 = cx.param(p.mlp.w2);
    let b2 = cx.param(p.mlp.b2);
    let z = cx.g.linear_rows(z, w2, Some(b2))?;
    let z = cx.g.reshape(z, vec![h, w, c])?;
    cx.g.add(x, z)
}

/// Concatenate each 2x2 neighbourhood (4C), layer-norm, project to 2C.
pub fn patch_merging<T: Scalar>(
    cx: &mut ModelCtx<T>,
    x: Var,
    p: &PatchMergeParams,
) -> Result<Var, TensorError> {
    let (h, w, c) = grid_dims(cx, x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidShape {
            shape: vec![h, w, c],
            reason: "patch merging needs even grid dims".into(),
        });
    }
    let r = cx.g.reshape(x, vec![h / 2, 2, w / 2, 2, c])?;
    let p2 = cx.g.permute(r, &[0, 2, 1, 3, 4])?;
    let gathered = cx.g.reshape(p2, vec![h / 2, w / 2, 4 * c])?;
    let ln_g = cx.param(p.ln_g);
    let ln_b = cx.param(p.ln_b);
    let normed = cx.g.layer_norm(gathered, ln_g, ln_b, LN_EPS)?;
    let flat = cx.g.reshape(normed, vec![(h / 2) * (w / 2), 4 * c])?;
    let proj = cx.param(p.proj);
    let out = cx.g.matmul(flat, proj)?;
    cx.g.reshape(out, vec![h / 2, w / 2, 2 * c])
}

/// Non-overlapping patches, linearly projected to `C` and layer-normed.
/// `image[3,H,W] -> [N_tokens, C]` with `N = (H/patch)^2`.
pub fn patch_embed<T: Scalar>(
    cx: &mut ModelCtx<T>,
    image: Var,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<Var, TensorError> {
    let (ch, h, w) = match *cx.g.shape(image) {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(TensorError::InvalidShape {
                shape: cx.g.shape(image).to_vec(),
                reason: "expected [3,H,W] image".into(),
            })
        }
    };
    if ch != 3 || h != cfg.image_size || w != cfg.image_size {
        return Err(TensorError::InvalidShape {
            shape: vec![ch, h, w],
            reason: format!("expected [3,{0},{0}] image", cfg.image_size),
        });
    }
    let p = cfg.patch_size;
    let gp = h / p;
    let r = cx.g.reshape(image, vec![3, gp, p, gp, p])?;
    let perm = cx.g.permute(r, &[1, 3, 0, 2, 4])?;
    let flat = cx.g.reshape(perm, vec![gp * gp, 3 * p * p])?;
    let wv = cx.param(enc.patch_w);
    let bv = cx.param(enc.patch_b);
    let tokens = cx.g.linear_rows(flat, wv, Some(bv))?;
    let ln_g = cx.param(enc.patch_ln_g);
    let ln_b = cx.param(enc.patch_ln_b);
    cx.g.layer_norm(tokens, ln_g, ln_b, LN_EPS)
}

/// Full encoder path. Returns the bottleneck grid and every stage's
/// pre-merge feature map (the last entry aliases the bottleneck); the
/// attention path consumes these in place of skip connections.
pub fn encoder_forward<T: Scalar>(
    cx: &mut ModelCtx<T>,
    image: Var,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<(Var, Vec<Var>), TensorError> {
    let tokens = patch_embed(cx, image, enc, cfg)?;
    let g0 = cfg.grid(0);
    let mut x = cx.g.reshape(tokens, vec![g0, g0, cfg.embed_dim])?;
    let mut stage_feats = Vec::with_capacity(cfg.stages());
    for stage in &enc.stages {
        for block in &stage.blocks {
            x = swin_block(cx, x, block)?;
        }
        stage_feats.push(x);
        if let Some(merge) = &stage.merge {
            x = patch_merging(cx, x, merge)?;
        }
    }
    Ok((*stage_feats.last().expect("at least one stage"), stage_feats))
}
