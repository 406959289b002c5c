//! Decoder: patch expanding, the gated attention path that replaces skip
//! connections (channel + spatial gates, modulated by a GRU whose hidden
//! state is carried deepest-to-shallowest across levels), fusion, and
//! decoder-side residual blocks.

use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::graph::Var;
use crate::params::{randn_tensor, ModelCtx, ParamId, ParamSet};
use crate::swin::{init_swin_block, swin_block, EncoderConfig, SwinBlockParams};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

/// Update/reset-gated recurrence over concatenated `[h_{t-1}, x_t]`.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_n: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_n: ParamId,
    pub hidden: usize,
    pub input: usize,
}

pub fn init_gru<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    hidden: usize,
    input: usize,
) -> GruParams {
    let cols = hidden + input;
    GruParams {
        w_z: ps.register(format!("{prefix}.wz"), randn_tensor(rng, &[hidden, cols], INIT_STD)),
        w_r: ps.register(format!("{prefix}.wr"), randn_tensor(rng, &[hidden, cols], INIT_STD)),
        w_n: ps.register(format!("{prefix}.wn"), randn_tensor(rng, &[hidden, cols], INIT_STD)),
        b_z: ps.register(format!("{prefix}.bz"), Tensor::zeros(&[hidden])),
        b_r: ps.register(format!("{prefix}.br"), Tensor::zeros(&[hidden])),
        b_n: ps.register(format!("{prefix}.bn"), Tensor::zeros(&[hidden])),
        hidden,
        input,
    }
}

/// One GRU step:
/// `z = sigmoid(Wz [h,x] + bz)`, `r = sigmoid(Wr [h,x] + br)`,
/// `n = tanh(Wn [r*h, x] + bn)`, `h' = (1-z)*n + z*h`.
pub fn gru_cell<T: Scalar>(
    cx: &mut ModelCtx<T>,
    x: Var,
    h_prev: Var,
    p: &GruParams,
) -> Result<Var, TensorError> {
    if cx.g.shape(x) != [p.input] || cx.g.shape(h_prev) != [p.hidden] {
        return Err(TensorError::ShapeMismatch {
            op: "gru_cell",
            lhs: cx.g.shape(h_prev).to_vec(),
            rhs: cx.g.shape(x).to_vec(),
        });
    }
    let hx = cx.g.concat(&[h_prev, x], 0)?;
    let wz = cx.param(p.w_z);
    let bz = cx.param(p.b_z);
    let z_lin = cx.g.linear_vec(wz, hx, Some(bz))?;
    let z = cx.g.sigmoid(z_lin);
    let wr = cx.param(p.w_r);
    let br = cx.param(p.b_r);
    let r_lin = cx.g.linear_vec(wr, hx, Some(br))?;
    let r = cx.g.sigmoid(r_lin);
    let rh = cx.g.mul(r, h_prev)?;
    let rhx = cx.g.concat(&[rh, x], 0)?;
    let wn = cx.param(p.w_n);
    let bn = cx.param(p.b_n);
    let n_lin = cx.g.linear_vec(wn, rhx, Some(bn))?;
    let n = cx.g.tanh(n_lin);
    let one_minus_z = cx.g.one_minus(z);
    let a = cx.g.mul(one_minus_z, n)?;
    let b = cx.g.mul(z, h_prev)?;
    cx.g.add(a, b)
}

/// Gate parameters for one decoder level. The GRU input and hidden widths
/// both equal the level's channel count.
#[derive(Debug, Clone)]
pub struct AttentionGateParams {
    pub align_w: ParamId,
    pub align_b: ParamId,
    pub ch_fc1_w: ParamId,
    pub ch_fc1_b: ParamId,
    pub ch_fc2_w: ParamId,
    pub ch_fc2_b: ParamId,
    pub in_proj_w: ParamId,
    pub in_proj_b: ParamId,
    pub mod_w: ParamId,
    pub mod_b: ParamId,
    pub sp_w: ParamId,
    pub sp_b: ParamId,
    pub gru: GruParams,
    pub channels: usize,
}

pub fn init_attention_gate<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    spatial_kernel: usize,
) -> AttentionGateParams {
    let hidden = (c / 4).max(2);
    AttentionGateParams {
        align_w: ps.register(format!("{prefix}.align.w"), randn_tensor(rng, &[c, c], INIT_STD)),
        align_b: ps.register(format!("{prefix}.align.b"), Tensor::zeros(&[c])),
        ch_fc1_w: ps.register(
            format!("{prefix}.ch1.w"),
            randn_tensor(rng, &[hidden, c], INIT_STD),
        ),
        ch_fc1_b: ps.register(format!("{prefix}.ch1.b"), Tensor::zeros(&[hidden])),
        ch_fc2_w: ps.register(
            format!("{prefix}.ch2.w"),
            randn_tensor(rng, &[c, hidden], INIT_STD),
        ),
        ch_fc2_b: ps.register(format!("{prefix}.ch2.b"), Tensor::zeros(&[c])),
        in_proj_w: ps.register(
            format!("{prefix}.inproj.w"),
            randn_tensor(rng, &[c, c], INIT_STD),
        ),
        in_proj_b: ps.register(format!("{prefix}.inproj.b"), Tensor::zeros(&[c])),
        mod_w: ps.register(format!("{prefix}.mod.w"), randn_tensor(rng, &[c, c], INIT_STD)),
        mod_b: ps.register(format!("{prefix}.mod.b"), Tensor::zeros(&[c])),
        sp_w: ps.register(
            format!("{prefix}.sp.w"),
            randn_tensor(rng, &[1, 2, spatial_kernel, spatial_kernel], INIT_STD),
        ),
        sp_b: ps.register(format!("{prefix}.sp.b"), Tensor::zeros(&[1])),
        gru: init_gru(ps, rng, &format!("{prefix}.gru"), c, c),
        channels: c,
    }
}

/// Output of [`attention_gate`]: the gated encoder features and the advanced
/// GRU hidden state.
pub struct GateOutput {
    pub gated: Var,
    pub h_next: Var,
}

/// Gate encoder features with a channel gate (descriptor MLP, modulated by
/// `sigmoid(FC(h_next))`) and a spatial gate (7x7 conv over stacked
/// channel-mean/max planes of enc+dec). `enc`/`dec` are `[C,H,W]` with equal
/// spatial dims; `h_prev` must already have this level's hidden width.
pub fn attention_gate<T: Scalar>(
    cx: &mut ModelCtx<T>,
    enc: Var,
    dec: Var,
    h_prev: Var,
    p: &AttentionGateParams,
) -> Result<GateOutput, TensorError> {
    let (c, h, w) = match *cx.g.shape(enc) {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(TensorError::InvalidShape {
                shape: cx.g.shape(enc).to_vec(),
                reason: "attention_gate expects [C,H,W]".into(),
            })
        }
    };
    if cx.g.shape(dec) != [c, h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "attention_gate",
            lhs: vec![c, h, w],
            rhs: cx.g.shape(dec).to_vec(),
        });
    }

    let aw = cx.param(p.align_w);
    let ab = cx.param(p.align_b);
    let enc_aligned = cx.g.conv1x1(enc, aw, Some(ab))?;

    let desc_e = cx.g.global_avg_pool(enc_aligned)?;
    let desc_d = cx.g.global_avg_pool(dec)?;
    let desc = cx.g.add(desc_e, desc_d)?;

    let f1w = cx.param(p.ch_fc1_w);
    let f1b = cx.param(p.ch_fc1_b);
    let hid = cx.g.linear_vec(f1w, desc, Some(f1b))?;
    let hid = cx.g.relu(hid);
    let f2w = cx.param(p.ch_fc2_w);
    let f2b = cx.param(p.ch_fc2_b);
    let mlp_logit = cx.g.linear_vec(f2w, hid, Some(f2b))?;
    let a_mlp = cx.g.sigmoid(mlp_logit);

    // recurrent refinement: x_t = proj(GAP(enc')), modulates the channel gate
    let pw = cx.param(p.in_proj_w);
    let pb = cx.param(p.in_proj_b);
    let x_t = cx.g.linear_vec(pw, desc_e, Some(pb))?;
    let h_next = gru_cell(cx, x_t, h_prev, &p.gru)?;
    let mw = cx.param(p.mod_w);
    let mb = cx.param(p.mod_b);
    let mod_logit = cx.g.linear_vec(mw, h_next, Some(mb))?;
    let modulation = cx.g.sigmoid(mod_logit);
    let a_c = cx.g.mul(a_mlp, modulation)?;

    // spatial gate over enc'+dec
    let sum = cx.g.add(enc_aligned, dec)?;
    let mean_plane = cx.g.mean_axis(sum, 0, false)?;
    let max_plane = cx.g.max_axis(sum, 0, false)?;
    let mean_plane = cx.g.reshape(mean_plane, vec![1, h, w])?;
    let max_plane = cx.g.reshape(max_plane, vec![1, h, w])?;
    let planes = cx.g.concat(&[max_plane, mean_plane], 0)?;
    let sw = cx.param(p.sp_w);
    let sb = cx.param(p.sp_b);
    let sp_logit = cx.g.conv2d(planes, sw, Some(sb))?;
    let a_s = cx.g.sigmoid(sp_logit);

    let a_c_col = cx.g.reshape(a_c, vec![c, 1, 1])?;
    let gated = cx.g.mul(enc_aligned, a_c_col)?;
    let gated = cx.g.mul(gated, a_s)?;
    Ok(GateOutput { gated, h_next })
}

#[derive(Debug, Clone)]
pub struct DecoderLevelParams {
    pub expand_w: ParamId,
    pub expand_b: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub gate: AttentionGateParams,
    pub blocks: Vec<SwinBlockParams>,
    /// Maps the previous (deeper) level's hidden into this level's width;
    /// absent at the deepest level, which starts from zeros.
    pub adapter: Option<(ParamId, ParamId)>,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub levels: Vec<DecoderLevelParams>,
}

pub fn init_decoder<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    cfg: &EncoderConfig,
    spatial_kernel: usize,
) -> DecoderParams {
    let stages = cfg.stages();
    let mut levels = Vec::new();
    for level in 0..stages.saturating_sub(1) {
        // level 0 expands the bottleneck (stage S-1) up to stage S-2's grid
        let src_stage = stages - 1 - level;
        let c_in = cfg.width(src_stage);
        let c = c_in / 2;
        let heads = cfg.heads_per_stage[src_stage - 1];
        let prefix = format!("dec.l{level}");
        let blocks = (0..2)
            .map(|b| {
                let shift = if b % 2 == 1 { cfg.window_size / 2 } else { 0 };
                init_swin_block(
                    ps,
                    rng,
                    &format!("{prefix}.b{b}"),
                    c,
                    heads,
                    cfg.window_size,
                    shift,
                    cfg.mlp_ratio,
                )
            })
            .collect();
        let adapter = if level == 0 {
            None
        } else {
            let prev_c = cfg.width(src_stage + 1) / 2;
            Some((
                ps.register(
                    format!("{prefix}.hadapt.w"),
                    randn_tensor(rng, &[c, prev_c], INIT_STD),
                ),
                ps.register(format!("{prefix}.hadapt.b"), Tensor::zeros(&[c])),
            ))
        };
        levels.push(DecoderLevelParams {
            expand_w: ps.register(
                format!("{prefix}.expand.w"),
                randn_tensor(rng, &[c_in, 2 * c_in], INIT_STD),
            ),
            expand_b: ps.register(format!("{prefix}.expand.b"), Tensor::zeros(&[2 * c_in])),
            fuse_w: ps.register(
                format!("{prefix}.fuse.w"),
                randn_tensor(rng, &[c, 2 * c], INIT_STD),
            ),
            fuse_b: ps.register(format!("{prefix}.fuse.b"), Tensor::zeros(&[c])),
            gate: init_attention_gate(ps, rng, &format!("{prefix}.gate"), c, spatial_kernel),
            blocks,
            adapter,
            channels: c,
        });
    }
    DecoderParams { levels }
}

/// Linear projection to `2C` followed by pixel-shuffle: `[H,W,C]` ->
/// `[2H,2W,C/2]`, the exact shape inverse of patch merging.
pub fn patch_expand<T: Scalar>(
    cx: &mut ModelCtx<T>,
    x: Var,
    proj_w: ParamId,
    proj_b: ParamId,
) -> Result<Var, TensorError> {
    let (h, w, c) = match *cx.g.shape(x) {
        [h, w, c] => (h, w, c),
        _ => {
            return Err(TensorError::InvalidShape {
                shape: cx.g.shape(x).to_vec(),
                reason: "patch_expand expects [H,W,C]".into(),
            })
        }
    };
    if c % 2 != 0 {
        return Err(TensorError::InvalidShape {
            shape: vec![h, w, c],
            reason: "patch_expand needs even channel count".into(),
        });
    }
    let flat = cx.g.reshape(x, vec![h * w, c])?;
    let wv = cx.param(proj_w);
    let bv = cx.param(proj_b);
    let up = cx.g.linear_rows(flat, wv, Some(bv))?;
    let grid = cx.g.reshape(up, vec![h, w, 2, 2, c / 2])?;
    let shuffled = cx.g.permute(grid, &[0, 2, 1, 3, 4])?;
    cx.g.reshape(shuffled, vec![2 * h, 2 * w, c / 2])
}

/// Bookkeeping from a decoder pass, used by the hidden-state invariants.
pub struct DecoderTrace {
    pub gru_updates: usize,
    pub level_hiddens: Vec<Var>,
}

/// Full decoder: per level (deepest to shallowest) expand, gate against the
/// matching encoder stage, fuse (concat + 1x1 projection), then two blocks.
/// `bottleneck` and `stage_feats` are `[H,W,C]` grids from the encoder; the
/// result is a `[C,H,W]` feature map at the first stage's resolution.
pub fn decoder_forward<T: Scalar>(
    cx: &mut ModelCtx<T>,
    bottleneck: Var,
    stage_feats: &[Var],
    params: &DecoderParams,
) -> Result<(Var, DecoderTrace), TensorError> {
    let stages = stage_feats.len();
    if params.levels.len() + 1 != stages {
        return Err(TensorError::InvalidShape {
            shape: vec![stages],
            reason: format!(
                "decoder has {} levels for {} encoder stages",
                params.levels.len(),
                stages
            ),
        });
    }
    let mut x = bottleneck;
    let mut h_state: Option<Var> = None;
    let mut level_hiddens = Vec::new();
    for (level, lp) in params.levels.iter().enumerate() {
        x = patch_expand(cx, x, lp.expand_w, lp.expand_b)?;
        let enc = stage_feats[stages - 2 - level];
        let (gh, gw, gc) = match *cx.g.shape(x) {
            [h, w, c] => (h, w, c),
            _ => unreachable!("patch_expand returns a grid"),
        };
        if cx.g.shape(enc) != [gh, gw, gc] {
            return Err(TensorError::ShapeMismatch {
                op: "decoder_forward",
                lhs: vec![gh, gw, gc],
                rhs: cx.g.shape(enc).to_vec(),
            });
        }
        let enc_chw = cx.g.permute(enc, &[2, 0, 1])?;
        let dec_chw = cx.g.permute(x, &[2, 0, 1])?;
        let h_in = match h_state {
            None => cx.g.constant(Tensor::zeros(&[lp.gate.gru.hidden])),
            Some(h) => match &lp.adapter {
                Some((aw, ab)) => {
                    let awv = cx.param(*aw);
                    let abv = cx.param(*ab);
                    cx.g.linear_vec(awv, h, Some(abv))?
                }
                None => h,
            },
        };
        let gate_out = attention_gate(cx, enc_chw, dec_chw, h_in, &lp.gate)?;
        let fused = cx.g.concat(&[gate_out.gated, dec_chw], 0)?;
        let fw = cx.param(lp.fuse_w);
        let fb = cx.param(lp.fuse_b);
        let fused = cx.g.conv1x1(fused, fw, Some(fb))?;
        x = cx.g.permute(fused, &[1, 2, 0])?;
        for block in &lp.blocks {
            x = swin_block(cx, x, block)?;
        }
        h_state = Some(gate_out.h_next);
        level_hiddens.push(gate_out.h_next);
    }
    let out = cx.g.permute(x, &[2, 0, 1])?;
    Ok((
        out,
        DecoderTrace {
            gru_updates: level_hiddens.len(),
            level_hiddens,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::swin::{encoder_forward, init_encoder};
    use rand::SeedableRng;

    #[test]
    fn gru_zero_weights_halve_hidden() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_gru(&mut ps, &mut rng, "g", 3, 2);
        ps.set(p.w_z, Tensor::zeros(&[3, 5]));
        ps.set(p.w_r, Tensor::zeros(&[3, 5]));
        ps.set(p.w_n, Tensor::zeros(&[3, 5]));
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::new(vec![2], vec![0.7, -1.1]).unwrap());
        let h = cx.g.leaf(Tensor::new(vec![3], vec![0.4, -0.8, 2.0]).unwrap());
        let h_next = gru_cell(&mut cx, x, h, &p).unwrap();
        assert_eq!(g.value(h_next).data(), &[0.2, -0.4, 1.0]);

        // zero hidden as well -> exactly zero
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::new(vec![2], vec![0.7, -1.1]).unwrap());
        let h0 = cx.g.leaf(Tensor::zeros(&[3]));
        let h_next = gru_cell(&mut cx, x, h0, &p).unwrap();
        assert_eq!(g.value(h_next).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gru_matches_scalar_loop_oracle() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = init_gru(&mut ps, &mut rng, "g", 4, 3);
        // fill with deterministic non-trivial weights
        let fill = |shape: &[usize], k: u64| {
            Tensor::from_fn(shape, |i| (((i as u64 * 37 + k * 13) % 41) as f64 - 20.0) / 25.0)
        };
        ps.set(p.w_z, fill(&[4, 7], 1));
        ps.set(p.w_r, fill(&[4, 7], 2));
        ps.set(p.w_n, fill(&[4, 7], 3));
        ps.set(p.b_z, fill(&[4], 4));
        ps.set(p.b_r, fill(&[4], 5));
        ps.set(p.b_n, fill(&[4], 6));
        let x_data = [0.3, -0.9, 1.4];
        let h_data = [0.1, 0.2, -0.5, 0.8];

        // independent scalar implementation
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let wz = ps.get(p.w_z).data();
        let wr = ps.get(p.w_r).data();
        let wn = ps.get(p.w_n).data();
        let bz = ps.get(p.b_z).data();
        let br = ps.get(p.b_r).data();
        let bn = ps.get(p.b_n).data();
        let hx: Vec<f64> = h_data.iter().chain(x_data.iter()).copied().collect();
        let mut zf = [0.0; 4];
        let mut rf = [0.0; 4];
        for i in 0..4 {
            let mut z = bz[i];
            let mut r = br[i];
            for j in 0..7 {
                z += wz[i * 7 + j] * hx[j];
                r += wr[i * 7 + j] * hx[j];
            }
            zf[i] = sig(z);
            rf[i] = sig(r);
        }
        let rhx: Vec<f64> = (0..4)
            .map(|j| rf[j] * h_data[j])
            .chain(x_data.iter().copied())
            .collect();
        let mut hf = [0.0; 4];
        for i in 0..4 {
            let mut n = bn[i];
            for j in 0..7 {
                n += wn[i * 7 + j] * rhx[j];
            }
            let n = n.tanh();
            hf[i] = (1.0 - zf[i]) * n + zf[i] * h_data[i];
        }

        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::new(vec![3], x_data.to_vec()).unwrap());
        let h = cx.g.leaf(Tensor::new(vec![4], h_data.to_vec()).unwrap());
        let got = gru_cell(&mut cx, x, h, &p).unwrap();
        for (a, b) in g.value(got).data().iter().zip(hf.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn gru_convexity_between_n_and_h() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_gru(&mut ps, &mut rng, "g", 6, 4);
        for seed in 0..4u64 {
            let mut g = Graph::<f64>::new();
            let mut cx = ModelCtx::new(&mut g, &ps);
            let x = cx.g.leaf(Tensor::from_fn(&[4], |i| ((i as u64 + seed) as f64).sin()));
            let h = cx.g.leaf(Tensor::from_fn(&[6], |i| ((i as u64 * 3 + seed) as f64).cos()));
            let h_next = gru_cell(&mut cx, x, h, &p).unwrap();
            // reconstruct n from h' = (1-z) n + z h: check h' within [min,max]
            let hv = g.value(h).data().to_vec();
            let hn = g.value(h_next).data().to_vec();
            // h' is a convex combination of n (|n|<1) and h, so it must lie
            // within [min(n,h), max(n,h)] ⊆ [min(-1,h), max(1,h)]
            for (a, &b) in hn.iter().zip(hv.iter()) {
                assert!(*a >= b.min(-1.0) - 1e-12 && *a <= b.max(1.0) + 1e-12);
            }
        }
    }

    fn toy_gate(c: usize) -> (ParamSet<f64>, AttentionGateParams) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = init_attention_gate(&mut ps, &mut rng, "gate", c, 7);
        (ps, p)
    }

    #[test]
    fn saturated_gates_pass_encoder_through() {
        let c = 6;
        let (mut ps, p) = toy_gate(c);
        // align = identity
        let mut ident = vec![0.0; c * c];
        for i in 0..c {
            ident[i * c + i] = 1.0;
        }
        ps.set(p.align_w, Tensor::new(vec![c, c], ident).unwrap());
        ps.set(p.align_b, Tensor::zeros(&[c]));
        // channel gate saturated
        ps.set(p.ch_fc2_w, Tensor::zeros(&[c, 2]));
        ps.set(p.ch_fc2_b, Tensor::full(&[c], 100.0));
        // GRU modulation saturated
        ps.set(p.mod_w, Tensor::zeros(&[c, c]));
        ps.set(p.mod_b, Tensor::full(&[c], 100.0));
        // spatial gate saturated
        ps.set(p.sp_w, Tensor::zeros(&[1, 2, 7, 7]));
        ps.set(p.sp_b, Tensor::full(&[1], 100.0));

        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let enc = cx.g.leaf(Tensor::from_fn(&[c, 4, 4], |i| (i as f64 * 0.31).sin()));
        let dec = cx.g.leaf(Tensor::from_fn(&[c, 4, 4], |i| (i as f64 * 0.17).cos()));
        let h0 = cx.g.leaf(Tensor::zeros(&[c]));
        let out = attention_gate(&mut cx, enc, dec, h0, &p).unwrap();
        assert_eq!(g.value(out.gated).data(), g.value(enc).data());
    }

    #[test]
    fn zero_channel_gate_annihilates() {
        let c = 6;
        let (mut ps, p) = toy_gate(c);
        ps.set(p.ch_fc2_w, Tensor::zeros(&[c, 2]));
        ps.set(p.ch_fc2_b, Tensor::full(&[c], -1000.0));
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let enc = cx.g.leaf(Tensor::from_fn(&[c, 4, 4], |i| (i as f64 * 0.31).sin()));
        let dec = cx.g.leaf(Tensor::from_fn(&[c, 4, 4], |i| (i as f64 * 0.17).cos()));
        let h0 = cx.g.leaf(Tensor::zeros(&[c]));
        let out = attention_gate(&mut cx, enc, dec, h0, &p).unwrap();
        assert!(g.value(out.gated).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_outputs_strictly_in_unit_interval() {
        let c = 6;
        let (ps, p) = toy_gate(c);
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let enc = cx.g.leaf(Tensor::from_fn(&[c, 4, 4], |i| (i as f64 * 0.9).sin() * 2.0));
        let dec = cx.g.leaf(Tensor::from_fn(&[c, 4, 4], |i| (i as f64 * 0.4).cos() * 2.0));
        let h0 = cx.g.leaf(Tensor::from_fn(&[c], |i| i as f64 * 0.1));
        let out = attention_gate(&mut cx, enc, dec, h0, &p).unwrap();
        // gated = enc' * a_c * a_s with gates in (0,1): |gated| < |enc'| * 1
        let aw = cx.param(p.align_w);
        let ab = cx.param(p.align_b);
        let enc_aligned = cx.g.conv1x1(enc, aw, Some(ab)).unwrap();
        for (gv, ev) in g.value(out.gated).data().iter().zip(g.value(enc_aligned).data()) {
            assert!(gv.abs() < ev.abs() + 1e-12);
            if ev.abs() > 1e-9 {
                assert!(gv.abs() < ev.abs());
            }
        }
    }

    #[test]
    fn patch_expand_shapes_and_inverse_of_merging() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = ps.register("e.w", randn_tensor(&mut rng, &[32, 64], 0.02));
        let b = ps.register("e.b", Tensor::zeros(&[64]));
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::from_fn(&[4, 4, 32], |i| i as f64 * 0.01));
        let y = patch_expand(&mut cx, x, w, b).unwrap();
        assert_eq!(g.shape(y), &[8, 8, 16]);

        // odd channel count rejected
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let bad = cx.g.leaf(Tensor::zeros(&[4, 4, 3]));
        assert!(patch_expand(&mut cx, bad, w, b).is_err());
    }

    fn toy_model() -> (
        ParamSet<f64>,
        crate::swin::EncoderParams,
        DecoderParams,
        EncoderConfig,
    ) {
        let cfg = EncoderConfig::toy();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let enc = init_encoder(&mut ps, &mut rng, &cfg);
        let dec = init_decoder(&mut ps, &mut rng, &cfg, 7);
        (ps, enc, dec, cfg)
    }

    #[test]
    fn toy_roundtrip_shapes_and_gru_updates() {
        let (ps, enc, dec, cfg) = toy_model();
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let img = cx.g.leaf(Tensor::from_fn(&[3, 64, 64], |i| ((i % 97) as f64) / 97.0));
        let (bottleneck, feats) = encoder_forward(&mut cx, img, &enc, &cfg).unwrap();
        let (out, trace) = decoder_forward(&mut cx, bottleneck, &feats, &dec).unwrap();
        assert_eq!(g.shape(out), &[16, 16, 16]); // [C,H,W] at stage-1 grid
        assert_eq!(trace.gru_updates, 1);
        // hidden differs from zeros for a non-zero input
        assert!(g
            .value(trace.level_hiddens[0])
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn decoder_deterministic() {
        let run = || {
            let (ps, enc, dec, cfg) = toy_model();
            let mut g = Graph::<f64>::new();
            let mut cx = ModelCtx::new(&mut g, &ps);
            let img = cx.g.leaf(Tensor::from_fn(&[3, 64, 64], |i| ((i * 11 % 89) as f64) / 88.0));
            let (b, f) = encoder_forward(&mut cx, img, &enc, &cfg).unwrap();
            let (out, _) = decoder_forward(&mut cx, b, &f, &dec).unwrap();
            g.value(out).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
