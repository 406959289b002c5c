//! Classification head: conv layers interleaved with channel/spatial
//! attention blocks whose channel descriptor is refined by a GRU, then
//! global pooling and a single-logit FC. The pooled pre-logit vector is the
//! embedding used for contrastive pairing.

use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use crate::decoder::{gru_cell, init_gru, GruParams};
use crate::error::{ConfigError, TensorError};
use crate::graph::Var;
use crate::params::{randn_tensor, ModelCtx, ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Conv widths after the decoder output, e.g. [64, 32]; the last width
    /// is the embedding dimension.
    pub widths: Vec<usize>,
    pub cbam_reduction: usize,
    pub spatial_kernel: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 32],
            cbam_reduction: 4,
            spatial_kernel: 7,
        }
    }
}

impl HeadConfig {
    pub fn toy() -> Self {
        Self {
            widths: vec![32, 16],
            cbam_reduction: 4,
            spatial_kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.widths.len() != 2 {
            return Err(ConfigError::Invalid(
                "head widths must list exactly two conv widths".into(),
            ));
        }
        if self.spatial_kernel % 2 == 0 || self.spatial_kernel == 0 {
            return Err(ConfigError::Invalid(
                "head spatial_kernel must be odd".into(),
            ));
        }
        for &w in &self.widths {
            if self.cbam_reduction == 0 || w % self.cbam_reduction != 0 {
                return Err(ConfigError::Invalid(format!(
                    "cbam_reduction {} must divide head width {w}",
                    self.cbam_reduction
                )));
            }
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// One attention block: shared channel MLP over avg/max descriptors, GRU
/// refinement of the descriptor, sigmoid channel map, then a spatial map
/// from a conv over stacked channel-max/mean planes.
#[derive(Debug, Clone)]
pub struct CbamGruParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub mod_w: ParamId,
    pub mod_b: ParamId,
    pub sp_w: ParamId,
    pub sp_b: ParamId,
    pub gru: GruParams,
    pub channels: usize,
}

pub fn init_cbam_gru<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    reduction: usize,
    spatial_kernel: usize,
) -> CbamGruParams {
    let hidden = (c / reduction).max(1);
    CbamGruParams {
        fc1_w: ps.register(format!("{prefix}.fc1.w"), randn_tensor(rng, &[hidden, c], 0.02)),
        fc1_b: ps.register(format!("{prefix}.fc1.b"), Tensor::zeros(&[hidden])),
        fc2_w: ps.register(format!("{prefix}.fc2.w"), randn_tensor(rng, &[c, hidden], 0.02)),
        fc2_b: ps.register(format!("{prefix}.fc2.b"), Tensor::zeros(&[c])),
        mod_w: ps.register(format!("{prefix}.mod.w"), randn_tensor(rng, &[c, c], 0.02)),
        mod_b: ps.register(format!("{prefix}.mod.b"), Tensor::zeros(&[c])),
        sp_w: ps.register(
            format!("{prefix}.sp.w"),
            randn_tensor(rng, &[1, 2, spatial_kernel, spatial_kernel], 0.02),
        ),
        sp_b: ps.register(format!("{prefix}.sp.b"), Tensor::zeros(&[1])),
        gru: init_gru(ps, rng, &format!("{prefix}.gru"), c, c),
        channels: c,
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub cbam1: CbamGruParams,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub adapter_w: ParamId,
    pub adapter_b: ParamId,
    pub cbam2: CbamGruParams,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub in_channels: usize,
    pub embedding: usize,
}

pub fn init_head<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    cfg: &HeadConfig,
    in_channels: usize,
) -> HeadParams {
    let (w1, w2) = (cfg.widths[0], cfg.widths[1]);
    let fan1 = (2.0 / (in_channels as f64 * 9.0)).sqrt();
    let fan2 = (2.0 / (w1 as f64 * 9.0)).sqrt();
    HeadParams {
        conv1_w: ps.register("head.conv1.w", randn_tensor(rng, &[w1, in_channels, 3, 3], fan1)),
        conv1_b: ps.register("head.conv1.b", Tensor::zeros(&[w1])),
        cbam1: init_cbam_gru(ps, rng, "head.cbam1", w1, cfg.cbam_reduction, cfg.spatial_kernel),
        conv2_w: ps.register("head.conv2.w", randn_tensor(rng, &[w2, w1, 3, 3], fan2)),
        conv2_b: ps.register("head.conv2.b", Tensor::zeros(&[w2])),
        adapter_w: ps.register("head.hadapt.w", randn_tensor(rng, &[w2, w1], 0.02)),
        adapter_b: ps.register("head.hadapt.b", Tensor::zeros(&[w2])),
        cbam2: init_cbam_gru(ps, rng, "head.cbam2", w2, cfg.cbam_reduction, cfg.spatial_kernel),
        fc_w: ps.register("head.fc.w", randn_tensor(rng, &[1, w2], 0.02)),
        fc_b: ps.register("head.fc.b", Tensor::zeros(&[1])),
        in_channels,
        embedding: w2,
    }
}

pub struct CbamOutput {
    pub out: Var,
    pub h_next: Var,
}

pub fn cbam_gru_block<T: Scalar>(
    cx: &mut ModelCtx<T>,
    x: Var,
    h_prev: Var,
    p: &CbamGruParams,
) -> Result<CbamOutput, TensorError> {
    let (c, h, w) = match *cx.g.shape(x) {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(TensorError::InvalidShape {
                shape: cx.g.shape(x).to_vec(),
                reason: "cbam_gru_block expects [C,H,W]".into(),
            })
        }
    };
    let avg = cx.g.global_avg_pool(x)?;
    let mx = cx.g.global_max_pool(x)?;
    let shared_mlp = |cx: &mut ModelCtx<T>, d: Var| -> Result<Var, TensorError> {
        let w1 = cx.param(p.fc1_w);
        let b1 = cx.param(p.fc1_b);
        let hdn = cx.g.linear_vec(w1, d, Some(b1))?;
        let hdn = cx.g.relu(hdn);
        let w2 = cx.param(p.fc2_w);
        let b2 = cx.param(p.fc2_b);
        cx.g.linear_vec(w2, hdn, Some(b2))
    };
    let d_avg = shared_mlp(cx, avg)?;
    let d_max = shared_mlp(cx, mx)?;
    let d = cx.g.add(d_avg, d_max)?;

    let h_next = gru_cell(cx, d, h_prev, &p.gru)?;
    let mw = cx.param(p.mod_w);
    let mb = cx.param(p.mod_b);
    let refine = cx.g.linear_vec(mw, h_next, Some(mb))?;
    let mc_logit = cx.g.add(d, refine)?;
    let m_c = cx.g.sigmoid(mc_logit);
    let m_c_col = cx.g.reshape(m_c, vec![c, 1, 1])?;
    let xg = cx.g.mul(x, m_c_col)?;

    let maxp = cx.g.max_axis(xg, 0, false)?;
    let avgp = cx.g.mean_axis(xg, 0, false)?;
    let maxp = cx.g.reshape(maxp, vec![1, h, w])?;
    let avgp = cx.g.reshape(avgp, vec![1, h, w])?;
    let planes = cx.g.concat(&[maxp, avgp], 0)?;
    let sw = cx.param(p.sp_w);
    let sb = cx.param(p.sp_b);
    let sp_logit = cx.g.conv2d(planes, sw, Some(sb))?;
    let m_s = cx.g.sigmoid(sp_logit);
    let out = cx.g.mul(xg, m_s)?;
    Ok(CbamOutput { out, h_next })
}

pub struct HeadOutput {
    pub probability: Var,
    pub logit: Var,
    pub embedding: Var,
}

/// conv -> CBAM-GRU x2 (hidden chained through a linear adapter) -> GAP ->
/// FC -> sigmoid. `probability` is P(attack), following the 0 = bonafide,
/// 1 = attack label convention.
pub fn classify<T: Scalar>(
    cx: &mut ModelCtx<T>,
    features: Var,
    p: &HeadParams,
) -> Result<HeadOutput, TensorError> {
    let c1w = cx.param(p.conv1_w);
    let c1b = cx.param(p.conv1_b);
    let y = cx.g.conv2d(features, c1w, Some(c1b))?;
    let y = cx.g.relu(y);
    let h0 = cx.g.constant(Tensor::zeros(&[p.cbam1.channels]));
    let b1 = cbam_gru_block(cx, y, h0, &p.cbam1)?;

    let c2w = cx.param(p.conv2_w);
    let c2b = cx.param(p.conv2_b);
    let y = cx.g.conv2d(b1.out, c2w, Some(c2b))?;
    let y = cx.g.relu(y);
    let aw = cx.param(p.adapter_w);
    let ab = cx.param(p.adapter_b);
    let h_chained = cx.g.linear_vec(aw, b1.h_next, Some(ab))?;
    let b2 = cbam_gru_block(cx, y, h_chained, &p.cbam2)?;

    let embedding = cx.g.global_avg_pool(b2.out)?;
    let fw = cx.param(p.fc_w);
    let fb = cx.param(p.fc_b);
    let logit_vec = cx.g.linear_vec(fw, embedding, Some(fb))?;
    let logit = cx.g.reshape(logit_vec, vec![])?;
    let probability = cx.g.sigmoid(logit);
    Ok(HeadOutput {
        probability,
        logit,
        embedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;

    fn setup_block(c: usize) -> (ParamSet<f64>, CbamGruParams) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = init_cbam_gru(&mut ps, &mut rng, "b", c, 4, 7);
        (ps, p)
    }

    fn setup_head(c_in: usize) -> (ParamSet<f64>, HeadParams) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = HeadConfig::toy();
        let p = init_head(&mut ps, &mut rng, &cfg, c_in);
        (ps, p)
    }

    #[test]
    fn saturated_maps_are_identity() {
        let c = 8;
        let (mut ps, p) = setup_block(c);
        // d + refine driven to +inf-ish, spatial conv saturated
        ps.set(p.fc1_w, Tensor::zeros(&[2, c]));
        ps.set(p.fc2_w, Tensor::zeros(&[c, 2]));
        ps.set(p.fc2_b, Tensor::full(&[c], 200.0)); // d = 400 per channel
        ps.set(p.mod_w, Tensor::zeros(&[c, c]));
        ps.set(p.mod_b, Tensor::zeros(&[c]));
        ps.set(p.sp_w, Tensor::zeros(&[1, 2, 7, 7]));
        ps.set(p.sp_b, Tensor::full(&[1], 1000.0));
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::from_fn(&[c, 5, 5], |i| (i as f64 * 0.13).sin()));
        let h0 = cx.g.leaf(Tensor::zeros(&[c]));
        let out = cbam_gru_block(&mut cx, x, h0, &p).unwrap();
        assert_eq!(g.value(out.out).data(), g.value(x).data());
    }

    #[test]
    fn zero_input_multiplicative_zero() {
        let c = 8;
        let (ps, p) = setup_block(c);
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::zeros(&[c, 4, 4]));
        let h0 = cx.g.leaf(Tensor::from_fn(&[c], |i| i as f64 * 0.1 - 0.3));
        let out = cbam_gru_block(&mut cx, x, h0, &p).unwrap();
        assert!(g.value(out.out).data().iter().all(|&v| v == 0.0));

        // h_next equals a GRU step on the bias-driven descriptor
        let d_bias = {
            let mut cx2 = ModelCtx::new(&mut g, &ps);
            let zero = cx2.g.leaf(Tensor::zeros(&[c]));
            let w1 = cx2.param(p.fc1_w);
            let b1 = cx2.param(p.fc1_b);
            let h1 = cx2.g.linear_vec(w1, zero, Some(b1)).unwrap();
            let h1 = cx2.g.relu(h1);
            let w2 = cx2.param(p.fc2_w);
            let b2 = cx2.param(p.fc2_b);
            let m = cx2.g.linear_vec(w2, h1, Some(b2)).unwrap();
            let d = cx2.g.add(m, m).unwrap();
            cx2.g.value(d).clone()
        };
        let mut g2 = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g2, &ps);
        let d = cx.g.leaf(d_bias);
        let h0 = cx.g.leaf(Tensor::from_fn(&[c], |i| i as f64 * 0.1 - 0.3));
        let expect = gru_cell(&mut cx, d, h0, &p.gru).unwrap();
        for (a, b) in g
            .value(out.h_next)
            .data()
            .iter()
            .zip(g2.value(expect).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_never_amplifies() {
        let c = 8;
        let (ps, p) = setup_block(c);
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::from_fn(&[c, 6, 6], |i| ((i * 29 % 31) as f64 - 15.0) * 0.2));
        let h0 = cx.g.leaf(Tensor::zeros(&[c]));
        let out = cbam_gru_block(&mut cx, x, h0, &p).unwrap();
        let xin = g.value(x).max_abs();
        let xout = g.value(out.out).max_abs();
        assert!(xout <= xin);
    }

    #[test]
    fn zero_fc_gives_half_probability() {
        let (mut ps, p) = setup_head(16);
        ps.set(p.fc_w, Tensor::zeros(&[1, 16]));
        ps.set(p.fc_b, Tensor::zeros(&[1]));
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let feat = cx.g.leaf(Tensor::from_fn(&[16, 8, 8], |i| (i as f64 * 0.01).cos()));
        let out = classify(&mut cx, feat, &p).unwrap();
        assert_eq!(g.value(out.probability).item(), 0.5);
    }

    #[test]
    fn probability_strictly_inside_unit_interval() {
        let (ps, p) = setup_head(16);
        for seed in 0..4 {
            let mut g = Graph::<f64>::new();
            let mut cx = ModelCtx::new(&mut g, &ps);
            let feat = cx
                .g
                .leaf(Tensor::from_fn(&[16, 8, 8], |i| ((i * (seed + 3)) % 17) as f64 * 0.1 - 0.8));
            let out = classify(&mut cx, feat, &p).unwrap();
            let prob = g.value(out.probability).item();
            assert!(prob > 0.0 && prob < 1.0);
            // thresholding at 0.5 equals the sign of the logit
            let logit = g.value(out.logit).item();
            assert_eq!(prob >= 0.5, logit >= 0.0);
        }
    }

    #[test]
    fn embedding_contract() {
        let (ps, p) = setup_head(16);
        let feat_data = Tensor::from_fn(&[16, 8, 8], |i| (i as f64 * 0.07).sin());
        let emb = |data: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let mut cx = ModelCtx::new(&mut g, &ps);
            let feat = cx.g.leaf(data.clone());
            let out = classify(&mut cx, feat, &p).unwrap();
            g.value(out.embedding).data().to_vec()
        };
        let e1 = emb(&feat_data);
        let e2 = emb(&feat_data);
        assert_eq!(e1, e2, "identical inputs give identical embeddings");
        assert_eq!(e1.len(), 16, "embedding dim equals configured head width");

        let other = Tensor::from_fn(&[16, 8, 8], |i| (i as f64 * 0.11).cos());
        let e3 = emb(&other);
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        assert!((dist(&e1, &e3) - dist(&e3, &e1)).abs() < 1e-7);
    }
}
