//! Dynamic filter bottleneck: a spatial 1x1 sigmoid gate multiplied with an
//! input-conditioned convex combination of a 1x1 filter bank, channel
//! layer-norm, and a residual connection.
//!
//! The combination weights come from GAP -> FC -> ReLU -> FC -> softmax, so
//! `alpha` is a probability vector and one-hot weights collapse to a single
//! bank filter.

use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use crate::error::{ConfigError, TensorError};
use crate::graph::Var;
use crate::params::{randn_tensor, ModelCtx, ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DfnConfig {
    /// Bank size n.
    pub filter_count: usize,
    /// Channel-MLP reduction r (must divide the bottleneck width).
    pub reduction: usize,
}

impl Default for DfnConfig {
    fn default() -> Self {
        Self {
            filter_count: 4,
            reduction: 4,
        }
    }
}

impl DfnConfig {
    pub fn validate(&self, bottleneck_channels: usize) -> Result<(), ConfigError> {
        if self.filter_count == 0 {
            return Err(ConfigError::Invalid("dfn filter_count must be >= 1".into()));
        }
        if self.reduction == 0 || bottleneck_channels % self.reduction != 0 {
            return Err(ConfigError::Invalid(format!(
                "dfn reduction {} must divide bottleneck width {bottleneck_channels}",
                self.reduction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DfnParams {
    /// Bank filters, each a [C,C] 1x1 kernel kept at unit flattened L2 norm.
    pub filters: Vec<ParamId>,
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub channels: usize,
}

/// Renormalize a bank filter to unit flattened L2 norm in place.
pub fn renormalize_filter<T: Scalar>(t: &mut Tensor<T>) {
    let norm = t
        .data()
        .iter()
        .fold(0.0f64, |acc, v| acc + v.as_f64() * v.as_f64())
        .sqrt();
    if norm > 0.0 {
        let inv = T::from_f64(1.0 / norm);
        for v in t.data_mut() {
            *v = *v * inv;
        }
    }
}

pub fn init_dfn<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    cfg: &DfnConfig,
    c: usize,
) -> DfnParams {
    let hidden = c / cfg.reduction;
    let filters = (0..cfg.filter_count)
        .map(|i| {
            let mut w: Tensor<T> = randn_tensor(rng, &[c, c], 1.0);
            renormalize_filter(&mut w);
            ps.register(format!("dfn.filter{i}"), w)
        })
        .collect();
    DfnParams {
        filters,
        spatial_w: ps.register("dfn.spatial.w", randn_tensor(rng, &[c, c], 0.02)),
        spatial_b: ps.register("dfn.spatial.b", Tensor::zeros(&[c])),
        fc1_w: ps.register("dfn.fc1.w", randn_tensor(rng, &[hidden, c], 0.02)),
        fc1_b: ps.register("dfn.fc1.b", Tensor::zeros(&[hidden])),
        fc2_w: ps.register(
            "dfn.fc2.w",
            randn_tensor(rng, &[cfg.filter_count, hidden], 0.02),
        ),
        fc2_b: ps.register("dfn.fc2.b", Tensor::zeros(&[cfg.filter_count])),
        ln_g: ps.register("dfn.ln_g", Tensor::ones(&[c])),
        ln_b: ps.register("dfn.ln_b", Tensor::zeros(&[c])),
        channels: c,
    }
}

/// `alpha = softmax(FC(ReLU(FC(GAP(x)))))`, a probability vector of bank
/// coefficients conditioned on the input.
pub fn channel_coefficients<T: Scalar>(
    cx: &mut ModelCtx<T>,
    x: Var,
    p: &DfnParams,
) -> Result<Var, TensorError> {
    let gap = cx.g.global_avg_pool(x)?;
    let w1 = cx.param(p.fc1_w);
    let b1 = cx.param(p.fc1_b);
    let h = cx.g.linear_vec(w1, gap, Some(b1))?;
    let h = cx.g.relu(h);
    let w2 = cx.param(p.fc2_w);
    let b2 = cx.param(p.fc2_b);
    let logits = cx.g.linear_vec(w2, h, Some(b2))?;
    cx.g.softmax(logits, 0)
}

/// `sum_i alpha_i * (W_i * x)`: the alpha-weighted sum of each bank filter
/// applied as a 1x1 convolution.
pub fn dynamic_filter_apply<T: Scalar>(
    cx: &mut ModelCtx<T>,
    x: Var,
    alpha: Var,
    p: &DfnParams,
) -> Result<Var, TensorError> {
    let n = p.filters.len();
    if cx.g.shape(alpha) != [n] {
        return Err(TensorError::ShapeMismatch {
            op: "dynamic_filter_apply",
            lhs: vec![n],
            rhs: cx.g.shape(alpha).to_vec(),
        });
    }
    let alpha_col = cx.g.reshape(alpha, vec![n, 1])?;
    let mut acc: Option<Var> = None;
    for (i, &fid) in p.filters.iter().enumerate() {
        let w = cx.param(fid);
        let y = cx.g.conv1x1(x, w, None)?;
        let ai = cx.g.index_select(alpha_col, &[i])?;
        let ai = cx.g.reshape(ai, vec![1, 1, 1])?;
        let scaled = cx.g.mul(y, ai)?;
        acc = Some(match acc {
            Some(a) => cx.g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.expect("filter_count >= 1"))
}

/// Bottleneck forward: sigmoid 1x1 spatial gate, elementwise product with the
/// dynamic channel response, channel layer-norm, residual.
pub fn dfn_forward<T: Scalar>(
    cx: &mut ModelCtx<T>,
    x: Var,
    p: &DfnParams,
) -> Result<Var, TensorError> {
    let alpha = channel_coefficients(cx, x, p)?;
    let dynamic = dynamic_filter_apply(cx, x, alpha, p)?;
    let sw = cx.param(p.spatial_w);
    let sb = cx.param(p.spatial_b);
    let gate_logits = cx.g.conv1x1(x, sw, Some(sb))?;
    let gate = cx.g.sigmoid(gate_logits);
    let combined = cx.g.mul(gate, dynamic)?;
    // channel layer-norm: normalize across C per spatial position
    let hwc = cx.g.permute(combined, &[1, 2, 0])?;
    let ln_g = cx.param(p.ln_g);
    let ln_b = cx.param(p.ln_b);
    let normed = cx.g.layer_norm(hwc, ln_g, ln_b, LN_EPS)?;
    let back = cx.g.permute(normed, &[2, 0, 1])?;
    cx.g.add(back, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;

    fn setup(n: usize, c: usize) -> (ParamSet<f64>, DfnParams) {
        let cfg = DfnConfig {
            filter_count: n,
            reduction: 4,
        };
        cfg.validate(c).unwrap();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = init_dfn(&mut ps, &mut rng, &cfg, c);
        (ps, p)
    }

    #[test]
    fn zero_mlp_weights_give_uniform_alpha() {
        let (mut ps, p) = setup(4, 8);
        ps.set(p.fc1_w, Tensor::zeros(&[2, 8]));
        ps.set(p.fc2_w, Tensor::zeros(&[4, 2]));
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::from_fn(&[8, 4, 4], |i| (i as f64).sin()));
        let alpha = channel_coefficients(&mut cx, x, &p).unwrap();
        for &a in g.value(alpha).data() {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_filter_degenerate_softmax() {
        let (ps, p) = setup(1, 8);
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::from_fn(&[8, 2, 2], |i| i as f64 * 0.3));
        let alpha = channel_coefficients(&mut cx, x, &p).unwrap();
        assert_eq!(g.value(alpha).data(), &[1.0]);
    }

    #[test]
    fn alpha_sums_to_one() {
        let (ps, p) = setup(4, 8);
        for seed in 0..5u64 {
            let mut g = Graph::<f64>::new();
            let mut cx = ModelCtx::new(&mut g, &ps);
            let x = cx
                .g
                .leaf(Tensor::from_fn(&[8, 4, 4], |i| ((i as u64 * 31 + seed * 7) % 97) as f64 / 23.0));
            let alpha = channel_coefficients(&mut cx, x, &p).unwrap();
            let s: f64 = g.value(alpha).data().iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(g.value(alpha).data().iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn one_hot_alpha_equals_single_filter() {
        let (ps, p) = setup(4, 8);
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::from_fn(&[8, 3, 3], |i| ((i * 13) % 11) as f64 * 0.2 - 1.0));
        let mut hot = vec![0.0; 4];
        hot[2] = 1.0;
        let alpha = cx.g.leaf(Tensor::new(vec![4], hot).unwrap());
        let combined = dynamic_filter_apply(&mut cx, x, alpha, &p).unwrap();
        let w2 = cx.param(p.filters[2]);
        let direct = cx.g.conv1x1(x, w2, None).unwrap();
        for (a, b) in g.value(combined).data().iter().zip(g.value(direct).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_filters_make_output_alpha_invariant() {
        let (mut ps, p) = setup(3, 8);
        let shared = {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let mut w: Tensor<f64> = randn_tensor(&mut rng, &[8, 8], 1.0);
            renormalize_filter(&mut w);
            w
        };
        for &f in &p.filters {
            ps.set(f, shared.clone());
        }
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::from_fn(&[8, 3, 3], |i| (i as f64 * 0.7).cos()));
        let a1 = cx.g.leaf(Tensor::new(vec![3], vec![0.2, 0.5, 0.3]).unwrap());
        let a2 = cx.g.leaf(Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
        let y1 = dynamic_filter_apply(&mut cx, x, a1, &p).unwrap();
        let y2 = dynamic_filter_apply(&mut cx, x, a2, &p).unwrap();
        for (a, b) in g.value(y1).data().iter().zip(g.value(y2).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn half_identity_half_zero_filters() {
        let (mut ps, p) = setup(2, 4);
        ps.set(
            p.filters[0],
            Tensor::new(vec![4, 4], {
                let mut id = vec![0.0; 16];
                for i in 0..4 {
                    id[i * 4 + i] = 1.0;
                }
                id
            })
            .unwrap(),
        );
        ps.set(p.filters[1], Tensor::zeros(&[4, 4]));
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::from_fn(&[4, 2, 2], |i| i as f64 - 7.5));
        let alpha = cx.g.leaf(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let y = dynamic_filter_apply(&mut cx, x, alpha, &p).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_gate_and_zero_dynamic_reduce_to_residual() {
        let (mut ps, p) = setup(4, 8);
        // gate -> exactly 1 via saturating bias; dynamic part zeroed
        ps.set(p.spatial_w, Tensor::zeros(&[8, 8]));
        ps.set(p.spatial_b, Tensor::full(&[8], 100.0));
        for &f in &p.filters {
            ps.set(f, Tensor::zeros(&[8, 8]));
        }
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::from_fn(&[8, 4, 4], |i| (i as f64 * 1.3).sin()));
        let y = dfn_forward(&mut cx, x, &p).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_preserves_shape() {
        let (ps, p) = setup(4, 8);
        let mut g = Graph::<f64>::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let x = cx.g.leaf(Tensor::from_fn(&[8, 4, 4], |i| (i as f64).cos()));
        let y = dfn_forward(&mut cx, x, &p).unwrap();
        assert_eq!(g.shape(y), &[8, 4, 4]);
    }

    #[test]
    fn filters_unit_norm_at_init() {
        let (ps, p) = setup(4, 8);
        for &f in &p.filters {
            let norm: f64 = ps.get(f).data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
