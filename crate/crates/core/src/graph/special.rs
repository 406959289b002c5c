//! Softmax and composite layers built from primitives.

use super::{Graph, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// Numerically stable softmax along `axis` (max-subtraction; the
    /// normalizer is accumulated in f64). NaN/Inf input is rejected.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.rc(x);
        let rank = xv.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        if !xv.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let len = xv.shape()[axis];
        let inner: usize = xv.shape()[axis + 1..].iter().product();

        let mut out = Tensor::zeros(xv.shape());
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = xv.data()[at(0)];
                for k in 1..len {
                    mx = mx.max(xv.data()[at(k)]);
                }
                let mut denom = 0.0f64;
                for k in 0..len {
                    let e = (xv.data()[at(k)] - mx).exp();
                    out.data_mut()[at(k)] = e;
                    denom += e.as_f64();
                }
                for k in 0..len {
                    let v = out.data()[at(k)].as_f64() / denom;
                    out.data_mut()[at(k)] = T::from_f64(v);
                }
            }
        }
        let y = std::rc::Rc::new(out);
        let y_for_rule = std::rc::Rc::clone(&y);
        let xid = x.0;
        let in_shape = xv.shape().to_vec();
        Ok(self.push_rc(
            y,
            Some(Box::new(move |g: &Tensor<T>| {
                // dx = y * (g - sum(g * y, axis))
                let mut gx = Tensor::zeros(&in_shape);
                let yv = &y_for_rule;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut dot = T::zero();
                        for k in 0..len {
                            dot += g.data()[at(k)] * yv.data()[at(k)];
                        }
                        for k in 0..len {
                            gx.data_mut()[at(k)] = yv.data()[at(k)] * (g.data()[at(k)] - dot);
                        }
                    }
                }
                vec![(xid, gx)]
            })),
        ))
    }

    /// Layer normalization over the last axis with affine parameters:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let rank = self.shape(x).len();
        if rank == 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![],
                reason: "layer_norm needs rank >= 1".into(),
            });
        }
        let last = rank - 1;
        let c = self.shape(x)[last];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let mean = self.mean_axis(x, last, true)?;
        let centred = self.sub(x, mean)?;
        let sq = self.mul(centred, centred)?;
        let var = self.mean_axis(sq, last, true)?;
        let var_eps = self.add_scalar(var, eps);
        let std = self.sqrt(var_eps);
        let normed = self.div(centred, std)?;
        let scaled = self.mul(normed, gamma)?;
        self.add(scaled, beta)
    }

    /// Per-channel spatial mean of a `[C,H,W]` map -> `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(TensorError::InvalidShape {
                    shape: self.shape(x).to_vec(),
                    reason: "global_avg_pool expects [C,H,W]".into(),
                })
            }
        };
        let flat = self.reshape(x, vec![c, h * w])?;
        self.mean_axis(flat, 1, false)
    }

    /// Per-channel spatial max of a `[C,H,W]` map -> `[C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(TensorError::InvalidShape {
                    shape: self.shape(x).to_vec(),
                    reason: "global_max_pool expects [C,H,W]".into(),
                })
            }
        };
        let flat = self.reshape(x, vec![c, h * w])?;
        self.max_axis(flat, 1, false)
    }
}
