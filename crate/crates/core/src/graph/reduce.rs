//! Reductions: sums, means, maxima.

use super::{Graph, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Lane decomposition for reducing over `axis`: the tensor is walked as
/// `[outer, len, inner]` where `len = shape[axis]`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl<T: Scalar> Graph<T> {
    fn check_axis(&self, v: Var, axis: usize) -> Result<(), TensorError> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        Ok(())
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let xv = self.rc(x);
        let (outer, len, inner) = lanes(xv.shape(), axis);
        let out_shape = reduced_shape(xv.shape(), axis, keepdim);
        let mut out = Tensor::zeros(&out_shape);
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out.data_mut()[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&xv.data()[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let xid = x.0;
        let in_shape = xv.shape().to_vec();
        Ok(self.push(
            "sum_axis",
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                let mut gx = Tensor::zeros(&in_shape);
                for o in 0..outer {
                    let gsrc = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        for (d, &gv) in gx.data_mut()[base..base + inner].iter_mut().zip(gsrc) {
                            *d += gv;
                        }
                    }
                }
                vec![(xid, gx)]
            })),
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let len = self.shape(x)[axis];
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Max along `axis`; gradient routes to the first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let xv = self.rc(x);
        let (outer, len, inner) = lanes(xv.shape(), axis);
        let out_shape = reduced_shape(xv.shape(), axis, keepdim);
        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xv.data()[(o * len) * inner + i];
                let mut bk = 0usize;
                for k in 1..len {
                    let v = xv.data()[(o * len + k) * inner + i];
                    if v > best {
                        best = v;
                        bk = k;
                    }
                }
                out.data_mut()[o * inner + i] = best;
                argmax[o * inner + i] = bk;
            }
        }
        let xid = x.0;
        let in_shape = xv.shape().to_vec();
        Ok(self.push(
            "max_axis",
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                let mut gx = Tensor::zeros(&in_shape);
                for o in 0..outer {
                    for i in 0..inner {
                        let k = argmax[o * inner + i];
                        gx.data_mut()[(o * len + k) * inner + i] += g.data()[o * inner + i];
                    }
                }
                vec![(xid, gx)]
            })),
        ))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.rc(x);
        let mut acc = T::zero();
        for &v in xv.data() {
            acc += v;
        }
        let xid = x.0;
        let in_shape = xv.shape().to_vec();
        Ok(self.push(
            "sum_all",
            Tensor::scalar(acc),
            Some(Box::new(move |g: &Tensor<T>| {
                vec![(xid, Tensor::full(&in_shape, g.item()))]
            })),
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_mean_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s0 = g.sum_axis(x, 0, false).unwrap();
        assert_eq!(g.shape(s0), &[3]);
        assert_eq!(g.value(s0).data(), &[5., 7., 9.]);
        let m1 = g.mean_axis(x, 1, true).unwrap();
        assert_eq!(g.shape(m1), &[2, 1]);
        assert_eq!(g.value(m1).data(), &[2., 5.]);
    }

    #[test]
    fn max_axis_routes_gradient_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1., 7., 5., 2.]).unwrap());
        let m = g.max_axis(x, 1, false).unwrap();
        assert_eq!(g.value(m).data(), &[7., 5.]);
        let s = g.sum_all(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 1., 1., 0.]);
    }

    #[test]
    fn axis_out_of_range() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.sum_axis(x, 2, false),
            Err(TensorError::AxisOutOfRange { .. })
        ));
    }
}
