//! Elementwise unary and binary (broadcasting) operations.

use std::str::FromStr;

use super::{Graph, Var};
use crate::error::TensorError;
use crate::tensor::{broadcast_shapes, Scalar, Tensor};

/// Elementwise activation kinds exposed as a single dispatch point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl FromStr for Activation {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(TensorError::UnknownActivation(other.to_string())),
        }
    }
}

#[inline]
fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    /// Generic unary op: `f` computes the value, `df(x, y)` the local
    /// derivative at input `x` with output `y`.
    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let xv = self.rc(x);
        let y = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| f(v)).collect(),
        )
        .expect("unary preserves shape");
        debug_assert!(y.all_finite(), "non-finite values produced by {op}");
        let y = std::rc::Rc::new(y);
        let y_for_rule = std::rc::Rc::clone(&y);
        let xid = x.0;
        self.push_rc(
            y,
            Some(Box::new(move |g: &Tensor<T>| {
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(y_for_rule.data().iter()))
                    .map(|(&gv, (&x, &y))| gv * df(x, y))
                    .collect();
                vec![(
                    xid,
                    Tensor::new(xv.shape().to_vec(), data).expect("grad shape"),
                )]
            })),
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary("neg", x, |v| -v, |_, _| -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary("ln", x, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(
            "sqrt",
            x,
            |v| v.sqrt(),
            |_, y| T::one() / (T::from_f64(2.0) * y),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary("sigmoid", x, stable_sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary("tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            "relu",
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        match kind {
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
            Activation::Relu => self.relu(x),
        }
    }

    /// `x^p` for scalar exponent `p`; inputs must be positive unless `p` is a
    /// non-negative integer.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let pt = T::from_f64(p);
        self.unary(
            "powf",
            x,
            move |v| v.powf(pt),
            move |x, _| pt * x.powf(pt - T::one()),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ct = T::from_f64(c);
        self.unary("scale", x, move |v| ct * v, move |_, _| ct)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let ct = T::from_f64(c);
        self.unary("add_scalar", x, move |v| v + ct, |_, _| T::one())
    }

    /// Clamp to `[lo, hi]`; gradient passes through strictly inside the band.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let l = T::from_f64(lo);
        let h = T::from_f64(hi);
        self.unary(
            "clamp",
            x,
            move |v| v.max(l).min(h),
            move |x, _| {
                if x >= l && x <= h {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let l = T::from_f64(lo);
        self.unary(
            "clamp_min",
            x,
            move |v| v.max(l),
            move |x, _| if x >= l { T::one() } else { T::zero() },
        )
    }

    /// `1 - x`, a common gating expression.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary("one_minus", x, |v| T::one() - v, |_, _| -T::one())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        // (a_val, b_val, upstream) -> (grad_a, grad_b)
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Var, TensorError> {
        let av = self.rc(a);
        let bv = self.rc(b);
        let out_shape = broadcast_shapes(op, av.shape(), bv.shape())?;
        let numel: usize = out_shape.iter().product();

        let same = av.shape() == bv.shape();
        let mut data = Vec::with_capacity(numel);
        if same {
            for (&x, &y) in av.data().iter().zip(bv.data()) {
                data.push(f(x, y));
            }
        } else {
            let walker = BroadcastWalker::new(&out_shape, av.shape(), bv.shape());
            walker.for_each(|ao, bo| data.push(f(av.data()[ao], bv.data()[bo])));
        }
        let out = Tensor::new(out_shape.clone(), data).expect("binary shape");
        debug_assert!(out.all_finite(), "non-finite values produced by {op}");

        let (aid, bid) = (a.0, b.0);
        Ok(self.push(
            op,
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                if same {
                    for i in 0..g.numel() {
                        let (da, db) = df(av.data()[i], bv.data()[i], g.data()[i]);
                        ga.data_mut()[i] = da;
                        gb.data_mut()[i] = db;
                    }
                } else {
                    let walker = BroadcastWalker::new(g.shape(), av.shape(), bv.shape());
                    let mut i = 0usize;
                    walker.for_each(|ao, bo| {
                        let (da, db) = df(av.data()[ao], bv.data()[bo], g.data()[i]);
                        ga.data_mut()[ao] += da;
                        gb.data_mut()[bo] += db;
                        i += 1;
                    });
                }
                vec![(aid, ga), (bid, gb)]
            })),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }
}

/// Odometer over an output shape yielding broadcast-aware linear offsets
/// into two operand buffers.
pub(crate) struct BroadcastWalker {
    out_shape: Vec<usize>,
    a_stride: Vec<usize>,
    b_stride: Vec<usize>,
}

impl BroadcastWalker {
    pub(crate) fn new(out_shape: &[usize], a_shape: &[usize], b_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        let strides = |shape: &[usize]| {
            let mut s = vec![1usize; shape.len()];
            for i in (0..shape.len().saturating_sub(1)).rev() {
                s[i] = s[i + 1] * shape[i + 1];
            }
            s
        };
        let pad = |shape: &[usize]| -> Vec<usize> {
            let raw = strides(shape);
            let mut out = vec![0usize; rank];
            let off = rank - shape.len();
            for i in 0..shape.len() {
                out[off + i] = if shape[i] == 1 { 0 } else { raw[i] };
            }
            out
        };
        Self {
            out_shape: out_shape.to_vec(),
            a_stride: pad(a_shape),
            b_stride: pad(b_shape),
        }
    }

    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let rank = self.out_shape.len();
        let numel: usize = self.out_shape.iter().product();
        if rank == 0 {
            f(0, 0);
            return;
        }
        let mut idx = vec![0usize; rank];
        let (mut ao, mut bo) = (0usize, 0usize);
        for _ in 0..numel {
            f(ao, bo);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ao += self.a_stride[d];
                bo += self.b_stride[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                idx[d] = 0;
                ao -= self.a_stride[d] * self.out_shape[d];
                bo -= self.b_stride[d] * self.out_shape[d];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_match_contracts() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.0, -1.0, 2.0]).unwrap());
        let s = g.sigmoid(x);
        assert!((g.value(s).data()[0] - 0.5).abs() < 1e-15);
        let t = g.tanh(x);
        assert_eq!(g.value(t).data()[0], 0.0);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn unknown_activation_is_error() {
        assert!(matches!(
            "gelu".parse::<Activation>(),
            Err(TensorError::UnknownActivation(_))
        ));
    }

    #[test]
    fn broadcast_add_and_grads() {
        // [2,2] + [2] broadcasts over rows; grads reduce back.
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2], vec![10.0, 20.0]).unwrap());
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn incompatible_shapes_error_not_crash() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[3, 2]));
        let b = g.leaf(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.add(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sigmoid_saturates_exactly_at_large_input() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![1], vec![100.0f32]).unwrap());
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data()[0], 1.0f32);
    }
}
