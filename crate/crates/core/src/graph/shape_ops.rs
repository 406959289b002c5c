//! Shape rearrangements: reshape, permute, concat, cyclic roll, row gather.

use super::{Graph, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let xv = self.rc(x);
        let out = Tensor::new(shape, xv.data().to_vec())?;
        let xid = x.0;
        let in_shape = xv.shape().to_vec();
        Ok(self.push(
            "reshape",
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                vec![(
                    xid,
                    Tensor::new(in_shape.clone(), g.data().to_vec()).expect("reshape grad"),
                )]
            })),
        ))
    }

    /// Axis permutation: `out.shape[i] = x.shape[axes[i]]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let xv = self.rc(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: format!("invalid permutation {axes:?}"),
            });
        }
        let out = permute_data(&xv, axes);
        let xid = x.0;
        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.push(
            "permute",
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                vec![(xid, permute_data(g, &inverse))]
            })),
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![],
                reason: "concat of zero tensors".into(),
            });
        }
        let first = self.rc(xs[0]);
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let mut axis_total = 0usize;
        let vals: Vec<_> = xs.iter().map(|&v| self.rc(v)).collect();
        for v in &vals {
            if v.rank() != rank
                || v.shape()
                    .iter()
                    .enumerate()
                    .any(|(d, &s)| d != axis && s != first.shape()[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            axis_total += v.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        let blocks: Vec<usize> = vals.iter().map(|v| v.shape()[axis] * inner).collect();
        let out_stride = axis_total * inner;
        for o in 0..outer {
            let mut off = 0usize;
            for (v, &blk) in vals.iter().zip(&blocks) {
                out.data_mut()[o * out_stride + off..o * out_stride + off + blk]
                    .copy_from_slice(&v.data()[o * blk..(o + 1) * blk]);
                off += blk;
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let in_shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.push(
            "concat",
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                let mut grads: Vec<(usize, Tensor<T>)> = ids
                    .iter()
                    .zip(&in_shapes)
                    .map(|(&id, s)| (id, Tensor::zeros(s)))
                    .collect();
                for o in 0..outer {
                    let mut off = 0usize;
                    for ((_, gt), &blk) in grads.iter_mut().zip(&blocks) {
                        gt.data_mut()[o * blk..(o + 1) * blk]
                            .copy_from_slice(&g.data()[o * out_stride + off..o * out_stride + off + blk]);
                        off += blk;
                    }
                }
                grads
            })),
        ))
    }

    /// Cyclic shift of the first two axes of a rank-3 `[H,W,C]` tensor.
    /// `out[(y+sh) mod H, (x+sw) mod W] = in[y, x]`.
    pub fn roll2d(&mut self, x: Var, sh: isize, sw: isize) -> Result<Var, TensorError> {
        let xv = self.rc(x);
        let (h, w, c) = match *xv.shape() {
            [h, w, c] => (h, w, c),
            _ => {
                return Err(TensorError::InvalidShape {
                    shape: xv.shape().to_vec(),
                    reason: "roll2d expects [H,W,C]".into(),
                })
            }
        };
        let out = roll_data(&xv, h, w, c, sh, sw);
        let xid = x.0;
        Ok(self.push(
            "roll2d",
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                vec![(xid, roll_data(g, h, w, c, -sh, -sw))]
            })),
        ))
    }

    /// Gather rows of `table[R, ...]` by index; `out[i] = table[indices[i]]`.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn index_select(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let tv = self.rc(table);
        if tv.rank() < 1 {
            return Err(TensorError::InvalidShape {
                shape: tv.shape().to_vec(),
                reason: "index_select needs rank >= 1".into(),
            });
        }
        let rows = tv.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidShape {
                shape: tv.shape().to_vec(),
                reason: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let row_len: usize = tv.shape()[1..].iter().product();
        let mut out_shape = tv.shape().to_vec();
        out_shape[0] = indices.len();
        let mut out = Tensor::zeros(&out_shape);
        for (i, &r) in indices.iter().enumerate() {
            out.data_mut()[i * row_len..(i + 1) * row_len]
                .copy_from_slice(&tv.data()[r * row_len..(r + 1) * row_len]);
        }
        let tid = table.0;
        let idx = indices.to_vec();
        let t_shape = tv.shape().to_vec();
        Ok(self.push(
            "index_select",
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                let mut gt = Tensor::zeros(&t_shape);
                for (i, &r) in idx.iter().enumerate() {
                    for (d, &gv) in gt.data_mut()[r * row_len..(r + 1) * row_len]
                        .iter_mut()
                        .zip(&g.data()[i * row_len..(i + 1) * row_len])
                    {
                        *d += gv;
                    }
                }
                vec![(tid, gt)]
            })),
        ))
    }
}

fn permute_data<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let rank = out_shape.len();
    let numel = x.numel();
    let mut out = Tensor::zeros(&out_shape);
    if rank == 0 {
        out.data_mut()[0] = x.data()[0];
        return out;
    }
    // walk output linearly, tracking the input offset with an odometer
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.data_mut().iter_mut().take(numel) {
        *o = x.data()[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= step[d] * out_shape[d];
        }
    }
    out
}

fn roll_data<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    c: usize,
    sh: isize,
    sw: isize,
) -> Tensor<T> {
    let modp = |v: isize, m: usize| -> usize {
        let m = m as isize;
        (((v % m) + m) % m) as usize
    };
    let mut out = Tensor::zeros(x.shape());
    for y in 0..h {
        let ty = modp(y as isize + sh, h);
        for xx in 0..w {
            let tx = modp(xx as isize + sw, w);
            let src = (y * w + xx) * c;
            let dst = (ty * w + tx) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_and_inverse() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2, 1], vec![1., 2.]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 2], vec![3., 4., 5., 6.]).unwrap());
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert_eq!(g.value(y).data(), &[1., 3., 4., 2., 5., 6.]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().shape(), &[2, 1]);
        assert_eq!(g.grad(b).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn roll_roundtrip_bitwise() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[4, 4, 2], |i| (i as f64).sin()));
        let r = g.roll2d(x, -2, -2).unwrap();
        let back = g.roll2d(r, 2, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn index_select_scatter_adds() {
        let mut g = Graph::<f64>::new();
        let t = g.leaf(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = g.index_select(t, &[0, 2, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 5., 6., 1., 2.]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap().data(), &[2., 2., 0., 0., 1., 1.]);
    }
}
