//! Matrix products and convolutions.

use super::{Graph, Var};
use crate::error::TensorError;
use crate::tensor::{broadcast_shapes, Scalar, Tensor};

/// out[m,n] += a[m,k] @ b[k,n]
pub(crate) fn mm_nn<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] @ b[k,n]^T
fn mm_nt<T: Scalar>(out: &mut [T], g: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow.iter()) {
                s += gv * bv;
            }
            *o += s;
        }
    }
}

/// out[k,n] += a[m,k]^T @ g[m,n]
fn mm_tn<T: Scalar>(out: &mut [T], a: &[T], g: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o += av * gv;
            }
        }
    }
}

/// Offsets (in matrix units) for every batch position of a broadcast
/// batched matmul.
fn batch_offsets(out_batch: &[usize], a_batch: &[usize], b_batch: &[usize]) -> Vec<(usize, usize)> {
    let walker = super::elementwise::BroadcastWalker::new(out_batch, a_batch, b_batch);
    let mut offsets = Vec::new();
    walker.for_each(|ao, bo| offsets.push((ao, bo)));
    offsets
}

impl<T: Scalar> Graph<T> {
    /// Batched matrix product `[..,M,K] @ [..,K,N] -> [..,M,N]` with
    /// NumPy-style broadcasting over the leading batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let av = self.rc(a);
        let bv = self.rc(b);
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let k = ka;
        let a_batch = ash[..ash.len() - 2].to_vec();
        let b_batch = bsh[..bsh.len() - 2].to_vec();
        let out_batch = broadcast_shapes("matmul", &a_batch, &b_batch)?;
        let offsets = batch_offsets(&out_batch, &a_batch, &b_batch);

        let mut out_shape = out_batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = Tensor::zeros(&out_shape);
        for (bi, &(ao, bo)) in offsets.iter().enumerate() {
            mm_nn(
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                &av.data()[ao * m * k..(ao + 1) * m * k],
                &bv.data()[bo * k * n..(bo + 1) * k * n],
                m,
                k,
                n,
            );
        }
        debug_assert!(out.all_finite(), "non-finite values produced by matmul");

        let (aid, bid) = (a.0, b.0);
        Ok(self.push(
            "matmul",
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for (bi, &(ao, bo)) in offsets.iter().enumerate() {
                    let gslice = &g.data()[bi * m * n..(bi + 1) * m * n];
                    mm_nt(
                        &mut ga.data_mut()[ao * m * k..(ao + 1) * m * k],
                        gslice,
                        &bv.data()[bo * k * n..(bo + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                    mm_tn(
                        &mut gb.data_mut()[bo * k * n..(bo + 1) * k * n],
                        &av.data()[ao * m * k..(ao + 1) * m * k],
                        gslice,
                        m,
                        k,
                        n,
                    );
                }
                vec![(aid, ga), (bid, gb)]
            })),
        ))
    }

    /// `W[M,K] @ x[K] -> [M]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, TensorError> {
        let k = match self.shape(x) {
            [k] => *k,
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "matvec",
                    lhs: self.shape(w).to_vec(),
                    rhs: other.to_vec(),
                })
            }
        };
        let m = match self.shape(w) {
            [m, wk] if *wk == k => *m,
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "matvec",
                    lhs: other.to_vec(),
                    rhs: vec![k],
                })
            }
        };
        let xc = self.reshape(x, vec![k, 1])?;
        let y = self.matmul(w, xc)?;
        self.reshape(y, vec![m])
    }

    /// Per-pixel linear map across channels: `x[Cin,H,W]`, `w[Cout,Cin]`,
    /// optional `bias[Cout]` -> `[Cout,H,W]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let xv = self.rc(x);
        let wv = self.rc(w);
        let (cin, h, wd) = match *xv.shape() {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1x1",
                    lhs: xv.shape().to_vec(),
                    rhs: wv.shape().to_vec(),
                })
            }
        };
        let cout = match *wv.shape() {
            [o, i] if i == cin => o,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1x1",
                    lhs: xv.shape().to_vec(),
                    rhs: wv.shape().to_vec(),
                })
            }
        };
        let bv = bias.map(|b| self.rc(b));
        if let Some(ref b) = bv {
            if b.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1x1_bias",
                    lhs: vec![cout],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let hw = h * wd;
        let mut out = Tensor::zeros(&[cout, h, wd]);
        for o in 0..cout {
            let orow = &mut out.data_mut()[o * hw..(o + 1) * hw];
            if let Some(ref b) = bv {
                let bval = b.data()[o];
                for v in orow.iter_mut() {
                    *v = bval;
                }
            }
            for i in 0..cin {
                let wval = wv.data()[o * cin + i];
                let xrow = &xv.data()[i * hw..(i + 1) * hw];
                for (ov, &xval) in orow.iter_mut().zip(xrow.iter()) {
                    *ov += wval * xval;
                }
            }
        }
        debug_assert!(out.all_finite(), "non-finite values produced by conv1x1");

        let (xid, wid) = (x.0, w.0);
        let bid = bias.map(|b| b.0);
        Ok(self.push(
            "conv1x1",
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                let mut gx = Tensor::zeros(xv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                for o in 0..cout {
                    let grow = &g.data()[o * hw..(o + 1) * hw];
                    for i in 0..cin {
                        let wval = wv.data()[o * cin + i];
                        let xrow = &xv.data()[i * hw..(i + 1) * hw];
                        let gxrow = &mut gx.data_mut()[i * hw..(i + 1) * hw];
                        let mut acc = T::zero();
                        for ((gxv, &gv), &xval) in
                            gxrow.iter_mut().zip(grow.iter()).zip(xrow.iter())
                        {
                            *gxv += wval * gv;
                            acc += gv * xval;
                        }
                        gw.data_mut()[o * cin + i] = acc;
                    }
                }
                let mut grads = vec![(xid, gx), (wid, gw)];
                if let Some(bid) = bid {
                    let mut gb = Tensor::zeros(&[cout]);
                    for o in 0..cout {
                        let mut s = T::zero();
                        for &gv in &g.data()[o * hw..(o + 1) * hw] {
                            s += gv;
                        }
                        gb.data_mut()[o] = s;
                    }
                    grads.push((bid, gb));
                }
                grads
            })),
        ))
    }

    /// 2-D convolution, stride 1, same (zero) padding, odd kernel.
    /// `x[Cin,H,W]`, `w[Cout,Cin,kh,kw]`, optional `bias[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let xv = self.rc(x);
        let wv = self.rc(w);
        let (cin, h, wd) = match *xv.shape() {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: xv.shape().to_vec(),
                    rhs: wv.shape().to_vec(),
                })
            }
        };
        let (cout, kh, kw) = match *wv.shape() {
            [o, i, kh, kw] if i == cin && kh % 2 == 1 && kw % 2 == 1 => (o, kh, kw),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: xv.shape().to_vec(),
                    rhs: wv.shape().to_vec(),
                })
            }
        };
        let bv = bias.map(|b| self.rc(b));
        if let Some(ref b) = bv {
            if b.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_bias",
                    lhs: vec![cout],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let plane = h * wd;
        let mut out = Tensor::zeros(&[cout, h, wd]);
        for o in 0..cout {
            if let Some(ref b) = bv {
                let bval = b.data()[o];
                for v in &mut out.data_mut()[o * plane..(o + 1) * plane] {
                    *v = bval;
                }
            }
            for i in 0..cin {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wval = wv.data()[((o * cin + i) * kh + dy) * kw + dx];
                        let y0 = ph.saturating_sub(dy);
                        let y1 = (h + ph).saturating_sub(dy).min(h);
                        let x0 = pw.saturating_sub(dx);
                        let x1 = (wd + pw).saturating_sub(dx).min(wd);
                        for y in y0..y1 {
                            let src = (i * h + (y + dy - ph)) * wd + (x0 + dx - pw);
                            let dst = (o * h + y) * wd + x0;
                            let run = x1 - x0;
                            let xrow = &xv.data()[src..src + run];
                            let orow = &mut out.data_mut()[dst..dst + run];
                            for (ov, &xval) in orow.iter_mut().zip(xrow.iter()) {
                                *ov += wval * xval;
                            }
                        }
                    }
                }
            }
        }
        debug_assert!(out.all_finite(), "non-finite values produced by conv2d");

        let (xid, wid) = (x.0, w.0);
        let bid = bias.map(|b| b.0);
        Ok(self.push(
            "conv2d",
            out,
            Some(Box::new(move |g: &Tensor<T>| {
                let mut gx = Tensor::zeros(xv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                for o in 0..cout {
                    for i in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let widx = ((o * cin + i) * kh + dy) * kw + dx;
                                let wval = wv.data()[widx];
                                let y0 = ph.saturating_sub(dy);
                                let y1 = (h + ph).saturating_sub(dy).min(h);
                                let x0 = pw.saturating_sub(dx);
                                let x1 = (wd + pw).saturating_sub(dx).min(wd);
                                let mut wacc = T::zero();
                                for y in y0..y1 {
                                    let src = (i * h + (y + dy - ph)) * wd + (x0 + dx - pw);
                                    let dst = (o * h + y) * wd + x0;
                                    let run = x1 - x0;
                                    let grow = &g.data()[dst..dst + run];
                                    let xrow = &xv.data()[src..src + run];
                                    let gxrow = &mut gx.data_mut()[src..src + run];
                                    for ((gxv, &gv), &xval) in
                                        gxrow.iter_mut().zip(grow.iter()).zip(xrow.iter())
                                    {
                                        *gxv += wval * gv;
                                        wacc += gv * xval;
                                    }
                                }
                                gw.data_mut()[widx] += wacc;
                            }
                        }
                    }
                }
                let mut grads = vec![(xid, gx), (wid, gw)];
                if let Some(bid) = bid {
                    let mut gb = Tensor::zeros(&[cout]);
                    for o in 0..cout {
                        let mut s = T::zero();
                        for &gv in &g.data()[o * plane..(o + 1) * plane] {
                            s += gv;
                        }
                        gb.data_mut()[o] = s;
                    }
                    grads.push((bid, gb));
                }
                grads
            })),
        ))
    }

    /// `x[N,K] @ w[K,M] (+ b[M])` row-wise linear layer.
    pub fn linear_rows(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// `W[M,K] @ x[K] + b[M]` vector linear layer.
    pub fn linear_vec(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matvec(w, x)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i2 = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn hand_matmul_1x2_2x1() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_vs_triple_loop_oracle() {
        // Independent triple-loop product over a fixed pseudo-random fill.
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 + 11) % 19) as f64 / 7.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 + 5) % 23) as f64 / 9.0).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expect[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let av = g.leaf(Tensor::new(vec![m, k], a).unwrap());
        let bv = g.leaf(Tensor::new(vec![k, n], b).unwrap());
        let y = g.matmul(av, bv).unwrap();
        for (got, want) in g.value(y).data().iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts() {
        // [2,1,2,3] @ [3,2] -> [2,1,2,2]
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_fn(&[2, 1, 2, 3], |i| i as f64));
        let b = g.leaf(Tensor::from_fn(&[3, 2], |i| (i as f64) * 0.5));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 2, 2]);
        // spot-check batch 1, row 1, col 0: a row [9,10,11], b col 0 [0,1,2]
        let got = g.value(y).data()[1 * 4 + 1 * 2];
        assert!((got - (9.0 * 0.0 + 10.0 * 1.0 + 11.0 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn conv1x1_identity_and_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let ident = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = g.leaf(Tensor::zeros(&[2]));
        let y = g.conv1x1(x, ident, Some(zb)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let ones_x = g.leaf(Tensor::ones(&[2, 2, 2]));
        let wsum = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let zb1 = g.leaf(Tensor::zeros(&[1]));
        let s = g.conv1x1(ones_x, wsum, Some(zb1)).unwrap();
        assert_eq!(g.shape(s), &[1, 2, 2]);
        assert!(g.value(s).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv1x1_matches_matmul_route() {
        // reshape-matmul-reshape oracle over the flattened spatial positions
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[3, 2, 2], |i| ((i * 31 + 7) % 13) as f64 / 5.0));
        let w = g.leaf(Tensor::from_fn(&[4, 3], |i| ((i * 17 + 3) % 11) as f64 / 6.0));
        let y = g.conv1x1(x, w, None).unwrap();

        let xm = g.reshape(x, vec![3, 4]).unwrap();
        let ym = g.matmul(w, xm).unwrap();
        let ym = g.reshape(ym, vec![4, 2, 2]).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(ym).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv1x1_channel_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3, 2, 2]));
        let w = g.leaf(Tensor::zeros(&[4, 5]));
        assert!(g.conv1x1(x, w, None).is_err());
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[1, 4, 4], |i| i as f64 * 0.3 - 2.0));
        let mut wdata = vec![0.0; 9];
        wdata[4] = 1.0; // centre tap
        let w = g.leaf(Tensor::new(vec![1, 1, 3, 3], wdata).unwrap());
        let y = g.conv2d(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }
}
