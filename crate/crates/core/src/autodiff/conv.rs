//! Convolution and pooling ops, GEMM-backed via im2col.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

use super::{to_standard, Scalar, Tape, Var};

pub type Stride2 = (usize, usize);
pub type Pad2 = (usize, usize);

struct Conv2dGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: Stride2,
    pad: Pad2,
    ho: usize,
    wo: usize,
}

fn im2col<S: Scalar>(xsl: &[S], g: &Conv2dGeom) -> Array2<S> {
    let cols = g.n * g.ho * g.wo;
    let mut col = Array2::<S>::zeros((g.cin * g.kh * g.kw, cols));
    let csl = col.as_slice_mut().unwrap();
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    for n in 0..g.n {
        for c in 0..g.cin {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let r = (c * g.kh + i) * g.kw + j;
                    for oh in 0..g.ho {
                        let ih = (oh * sh + i) as isize - ph as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let (ow_lo, ow_hi) = ow_range(j, pw, sw, g.w, g.wo);
                        if ow_lo > ow_hi {
                            continue;
                        }
                        let col_base = r * cols + (n * g.ho + oh) * g.wo;
                        let x_base = ((n * g.cin + c) * g.h + ih as usize) * g.w;
                        if sw == 1 {
                            // iw = ow + j - pw; ow_lo chosen so this stays >= 0
                            let iw0 = (ow_lo as isize + j as isize - pw as isize) as usize;
                            let len = ow_hi - ow_lo + 1;
                            csl[col_base + ow_lo..col_base + ow_lo + len]
                                .copy_from_slice(&xsl[x_base + iw0..x_base + iw0 + len]);
                        } else {
                            for ow in ow_lo..=ow_hi {
                                let iw = (ow * sw + j) as isize - pw as isize;
                                csl[col_base + ow] = xsl[x_base + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<S: Scalar>(col: &Array2<S>, g: &Conv2dGeom) -> ArrayD<S> {
    let cols = g.n * g.ho * g.wo;
    let csl = col.as_slice().unwrap();
    let mut dx = ArrayD::<S>::zeros(IxDyn(&[g.n, g.cin, g.h, g.w]));
    let xsl = dx.as_slice_mut().unwrap();
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    for n in 0..g.n {
        for c in 0..g.cin {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let r = (c * g.kh + i) * g.kw + j;
                    for oh in 0..g.ho {
                        let ih = (oh * sh + i) as isize - ph as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let (ow_lo, ow_hi) = ow_range(j, pw, sw, g.w, g.wo);
                        if ow_lo > ow_hi {
                            continue;
                        }
                        let col_base = r * cols + (n * g.ho + oh) * g.wo;
                        let x_base = ((n * g.cin + c) * g.h + ih as usize) * g.w;
                        for ow in ow_lo..=ow_hi {
                            let iw = (ow * sw + j) as isize - pw as isize;
                            xsl[x_base + iw as usize] += csl[col_base + ow];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Valid output-column range so that `iw = ow*sw + j - pw` stays inside `[0, w)`.
fn ow_range(j: usize, pw: usize, sw: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if pw > j { (pw - j).div_ceil(sw) } else { 0 };
    let hi_raw = w as isize - 1 - j as isize + pw as isize;
    if hi_raw < 0 {
        return (1, 0);
    }
    let hi = (hi_raw as usize / sw).min(wo.saturating_sub(1));
    (lo, hi)
}

impl<S: Scalar> Tape<S> {
    /// 2-d convolution over `x[N, Cin, H, W]` with `w[Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: Stride2,
        pad: Pad2,
    ) -> Var {
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N,Cin,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,kh,kw]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = Conv2dGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad.0 - ws[2]) / stride.0 + 1,
            wo: (xs[3] + 2 * pad.1 - ws[3]) / stride.1 + 1,
        };
        assert!(
            xs[2] + 2 * pad.0 >= ws[2] && xs[3] + 2 * pad.1 >= ws[3],
            "conv2d kernel larger than padded input"
        );

        let xstd = to_standard(self.val(x));
        let col = Rc::new(im2col(xstd.as_slice().unwrap(), &geom));
        let ckk = geom.cin * geom.kh * geom.kw;
        let wstd = to_standard(self.val(w));
        let w2 = ArrayView2::from_shape((geom.cout, ckk), wstd.as_slice().unwrap()).unwrap();
        let out2 = w2.dot(&*col); // [Cout, N*Ho*Wo]

        let hw = geom.ho * geom.wo;
        let mut out = ArrayD::<S>::zeros(IxDyn(&[geom.n, geom.cout, geom.ho, geom.wo]));
        {
            let osl = out.as_slice_mut().unwrap();
            let o2 = out2.as_slice().unwrap();
            for co in 0..geom.cout {
                for n in 0..geom.n {
                    let src = co * (geom.n * hw) + n * hw;
                    let dst = (n * geom.cout + co) * hw;
                    osl[dst..dst + hw].copy_from_slice(&o2[src..src + hw]);
                }
            }
            if let Some(bv) = b {
                let bias = to_standard(self.val(bv));
                let bsl = bias.as_slice().unwrap();
                assert_eq!(bsl.len(), geom.cout);
                for n in 0..geom.n {
                    for co in 0..geom.cout {
                        let base = (n * geom.cout + co) * hw;
                        for v in &mut osl[base..base + hw] {
                            *v += bsl[co];
                        }
                    }
                }
            }
        }

        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let need_b = b.map(|bv| self.requires_grad(bv)).unwrap_or(false);
        let has_b = b.is_some();
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let geom = Rc::new(geom);
        self.op(out, parents, |_| {
            Box::new(move |t, gout| {
                let g = &*geom;
                let hw = g.ho * g.wo;
                let gstd = to_standard(gout);
                let gsl = gstd.as_slice().unwrap();
                let mut g2 = Array2::<S>::zeros((g.cout, g.n * hw));
                {
                    let g2sl = g2.as_slice_mut().unwrap();
                    for co in 0..g.cout {
                        for n in 0..g.n {
                            let dst = co * (g.n * hw) + n * hw;
                            let src = (n * g.cout + co) * hw;
                            g2sl[dst..dst + hw].copy_from_slice(&gsl[src..src + hw]);
                        }
                    }
                }
                let ckk = g.cin * g.kh * g.kw;
                let mut grads: Vec<Option<ArrayD<S>>> = Vec::with_capacity(3);
                grads.push(need_x.then(|| {
                    let wstd = to_standard(t.val(w));
                    let w2 =
                        ArrayView2::from_shape((g.cout, ckk), wstd.as_slice().unwrap()).unwrap();
                    let dcol = w2.t().dot(&g2);
                    col2im(&dcol, g)
                }));
                grads.push(need_w.then(|| {
                    let dw2 = g2.dot(&col.t());
                    dw2.into_shape_with_order(IxDyn(&[g.cout, g.cin, g.kh, g.kw]))
                        .unwrap()
                }));
                if has_b {
                    grads.push(need_b.then(|| g2.sum_axis(ndarray::Axis(1)).into_dyn()));
                }
                grads
            })
        })
    }

    /// 1-d convolution along the last axis of `x[N, Cin, L]`, stride 1 with
    /// explicit (possibly asymmetric) padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, pad: (usize, usize)) -> Var {
        // reuse the 2-d machinery with H = 1
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv1d input must be [N,Cin,L]");
        assert_eq!(ws.len(), 3, "conv1d weight must be [Cout,Cin,k]");
        let (pl, pr) = pad;
        // asymmetric padding: pre-pad the input on the right if pr != pl,
        // then run with symmetric (pl, pl)... simpler: pad manually into a buffer.
        let n = xs[0];
        let cin = xs[1];
        let l = xs[2];
        let k = ws[2];
        let lp = l + pl + pr;
        assert!(lp >= k, "conv1d kernel larger than padded input");
        let x4 = self.reshape(x, &[n, cin, 1, l]);
        let padded = if pl == 0 && pr == 0 {
            x4
        } else {
            let zeros_l = self.constant(ArrayD::zeros(IxDyn(&[n, cin, 1, pl])));
            let zeros_r = self.constant(ArrayD::zeros(IxDyn(&[n, cin, 1, pr])));
            self.concat(3, &[zeros_l, x4, zeros_r])
        };
        let w4 = self.reshape(w, &[ws[0], cin, 1, k]);
        let out = self.conv2d(padded, w4, b, (1, 1), (0, 0));
        let lo = lp - k + 1;
        self.reshape(out, &[n, ws[0], lo])
    }

    /// Max pooling over `x[N, C, H, W]`.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let xstd = to_standard(self.val(x));
        let xsl = xstd.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(IxDyn(&[n, c, ho, wo]));
        let mut arg: Vec<usize> = vec![0; n * c * ho * wo];
        {
            let osl = out.as_slice_mut().unwrap();
            let mut oi = 0;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut best = S::neg_infinity();
                            let mut best_idx = 0usize;
                            for i in 0..k {
                                let ih = (oh * stride + i) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for j in 0..k {
                                    let iw = (ow * stride + j) as isize - pad as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let idx = base + ih as usize * w + iw as usize;
                                    if xsl[idx] > best {
                                        best = xsl[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            osl[oi] = best;
                            arg[oi] = best_idx;
                            oi += 1;
                        }
                    }
                }
            }
        }
        let arg = Rc::new(arg);
        let total = n * c * h * w;
        self.op(out, vec![x], |_| {
            Box::new(move |_t, g| {
                let gstd = to_standard(g);
                let gsl = gstd.as_slice().unwrap();
                let mut dx = ArrayD::<S>::zeros(IxDyn(&[n, c, h, w]));
                let dsl = dx.as_slice_mut().unwrap();
                debug_assert_eq!(dsl.len(), total);
                for (oi, &ai) in arg.iter().enumerate() {
                    dsl[ai] += gsl[oi];
                }
                vec![Some(dx)]
            })
        })
    }

    /// Length-preserving max pooling along the last axis of `x[N, C, L]`
    /// (stride 1, window centered, edges clipped).
    pub fn maxpool1d_same(&mut self, x: Var, k: usize) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let pl = (k - 1) / 2;
        let xstd = to_standard(self.val(x));
        let xsl = xstd.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(IxDyn(&[n, c, l]));
        let mut arg: Vec<usize> = vec![0; n * c * l];
        {
            let osl = out.as_slice_mut().unwrap();
            let mut oi = 0;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * l;
                    for li in 0..l {
                        let lo = li.saturating_sub(pl);
                        let hi = (li + k - 1 - pl).min(l - 1);
                        let mut best = S::neg_infinity();
                        let mut best_idx = 0usize;
                        for p in lo..=hi {
                            if xsl[base + p] > best {
                                best = xsl[base + p];
                                best_idx = base + p;
                            }
                        }
                        osl[oi] = best;
                        arg[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
        let arg = Rc::new(arg);
        self.op(out, vec![x], |_| {
            Box::new(move |_t, g| {
                let gstd = to_standard(g);
                let gsl = gstd.as_slice().unwrap();
                let mut dx = ArrayD::<S>::zeros(IxDyn(&[n, c, l]));
                let dsl = dx.as_slice_mut().unwrap();
                for (oi, &ai) in arg.iter().enumerate() {
                    dsl[ai] += gsl[oi];
                }
                vec![Some(dx)]
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::Tape;
    use ndarray::IxDyn;

    #[test]
    fn conv2d_matches_naive() {
        let x = rand_arr(&[2, 3, 5, 6], 1);
        let w = rand_arr(&[4, 3, 3, 3], 2);
        let b = rand_arr(&[4], 3);
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let bv = t.constant(b.clone());
        let y = t.conv2d(xv, wv, Some(bv), (2, 2), (1, 1));
        let yv = t.val(y);
        assert_eq!(yv.shape(), &[2, 4, 3, 3]);

        // brute-force reference
        for n in 0..2 {
            for co in 0..4 {
                for oh in 0..3 {
                    for ow in 0..3 {
                        let mut acc = b[IxDyn(&[co])];
                        for c in 0..3 {
                            for i in 0..3 {
                                for j in 0..3 {
                                    let ih = (oh * 2 + i) as isize - 1;
                                    let iw = (ow * 2 + j) as isize - 1;
                                    if ih < 0 || ih >= 5 || iw < 0 || iw >= 6 {
                                        continue;
                                    }
                                    acc += x[IxDyn(&[n, c, ih as usize, iw as usize])]
                                        * w[IxDyn(&[co, c, i, j])];
                                }
                            }
                        }
                        let got = yv[IxDyn(&[n, co, oh, ow])];
                        assert!((got - acc).abs() < 1e-12, "conv mismatch {got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_grads() {
        let x = rand_arr(&[2, 2, 4, 4], 4);
        let w = rand_arr(&[3, 2, 3, 3], 5);
        let b = rand_arr(&[3], 6);
        let rel = finite_diff_check(&[x, w, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), (1, 1), (1, 1));
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-6);
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn conv2d_strided_grads() {
        let x = rand_arr(&[1, 2, 6, 6], 7);
        let w = rand_arr(&[2, 2, 3, 3], 8);
        let rel = finite_diff_check(&[x, w], &|t, v| {
            let y = t.conv2d(v[0], v[1], None, (2, 2), (1, 1));
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-6);
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn conv1d_same_length_and_grads() {
        let x = rand_arr(&[2, 3, 7], 9);
        let w = rand_arr(&[4, 3, 4], 10); // even kernel, asymmetric pad
        let b = rand_arr(&[4], 11);
        {
            let mut t = Tape::<f64>::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.conv1d(xv, wv, None, (1, 2));
            assert_eq!(t.val(y).shape(), &[2, 4, 7]);
        }
        let rel = finite_diff_check(&[x, w, b], &|t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), (1, 2));
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-6);
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn maxpool2d_grads() {
        // distinct values so the argmax is stable under the FD probe
        let x = rand_arr(&[1, 2, 4, 4], 12).mapv(|v| v * 3.0);
        let rel = finite_diff_check(&[x], &|t, v| {
            let y = t.maxpool2d(v[0], 2, 2, 0);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-7);
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn maxpool1d_same_shape_and_grads() {
        let x = rand_arr(&[2, 3, 6], 13).mapv(|v| v * 3.0);
        {
            let mut t = Tape::<f64>::new();
            let xv = t.constant(x.clone());
            let y = t.maxpool1d_same(xv, 3);
            assert_eq!(t.val(y).shape(), &[2, 3, 6]);
        }
        let rel = finite_diff_check(&[x], &|t, v| {
            let y = t.maxpool1d_same(v[0], 3);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-7);
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn maxpool2d_overlapping_window_keeps_shape() {
        let x = rand_arr(&[1, 1, 4, 4], 14);
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x);
        let y = t.maxpool2d(xv, 3, 1, 1);
        assert_eq!(t.val(y).shape(), &[1, 1, 4, 4]);
    }
}
