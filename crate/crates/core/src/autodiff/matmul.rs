//! Dense and batched matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Ix2, Ix3, Ix4, IxDyn};

use super::{to_standard, Scalar, Tape, Var};

fn as2<S: Scalar>(a: &ArrayD<S>) -> ndarray::ArrayView2<'_, S> {
    a.view().into_dimensionality::<Ix2>().expect("2-d view")
}

impl<S: Scalar> Tape<S> {
    /// `x[N, in] * w[in, out] (+ b[out])`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = as2(self.val(x)).to_owned();
        let wv = as2(self.val(w)).to_owned();
        assert_eq!(xv.shape()[1], wv.shape()[0], "affine inner dims");
        let mut out = xv.dot(&wv);
        if let Some(bv) = b {
            let bias = self.val(bv);
            assert_eq!(bias.len(), out.shape()[1]);
            let bias1 = bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out += &bias1;
        }
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let need_b = b.map(|bv| self.requires_grad(bv)).unwrap_or(false);
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        self.op(out.into_dyn(), parents, |_| {
            Box::new(move |t, g| {
                let g2 = as2(g);
                let mut grads = Vec::with_capacity(3);
                grads.push(need_x.then(|| g2.dot(&as2(t.val(w)).t()).into_dyn()));
                grads.push(need_w.then(|| as2(t.val(x)).t().dot(&g2).into_dyn()));
                if b.is_some() {
                    grads.push(need_b.then(|| g2.sum_axis(ndarray::Axis(0)).into_dyn()));
                }
                grads
            })
        })
    }

    /// Batched product `a[G, m, k] * b[G, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (g_a, m, k) = dims3(self.val(a));
        let (g_b, k2, n) = dims3(self.val(b));
        assert_eq!((g_a, k), (g_b, k2), "bmm shapes");
        let value = batched_mm(self.val(a), self.val(b), false, false, g_a, m, k, n);
        let need_a = self.requires_grad(a);
        let need_b = self.requires_grad(b);
        self.op(value, vec![a, b], |_| {
            Box::new(move |t, gout| {
                let da = need_a.then(|| batched_mm(gout, t.val(b), false, true, g_a, m, n, k));
                let db = need_b.then(|| batched_mm(t.val(a), gout, true, false, g_a, k, m, n));
                vec![da, db]
            })
        })
    }

    /// Batched product against transposed rhs: `a[G, m, k] * b[G, n, k]^T -> [G, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (g_a, m, k) = dims3(self.val(a));
        let (g_b, n, k2) = dims3(self.val(b));
        assert_eq!((g_a, k), (g_b, k2), "bmm_nt shapes");
        let value = batched_mm(self.val(a), self.val(b), false, true, g_a, m, k, n);
        let need_a = self.requires_grad(a);
        let need_b = self.requires_grad(b);
        self.op(value, vec![a, b], |_| {
            Box::new(move |t, gout| {
                let da = need_a.then(|| batched_mm(gout, t.val(b), false, false, g_a, m, n, k));
                let db = need_b.then(|| batched_mm(gout, t.val(a), true, false, g_a, n, m, k));
                vec![da, db]
            })
        })
    }

    /// Product with a per-time parameter bank: `x[B, T, m, k] * w[T, k, n]`.
    /// The weight gradient sums over the batch in index order.
    pub fn bmm_time_param(&mut self, x: Var, w: Var) -> Var {
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 3);
        let (b, t, m, k) = (xs[0], xs[1], xs[2], xs[3]);
        let (t2, k2, n) = (ws[0], ws[1], ws[2]);
        assert_eq!((t, k), (t2, k2), "bmm_time_param shapes");

        let value = {
            let xv = self.val(x).view().into_dimensionality::<Ix4>().unwrap();
            let wv = self.val(w).view().into_dimensionality::<Ix3>().unwrap();
            let mut out = ndarray::Array4::<S>::zeros((b, t, m, n));
            for bi in 0..b {
                for ti in 0..t {
                    let xm = xv
                        .index_axis(ndarray::Axis(0), bi)
                        .index_axis_move(ndarray::Axis(0), ti);
                    let wm = wv.index_axis(ndarray::Axis(0), ti);
                    let mut om = out
                        .index_axis_mut(ndarray::Axis(0), bi)
                        .index_axis_move(ndarray::Axis(0), ti);
                    general_mat_mul(S::one(), &xm, &wm, S::zero(), &mut om);
                }
            }
            out.into_dyn()
        };
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        self.op(value, vec![x, w], |_| {
            Box::new(move |tape, gout| {
                let gv = to_standard(gout);
                let gv = gv.view().into_dimensionality::<Ix4>().unwrap();
                let xv = tape.val(x).view().into_dimensionality::<Ix4>().unwrap();
                let wv = tape.val(w).view().into_dimensionality::<Ix3>().unwrap();
                let dx = need_x.then(|| {
                    let mut dx = ndarray::Array4::<S>::zeros((b, t, m, k));
                    for bi in 0..b {
                        for ti in 0..t {
                            let gm = gv
                                .index_axis(ndarray::Axis(0), bi)
                                .index_axis_move(ndarray::Axis(0), ti);
                            let wm = wv.index_axis(ndarray::Axis(0), ti);
                            let mut dm = dx
                                .index_axis_mut(ndarray::Axis(0), bi)
                                .index_axis_move(ndarray::Axis(0), ti);
                            general_mat_mul(S::one(), &gm, &wm.t(), S::zero(), &mut dm);
                        }
                    }
                    dx.into_dyn()
                });
                let dw = need_w.then(|| {
                    let mut dw = ndarray::Array3::<S>::zeros((t, k, n));
                    for ti in 0..t {
                        let mut dm = dw.index_axis_mut(ndarray::Axis(0), ti);
                        for bi in 0..b {
                            let xm = xv
                                .index_axis(ndarray::Axis(0), bi)
                                .index_axis_move(ndarray::Axis(0), ti);
                            let gm = gv
                                .index_axis(ndarray::Axis(0), bi)
                                .index_axis_move(ndarray::Axis(0), ti);
                            general_mat_mul(S::one(), &xm.t(), &gm, S::one(), &mut dm);
                        }
                    }
                    dw.into_dyn()
                });
                vec![dx, dw]
            })
        })
    }
}

fn dims3<S: Scalar>(a: &ArrayD<S>) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected rank-3 array, got {s:?}");
    (s[0], s[1], s[2])
}

/// `out[g] = lhs[g]^(ta) * rhs[g]^(tb)`, all batches standard layout.
/// `m`/`k`/`n` describe the effective (post-transpose) product shape.
fn batched_mm<S: Scalar>(
    lhs: &ArrayD<S>,
    rhs: &ArrayD<S>,
    ta: bool,
    tb: bool,
    g: usize,
    m: usize,
    k: usize,
    n: usize,
) -> ArrayD<S> {
    let lhs = to_standard(lhs);
    let rhs = to_standard(rhs);
    let ls = lhs.as_slice().unwrap();
    let rs = rhs.as_slice().unwrap();
    let l_block = lhs.len() / g;
    let r_block = rhs.len() / g;
    let mut out = Array2::<S>::zeros((g * m, n));
    for gi in 0..g {
        let lmat: ArrayView2<S> = if ta {
            ArrayView2::from_shape((k, m), &ls[gi * l_block..(gi + 1) * l_block]).unwrap()
        } else {
            ArrayView2::from_shape((m, k), &ls[gi * l_block..(gi + 1) * l_block]).unwrap()
        };
        let rmat: ArrayView2<S> = if tb {
            ArrayView2::from_shape((n, k), &rs[gi * r_block..(gi + 1) * r_block]).unwrap()
        } else {
            ArrayView2::from_shape((k, n), &rs[gi * r_block..(gi + 1) * r_block]).unwrap()
        };
        let mut om = out.slice_mut(ndarray::s![gi * m..(gi + 1) * m, ..]);
        match (ta, tb) {
            (false, false) => general_mat_mul(S::one(), &lmat, &rmat, S::zero(), &mut om),
            (false, true) => general_mat_mul(S::one(), &lmat, &rmat.t(), S::zero(), &mut om),
            (true, false) => general_mat_mul(S::one(), &lmat.t(), &rmat, S::zero(), &mut om),
            (true, true) => general_mat_mul(S::one(), &lmat.t(), &rmat.t(), S::zero(), &mut om),
        }
    }
    out.into_shape_with_order(IxDyn(&[g, m, n])).unwrap()
}
