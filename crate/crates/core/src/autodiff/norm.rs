//! Normalization and softmax-family ops.

use ndarray::{ArrayD, IxDyn};

use super::{to_standard, Scalar, Tape, Var};

impl<S: Scalar> Tape<S> {
    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.val(x).shape().to_vec();
        let d = *shape.last().expect("layer_norm needs rank >= 1");
        let rows = self.val(x).len() / d;
        assert_eq!(self.val(gamma).len(), d);
        assert_eq!(self.val(beta).len(), d);
        let eps = S::fr(eps);

        let xs = to_standard(self.val(x));
        let xsl = xs.as_slice().unwrap();
        let gv = to_standard(self.val(gamma));
        let gvs = gv.as_slice().unwrap();
        let bv = to_standard(self.val(beta));
        let bvs = bv.as_slice().unwrap();

        let mut xhat = vec![S::zero(); rows * d];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        let invd = S::fr(1.0 / d as f64);
        for r in 0..rows {
            let row = &xsl[r * d..(r + 1) * d];
            let mut mu = S::zero();
            for &v in row {
                mu += v;
            }
            mu = mu * invd;
            let mut var = S::zero();
            for &v in row {
                let c = v - mu;
                var += c * c;
            }
            var = var * invd;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for i in 0..d {
                let xh = (row[i] - mu) * inv;
                xhat[r * d + i] = xh;
                out[r * d + i] = gvs[i] * xh + bvs[i];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let need_x = self.requires_grad(x);
        let need_g = self.requires_grad(gamma);
        let need_b = self.requires_grad(beta);
        let xhat = std::rc::Rc::new(xhat);
        let inv_std = std::rc::Rc::new(inv_std);
        self.op(value, vec![x, gamma, beta], |_| {
            Box::new(move |t, g| {
                let gstd = to_standard(g);
                let gsl = gstd.as_slice().unwrap();
                let gammav = to_standard(t.val(gamma));
                let gamsl = gammav.as_slice().unwrap();
                let invd = S::fr(1.0 / d as f64);

                let dgamma = need_g.then(|| {
                    let mut dg = vec![S::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += gsl[r * d + i] * xhat[r * d + i];
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[d]), dg).unwrap()
                });
                let dbeta = need_b.then(|| {
                    let mut db = vec![S::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            db[i] += gsl[r * d + i];
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[d]), db).unwrap()
                });
                let dx = need_x.then(|| {
                    let mut dx = vec![S::zero(); rows * d];
                    for r in 0..rows {
                        let mut m1 = S::zero(); // mean of dxhat
                        let mut m2 = S::zero(); // mean of dxhat * xhat
                        for i in 0..d {
                            let dxh = gsl[r * d + i] * gamsl[i];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + i];
                        }
                        m1 = m1 * invd;
                        m2 = m2 * invd;
                        for i in 0..d {
                            let dxh = gsl[r * d + i] * gamsl[i];
                            dx[r * d + i] = inv_std[r] * (dxh - m1 - xhat[r * d + i] * m2);
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap()
                });
                vec![dx, dgamma, dbeta]
            })
        })
    }

    /// Normalize each leading-axis group over all remaining axes, with a
    /// per-channel affine on axis 1. Batch-size independent (used in place
    /// of batch norm throughout).
    pub fn frame_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.val(x).shape().to_vec();
        assert!(shape.len() >= 2);
        let n = shape[0];
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();
        let group = c * spatial;
        assert_eq!(self.val(gamma).len(), c);
        assert_eq!(self.val(beta).len(), c);
        let eps = S::fr(eps);

        let xs = to_standard(self.val(x));
        let xsl = xs.as_slice().unwrap();
        let gv = to_standard(self.val(gamma));
        let gvs = gv.as_slice().unwrap();
        let bv = to_standard(self.val(beta));
        let bvs = bv.as_slice().unwrap();

        let mut xhat = vec![S::zero(); n * group];
        let mut inv_std = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * group];
        let invg = S::fr(1.0 / group as f64);
        for ni in 0..n {
            let block = &xsl[ni * group..(ni + 1) * group];
            let mut mu = S::zero();
            for &v in block {
                mu += v;
            }
            mu = mu * invg;
            let mut var = S::zero();
            for &v in block {
                let d = v - mu;
                var += d * d;
            }
            var = var * invg;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[ni] = inv;
            for ci in 0..c {
                for s in 0..spatial {
                    let idx = ni * group + ci * spatial + s;
                    let xh = (xsl[idx] - mu) * inv;
                    xhat[idx] = xh;
                    out[idx] = gvs[ci] * xh + bvs[ci];
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let need_x = self.requires_grad(x);
        let need_g = self.requires_grad(gamma);
        let need_b = self.requires_grad(beta);
        let xhat = std::rc::Rc::new(xhat);
        let inv_std = std::rc::Rc::new(inv_std);
        self.op(value, vec![x, gamma, beta], |_| {
            Box::new(move |t, g| {
                let gstd = to_standard(g);
                let gsl = gstd.as_slice().unwrap();
                let gammav = to_standard(t.val(gamma));
                let gamsl = gammav.as_slice().unwrap();
                let invg = S::fr(1.0 / group as f64);

                let dgamma = need_g.then(|| {
                    let mut dg = vec![S::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut acc = S::zero();
                            for s in 0..spatial {
                                let idx = ni * group + ci * spatial + s;
                                acc += gsl[idx] * xhat[idx];
                            }
                            dg[ci] += acc;
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[c]), dg).unwrap()
                });
                let dbeta = need_b.then(|| {
                    let mut db = vec![S::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut acc = S::zero();
                            for s in 0..spatial {
                                acc += gsl[ni * group + ci * spatial + s];
                            }
                            db[ci] += acc;
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap()
                });
                let dx = need_x.then(|| {
                    let mut dx = vec![S::zero(); n * group];
                    for ni in 0..n {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for ci in 0..c {
                            for s in 0..spatial {
                                let idx = ni * group + ci * spatial + s;
                                let dxh = gsl[idx] * gamsl[ci];
                                m1 += dxh;
                                m2 += dxh * xhat[idx];
                            }
                        }
                        m1 = m1 * invg;
                        m2 = m2 * invg;
                        for ci in 0..c {
                            for s in 0..spatial {
                                let idx = ni * group + ci * spatial + s;
                                let dxh = gsl[idx] * gamsl[ci];
                                dx[idx] = inv_std[ni] * (dxh - m1 - xhat[idx] * m2);
                            }
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap()
                });
                vec![dx, dgamma, dbeta]
            })
        })
    }

    /// Softmax over the last axis. With `keep < D`, only the `keep` largest
    /// entries per row stay active (ties broken toward the lower index); the
    /// rest get exactly zero weight.
    pub fn softmax_topk(&mut self, x: Var, keep: usize) -> Var {
        let shape = self.val(x).shape().to_vec();
        let d = *shape.last().expect("softmax needs rank >= 1");
        let rows = self.val(x).len() / d;
        assert!(keep >= 1, "softmax_topk needs keep >= 1");

        let xs = to_standard(self.val(x));
        let xsl = xs.as_slice().unwrap();
        let mut out = vec![S::zero(); rows * d];
        let mut order: Vec<usize> = Vec::new();
        for r in 0..rows {
            let row = &xsl[r * d..(r + 1) * d];
            let kept: Vec<usize> = if keep >= d {
                (0..d).collect()
            } else {
                order.clear();
                order.extend(0..d);
                order.sort_unstable_by(|&i, &j| {
                    row[j].partial_cmp(&row[i]).unwrap().then(i.cmp(&j))
                });
                let mut k: Vec<usize> = order[..keep].to_vec();
                k.sort_unstable();
                k
            };
            let mut mx = S::neg_infinity();
            for &i in &kept {
                if row[i] > mx {
                    mx = row[i];
                }
            }
            let mut denom = S::zero();
            for &i in &kept {
                let e = (row[i] - mx).exp();
                out[r * d + i] = e;
                denom += e;
            }
            for &i in &kept {
                out[r * d + i] = out[r * d + i] / denom;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.op(value, vec![x], |id| {
            Box::new(move |t, g| {
                let y = to_standard(t.val(id));
                let ysl = y.as_slice().unwrap();
                let gstd = to_standard(g);
                let gsl = gstd.as_slice().unwrap();
                let mut dx = vec![S::zero(); rows * d];
                for r in 0..rows {
                    let mut dot = S::zero();
                    for i in 0..d {
                        dot += ysl[r * d + i] * gsl[r * d + i];
                    }
                    for i in 0..d {
                        dx[r * d + i] = ysl[r * d + i] * (gsl[r * d + i] - dot);
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap())]
            })
        })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.val(x).shape().last().unwrap();
        self.softmax_topk(x, d)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.val(x).shape().to_vec();
        let d = *shape.last().expect("log_softmax needs rank >= 1");
        let rows = self.val(x).len() / d;
        let xs = to_standard(self.val(x));
        let xsl = xs.as_slice().unwrap();
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = &xsl[r * d..(r + 1) * d];
            let mut mx = S::neg_infinity();
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = S::zero();
            for &v in row {
                denom += (v - mx).exp();
            }
            let lse = denom.ln() + mx;
            for i in 0..d {
                out[r * d + i] = row[i] - lse;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.op(value, vec![x], |id| {
            Box::new(move |t, g| {
                let y = to_standard(t.val(id));
                let ysl = y.as_slice().unwrap();
                let gstd = to_standard(g);
                let gsl = gstd.as_slice().unwrap();
                let mut dx = vec![S::zero(); rows * d];
                for r in 0..rows {
                    let mut gsum = S::zero();
                    for i in 0..d {
                        gsum += gsl[r * d + i];
                    }
                    for i in 0..d {
                        dx[r * d + i] = gsl[r * d + i] - ysl[r * d + i].exp() * gsum;
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap())]
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::Tape;

    #[test]
    fn layer_norm_grads() {
        let x = rand_arr(&[3, 5], 1);
        let g = rand_arr(&[5], 2).mapv(|v| v + 1.5);
        let b = rand_arr(&[5], 3);
        let rel = finite_diff_check(&[x, g, b], &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-6);
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn frame_norm_grads() {
        let x = rand_arr(&[2, 3, 2, 2], 4);
        let g = rand_arr(&[3], 5).mapv(|v| v + 1.5);
        let b = rand_arr(&[3], 6);
        let rel = finite_diff_check(&[x, g, b], &|t, v| {
            let y = t.frame_norm(v[0], v[1], v[2], 1e-5);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-6);
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = rand_arr(&[4, 7], 7);
        let mut t = Tape::<f64>::new();
        let v = t.constant(x);
        let y = t.softmax(v);
        for r in t.val(y).rows() {
            let s: f64 = r.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_topk_keeps_exact_count_lowest_index_ties() {
        let mut t = Tape::<f64>::new();
        let x = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 6]), vec![1.0; 6]).unwrap();
        let v = t.constant(x);
        let y = t.softmax_topk(v, 4);
        let row: Vec<f64> = t.val(y).iter().copied().collect();
        // all-equal scores: indices 0..4 win, uniform 1/4
        assert_eq!(
            row.iter().map(|&v| (v > 0.0) as usize).collect::<Vec<_>>(),
            vec![1, 1, 1, 1, 0, 0]
        );
        for &w in &row[..4] {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_topk_grads() {
        let x = rand_arr(&[3, 6], 8);
        let w = rand_arr(&[3, 6], 9);
        let rel = finite_diff_check(&[x.clone()], &|t, v| {
            let y = t.softmax_topk(v[0], 4);
            let wc = t.constant(w.clone());
            let m = t.mul(y, wc);
            t.sum_all(m)
        }, 1e-6);
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn log_softmax_grads() {
        let x = rand_arr(&[4, 5], 10);
        let w = rand_arr(&[4, 5], 11);
        let rel = finite_diff_check(&[x.clone()], &|t, v| {
            let y = t.log_softmax(v[0]);
            let wc = t.constant(w.clone());
            let m = t.mul(y, wc);
            t.sum_all(m)
        }, 1e-6);
        assert!(rel < 1e-6, "rel {rel}");
    }
}
