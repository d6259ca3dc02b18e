//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! One [`Tape`] per forward pass. Ops append nodes; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients into every node
//! that requires them. Generic over f32 (training) and f64 (gradient
//! checking), with identical code paths so a check in f64 validates the
//! f32 graph structure.

mod conv;
mod matmul;
mod norm;

pub use conv::{Pad2, Stride2};

use ndarray::{ArrayD, Axis, IxDyn};
use num_traits::{Float, NumCast};

/// Element type the tape can differentiate through.
pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn fr(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<S> = Box<dyn Fn(&Tape<S>, &ArrayD<S>) -> Vec<Option<ArrayD<S>>>>;

struct Node<S: Scalar> {
    value: ArrayD<S>,
    parents: Vec<Var>,
    back: Option<BackFn<S>>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<S: Scalar> {
    slots: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<S>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            grad_enabled: true,
        }
    }

    /// Inference-only tape: values are computed, backward closures are not kept.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            grad_enabled: false,
        }
    }

    pub fn val(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter or anything whose gradient is read back).
    pub fn leaf(&mut self, value: ArrayD<S>) -> Var {
        self.push_node(value, Vec::new(), None, true)
    }

    /// Non-differentiable input (data, labels, frozen features).
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn scalar_const(&mut self, v: S) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn push_node(
        &mut self,
        value: ArrayD<S>,
        parents: Vec<Var>,
        back: Option<BackFn<S>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            back,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Append an op node. `make_back` receives the id the node will get, so
    /// backward closures can read their own forward output from the tape.
    pub(crate) fn op(
        &mut self,
        value: ArrayD<S>,
        parents: Vec<Var>,
        make_back: impl FnOnce(Var) -> BackFn<S>,
    ) -> Var {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = Var(self.nodes.len());
        let back = if self.grad_enabled && requires {
            Some(make_back(id))
        } else {
            None
        };
        self.push_node(value, parents, back, requires)
    }

    /// Reverse sweep from a scalar output. Returns one gradient slot per node.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward expects a scalar output"
        );
        let mut slots: Vec<Option<ArrayD<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            S::one(),
        ));
        for i in (0..=loss.0).rev() {
            let Some(out_grad) = slots[i].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[i].back {
                let parent_grads = back(self, &out_grad);
                debug_assert_eq!(parent_grads.len(), self.nodes[i].parents.len());
                for (p, g) in self.nodes[i].parents.iter().zip(parent_grads) {
                    if let Some(g) = g {
                        debug_assert_eq!(
                            g.shape(),
                            self.nodes[p.0].value.shape(),
                            "gradient shape mismatch"
                        );
                        match &mut slots[p.0] {
                            Some(acc) => *acc += &g,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            if self.nodes[i].parents.is_empty() {
                // leaf: keep the accumulated gradient for the caller
                slots[i] = Some(out_grad);
            }
        }
        Grads { slots }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape());
        let value = self.val(a) + self.val(b);
        let need_a = self.requires_grad(a);
        let need_b = self.requires_grad(b);
        self.op(value, vec![a, b], |_| {
            Box::new(move |_t, g| {
                vec![need_a.then(|| g.clone()), need_b.then(|| g.clone())]
            })
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape());
        let value = self.val(a) - self.val(b);
        let need_a = self.requires_grad(a);
        let need_b = self.requires_grad(b);
        self.op(value, vec![a, b], |_| {
            Box::new(move |_t, g| {
                vec![need_a.then(|| g.clone()), need_b.then(|| g.mapv(|x| -x))]
            })
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape());
        let value = self.val(a) * self.val(b);
        let need_a = self.requires_grad(a);
        let need_b = self.requires_grad(b);
        self.op(value, vec![a, b], |_| {
            Box::new(move |t, g| {
                vec![
                    need_a.then(|| g * t.val(Var(b.0))),
                    need_b.then(|| g * t.val(Var(a.0))),
                ]
            })
        })
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.val(a).mapv(|x| x * c);
        self.op(value, vec![a], |_| {
            Box::new(move |_t, g| vec![Some(g.mapv(|x| x * c))])
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.val(a).mapv(|x| if x > S::zero() { x } else { S::zero() });
        self.op(value, vec![a], |_| {
            Box::new(move |t, g| {
                let x = t.val(a);
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                    if xv <= S::zero() {
                        *d = S::zero();
                    }
                });
                vec![Some(dx)]
            })
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = S::one();
        let value = self.val(a).mapv(|x| one / (one + (-x).exp()));
        self.op(value, vec![a], |id| {
            Box::new(move |t, g| {
                let y = t.val(id);
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
                    *d = *d * yv * (S::one() - yv);
                });
                vec![Some(dx)]
            })
        })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.val(a).mapv(|x| x.ln());
        self.op(value, vec![a], |_| {
            Box::new(move |t, g| {
                let x = t.val(a);
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| *d = *d / xv);
                vec![Some(dx)]
            })
        })
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(self.val(a).len(), n, "reshape must preserve element count");
        let old_shape: Vec<usize> = self.val(a).shape().to_vec();
        let value = to_standard(self.val(a))
            .into_shape_with_order(IxDyn(shape))
            .expect("contiguous reshape");
        self.op(value, vec![a], |_| {
            Box::new(move |_t, g| {
                vec![Some(
                    to_standard(g)
                        .into_shape_with_order(IxDyn(&old_shape))
                        .expect("contiguous reshape"),
                )]
            })
        })
    }

    pub fn swap_axes(&mut self, a: Var, i: usize, j: usize) -> Var {
        let mut view = self.val(a).view();
        view.swap_axes(i, j);
        let value = view.as_standard_layout().to_owned();
        self.op(value, vec![a], |_| {
            Box::new(move |_t, g| {
                let mut gv = g.view();
                gv.swap_axes(i, j);
                vec![Some(gv.as_standard_layout().to_owned())]
            })
        })
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self
            .val(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let full: Vec<usize> = self.val(a).shape().to_vec();
        self.op(value, vec![a], |_| {
            Box::new(move |_t, g| {
                let mut dx = ArrayD::zeros(IxDyn(&full));
                dx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![Some(dx)]
            })
        })
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&v| self.val(v).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let lens: Vec<usize> = parts.iter().map(|&v| self.val(v).shape()[axis]).collect();
        let needs: Vec<bool> = parts.iter().map(|&v| self.requires_grad(v)).collect();
        self.op(value, parts.to_vec(), |_| {
            Box::new(move |_t, g| {
                let mut out = Vec::with_capacity(lens.len());
                let mut off = 0;
                for (i, &l) in lens.iter().enumerate() {
                    if needs[i] {
                        out.push(Some(
                            g.slice_axis(Axis(axis), ndarray::Slice::from(off..off + l))
                                .as_standard_layout()
                                .to_owned(),
                        ));
                    } else {
                        out.push(None);
                    }
                    off += l;
                }
                out
            })
        })
    }

    /// Repeat a leading-1 array along axis 0: `[1, ...] -> [n, ...]`.
    pub fn expand0(&mut self, a: Var, n: usize) -> Var {
        assert_eq!(self.val(a).shape()[0], 1);
        let value = {
            let v = self.val(a);
            let mut shape = v.shape().to_vec();
            shape[0] = n;
            v.broadcast(IxDyn(&shape)).expect("broadcast").to_owned()
        };
        self.op(value, vec![a], |_| {
            Box::new(move |_t, g| {
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![Some(summed)]
            })
        })
    }

    /// `x + p` where `p` broadcasts over axis 0 of `x`.
    pub fn add_bcast0(&mut self, x: Var, p: Var) -> Var {
        let value = {
            let xv = self.val(x);
            let pv = self.val(p);
            assert_eq!(&xv.shape()[1..], pv.shape());
            xv + &pv.view().insert_axis(Axis(0))
        };
        let need_x = self.requires_grad(x);
        let need_p = self.requires_grad(p);
        self.op(value, vec![x, p], |_| {
            Box::new(move |_t, g| {
                vec![
                    need_x.then(|| g.clone()),
                    need_p.then(|| g.sum_axis(Axis(0))),
                ]
            })
        })
    }

    /// Cut the value out of the graph: same value, no gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.val(a).clone();
        self.constant(value)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.val(a).sum());
        let shape: Vec<usize> = self.val(a).shape().to_vec();
        self.op(value, vec![a], |_| {
            Box::new(move |_t, g| {
                let gv = g[[]];
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            })
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len();
        let s = self.sum_all(a);
        self.scale(s, S::fr(1.0 / n as f64))
    }

    /// Mean over a set of axes (keepdims = false). Axes must be sorted ascending.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut value = self.val(a).clone();
        let mut count = 1usize;
        for &ax in axes.iter().rev() {
            count *= value.shape()[ax];
            value = value.mean_axis(Axis(ax)).expect("non-empty axis");
        }
        let in_shape: Vec<usize> = self.val(a).shape().to_vec();
        let axes: Vec<usize> = axes.to_vec();
        let inv = S::fr(1.0 / count as f64);
        self.op(value, vec![a], |_| {
            Box::new(move |_t, g| {
                let mut gx = g.clone();
                for &ax in &axes {
                    gx = gx.insert_axis(Axis(ax));
                }
                let expanded = gx.broadcast(IxDyn(&in_shape)).expect("broadcast").to_owned();
                vec![Some(expanded.mapv(|x| x * inv))]
            })
        })
    }

    /// Per-(b, t) scalar gate applied to a `[B, T, ...]` feature block.
    pub fn mul_excite(&mut self, gate: Var, x: Var) -> Var {
        let (b, t) = {
            let gs = self.val(gate).shape();
            assert_eq!(gs.len(), 2);
            (gs[0], gs[1])
        };
        assert_eq!(&self.val(x).shape()[..2], &[b, t]);
        let rest: usize = self.val(x).shape()[2..].iter().product();
        let value = {
            let xv = to_standard(self.val(x));
            let gv = to_standard(self.val(gate));
            let mut out = xv;
            let xs = out.as_slice_mut().unwrap();
            let gs = gv.as_slice().unwrap();
            for bt in 0..b * t {
                let gval = gs[bt];
                for v in &mut xs[bt * rest..(bt + 1) * rest] {
                    *v = *v * gval;
                }
            }
            out
        };
        let need_g = self.requires_grad(gate);
        let need_x = self.requires_grad(x);
        self.op(value, vec![gate, x], |_| {
            Box::new(move |tape, g| {
                let gstd = to_standard(g);
                let gsl = gstd.as_slice().unwrap();
                let dgate = need_g.then(|| {
                    let xstd = to_standard(tape.val(x));
                    let xsl = xstd.as_slice().unwrap();
                    let mut dg = ArrayD::zeros(IxDyn(&[b, t]));
                    let dsl = dg.as_slice_mut().unwrap();
                    for bt in 0..b * t {
                        let mut acc = S::zero();
                        for r in 0..rest {
                            acc += gsl[bt * rest + r] * xsl[bt * rest + r];
                        }
                        dsl[bt] = acc;
                    }
                    dg
                });
                let dx = need_x.then(|| {
                    let gatestd = to_standard(tape.val(gate));
                    let gatesl = gatestd.as_slice().unwrap();
                    let mut dx = gstd.clone();
                    let dsl = dx.as_slice_mut().unwrap();
                    for bt in 0..b * t {
                        let gv = gatesl[bt];
                        for v in &mut dsl[bt * rest..(bt + 1) * rest] {
                            *v = *v * gv;
                        }
                    }
                    dx
                });
                vec![dgate, dx]
            })
        })
    }

    /// Select rows along axis 1: `x[B, T, C]`, `idx[b][i] in [0, T)` -> `[B, len, C]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[Vec<usize>]) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (b, t, c) = (xs[0], xs[1], xs[2]);
        assert_eq!(idx.len(), b);
        let ti = idx[0].len();
        let value = {
            let xstd = to_standard(self.val(x));
            let xsl = xstd.as_slice().unwrap();
            let mut out = ArrayD::zeros(IxDyn(&[b, ti, c]));
            let osl = out.as_slice_mut().unwrap();
            for (bi, rows) in idx.iter().enumerate() {
                assert_eq!(rows.len(), ti);
                for (i, &r) in rows.iter().enumerate() {
                    assert!(r < t, "gather index out of range");
                    let src = (bi * t + r) * c;
                    let dst = (bi * ti + i) * c;
                    osl[dst..dst + c].copy_from_slice(&xsl[src..src + c]);
                }
            }
            out
        };
        let idx: Vec<Vec<usize>> = idx.to_vec();
        self.op(value, vec![x], |_| {
            Box::new(move |_t, g| {
                let gstd = to_standard(g);
                let gsl = gstd.as_slice().unwrap();
                let mut dx = ArrayD::zeros(IxDyn(&[b, t, c]));
                let dsl = dx.as_slice_mut().unwrap();
                for (bi, rows) in idx.iter().enumerate() {
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = (bi * t + r) * c;
                        let src = (bi * ti + i) * c;
                        for k in 0..c {
                            dsl[dst + k] += gsl[src + k];
                        }
                    }
                }
                vec![Some(dx)]
            })
        })
    }
}

pub(crate) fn to_standard<S: Scalar>(a: &ArrayD<S>) -> ArrayD<S> {
    a.as_standard_layout().to_owned()
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite differences of `f` at `inputs`, compared against the
    /// tape gradient. Returns the max relative error over all entries.
    pub fn finite_diff_check(
        inputs: &[ArrayD<f64>],
        f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
        eps: f64,
    ) -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss);

        let mut max_rel = 0.0f64;
        for (k, base) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(base.raw_dim()));
            let flat_len = base.len();
            for i in 0..flat_len {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[i] += eps;
                minus[k].as_slice_mut().unwrap()[i] -= eps;
                let fp = eval_scalar(&plus, f);
                let fm = eval_scalar(&minus, f);
                let num = (fp - fm) / (2.0 * eps);
                let ana = analytic.as_slice().unwrap()[i];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                let rel = (num - ana).abs() / denom;
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
        max_rel
    }

    fn eval_scalar(inputs: &[ArrayD<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.val(loss)[[]]
    }

    pub fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }
}
