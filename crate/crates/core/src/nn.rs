//! Parameter storage and the small layer vocabulary shared by the
//! spatial/temporal networks and the fusion stack.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub value: ArrayD<S>,
    pub momentum: ArrayD<S>,
    pub trainable: bool,
}

/// Named parameters in insertion order. Insertion order is the iteration
/// order everywhere (checkpoints, optimizer), which keeps runs reproducible.
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let momentum = ArrayD::zeros(value.raw_dim());
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            momentum,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Register every parameter as a tape leaf for this step.
    pub fn leaves(&self, tape: &mut Tape<S>) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }

    /// Count of scalar parameters (trainable only).
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Per-tape mapping from [`ParamId`] to the leaf [`Var`] created this step.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

// ---- initializers ----
// Draws happen in f64 and convert, so f32 and f64 builds of the same model
// share the exact init sequence.

pub fn init_normal<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<S> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0f64, std).expect("std > 0");
    ArrayD::from_shape_fn(IxDyn(shape), |_| S::fr(dist.sample(rng)))
}

pub fn init_kaiming<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<S> {
    init_normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn init_xavier<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<S> {
    init_normal(rng, shape, (1.0 / fan_in as f64).sqrt())
}

pub fn init_uniform_pm<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<S> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| S::fr(rng.gen_range(-bound..bound)))
}

pub fn zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::from_elem(IxDyn(shape), S::one())
}

// ---- layers ----

#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_xavier::<S>(rng, &[in_dim, out_dim], in_dim),
            true,
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), zeros::<S>(&[out_dim]), true));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Same shape but weights and bias start at zero (heads, gate outputs).
    pub fn new_zeroed<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), zeros::<S>(&[in_dim, out_dim]), true);
        let b = bias.then(|| ps.add(format!("{name}.b"), zeros::<S>(&[out_dim]), true));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// `x[N, in] -> [N, out]`.
    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        t.affine(x, pv.var(self.w), self.b.map(|b| pv.var(b)))
    }

    /// Apply along the last axis of an arbitrary-rank input.
    pub fn forward_nd<S: Scalar>(&self, t: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        let shape = t.val(x).shape().to_vec();
        let d = *shape.last().unwrap();
        assert_eq!(d, self.in_dim);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let x2 = t.reshape(x, &[rows, d]);
        let y = self.forward(t, pv, x2);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        t.reshape(y, &out_shape)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), ones::<S>(&[dim]), true);
        let beta = ps.add(format!("{name}.beta"), zeros::<S>(&[dim]), true);
        LayerNorm {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        t.layer_norm(x, pv.var(self.gamma), pv.var(self.beta), self.eps)
    }
}

/// Per-sample normalization over everything but the leading axis, with
/// per-channel scale/shift (the batch-size-free substitute for batch norm).
#[derive(Clone)]
pub struct FrameNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl FrameNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), ones::<S>(&[channels]), true);
        let beta = ps.add(format!("{name}.beta"), zeros::<S>(&[channels]), true);
        FrameNorm {
            gamma,
            beta,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        t.frame_norm(x, pv.var(self.gamma), pv.var(self.beta), self.eps)
    }
}

/// conv2d + frame norm + ReLU. `plain` drops bias, norm and activation so
/// linearity checks can see the raw pre-activation map.
#[derive(Clone)]
pub struct ConvUnit {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub norm: Option<FrameNorm>,
    pub relu: bool,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: (usize, usize),
        pad: (usize, usize),
        plain: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = ps.add(
            format!("{name}.w"),
            init_kaiming::<S>(rng, &[cout, cin, k, k], fan_in),
            true,
        );
        if plain {
            ConvUnit {
                w,
                b: None,
                norm: None,
                relu: false,
                stride,
                pad,
            }
        } else {
            let b = ps.add(format!("{name}.b"), zeros::<S>(&[cout]), true);
            let norm = FrameNorm::new(ps, &format!("{name}.norm"), cout);
            ConvUnit {
                w,
                b: Some(b),
                norm: Some(norm),
                relu: true,
                stride,
                pad,
            }
        }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        let mut y = t.conv2d(x, pv.var(self.w), self.b.map(|b| pv.var(b)), self.stride, self.pad);
        if let Some(norm) = &self.norm {
            y = norm.forward(t, pv, y);
        }
        if self.relu {
            y = t.relu(y);
        }
        y
    }
}

/// conv1d along time + ReLU (token features as `[N, C, L]`).
#[derive(Clone)]
pub struct Conv1dUnit {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub relu: bool,
}

impl Conv1dUnit {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        relu: bool,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_kaiming::<S>(rng, &[cout, cin, k], cin * k),
            true,
        );
        let b = ps.add(format!("{name}.b"), zeros::<S>(&[cout]), true);
        Conv1dUnit { w, b, k, relu }
    }

    /// Same-length convolution (asymmetric pad for even kernels).
    pub fn forward_same<S: Scalar>(&self, t: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        let pl = (self.k - 1) / 2;
        let pr = self.k - 1 - pl;
        let mut y = t.conv1d(x, pv.var(self.w), Some(pv.var(self.b)), (pl, pr));
        if self.relu {
            y = t.relu(y);
        }
        y
    }
}

/// Stack of linear layers with ReLU between; the caller decides what to do
/// with the final pre-activation.
#[derive(Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; `zero_last` zero-initializes the output
    /// layer so the post-sigmoid gate starts at exactly 0.5.
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
        zero_last: bool,
    ) -> Self {
        assert!(dims.len() >= 2);
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            let lname = format!("{name}.l{i}");
            let layer = if last && zero_last {
                Linear::new_zeroed::<S>(ps, &lname, dims[i], dims[i + 1], true)
            } else {
                Linear::new::<S>(ps, rng, &lname, dims[i], dims[i + 1], true)
            };
            layers.push(layer);
        }
        Mlp { layers }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_nd(t, pv, h);
            if i + 1 < self.layers.len() {
                h = t.relu(h);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn param_names_unique_and_ordered() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _l1 = Linear::new(&mut ps, &mut rng, "a", 3, 4, true);
        let _l2 = Linear::new(&mut ps, &mut rng, "b", 4, 2, false);
        let names: Vec<&str> = ps.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, vec!["a.w", "a.b", "b.w"]);
        assert_eq!(ps.trainable_len(), 3 * 4 + 4 + 4 * 2);
    }

    #[test]
    fn init_is_seed_deterministic_across_precisions() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a32 = init_kaiming::<f32>(&mut r1, &[4, 3], 3);
        let a64 = init_kaiming::<f64>(&mut r2, &[4, 3], 3);
        for (x, y) in a32.iter().zip(a64.iter()) {
            assert!((f64::from(*x) - y).abs() < 1e-7);
        }
    }

    #[test]
    fn mlp_zero_last_gives_zero_output() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut ps, &mut rng, "m", &[3, 3, 2], true);
        let mut tape = Tape::new();
        let pv = ps.leaves(&mut tape);
        let x = tape.constant(init_normal::<f64>(&mut rng, &[5, 3], 1.0));
        let y = mlp.forward(&mut tape, &pv, x);
        assert!(tape.val(y).iter().all(|&v| v == 0.0));
    }
}
