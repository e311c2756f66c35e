//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and how it was produced. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because every
//! node is appended after its inputs.
//!
//! Trainable arrays live in a [`ParamStore`] that outlives individual tapes.
//! [`Tape::param`] inserts a parameter as a leaf; using the same parameter
//! twice on one tape yields the same leaf, so shared parameters accumulate
//! gradient from every use.
//!
//! Two operations use surrogate backward rules:
//!
//! - [`Tape::tsvd_project`]: the cotangent is transformed along mode 3,
//!   projected per frequency slice onto the kept singular subspaces
//!   (`U_r U_rᴴ G V_r V_rᴴ`) and transformed back, keeping the real part.
//! - [`Tape::topk_channels`]: retained entries pass the cotangent, masked
//!   entries get zero, and the ratio receives a straight-through estimate.

use std::collections::HashMap;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn};

use crate::error::{Error, Result};
use crate::fourier::dft_mode3;
use crate::tensor::Tensor3;
use crate::tsvd::{map_fourier_slices, project_with_factors, SliceSvd};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a [`Parameter`] in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable array with its gradient and optimizer moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: Option<ArrayD<f64>>,
    pub moment1: ArrayD<f64>,
    pub moment2: ArrayD<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let moment1 = ArrayD::zeros(value.raw_dim());
        let moment2 = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad: None,
            moment1,
            moment2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Sets every gradient to zeros of the right shape.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Some(ArrayD::zeros(p.value.raw_dim()));
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Adaptive-moment optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(store: &mut ParamStore, opt: &Adam) -> Result<()> {
    if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    store.steps += 1;
    let t = store.steps as i32;
    let correction1 = 1.0 - opt.beta1.powi(t);
    let correction2 = 1.0 - opt.beta2.powi(t);
    for p in &mut store.params {
        let grad = p.grad.as_ref().expect("checked above");
        ndarray::Zip::from(&mut p.value)
            .and(&mut p.moment1)
            .and(&mut p.moment2)
            .and(grad)
            .for_each(|w, m, v, &g| {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *w -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            });
    }
    Ok(())
}

/// Kernel, stride and zero padding of a 3-D convolution over `(h, w, d)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn same() -> Self {
        Self {
            stride: [1, 1, 1],
            padding: [1, 1, 1],
        }
    }

    pub fn pointwise() -> Self {
        Self {
            stride: [1, 1, 1],
            padding: [0, 0, 0],
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScalarMul { scalar: Var, x: Var },
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    ConvTranspose3d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normalized: Array2<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, axis: usize },
    MatMul { a: Var, b: Var },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    TopK { x: Var, ratio: Var, mask: Vec<bool>, boundary: Vec<Option<usize>>, channels: usize },
    TsvdProject { x: Var, kept: Vec<SliceSvd> },
}

#[derive(Clone, Debug)]
struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into `store` (zero-filling absent ones first).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, var) in &self.params {
            let p = store.get_mut(*id);
            let slot = p.grad.get_or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            if let Some(g) = &self.grads[var.0] {
                *slot += g;
            }
        }
    }
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

fn shape_error(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

fn standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// The value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = &self.nodes[v.0].value;
        assert_eq!(value.len(), 1, "scalar() on a non-scalar node");
        *value.iter().next().expect("one element")
    }

    /// Reads a three-dimensional node back as a [`Tensor3`].
    pub fn tensor(&self, v: Var) -> Result<Tensor3> {
        Tensor3::from_dyn(self.nodes[v.0].value.clone())
    }

    /// Parents of `v` in the recorded graph.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) => vec![*x],
            Op::ScalarMul { scalar, x } => vec![*scalar, *x],
            Op::Conv3d { x, w, b, .. } | Op::ConvTranspose3d { x, w, b, .. } => vec![*x, *w, *b],
            Op::LeakyRelu { x, .. } | Op::Sigmoid(x) | Op::Softmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::MatMul { a, b } => vec![*a, *b],
            Op::Permute { x, .. } | Op::Reshape { x } => vec![*x],
            Op::Sum(x) | Op::Mean(x) | Op::SumSquares(x) => vec![*x],
            Op::TopK { x, ratio, .. } => vec![*x, *ratio],
            Op::TsvdProject { x, .. } => vec![*x],
        }
    }

    /// `true` if `ancestor` is reachable from `v` through parent links.
    pub fn depends_on(&self, v: Var, ancestor: Var) -> bool {
        let mut stack = vec![v];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(n) = stack.pop() {
            if n == ancestor {
                return true;
            }
            if seen[n.0] {
                continue;
            }
            seen[n.0] = true;
            stack.extend(self.parents(n));
        }
        false
    }

    /// A value that does not receive gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant_tensor(&mut self, t: &Tensor3) -> Var {
        self.constant(t.to_dyn())
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Inserts a parameter as a leaf, reusing the leaf if already present.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true);
        self.param_leaves.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_error(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x) * factor;
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, factor), rg)
    }

    /// Multiplies every entry of `x` by the single-element node `scalar`.
    pub fn scalar_mul(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).len() != 1 {
            return Err(shape_error("scalar_mul scalar", self.shape(scalar), &[]));
        }
        let s = self.scalar(scalar);
        let v = self.value(x) * s;
        let rg = self.rg(scalar) || self.rg(x);
        Ok(self.push(v, Op::ScalarMul { scalar, x }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).mapv(|a| if a > 0.0 { a } else { slope * a });
        let rg = self.rg(x);
        self.push(v, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum() / n);
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// `‖x‖_F²`.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(x).iter().map(|a| a * a).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumSquares(x), rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let ndim = self.shape(x).len();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..ndim).collect::<Vec<_>>() {
            return Err(Error::ShapeMismatch(format!(
                "permutation {axes:?} of a {ndim}-D array"
            )));
        }
        let v = self.value(x).clone().permuted_axes(IxDyn(axes));
        let rg = self.rg(x);
        Ok(self.push(v, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::ShapeMismatch(format!("reshape to {shape:?}: {e}")))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape { x }, rg))
    }

    /// Batched matrix product: `a` is `[B, M, K]`; `b` is `[B, K, N]` or a
    /// shared `[K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(shape_error("matmul ranks", &sa, &sb));
        }
        let (k2, n) = if sb.len() == 2 {
            (sb[0], sb[1])
        } else {
            if sb[0] != sa[0] {
                return Err(shape_error("matmul batch", &sa, &sb));
            }
            (sb[1], sb[2])
        };
        if k2 != sa[2] {
            return Err(shape_error("matmul inner", &sa, &sb));
        }
        let av = self.value(a).view().into_dimensionality::<Ix3>().expect("rank 3");
        let mut out = Array3::<f64>::zeros((sa[0], sa[1], n));
        for batch in 0..sa[0] {
            let lhs = av.index_axis(Axis(0), batch);
            let prod = match sb.len() {
                2 => lhs.dot(&self.value(b).view().into_dimensionality::<Ix2>().expect("rank 2")),
                _ => lhs.dot(&batch_view(self.value(b), batch)),
            };
            out.index_axis_mut(Axis(0), batch).assign(&prod);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out.into_dyn(), Op::MatMul { a, b }, rg))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ndim = self.shape(x).len();
        if axis >= ndim {
            return Err(Error::ShapeMismatch(format!("softmax axis {axis} of {ndim}-D")));
        }
        let mut v = self.value(x).clone();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let max = lane.iter().fold(f64::NEG_INFINITY, |m, a| m.max(*a));
            lane.mapv_inplace(|a| (a - max).exp());
            let total = lane.sum();
            lane.mapv_inplace(|a| a / total);
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis with learnable `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::ShapeMismatch("layer_norm of scalar".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_error("layer_norm affine", self.shape(gamma), &[c]));
        }
        let rows = self.value(x).len() / c;
        let flat = self
            .value(x)
            .view()
            .into_shape_with_order((rows, c))
            .expect("standard layout");
        let g = self.value(gamma).as_slice().expect("standard").to_vec();
        let bt = self.value(beta).as_slice().expect("standard").to_vec();
        let mut normalized = Array2::<f64>::zeros((rows, c));
        let mut inv_std = vec![0.0; rows];
        let mut out = Array2::<f64>::zeros((rows, c));
        for r in 0..rows {
            let row = flat.row(r);
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let n = (row[j] - mean) * inv;
                normalized[[r, j]] = n;
                out[[r, j]] = n * g[j] + bt[j];
            }
        }
        let out = out.into_shape_with_order(IxDyn(&shape)).expect("same size");
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// 3-D convolution of `x: [Cin, H, W, D]` with `w: [Cout, Cin, kh, kw, kd]`
    /// and bias `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[0] || self.shape(b) != [ws[0]] {
            return Err(shape_error("conv3d", &xs, &ws));
        }
        let dims = conv_out_dims(&xs[1..], &ws[2..], geom)?;
        let out = conv3d_forward(self.value(x), self.value(w), self.value(b), &dims, geom);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// Transposed 3-D convolution of `x: [Cin, H, W, D]` with
    /// `w: [Cin, Cout, kh, kw, kd]`; output extent `(n − 1)·s − 2p + k`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 || ws[0] != xs[0] || self.shape(b) != [ws[1]] {
            return Err(shape_error("conv_transpose3d", &xs, &ws));
        }
        let mut dims = [0usize; 3];
        for i in 0..3 {
            let full = (xs[i + 1] - 1) * geom.stride[i] + ws[i + 2];
            if full <= 2 * geom.padding[i] {
                return Err(shape_error("conv_transpose3d extent", &xs, &ws));
            }
            dims[i] = full - 2 * geom.padding[i];
        }
        let out = conv_t3d_forward(self.value(x), self.value(w), self.value(b), &dims, geom);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::ConvTranspose3d { x, w, b, geom }, rg))
    }

    /// Keeps, at every position of `x: [C, ...]`, the `⌈ratio·C⌉` channels of
    /// largest magnitude (lower channel index wins ties) and zeroes the rest.
    pub fn topk_channels(&mut self, x: Var, ratio: Var) -> Result<Var> {
        if self.value(ratio).len() != 1 {
            return Err(shape_error("topk ratio", self.shape(ratio), &[]));
        }
        let r = self.scalar(ratio);
        let shape = self.shape(x).to_vec();
        let channels = *shape.first().ok_or_else(|| Error::ShapeMismatch("topk of scalar".into()))?;
        let keep = kept_channels(r, channels)?;
        let positions = self.value(x).len() / channels;
        let data = self.value(x).as_slice().expect("standard");
        let mut mask = vec![false; data.len()];
        let mut boundary = vec![None; positions];
        let mut order: Vec<usize> = (0..channels).collect();
        for p in 0..positions {
            order.sort_by(|&i, &j| {
                data[j * positions + p]
                    .abs()
                    .total_cmp(&data[i * positions + p].abs())
                    .then(i.cmp(&j))
            });
            for &c in &order[..keep] {
                mask[c * positions + p] = true;
            }
            if keep < channels {
                boundary[p] = Some(order[keep] * positions + p);
            }
        }
        let out: Vec<f64> = data
            .iter()
            .zip(&mask)
            .map(|(v, m)| if *m { *v } else { 0.0 })
            .collect();
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("same size");
        let rg = self.rg(x) || self.rg(ratio);
        Ok(self.push(
            out,
            Op::TopK {
                x,
                ratio,
                mask,
                boundary,
                channels,
            },
            rg,
        ))
    }

    /// Rank-`r` truncated t-SVD projection of a three-dimensional node.
    pub fn tsvd_project(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = self.tensor(x)?;
        let proj = project_with_factors(&t, r)?;
        let rg = self.rg(x);
        Ok(self.push(
            proj.output.into_dyn(),
            Op::TsvdProject { x, kept: proj.kept },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(lv.raw_dim(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> =
            self.param_leaves.iter().map(|(k, v)| (*k, *v)).collect();
        params.sort_by_key(|p| p.0);
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], target: Var, g: ArrayD<f64>) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * self.value(*b));
                self.accumulate(grads, *b, g * self.value(*a));
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g * *f),
            Op::ScalarMul { scalar, x } => {
                let s = self.scalar(*scalar);
                let gs: f64 = (g * self.value(*x)).sum();
                let shape = self.value(*scalar).raw_dim();
                self.accumulate(grads, *scalar, ArrayD::from_elem(shape, gs));
                self.accumulate(grads, *x, g * s);
            }
            Op::LeakyRelu { x, slope } => {
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx)
                    .and(self.value(*x))
                    .for_each(|gi, &xi| {
                        if xi <= 0.0 {
                            *gi *= *slope
                        }
                    });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = ndarray::Zip::from(g)
                    .and(&node.value)
                    .map_collect(|gi, y| gi * y * (1.0 - y));
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gv = *g.iter().next().expect("scalar");
                self.accumulate(grads, *x, ArrayD::from_elem(self.value(*x).raw_dim(), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let gv = *g.iter().next().expect("scalar") / n;
                self.accumulate(grads, *x, ArrayD::from_elem(self.value(*x).raw_dim(), gv));
            }
            Op::SumSquares(x) => {
                let gv = *g.iter().next().expect("scalar");
                self.accumulate(grads, *x, self.value(*x) * (2.0 * gv));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, a) in axes.iter().enumerate() {
                    inverse[*a] = i;
                }
                let gx = standard(g.clone().permuted_axes(IxDyn(&inverse)));
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape { x } => {
                let gx = g
                    .clone()
                    .into_shape_with_order(self.value(*x).raw_dim())
                    .expect("same size");
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a).view().into_dimensionality::<Ix3>().expect("rank 3");
                let gv = g.view().into_dimensionality::<Ix3>().expect("rank 3");
                let bval = self.value(*b);
                let mut ga = Array3::<f64>::zeros(av.raw_dim());
                let mut gb = ArrayD::<f64>::zeros(bval.raw_dim());
                for batch in 0..av.shape()[0] {
                    let gi = gv.index_axis(Axis(0), batch);
                    let ai = av.index_axis(Axis(0), batch);
                    let bi = batch_view(bval, batch);
                    ga.index_axis_mut(Axis(0), batch).assign(&gi.dot(&bi.t()));
                    let contrib = ai.t().dot(&gi);
                    if bval.ndim() == 2 {
                        let mut target =
                            gb.view_mut().into_dimensionality::<Ix2>().expect("rank 2");
                        target += &contrib;
                    } else {
                        let mut target = gb.index_axis_mut(Axis(0), batch);
                        target += &contrib.into_dyn();
                    }
                }
                self.accumulate(grads, *a, ga.into_dyn());
                self.accumulate(grads, *b, gb);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let mut gx = g * y;
                let dots = gx.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                gx -= &(y * &dots);
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (rows, c) = normalized.dim();
                let gflat = g.view().into_shape_with_order((rows, c)).expect("standard");
                let gam = self.value(*gamma).as_slice().expect("standard");
                let mut gx = Array2::<f64>::zeros((rows, c));
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dn = 0.0;
                    for j in 0..c {
                        let gj = gflat[[r, j]];
                        let n = normalized[[r, j]];
                        ggamma[j] += gj * n;
                        gbeta[j] += gj;
                        let d = gj * gam[j];
                        sum_d += d;
                        sum_dn += d * n;
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let d = gflat[[r, j]] * gam[j];
                        gx[[r, j]] =
                            inv_std[r] / cf * (cf * d - sum_d - normalized[[r, j]] * sum_dn);
                    }
                }
                let gx = gx
                    .into_shape_with_order(self.value(*x).raw_dim())
                    .expect("same size");
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap());
                self.accumulate(grads, *beta, ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap());
            }
            Op::Conv3d { x, w, b, geom } => {
                let (gx, gw, gb) =
                    conv3d_backward(self.value(*x), self.value(*w), g, *geom);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::ConvTranspose3d { x, w, b, geom } => {
                let (gx, gw, gb) =
                    conv_t3d_backward(self.value(*x), self.value(*w), g, *geom);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::TopK {
                x,
                ratio,
                mask,
                boundary,
                channels,
            } => {
                let gs = g.as_slice().expect("standard");
                let gx: Vec<f64> = gs
                    .iter()
                    .zip(mask)
                    .map(|(gi, m)| if *m { *gi } else { 0.0 })
                    .collect();
                let xs = self.value(*x).as_slice().expect("standard");
                let marginal: f64 = boundary
                    .iter()
                    .flatten()
                    .map(|&i| gs[i] * xs[i])
                    .sum::<f64>()
                    * *channels as f64;
                self.accumulate(
                    grads,
                    *x,
                    ArrayD::from_shape_vec(g.raw_dim(), gx).expect("same size"),
                );
                let shape = self.value(*ratio).raw_dim();
                self.accumulate(grads, *ratio, ArrayD::from_elem(shape, marginal));
            }
            Op::TsvdProject { x, kept } => {
                let gt = Tensor3::from_dyn(g.clone()).expect("finite cotangent");
                let gx = project_cotangent(&gt, kept);
                self.accumulate(grads, *x, gx.into_dyn());
            }
        }
    }
}

/// Applies the truncated t-SVD pseudo-gradient: per-slice projection of the
/// transformed cotangent onto the kept singular subspaces. When no component
/// was discarded the projection is inactive and the cotangent passes through.
pub(crate) fn project_cotangent(g: &Tensor3, kept: &[SliceSvd]) -> Tensor3 {
    let (n1, n2, _) = g.dims();
    if kept.iter().all(|s| s.singular_values.len() >= n1.min(n2)) {
        return g.clone();
    }
    let freq = dft_mode3(g);
    map_fourier_slices(&freq, |k, slice| kept[k].project(slice))
}

fn batch_view(b: &ArrayD<f64>, batch: usize) -> ArrayView2<'_, f64> {
    if b.ndim() == 2 {
        b.view().into_dimensionality::<Ix2>().expect("rank 2")
    } else {
        b.index_axis(Axis(0), batch)
            .into_dimensionality::<Ix2>()
            .expect("rank 3")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Number of channels a Top-K ratio keeps out of `channels`.
pub fn kept_channels(ratio: f64, channels: usize) -> Result<usize> {
    let raw = (ratio * channels as f64 - 1e-9).ceil();
    if raw.is_nan() || raw < 1.0 {
        return Err(Error::EmptySelection { ratio, channels });
    }
    Ok((raw as usize).min(channels))
}

fn conv_out_dims(input: &[usize], kernel: &[usize], geom: ConvGeometry) -> Result<[usize; 3]> {
    let mut dims = [0usize; 3];
    for i in 0..3 {
        let padded = input[i] + 2 * geom.padding[i];
        if padded < kernel[i] || geom.stride[i] == 0 {
            return Err(shape_error("conv3d extent", input, kernel));
        }
        dims[i] = (padded - kernel[i]) / geom.stride[i] + 1;
    }
    Ok(dims)
}

/// Visits every (output position, kernel tap, input position) triple of a
/// strided, zero-padded convolution over three spatial axes.
#[inline]
fn for_each_tap<F: FnMut(usize, usize, usize)>(
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    kernel: [usize; 3],
    geom: ConvGeometry,
    mut f: F,
) {
    let [ih, iw, id] = in_dims;
    let [oh, ow, od] = out_dims;
    let [kh, kw, kd] = kernel;
    for y in 0..oh {
        for ky in 0..kh {
            let sy = (y * geom.stride[0] + ky) as isize - geom.padding[0] as isize;
            if sy < 0 || sy >= ih as isize {
                continue;
            }
            for x in 0..ow {
                for kx in 0..kw {
                    let sx = (x * geom.stride[1] + kx) as isize - geom.padding[1] as isize;
                    if sx < 0 || sx >= iw as isize {
                        continue;
                    }
                    for z in 0..od {
                        for kz in 0..kd {
                            let sz = (z * geom.stride[2] + kz) as isize - geom.padding[2] as isize;
                            if sz < 0 || sz >= id as isize {
                                continue;
                            }
                            let out_pos = (y * ow + x) * od + z;
                            let tap = (ky * kw + kx) * kd + kz;
                            let in_pos = (sy as usize * iw + sx as usize) * id + sz as usize;
                            f(out_pos, tap, in_pos);
                        }
                    }
                }
            }
        }
    }
}

struct ConvShapes {
    cin: usize,
    cout: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    kernel: [usize; 3],
}

impl ConvShapes {
    fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }
    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }
    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Collects `(out_pos, tap, in_pos)` triples once per call.
fn tap_table(s: &ConvShapes, geom: ConvGeometry) -> Vec<(usize, usize, usize)> {
    let mut table = Vec::new();
    for_each_tap(s.in_dims, s.out_dims, s.kernel, geom, |o, t, i| table.push((o, t, i)));
    table
}

fn conv3d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    dims: &[usize; 3],
    geom: ConvGeometry,
) -> ArrayD<f64> {
    let s = ConvShapes {
        cin: x.shape()[0],
        cout: w.shape()[0],
        in_dims: [x.shape()[1], x.shape()[2], x.shape()[3]],
        out_dims: *dims,
        kernel: [w.shape()[2], w.shape()[3], w.shape()[4]],
    };
    let xs = x.as_slice().expect("standard");
    let ws = w.as_slice().expect("standard");
    let bs = b.as_slice().expect("standard");
    let (il, ol, taps) = (s.in_len(), s.out_len(), s.taps());
    let table = tap_table(&s, geom);
    let mut out = vec![0.0; s.cout * ol];
    for o in 0..s.cout {
        let dst = &mut out[o * ol..(o + 1) * ol];
        dst.iter_mut().for_each(|v| *v = bs[o]);
        for i in 0..s.cin {
            let src = &xs[i * il..(i + 1) * il];
            let kern = &ws[(o * s.cin + i) * taps..(o * s.cin + i + 1) * taps];
            for &(op, t, ip) in &table {
                dst[op] += kern[t] * src[ip];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[s.cout, dims[0], dims[1], dims[2]]), out).expect("size")
}

fn conv3d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    geom: ConvGeometry,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let s = ConvShapes {
        cin: x.shape()[0],
        cout: w.shape()[0],
        in_dims: [x.shape()[1], x.shape()[2], x.shape()[3]],
        out_dims: [g.shape()[1], g.shape()[2], g.shape()[3]],
        kernel: [w.shape()[2], w.shape()[3], w.shape()[4]],
    };
    let xs = x.as_slice().expect("standard");
    let ws = w.as_slice().expect("standard");
    let gs = g.as_slice().expect("standard");
    let (il, ol, taps) = (s.in_len(), s.out_len(), s.taps());
    let table = tap_table(&s, geom);
    let mut gx = vec![0.0; xs.len()];
    let mut gw = vec![0.0; ws.len()];
    let mut gb = vec![0.0; s.cout];
    for o in 0..s.cout {
        let go = &gs[o * ol..(o + 1) * ol];
        gb[o] = go.iter().sum();
        for i in 0..s.cin {
            let src = &xs[i * il..(i + 1) * il];
            let base = (o * s.cin + i) * taps;
            let gxi = &mut gx[i * il..(i + 1) * il];
            for &(op, t, ip) in &table {
                gw[base + t] += go[op] * src[ip];
                gxi[ip] += go[op] * ws[base + t];
            }
        }
    }
    (
        ArrayD::from_shape_vec(x.raw_dim(), gx).expect("size"),
        ArrayD::from_shape_vec(w.raw_dim(), gw).expect("size"),
        ArrayD::from_shape_vec(IxDyn(&[s.cout]), gb).expect("size"),
    )
}

// A transposed convolution is the adjoint of a convolution from the output
// grid to the input grid, so the same tap table applies with roles swapped:
// the "input" of the table is the transposed conv's output.

fn conv_t3d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    dims: &[usize; 3],
    geom: ConvGeometry,
) -> ArrayD<f64> {
    let s = ConvShapes {
        cin: x.shape()[0],
        cout: w.shape()[1],
        in_dims: *dims,
        out_dims: [x.shape()[1], x.shape()[2], x.shape()[3]],
        kernel: [w.shape()[2], w.shape()[3], w.shape()[4]],
    };
    let xs = x.as_slice().expect("standard");
    let ws = w.as_slice().expect("standard");
    let bs = b.as_slice().expect("standard");
    // `il` is the length of one output channel, `ol` of one input channel.
    let (il, ol, taps) = (s.in_len(), s.out_len(), s.taps());
    let table = tap_table(&s, geom);
    let mut out = vec![0.0; s.cout * il];
    for o in 0..s.cout {
        out[o * il..(o + 1) * il].iter_mut().for_each(|v| *v = bs[o]);
    }
    for i in 0..s.cin {
        let src = &xs[i * ol..(i + 1) * ol];
        for o in 0..s.cout {
            let kern = &ws[(i * s.cout + o) * taps..(i * s.cout + o + 1) * taps];
            let dst = &mut out[o * il..(o + 1) * il];
            for &(sp, t, dp) in &table {
                dst[dp] += kern[t] * src[sp];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[s.cout, dims[0], dims[1], dims[2]]), out).expect("size")
}

fn conv_t3d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    geom: ConvGeometry,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let s = ConvShapes {
        cin: x.shape()[0],
        cout: w.shape()[1],
        in_dims: [g.shape()[1], g.shape()[2], g.shape()[3]],
        out_dims: [x.shape()[1], x.shape()[2], x.shape()[3]],
        kernel: [w.shape()[2], w.shape()[3], w.shape()[4]],
    };
    let xs = x.as_slice().expect("standard");
    let ws = w.as_slice().expect("standard");
    let gs = g.as_slice().expect("standard");
    let (il, ol, taps) = (s.in_len(), s.out_len(), s.taps());
    let table = tap_table(&s, geom);
    let mut gx = vec![0.0; xs.len()];
    let mut gw = vec![0.0; ws.len()];
    let mut gb = vec![0.0; s.cout];
    for o in 0..s.cout {
        gb[o] = gs[o * il..(o + 1) * il].iter().sum();
    }
    for i in 0..s.cin {
        let src = &xs[i * ol..(i + 1) * ol];
        for o in 0..s.cout {
            let base = (i * s.cout + o) * taps;
            let go = &gs[o * il..(o + 1) * il];
            let gxi = &mut gx[i * ol..(i + 1) * ol];
            for &(sp, t, dp) in &table {
                gw[base + t] += go[dp] * src[sp];
                gxi[sp] += go[dp] * ws[base + t];
            }
        }
    }
    (
        ArrayD::from_shape_vec(x.raw_dim(), gx).expect("size"),
        ArrayD::from_shape_vec(w.raw_dim(), gw).expect("size"),
        ArrayD::from_shape_vec(IxDyn(&[s.cout]), gb).expect("size"),
    )
}
