//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it executes, holding the forward
//! value and whatever the backward rule needs. [`Graph::backward`] then walks
//! the record once in reverse. Graphs are rebuilt every step.

pub mod gradcheck;
mod param;

use std::collections::HashMap;

pub use param::{ParamId, ParamStore, Parameter};

use crate::attention::kernel as attn;
use crate::error::{contract_err, shape_err, Result};
use crate::par::Exec;
use crate::tensor::{self, split_feature_shape, BatchStats, ConvGeometry, Factors, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Operation kinds, used for labelling and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Affine,
    Ln,
    Clamp,
    Sum,
    WeightedSum,
    Reshape,
    Conv3d,
    ChannelBias,
    BatchNorm,
    Elu,
    Sigmoid,
    MaxPool,
    Upsample,
    Concat,
    SelectChannel,
    Matmul,
    Transpose,
    SoftmaxColumns,
    Attention,
    GateSpatial,
    GateChannel,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Ln(Var),
    Clamp(Var, T, T),
    Sum(Var),
    WeightedSum(Var, Tensor<T>),
    Reshape(Var),
    Conv3d(Var, Var, ConvGeometry),
    ChannelBias(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Elu(Var, T),
    Sigmoid(Var),
    MaxPool(Var, Vec<u32>),
    Upsample(Var, Factors),
    Concat(Var, Var),
    SelectChannel(Var, usize),
    Matmul(Var, Var),
    Transpose(Var),
    SoftmaxColumns(Var),
    Attention {
        k: Var,
        v: Var,
        q: Var,
        weights: Vec<T>,
    },
    GateSpatial(Var, Var, Vec<T>),
    GateChannel(Var, Var, Vec<T>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine(..) => OpKind::Affine,
            Op::Ln(..) => OpKind::Ln,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(..) => OpKind::Sum,
            Op::WeightedSum(..) => OpKind::WeightedSum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Conv3d(..) => OpKind::Conv3d,
            Op::ChannelBias(..) => OpKind::ChannelBias,
            Op::BatchNorm { .. } | Op::BatchNormEval { .. } => OpKind::BatchNorm,
            Op::Elu(..) => OpKind::Elu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::MaxPool(..) => OpKind::MaxPool,
            Op::Upsample(..) => OpKind::Upsample,
            Op::Concat(..) => OpKind::Concat,
            Op::SelectChannel(..) => OpKind::SelectChannel,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::SoftmaxColumns(..) => OpKind::SoftmaxColumns,
            Op::Attention { .. } => OpKind::Attention,
            Op::GateSpatial(..) => OpKind::GateSpatial,
            Op::GateChannel(..) => OpKind::GateChannel,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a leaf or parameter; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
    exec: Exec,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Copy>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::auto())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
            exec,
        }
    }

    /// Test hook: scales the gradient flowing back through every op of `kind`
    /// by 1.5, producing a deliberately wrong backward rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), self.ng(a) || self.ng(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b), self.ng(a) || self.ng(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), self.ng(a) || self.ng(b)))
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let y = self.value(x).map(|v| scale * v + shift);
        self.push(y, Op::Affine(x, scale), self.ng(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.affine(x, c, T::zero())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.ln());
        self.push(y, Op::Ln(x), self.ng(x))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let y = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(y, Op::Clamp(x, lo, hi), self.ng(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), self.ng(x))
    }

    /// `Σ wᵢ xᵢ` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        same_shape(self.value(x), &w, "weighted_sum")?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, w), self.ng(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), self.ng(x)))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let y = tensor::conv3d_with(self.exec, self.value(x), self.value(w), geo)?;
        Ok(self.push(y, Op::Conv3d(x, w, geo), self.ng(x) || self.ng(w)))
    }

    /// Adds a per-channel bias vector to a channel-last tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(shape_err!("bias shape {:?} for {c} channels", self.shape(b)));
        }
        let mut y = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for row in y.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&bv) {
                *v += bb;
            }
        }
        Ok(self.push(y, Op::ChannelBias(x, b), self.ng(x) || self.ng(b)))
    }

    /// Training-mode batch norm; also returns the batch statistics so the
    /// caller can update its running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (y, xhat, inv_std, stats) =
            tensor::batchnorm_training(self.value(x), self.value(gamma), self.value(beta))?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let y = tensor::batchnorm_inference(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let c = running_mean.len();
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::of(tensor::BN_EPS)).sqrt())
            .collect();
        let mut xhat = self.value(x).clone();
        for row in xhat.data_mut().chunks_mut(c) {
            for k in 0..c {
                row[k] = (row[k] - running_mean[k]) * inv_std[k];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn elu(&mut self, x: Var, alpha: T) -> Var {
        let y = tensor::elu(self.value(x), alpha);
        self.push(y, Op::Elu(x, alpha), self.ng(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = tensor::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), self.ng(x))
    }

    pub fn max_pool(&mut self, x: Var, f: Factors) -> Result<Var> {
        let (y, arg) = tensor::max_pool3d(self.value(x), f)?;
        Ok(self.push(y, Op::MaxPool(x, arg), self.ng(x)))
    }

    pub fn upsample(&mut self, x: Var, f: Factors) -> Result<Var> {
        let y = tensor::trilinear_upsample(self.value(x), f)?;
        Ok(self.push(y, Op::Upsample(x, f), self.ng(x)))
    }

    /// Concatenates two channel-last tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err!("cannot concatenate {sa:?} and {sb:?} along channels"));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for (ra, rb) in da.chunks(ca).zip(db.chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let y = Tensor::from_vec(&shape, out)?;
        Ok(self.push(y, Op::Concat(a, b), self.ng(a) || self.ng(b)))
    }

    /// Extracts one channel, dropping the channel axis.
    pub fn select_channel(&mut self, x: Var, ch: usize) -> Result<Var> {
        let s = self.shape(x);
        let c = *s.last().ok_or_else(|| shape_err!("select_channel on a scalar"))?;
        if ch >= c {
            return Err(shape_err!("channel {ch} out of range for {c} channels"));
        }
        let shape = s[..s.len() - 1].to_vec();
        let data: Vec<T> = self.value(x).data().iter().skip(ch).step_by(c).copied().collect();
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(y, Op::SelectChannel(x, ch), self.ng(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul_with(self.exec, self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Matmul(a, b), self.ng(a) || self.ng(b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = tensor::transpose(self.value(a))?;
        Ok(self.push(y, Op::Transpose(a), self.ng(a)))
    }

    pub fn softmax_columns(&mut self, a: Var) -> Result<Var> {
        let y = tensor::softmax_columns(self.value(a))?;
        Ok(self.push(y, Op::SoftmaxColumns(a), self.ng(a)))
    }

    /// Fused dot-product attention over voxel sets.
    ///
    /// `keys: (b, s, c_k)`, `values: (b, s, c_v)`, `queries: (b_q, t, c_k)` with
    /// `b_q ∈ {1, b}` (a single query set is shared by every batch item).
    /// Each query attends over all `s` keys with a softmax of raw dot products;
    /// the result has shape `(b, t, c_v)`.
    pub fn attention(&mut self, keys: Var, values: Var, queries: Var) -> Result<Var> {
        let dims = attn::AttnDims::new(self.shape(keys), self.shape(values), self.shape(queries))?;
        let (z, weights) = attn::forward(
            self.exec,
            &dims,
            self.value(keys).data(),
            self.value(values).data(),
            self.value(queries).data(),
        );
        let y = Tensor::from_vec(&[dims.b, dims.t, dims.cv], z)?;
        let ng = self.ng(keys) || self.ng(values) || self.ng(queries);
        Ok(self.push(
            y,
            Op::Attention {
                k: keys,
                v: values,
                q: queries,
                weights,
            },
            ng,
        ))
    }

    /// Spatial-wise gate: voxel `i` is scaled by `softmax_i(⟨mᵢ, q⟩)`.
    pub fn gate_spatial(&mut self, x: Var, q: Var) -> Result<Var> {
        let (b, sp, c) = split_feature_shape(self.shape(x))?;
        if self.shape(q) != [c] {
            return Err(shape_err!("spatial gate query must have {c} entries, got {:?}", self.shape(q)));
        }
        let (y, a) = attn::gate_spatial(self.value(x).data(), self.value(q).data(), b, sp.iter().product(), c);
        let y = Tensor::from_vec(self.shape(x), y)?;
        Ok(self.push(y, Op::GateSpatial(x, q, a), self.ng(x) || self.ng(q)))
    }

    /// Channel-wise gate: channel `j` is scaled by `softmax_j(M q)`.
    pub fn gate_channel(&mut self, x: Var, q: Var) -> Result<Var> {
        let (b, sp, c) = split_feature_shape(self.shape(x))?;
        let s: usize = sp.iter().product();
        if self.shape(q) != [s] {
            return Err(shape_err!("channel gate query must have {s} entries, got {:?}", self.shape(q)));
        }
        let (y, a) = attn::gate_channel(self.value(x).data(), self.value(q).data(), b, s, c);
        let y = Tensor::from_vec(self.shape(x), y)?;
        Ok(self.push(y, Op::GateChannel(x, q, a), self.ng(x) || self.ng(q)))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one())?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g = g.map(|v| v * T::of(1.5));
            }
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every parameter used in this graph into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y)?);
                acc(*b, g.zip_map(val(*a), |x, y| x * y)?);
            }
            Op::Affine(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::Ln(x) => acc(*x, g.zip_map(val(*x), |gv, xv| gv / xv)?),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                g.zip_map(val(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { T::zero() })?,
            ),
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0])?),
            Op::WeightedSum(x, w) => {
                let s = g.data()[0];
                acc(*x, w.map(|wv| wv * s));
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape())?),
            Op::Conv3d(x, w, geo) => {
                if self.ng(*x) {
                    acc(
                        *x,
                        tensor::conv3d_backward_input(self.exec, val(*x).shape(), val(*w), g, *geo)?,
                    );
                }
                if self.ng(*w) {
                    acc(
                        *w,
                        tensor::conv3d_backward_kernel(self.exec, val(*x), val(*w).shape(), g, *geo)?,
                    );
                }
            }
            Op::ChannelBias(x, b) => {
                acc(*x, g.clone());
                let c = val(*b).len();
                let mut db = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*b, Tensor::from_vec(&[c], db)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = tensor::batchnorm_backward(g, xhat, val(*gamma), inv_std);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let gm = val(*gamma).data();
                let mut dx = g.clone();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (drow, hrow) in dx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)) {
                    for k in 0..c {
                        dg[k] += drow[k] * hrow[k];
                        db[k] += drow[k];
                        drow[k] *= gm[k] * inv_std[k];
                    }
                }
                acc(*x, dx);
                acc(*gamma, Tensor::from_vec(&[c], dg)?);
                acc(*beta, Tensor::from_vec(&[c], db)?);
            }
            Op::Elu(x, alpha) => {
                acc(*x, g.zip_map(&node.value, |gv, y| gv * tensor::elu_grad(y, *alpha))?)
            }
            Op::Sigmoid(x) => acc(
                *x,
                g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))?,
            ),
            Op::MaxPool(x, arg) => acc(*x, tensor::max_pool3d_backward(val(*x).shape(), arg, g)?),
            Op::Upsample(x, f) => {
                acc(*x, tensor::trilinear_upsample_backward(g, val(*x).shape(), *f)?)
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
                let mut ga = Vec::with_capacity(val(*a).len());
                let mut gb = Vec::with_capacity(val(*b).len());
                for row in g.data().chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::from_vec(sa, ga)?);
                acc(*b, Tensor::from_vec(sb, gb)?);
            }
            Op::SelectChannel(x, ch) => {
                let c = *val(*x).shape().last().unwrap();
                let mut dx = Tensor::zeros(val(*x).shape())?;
                for (row, &gv) in dx.data_mut().chunks_mut(c).zip(g.data()) {
                    row[*ch] = gv;
                }
                acc(*x, dx);
            }
            Op::Matmul(a, b) => {
                if self.ng(*a) {
                    let bt = tensor::transpose(val(*b))?;
                    acc(*a, tensor::matmul_with(self.exec, g, &bt)?);
                }
                if self.ng(*b) {
                    let at = tensor::transpose(val(*a))?;
                    acc(*b, tensor::matmul_with(self.exec, &at, g)?);
                }
            }
            Op::Transpose(a) => acc(*a, tensor::transpose(g)?),
            Op::SoftmaxColumns(a) => {
                let y = &node.value;
                let [r, c] = *y.shape() else { unreachable!() };
                let mut dx = vec![T::zero(); r * c];
                for j in 0..c {
                    let dot: T = (0..r).map(|i| y.data()[i * c + j] * g.data()[i * c + j]).sum();
                    for i in 0..r {
                        let o = i * c + j;
                        dx[o] = y.data()[o] * (g.data()[o] - dot);
                    }
                }
                acc(*a, Tensor::from_vec(&[r, c], dx)?);
            }
            Op::Attention { k, v, q, weights } => {
                let dims = attn::AttnDims::new(val(*k).shape(), val(*v).shape(), val(*q).shape())?;
                let (dk, dv, dq) = attn::backward(
                    self.exec,
                    &dims,
                    val(*k).data(),
                    val(*v).data(),
                    val(*q).data(),
                    weights,
                    g.data(),
                );
                acc(*k, Tensor::from_vec(val(*k).shape(), dk)?);
                acc(*v, Tensor::from_vec(val(*v).shape(), dv)?);
                acc(*q, Tensor::from_vec(val(*q).shape(), dq)?);
            }
            Op::GateSpatial(x, q, a) => {
                let (b, sp, c) = split_feature_shape(val(*x).shape())?;
                let (dx, dq) = attn::gate_spatial_backward(
                    val(*x).data(),
                    val(*q).data(),
                    a,
                    g.data(),
                    b,
                    sp.iter().product(),
                    c,
                );
                acc(*x, Tensor::from_vec(val(*x).shape(), dx)?);
                acc(*q, Tensor::from_vec(val(*q).shape(), dq)?);
            }
            Op::GateChannel(x, q, a) => {
                let (b, sp, c) = split_feature_shape(val(*x).shape())?;
                let (dx, dq) = attn::gate_channel_backward(
                    val(*x).data(),
                    val(*q).data(),
                    a,
                    g.data(),
                    b,
                    sp.iter().product(),
                    c,
                );
                acc(*x, Tensor::from_vec(val(*x).shape(), dx)?);
                acc(*q, Tensor::from_vec(val(*q).shape(), dq)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::new();
        let p = g.leaf(vec1(&[1.0, 2.0, 3.0]));
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(p).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_first_component() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(&[2, 1], vec![0.0, 0.0]).unwrap());
        let s = g.softmax_columns(p).unwrap();
        let l = g.weighted_sum(s, Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(p).unwrap().data(), &[0.25, -0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.leaf(vec1(&[1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", vec1(&[1.0])).unwrap();
        let b = store.add("b", vec1(&[5.0])).unwrap();
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let _vb = g.param(&store, b);
        let l = g.sum(va);
        let gr = g.backward(l).unwrap();
        g.accumulate_param_grads(&gr, &mut store);
        assert_eq!(store.get(a).grad.data(), &[1.0]);
        assert_eq!(store.get(b).grad.data(), &[0.0]);
    }

    #[test]
    fn scaling_loss_scales_gradients_exactly() {
        let run = |c: f64| {
            let mut g = Graph::new();
            let p = g.leaf(vec1(&[0.3, -1.2, 2.5]));
            let e = g.elu(p, 1.0);
            let sq = g.mul(e, e).unwrap();
            let s = g.sum(sq);
            let l = g.scale(s, c);
            g.backward(l).unwrap().get(p).unwrap().clone()
        };
        let (g1, g4) = (run(1.0), run(4.0));
        for (a, b) in g1.data().iter().zip(g4.data()) {
            assert_eq!(4.0 * a, *b);
        }
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let x = vec1(&[0.2, -0.7]);
        let grad = |terms: &[bool; 2]| {
            let mut g = Graph::new();
            let p = g.leaf(x.clone());
            let s = g.sigmoid(p);
            let l1 = g.sum(s);
            let sq = g.mul(p, p).unwrap();
            let l2 = g.sum(sq);
            let l = match terms {
                [true, true] => g.add(l1, l2).unwrap(),
                [true, false] => l1,
                _ => l2,
            };
            g.backward(l).unwrap().get(p).unwrap().clone()
        };
        let both = grad(&[true, true]);
        let a = grad(&[true, false]);
        let b = grad(&[false, true]);
        for i in 0..2 {
            assert!((both.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut g = Graph::with_exec(Exec::Sequential);
        let p = g.leaf(vec1(&[0.1, 0.2, 0.3, 0.4]));
        let r = g.reshape(p, &[2, 2]).unwrap();
        let m = g.matmul(r, r).unwrap();
        let s = g.softmax_columns(m).unwrap();
        let l = g.weighted_sum(s, Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap()).unwrap();
        let a = g.backward(l).unwrap().get(p).unwrap().clone();
        let b = g.backward(l).unwrap().get(p).unwrap().clone();
        assert_eq!(a, b);
    }
}
