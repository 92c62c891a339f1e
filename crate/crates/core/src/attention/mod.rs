//! Attention blocks that resize a feature map: the learnable-query Feature
//! Augmentor plus the self-attention and gated baselines used in ablations.
//!
//! Every block maps `(b, d, h, w, c)` to `(b, d', h', w', c)` where the output
//! extents are fixed by the block's [`Resize`], and adds a parameter-free
//! residual path (max pooling, trilinear upsampling or identity).

pub(crate) mod kernel;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Conv, Ctx, Init, Mode, RunningStats};
use crate::tensor::{feature_shape_like, split_feature_shape, Factors, Real, Tensor};

/// Std of the Gaussian used for learnable queries.
pub const QUERY_INIT_STD: f64 = 0.02;

/// How a block changes spatial extents, and its residual mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    /// Divide each extent by its factor; residual is max pooling.
    Down(Factors),
    /// Multiply each extent by its factor; residual is trilinear upsampling.
    Up(Factors),
    /// Keep extents; residual is the identity.
    Same,
}

impl Resize {
    pub const HALF: Resize = Resize::Down([2, 2, 2]);
    pub const DOUBLE: Resize = Resize::Up([2, 2, 2]);

    pub fn output_extent(&self, sp: [usize; 3]) -> Result<[usize; 3]> {
        match *self {
            Resize::Down(f) => {
                if (0..3).any(|i| f[i] == 0 || sp[i] % f[i] != 0) {
                    return Err(shape_err!("extent {sp:?} not divisible by {f:?}"));
                }
                Ok([sp[0] / f[0], sp[1] / f[1], sp[2] / f[2]])
            }
            Resize::Up(f) => Ok([sp[0] * f[0], sp[1] * f[1], sp[2] * f[2]]),
            Resize::Same => Ok(sp),
        }
    }

    /// Records the residual mapping of `x`.
    pub fn residual<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match *self {
            Resize::Down(f) => g.max_pool(x, f),
            Resize::Up(f) => g.upsample(x, f),
            Resize::Same => Ok(x),
        }
    }
}

fn conv1x1<T: Real, R: Rng>(init: &mut Init<'_, T, R>, name: &str, ci: usize, co: usize, bias: bool) -> Result<Conv> {
    Conv::new(init, name, 1, ci, co, bias)
}

/// Projects a feature map to `(b, s, c')` voxel rows.
fn project_rows<T: Real>(ctx: &mut Ctx<'_, T>, conv: &Conv, x: Var, c_out: usize) -> Result<Var> {
    let y = conv.forward(ctx, x)?;
    let (b, sp, _) = split_feature_shape(ctx.graph.shape(y))?;
    ctx.graph.reshape(y, &[b, sp.iter().product(), c_out])
}

/// Attention whose queries are a learned tensor; the query's spatial extent
/// sets the output extent.
#[derive(Clone, Debug)]
pub struct FeatureAugmentor {
    pub query: ParamId,
    pub key: Conv,
    pub value: Conv,
    pub output: Conv,
    pub resize: Resize,
    pub query_extent: [usize; 3],
    pub c_k: usize,
    pub c_v: usize,
}

impl FeatureAugmentor {
    /// `input_extent` is the spatial extent the block will be applied to.
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        input_extent: [usize; 3],
        resize: Resize,
        c_k: usize,
        c_v: usize,
    ) -> Result<Self> {
        let q = resize.output_extent(input_extent)?;
        Ok(Self {
            query: init.normal(&format!("{name}.query"), &[q[0], q[1], q[2], c_k], QUERY_INIT_STD)?,
            key: conv1x1(init, &format!("{name}.key"), channels, c_k, false)?,
            value: conv1x1(init, &format!("{name}.value"), channels, c_v, false)?,
            output: conv1x1(init, &format!("{name}.output"), c_v, channels, true)?,
            resize,
            query_extent: q,
            c_k,
            c_v,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        let (b, sp, _) = split_feature_shape(&shape)?;
        let out_sp = self.resize.output_extent(sp)?;
        if out_sp != self.query_extent {
            return Err(shape_err!(
                "input extent {sp:?} resizes to {out_sp:?}, but the query has extent {:?}",
                self.query_extent
            ));
        }
        let k = project_rows(ctx, &self.key, x, self.c_k)?;
        let v = project_rows(ctx, &self.value, x, self.c_v)?;
        let q = ctx.param(self.query);
        let t: usize = out_sp.iter().product();
        let q = ctx.graph.reshape(q, &[1, t, self.c_k])?;
        let z = ctx.graph.attention(k, v, q)?;
        let z = ctx.graph.reshape(z, &feature_shape_like(&shape, b, out_sp, self.c_v))?;
        let n = self.output.forward(ctx, z)?;
        let r = self.resize.residual(ctx.graph, x)?;
        ctx.graph.add(n, r)
    }
}

/// Attention with queries projected from the (resized) input.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub output: Conv,
    pub resize: Resize,
    pub c_k: usize,
    pub c_v: usize,
}

impl SelfAttention {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        resize: Resize,
        c_k: usize,
        c_v: usize,
    ) -> Result<Self> {
        Ok(Self {
            query: conv1x1(init, &format!("{name}.query"), channels, c_k, true)?,
            key: conv1x1(init, &format!("{name}.key"), channels, c_k, false)?,
            value: conv1x1(init, &format!("{name}.value"), channels, c_v, false)?,
            output: conv1x1(init, &format!("{name}.output"), c_v, channels, true)?,
            resize,
            c_k,
            c_v,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        let (b, sp, _) = split_feature_shape(&shape)?;
        let out_sp = self.resize.output_extent(sp)?;
        let r = self.resize.residual(ctx.graph, x)?;
        let k = project_rows(ctx, &self.key, x, self.c_k)?;
        let v = project_rows(ctx, &self.value, x, self.c_v)?;
        let q = project_rows(ctx, &self.query, r, self.c_k)?;
        let z = ctx.graph.attention(k, v, q)?;
        let z = ctx.graph.reshape(z, &feature_shape_like(&shape, b, out_sp, self.c_v))?;
        let n = self.output.forward(ctx, z)?;
        ctx.graph.add(n, r)
    }
}

/// Spatial then channel gating of the resized input, projected and added back.
#[derive(Clone, Debug)]
pub struct GatedAttention {
    pub spatial_query: ParamId,
    pub channel_query: ParamId,
    pub output: Conv,
    pub resize: Resize,
}

impl GatedAttention {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        input_extent: [usize; 3],
        resize: Resize,
    ) -> Result<Self> {
        let s: usize = resize.output_extent(input_extent)?.iter().product();
        Ok(Self {
            spatial_query: init.normal(&format!("{name}.spatial_query"), &[channels], QUERY_INIT_STD)?,
            channel_query: init.normal(&format!("{name}.channel_query"), &[s], QUERY_INIT_STD)?,
            output: conv1x1(init, &format!("{name}.output"), channels, channels, true)?,
            resize,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let r = self.resize.residual(ctx.graph, x)?;
        let qs = ctx.param(self.spatial_query);
        let qc = ctx.param(self.channel_query);
        let m = ctx.graph.gate_spatial(r, qs)?;
        let m = ctx.graph.gate_channel(m, qc)?;
        let n = self.output.forward(ctx, m)?;
        ctx.graph.add(n, r)
    }
}

/// Which block performs a resizing step of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Learnable-query attention.
    Augmentor,
    SelfAttention,
    Gated,
    /// Residual mapping only.
    Plain,
}

#[derive(Clone, Debug)]
pub enum Block {
    Augmentor(FeatureAugmentor),
    SelfAttention(SelfAttention),
    Gated(GatedAttention),
    Plain(Resize),
}

impl Block {
    /// `c_k = c_v = max(1, channels / 2)`.
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        kind: BlockKind,
        name: &str,
        channels: usize,
        input_extent: [usize; 3],
        resize: Resize,
    ) -> Result<Self> {
        let ck = (channels / 2).max(1);
        Ok(match kind {
            BlockKind::Augmentor => {
                Block::Augmentor(FeatureAugmentor::new(init, name, channels, input_extent, resize, ck, ck)?)
            }
            BlockKind::SelfAttention => Block::SelfAttention(SelfAttention::new(init, name, channels, resize, ck, ck)?),
            BlockKind::Gated => Block::Gated(GatedAttention::new(init, name, channels, input_extent, resize)?),
            BlockKind::Plain => {
                resize.output_extent(input_extent)?;
                Block::Plain(resize)
            }
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Augmentor(b) => b.forward(ctx, x),
            Block::SelfAttention(b) => b.forward(ctx, x),
            Block::Gated(b) => b.forward(ctx, x),
            Block::Plain(r) => r.residual(ctx.graph, x),
        }
    }
}

fn run_block<T: Real>(
    input: &Tensor<T>,
    params: &ParamStore<T>,
    f: impl FnOnce(&mut Ctx<'_, T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let running = RunningStats::default();
    let x = g.constant(input.clone());
    let mut ctx = Ctx::new(&mut g, params, &running, Mode::Eval);
    let y = f(&mut ctx, x)?;
    Ok(g.value(y).clone())
}

/// Evaluates a Feature Augmentor on a concrete tensor.
pub fn fa_forward<T: Real>(input: &Tensor<T>, fa: &FeatureAugmentor, params: &ParamStore<T>) -> Result<Tensor<T>> {
    run_block(input, params, |ctx, x| fa.forward(ctx, x))
}

pub fn self_attention<T: Real>(input: &Tensor<T>, sa: &SelfAttention, params: &ParamStore<T>) -> Result<Tensor<T>> {
    run_block(input, params, |ctx, x| sa.forward(ctx, x))
}

/// Scales each voxel by the softmax (over voxels) of its dot product with `q_s`.
pub fn gated_attention_swa<T: Real>(input: &Tensor<T>, q_s: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let q = g.constant(q_s.clone());
    let y = g.gate_spatial(x, q)?;
    Ok(g.value(y).clone())
}

/// Scales each channel by the softmax (over channels) of its dot product with `q_c`.
pub fn gated_attention_cwa<T: Real>(input: &Tensor<T>, q_c: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let q = g.constant(q_c.clone());
    let y = g.gate_channel(x, q)?;
    Ok(g.value(y).clone())
}
