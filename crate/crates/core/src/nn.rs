//! Parameterised layers recorded onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{contract_err, Result};
use crate::tensor::{BatchStats, ConvGeometry, Real, Tensor};

/// Running-average momentum for batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Non-trainable batch-norm running averages, one slot per layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats<T> {
    pub slots: Vec<RunningSlot<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningSlot<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    fn push(&mut self, name: String, c: usize) -> usize {
        self.slots.push(RunningSlot {
            name,
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        self.slots.len() - 1
    }

    /// Blends batch statistics into the running averages; the variance stored
    /// is the unbiased estimate.
    pub fn update(&mut self, batch: &[(usize, BatchStats)]) {
        for (slot, st) in batch {
            let s = &mut self.slots[*slot];
            let n = st.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for k in 0..s.mean.len() {
                let m = s.mean[k].to_f64();
                let v = s.var[k].to_f64();
                s.mean[k] = T::of((1.0 - BN_MOMENTUM) * m + BN_MOMENTUM * st.mean[k]);
                s.var[k] = T::of((1.0 - BN_MOMENTUM) * v + BN_MOMENTUM * st.var[k] * unbias);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        let conv = |v: &[T]| -> Vec<U> { v.iter().map(|x| U::of(Real::to_f64(*x))).collect() };
        RunningStats {
            slots: self
                .slots
                .iter()
                .map(|s| RunningSlot {
                    name: s.name.clone(),
                    mean: conv(&s.mean),
                    var: conv(&s.var),
                })
                .collect(),
        }
    }
}

/// Everything a layer needs while recording its forward pass.
pub struct Ctx<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
    pub running: &'a RunningStats<T>,
    pub mode: Mode,
    /// Batch statistics gathered in training mode, keyed by running-stat slot.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a ParamStore<T>, running: &'a RunningStats<T>, mode: Mode) -> Self {
        Self {
            graph,
            params,
            running,
            mode,
            batch_stats: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.params, id)
    }
}

/// Builder state shared by layer constructors.
pub struct Init<'a, T: Real, R: Rng> {
    pub params: &'a mut ParamStore<T>,
    pub running: &'a mut RunningStats<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> Init<'_, T, R> {
    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn kaiming_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| contract_err!("{e}"))?;
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))?;
        self.params.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| contract_err!("{e}"))?;
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))?;
        self.params.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.params.add(name, Tensor::full(shape, T::of(value))?)
    }
}

/// 3-D convolution with optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
}

impl Conv {
    /// Cubic kernel of side `k` with "same" padding.
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = init.kaiming_uniform(&format!("{name}.weight"), &[k, k, k, c_in, c_out], k * k * k * c_in)?;
        let bias = if bias {
            Some(init.constant(&format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geo: ConvGeometry::same(k),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.graph.conv3d(x, w, self.geo)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.graph.channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
}

impl BatchNorm {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c: usize) -> Result<Self> {
        let gamma = init.constant(&format!("{name}.gamma"), &[c], 1.0)?;
        let beta = init.constant(&format!("{name}.beta"), &[c], 0.0)?;
        let slot = init.running.push(name.to_string(), c);
        Ok(Self { gamma, beta, slot })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.graph.batch_norm(x, g, b)?;
                ctx.batch_stats.push((self.slot, stats));
                Ok(y)
            }
            Mode::Eval => {
                let s = &ctx.running.slots[self.slot];
                ctx.graph.batch_norm_eval(x, g, b, &s.mean, &s.var)
            }
        }
    }
}

/// Convolution, batch norm, ELU.
#[derive(Clone, Debug)]
pub struct ConvBnElu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnElu {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, name: &str, k: usize, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(init, &format!("{name}.conv"), k, c_in, c_out, false)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.graph.elu(y, T::one()))
    }
}

/// `elu(x + bn(conv(elu(bn(conv(x))))))`
#[derive(Clone, Debug)]
pub struct Residual {
    pub first: ConvBnElu,
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl Residual {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            first: ConvBnElu::new(init, &format!("{name}.a"), 3, c, c)?,
            conv: Conv::new(init, &format!("{name}.b.conv"), 3, c, c, false)?,
            bn: BatchNorm::new(init, &format!("{name}.b.bn"), c)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = self.conv.forward(ctx, y)?;
        let y = self.bn.forward(ctx, y)?;
        let s = ctx.graph.add(x, y)?;
        Ok(ctx.graph.elu(s, T::one()))
    }
}
