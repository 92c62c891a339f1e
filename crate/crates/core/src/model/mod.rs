//! The volumetric U-Net with attention-based resizing blocks, plus its
//! ablation variants.
//!
//! Encoder block `k`: conv block, residual block, skip tap, resizing block
//! (halving `h, w`, and `d` for the first `depth_halvings` levels). The bottom
//! block keeps extents; decoder blocks resize up, concatenate the skip, and
//! apply a conv block and a residual block. A 1×1×1 head with a sigmoid emits
//! the cleft probability and, with augmented labels, the boundary map.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Block, BlockKind, Resize};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv, ConvBnElu, Ctx, Init, Mode, Residual, RunningStats};
use crate::tensor::{split_feature_shape, BatchStats, Real, Tensor};

/// Which targets the network is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Segmentation plus boundary map (two output channels).
    Augmented,
    /// Segmentation only (one output channel).
    SegmentationOnly,
}

/// Named presets pairing a block kind with a label mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Cleftnet,
    NoFa,
    NoLa,
    Selfattn,
    Resunet,
    Gated,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Cleftnet,
        Variant::NoFa,
        Variant::NoLa,
        Variant::Selfattn,
        Variant::Resunet,
        Variant::Gated,
    ];

    pub fn block(self) -> BlockKind {
        match self {
            Variant::Cleftnet | Variant::NoLa => BlockKind::Augmentor,
            Variant::NoFa | Variant::Resunet => BlockKind::Plain,
            Variant::Selfattn => BlockKind::SelfAttention,
            Variant::Gated => BlockKind::Gated,
        }
    }

    pub fn labels(self) -> LabelMode {
        match self {
            Variant::NoLa | Variant::Resunet => LabelMode::SegmentationOnly,
            _ => LabelMode::Augmented,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cleftnet => "cleftnet",
            Variant::NoFa => "no-fa",
            Variant::NoLa => "no-la",
            Variant::Selfattn => "selfattn",
            Variant::Resunet => "resunet",
            Variant::Gated => "gated",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder channels before division by `divisor`.
    pub channels: Vec<usize>,
    pub bottom_channels: usize,
    /// Channel divisor for small-scale runs.
    pub divisor: usize,
    pub block: BlockKind,
    pub labels: LabelMode,
    /// Training patch extent `(d, h, w)`; learned queries are sized from it.
    pub patch: [usize; 3],
    /// How many encoder levels also halve depth.
    pub depth_halvings: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 96, 128],
            bottom_channels: 160,
            divisor: 1,
            block: BlockKind::Augmentor,
            labels: LabelMode::Augmented,
            patch: [8, 256, 256],
            depth_halvings: 1,
        }
    }
}

impl ModelConfig {
    /// Channel divisor 8 on `8 × 32 × 32` patches.
    pub fn desk() -> Self {
        Self {
            divisor: 8,
            patch: [8, 32, 32],
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.block = v.block();
        self.labels = v.labels();
        self
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn head_channels(&self) -> usize {
        match self.labels {
            LabelMode::Augmented => 2,
            LabelMode::SegmentationOnly => 1,
        }
    }

    pub fn scaled_channels(&self) -> Vec<usize> {
        self.channels.iter().map(|&c| (c / self.divisor).max(1)).collect()
    }

    pub fn scaled_bottom(&self) -> usize {
        (self.bottom_channels / self.divisor).max(1)
    }

    /// Resizing factors of encoder level `k`.
    pub fn factors(&self, k: usize) -> [usize; 3] {
        if k < self.depth_halvings {
            [2, 2, 2]
        } else {
            [1, 2, 2]
        }
    }

    /// Checks the config and that `extent` survives every downsampling.
    pub fn check_extent(&self, extent: [usize; 3]) -> Result<()> {
        let levels = self.levels();
        let need = [1usize << self.depth_halvings.min(levels), 1 << levels, 1 << levels];
        if (0..3).any(|i| extent[i] == 0 || extent[i] % need[i] != 0) {
            return Err(shape_err!(
                "extent {extent:?} must be divisible by {need:?} for {levels} levels with {} depth halvings",
                self.depth_halvings
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("channel plan is empty".into()));
        }
        if self.divisor == 0 {
            return Err(Error::Config("channel divisor must be positive".into()));
        }
        if self.depth_halvings > self.levels() {
            return Err(Error::Config("more depth halvings than levels".into()));
        }
        let c = self.scaled_channels();
        if c.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("channel plan {c:?} must be strictly increasing")));
        }
        self.check_extent(self.patch)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    conv: ConvBnElu,
    residual: Residual,
    down: Block,
}

#[derive(Clone, Debug)]
struct Decoder {
    up: Block,
    conv: ConvBnElu,
    residual: Residual,
}

#[derive(Clone, Debug)]
struct Layers {
    encoders: Vec<Encoder>,
    bottom_conv: ConvBnElu,
    bottom_residual: Residual,
    bottom_block: Block,
    decoders: Vec<Decoder>,
    head: Conv,
}

/// Output nodes of one forward pass, each shaped `(b, d, h, w)`.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub segmentation: Var,
    pub boundary: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub running: RunningStats<T>,
    layers: Layers,
}

impl<T: Real> Model<T> {
    /// Builds the network; `seed` drives weight initialisation only.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut running = RunningStats::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            params: &mut params,
            running: &mut running,
            rng: &mut rng,
        };
        let ch = config.scaled_channels();
        let levels = config.levels();
        let mut extent = config.patch;
        let mut c_in = 1;
        let mut encoders = Vec::with_capacity(levels);
        let mut extents = Vec::with_capacity(levels + 1);
        for k in 0..levels {
            let name = format!("enc{k}");
            let resize = Resize::Down(config.factors(k));
            encoders.push(Encoder {
                conv: ConvBnElu::new(&mut init, &format!("{name}.conv"), 3, c_in, ch[k])?,
                residual: Residual::new(&mut init, &format!("{name}.res"), ch[k])?,
                down: Block::new(&mut init, config.block, &format!("{name}.down"), ch[k], extent, resize)?,
            });
            extents.push(extent);
            extent = resize.output_extent(extent)?;
            c_in = ch[k];
        }
        let bottom = config.scaled_bottom();
        let bottom_conv = ConvBnElu::new(&mut init, "bottom.conv", 3, c_in, bottom)?;
        let bottom_residual = Residual::new(&mut init, "bottom.res", bottom)?;
        let bottom_block = Block::new(&mut init, config.block, "bottom.block", bottom, extent, Resize::Same)?;
        let mut decoders = Vec::with_capacity(levels);
        c_in = bottom;
        for k in (0..levels).rev() {
            let name = format!("dec{k}");
            let up = Block::new(
                &mut init,
                config.block,
                &format!("{name}.up"),
                c_in,
                extent,
                Resize::Up(config.factors(k)),
            )?;
            decoders.push(Decoder {
                up,
                conv: ConvBnElu::new(&mut init, &format!("{name}.conv"), 3, c_in + ch[k], ch[k])?,
                residual: Residual::new(&mut init, &format!("{name}.res"), ch[k])?,
            });
            extent = extents[k];
            c_in = ch[k];
        }
        let head = Conv::new(&mut init, "head", 1, c_in, config.head_channels(), true)?;
        Ok(Self {
            config,
            params,
            running,
            layers: Layers {
                encoders,
                bottom_conv,
                bottom_residual,
                bottom_block,
                decoders,
                head,
            },
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// Records a forward pass of `x: (b, d, h, w, 1)`; returns the outputs and,
    /// in training mode, the batch statistics of every batch-norm layer.
    pub fn forward(&self, graph: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Outputs, Vec<(usize, BatchStats)>)> {
        let (_, extent, c) = split_feature_shape(graph.shape(x))?;
        if c != 1 {
            return Err(shape_err!("input must have one channel, got {c}"));
        }
        self.config.check_extent(extent)?;
        let mut ctx = Ctx::new(graph, &self.params, &self.running, mode);
        let l = &self.layers;
        let mut skips = Vec::with_capacity(l.encoders.len());
        let mut h = x;
        for e in &l.encoders {
            h = e.conv.forward(&mut ctx, h)?;
            h = e.residual.forward(&mut ctx, h)?;
            skips.push(h);
            h = e.down.forward(&mut ctx, h)?;
        }
        h = l.bottom_conv.forward(&mut ctx, h)?;
        h = l.bottom_residual.forward(&mut ctx, h)?;
        h = l.bottom_block.forward(&mut ctx, h)?;
        for d in &l.decoders {
            h = d.up.forward(&mut ctx, h)?;
            let skip = skips.pop().expect("one skip per level");
            h = ctx.graph.concat_channels(h, skip)?;
            h = d.conv.forward(&mut ctx, h)?;
            h = d.residual.forward(&mut ctx, h)?;
        }
        let logits = l.head.forward(&mut ctx, h)?;
        let probs = ctx.graph.sigmoid(logits);
        let segmentation = ctx.graph.select_channel(probs, 0)?;
        let boundary = match self.config.labels {
            LabelMode::Augmented => Some(ctx.graph.select_channel(probs, 1)?),
            LabelMode::SegmentationOnly => None,
        };
        let stats = std::mem::take(&mut ctx.batch_stats);
        Ok((Outputs { segmentation, boundary }, stats))
    }

    /// Inference-mode prediction: `(P_s, ŷ_b)` for `input: (b, d, h, w, 1)`.
    pub fn predict(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let (out, _) = self.forward(&mut g, x, Mode::Eval)?;
        let seg = g.value(out.segmentation).clone();
        let boundary = out.boundary.map(|b| g.value(b).clone());
        Ok((seg, boundary))
    }

    /// Same network with every value converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            running: self.running.cast(),
            layers: self.layers.clone(),
        }
    }
}
