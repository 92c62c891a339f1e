//! Gradient checks over small networks built from each block kind and over
//! each loss term.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Block, BlockKind, Resize};
use crate::autodiff::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::autodiff::{Graph, OpKind, ParamStore, Var};
use crate::error::Result;
use crate::labels::{
    boundary_loss, coherence_loss, segmentation_loss, tanh_distance_map, total_loss, CoherenceForm, LossWeights,
};
use crate::nn::{Conv, ConvBnElu, Ctx, Init, Mode, RunningStats};
use crate::tensor::Tensor;

const BATCH: usize = 2;
const EXTENT: [usize; 3] = [2, 4, 4];
const CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Segmentation,
    Boundary,
    Coherence(CoherenceForm),
    Total(CoherenceForm),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckTarget {
    Block(BlockKind),
    Loss(LossTerm),
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let form = |c: &CoherenceForm| match c {
            CoherenceForm::Literal => "literal",
            CoherenceForm::Complement => "complement",
        };
        match self {
            CheckTarget::Block(BlockKind::Augmentor) => write!(f, "block/fa-learnable-query"),
            CheckTarget::Block(BlockKind::SelfAttention) => write!(f, "block/selfattn"),
            CheckTarget::Block(BlockKind::Gated) => write!(f, "block/gated"),
            CheckTarget::Block(BlockKind::Plain) => write!(f, "block/plain"),
            CheckTarget::Loss(LossTerm::Segmentation) => write!(f, "loss/segmentation"),
            CheckTarget::Loss(LossTerm::Boundary) => write!(f, "loss/boundary"),
            CheckTarget::Loss(LossTerm::Coherence(c)) => write!(f, "loss/coherence-{}", form(c)),
            CheckTarget::Loss(LossTerm::Total(c)) => write!(f, "loss/total-{}", form(c)),
        }
    }
}

/// Every block kind and every loss term, in both coherence forms.
pub fn all_targets() -> Vec<CheckTarget> {
    let mut v: Vec<CheckTarget> = [BlockKind::Augmentor, BlockKind::SelfAttention, BlockKind::Gated, BlockKind::Plain]
        .into_iter()
        .map(CheckTarget::Block)
        .collect();
    v.push(CheckTarget::Loss(LossTerm::Segmentation));
    v.push(CheckTarget::Loss(LossTerm::Boundary));
    for form in [CoherenceForm::Literal, CoherenceForm::Complement] {
        v.push(CheckTarget::Loss(LossTerm::Coherence(form)));
        v.push(CheckTarget::Loss(LossTerm::Total(form)));
    }
    v
}

fn input(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let dist = rand_distr::StandardNormal;
    Tensor::from_fn(&[BATCH, EXTENT[0], EXTENT[1], EXTENT[2], 1], |_| {
        rand::Rng::sample::<f64, _>(&mut rng, dist)
    })
    .expect("fixed shape")
}

/// Thin sheet along `h == 1` in every item; the second item also marks `w == 0`.
fn mask() -> Tensor<bool> {
    Tensor::from_fn(&[BATCH, EXTENT[0], EXTENT[1], EXTENT[2]], |i| i[2] == 1 || (i[0] == 1 && i[3] == 0))
        .expect("fixed shape")
}

fn targets() -> Result<(Tensor<f64>, Tensor<f64>)> {
    let m = mask();
    let y_s = m.map(|v| if v { 1.0 } else { 0.0 });
    let mut y_b = Vec::with_capacity(m.len());
    let item = m.len() / BATCH;
    for b in 0..BATCH {
        let one = Tensor::from_vec(&EXTENT, m.data()[b * item..(b + 1) * item].to_vec())?;
        y_b.extend_from_slice(tanh_distance_map(&one)?.data());
    }
    Ok((y_s, Tensor::from_vec(m.shape(), y_b)?))
}

/// Runs the gradient check for one target in double precision.
pub fn run_check(target: CheckTarget, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    run_check_with_fault(target, cfg, None)
}

/// As [`run_check`], with the backward rule of `fault` deliberately corrupted.
pub fn run_check_with_fault(target: CheckTarget, cfg: &GradCheckConfig, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let x = input(cfg.seed);
    let mut params = ParamStore::<f64>::new();
    let mut running = RunningStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = Init {
        params: &mut params,
        running: &mut running,
        rng: &mut rng,
    };
    match target {
        CheckTarget::Block(kind) => {
            // stem -> down -> same -> up -> 1x1 head, read out linearly with
            // mixed-sign weights so the loss neither saturates nor cancels.
            let stem = ConvBnElu::new(&mut init, "stem", 3, 1, CHANNELS)?;
            let down = Block::new(&mut init, kind, "down", CHANNELS, EXTENT, Resize::HALF)?;
            let half = Resize::HALF.output_extent(EXTENT)?;
            let same = Block::new(&mut init, kind, "same", CHANNELS, half, Resize::Same)?;
            let up = Block::new(&mut init, kind, "up", CHANNELS, half, Resize::DOUBLE)?;
            let head = Conv::new(&mut init, "head", 1, CHANNELS, 1, true)?;
            let readout = Tensor::from_fn(&[BATCH, EXTENT[0], EXTENT[1], EXTENT[2], 1], |i| {
                ((i.iter().sum::<usize>() * 7 % 5) as f64 - 2.0) / 2.0
            })?;
            let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
                if let Some(k) = fault {
                    g.inject_fault(k);
                }
                let mut ctx = Ctx::new(g, p, &running, Mode::Train);
                let v = ctx.graph.constant(x.clone());
                let h = stem.forward(&mut ctx, v)?;
                let h = down.forward(&mut ctx, h)?;
                let h = same.forward(&mut ctx, h)?;
                let h = up.forward(&mut ctx, h)?;
                let h = head.forward(&mut ctx, h)?;
                ctx.graph.weighted_sum(h, readout.clone())
            };
            grad_check(&mut params, loss, cfg)
        }
        CheckTarget::Loss(term) => {
            let head = Conv::new(&mut init, "head", 3, 1, 2, true)?;
            let (y_s, y_b) = targets()?;
            let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
                if let Some(k) = fault {
                    g.inject_fault(k);
                }
                let mut ctx = Ctx::new(g, p, &running, Mode::Train);
                let v = ctx.graph.constant(x.clone());
                let h = head.forward(&mut ctx, v)?;
                let y = ctx.graph.sigmoid(h);
                let seg = ctx.graph.select_channel(y, 0)?;
                let bnd = ctx.graph.select_channel(y, 1)?;
                let g = ctx.graph;
                match term {
                    LossTerm::Segmentation => segmentation_loss(g, seg, &y_s, BATCH),
                    LossTerm::Boundary => boundary_loss(g, bnd, &y_b, BATCH),
                    LossTerm::Coherence(form) => coherence_loss(g, seg, bnd, BATCH, form),
                    LossTerm::Total(form) => {
                        let w = LossWeights {
                            coherence_form: form,
                            ..LossWeights::default()
                        };
                        Ok(total_loss(g, seg, Some(bnd), &y_s, Some(&y_b), &w, BATCH)?.total)
                    }
                }
            };
            grad_check(&mut params, loss, cfg)
        }
    }
}
