//! Adam training on sampled patches, with periodic validation and
//! bit-exact resume.

pub mod adam;

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};

use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, TrainingState};
use crate::data::{AugmentProbs, PatchSample, Rejection, Sampler, Volume};
use crate::error::{contract_err, Error, Result};
use crate::infer::sliding_window;
use crate::labels::{total_loss, LossWeights};
use crate::metrics::MetricReport;
use crate::model::Model;
use crate::nn::Mode;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: u64,
    /// Validate every this many iterations (0 disables validation).
    pub eval_interval: u64,
    pub seed: u64,
    pub loss: LossWeights,
    pub rejection: Rejection,
    pub augment: AugmentProbs,
    /// Probability threshold for validation metrics.
    pub threshold: f64,
    /// Sliding-window overlap used for validation.
    pub eval_overlap: [usize; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 2,
            iterations: 2000,
            eval_interval: 100,
            seed: 0,
            loss: LossWeights::default(),
            rejection: Rejection::default(),
            augment: AugmentProbs::default(),
            threshold: 0.5,
            eval_overlap: [0, 0, 0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.adam.lr >= 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam hyperparameters out of range");
        }
        let probs = [self.rejection.p_reject, self.augment.rotate, self.augment.flip, self.augment.grayscale];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.loss.boundary < 0.0 || self.loss.coherence < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Supplies training patches from a seeded stream.
pub trait PatchSource {
    fn next_patch(&mut self) -> Result<PatchSample>;
    fn rng_word_pos(&self) -> u128;
    fn set_rng_word_pos(&mut self, pos: u128);
}

impl PatchSource for Sampler {
    fn next_patch(&mut self) -> Result<PatchSample> {
        self.sample()
    }
    fn rng_word_pos(&self) -> u128 {
        self.rng().get_word_pos()
    }
    fn set_rng_word_pos(&mut self, pos: u128) {
        self.rng_mut().set_word_pos(pos)
    }
}

/// The same patch on every draw.
pub struct FixedPatch(pub PatchSample);

impl PatchSource for FixedPatch {
    fn next_patch(&mut self) -> Result<PatchSample> {
        Ok(self.0.clone())
    }
    fn rng_word_pos(&self) -> u128 {
        0
    }
    fn set_rng_word_pos(&mut self, _: u128) {}
}

/// Loss values of one step; absent terms are 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f32,
    pub segmentation: f32,
    pub boundary: f32,
    pub coherence: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HistoryLine {
    Step { iteration: u64, losses: StepLosses },
    Eval { iteration: u64, cremi: f64, f1: f64, auc: Option<f64> },
}

impl fmt::Display for HistoryLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HistoryLine::Step { iteration, losses: l } => {
                write!(f, "{iteration}\t{}\t{}\t{}\t{}", l.total, l.segmentation, l.boundary, l.coherence)
            }
            HistoryLine::Eval { iteration, cremi, f1, auc } => {
                write!(f, "eval\t{iteration}\t{cremi}\t{f1}\t{}", auc.unwrap_or(f64::NAN))
            }
        }
    }
}

pub fn format_history(lines: &[HistoryLine]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

/// Stacks patches into `(b, d, h, w, 1)` input and `(b, d, h, w)` targets.
pub fn assemble_batch(patches: &[PatchSample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let first = patches.first().ok_or_else(|| contract_err!("empty batch"))?;
    let s = first.raw.shape().to_vec();
    let b = patches.len();
    let mut raw = Vec::with_capacity(b * first.raw.len());
    let mut seg = Vec::with_capacity(b * first.raw.len());
    let mut bnd = Vec::with_capacity(b * first.raw.len());
    for p in patches {
        if p.raw.shape() != s.as_slice() {
            return Err(contract_err!("patch shapes differ within a batch"));
        }
        raw.extend_from_slice(p.raw.data());
        seg.extend(p.segmentation.data().iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
        bnd.extend(p.boundary.data().iter().map(|&v| v as f32));
    }
    Ok((
        Tensor::from_vec(&[b, s[0], s[1], s[2], 1], raw)?,
        Tensor::from_vec(&[b, s[0], s[1], s[2]], seg)?,
        Tensor::from_vec(&[b, s[0], s[1], s[2]], bnd)?,
    ))
}

pub struct Trainer<S: PatchSource> {
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    pub config: TrainConfig,
    pub source: S,
    pub iteration: u64,
    pub best_score: Option<f64>,
    pub best_iteration: Option<u64>,
    pub history: Vec<HistoryLine>,
}

impl<S: PatchSource> Trainer<S> {
    pub fn new(model: Model<f32>, config: TrainConfig, source: S) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamState::for_params(&model.params)?;
        Ok(Self {
            model,
            optimizer,
            config,
            source,
            iteration: 0,
            best_score: None,
            best_iteration: None,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint that carries training progress.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, mut source: S) -> Result<Self> {
        let state = ckpt
            .training
            .ok_or_else(|| contract_err!("checkpoint holds no training state"))?;
        source.set_rng_word_pos(state.rng_word_pos);
        let mut t = Self::new(ckpt.model, config, source)?;
        t.optimizer = state.adam;
        t.iteration = state.iteration;
        t.best_score = state.best_score;
        t.best_iteration = state.best_iteration;
        Ok(t)
    }

    pub fn training_state(&self) -> TrainingState {
        TrainingState {
            iteration: self.iteration,
            adam: self.optimizer.clone(),
            rng_word_pos: self.source.rng_word_pos(),
            best_score: self.best_score,
            best_iteration: self.best_iteration,
        }
    }

    /// One optimisation step on a freshly drawn batch.
    pub fn step(&mut self) -> Result<StepLosses> {
        let patches = (0..self.config.batch_size)
            .map(|_| self.source.next_patch())
            .collect::<Result<Vec<_>>>()?;
        let (input, y_s, y_b) = assemble_batch(&patches)?;
        let b = patches.len();

        let mut g = Graph::new();
        let x = g.constant(input);
        let (out, stats) = self.model.forward(&mut g, x, Mode::Train)?;
        let terms = total_loss(
            &mut g,
            out.segmentation,
            out.boundary,
            &y_s,
            out.boundary.map(|_| &y_b),
            &self.config.loss,
            b,
        )?;
        let value = |v: Option<_>| v.map_or(0.0, |v| g.value(v).data()[0]);
        let losses = StepLosses {
            total: value(Some(terms.total)),
            segmentation: value(Some(terms.segmentation)),
            boundary: value(terms.boundary),
            coherence: value(terms.coherence),
        };
        if !losses.total.is_finite() {
            let origins: Vec<[usize; 3]> = patches.iter().map(|p| p.origin).collect();
            return Err(Error::Numerical(format!(
                "non-finite loss {} at iteration {}; batch origins {origins:?}",
                losses.total,
                self.iteration + 1
            )));
        }
        let grads = g.backward(terms.total)?;
        self.model.params.zero_grad();
        g.accumulate_param_grads(&grads, &mut self.model.params);
        adam_update(&mut self.model.params, &mut self.optimizer, &self.config.adam)?;
        self.model.running.update(&stats);
        self.iteration += 1;
        self.history.push(HistoryLine::Step {
            iteration: self.iteration,
            losses,
        });
        Ok(losses)
    }

    /// Metrics of a sliding-window prediction over `volume`.
    pub fn evaluate(&self, volume: &Volume) -> Result<MetricReport> {
        evaluate(&self.model, volume, self.config.threshold, self.config.eval_overlap)
    }

    /// Trains until `self.iteration == until`, validating on `val` every
    /// `eval_interval` steps. `on_best` runs whenever the validation
    /// CREMI-score improves (lower is better).
    pub fn run(
        &mut self,
        until: u64,
        val: Option<&Volume>,
        mut on_best: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < until {
            self.step()?;
            let due = self.config.eval_interval > 0 && self.iteration % self.config.eval_interval == 0;
            if let (true, Some(v)) = (due, val) {
                let r = self.evaluate(v)?;
                self.history.push(HistoryLine::Eval {
                    iteration: self.iteration,
                    cremi: r.cremi_score,
                    f1: r.f1,
                    auc: r.auc,
                });
                if self.best_score.is_none_or(|b| r.cremi_score < b) {
                    self.best_score = Some(r.cremi_score);
                    self.best_iteration = Some(self.iteration);
                    on_best(self)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        fs::write(path, format_history(&self.history))?;
        Ok(())
    }
}

pub fn evaluate(model: &Model<f32>, volume: &Volume, threshold: f64, overlap: [usize; 3]) -> Result<MetricReport> {
    let pred = sliding_window(model, &volume.normalized_raw(), overlap)?;
    MetricReport::compute(&pred.segmentation, &volume.labels, threshold, volume.spacing, None)
}
