use serde::{Deserialize, Serialize};

use super::unified::batch_loss_grad;
use super::{all_annotations, Group, LabeledSentence, ModelError, UnifiedModel, Vocab};
use crate::corpus::{shuffle, Sentence};
use crate::eval::{score, MatchMode};
use crate::neural::{optimizer_step, AdamState, ModelConfig, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sentences per optimizer step; every drug of a sentence is in the same batch.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip, 0 disables.
    pub grad_clip: f64,
    /// Stop after this many epochs without a dev improvement, 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            patience: 0,
            seed: 0,
            threshold: super::DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Invalid(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Adam plus optional gradient clipping.
#[derive(Debug, Clone)]
pub struct Optimizer {
    state: AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    clip: f64,
}

impl Optimizer {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Self {
            state: AdamState::new(params),
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            clip: cfg.grad_clip,
        }
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &mut ParamSet) -> Result<(), ModelError> {
        if self.clip > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|(_, t)| t.data().iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > self.clip {
                grads.scale(self.clip / norm);
            }
        }
        optimizer_step(params, grads, &mut self.state, self.lr, self.beta1, self.beta2)?;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_lenient_f1: Option<f64>,
    pub dev_strict_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: UnifiedModel,
    pub history: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Shared epoch loop: per-epoch seeded shuffle, mini-batches, Adam, best-dev
/// snapshot and patience.
///
/// `step` computes the mean batch loss and fills the gradient; `dev`
/// returns (lenient, strict) F1 for the current parameters, or `None`.
pub(crate) fn fit<I, S, D>(
    params: &mut ParamSet,
    items: &[I],
    cfg: &TrainConfig,
    mut step: S,
    mut dev: D,
) -> Result<(Vec<EpochLog>, usize), ModelError>
where
    S: FnMut(&ParamSet, &[&I], &mut ParamSet) -> Result<f64, ModelError>,
    D: FnMut(&ParamSet) -> Result<Option<(f64, f64)>, ModelError>,
{
    cfg.validate()?;
    if items.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut opt = Optimizer::new(params, cfg);
    let mut grads = params.zeros_like();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&I> = chunk.iter().map(|&i| &items[i]).collect();
            let loss = step(params, &batch, &mut grads)?;
            opt.apply(params, &mut grads)?;
            total += loss;
            batches += 1;
        }
        let scores = dev(params)?;
        history.push(EpochLog {
            epoch,
            train_loss: total / batches as f64,
            dev_lenient_f1: scores.map(|s| s.0),
            dev_strict_f1: scores.map(|s| s.1),
        });
        if let Some((f1, _)) = scores {
            if best.as_ref().is_none_or(|b| f1 > b.0) {
                best = Some((f1, epoch, params.clone()));
            } else if cfg.patience > 0 && epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, snapshot)) => {
            *params = snapshot;
            epoch
        }
        None => history.len(),
    };
    Ok((history, best_epoch))
}

pub(crate) fn dev_scores(model: &UnifiedModel, dev: &[LabeledSentence]) -> Result<Option<(f64, f64)>, ModelError> {
    if dev.is_empty() {
        return Ok(None);
    }
    let sents: Vec<Sentence> = dev.iter().map(|l| l.sentence.clone()).collect();
    let preds = model.annotate(&sents)?;
    let gold = all_annotations(dev);
    let l = score(&preds, &gold, MatchMode::Lenient).map_err(|e| ModelError::Invalid(e.to_string()))?;
    let s = score(&preds, &gold, MatchMode::Strict).map_err(|e| ModelError::Invalid(e.to_string()))?;
    Ok(Some((l.f1, s.f1)))
}

impl UnifiedModel {
    /// One Adam step on the mean example loss of `groups`; returns that loss.
    pub fn train_step(&mut self, groups: &[&Group], opt: &mut Optimizer) -> Result<f64, ModelError> {
        let mut grads = self.params.zeros_like();
        let loss = batch_loss_grad(&self.params, &self.config, groups, &mut grads)?;
        opt.apply(&mut self.params, &mut grads)?;
        Ok(loss)
    }

    /// Mean example loss without updating anything.
    pub fn loss(&self, groups: &[&Group]) -> Result<f64, ModelError> {
        let n: usize = groups.iter().map(|g| g.examples.len()).sum();
        let mut total = 0.0;
        for g in groups {
            total += super::unified::group_loss(&self.params, &self.config, g, None)?;
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }
}

/// Train a fresh model on `train` (vocabulary built from it), keeping the
/// parameters of the epoch with the best dev lenient F1.
pub fn train(
    train: &[LabeledSentence],
    dev: &[LabeledSentence],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    let vocab = Vocab::build(train.iter().map(|l| &l.sentence));
    let mut model = UnifiedModel::new(model_cfg.clone(), vocab)?;
    model.threshold = cfg.threshold;
    let groups: Vec<Group> = train
        .iter()
        .map(|l| model.group(l))
        .filter(|g| !g.examples.is_empty())
        .collect();
    let mcfg = model.config.clone();
    let mut params = std::mem::take(&mut model.params);
    let mut probe = model.clone();
    let (history, best_epoch) = fit(
        &mut params,
        &groups,
        cfg,
        |p, batch, grads| batch_loss_grad(p, &mcfg, batch, grads),
        |p| {
            probe.params.clone_from(p);
            dev_scores(&probe, dev)
        },
    )?;
    model.params = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}
