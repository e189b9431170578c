//! Mini-batch SGD training, the L1 sparsity penalty on batch-norm scales, and fine-tuning.

mod backward;

pub use backward::{
    batch_loss, cross_entropy, l1_subgrad_gammas, model_backward, sgd_step, update_running_stats,
    BackwardOutput, Batch, BnBatchStats, GradientSet,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::dataset::{AugmentConfig, Dataset, Split};
use crate::error::{ensure, KwsError, Result};
use crate::features::{FeatureMatrix, Mfcc};
use crate::nn::{ops, pad_labels, Model, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the L1 penalty on batch-norm scales.
    pub lambda_l1: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    /// Fraction of the run after which the learning rate drops ×0.1; `None` keeps it constant.
    pub lr_decay_at: Option<f64>,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            lambda_l1: 0.0,
            bn_momentum: 0.1,
            seed: 0,
            lr_decay_at: Some(2.0 / 3.0),
            augment: AugmentConfig::default(),
        }
    }
}

/// Default sparsity weight when training a slim-ready model.
pub const DEFAULT_LAMBDA_L1: f64 = 1e-4;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Config,
            "learning rate must be positive, got {}",
            self.lr
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Config,
            "momentum {} outside [0, 1)",
            self.momentum
        );
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(self.epochs >= 1, Config, "epochs must be positive");
        ensure!(
            self.lambda_l1 >= 0.0,
            Config,
            "lambda_l1 must be non-negative, got {}",
            self.lambda_l1
        );
        ensure!(
            (0.0..=1.0).contains(&self.bn_momentum),
            Config,
            "bn_momentum {} outside [0, 1]",
            self.bn_momentum
        );
        if let Some(f) = self.lr_decay_at {
            ensure!(
                (0.0..=1.0).contains(&f),
                Config,
                "lr_decay_at {f} outside [0, 1]"
            );
        }
        self.augment.validate()
    }

    fn lr_for(&self, epoch: usize) -> f64 {
        match self.lr_decay_at {
            Some(f) if epoch as f64 >= f * self.epochs as f64 => self.lr * 0.1,
            _ => self.lr,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Share of prunable γ with |γ| < 0.01; absent for models without γ.
    pub gamma_below_0p01_fraction: Option<f64>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch log serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best-validation epoch (earliest on ties; last epoch without a validation split).
    pub model: Model,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub final_model: Model,
    pub history: Vec<EpochLog>,
}

/// Fraction of γ entries over all prunable layers with magnitude below `threshold`.
pub fn gamma_fraction_below(model: &Model, threshold: f32) -> Option<f64> {
    let gammas: Vec<f32> = model
        .blocks
        .iter()
        .filter_map(|b| b.bn1.gamma.as_ref())
        .flat_map(|g| g.data().iter().copied())
        .collect();
    if gammas.is_empty() {
        return None;
    }
    Some(gammas.iter().filter(|g| g.abs() < threshold).count() as f64 / gammas.len() as f64)
}

pub fn count_gammas_below(model: &Model, threshold: f32) -> usize {
    model
        .blocks
        .iter()
        .filter_map(|b| b.bn1.gamma.as_ref())
        .flat_map(|g| g.data().iter())
        .filter(|g| g.abs() < threshold)
        .count()
}

/// Trains a freshly initialized model of `spec` on the dataset's train split.
pub fn train(
    spec: ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(
        cfg.lambda_l1 == 0.0 || spec.slim_ready,
        Config,
        "a sparsity penalty requires a slim-ready model"
    );
    let mut model = Model::<f32>::init(spec, cfg.seed)?;
    model.labels = pad_labels(&data.manifest.labels);
    run(model, data, cfg, log)
}

/// Continues training an existing (typically pruned) model.
pub fn finetune(
    model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(
        cfg.lambda_l1 == 0.0 || model.spec.slim_ready,
        Config,
        "a sparsity penalty requires a slim-ready model"
    );
    run(model, data, cfg, log)
}

fn load_split(data: &Dataset, split: Split) -> Result<Vec<(AudioClip, usize)>> {
    let entries: Vec<_> = data.manifest.split(split).cloned().collect();
    entries
        .par_iter()
        .map(|e| Ok((data.load_clip(e)?, e.label)))
        .collect()
}

pub(crate) fn featurize_all(
    mfcc: &Mfcc,
    clips: &[(AudioClip, usize)],
) -> Result<Vec<FeatureMatrix>> {
    clips.par_iter().map(|(c, _)| mfcc.compute(c)).collect()
}

pub(crate) fn accuracy_on(model: &Model, feats: &[FeatureMatrix], labels: &[usize]) -> Result<f64> {
    ensure!(
        !feats.is_empty(),
        Contract,
        "cannot measure accuracy on an empty set"
    );
    let hits: Vec<bool> = feats
        .par_iter()
        .zip(labels)
        .map(|(f, &l)| Ok(ops::argmax(&model.forward(f)?.posteriors) == l))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

fn run(
    mut model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let train_set = load_split(data, Split::Train)?;
    ensure!(
        !train_set.is_empty(),
        Contract,
        "the manifest has no training entries"
    );
    let val_set = load_split(data, Split::Validation)?;
    let noise = if cfg.augment.noise_prob > 0.0 {
        data.background_noise()?
    } else {
        Vec::new()
    };
    let mfcc = Mfcc::new(model.mfcc.clone())?;
    let val_feats = featurize_all(&mfcc, &val_set)?;
    let val_labels: Vec<usize> = val_set.iter().map(|(_, l)| *l).collect();

    let mut velocity = GradientSet::zeros_like(&model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffler.set_stream(u64::MAX);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let feats: Vec<FeatureMatrix> = train_set
            .par_iter()
            .enumerate()
            .map(|(i, (clip, _))| {
                let mut rng = cfg.augment.rng_for(epoch, i);
                mfcc.compute(&cfg.augment.apply(clip, &noise, &mut rng)?)
            })
            .collect::<Result<_>>()?;
        order.shuffle(&mut shuffler);
        let lr = cfg.lr_for(epoch);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (h, w) = feats[chunk[0]].shape();
            let batch = Batch::new(
                chunk.iter().map(|&i| feats[i].values.clone()).collect(),
                chunk.iter().map(|&i| train_set[i].1).collect(),
                h,
                w,
            )?;
            let mut out = model_backward(&model, &batch)?;
            if !out.loss.is_finite() || !out.grads.is_finite() {
                return Err(KwsError::Config(format!(
                    "training diverged in epoch {epoch} (non-finite loss); lower the learning rate"
                )));
            }
            if cfg.lambda_l1 > 0.0 {
                l1_subgrad_gammas(&model, &mut out.grads, cfg.lambda_l1)?;
            }
            sgd_step(
                &mut model.trainable_mut(),
                &out.grads,
                &mut velocity,
                lr,
                cfg.momentum,
            )?;
            update_running_stats(&mut model, &out.bn_stats, cfg.bn_momentum);
            loss_sum += out.loss as f64 * chunk.len() as f64;
            correct += out
                .predictions
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
        }
        let val_accuracy = if val_feats.is_empty() {
            None
        } else {
            Some(accuracy_on(&model, &val_feats, &val_labels)?)
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
            gamma_below_0p01_fraction: gamma_fraction_below(&model, 0.01),
        };
        log(&entry);
        history.push(entry);
        let score = val_accuracy.unwrap_or(f64::NEG_INFINITY);
        let improves = match &best {
            None => true,
            Some((s, _, _)) => score > *s || (val_accuracy.is_none()),
        };
        if improves {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        final_model: model,
        history,
    })
}
