//! SGD training with the poly schedule, class-weighted losses, experiment
//! recipes and the cross-validation driver.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::{ModalityStacks, ScalingScope};
use crate::classes::{ClassLabel, NUM_CLASSES};
use crate::dataset::{balance_classes, class_weights_for, kfold, DatasetError, PatchSample};
use crate::evaluate::{confusion, EvalError, EvalReport};
use crate::model::{
    argmax, build_fusion, save_checkpoint, BackboneConfig, ChannelNorm, FusionStrategy, InputAdapter, Modality,
    Model, ModelError, ModelInput, ModelKind, Slot,
};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("epoch {epoch} outside [0, {max_epoch}]")]
    EpochOutOfRange { epoch: usize, max_epoch: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples {samples:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        samples: Vec<String>,
    },
    #[error("buffer lengths differ: params {params}, grads {grads}, velocity {velocity}")]
    ShapeMismatch { params: usize, grads: usize, velocity: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Plain,
    Reweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    None,
    #[default]
    Augment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub r_i: f64,
    pub power: f64,
    pub max_epoch: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub balance_mode: BalanceMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            r_i: 1e-4,
            power: 4.0,
            max_epoch: 100,
            weight_decay: 2e-5,
            momentum: 0.5,
            batch_size: 16,
            loss_mode: LossMode::Plain,
            balance_mode: BalanceMode::Augment,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.r_i > 0.0 && self.r_i.is_finite()) {
            return bad("r_i must be positive");
        }
        if self.max_epoch == 0 {
            return bad("max_epoch must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return bad("power must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// r_i * (1 - epoch / max_epoch)^power.
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.max_epoch {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            max_epoch: cfg.max_epoch,
        });
    }
    Ok(cfg.r_i * (1.0 - epoch as f64 / cfg.max_epoch as f64).powf(cfg.power))
}

/// `-alpha * log softmax(scores)[label]` and its gradient in the scores.
pub fn weighted_cross_entropy<T: Scalar>(scores: &[T], label: usize, alpha: f64) -> (T, Vec<T>) {
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = scores.iter().map(|&s| (s - m).exp()).sum();
    let log_z = m + z.ln();
    let a = T::of(alpha);
    let loss = a * (log_z - scores[label]);
    let grad = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let p = (s - log_z).exp();
            a * (if i == label { p - T::one() } else { p })
        })
        .collect();
    (loss, grad)
}

/// Momentum SGD with coupled weight decay on the given slots only:
/// v <- m v + (g + wd p), p <- p - lr v.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    slots: &[Slot],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::ShapeMismatch {
            params: params.len(),
            grads: grads.len(),
            velocity: velocity.len(),
        });
    }
    let (m, wd, lr) = (T::of(cfg.momentum), T::of(cfg.weight_decay), T::of(lr));
    for slot in slots {
        let range = slot.offset..slot.offset + slot.len;
        for i in range {
            velocity[i] = m * velocity[i] + (grads[i] + wd * params[i]);
            params[i] -= lr * velocity[i];
        }
    }
    Ok(())
}

/// Adapts every sample to the model grid.
pub fn prepare_inputs<T: Scalar>(samples: &[PatchSample<T>], adapter: InputAdapter) -> Vec<ModelInput<T>> {
    samples.par_iter().map(|s| adapter.adapt(&s.stacks)).collect()
}

/// Class probabilities for each input.
pub fn predict_proba<T: Scalar>(model: &Model<T>, inputs: &[ModelInput<T>]) -> Result<Vec<Vec<T>>> {
    inputs
        .par_iter()
        .map(|x| Ok(crate::model::softmax(&model.forward(x)?)))
        .collect()
}

pub fn predict<T: Scalar>(model: &Model<T>, inputs: &[ModelInput<T>]) -> Result<Vec<ClassLabel>> {
    inputs
        .par_iter()
        .map(|x| Ok(ClassLabel::from_id(argmax(&model.forward(x)?)).expect("six scores")))
        .collect()
}

pub fn evaluate_model<T: Scalar>(model: &Model<T>, samples: &[PatchSample<T>]) -> Result<EvalReport> {
    let inputs = prepare_inputs(samples, InputAdapter::new(model.nominal_input_px()));
    let preds = predict(model, &inputs)?;
    let truths: Vec<ClassLabel> = samples.iter().map(|s| s.label).collect();
    Ok(confusion(&preds, &truths)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    /// Epoch and parameters with the highest validation accuracy.
    pub best: Option<(usize, Vec<T>)>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_acc\n");
        for r in &self.history {
            let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.lr, r.train_loss, val);
        }
        out
    }

    /// Copy of `model` carrying the best-validation parameters.
    pub fn best_model(&self, model: &Model<T>) -> Option<Model<T>> {
        self.best.as_ref().map(|(_, p)| {
            let mut m = model.clone();
            m.store_mut().data_mut().copy_from_slice(p);
            m
        })
    }
}

/// Trains `model` in place. Epochs are numbered from 1 in the history and
/// epoch `e` uses `poly_lr(e - 1)`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[PatchSample<T>],
    val_set: &[PatchSample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let adapter = InputAdapter::new(model.nominal_input_px());
    let inputs = prepare_inputs(train_set, adapter);
    let val_inputs = prepare_inputs(val_set, adapter);
    let val_truths: Vec<ClassLabel> = val_set.iter().map(|s| s.label).collect();
    if model.kind() == (ModelKind::Fusion { strategy: FusionStrategy::Early }) {
        model.set_channel_norm(ChannelNorm::fit(&inputs));
    }
    let alpha: Vec<f64> = match cfg.loss_mode {
        LossMode::Plain => vec![1.0; NUM_CLASSES],
        LossMode::Reweighted => class_weights_for(train_set)?.alpha,
    };
    let slots = model.trainable_slots();
    let n_params = model.param_count();
    let mut velocity = vec![T::zero(); n_params];
    let mut history = Vec::with_capacity(cfg.max_epoch);
    let mut best: Option<(usize, f64, Vec<T>)> = None;

    for epoch in 0..cfg.max_epoch {
        let lr = poly_lr(epoch, cfg)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[0x7a1, epoch as u64]));
        let (mut epoch_loss, mut epoch_weight) = (0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frozen_model = &*model;
            let per_sample: Vec<std::result::Result<(T, Vec<T>), ModelError>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = vec![T::zero(); n_params];
                    let label = train_set[i].label.id();
                    let a = alpha[label];
                    let (loss, _) = frozen_model.forward_backward(&inputs[i], &mut g, |s| {
                        weighted_cross_entropy(s, label, a)
                    })?;
                    Ok((loss, g))
                })
                .collect();
            let weight_sum: f64 = batch.iter().map(|&i| alpha[train_set[i].label.id()]).sum();
            let mut grad = vec![T::zero(); n_params];
            let mut batch_loss = 0.0;
            for r in per_sample {
                let (loss, g) = r?;
                batch_loss += loss.as_f64();
                for slot in &slots {
                    for k in slot.offset..slot.offset + slot.len {
                        grad[k] += g[k];
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                    samples: batch.iter().map(|&i| train_set[i].sample_id.clone()).collect(),
                });
            }
            let inv = T::of(1.0 / weight_sum);
            grad.iter_mut().for_each(|g| *g *= inv);
            epoch_loss += batch_loss;
            epoch_weight += weight_sum;
            sgd_step(model.store_mut().data_mut(), &grad, &mut velocity, &slots, lr, cfg)?;
        }
        let val_acc = if val_set.is_empty() {
            None
        } else {
            let preds = predict(model, &val_inputs)?;
            Some(confusion(&preds, &val_truths)?.overall)
        };
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch + 1, acc, model.params().to_vec()));
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: epoch_loss / epoch_weight,
            val_acc,
        };
        log::debug!(
            "{} epoch {} lr {:.3e} loss {:.5} val {:?}",
            model.kind(),
            record.epoch,
            record.lr,
            record.train_loss,
            record.val_acc
        );
        history.push(record);
    }
    Ok(TrainOutcome {
        history,
        best: best.map(|(e, _, p)| (e, p)),
    })
}

/// Writes `config.json`, `history.csv`, `final.json`/`.bin` and, when a
/// validation set was used, `best.json`/`.bin` into `dir`.
pub fn write_run_dir<T: Scalar>(
    dir: impl AsRef<Path>,
    cfg: &TrainConfig,
    model: &Model<T>,
    outcome: &TrainOutcome<T>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    fs::write(dir.join("history.csv"), outcome.history_csv())?;
    save_checkpoint(model, dir.join("final.json"))?;
    if let Some(best) = outcome.best_model(model) {
        save_checkpoint(&best, dir.join("best.json"))?;
    }
    Ok(())
}

/// Data for one experiment: the scene the patches were cut from and the splits.
#[derive(Debug, Clone)]
pub struct ExperimentData<T> {
    pub scene: ModalityStacks<T>,
    pub scope: ScalingScope,
    pub train: Vec<PatchSample<T>>,
    pub validation: Vec<PatchSample<T>>,
    pub test: Vec<PatchSample<T>>,
}

/// Training set after the configured balancing.
pub fn training_set<T: Scalar>(
    train: &[PatchSample<T>],
    scene: &ModalityStacks<T>,
    scope: ScalingScope,
    cfg: &TrainConfig,
) -> Result<Vec<PatchSample<T>>> {
    Ok(match cfg.balance_mode {
        BalanceMode::None => train.to_vec(),
        BalanceMode::Augment => balance_classes(train, scene, rng::derive_seed(cfg.seed, &[0xba1]), scope)?,
    })
}

/// Seed used to initialize models for a training run.
pub fn init_seed(cfg: &TrainConfig) -> u64 {
    rng::derive_seed(cfg.seed, &[0x1417])
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: &'static str,
    pub kind: ModelKind,
    pub loss_mode: LossMode,
    pub balance_mode: BalanceMode,
}

/// The eight rows of the ablation table in their published order.
pub fn ablation_recipes() -> Vec<Recipe> {
    let single = |name, modality, loss_mode, balance_mode| Recipe {
        name,
        kind: ModelKind::Single { modality },
        loss_mode,
        balance_mode,
    };
    let fusion = |name, strategy| Recipe {
        name,
        kind: ModelKind::Fusion { strategy },
        loss_mode: LossMode::Plain,
        balance_mode: BalanceMode::Augment,
    };
    vec![
        single("rgb-no-balance", Modality::Rgb, LossMode::Plain, BalanceMode::None),
        single("rgb-reweighted", Modality::Rgb, LossMode::Reweighted, BalanceMode::None),
        single("rgb", Modality::Rgb, LossMode::Plain, BalanceMode::Augment),
        single("ndd", Modality::Ndd, LossMode::Plain, BalanceMode::Augment),
        fusion("early", FusionStrategy::Early),
        fusion("middle-l2", FusionStrategy::MiddleL2),
        fusion("middle-l3", FusionStrategy::MiddleL3),
        fusion("late", FusionStrategy::Late),
    ]
}

/// A trained model and its history.
#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub model: Model<T>,
    pub outcome: TrainOutcome<T>,
}

/// Builds and trains one model. Middle and late fusion need the trained
/// single-modality models to inherit from.
pub fn train_kind<T: Scalar>(
    kind: ModelKind,
    base: &BackboneConfig,
    data: &ExperimentData<T>,
    cfg: &TrainConfig,
    rgb: Option<&Model<T>>,
    ndd: Option<&Model<T>>,
) -> Result<Trained<T>> {
    let seed = init_seed(cfg);
    let mut model = match kind {
        ModelKind::Single { modality } => Model::single(modality, base, seed)?,
        ModelKind::Fusion { strategy } => build_fusion(strategy, base, rgb, ndd, seed)?,
    };
    let train_set = training_set(&data.train, &data.scene, data.scope, cfg)?;
    let outcome = train(&mut model, &train_set, &data.validation, cfg)?;
    Ok(Trained { model, outcome })
}

/// Result of one ablation row.
#[derive(Debug, Clone)]
pub struct RecipeResult<T> {
    pub recipe: Recipe,
    pub trained: Trained<T>,
    pub test_report: EvalReport,
}

/// Trains the rows of the ablation grid named in `only` (all when empty),
/// plus the single-modality rows that fusion rows inherit from.
pub fn run_ablation<T: Scalar>(
    base: &BackboneConfig,
    data: &ExperimentData<T>,
    cfg: &TrainConfig,
    only: &[&str],
) -> Result<Vec<RecipeResult<T>>> {
    let wanted = |r: &Recipe| only.is_empty() || only.contains(&r.name);
    let recipes = ablation_recipes();
    let needs_singles = recipes
        .iter()
        .any(|r| wanted(r) && matches!(r.kind, ModelKind::Fusion { strategy } if strategy.inherits()));
    let mut results: Vec<RecipeResult<T>> = Vec::new();
    for recipe in &recipes {
        let is_parent = matches!(recipe.name, "rgb" | "ndd") && needs_singles;
        if !wanted(recipe) && !is_parent {
            continue;
        }
        let rc = TrainConfig {
            loss_mode: recipe.loss_mode,
            balance_mode: recipe.balance_mode,
            ..*cfg
        };
        let find = |name: &str| results.iter().find(|r| r.recipe.name == name).map(|r| &r.trained.model);
        let trained = train_kind(recipe.kind, base, data, &rc, find("rgb"), find("ndd"))?;
        let test_report = evaluate_model(&trained.model, &data.test)?;
        log::info!("{}: overall {:.4}", recipe.name, test_report.overall);
        results.push(RecipeResult {
            recipe: *recipe,
            trained,
            test_report,
        });
    }
    results.retain(|r| wanted(&r.recipe));
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub validation: EvalReport,
    pub test: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_validation_overall: f64,
    pub mean_test_overall: Option<f64>,
}

/// k-fold driver. Each fold trains through `fit(fold, train, validation)`
/// and is scored on its held-out fold and, when given, on `holdout`.
pub fn run_cv<T: Scalar>(
    samples: &[PatchSample<T>],
    holdout: &[PatchSample<T>],
    k: usize,
    seed: u64,
    mut fit: impl FnMut(usize, &[PatchSample<T>], &[PatchSample<T>]) -> Result<Model<T>>,
) -> Result<CvReport> {
    let folds = kfold(samples.len(), k, seed)?;
    let mut results = Vec::with_capacity(k);
    for (f, fold) in folds.iter().enumerate() {
        let tr: Vec<_> = fold.train.iter().map(|&i| samples[i].clone()).collect();
        let va: Vec<_> = fold.test.iter().map(|&i| samples[i].clone()).collect();
        let model = fit(f, &tr, &va)?;
        let validation = evaluate_model(&model, &va)?;
        let test = if holdout.is_empty() {
            None
        } else {
            Some(evaluate_model(&model, holdout)?)
        };
        results.push(FoldResult { fold: f, validation, test });
    }
    let n = results.len() as f64;
    let mean_validation_overall = results.iter().map(|r| r.validation.overall).sum::<f64>() / n;
    let mean_test_overall = (!holdout.is_empty())
        .then(|| results.iter().map(|r| r.test.as_ref().expect("holdout").overall).sum::<f64>() / n);
    Ok(CvReport {
        folds: results,
        mean_validation_overall,
        mean_test_overall,
    })
}
