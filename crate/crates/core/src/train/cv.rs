use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::metrics::{metric_defs, ConfusionMatrix, MetricsReport};
use super::optim::{adamw_step, OptimizerState, PlateauScheduler};
use super::{TrainConfig, TrainError};
use crate::data::{augment, derive_seed, stratified_kfold, AugmentConfig, Dataset, FoldPlan, Sample};
use crate::nn::{Mode, Model, ModelConfig};
use crate::tensor::{Graph, Tensor};
use crate::Scalar;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4F50;
const FOLD_STREAM: u64 = 0x464F_4C44;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub loss: f64,
    pub accuracy: f64,
}

/// Stacks `1×H×W` sample images into an `N×1×H×W` batch.
pub fn stack_images<'a, T: Scalar>(samples: impl IntoIterator<Item = &'a Sample>) -> Tensor<T> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut shape = Vec::new();
    for s in samples {
        shape = s.image.shape().to_vec();
        data.extend(s.pixels().iter().map(|&v| <T as Scalar>::from_f32(v)));
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape);
    Tensor::new(&full, data, false).expect("samples share one shape")
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One pass over `samples` in a seed-and-epoch-determined order. Each batch
/// runs forward, loss, backward and one AdamW step at learning rate `lr`.
/// Returns the mean batch loss and the training accuracy.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut OptimizerState<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    lr: f64,
    augmentation: Option<&AugmentConfig>,
    epoch: usize,
) -> Result<EpochSummary, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    model.set_mode(Mode::Train);
    let epoch = epoch as u64;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed ^ SHUFFLE_STREAM,
        0,
        epoch,
    )));
    let adamw = cfg.adamw();
    let (mut loss_sum, mut batches, mut correct) = (0.0, 0usize, 0usize);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<Sample> = chunk
            .iter()
            .map(|&i| match augmentation {
                Some(a) => augment(
                    &samples[i],
                    a,
                    &mut ChaCha8Rng::seed_from_u64(derive_seed(a.seed, i as u64, epoch)),
                ),
                None => samples[i].clone(),
            })
            .collect();
        let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let x = g.constant(stack_images(&batch));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ DROPOUT_STREAM, b as u64, epoch));
        let fwd = model.forward(&mut g, x, &mut rng)?;
        let loss = g.cross_entropy(fwd.logits, &targets)?;
        model.zero_grad();
        g.backward(loss)?;
        model.accumulate_grads(&g, &fwd);
        adamw_step(model.params_mut(), optimizer, &adamw, lr)?;

        loss_sum += g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        batches += 1;
        let logits = g.value(fwd.logits);
        let classes = logits.shape()[1];
        correct += logits
            .data()
            .chunks(classes)
            .zip(&targets)
            .filter(|(row, &t)| argmax(row) == t)
            .count();
    }
    Ok(EpochSummary {
        loss: loss_sum / batches as f64,
        accuracy: correct as f64 / samples.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
    /// Mean per-sample cross-entropy.
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// Eval-mode predictions, confusion matrix, metrics and mean loss.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], batch_size: usize) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = model.config().num_classes;
    let mut confusion = ConfusionMatrix::new(classes);
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0f64;
    for chunk in samples.chunks(batch_size.max(1)) {
        let logits = model.predict(&stack_images(chunk))?;
        for (row, s) in logits.data().chunks(classes).zip(chunk) {
            if s.label >= classes {
                return Err(TrainError::ClassMismatch(format!(
                    "label {} but model has {classes} classes",
                    s.label
                )));
            }
            let pred = argmax(row);
            confusion.record(s.label, pred);
            predictions.push(pred);
            let row64: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let max = row64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row64.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss_sum += lse - row64[s.label];
        }
    }
    Ok(Evaluation {
        report: metric_defs(&confusion),
        confusion,
        loss: loss_sum / samples.len() as f64,
        predictions,
    })
}

/// Keeps the first epoch with the highest accuracy seen so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BestTracker {
    best: Option<(usize, f64)>,
}

impl BestTracker {
    /// True when `accuracy` strictly beats everything offered before.
    pub fn offer(&mut self, epoch: usize, accuracy: f64) -> bool {
        let improved = self.best.is_none_or(|(_, b)| accuracy > b);
        if improved {
            self.best = Some((epoch, accuracy));
        }
        improved
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    /// 1-based fold number.
    pub fold: usize,
    pub best_epoch: usize,
    /// Validation evaluation of the best checkpoint.
    pub evaluation: Evaluation,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
    pub validation_indices: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct CvOptions<'a> {
    pub augment: Option<&'a AugmentConfig>,
    pub test: Option<&'a Dataset>,
    /// When set, each fold writes `fold{n}/best.ckpt` below it on every
    /// strict improvement.
    pub checkpoint_dir: Option<&'a Path>,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    /// 1-based fold whose checkpoint has the highest validation accuracy,
    /// lowest fold on ties.
    pub best_fold: usize,
    pub test: Option<Evaluation>,
}

fn check_classes(dataset: &Dataset, model_cfg: &ModelConfig) -> Result<(), TrainError> {
    if dataset.class_names.len() != model_cfg.num_classes {
        return Err(TrainError::ClassMismatch(format!(
            "dataset has {} classes, model has {}",
            dataset.class_names.len(),
            model_cfg.num_classes
        )));
    }
    Ok(())
}

/// Trains a fresh model on every fold but `fold` (0-based) and validates on
/// `fold` after each epoch, keeping the checkpoint of the first epoch with
/// the best validation accuracy.
pub fn train_fold<T: Scalar>(
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &CvOptions<'_>,
) -> Result<FoldResult, TrainError> {
    let fold_seed = derive_seed(cfg.seed, fold as u64, FOLD_STREAM);
    let fold_cfg = TrainConfig {
        seed: fold_seed,
        ..cfg.clone()
    };
    let fold_aug = opts.augment.map(|a| AugmentConfig {
        seed: derive_seed(a.seed, fold as u64, FOLD_STREAM),
        ..a.clone()
    });
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].clone()).collect::<Vec<_>>();
    let validation_indices = plan.validation_indices(fold);
    let train = pick(&plan.training_indices(fold));
    let val = pick(&validation_indices);

    let mut model = Model::<T>::build(model_cfg, &mut ChaCha8Rng::seed_from_u64(fold_seed))?;
    let mut optimizer = OptimizerState::new(model.params());
    let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.scheduler);
    let mut tracker = BestTracker::default();
    let mut best: Option<(Checkpoint, Evaluation)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let path = opts
        .checkpoint_dir
        .map(|d| d.join(format!("fold{}", fold + 1)).join("best.ckpt"));

    for epoch in 1..=cfg.epochs {
        let lr = scheduler.lr();
        let summary = train_epoch(
            &mut model,
            &mut optimizer,
            &train,
            &fold_cfg,
            lr,
            fold_aug.as_ref(),
            epoch,
        )?;
        if cfg.recalibrate_bn {
            let batches: Vec<Tensor<T>> = train.chunks(cfg.batch_size).map(stack_images).collect();
            model.recalibrate_norms(&batches)?;
        }
        model.set_mode(Mode::Eval);
        let eval = evaluate(&model, &val, cfg.batch_size)?;
        let acc = eval.report.accuracy;
        log::info!(
            "fold {} epoch {epoch}/{}: lr {lr:.2e} train loss {:.4} acc {:.4} | val loss {:.4} acc {acc:.4}",
            fold + 1,
            cfg.epochs,
            summary.loss,
            summary.accuracy,
            eval.loss,
        );
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: summary.loss,
            train_accuracy: summary.accuracy,
            val_loss: eval.loss,
            val_accuracy: acc,
        });
        if tracker.offer(epoch, acc) {
            let meta = CheckpointMeta {
                model: model_cfg.clone(),
                class_names: dataset.class_names.clone(),
                seed: cfg.seed,
                fold: Some(fold + 1),
                epoch,
                val_accuracy: acc,
                tensor_count: 0,
                optimizer_step: None,
            };
            let ckpt = Checkpoint::capture(&model, Some(&optimizer), meta);
            if let Some(p) = &path {
                ckpt.save(p)?;
            }
            best = Some((ckpt, eval.clone()));
        }
        scheduler.step(eval.loss);
    }
    let (checkpoint, mut evaluation) = best.expect("at least one epoch ran");
    evaluation.report.fold_id = Some(fold + 1);
    Ok(FoldResult {
        fold: fold + 1,
        best_epoch: checkpoint.meta.epoch,
        evaluation,
        history,
        checkpoint,
        validation_indices,
    })
}

/// Stratified K-fold training. Folds run in parallel; results do not
/// depend on scheduling. With a test set, the best fold's checkpoint is
/// evaluated on it.
pub fn run_cross_validation<T: Scalar>(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &CvOptions<'_>,
) -> Result<CvResult, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if let Some(a) = opts.augment {
        a.validate()?;
    }
    check_classes(dataset, model_cfg)?;
    if let Some(test) = opts.test {
        if test.class_names != dataset.class_names {
            return Err(TrainError::ClassMismatch(format!(
                "test classes {:?} differ from training classes {:?}",
                test.class_names, dataset.class_names
            )));
        }
    }
    let plan = stratified_kfold(&dataset.labels(), cfg.k_folds, cfg.seed)?;
    let outcomes: Vec<Result<FoldResult, TrainError>> = (0..cfg.k_folds)
        .into_par_iter()
        .map(|fold| train_fold::<T>(dataset, &plan, fold, model_cfg, cfg, opts))
        .collect();
    let mut folds = Vec::with_capacity(outcomes.len());
    for (fold, outcome) in outcomes.into_iter().enumerate() {
        folds.push(outcome.map_err(|e| TrainError::Fold {
            fold: fold + 1,
            source: Box::new(e),
        })?);
    }
    let best = folds
        .iter()
        .fold(None::<&FoldResult>, |acc, f| match acc {
            Some(b) if b.evaluation.report.accuracy >= f.evaluation.report.accuracy => Some(b),
            _ => Some(f),
        })
        .expect("k >= 2 folds");
    let best_fold = best.fold;
    let test = match opts.test {
        Some(test) => {
            let model: Model<T> = best.checkpoint.restore_model()?;
            let mut eval = evaluate(&model, &test.samples, cfg.batch_size)?;
            eval.report.fold_id = Some(best_fold);
            Some(eval)
        }
        None => None,
    };
    Ok(CvResult {
        plan,
        folds,
        best_fold,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_glyphs;

    pub(crate) fn tiny_model() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.blocks.truncate(2);
        cfg.head_channels = 16;
        cfg.head_hidden = 8;
        cfg
    }

    #[test]
    fn strict_improvement_rule() {
        let mut t = BestTracker::default();
        let saved: Vec<usize> = [0.5, 0.7, 0.7, 0.6]
            .iter()
            .enumerate()
            .filter(|&(e, &a)| t.offer(e + 1, a))
            .map(|(e, _)| e + 1)
            .collect();
        assert_eq!(saved, vec![1, 2]);
        assert_eq!(t.best(), Some((2, 0.7)));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32, 0.0, 0.0]), 0);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ds = synth_glyphs(3, 1);
        let mut model = Model::<f32>::build(&tiny_model(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before: Vec<Vec<f32>> = model.params().iter().map(|p| p.tensor.data().to_vec()).collect();
        let mut opt = OptimizerState::new(model.params());
        let cfg = TrainConfig {
            weight_decay: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train_epoch(&mut model, &mut opt, &ds.samples, &cfg, 0.0, None, 1).unwrap();
        for (p, b) in model.params().iter().zip(before) {
            assert_eq!(p.tensor.data(), b.as_slice());
        }
    }

    #[test]
    fn epochs_are_deterministic() {
        let ds = synth_glyphs(4, 2);
        let cfg = TrainConfig {
            batch_size: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let aug = AugmentConfig::default();
        let run = || {
            let mut model = Model::<f32>::build(&tiny_model(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let mut opt = OptimizerState::new(model.params());
            let s1 = train_epoch(&mut model, &mut opt, &ds.samples, &cfg, 1e-3, Some(&aug), 1).unwrap();
            let s2 = train_epoch(&mut model, &mut opt, &ds.samples, &cfg, 1e-3, Some(&aug), 2).unwrap();
            (s1, s2, model.named_tensors())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_empty_is_error() {
        let model = Model::<f32>::build(&tiny_model(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(evaluate(&model, &[], 8), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn cv_partitions_thirty_samples() {
        let ds = synth_glyphs(10, 4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            k_folds: 5,
            ..TrainConfig::default()
        };
        let result = run_cross_validation::<f32>(&ds, &tiny_model(), &cfg, &CvOptions::default()).unwrap();
        assert_eq!(result.folds.len(), 5);
        let mut seen = [0; 30];
        for f in &result.folds {
            assert_eq!(f.validation_indices.len(), 6);
            assert_eq!(f.evaluation.confusion.total(), 6);
            f.validation_indices.iter().for_each(|&i| seen[i] += 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn class_count_must_match() {
        let ds = synth_glyphs(5, 4);
        let mut m = tiny_model();
        m.num_classes = 4;
        let err = run_cross_validation::<f32>(&ds, &m, &TrainConfig::default(), &CvOptions::default()).unwrap_err();
        assert!(matches!(err, TrainError::ClassMismatch(_)));
    }
}
