//! Loss, optimizer, plateau scheduling, metrics, checkpoints and the
//! cross-validation loop.

mod checkpoint;
mod cv;
mod loss;
mod metrics;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub(crate) use cv::argmax;
pub use cv::{
    evaluate, run_cross_validation, stack_images, train_epoch, train_fold, BestTracker, CvOptions, CvResult,
    EpochRecord, EpochSummary, Evaluation, FoldResult,
};
pub use metrics::{metric_defs, ClassMetrics, ConfusionMatrix, MetricsReport};
pub use optim::{adamw_step, AdamWConfig, OptimizerState, PlateauScheduler, SchedulerConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::nn::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("no samples to evaluate")]
    EmptyDataset,
    #[error("class mismatch: {0}")]
    ClassMismatch(String),
    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    pub k_folds: usize,
    /// Re-estimate batch-norm statistics on the clean training fold before
    /// each validation pass instead of relying on the moving averages alone.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            betas: adam.betas,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            scheduler: SchedulerConfig::default(),
            seed: 0,
            k_folds: 5,
            recalibrate_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        let s = &self.scheduler;
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.k_folds < 2 {
            return bad("k_folds must be at least 2");
        }
        if !(s.min_lr >= 0.0 && self.lr > s.min_lr && self.lr.is_finite()) {
            return bad("lr must exceed scheduler.min_lr, which must be >= 0");
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(s.factor > 0.0 && s.factor < 1.0) {
            return bad("scheduler.factor must lie in (0, 1)");
        }
        if !(s.threshold >= 0.0) {
            return bad("scheduler.threshold must be >= 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let base = TrainConfig::default();
        let cases = [
            TrainConfig {
                batch_size: 0,
                ..base.clone()
            },
            TrainConfig {
                lr: 1e-7,
                ..base.clone()
            },
            TrainConfig {
                betas: [1.0, 0.9],
                ..base.clone()
            },
            TrainConfig {
                k_folds: 1,
                ..base.clone()
            },
            TrainConfig {
                epochs: 0,
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }
}
