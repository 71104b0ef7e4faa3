//! Optimizers, update-rule registry, meta-training and continual learning.

mod continual;
mod meta;
mod metrics;
mod optim;
pub mod rules;

pub use continual::{
    continual_learn, evaluate_sequence, evaluate_split, run_sequence, train_adam, ContinualConfig, SequenceScore,
    Split,
};
pub use meta::{
    count_modes, evaluate_union_loss, meta_train, HistogramRecord, HistogramSpec, MetaTrainConfig, MetaTrainOutcome,
    UnionBatchPolicy,
};
pub use metrics::{mean, median, std_dev, MetricRow, RunMetrics};
pub use optim::{adam_step, ewc_baseline_step, sgd_step, AdamConfig, AdamState};
pub use rules::{RuleParams, RuleRegistry, TaskContext, UpdateRule};

use crate::predictor::PredictorParams;
use crate::{Error, Result};

/// Index and value of the candidate with the highest validation score.
/// Ties go to the lowest index.
pub fn select_best_predictor(candidates: &[(PredictorParams, f64)]) -> Result<(usize, &PredictorParams)> {
    let mut best: Option<usize> = None;
    for (i, (_, score)) in candidates.iter().enumerate() {
        if best.is_none_or(|b| *score > candidates[b].1) {
            best = Some(i);
        }
    }
    let i = best.ok_or_else(|| Error::arg("no predictor candidates to select from"))?;
    Ok((i, &candidates[i].0))
}
