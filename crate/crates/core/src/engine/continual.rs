//! Sequential training over target tasks.
//!
//! The first task is always trained with Adam from the initial parameters.
//! Every later task starts from the previous task's final parameters `θ*`
//! and is trained with a pluggable [`UpdateRule`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{MetricRow, RunMetrics};
use super::optim::{adam_step_in_place, AdamConfig, AdamState};
use super::rules::{LearnedRule, RuleParams, TaskContext, UpdateRule};
use crate::classifier::{self, minibatch_indices, Batch, ClassifierParams, GradStatKind};
use crate::ndcore::Rng;
use crate::predictor::PredictorParams;
use crate::tasks::TaskSequence;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualConfig {
    /// Adam epochs on the first task.
    pub first_task_epochs: usize,
    /// Epochs of the update rule on each later task.
    pub epochs: usize,
    pub minibatch: usize,
    pub adam: AdamConfig,
    pub grad_stat: GradStatKind,
    pub rules: RuleParams,
    pub seed: u64,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            first_task_epochs: 5,
            epochs: 5,
            minibatch: 64,
            adam: AdamConfig::default(),
            grad_stat: GradStatKind::Squared,
            rules: RuleParams::default(),
            seed: 0,
        }
    }
}

/// Which split [`evaluate_sequence`] scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub per_task: Vec<f64>,
    pub average: f64,
}

/// Accuracy on each task's test split and their unweighted mean.
pub fn evaluate_sequence(params: &ClassifierParams, targets: &TaskSequence) -> Result<SequenceScore> {
    evaluate_split(params, targets, Split::Test)
}

pub fn evaluate_split(params: &ClassifierParams, targets: &TaskSequence, split: Split) -> Result<SequenceScore> {
    let per_task = targets
        .tasks()
        .iter()
        .map(|t| {
            let batch = match split {
                Split::Train => &t.train,
                Split::Valid => &t.valid,
                Split::Test => &t.test,
            };
            classifier::accuracy(params, batch)
        })
        .collect::<Result<Vec<_>>>()?;
    let average = super::metrics::mean(&per_task);
    Ok(SequenceScore { per_task, average })
}

pub(crate) fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite loss {loss} during {what}")))
    }
}

/// One Adam epoch over `data` in seed-shuffled minibatches. Returns the mean
/// minibatch loss.
pub(crate) fn adam_epoch(
    params: &mut ClassifierParams,
    state: &mut AdamState,
    data: &Batch,
    minibatch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let batches = minibatch_indices(data.len(), minibatch, rng);
    let mut total = 0.0;
    for idx in &batches {
        let (loss, grad) = classifier::loss_and_grad(params, &data.select(idx))?;
        check_finite(loss, "Adam training")?;
        total += loss;
        let next = adam_step_in_place(params.theta(), &grad, state)?;
        params.set_theta(next)?;
    }
    Ok(total / batches.len() as f64)
}

/// Trains a fresh Adam state for `epochs` epochs on `data`.
pub fn train_adam(
    params: &ClassifierParams,
    data: &Batch,
    epochs: usize,
    minibatch: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<ClassifierParams> {
    let mut out = params.clone();
    let mut state = AdamState::new(out.num_params(), adam);
    let root = Rng::new(seed).derive("adam-train");
    for epoch in 0..epochs {
        adam_epoch(&mut out, &mut state, data, minibatch, &mut root.derive_indexed("epoch", epoch as u64))?;
    }
    Ok(out)
}

fn first_task_seed(seed: u64) -> u64 {
    Rng::new(seed).derive("continual").derive("first-task").next_u64()
}

/// Trains on `targets` in order: Adam on the first task, `rule` afterwards.
pub fn run_sequence(
    theta_init: &ClassifierParams,
    rule: &mut dyn UpdateRule,
    targets: &TaskSequence,
    cfg: &ContinualConfig,
) -> Result<(ClassifierParams, RunMetrics)> {
    if targets.is_empty() {
        return Err(Error::arg("continual learning needs at least one task"));
    }
    if cfg.minibatch == 0 {
        return Err(Error::arg("minibatch must be at least 1"));
    }
    let start = Instant::now();
    let root = Rng::new(cfg.seed).derive("continual");
    let mut params = theta_init.clone();
    let mut metrics = RunMetrics::default();
    let record = |metrics: &mut RunMetrics, params: &ClassifierParams, task_index, epoch, loss| -> Result<()> {
        let score = evaluate_sequence(params, targets)?;
        metrics.rows.push(MetricRow {
            task_index,
            epoch,
            loss,
            accuracies: score.per_task,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        Ok(())
    };

    let first = &targets.tasks()[0];
    let mut adam = AdamState::new(params.num_params(), cfg.adam);
    let first_root = Rng::new(first_task_seed(cfg.seed)).derive("adam-train");
    for epoch in 0..cfg.first_task_epochs {
        let mut rng = first_root.derive_indexed("epoch", epoch as u64);
        let loss = adam_epoch(&mut params, &mut adam, &first.train, cfg.minibatch, &mut rng)?;
        record(&mut metrics, &params, 1, epoch + 1, loss)?;
    }

    for (i, task) in targets.tasks().iter().enumerate().skip(1) {
        let task_rng = root.derive_indexed("task", i as u64);
        let theta_star = params.theta().clone();
        let prev = &targets.tasks()[i - 1];
        let stats = if rule.needs_prev_stats() {
            Some(classifier::gradient_statistic(
                &params,
                &prev.train,
                cfg.minibatch,
                &mut task_rng.derive("prev-stats"),
                cfg.grad_stat,
            )?)
        } else {
            None
        };
        rule.begin_task(&TaskContext {
            theta_star: &theta_star,
            prev_stats: stats.as_ref(),
        })?;
        for epoch in 0..cfg.epochs {
            let mut rng = task_rng.derive_indexed("epoch", epoch as u64);
            let batches = minibatch_indices(task.train.len(), cfg.minibatch, &mut rng);
            let mut total = 0.0;
            for idx in &batches {
                let (loss, grad) = classifier::loss_and_grad(&params, &task.train.select(idx))?;
                check_finite(loss, rule.name())?;
                total += loss;
                let next = rule.step(params.theta(), &grad)?;
                if !next.is_finite() {
                    return Err(Error::Divergence(format!("{} produced non-finite parameters", rule.name())));
                }
                params.set_theta(next)?;
            }
            record(&mut metrics, &params, i + 1, epoch + 1, total / batches.len() as f64)?;
        }
    }

    let final_score = evaluate_sequence(&params, targets)?;
    metrics.finish(final_score.per_task);
    Ok((params, metrics))
}

/// Continual learning with a fixed trained predictor.
pub fn continual_learn(
    theta_init: &ClassifierParams,
    phi_star: &PredictorParams,
    targets: &TaskSequence,
    cfg: &ContinualConfig,
) -> Result<(ClassifierParams, RunMetrics)> {
    let mut rule = LearnedRule::new(phi_star.clone(), cfg.rules.eta);
    run_sequence(theta_init, &mut rule, targets, cfg)
}
