//! Meta-training of the step predictor over consecutive subtask pairs.
//!
//! For each pair `(previous, current)` and each meta-epoch:
//!
//! 1. continue Adam training of the classifier on `previous` to obtain `θ*`;
//! 2. compute the previous-task gradient statistic at `θ*`;
//! 3. for each inner epoch, restart from `θ = θ*` and walk the minibatches of
//!    `current`: predict steps, set `θ' = θ − η · h_φ(features)`, take the
//!    loss gradient at `θ'` on a batch drawn from both tasks, backpropagate
//!    it through the last update only, and Adam-update `φ`.
//!
//! The predictor's Adam state persists across pairs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::continual::{adam_epoch, check_finite, evaluate_sequence};
use super::metrics::{MetricRow, RunMetrics};
use super::optim::{adam_step_in_place, AdamConfig, AdamState};
use crate::classifier::{self, minibatch_indices, Batch, ClassifierParams, GradStatKind, GradStats};
use crate::ndcore::Rng;
use crate::predictor::{
    apply_update, assemble_features, meta_gradient, predict_steps, step_histogram, uniform_edges, PredictorParams,
    StepHistogram,
};
use crate::tasks::TaskSequence;
use crate::{Error, Result};

/// Batch the post-update loss is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnionBatchPolicy {
    /// Half a minibatch from each of the two tasks, sampled per meta-step.
    #[default]
    Balanced,
    /// All training samples of both tasks.
    FullEpoch,
}

/// Histogram edges for step snapshots of `η · steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            lo: -0.5,
            hi: 0.5,
            bins: 101,
        }
    }
}

impl HistogramSpec {
    pub fn edges(&self) -> Vec<f64> {
        uniform_edges(self.lo, self.hi, self.bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTrainConfig {
    pub meta_epochs: usize,
    pub inner_epochs: usize,
    /// Adam epochs on the previous subtask per meta-epoch (cumulative).
    pub classifier_epochs: usize,
    pub minibatch: usize,
    pub eta: f64,
    pub meta_lr: f64,
    pub union_batch: UnionBatchPolicy,
    pub grad_stat: GradStatKind,
    pub adam: AdamConfig,
    pub histogram: HistogramSpec,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            meta_epochs: 5,
            inner_epochs: 1,
            classifier_epochs: 1,
            minibatch: 64,
            eta: 0.1,
            meta_lr: 1e-3,
            union_batch: UnionBatchPolicy::Balanced,
            grad_stat: GradStatKind::Squared,
            adam: AdamConfig::default(),
            histogram: HistogramSpec::default(),
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.meta_epochs == 0 || self.inner_epochs == 0 || self.minibatch == 0 {
            return Err(Error::arg("meta_epochs, inner_epochs and minibatch must be positive"));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::arg(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Snapshot of `η · steps` taken at the first inner step of a meta-epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    /// 1-based index of the current subtask of the pair.
    pub pair: usize,
    pub meta_epoch: usize,
    pub histogram: StepHistogram,
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub predictor: PredictorParams,
    pub metrics: RunMetrics,
    pub histograms: Vec<HistogramRecord>,
    /// Snapshot of the trained predictor on the last pair's features.
    pub final_histogram: Option<StepHistogram>,
    /// Optimizer state of `φ` at the end of training.
    pub meta_adam: AdamState,
}

fn union_batch(prev: &Batch, cur: &Batch, minibatch: usize, policy: UnionBatchPolicy, rng: &mut Rng) -> Result<Batch> {
    match policy {
        UnionBatchPolicy::FullEpoch => prev.concat(cur),
        UnionBatchPolicy::Balanced => {
            let half = (minibatch / 2).max(1);
            let mut pick = |b: &Batch| {
                let mut idx: Vec<usize> = (0..half.min(b.len())).map(|_| rng.below(b.len())).collect();
                idx.sort_unstable();
                b.select(&idx)
            };
            let a = pick(prev);
            let b = pick(cur);
            a.concat(&b)
        }
    }
}

struct PairContext<'a> {
    prev: &'a Batch,
    cur: &'a Batch,
    theta_star: &'a ClassifierParams,
    stats: &'a GradStats,
}

/// One inner epoch from `θ*`. Returns the mean post-update union loss and,
/// if requested, the `η · steps` histogram of the first step.
fn inner_epoch(
    ctx: &PairContext<'_>,
    predictor: &mut PredictorParams,
    phi_adam: Option<&mut AdamState>,
    cfg: &MetaTrainConfig,
    edges: Option<&[f64]>,
    rng: &Rng,
) -> Result<(f64, Option<StepHistogram>)> {
    let mut order_rng = rng.derive("order");
    let mut union_rng = rng.derive("union");
    let batches = minibatch_indices(ctx.cur.len(), cfg.minibatch, &mut order_rng);
    let star = ctx.theta_star.theta();
    let mut theta = ctx.theta_star.clone();
    let mut snapshot = None;
    let mut total = 0.0;
    let mut phi_adam = phi_adam;
    for (s, idx) in batches.iter().enumerate() {
        let (_, g) = classifier::loss_and_grad(&theta, &ctx.cur.select(idx))?;
        let feats = assemble_features(&g, ctx.stats, star, theta.theta())?;
        let steps = predict_steps(predictor, &feats)?;
        if s == 0 {
            if let Some(edges) = edges {
                snapshot = Some(step_histogram(&steps, cfg.eta, edges)?);
            }
        }
        let next = theta.with_theta(apply_update(theta.theta(), &steps, cfg.eta)?)?;
        let union = union_batch(ctx.prev, ctx.cur, cfg.minibatch, cfg.union_batch, &mut union_rng)?;
        let (loss, dl) = classifier::loss_and_grad(&next, &union)?;
        check_finite(loss, "meta-training")?;
        total += loss;
        if let Some(state) = phi_adam.as_deref_mut() {
            let mg = meta_gradient(predictor, &feats, &dl, cfg.eta)?;
            let phi = adam_step_in_place(predictor.phi(), &mg, state)?;
            if !phi.is_finite() {
                return Err(Error::Divergence("predictor parameters became non-finite".into()));
            }
            predictor.set_phi(phi)?;
        }
        theta = next;
    }
    Ok((total / batches.len() as f64, snapshot))
}

/// Meta-trains `predictor_init` on consecutive pairs of `meta_tasks`.
pub fn meta_train(
    classifier_dims: &[usize],
    predictor_init: &PredictorParams,
    meta_tasks: &TaskSequence,
    cfg: &MetaTrainConfig,
) -> Result<MetaTrainOutcome> {
    if meta_tasks.len() < 2 {
        return Err(Error::arg(format!(
            "meta-training needs at least 2 subtasks, got {}",
            meta_tasks.len()
        )));
    }
    cfg.validate()?;
    let start = Instant::now();
    let root = Rng::new(cfg.seed).derive("meta-train");
    let edges = cfg.histogram.edges();
    let mut predictor = predictor_init.clone();
    let mut phi_adam = AdamState::new(predictor.num_params(), AdamConfig::with_lr(cfg.meta_lr));
    let mut metrics = RunMetrics::default();
    let mut histograms = Vec::new();
    let mut last_context: Option<(ClassifierParams, GradStats, usize)> = None;

    for j in 1..meta_tasks.len() {
        let pair_rng = root.derive_indexed("pair", j as u64);
        let prev = &meta_tasks.tasks()[j - 1];
        let cur = &meta_tasks.tasks()[j];
        let mut classifier_params = ClassifierParams::init(classifier_dims, &mut pair_rng.derive("classifier-init"))?;
        let mut classifier_adam = AdamState::new(classifier_params.num_params(), cfg.adam);

        for me in 0..cfg.meta_epochs {
            let epoch_rng = pair_rng.derive_indexed("meta-epoch", me as u64);
            for ce in 0..cfg.classifier_epochs {
                let mut rng = epoch_rng.derive_indexed("theta-star", ce as u64);
                adam_epoch(&mut classifier_params, &mut classifier_adam, &prev.train, cfg.minibatch, &mut rng)?;
            }
            let stats = classifier::gradient_statistic(
                &classifier_params,
                &prev.train,
                cfg.minibatch,
                &mut epoch_rng.derive("prev-stats"),
                cfg.grad_stat,
            )?;
            let ctx = PairContext {
                prev: &prev.train,
                cur: &cur.train,
                theta_star: &classifier_params,
                stats: &stats,
            };
            let mut loss_sum = 0.0;
            for ie in 0..cfg.inner_epochs {
                let want_snapshot = ie == 0;
                let (loss, snap) = inner_epoch(
                    &ctx,
                    &mut predictor,
                    Some(&mut phi_adam),
                    cfg,
                    want_snapshot.then_some(edges.as_slice()),
                    &epoch_rng.derive_indexed("inner", ie as u64),
                )?;
                loss_sum += loss;
                if let Some(histogram) = snap {
                    histograms.push(HistogramRecord {
                        pair: j + 1,
                        meta_epoch: me,
                        histogram,
                    });
                }
            }
            let score = evaluate_sequence(&classifier_params, meta_tasks)?;
            metrics.rows.push(MetricRow {
                task_index: j + 1,
                epoch: me + 1,
                loss: loss_sum / cfg.inner_epochs as f64,
                accuracies: score.per_task,
                wall_ms: start.elapsed().as_millis() as u64,
            });
            last_context = Some((classifier_params.clone(), stats, j));
        }
    }

    let final_histogram = match &last_context {
        Some((theta_star, stats, j)) => {
            let ctx = PairContext {
                prev: &meta_tasks.tasks()[j - 1].train,
                cur: &meta_tasks.tasks()[*j].train,
                theta_star,
                stats,
            };
            let mut frozen = predictor.clone();
            let (_, snap) = inner_epoch(&ctx, &mut frozen, None, cfg, Some(&edges), &root.derive("final-snapshot"))?;
            snap
        }
        None => None,
    };
    let final_row = metrics.rows.last().map(|r| r.accuracies.clone()).unwrap_or_default();
    metrics.finish(final_row);
    Ok(MetaTrainOutcome {
        predictor,
        metrics,
        histograms,
        final_histogram,
        meta_adam: phi_adam,
    })
}

/// Mean post-update union loss of one frozen-predictor inner epoch started
/// from `theta_star`, with the statistic computed at `theta_star`.
pub fn evaluate_union_loss(
    predictor: &PredictorParams,
    theta_star: &ClassifierParams,
    prev: &Batch,
    cur: &Batch,
    cfg: &MetaTrainConfig,
) -> Result<f64> {
    let rng = Rng::new(cfg.seed).derive("union-eval");
    let stats = classifier::gradient_statistic(theta_star, prev, cfg.minibatch, &mut rng.derive("stats"), cfg.grad_stat)?;
    let ctx = PairContext {
        prev,
        cur,
        theta_star,
        stats: &stats,
    };
    let mut frozen = predictor.clone();
    let mut full = cfg.clone();
    full.union_batch = UnionBatchPolicy::FullEpoch;
    inner_epoch(&ctx, &mut frozen, None, &full, None, &rng).map(|(loss, _)| loss)
}

/// Number of local maxima holding at least `min_mass` of all counts.
///
/// Bins are smoothed with a `[1, 2, 1]` kernel; a mode is a smoothed bin
/// that beats every bin within two positions (the leftmost bin of a plateau).
pub fn count_modes(hist: &StepHistogram, min_mass: f64) -> usize {
    let counts = &hist.counts;
    let total = hist.total().max(1) as f64;
    let n = counts.len();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let left = if i > 0 { counts[i - 1] } else { 0 };
            let right = if i + 1 < n { counts[i + 1] } else { 0 };
            (left + 2 * counts[i] + right) as f64 / 4.0
        })
        .collect();
    (0..n)
        .filter(|&i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 2).min(n - 1);
            smooth[i] / total >= min_mass
                && (lo..i).all(|k| smooth[k] < smooth[i])
                && (i + 1..=hi).all(|k| smooth[k] <= smooth[i])
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::FeatureTransform;
    use crate::tasks::{make_synthetic_task, SequenceKind};

    fn meta_seq() -> TaskSequence {
        let a = make_synthetic_task(21, 8, 3, 16, 4.0).unwrap();
        let b = make_synthetic_task(22, 8, 3, 16, 4.0).unwrap();
        TaskSequence::new(vec![a, b], SequenceKind::Meta).unwrap()
    }

    fn small_cfg() -> MetaTrainConfig {
        MetaTrainConfig {
            meta_epochs: 2,
            minibatch: 8,
            seed: 4,
            ..MetaTrainConfig::default()
        }
    }

    #[test]
    fn eta_zero_leaves_predictor_untouched() {
        let phi = PredictorParams::init_dense(&[5, 4, 1], FeatureTransform::Log, &mut Rng::new(1)).unwrap();
        let cfg = MetaTrainConfig { eta: 0.0, ..small_cfg() };
        let out = meta_train(&[8, 6, 3], &phi, &meta_seq(), &cfg).unwrap();
        assert_eq!(out.predictor.phi().as_slice(), phi.phi().as_slice());
    }

    #[test]
    fn needs_two_subtasks() {
        let phi = PredictorParams::init(&[5, 4, 1], FeatureTransform::Log, &mut Rng::new(1)).unwrap();
        let one = TaskSequence::new(vec![meta_seq().tasks()[0].clone()], SequenceKind::Meta).unwrap();
        assert!(matches!(meta_train(&[8, 6, 3], &phi, &one, &small_cfg()), Err(Error::Argument(_))));
    }

    #[test]
    fn first_snapshot_of_zero_output_predictor_is_centered() {
        let phi = PredictorParams::init(&[5, 4, 1], FeatureTransform::Log, &mut Rng::new(1)).unwrap();
        let out = meta_train(&[8, 6, 3], &phi, &meta_seq(), &small_cfg()).unwrap();
        assert_eq!(out.histograms.len(), 2);
        let first = &out.histograms[0].histogram;
        let p = 8 * 6 + 6 + 6 * 3 + 3;
        assert_eq!(first.total(), p);
        assert_eq!(first.counts[50], p);
        assert!(out.final_histogram.is_some());
    }

    #[test]
    fn meta_training_is_deterministic() {
        let phi = PredictorParams::init(&[5, 4, 1], FeatureTransform::Log, &mut Rng::new(1)).unwrap();
        let a = meta_train(&[8, 6, 3], &phi, &meta_seq(), &small_cfg()).unwrap();
        let b = meta_train(&[8, 6, 3], &phi, &meta_seq(), &small_cfg()).unwrap();
        assert_eq!(a.predictor, b.predictor);
        assert_eq!(a.histograms, b.histograms);
        assert_eq!(
            a.metrics.rows.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(),
            b.metrics.rows.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mode_counting() {
        let mut counts = vec![0; 21];
        counts[3] = 30;
        counts[10] = 40;
        counts[17] = 30;
        let hist = StepHistogram { below: 0, counts, above: 0 };
        assert_eq!(count_modes(&hist, 0.05), 3);
        let mut single = vec![0; 21];
        single[10] = 100;
        assert_eq!(count_modes(&StepHistogram { below: 0, counts: single, above: 0 }, 0.05), 1);
    }
}
