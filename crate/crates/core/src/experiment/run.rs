use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_task, save_task, sha256, Checkpoint};
use super::config::{DataSource, ExperimentConfig, ExperimentKind, Protocol, Scale};
use super::report::{
    emit_histogram_series, records_from_metrics, run_id, summarize_records, write_metrics_csv, write_snapshots,
    write_summary, MetricsRecord, PredictorSummary, SnapshotFile, Summary, CHECKPOINT_DIR, METRICS_FILE,
    META_METRICS_FILE, RESOLVED_CONFIG_FILE, SUMMARY_FILE,
};
use crate::classifier::ClassifierParams;
use crate::engine::{
    continual_learn, count_modes, evaluate_split, meta_train, run_sequence, select_best_predictor, MetaTrainOutcome,
    RuleRegistry, Split,
};
use crate::ndcore::Rng;
use crate::predictor::{PredictorParams, NUM_FEATURES};
use crate::tasks::{
    make_disjoint_tasks, make_permutation_task, make_synthetic_task, permutation_for_seed, SequenceKind, SourceData,
    Task, TaskSequence,
};
use crate::{Error, Result};

/// Border cropped before pooling at desk scale (28 → 24 → 8×8).
pub const DESK_CROP: usize = 2;
pub const DESK_POOL: usize = 3;

/// Minimum mass of a histogram peak counted by [`count_modes`].
const MODE_MIN_MASS: f64 = 0.02;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) | Error::Argument(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Divergence(_) => 4,
        Error::Shape(_) => 1,
    }
}

/// Loads the source images, pooled at desk scale. `None` for synthetic data.
pub fn load_source(cfg: &ExperimentConfig) -> Result<Option<SourceData>> {
    if cfg.data.source == DataSource::Synthetic {
        return Ok(None);
    }
    let src = SourceData::load_mnist_dir(&cfg.data.mnist_dir)?;
    Ok(Some(match cfg.scale {
        Scale::Desk => src.mean_pool(DESK_CROP, DESK_POOL)?,
        Scale::Full => src,
    }))
}

/// Tasks used by one seed of an experiment.
pub struct SeedTasks {
    /// Meta-training sequence, present when a predictor is trained.
    pub meta: Option<TaskSequence>,
    /// Held-out sequence for predictor selection.
    pub valid: Option<TaskSequence>,
    pub targets: TaskSequence,
}

fn generate_sequence(cfg: &ExperimentConfig, source: Option<&SourceData>, base: &Rng, permute_disjoint: bool) -> Result<Vec<Task>> {
    let task_seed = |i: usize| base.derive_indexed("task", i as u64).next_u64();
    match (source, cfg.protocol()) {
        (None, _) => {
            let s = &cfg.data.synthetic;
            (0..cfg.num_tasks())
                .map(|i| make_synthetic_task(task_seed(i), s.dim, s.classes, s.per_class, s.separation))
                .collect()
        }
        (Some(src), Protocol::Permuted) => {
            let sizes = cfg
                .split_sizes()
                .ok_or_else(|| Error::Validation("data.sizes is required for permuted tasks".into()))?;
            (0..cfg.num_tasks())
                .map(|i| make_permutation_task(src, task_seed(i), sizes))
                .collect()
        }
        (Some(src), Protocol::Disjoint) => {
            let seed = task_seed(0);
            let (a, b) = if permute_disjoint {
                let perm = permutation_for_seed(seed, src.input_dim());
                make_disjoint_tasks(&src.permuted(&perm)?, cfg.data.split_point, cfg.split_sizes(), seed)?
            } else {
                make_disjoint_tasks(src, cfg.data.split_point, cfg.split_sizes(), seed)?
            };
            Ok(vec![a, b])
        }
    }
}

fn cache_key(cfg: &ExperimentConfig, purpose: &str, seed: u64) -> String {
    let key = format!(
        "{:?}|{:?}|{:?}|{:?}|{}|{:?}|{}|{:?}|{purpose}|{seed}",
        cfg.scale,
        cfg.data.source,
        cfg.protocol(),
        cfg.split_sizes(),
        cfg.num_tasks(),
        cfg.data.synthetic,
        cfg.data.split_point,
        cfg.data.mnist_dir,
    );
    sha256(key.as_bytes())[..12].iter().map(|b| format!("{b:02x}")).collect()
}

fn build_sequence(
    cfg: &ExperimentConfig,
    source: Option<&SourceData>,
    seed: u64,
    purpose: &str,
    kind: SequenceKind,
) -> Result<TaskSequence> {
    let base = Rng::new(seed).derive(purpose);
    // Target tasks keep the natural pixel order; meta and validation tasks
    // of the disjoint protocol get a fresh permutation each.
    let permute = purpose != "target-tasks";
    let tasks = match &cfg.data.cache_dir {
        None => generate_sequence(cfg, source, &base, permute)?,
        Some(dir) => {
            let key = cache_key(cfg, purpose, seed);
            let paths: Vec<PathBuf> = (0..cfg.num_tasks()).map(|i| dir.join(format!("{key}-{i}.mcl"))).collect();
            if paths.iter().all(|p| p.exists()) {
                paths.iter().map(load_task).collect::<Result<_>>()?
            } else {
                let tasks = generate_sequence(cfg, source, &base, permute)?;
                fs::create_dir_all(dir)?;
                for (t, p) in tasks.iter().zip(&paths) {
                    save_task(t, p)?;
                }
                tasks
            }
        }
    };
    TaskSequence::new(tasks, kind)
}

pub fn build_seed_tasks(cfg: &ExperimentConfig, source: Option<&SourceData>, seed: u64) -> Result<SeedTasks> {
    let (meta, valid) = if cfg.needs_predictor() {
        (
            Some(build_sequence(cfg, source, seed, "meta-tasks", SequenceKind::Meta)?),
            Some(build_sequence(cfg, source, seed, "validation-tasks", SequenceKind::Target)?),
        )
    } else {
        (None, None)
    };
    Ok(SeedTasks {
        meta,
        valid,
        targets: build_sequence(cfg, source, seed, "target-tasks", SequenceKind::Target)?,
    })
}

pub fn classifier_dims(cfg: &ExperimentConfig, tasks: &TaskSequence) -> Vec<usize> {
    let mut dims = vec![tasks.input_dim()];
    dims.extend_from_slice(cfg.hidden());
    dims.push(tasks.num_classes());
    dims
}

pub fn predictor_dims(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut dims = vec![NUM_FEATURES];
    dims.extend_from_slice(&cfg.predictor.hidden);
    dims.push(1);
    dims
}

pub fn initial_classifier(dims: &[usize], seed: u64) -> Result<ClassifierParams> {
    ClassifierParams::init(dims, &mut Rng::new(seed).derive("classifier-init"))
}

pub struct TrainedPredictor {
    pub outcome: MetaTrainOutcome,
    pub selected: usize,
    pub validation_scores: Vec<f64>,
}

/// Meta-trains every candidate and keeps the one with the best mean
/// validation accuracy after continual learning on `valid`.
pub fn train_predictor(
    cfg: &ExperimentConfig,
    dims: &[usize],
    meta: &TaskSequence,
    valid: &TaskSequence,
    seed: u64,
) -> Result<TrainedPredictor> {
    let pdims = predictor_dims(cfg);
    let valid_init = ClassifierParams::init(dims, &mut Rng::new(seed).derive("validation-init"))?;
    let mut valid_cfg = cfg.continual.clone();
    valid_cfg.seed = Rng::new(seed).derive("validation-run").next_u64();
    let mut candidates = Vec::new();
    let mut outcomes = Vec::new();
    for c in 0..cfg.candidates() as u64 {
        let phi0 = PredictorParams::init(
            &pdims,
            cfg.predictor.transform,
            &mut Rng::new(seed).derive("predictor-init").derive_indexed("candidate", c),
        )?;
        let mut meta_cfg = cfg.meta.clone();
        meta_cfg.seed = Rng::new(seed).derive("meta-train").derive_indexed("candidate", c).next_u64();
        let outcome = meta_train(dims, &phi0, meta, &meta_cfg)?;
        let (theta, _) = continual_learn(&valid_init, &outcome.predictor, valid, &valid_cfg)?;
        let score = evaluate_split(&theta, valid, Split::Valid)?.average;
        candidates.push((outcome.predictor.clone(), score));
        outcomes.push(outcome);
    }
    let (selected, _) = select_best_predictor(&candidates)?;
    Ok(TrainedPredictor {
        outcome: outcomes.swap_remove(selected),
        selected,
        validation_scores: candidates.iter().map(|(_, s)| *s).collect(),
    })
}

/// Everything one seed produced.
pub struct SeedOutput {
    pub records: Vec<MetricsRecord>,
    pub meta_records: Vec<MetricsRecord>,
    pub snapshots: Option<SnapshotFile>,
    pub predictor: Option<PredictorSummary>,
    pub checkpoint: Checkpoint,
}

pub fn run_seed(
    cfg: &ExperimentConfig,
    source: Option<&SourceData>,
    seed: u64,
    config_digest: &[u8; 32],
) -> Result<SeedOutput> {
    let tasks = build_seed_tasks(cfg, source, seed)?;
    let dims = classifier_dims(cfg, &tasks.targets);
    let mut ckpt = Checkpoint::new();
    ckpt.set_config_hash(config_digest)?;
    let keep_wall = cfg.record_wall_time;
    let meta_id = run_id(seed, "meta");

    let mut out = SeedOutput {
        records: Vec::new(),
        meta_records: Vec::new(),
        snapshots: None,
        predictor: None,
        checkpoint: Checkpoint::new(),
    };
    let trained = match (&tasks.meta, &tasks.valid) {
        (Some(meta), Some(valid)) => Some(train_predictor(cfg, &dims, meta, valid, seed)?),
        _ => None,
    };
    if let Some(t) = &trained {
        let o = &t.outcome;
        ckpt.push_layers("phi", o.predictor.layout(), o.predictor.phi())?;
        ckpt.push_vector("phi_adam/m", &o.meta_adam.m)?;
        ckpt.push_vector("phi_adam/v", &o.meta_adam.v)?;
        ckpt.push("phi_adam/t", vec![1], vec![o.meta_adam.t as f64])?;
        ckpt.push("validation_scores", vec![t.validation_scores.len()], t.validation_scores.clone())?;
        out.meta_records = records_from_metrics(&meta_id, seed, &o.metrics, keep_wall);
        out.snapshots = Some(SnapshotFile {
            run_id: meta_id.clone(),
            records: o.histograms.clone(),
        });
        out.predictor = Some(PredictorSummary {
            seed,
            selected_candidate: t.selected,
            validation_scores: t.validation_scores.clone(),
            final_histogram_modes: o.final_histogram.as_ref().map(|h| count_modes(h, MODE_MIN_MASS)),
        });
    }

    let init = initial_classifier(&dims, seed)?;
    let mut ccfg = cfg.continual.clone();
    ccfg.seed = seed;
    let registry = RuleRegistry::builtin();
    let predictor = trained.as_ref().map(|t| &t.outcome.predictor);
    for name in cfg.rules() {
        let mut rule = registry.create(name, &ccfg.rules, predictor)?;
        let (theta, metrics) = run_sequence(&init, rule.as_mut(), &tasks.targets, &ccfg)?;
        ckpt.push_layers(&format!("theta/{name}"), theta.layout(), theta.theta())?;
        out.records
            .extend(records_from_metrics(&run_id(seed, name), seed, &metrics, keep_wall));
    }
    if cfg.kind == ExperimentKind::MetaTrain {
        out.records = std::mem::take(&mut out.meta_records);
    }
    out.checkpoint = ckpt;
    Ok(out)
}

pub fn checkpoint_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("seed-{seed}.mcl"))
}

/// SHA-256 of the resolved config without its output directory, so the
/// same experiment written to two places gets the same hash.
pub fn config_digest(cfg: &ExperimentConfig) -> Result<[u8; 32]> {
    let mut placeless = cfg.clone();
    placeless.output_dir = None;
    Ok(sha256(placeless.to_toml_string()?.as_bytes()))
}

/// Runs a resolved config and writes all artifacts under its output dir.
pub fn run_config(cfg: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<Summary> {
    let out_dir = cfg.output_dir().to_path_buf();
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))?;
    fs::write(out_dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml_string()?)?;
    let digest = config_digest(cfg)?;

    let source = load_source(cfg)?;
    let mut records = Vec::new();
    let mut meta_records = Vec::new();
    let mut predictors = Vec::new();
    let mut any_snapshots = false;
    for &seed in cfg.seeds() {
        progress(&format!("seed {seed}: running"));
        let out = run_seed(cfg, source.as_ref(), seed, &digest)?;
        out.checkpoint.save(checkpoint_path(&out_dir, seed))?;
        if let Some(snap) = &out.snapshots {
            write_snapshots(&out_dir, snap)?;
            any_snapshots = true;
        }
        records.extend(out.records);
        meta_records.extend(out.meta_records);
        predictors.extend(out.predictor);
    }

    write_metrics_csv(out_dir.join(METRICS_FILE), &records)?;
    if !meta_records.is_empty() {
        write_metrics_csv(out_dir.join(META_METRICS_FILE), &meta_records)?;
    }
    if any_snapshots {
        emit_histogram_series(&out_dir)?;
    }
    let mut summary = summarize_records(&records);
    summary.predictors = predictors;
    write_summary(out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Loads, resolves and runs a config file.
pub fn run_experiment(config_path: impl AsRef<Path>, progress: impl FnMut(&str)) -> Result<Summary> {
    let cfg = ExperimentConfig::from_file(config_path)?.resolve()?;
    run_config(&cfg, progress)
}

/// Classifier parameters stored for `rule` in a run checkpoint.
pub fn checkpoint_theta(ckpt: &Checkpoint, rule: &str, dims: &[usize]) -> Result<ClassifierParams> {
    let layout = ClassifierParams::zeros(dims)?.layout().clone();
    ClassifierParams::from_flat(dims, ckpt.layers(&format!("theta/{rule}"), &layout)?)
}

/// Human-readable listing of a checkpoint file.
pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let ckpt = Checkpoint::load(path)?;
    let mut out = format!(
        "{}: format {} v{}, {} records\n",
        path.display(),
        String::from_utf8_lossy(&super::checkpoint::MAGIC),
        super::checkpoint::FORMAT_VERSION,
        ckpt.records.len()
    );
    if let Some(hash) = ckpt.config_hash_hex() {
        out.push_str(&format!("config sha256 {hash}\n"));
    }
    for r in &ckpt.records {
        let (lo, hi) = r
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let norm = r.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push_str(&format!("  {:<28} {:?}", r.name, r.dims));
        if !r.data.is_empty() {
            out.push_str(&format!("  min {lo:.4e}  max {hi:.4e}  l2 {norm:.4e}"));
        }
        out.push('\n');
    }
    Ok(out)
}
