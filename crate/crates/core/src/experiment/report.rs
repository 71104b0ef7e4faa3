//! Run artifacts: `metrics.csv`, `histograms.csv`, `summary.json`, and the
//! reducer behind `summarize`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{mean, median, std_dev, HistogramRecord, RunMetrics};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const META_METRICS_FILE: &str = "meta-metrics.csv";
pub const HISTOGRAMS_FILE: &str = "histograms.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.toml";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One `metrics.csv` line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub task_index: usize,
    pub epoch: usize,
    pub loss: f64,
    pub accuracies: Vec<f64>,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn avg_acc(&self) -> f64 {
        mean(&self.accuracies)
    }
}

/// `run_id` for `rule` on `seed`. [`rule_of`] inverts it.
pub fn run_id(seed: u64, rule: &str) -> String {
    format!("s{seed}-{rule}")
}

pub fn rule_of(run_id: &str) -> &str {
    run_id.split_once('-').map_or(run_id, |(_, r)| r)
}

pub fn records_from_metrics(run_id: &str, seed: u64, metrics: &RunMetrics, keep_wall: bool) -> Vec<MetricsRecord> {
    metrics
        .rows
        .iter()
        .map(|r| MetricsRecord {
            run_id: run_id.to_string(),
            seed,
            task_index: r.task_index,
            epoch: r.epoch,
            loss: r.loss,
            accuracies: r.accuracies.clone(),
            wall_ms: if keep_wall { r.wall_ms } else { 0 },
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::format(format!("{other:?}")),
    }
}

pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let k = records.iter().map(|r| r.accuracies.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = ["run_id", "seed", "task_index", "epoch", "loss"].map(String::from).to_vec();
    header.extend((1..=k).map(|i| format!("acc_task_{i}")));
    header.extend(["avg_acc".to_string(), "wall_ms".to_string()]);
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        if r.accuracies.len() != k {
            return Err(Error::shape(format!(
                "run {} has {} accuracies, file has {k} columns",
                r.run_id,
                r.accuracies.len()
            )));
        }
        let mut row = vec![
            r.run_id.clone(),
            r.seed.to_string(),
            r.task_index.to_string(),
            r.epoch.to_string(),
            r.loss.to_string(),
        ];
        row.extend(r.accuracies.iter().map(f64::to_string));
        row.push(r.avg_acc().to_string());
        row.push(r.wall_ms.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    let k = header.iter().filter(|h| h.starts_with("acc_task_")).count();
    if header.len() != k + 7 || header.get(0) != Some("run_id") {
        return Err(Error::format(format!("unexpected metrics header: {header:?}")));
    }
    let num = |field: &str, what: &str| -> Result<f64> {
        field
            .parse::<f64>()
            .map_err(|_| Error::format(format!("bad {what} value {field:?}")))
    };
    let int = |field: &str, what: &str| -> Result<u64> {
        field
            .parse::<u64>()
            .map_err(|_| Error::format(format!("bad {what} value {field:?}")))
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        out.push(MetricsRecord {
            run_id: row[0].to_string(),
            seed: int(&row[1], "seed")?,
            task_index: int(&row[2], "task_index")? as usize,
            epoch: int(&row[3], "epoch")? as usize,
            loss: num(&row[4], "loss")?,
            accuracies: (0..k).map(|i| num(&row[5 + i], "accuracy")).collect::<Result<_>>()?,
            wall_ms: int(&row[6 + k], "wall_ms")?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracies: Vec<f64>,
    pub average: f64,
}

/// Final accuracies of one rule across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub per_task_mean: Vec<f64>,
    pub per_task_std: Vec<f64>,
    pub average_mean: f64,
    pub average_std: f64,
    pub average_median: f64,
    pub runs: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub seed: u64,
    pub selected_candidate: usize,
    pub validation_scores: Vec<f64>,
    /// Modes of the trained predictor's step histogram.
    pub final_histogram_modes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub rules: BTreeMap<String, RuleSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictors: Vec<PredictorSummary>,
}

/// Groups the last row of each run by rule and reduces over seeds.
pub fn summarize_records(records: &[MetricsRecord]) -> Summary {
    let mut last: BTreeMap<&str, &MetricsRecord> = BTreeMap::new();
    for r in records {
        last.insert(&r.run_id, r);
    }
    let mut by_rule: BTreeMap<String, Vec<SeedResult>> = BTreeMap::new();
    for (id, r) in last {
        by_rule.entry(rule_of(id).to_string()).or_default().push(SeedResult {
            seed: r.seed,
            accuracies: r.accuracies.clone(),
            average: r.avg_acc(),
        });
    }
    let rules = by_rule
        .into_iter()
        .map(|(rule, mut runs)| {
            runs.sort_by_key(|s| s.seed);
            let k = runs.iter().map(|s| s.accuracies.len()).max().unwrap_or(0);
            let column = |i: usize| runs.iter().filter_map(|s| s.accuracies.get(i).copied()).collect::<Vec<_>>();
            let averages: Vec<f64> = runs.iter().map(|s| s.average).collect();
            let summary = RuleSummary {
                per_task_mean: (0..k).map(|i| mean(&column(i))).collect(),
                per_task_std: (0..k).map(|i| std_dev(&column(i))).collect(),
                average_mean: mean(&averages),
                average_std: std_dev(&averages),
                average_median: median(&averages),
                runs,
            };
            (rule, summary)
        })
        .collect();
    Summary {
        rules,
        predictors: Vec::new(),
    }
}

pub fn write_summary(path: impl AsRef<Path>, summary: &Summary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).map_err(|e| Error::format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reduces `dir/metrics.csv`. Predictor details come from `summary.json`
/// when present.
pub fn summarize(dir: impl AsRef<Path>) -> Result<Summary> {
    let dir = dir.as_ref();
    let mut summary = summarize_records(&read_metrics_csv(dir.join(METRICS_FILE))?);
    let json = dir.join(SUMMARY_FILE);
    if json.exists() {
        let stored: Summary =
            serde_json::from_str(&fs::read_to_string(json)?).map_err(|e| Error::format(e.to_string()))?;
        summary.predictors = stored.predictors;
    }
    Ok(summary)
}

/// Plain-text table of a summary.
pub fn render_summary(summary: &Summary) -> String {
    let mut out = String::new();
    for (rule, s) in &summary.rules {
        let tasks: Vec<String> = s
            .per_task_mean
            .iter()
            .zip(&s.per_task_std)
            .map(|(m, sd)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd))
            .collect();
        out.push_str(&format!(
            "{rule:<10} avg {:6.2} ± {:5.2} (median {:6.2}, n={})  per task: [{}]\n",
            100.0 * s.average_mean,
            100.0 * s.average_std,
            100.0 * s.average_median,
            s.runs.len(),
            tasks.join(", ")
        ));
    }
    for p in &summary.predictors {
        out.push_str(&format!(
            "seed {}: candidate {} selected (validation {:?}), final step histogram modes: {}\n",
            p.seed,
            p.selected_candidate,
            p.validation_scores,
            p.final_histogram_modes.map_or("n/a".to_string(), |m| m.to_string())
        ));
    }
    out
}

/// Step snapshots of one run, as written under `snapshots/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub run_id: String,
    pub records: Vec<HistogramRecord>,
}

pub fn snapshot_path(run_dir: &Path, run_id: &str) -> PathBuf {
    run_dir.join(SNAPSHOT_DIR).join(format!("{run_id}.json"))
}

pub fn write_snapshots(run_dir: &Path, snap: &SnapshotFile) -> Result<()> {
    fs::create_dir_all(run_dir.join(SNAPSHOT_DIR))?;
    let text = serde_json::to_string(snap).map_err(|e| Error::format(e.to_string()))?;
    fs::write(snapshot_path(run_dir, &snap.run_id), text)?;
    Ok(())
}

/// Collects every snapshot file under `run_dir` into `histograms.csv`, one
/// row per meta-epoch: run id, pair, meta-epoch, underflow, bins, overflow.
pub fn emit_histogram_series(run_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let run_dir = run_dir.as_ref();
    let snap_dir = run_dir.join(SNAPSHOT_DIR);
    let mut files: Vec<PathBuf> = fs::read_dir(&snap_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    if files.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no step snapshots in {}", snap_dir.display()),
        )));
    }
    let mut snaps = Vec::new();
    for f in &files {
        let snap: SnapshotFile =
            serde_json::from_str(&fs::read_to_string(f)?).map_err(|e| Error::format(format!("{}: {e}", f.display())))?;
        snaps.push(snap);
    }
    let bins = snaps
        .iter()
        .flat_map(|s| &s.records)
        .map(|r| r.histogram.counts.len())
        .max()
        .unwrap_or(0);
    let out = run_dir.join(HISTOGRAMS_FILE);
    let mut w = csv::Writer::from_path(&out).map_err(csv_err)?;
    let mut header: Vec<String> = ["run_id", "pair", "meta_epoch", "below"].map(String::from).to_vec();
    header.extend((0..bins).map(|i| format!("bin_{i}")));
    header.push("above".to_string());
    w.write_record(&header).map_err(csv_err)?;
    for snap in &snaps {
        for r in &snap.records {
            let h = &r.histogram;
            if h.counts.len() != bins {
                return Err(Error::shape(format!("{}: snapshot has {} bins, expected {bins}", snap.run_id, h.counts.len())));
            }
            let mut row = vec![snap.run_id.clone(), r.pair.to_string(), r.meta_epoch.to_string(), h.below.to_string()];
            row.extend(h.counts.iter().map(usize::to_string));
            row.push(h.above.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(out)
}
