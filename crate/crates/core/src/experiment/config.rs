//! Experiment configuration file (TOML).
//!
//! Scale- and kind-dependent settings are optional in the file and filled in
//! by [`ExperimentConfig::resolve`]; the resolved form is what a run writes
//! back out, so it can be fed to `run` again unchanged.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{ContinualConfig, MetaTrainConfig, RuleRegistry};
use crate::predictor::FeatureTransform;
use crate::tasks::SplitSizes;
use crate::{Error, Result};

/// Environment variable that overrides `data.mnist_dir`.
pub const DATA_ROOT_ENV: &str = "MCL_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Meta-train predictors only.
    MetaTrain,
    /// Meta-train, then run the configured rules on target tasks.
    Continual,
    /// Hand-written rules only; no predictor.
    Baseline,
    /// Two-task disjoint-label protocol.
    ReproduceTable1,
    /// Three-task permuted protocol.
    ReproduceTable2,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MetaTrain => "meta_train",
            Self::Continual => "continual",
            Self::Baseline => "baseline",
            Self::ReproduceTable1 => "reproduce_table1",
            Self::ReproduceTable2 => "reproduce_table2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    /// 8×8 pooled inputs and small splits.
    #[default]
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Every task is the source under its own pixel permutation.
    Permuted,
    /// Two tasks, one per half of the label set.
    Disjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
    pub separation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 4,
            per_class: 50,
            separation: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub mnist_dir: PathBuf,
    pub protocol: Option<Protocol>,
    pub num_tasks: Option<usize>,
    /// First label of the second disjoint task.
    pub split_point: usize,
    pub sizes: Option<SplitSizes>,
    pub synthetic: SyntheticConfig,
    /// Directory for cached task files; caching is off when unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Mnist,
            mnist_dir: PathBuf::from("data/mnist-subset"),
            protocol: None,
            num_tasks: None,
            split_point: 5,
            sizes: None,
            synthetic: SyntheticConfig::default(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: Vec<usize>,
    pub transform: FeatureTransform,
    /// Independently initialized predictors, best kept by validation score.
    pub candidates: Option<usize>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![10, 10],
            transform: FeatureTransform::Log,
            candidates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub scale: Scale,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    /// Update rules run on the target sequence, by registry name.
    pub rules: Option<Vec<String>>,
    /// Write measured wall time instead of 0 in `metrics.csv`.
    pub record_wall_time: bool,
    pub data: DataConfig,
    pub classifier: ClassifierConfig,
    pub predictor: PredictorConfig,
    pub meta: MetaTrainConfig,
    pub continual: ContinualConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Continual,
            scale: Scale::Desk,
            seeds: None,
            output_dir: None,
            rules: None,
            record_wall_time: false,
            data: DataConfig::default(),
            classifier: ClassifierConfig::default(),
            predictor: PredictorConfig::default(),
            meta: MetaTrainConfig::default(),
            continual: ContinualConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML, rejecting every key the schema does not know.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Validation(e.to_string()))?;
        let mut unknown = Vec::new();
        let cfg: ExperimentConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Validation(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::Validation(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(e.to_string()))
    }

    /// Whether any configured rule needs a meta-trained predictor.
    pub fn needs_predictor(&self) -> bool {
        self.kind == ExperimentKind::MetaTrain || self.rules().iter().any(|r| r == "learned")
    }

    pub fn rules(&self) -> &[String] {
        self.rules.as_deref().unwrap_or(&[])
    }

    pub fn seeds(&self) -> &[u64] {
        self.seeds.as_deref().unwrap_or(&[])
    }

    pub fn protocol(&self) -> Protocol {
        self.data.protocol.unwrap_or(Protocol::Permuted)
    }

    pub fn num_tasks(&self) -> usize {
        self.data.num_tasks.unwrap_or(2)
    }

    pub fn hidden(&self) -> &[usize] {
        self.classifier.hidden.as_deref().unwrap_or(&[])
    }

    pub fn candidates(&self) -> usize {
        self.predictor.candidates.unwrap_or(1)
    }

    pub fn split_sizes(&self) -> Option<SplitSizes> {
        self.data.sizes
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().unwrap_or(Path::new("runs"))
    }

    /// Fills every unset scale- or kind-dependent field, applies the
    /// dataset-root override, and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        let mut problems = Vec::new();
        let full = self.scale == Scale::Full;
        let forced = match self.kind {
            ExperimentKind::ReproduceTable1 => Some((Protocol::Disjoint, 2)),
            ExperimentKind::ReproduceTable2 => Some((Protocol::Permuted, 3)),
            _ => None,
        };
        if let Some((protocol, n)) = forced {
            if self.data.protocol.is_some_and(|p| p != protocol) {
                problems.push(format!("data.protocol must be {protocol:?} for {}", self.kind.as_str()));
            }
            if self.data.num_tasks.is_some_and(|k| k != n) {
                problems.push(format!("data.num_tasks must be {n} for {}", self.kind.as_str()));
            }
            self.data.protocol = Some(protocol);
            self.data.num_tasks = Some(n);
        }
        let protocol = *self.data.protocol.get_or_insert(Protocol::Permuted);
        let num_tasks = *self.data.num_tasks.get_or_insert(2);

        if self.seeds.is_none() {
            self.seeds = Some(if full { (0..10).collect() } else { (0..5).collect() });
        }
        if self.output_dir.is_none() {
            let scale = if full { "full" } else { "desk" };
            self.output_dir = Some(PathBuf::from(format!("runs/{}-{scale}", self.kind.as_str())));
        }
        if self.rules.is_none() {
            let rules: &[&str] = match self.kind {
                ExperimentKind::MetaTrain => &[],
                ExperimentKind::Continual => &["learned", "sgd"],
                ExperimentKind::Baseline => &["sgd", "ewc", "adam"],
                ExperimentKind::ReproduceTable1 | ExperimentKind::ReproduceTable2 => &["learned", "sgd", "ewc"],
            };
            self.rules = Some(rules.iter().map(|s| s.to_string()).collect());
        }
        if self.classifier.hidden.is_none() {
            self.classifier.hidden = Some(if full { vec![800, 800] } else { vec![50, 50] });
        }
        if self.predictor.candidates.is_none() {
            self.predictor.candidates = Some(if full { 10 } else { 1 });
        }
        if self.data.source == DataSource::Mnist {
            if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
                self.data.mnist_dir = PathBuf::from(root);
            }
            if self.data.sizes.is_none() && !(full && protocol == Protocol::Disjoint) {
                self.data.sizes = Some(match (full, protocol) {
                    (true, _) => SplitSizes::FULL,
                    (false, Protocol::Permuted) => SplitSizes::DESK,
                    // Each half of the label set has only about half the test pool.
                    (false, Protocol::Disjoint) => SplitSizes {
                        test: 900,
                        ..SplitSizes::DESK
                    },
                });
            }
        }

        if self.seeds().is_empty() {
            problems.push("seeds must not be empty".to_string());
        }
        let unique: BTreeSet<_> = self.seeds().iter().collect();
        if unique.len() != self.seeds().len() {
            problems.push("seeds must be distinct".to_string());
        }
        if num_tasks < 2 && (self.needs_predictor() || !self.rules().is_empty()) {
            problems.push("data.num_tasks must be at least 2".to_string());
        }
        if protocol == Protocol::Disjoint && num_tasks != 2 {
            problems.push("the disjoint protocol has exactly 2 tasks".to_string());
        }
        if protocol == Protocol::Disjoint && self.data.source == DataSource::Synthetic {
            problems.push("the disjoint protocol needs data.source = \"mnist\"".to_string());
        }
        let registry = RuleRegistry::builtin();
        for r in self.rules() {
            if !registry.contains(r) {
                problems.push(format!("unknown rule {r:?} (known: {})", registry.names().join(", ")));
            }
        }
        if self.kind == ExperimentKind::Baseline && self.rules().iter().any(|r| r == "learned") {
            problems.push("baseline runs cannot use the learned rule".to_string());
        }
        if self.kind == ExperimentKind::MetaTrain && !self.rules().is_empty() {
            problems.push("meta_train runs take no rules".to_string());
        }
        if self.candidates() == 0 {
            problems.push("predictor.candidates must be at least 1".to_string());
        }
        if self.hidden().contains(&0) || self.predictor.hidden.contains(&0) {
            problems.push("hidden layer widths must be positive".to_string());
        }
        let syn = &self.data.synthetic;
        if self.data.source == DataSource::Synthetic && (syn.dim == 0 || syn.classes < 2 || syn.per_class == 0) {
            problems.push("data.synthetic needs dim >= 1, classes >= 2, per_class >= 1".to_string());
        }
        if !(self.meta.eta.is_finite() && self.meta.eta >= 0.0) {
            problems.push("meta.eta must be finite and >= 0".to_string());
        }
        if !(self.continual.rules.eta.is_finite() && self.continual.rules.eta >= 0.0) {
            problems.push("continual.rules.eta must be finite and >= 0".to_string());
        }
        if self.needs_predictor() && self.meta.eta != self.continual.rules.eta {
            problems.push(format!(
                "meta.eta ({}) and continual.rules.eta ({}) must match for the learned rule",
                self.meta.eta, self.continual.rules.eta
            ));
        }
        if self.meta.minibatch == 0 || self.continual.minibatch == 0 {
            problems.push("minibatch sizes must be positive".to_string());
        }
        if self.meta.meta_epochs == 0 || self.meta.inner_epochs == 0 {
            problems.push("meta.meta_epochs and meta.inner_epochs must be positive".to_string());
        }
        if self.meta.histogram.bins == 0 || !(self.meta.histogram.lo < self.meta.histogram.hi) {
            problems.push("meta.histogram needs bins >= 1 and lo < hi".to_string());
        }

        if problems.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_desk_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap().resolve().unwrap();
        assert_eq!(cfg.seeds(), &[0, 1, 2, 3, 4]);
        assert_eq!(cfg.hidden(), &[50, 50]);
        assert_eq!(cfg.rules(), &["learned".to_string(), "sgd".to_string()]);
        assert_eq!(cfg.data.sizes, Some(SplitSizes::DESK));
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = ExperimentConfig::from_toml_str("lr_rate = 0.1\n[meta]\nfoo = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("lr_rate"), "{msg}");
        assert!(msg.contains("meta.foo"), "{msg}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_toml_str("kind = \"reproduce_table2\"\nscale = \"full\"\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.protocol(), Protocol::Permuted);
        assert_eq!(cfg.num_tasks(), 3);
        assert_eq!(cfg.candidates(), 10);
        let text = cfg.to_toml_string().unwrap();
        let again = ExperimentConfig::from_toml_str(&text).unwrap().resolve().unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn preset_conflicts_and_bad_rules_rejected() {
        let err = ExperimentConfig::from_toml_str("kind = \"reproduce_table1\"\n[data]\nprotocol = \"permuted\"\n")
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(err.to_string().contains("data.protocol"));
        let err = ExperimentConfig::from_toml_str("rules = [\"sgd\", \"nope\"]\nseeds = []\n")
            .unwrap()
            .resolve()
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nope") && msg.contains("seeds"), "{msg}");
    }
}
