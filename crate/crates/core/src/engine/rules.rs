//! Update rules used after the first task of a sequence, behind one trait
//! and looked up by name.
//!
//! | name      | update                                        |
//! |-----------|-----------------------------------------------|
//! | `learned` | `θ − η · h_φ(features)` with a fixed predictor |
//! | `sgd`     | `θ − lr · g`                                  |
//! | `adam`    | bias-corrected Adam                           |
//! | `ewc`     | `θ − lr · (g + λ · F ⊙ (θ − θ*))`             |

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::optim::{adam_step_in_place, ewc_baseline_step, sgd_step, AdamConfig, AdamState};
use crate::classifier::GradStats;
use crate::ndcore::FlatVector;
use crate::predictor::{apply_update, assemble_features, predict_steps, PredictorParams};
use crate::{Error, Result};

/// State handed to a rule when a new task starts.
pub struct TaskContext<'a> {
    /// Parameters reached at the end of the previous task.
    pub theta_star: &'a FlatVector,
    /// Previous-task gradient statistic at `theta_star`, when requested.
    pub prev_stats: Option<&'a GradStats>,
}

pub trait UpdateRule: Send {
    fn name(&self) -> &str;

    /// Whether [`TaskContext::prev_stats`] must be computed.
    fn needs_prev_stats(&self) -> bool {
        false
    }

    fn begin_task(&mut self, _ctx: &TaskContext<'_>) -> Result<()> {
        Ok(())
    }

    fn step(&mut self, theta: &FlatVector, grad: &FlatVector) -> Result<FlatVector>;
}

/// Knobs shared by all built-in rules; each rule reads the ones it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleParams {
    pub sgd_lr: f64,
    pub ewc_lr: f64,
    pub ewc_lambda: f64,
    pub eta: f64,
    pub adam: AdamConfig,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            sgd_lr: 0.01,
            ewc_lr: 0.01,
            ewc_lambda: 100.0,
            eta: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

pub struct SgdRule {
    lr: f64,
}

impl SgdRule {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }
}

impl UpdateRule for SgdRule {
    fn name(&self) -> &str {
        "sgd"
    }

    fn step(&mut self, theta: &FlatVector, grad: &FlatVector) -> Result<FlatVector> {
        sgd_step(theta, grad, self.lr)
    }
}

/// Adam whose moments restart at every task.
pub struct AdamRule {
    config: AdamConfig,
    state: Option<AdamState>,
}

impl AdamRule {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: None }
    }
}

impl UpdateRule for AdamRule {
    fn name(&self) -> &str {
        "adam"
    }

    fn begin_task(&mut self, ctx: &TaskContext<'_>) -> Result<()> {
        self.state = Some(AdamState::new(ctx.theta_star.len(), self.config));
        Ok(())
    }

    fn step(&mut self, theta: &FlatVector, grad: &FlatVector) -> Result<FlatVector> {
        let config = self.config;
        let state = self.state.get_or_insert_with(|| AdamState::new(theta.len(), config));
        adam_step_in_place(theta, grad, state)
    }
}

pub struct EwcRule {
    lr: f64,
    lambda: f64,
    anchor: Option<(FlatVector, GradStats)>,
}

impl EwcRule {
    pub fn new(lr: f64, lambda: f64) -> Self {
        Self { lr, lambda, anchor: None }
    }
}

impl UpdateRule for EwcRule {
    fn name(&self) -> &str {
        "ewc"
    }

    fn needs_prev_stats(&self) -> bool {
        true
    }

    fn begin_task(&mut self, ctx: &TaskContext<'_>) -> Result<()> {
        let fisher = ctx
            .prev_stats
            .ok_or_else(|| Error::arg("ewc rule needs previous-task statistics"))?;
        self.anchor = Some((ctx.theta_star.clone(), fisher.clone()));
        Ok(())
    }

    fn step(&mut self, theta: &FlatVector, grad: &FlatVector) -> Result<FlatVector> {
        match &self.anchor {
            Some((star, fisher)) => ewc_baseline_step(theta, grad, fisher, star, self.lr, self.lambda),
            None => sgd_step(theta, grad, self.lr),
        }
    }
}

/// Steps predicted by a frozen predictor.
pub struct LearnedRule {
    predictor: PredictorParams,
    eta: f64,
    anchor: Option<(FlatVector, GradStats)>,
}

impl LearnedRule {
    pub fn new(predictor: PredictorParams, eta: f64) -> Self {
        Self {
            predictor,
            eta,
            anchor: None,
        }
    }
}

impl UpdateRule for LearnedRule {
    fn name(&self) -> &str {
        "learned"
    }

    fn needs_prev_stats(&self) -> bool {
        true
    }

    fn begin_task(&mut self, ctx: &TaskContext<'_>) -> Result<()> {
        let stats = ctx
            .prev_stats
            .ok_or_else(|| Error::arg("learned rule needs previous-task statistics"))?;
        self.anchor = Some((ctx.theta_star.clone(), stats.clone()));
        Ok(())
    }

    fn step(&mut self, theta: &FlatVector, grad: &FlatVector) -> Result<FlatVector> {
        let (star, stats) = self
            .anchor
            .as_ref()
            .ok_or_else(|| Error::arg("learned rule stepped before begin_task"))?;
        let feats = assemble_features(grad, stats, star, theta)?;
        let steps = predict_steps(&self.predictor, &feats)?;
        apply_update(theta, &steps, self.eta)
    }
}

pub type RuleFactory = fn(&RuleParams, Option<&PredictorParams>) -> Result<Box<dyn UpdateRule>>;

/// Name → constructor table for update rules.
pub struct RuleRegistry {
    factories: BTreeMap<String, RuleFactory>,
}

impl fmt::Debug for RuleRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for RuleRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl RuleRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("sgd", |p, _| Ok(Box::new(SgdRule::new(p.sgd_lr))));
        reg.register("adam", |p, _| Ok(Box::new(AdamRule::new(p.adam))));
        reg.register("ewc", |p, _| Ok(Box::new(EwcRule::new(p.ewc_lr, p.ewc_lambda))));
        reg.register("learned", |p, phi| {
            let phi = phi.ok_or_else(|| Error::arg("the learned rule needs a trained predictor"))?;
            Ok(Box::new(LearnedRule::new(phi.clone(), p.eta)))
        });
        reg
    }

    pub fn register(&mut self, name: impl Into<String>, factory: RuleFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn create(&self, name: &str, params: &RuleParams, predictor: Option<&PredictorParams>) -> Result<Box<dyn UpdateRule>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::arg(format!("unknown update rule {name:?}; known rules: {:?}", self.names()))
        })?;
        factory(params, predictor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Rng;
    use crate::predictor::FeatureTransform;

    #[test]
    fn builtin_names() {
        assert_eq!(RuleRegistry::builtin().names(), ["adam", "ewc", "learned", "sgd"]);
    }

    #[test]
    fn unknown_rule_lists_known_names() {
        let err = RuleRegistry::builtin()
            .create("rmsprop", &RuleParams::default(), None)
            .err()
            .unwrap();
        assert!(err.to_string().contains("sgd"));
    }

    #[test]
    fn learned_rule_requires_predictor() {
        assert!(RuleRegistry::builtin().create("learned", &RuleParams::default(), None).is_err());
    }

    #[test]
    fn zero_predictor_rule_is_identity() {
        let phi = PredictorParams::init(&[5, 10, 10, 1], FeatureTransform::Log, &mut Rng::new(1)).unwrap();
        let mut rule = RuleRegistry::builtin()
            .create("learned", &RuleParams::default(), Some(&phi))
            .unwrap();
        let theta = FlatVector::new(vec![0.3, -0.2, 1.0]);
        let stats = GradStats {
            avg_sq_grad: FlatVector::new(vec![0.1, 0.2, 0.3]),
        };
        rule.begin_task(&TaskContext {
            theta_star: &theta,
            prev_stats: Some(&stats),
        })
        .unwrap();
        let out = rule.step(&theta, &FlatVector::new(vec![1.0, -1.0, 0.5])).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn custom_rules_can_be_registered() {
        struct Frozen;
        impl UpdateRule for Frozen {
            fn name(&self) -> &str {
                "frozen"
            }
            fn step(&mut self, theta: &FlatVector, _grad: &FlatVector) -> Result<FlatVector> {
                Ok(theta.clone())
            }
        }
        let mut reg = RuleRegistry::builtin();
        reg.register("frozen", |_, _| Ok(Box::new(Frozen)));
        let mut rule = reg.create("frozen", &RuleParams::default(), None).unwrap();
        assert_eq!(rule.name(), "frozen");
        let theta = FlatVector::new(vec![1.0]);
        assert_eq!(rule.step(&theta, &FlatVector::new(vec![5.0])).unwrap(), theta);
    }
}
