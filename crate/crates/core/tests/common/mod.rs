//! Oracles and fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use metacl::classifier::{self, Batch, ClassifierParams, GradStats};
use metacl::experiment::ExperimentConfig;
use metacl::ndcore::{FlatVector, Matrix, Rng};
use metacl::predictor::{
    apply_update, assemble_features, meta_gradient, predict_steps, FeatureTransform, PerParamFeatures,
    PredictorParams,
};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Components smaller than this are compared on an absolute scale: below it
/// central-difference round-off dominates the quotient.
pub const REL_FLOOR: f64 = 1e-4;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn mnist_subset_dir() -> PathBuf {
    workspace_root().join("data/mnist-subset")
}

/// A preset from `configs/`, with paths made absolute and the output
/// directory moved to `out_dir`.
pub fn preset(name: &str, out_dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_file(workspace_root().join("configs").join(name)).unwrap();
    cfg.data.mnist_dir = mnist_subset_dir();
    cfg.output_dir = Some(out_dir.to_path_buf());
    cfg
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

pub fn central_difference(x: &FlatVector, f: impl Fn(&FlatVector) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[i] += FD_EPS;
            minus[i] -= FD_EPS;
            (f(&FlatVector::new(plus)) - f(&FlatVector::new(minus))) / (2.0 * FD_EPS)
        })
        .collect()
}

pub fn random_vector(rng: &mut Rng, n: usize, scale: f64) -> FlatVector {
    (0..n).map(|_| scale * rng.normal()).collect()
}

pub fn random_batch(rng: &mut Rng, n: usize, d: usize, c: usize) -> Batch {
    let inputs = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
    let labels = (0..n).map(|_| rng.below(c)).collect();
    Batch::new(inputs, labels, c).unwrap()
}

/// Analytic vs. central-difference classifier gradient on a random net no
/// larger than 10-12-8 with at most 8 samples. Returns the max relative error.
pub fn classifier_gradient_check(seed: u64) -> f64 {
    let mut rng = Rng::new(seed).derive("gradient-oracle");
    let d = 2 + rng.below(9);
    let h = 2 + rng.below(11);
    let c = 2 + rng.below(7);
    let n = 1 + rng.below(8);
    let dims = [d, h, c];
    let batch = random_batch(&mut rng, n, d, c);
    // Library initialization, plus non-zero biases so every bias gradient is exercised.
    let mut layers = ClassifierParams::init(&dims, &mut rng).unwrap().layers();
    for (_, b) in &mut layers {
        *b = random_vector(&mut rng, b.len(), 0.1);
    }
    let params = ClassifierParams::from_layers(&layers).unwrap();
    let (_, grad) = classifier::loss_and_grad(&params, &batch).unwrap();
    let numeric = central_difference(params.theta(), |t| {
        classifier::loss(&params.with_theta(t.clone()).unwrap(), &batch).unwrap()
    });
    max_rel_error(grad.as_slice(), &numeric)
}

pub struct MetaInstance {
    pub phi: PredictorParams,
    pub feats: PerParamFeatures,
    pub theta: ClassifierParams,
    pub batch: Batch,
    pub eta: f64,
}

impl MetaInstance {
    /// Loss after one predicted update, as a function of the predictor weights.
    pub fn post_update_loss(&self, phi: &FlatVector) -> f64 {
        let p = self.phi.with_phi(phi.clone()).unwrap();
        let steps = predict_steps(&p, &self.feats).unwrap();
        let next = apply_update(self.theta.theta(), &steps, self.eta).unwrap();
        classifier::loss(&self.theta.with_theta(next).unwrap(), &self.batch).unwrap()
    }

    pub fn analytic(&self) -> FlatVector {
        let steps = predict_steps(&self.phi, &self.feats).unwrap();
        let next = self.theta.with_theta(apply_update(self.theta.theta(), &steps, self.eta).unwrap()).unwrap();
        let (_, dl) = classifier::loss_and_grad(&next, &self.batch).unwrap();
        meta_gradient(&self.phi, &self.feats, &dl, self.eta).unwrap()
    }
}

/// A random classifier with P ≤ 20, a dense 5-4-4-1 predictor and features
/// built from a real gradient.
pub fn meta_instance(seed: u64) -> MetaInstance {
    let mut rng = Rng::new(seed).derive("meta-oracle");
    let shapes: [[usize; 3]; 4] = [[2, 2, 2], [3, 2, 2], [2, 3, 2], [3, 3, 2]];
    let dims = shapes[rng.below(shapes.len())];
    let (d, c) = (dims[0], dims[2]);
    let num_params = ClassifierParams::zeros(&dims).unwrap().num_params();
    assert!(num_params <= 20);
    let theta = ClassifierParams::from_flat(&dims, random_vector(&mut rng, num_params, 0.8)).unwrap();
    let cur = random_batch(&mut rng, 4, d, c);
    let (_, g) = classifier::loss_and_grad(&theta, &cur).unwrap();
    let stats = GradStats {
        avg_sq_grad: (0..num_params).map(|_| rng.uniform() * 0.1).collect(),
    };
    let theta_star = theta.theta().iter().map(|t| t + 0.05 * rng.normal()).collect();
    let feats = assemble_features(&g, &stats, &theta_star, theta.theta()).unwrap();
    let transform = if rng.below(2) == 0 { FeatureTransform::Log } else { FeatureTransform::Raw };
    let phi = PredictorParams::init_dense(&[5, 4, 4, 1], transform, &mut rng.derive("phi")).unwrap();
    // Spread φ so the tanh units are not all near-linear.
    let phi = phi.with_phi(phi.phi().iter().map(|w| 2.0 * w).collect()).unwrap();
    MetaInstance {
        phi,
        feats,
        theta,
        batch: random_batch(&mut rng, 6, d, c),
        eta: 0.05 + 0.45 * rng.uniform(),
    }
}

pub fn meta_gradient_check(seed: u64) -> f64 {
    let inst = meta_instance(seed);
    let analytic = inst.analytic();
    let numeric = central_difference(inst.phi.phi(), |p| inst.post_update_loss(p));
    max_rel_error(analytic.as_slice(), &numeric)
}
