//! The update-step predictor: a small MLP applied independently to every
//! classifier parameter's feature row.
//!
//! Rows of a [`PerParamFeatures`] matrix are treated as a batch. Because each
//! row flows through the network on its own, the output for parameter `i`
//! depends only on row `i`, and the gradient with respect to the predictor
//! weights is a sum of per-row contributions.

use serde::{Deserialize, Serialize};

use crate::classifier::GradStats;
use crate::mlp::{Activation, DenseStack};
use crate::ndcore::{FlatVector, LayoutMap, Matrix, Rng};
use crate::{Error, Result};

/// Canonical predictor input columns.
pub const FEATURE_NAMES: [&str; 5] = ["g_cur", "avg_sq_grad_prev", "theta_star", "theta", "theta_minus_theta_star"];
pub const NUM_FEATURES: usize = FEATURE_NAMES.len();

/// Scale used by [`FeatureTransform::Log`].
pub const LOG_FEATURE_EPS: f64 = 1e-8;

/// Conditioning applied to the gradient columns before the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTransform {
    /// `sign(x) · ln(1 + |x| / 1e-8)` on `g_cur` and `avg_sq_grad_prev`.
    #[default]
    Log,
    Raw,
}

impl FeatureTransform {
    fn apply(self, feats: &Matrix) -> Matrix {
        match self {
            FeatureTransform::Raw => feats.clone(),
            FeatureTransform::Log => {
                let mut out = feats.clone();
                for i in 0..out.rows() {
                    let row = out.row_mut(i);
                    for v in &mut row[..2] {
                        *v = v.signum() * (v.abs() / LOG_FEATURE_EPS).ln_1p();
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    stack: DenseStack,
    phi: FlatVector,
    transform: FeatureTransform,
}

impl PredictorParams {
    /// `dims` runs from the feature count to 1, e.g. `[5, 10, 10, 1]`.
    /// Hidden weights are `normal(0, 1/fan_in)`; the output layer and all
    /// biases start at zero, so the initial predictor emits zero steps.
    pub fn init(dims: &[usize], transform: FeatureTransform, rng: &mut Rng) -> Result<Self> {
        let stack = Self::stack(dims)?;
        let last = stack.num_layers() - 1;
        let phi = stack.init(rng, |k, fan_in| {
            if k == last {
                0.0
            } else {
                1.0 / (fan_in as f64).sqrt()
            }
        })?;
        Ok(Self { stack, phi, transform })
    }

    /// Every layer gaussian, including the output layer.
    pub fn init_dense(dims: &[usize], transform: FeatureTransform, rng: &mut Rng) -> Result<Self> {
        let stack = Self::stack(dims)?;
        let phi = stack.init(rng, |_, fan_in| 1.0 / (fan_in as f64).sqrt())?;
        Ok(Self { stack, phi, transform })
    }

    pub fn from_flat(dims: &[usize], transform: FeatureTransform, phi: FlatVector) -> Result<Self> {
        let stack = Self::stack(dims)?;
        stack.check_params(&phi)?;
        Ok(Self { stack, phi, transform })
    }

    fn stack(dims: &[usize]) -> Result<DenseStack> {
        if dims.last() != Some(&1) {
            return Err(Error::arg(format!("predictor must end in a scalar output, got dims {dims:?}")));
        }
        DenseStack::new(dims, Activation::Tanh)
    }

    pub fn dims(&self) -> &[usize] {
        &self.stack.dims
    }

    pub fn num_features(&self) -> usize {
        self.stack.dims[0]
    }

    pub fn layout(&self) -> &LayoutMap {
        &self.stack.layout
    }

    pub fn transform(&self) -> FeatureTransform {
        self.transform
    }

    pub fn num_params(&self) -> usize {
        self.phi.len()
    }

    pub fn phi(&self) -> &FlatVector {
        &self.phi
    }

    pub fn set_phi(&mut self, phi: FlatVector) -> Result<()> {
        self.stack.check_params(&phi)?;
        self.phi = phi;
        Ok(())
    }

    pub fn with_phi(&self, phi: FlatVector) -> Result<Self> {
        let mut out = self.clone();
        out.set_phi(phi)?;
        Ok(out)
    }

    fn check_features(&self, feats: &PerParamFeatures) -> Result<()> {
        if feats.num_features() != self.num_features() {
            return Err(Error::shape(format!(
                "features have {} columns, predictor expects {}",
                feats.num_features(),
                self.num_features()
            )));
        }
        Ok(())
    }
}

/// One feature row per classifier parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PerParamFeatures {
    pub features: Matrix,
    pub column_names: Vec<String>,
}

impl PerParamFeatures {
    pub fn num_params(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> PerParamFeatures {
        PerParamFeatures {
            features: self.features.select_rows(rows),
            column_names: self.column_names.clone(),
        }
    }
}

/// Predicted per-parameter steps, in units of parameter change per unit `η`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepVector {
    pub steps: FlatVector,
}

impl StepVector {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Rows `[g_cur, avg_sq_grad_prev, θ*, θ, θ − θ*]`.
pub fn assemble_features(
    g_cur: &FlatVector,
    stats_prev: &GradStats,
    theta_star: &FlatVector,
    theta: &FlatVector,
) -> Result<PerParamFeatures> {
    let p = g_cur.len();
    g_cur.check_len(&stats_prev.avg_sq_grad, "assemble_features(g_cur, avg_sq_grad)")?;
    g_cur.check_len(theta_star, "assemble_features(g_cur, theta_star)")?;
    g_cur.check_len(theta, "assemble_features(g_cur, theta)")?;
    let mut data = Vec::with_capacity(p * NUM_FEATURES);
    for i in 0..p {
        data.extend_from_slice(&[
            g_cur[i],
            stats_prev.avg_sq_grad[i],
            theta_star[i],
            theta[i],
            theta[i] - theta_star[i],
        ]);
    }
    Ok(PerParamFeatures {
        features: Matrix::from_vec(p, NUM_FEATURES, data)?,
        column_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Runs every feature row through the predictor.
pub fn predict_steps(phi: &PredictorParams, feats: &PerParamFeatures) -> Result<StepVector> {
    phi.check_features(feats)?;
    let x = phi.transform.apply(&feats.features);
    let cache = phi.stack.forward(&phi.phi, &x)?;
    Ok(StepVector {
        steps: FlatVector::new(cache.output.into_vec()),
    })
}

/// `θ' = θ − η · steps`.
pub fn apply_update(theta: &FlatVector, steps: &StepVector, eta: f64) -> Result<FlatVector> {
    theta.check_len(&steps.steps, "apply_update")?;
    if !eta.is_finite() {
        return Err(Error::arg(format!("eta must be finite, got {eta}")));
    }
    Ok(theta
        .iter()
        .zip(steps.steps.iter())
        .map(|(t, s)| t - eta * s)
        .collect())
}

/// Gradient of a post-update loss with respect to the predictor weights,
/// differentiating only the last update `θ' = θ − η · h_φ(features)`.
///
/// `dl_dtheta_prime` is `∂L/∂θ'`. Features are constants.
pub fn meta_gradient(
    phi: &PredictorParams,
    feats: &PerParamFeatures,
    dl_dtheta_prime: &FlatVector,
    eta: f64,
) -> Result<FlatVector> {
    phi.check_features(feats)?;
    if dl_dtheta_prime.len() != feats.num_params() {
        return Err(Error::shape(format!(
            "loss gradient has length {}, features have {} rows",
            dl_dtheta_prime.len(),
            feats.num_params()
        )));
    }
    let x = phi.transform.apply(&feats.features);
    let cache = phi.stack.forward(&phi.phi, &x)?;
    let upstream = Matrix::from_vec(
        feats.num_params(),
        1,
        dl_dtheta_prime.iter().map(|d| -eta * d).collect(),
    )?;
    phi.stack.backward(&phi.phi, &cache, &upstream)
}

/// Counts of `η · steps` over `edges`, with explicit under/overflow bins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepHistogram {
    pub below: usize,
    /// `counts[k]` covers `[edges[k], edges[k+1])`; the last bin is closed.
    pub counts: Vec<usize>,
    pub above: usize,
}

impl StepHistogram {
    pub fn total(&self) -> usize {
        self.below + self.above + self.counts.iter().sum::<usize>()
    }
}

pub fn step_histogram(steps: &StepVector, eta: f64, bin_edges: &[f64]) -> Result<StepHistogram> {
    if bin_edges.len() < 2 {
        return Err(Error::arg("histogram needs at least two edges"));
    }
    if bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::arg("histogram edges must be strictly increasing"));
    }
    let last = bin_edges.len() - 1;
    let mut hist = StepHistogram {
        below: 0,
        counts: vec![0; last],
        above: 0,
    };
    for &s in steps.steps.iter() {
        let v = eta * s;
        if v < bin_edges[0] {
            hist.below += 1;
        } else if v > bin_edges[last] {
            hist.above += 1;
        } else {
            // first edge strictly greater than v, minus one
            let k = bin_edges.partition_point(|&e| e <= v);
            hist.counts[(k.max(1) - 1).min(last - 1)] += 1;
        }
    }
    Ok(hist)
}

/// `n_bins` uniform bins over `[lo, hi]`.
pub fn uniform_edges(lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    (0..=n_bins)
        .map(|k| lo + (hi - lo) * k as f64 / n_bins as f64)
        .collect()
}
