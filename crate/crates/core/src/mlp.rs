//! Fully connected layer stacks stored as one flat parameter vector.
//!
//! Shared by the classifier and the step predictor. Layer `k` owns two
//! segments in the layout: `layer{k}.weight` with shape `(in, out)` and
//! `layer{k}.bias` with shape `(1, out)`. Hidden layers apply an activation;
//! the last layer is affine.

use serde::{Deserialize, Serialize};

use crate::ndcore::{gaussian_init, matmul, matmul_nt, matmul_tn, FlatVector, LayoutMap, Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn grad(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

pub(crate) fn build_layout(dims: &[usize]) -> Result<LayoutMap> {
    if dims.len() < 2 {
        return Err(Error::arg(format!(
            "a layer stack needs at least input and output dims, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::arg(format!("layer dims must be positive, got {dims:?}")));
    }
    let mut layout = LayoutMap::new();
    for (k, w) in dims.windows(2).enumerate() {
        layout.push(format!("layer{k}.weight"), w[0], w[1]);
        layout.push(format!("layer{k}.bias"), 1, w[1]);
    }
    Ok(layout)
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DenseStack {
    pub dims: Vec<usize>,
    pub layout: LayoutMap,
    pub hidden: Activation,
}

/// Activations recorded during a forward pass.
pub(crate) struct ForwardCache {
    /// `inputs[k]` is the input to layer `k`.
    pub inputs: Vec<Matrix>,
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Matrix>,
    /// Output of the last (affine) layer.
    pub output: Matrix,
}

impl DenseStack {
    pub fn new(dims: &[usize], hidden: Activation) -> Result<Self> {
        Ok(Self {
            dims: dims.to_vec(),
            layout: build_layout(dims)?,
            hidden,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layout.total_len()
    }

    pub fn check_params(&self, flat: &FlatVector) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "parameter vector of length {} for a {:?} stack with {} parameters",
                flat.len(),
                self.dims,
                self.num_params()
            )));
        }
        Ok(())
    }

    pub fn weight(&self, flat: &FlatVector, k: usize) -> Matrix {
        let seg = &self.layout.segments()[2 * k];
        Matrix::from_vec(seg.rows, seg.cols, flat.as_slice()[seg.range()].to_vec())
            .expect("segment shape")
    }

    pub fn bias<'a>(&self, flat: &'a FlatVector, k: usize) -> &'a [f64] {
        &flat.as_slice()[self.layout.segments()[2 * k + 1].range()]
    }

    /// Gaussian weights with per-layer scales, zero biases.
    pub fn init(&self, rng: &mut Rng, scale: impl Fn(usize, usize) -> f64) -> Result<FlatVector> {
        let mut flat = Vec::with_capacity(self.num_params());
        for k in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.dims[k], self.dims[k + 1]);
            let w = gaussian_init(rng, fan_in, fan_out, scale(k, fan_in))?;
            flat.extend_from_slice(w.as_slice());
            flat.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(FlatVector::new(flat))
    }

    pub fn forward(&self, flat: &FlatVector, x: &Matrix) -> Result<ForwardCache> {
        self.check_params(flat)?;
        if x.cols() != self.dims[0] {
            return Err(Error::shape(format!(
                "input width {} does not match first layer in-dim {}",
                x.cols(),
                self.dims[0]
            )));
        }
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(last);
        let mut current = x.clone();
        for k in 0..self.num_layers() {
            let mut z = matmul(&current, &self.weight(flat, k))?;
            z.add_row_vector(self.bias(flat, k))?;
            inputs.push(current);
            if k == last {
                return Ok(ForwardCache {
                    inputs,
                    pre,
                    output: z,
                });
            }
            current = z.map(|v| self.hidden.apply(v));
            pre.push(z);
        }
        unreachable!("stack has at least one layer")
    }

    /// Reverse pass from `d_output` (gradient w.r.t. the final affine output)
    /// to a flat parameter gradient in layout order.
    pub fn backward(&self, flat: &FlatVector, cache: &ForwardCache, d_output: &Matrix) -> Result<FlatVector> {
        let n_layers = self.num_layers();
        let mut grads: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(n_layers);
        let mut delta = d_output.clone();
        for k in (0..n_layers).rev() {
            let dw = matmul_tn(&cache.inputs[k], &delta)?;
            let db = delta.column_sums();
            if k > 0 {
                let mut d_in = matmul_nt(&delta, &self.weight(flat, k))?;
                let z = &cache.pre[k - 1];
                let a = &cache.inputs[k];
                for ((d, &zv), &av) in d_in
                    .as_mut_slice()
                    .iter_mut()
                    .zip(z.as_slice())
                    .zip(a.as_slice())
                {
                    *d *= self.hidden.grad(zv, av);
                }
                delta = d_in;
            }
            grads.push((dw, db));
        }
        let mut out = Vec::with_capacity(self.num_params());
        for (dw, db) in grads.iter().rev() {
            out.extend_from_slice(dw.as_slice());
            out.extend_from_slice(db);
        }
        Ok(FlatVector::new(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_segments_chain() {
        let layout = build_layout(&[3, 4, 2]).unwrap();
        let names: Vec<_> = layout.segments().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]);
        assert_eq!(layout.total_len(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn degenerate_dims_rejected() {
        assert!(build_layout(&[3]).is_err());
        assert!(build_layout(&[3, 0, 2]).is_err());
    }
}
