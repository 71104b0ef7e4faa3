//! Dense linear algebra, seeded randomness and flat-parameter bookkeeping.

mod layout;
mod matrix;
mod rng;

pub use layout::{LayoutMap, Segment};
pub use matrix::{matmul, matmul_nt, matmul_tn, FlatVector, Matrix};
pub use rng::Rng;

use crate::{Error, Result};

/// Matrix with entries drawn i.i.d. from `normal(0, scale²)`.
pub fn gaussian_init(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::arg(format!("gaussian_init scale must be finite and >= 0, got {scale}")));
    }
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_gives_zeros() {
        let m = gaussian_init(&mut Rng::new(1), 4, 5, 0.0).unwrap();
        assert!(m.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = gaussian_init(&mut Rng::new(42), 8, 8, 1.0).unwrap();
        let b = gaussian_init(&mut Rng::new(42), 8, 8, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_moments() {
        let m = gaussian_init(&mut Rng::new(2024), 100, 100, 1.0).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn negative_scale_rejected() {
        assert!(gaussian_init(&mut Rng::new(1), 1, 1, -1.0).is_err());
    }
}
