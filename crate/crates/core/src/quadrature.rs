//! Generalized Gauss–Laguerre rules for expectations under `Gamma(shape, 1)`.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and probability weights such that
/// `E[f(Z)] ≈ Σ w_k f(x_k)` for `Z ~ Gamma(shape, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Golub–Welsch on the Jacobi matrix of the generalized Laguerre
/// polynomials with exponent `shape - 1`.
pub fn gamma_rule(shape: f64, n: usize) -> GammaRule {
    assert!(shape > 0.0 && shape.is_finite(), "gamma shape must be positive, got {shape}");
    assert!(n >= 1);
    let a = shape - 1.0;
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        j[(k, k)] = 2.0 * k as f64 + a + 1.0;
        if k > 0 {
            let b = (k as f64 * (k as f64 + a)).sqrt();
            j[(k, k - 1)] = b;
            j[(k - 1, k)] = b;
        }
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    GammaRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    }
}
