//! Gauss-Hermite quadrature for Gaussian expectations.
//!
//! Rules are expressed in the probabilists' normalization: `expect(f)`
//! approximates `E[f(G)]` for `G ~ N(0,1)`. Nodes and weights come from the
//! Golub-Welsch algorithm: the eigenvalues of the symmetrized Jacobi matrix of
//! the Hermite recurrence are the nodes, and the squared first eigenvector
//! components give the weights.

use std::sync::OnceLock;

use nalgebra::DMatrix;

/// Default 1-d rule size used for the link-function expectations.
pub const DEFAULT_NODES_1D: usize = 129;
/// Default per-axis rule size for tensorized 2-d expectations.
pub const DEFAULT_NODES_2D: usize = 65;

/// A Gauss-Hermite rule on the standard-normal scale.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds an `n`-node rule. Exact for polynomials up to degree `2n - 1`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature rule needs at least one node");
        if n == 1 {
            return Self {
                nodes: vec![0.0],
                weights: vec![1.0],
            };
        }
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 0..n - 1 {
            let b = ((k + 1) as f64 * 0.5).sqrt();
            jacobi[(k, k + 1)] = b;
            jacobi[(k + 1, k)] = b;
        }
        let eigen = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = eigen
            .eigenvalues
            .iter()
            .enumerate()
            // physicists' node x, weight proportional to first eigenvector entry squared
            .map(|(j, &x)| (x, eigen.eigenvectors[(0, j)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        // Standard-normal scale: g = sqrt(2) x; weights normalized to sum 1.
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let nodes = pairs
            .iter()
            .map(|p| p.0 * std::f64::consts::SQRT_2)
            .collect();
        let weights = pairs.iter().map(|p| p.1 / total).collect();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(G)]` for `G ~ N(0,1)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&g, &w)| w * f(g))
            .sum()
    }

    /// `E[f(mu + gamma G)]` for `G ~ N(0,1)`.
    pub fn expect_affine<F: Fn(f64) -> f64>(&self, mu: f64, gamma: f64, f: F) -> f64 {
        self.expect(|g| f(mu + gamma * g))
    }

    /// `E[f(Z1, Z2)]` where `(Z1, Z2)` is bivariate Gaussian with the given
    /// means and lower-triangular covariance factor `L` (`cov = L L^T`),
    /// evaluated on the tensor product of this rule with itself.
    pub fn expect_bivariate<F: Fn(f64, f64) -> f64>(
        &self,
        mean: (f64, f64),
        chol_lower: [[f64; 2]; 2],
        f: F,
    ) -> f64 {
        let mut acc = 0.0;
        for (&g1, &w1) in self.nodes.iter().zip(&self.weights) {
            let z1 = mean.0 + chol_lower[0][0] * g1;
            let base2 = mean.1 + chol_lower[1][0] * g1;
            let mut inner = 0.0;
            for (&g2, &w2) in self.nodes.iter().zip(&self.weights) {
                inner += w2 * f(z1, base2 + chol_lower[1][1] * g2);
            }
            acc += w1 * inner;
        }
        acc
    }
}

/// Shared 129-node rule for 1-d Gaussian expectations.
pub fn gh_1d() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(DEFAULT_NODES_1D))
}

/// Shared 65-node rule used per axis for 2-d tensor quadrature.
pub fn gh_2d() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(DEFAULT_NODES_2D))
}
