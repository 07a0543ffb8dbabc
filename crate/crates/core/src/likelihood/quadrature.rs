use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::svgp::ResidualPosterior;

pub const DEFAULT_QUADRATURE_NODES: usize = 20;

/// Gauss-Hermite rule for the weight `exp(-x^2)`; weights sum to `sqrt(pi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// `weights / sqrt(pi)`, summing to one: the rule for a standard normal after `x -> sqrt(2) x`.
    normalized: Vec<f64>,
}

impl QuadratureRule {
    /// Golub-Welsch eigen-decomposition of the Jacobi matrix, polished by Newton steps.
    pub fn gauss_hermite(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::invalid("quadrature needs at least one node"));
        }
        let jacobi = DMatrix::from_fn(q, q, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = eig
            .eigenvalues
            .iter()
            .zip(eig.eigenvectors.row(0).iter())
            .map(|(x, v)| (*x, v * v * std::f64::consts::PI.sqrt()))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in &mut pairs {
            *pair = polish(pair.0, q);
        }
        // enforce exact symmetry about zero
        let mut nodes = vec![0.0; q];
        let mut weights = vec![0.0; q];
        for i in 0..q {
            let j = q - 1 - i;
            nodes[i] = 0.5 * (pairs[i].0 - pairs[j].0);
            weights[i] = 0.5 * (pairs[i].1 + pairs[j].1);
        }
        if q % 2 == 1 {
            nodes[q / 2] = 0.0;
        }
        let norm = std::f64::consts::PI.sqrt();
        let normalized = weights.iter().map(|w| w / norm).collect();
        Ok(Self {
            nodes,
            weights,
            normalized,
        })
    }

    /// The default 20-node rule, built once.
    pub fn standard() -> &'static QuadratureRule {
        static RULE: OnceLock<QuadratureRule> = OnceLock::new();
        RULE.get_or_init(|| QuadratureRule::gauss_hermite(DEFAULT_QUADRATURE_NODES).expect("20-node rule"))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn normalized_weights(&self) -> &[f64] {
        &self.normalized
    }
}

/// Newton refinement of a root of the orthonormal Hermite polynomial of degree `n`.
fn polish(mut z: f64, n: usize) -> (f64, f64) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut pp = 1.0;
    for _ in 0..8 {
        let mut p1 = pim4;
        let mut p2 = 0.0;
        for j in 1..=n {
            let p3 = p2;
            p2 = p1;
            let jf = j as f64;
            p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
        }
        pp = (2.0 * n as f64).sqrt() * p2;
        let step = p1 / pp;
        z -= step;
        if step.abs() <= 1e-15 * z.abs().max(1.0) {
            break;
        }
    }
    (z, 2.0 / (pp * pp))
}

/// `E[g(delta)]` for `delta ~ N(mean, variance)` under the rule.
pub fn gh_expectation(posterior: ResidualPosterior, rule: &QuadratureRule, integrand: impl Fn(f64) -> f64) -> Result<f64> {
    if !(posterior.variance >= 0.0) {
        return Err(Error::invalid("negative posterior variance"));
    }
    let spread = (2.0 * posterior.variance).sqrt();
    let mut total = 0.0;
    for (x, w) in rule.nodes.iter().zip(&rule.normalized) {
        let g = integrand(posterior.mean + spread * x);
        if !g.is_finite() {
            return Err(Error::numerical(format!("non-finite integrand at node {x}")));
        }
        total += w * g;
    }
    Ok(total)
}
