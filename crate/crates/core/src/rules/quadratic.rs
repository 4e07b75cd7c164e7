//! Quadratic losses with known curvature, used as fixtures wherever a
//! closed-form answer is needed.

use crate::error::{Error, Result};
use crate::particles::ParticleCollection;

use super::{Evaluation, GradientOracle};

/// `L = ½ λ Σ_i ‖x_i‖²`.
#[derive(Debug, Clone)]
pub struct IsotropicQuadratic {
    dim: usize,
    lambda: f64,
}

impl IsotropicQuadratic {
    pub fn new(dim: usize, lambda: f64) -> Self {
        Self { dim, lambda }
    }
}

impl GradientOracle for IsotropicQuadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, theta: &ParticleCollection) -> Result<Evaluation> {
        let loss = 0.5 * self.lambda * theta.data().iter().map(|v| v * v).sum::<f64>();
        let grad = theta.data().iter().map(|v| self.lambda * v).collect();
        Ok(Evaluation {
            loss,
            grad: ParticleCollection::from_raw_unchecked(self.dim, grad, None),
        })
    }
}

/// `L = ½ Σ_i x_iᵀ H x_i` with one symmetric D×D matrix shared by all
/// particles; permutation symmetric, Hessian `I ⊗ H`.
#[derive(Debug, Clone)]
pub struct ParticleQuadratic {
    dim: usize,
    hessian: Vec<f64>,
}

impl ParticleQuadratic {
    pub fn new(dim: usize, hessian: Vec<f64>) -> Result<Self> {
        if hessian.len() != dim * dim {
            return Err(Error::Dimension(format!("Hessian needs {} entries", dim * dim)));
        }
        for a in 0..dim {
            for b in 0..a {
                if hessian[a * dim + b] != hessian[b * dim + a] {
                    return Err(Error::InvalidArgument("Hessian must be symmetric".into()));
                }
            }
        }
        Ok(Self { dim, hessian })
    }

    pub fn diagonal(eigenvalues: &[f64]) -> Self {
        let dim = eigenvalues.len();
        let mut hessian = vec![0.0; dim * dim];
        for (k, &l) in eigenvalues.iter().enumerate() {
            hessian[k * dim + k] = l;
        }
        Self { dim, hessian }
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate() {
            *o = self.hessian[a * self.dim..(a + 1) * self.dim]
                .iter()
                .zip(x)
                .map(|(h, v)| h * v)
                .sum();
        }
    }
}

impl GradientOracle for ParticleQuadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, theta: &ParticleCollection) -> Result<Evaluation> {
        let mut grad = vec![0.0; theta.data().len()];
        let mut loss = 0.0;
        for (x, g) in theta.rows().zip(grad.chunks_exact_mut(self.dim)) {
            self.apply(x, g);
            loss += 0.5 * x.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(Evaluation {
            loss,
            grad: ParticleCollection::from_raw_unchecked(self.dim, grad, None),
        })
    }
}

/// `L = ½ Σ_k λ_k θ_k²` over the flattened collection. Not permutation
/// symmetric; used where an arbitrary spectrum is needed.
#[derive(Debug, Clone)]
pub struct DiagonalQuadratic {
    dim: usize,
    diag: Vec<f64>,
}

impl DiagonalQuadratic {
    pub fn new(dim: usize, diag: Vec<f64>) -> Result<Self> {
        if dim == 0 || !diag.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} curvatures do not fill rows of width {dim}",
                diag.len()
            )));
        }
        Ok(Self { dim, diag })
    }
}

impl GradientOracle for DiagonalQuadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, theta: &ParticleCollection) -> Result<Evaluation> {
        if theta.data().len() != self.diag.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.diag.len(),
                theta.data().len()
            )));
        }
        let grad: Vec<f64> = theta.data().iter().zip(&self.diag).map(|(x, l)| l * x).collect();
        let loss = 0.5 * theta.data().iter().zip(&grad).map(|(x, g)| x * g).sum::<f64>();
        Ok(Evaluation {
            loss,
            grad: ParticleCollection::from_raw_unchecked(self.dim, grad, None),
        })
    }
}
