//! Local sharpness `K̂ = |λ_max(H)|` by matrix-free power iteration, and the
//! critical step `η* = 1/K̂`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::ParticleCollection;
use crate::rules::{checked_evaluate, GradientOracle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessEstimate {
    pub k_hat: f64,
    pub eta_star: f64,
    pub iterations_used: usize,
    /// `‖Hv - q v‖ / ‖v‖` at the last iterate, `q` the Rayleigh quotient.
    pub residual: f64,
    pub converged: bool,
}

impl SharpnessEstimate {
    /// `step,k_hat,eta_star,eta_times_k`.
    pub fn csv_row(&self, step: usize, eta: f64) -> String {
        format!("{step},{},{},{}", self.k_hat, self.eta_star, eta * self.k_hat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerIterationConfig {
    pub max_iters: usize,
    /// Convergence when `residual <= tol · max(1, |q|)`.
    pub tol: f64,
    pub seed: u64,
    /// Finite-difference step; `None` uses `1e-4 · (1 + ‖x‖)`.
    pub fd_step: Option<f64>,
}

impl Default for PowerIterationConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-4,
            seed: 0,
            fd_step: None,
        }
    }
}

pub fn default_fd_step(x: &ParticleCollection) -> f64 {
    1e-4 * (1.0 + x.norm())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Hessian-vector product by central differences of the gradient along
/// `v/‖v‖`, rescaled by `‖v‖`.
pub fn hvp<O: GradientOracle + ?Sized>(oracle: &O, x: &ParticleCollection, v: &[f64], h: f64) -> Result<Vec<f64>> {
    if v.len() != x.data().len() {
        return Err(Error::Dimension(format!(
            "direction has {} entries, collection has {}",
            v.len(),
            x.data().len()
        )));
    }
    let vn = norm(v);
    if !(vn > 0.0) || !vn.is_finite() {
        return Err(Error::InvalidArgument("direction must be non-zero and finite".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let shifted = |sign: f64| -> Result<ParticleCollection> {
        let data = x.data().iter().zip(v).map(|(a, b)| a + sign * h * b / vn).collect();
        ParticleCollection::new(x.dim(), data)
    };
    let gp = checked_evaluate(oracle, &shifted(1.0)?)?.grad;
    let gm = checked_evaluate(oracle, &shifted(-1.0)?)?.grad;
    let scale = vn / (2.0 * h);
    Ok(gp.data().iter().zip(gm.data()).map(|(a, b)| (a - b) * scale).collect())
}

/// Power iteration with the Rayleigh quotient; `k_hat = |q|` so the dominant
/// curvature in absolute value is reported whatever its sign.
pub fn power_iteration<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &ParticleCollection,
    config: &PowerIterationConfig,
) -> Result<SharpnessEstimate> {
    power_iteration_from(oracle, x, config, None)
}

/// As [`power_iteration`], optionally warm-started from a previous direction.
pub fn power_iteration_from<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &ParticleCollection,
    config: &PowerIterationConfig,
    start: Option<&[f64]>,
) -> Result<SharpnessEstimate> {
    Ok(power_iteration_vector(oracle, x, config, start)?.0)
}

/// Returns the estimate together with the final unit direction.
pub fn power_iteration_vector<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &ParticleCollection,
    config: &PowerIterationConfig,
    start: Option<&[f64]>,
) -> Result<(SharpnessEstimate, Vec<f64>)> {
    if config.max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
    }
    if !(config.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let h = config.fd_step.unwrap_or_else(|| default_fd_step(x));
    let n = x.data().len();
    let mut v: Vec<f64> = match start {
        Some(s) if s.len() == n && norm(s) > 0.0 => s.to_vec(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
    };
    let vn = norm(&v);
    v.iter_mut().for_each(|a| *a /= vn);

    let mut best = SharpnessEstimate {
        k_hat: 0.0,
        eta_star: f64::INFINITY,
        iterations_used: 0,
        residual: f64::INFINITY,
        converged: false,
    };
    for it in 1..=config.max_iters {
        let w = hvp(oracle, x, &v, h)?;
        let q: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let residual = norm(&w.iter().zip(&v).map(|(a, b)| a - q * b).collect::<Vec<_>>());
        let k_hat = q.abs();
        best = SharpnessEstimate {
            k_hat,
            eta_star: if k_hat > 0.0 { 1.0 / k_hat } else { f64::INFINITY },
            iterations_used: it,
            residual,
            converged: residual <= config.tol * k_hat.max(1.0),
        };
        let wn = norm(&w);
        if best.converged || wn == 0.0 {
            best.converged = true;
            break;
        }
        v = w.into_iter().map(|a| a / wn).collect();
    }
    Ok((best, v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossDecrease {
    pub eta: f64,
    /// `L(x) - L(x - η∇L(x))`; `None` when the trial loss was not finite.
    pub decrease: Option<f64>,
}

/// Exact one-step loss decrease of a gradient step for each trial step size.
pub fn one_step_loss_decrease<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &ParticleCollection,
    etas: &[f64],
) -> Result<Vec<LossDecrease>> {
    if etas.is_empty() {
        return Err(Error::InvalidArgument("no step sizes given".into()));
    }
    if let Some(e) = etas.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::InvalidArgument(format!("step sizes must be positive, got {e}")));
    }
    let base = checked_evaluate(oracle, x)?;
    Ok(etas
        .iter()
        .map(|&eta| {
            let data = x
                .data()
                .iter()
                .zip(base.grad.data())
                .map(|(a, g)| a - eta * g)
                .collect();
            let decrease = ParticleCollection::new(x.dim(), data)
                .and_then(|y| oracle.loss(&y))
                .ok()
                .filter(|l| l.is_finite())
                .map(|l| base.loss - l);
            LossDecrease { eta, decrease }
        })
        .collect())
}
