//! Permutation-equivariant update rules.
//!
//! Gradient descent acts on the neuron collection directly. Stateful
//! optimizers are made stateless by packing their state into each particle:
//! momentum rows are `(θ_i, p_i)` and Adam rows are `(θ_i, m_i, v_i)`. The
//! update is chosen so that one [`step`](crate::particles::step) with the same
//! step size reproduces the usual optimizer recurrence, which keeps every rule
//! inside the same `x + η·U(X)` framework.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::{apply_permutation, sq_dist, ParticleCollection, Permutation, StepSize};

pub mod quadratic;

/// Loss value and per-particle gradient at one collection.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: ParticleCollection,
}

/// A differentiable loss over collections of `dim()`-wide particles.
pub trait GradientOracle: Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, theta: &ParticleCollection) -> Result<Evaluation>;

    fn loss(&self, theta: &ParticleCollection) -> Result<f64> {
        self.evaluate(theta).map(|e| e.loss)
    }
}

/// Evaluates the oracle and rejects non-finite loss or gradient entries.
pub fn checked_evaluate<O: GradientOracle + ?Sized>(oracle: &O, theta: &ParticleCollection) -> Result<Evaluation> {
    if oracle.dim() != theta.dim() {
        return Err(Error::Dimension(format!(
            "oracle expects particles of width {}, got {}",
            oracle.dim(),
            theta.dim()
        )));
    }
    let e = oracle.evaluate(theta)?;
    if !e.loss.is_finite() {
        return Err(Error::NonFinite { what: "loss", index: 0 });
    }
    theta.check_same_shape(&e.grad, "oracle gradient")?;
    if let Some(pos) = e.grad.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            index: pos / theta.dim(),
        });
    }
    Ok(e)
}

/// Anything mapping a collection to a same-shaped update `U(X)`.
pub trait UpdateRule: Sync {
    fn update(&self, x: &ParticleCollection) -> Result<ParticleCollection>;
}

impl<F> UpdateRule for F
where
    F: Fn(&ParticleCollection) -> Result<ParticleCollection> + Sync,
{
    fn update(&self, x: &ParticleCollection) -> Result<ParticleCollection> {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdamOrdering {
    /// θ-update uses the moments carried in the particle (pre-update).
    #[default]
    Paper,
    /// θ-update uses the moments after folding in the current gradient.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub ordering: AdamOrdering,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            ordering: AdamOrdering::Paper,
        }
    }
}

impl AdamParams {
    fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidArgument(format!(
                "Adam decay rates must lie in [0, 1): beta1={}, beta2={}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Adam particles `(θ_i, m_i, v_i)` with the rule parameters and step counter.
#[derive(Debug, Clone)]
pub struct AdamPackedCollection {
    pub base: ParticleCollection,
    pub params: AdamParams,
    /// 1-based step counter used in the bias corrections.
    pub t: u64,
}

impl AdamPackedCollection {
    /// Zero moments, `t = 1`.
    pub fn init(theta: &ParticleCollection, params: AdamParams) -> Result<Self> {
        let zeros = ParticleCollection::zeros(theta.count(), theta.dim())?;
        Ok(Self {
            base: ParticleCollection::hconcat(&[theta, &zeros, &zeros])?,
            params,
            t: 1,
        })
    }

    pub fn theta_dim(&self) -> usize {
        self.base.dim() / 3
    }

    pub fn theta(&self) -> ParticleCollection {
        self.base.columns(0, self.theta_dim()).expect("packed width checked")
    }
}

/// Momentum particles `(θ_i, p_i)`.
#[derive(Debug, Clone)]
pub struct MomentumPackedCollection {
    pub base: ParticleCollection,
    pub mu: f64,
}

impl MomentumPackedCollection {
    pub fn init(theta: &ParticleCollection, mu: f64) -> Result<Self> {
        let zeros = ParticleCollection::zeros(theta.count(), theta.dim())?;
        Ok(Self {
            base: ParticleCollection::hconcat(&[theta, &zeros])?,
            mu,
        })
    }
}

fn packed_theta_dim(x: &ParticleCollection, blocks: usize, oracle_dim: usize) -> Result<usize> {
    if x.dim() != blocks * oracle_dim {
        return Err(Error::Dimension(format!(
            "packed particle width {} is not {blocks} x {oracle_dim}",
            x.dim()
        )));
    }
    Ok(oracle_dim)
}

/// `U(X) = -∇L(X)`.
pub fn gd_update<O: GradientOracle + ?Sized>(oracle: &O, x: &ParticleCollection) -> Result<ParticleCollection> {
    let e = checked_evaluate(oracle, x)?;
    let data = e.grad.data().iter().map(|g| -g).collect();
    Ok(ParticleCollection::from_raw_unchecked(
        x.dim(),
        data,
        x.multiplicity().map(<[u32]>::to_vec),
    ))
}

fn momentum_update_raw<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &ParticleCollection,
    mu: f64,
    eta: StepSize,
) -> Result<ParticleCollection> {
    let dt = packed_theta_dim(x, 2, oracle.dim())?;
    let theta = x.columns(0, dt)?;
    let g = checked_evaluate(oracle, &theta)?.grad;
    let eta = eta.get();
    let mut out = Vec::with_capacity(x.data().len());
    for (row, gi) in x.rows().zip(g.rows()) {
        let p = &row[dt..];
        out.extend(p.iter().zip(gi).map(|(p, g)| -(mu * p + g)));
        out.extend(p.iter().zip(gi).map(|(p, g)| ((mu - 1.0) * p + g) / eta));
    }
    Ok(ParticleCollection::from_raw_unchecked(
        x.dim(),
        out,
        x.multiplicity().map(<[u32]>::to_vec),
    ))
}

/// Heavy-ball momentum in packed form: after one step,
/// `p⁺ = μp + ∇L(Θ)` and `θ⁺ = θ - η p⁺`.
pub fn momentum_update<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &MomentumPackedCollection,
    eta: StepSize,
) -> Result<ParticleCollection> {
    momentum_update_raw(oracle, &x.base, x.mu, eta)
}

fn adam_update_raw<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &ParticleCollection,
    params: &AdamParams,
    t: u64,
    eta: StepSize,
) -> Result<ParticleCollection> {
    params.validate()?;
    if t == 0 {
        return Err(Error::Precondition("Adam step counter must be >= 1".into()));
    }
    let dt = packed_theta_dim(x, 3, oracle.dim())?;
    if let Some((i, _)) = x.rows().enumerate().find(|(_, r)| r[2 * dt..].iter().any(|&v| v < 0.0)) {
        return Err(Error::Precondition(format!(
            "second-moment block of particle {i} has a negative entry"
        )));
    }
    let theta = x.columns(0, dt)?;
    let g = checked_evaluate(oracle, &theta)?.grad;
    let AdamParams {
        beta1,
        beta2,
        epsilon,
        ordering,
    } = *params;
    let eta = eta.get();
    let exponent = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - beta1.powi(exponent);
    let c2 = 1.0 - beta2.powi(exponent);
    let mut out = vec![0.0; x.data().len()];
    for ((row, gi), o) in x.rows().zip(g.rows()).zip(out.chunks_exact_mut(3 * dt)) {
        let (m, v) = (&row[dt..2 * dt], &row[2 * dt..]);
        let (o_theta, rest) = o.split_at_mut(dt);
        let (o_m, o_v) = rest.split_at_mut(dt);
        for k in 0..dt {
            let (mk, vk) = match ordering {
                AdamOrdering::Paper => (m[k], v[k]),
                AdamOrdering::Standard => (
                    beta1 * m[k] + (1.0 - beta1) * gi[k],
                    beta2 * v[k] + (1.0 - beta2) * gi[k] * gi[k],
                ),
            };
            o_theta[k] = -(mk / c1) / (epsilon + (vk / c2).sqrt());
            o_m[k] = (1.0 - beta1) / eta * (gi[k] - m[k]);
            o_v[k] = (1.0 - beta2) / eta * (gi[k] * gi[k] - v[k]);
        }
    }
    Ok(ParticleCollection::from_raw_unchecked(
        x.dim(),
        out,
        x.multiplicity().map(<[u32]>::to_vec),
    ))
}

/// Packed stateless Adam. The θ-block is
/// `-(m/(1-β1^t)) / (ε + sqrt(v/(1-β2^t)))`, the moment blocks relax towards
/// `g` and `g²` at rates `(1-β1)/η` and `(1-β2)/η`.
pub fn adam_update<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &AdamPackedCollection,
    eta: StepSize,
) -> Result<ParticleCollection> {
    adam_update_raw(oracle, &x.base, &x.params, x.t, eta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RuleKind {
    Gd,
    Momentum { mu: f64 },
    Adam(AdamParams),
}

impl RuleKind {
    /// Number of θ-width blocks in one packed particle.
    pub fn blocks(&self) -> usize {
        match self {
            RuleKind::Gd => 1,
            RuleKind::Momentum { .. } => 2,
            RuleKind::Adam(_) => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RuleKind::Gd => "gd",
            RuleKind::Momentum { .. } => "momentum",
            RuleKind::Adam(_) => "adam",
        }
    }

    /// Packs a neuron collection with zeroed optimizer state.
    pub fn pack(&self, theta: &ParticleCollection) -> Result<ParticleCollection> {
        match self {
            RuleKind::Gd => Ok(theta.clone()),
            RuleKind::Momentum { mu } => Ok(MomentumPackedCollection::init(theta, *mu)?.base),
            RuleKind::Adam(p) => Ok(AdamPackedCollection::init(theta, *p)?.base),
        }
    }

    /// The neuron positions (θ-blocks) of a packed collection.
    pub fn theta(&self, x: &ParticleCollection) -> Result<ParticleCollection> {
        match self {
            RuleKind::Gd => Ok(x.clone()),
            _ => {
                let b = self.blocks();
                if !x.dim().is_multiple_of(b) {
                    return Err(Error::Dimension(format!(
                        "packed width {} not divisible into {b} blocks",
                        x.dim()
                    )));
                }
                x.columns(0, x.dim() / b)
            }
        }
    }
}

/// A rule bound to a loss, step size and step counter: `U^{(t)}`.
pub struct Rule<'a, O: GradientOracle + ?Sized> {
    pub oracle: &'a O,
    pub kind: RuleKind,
    pub eta: StepSize,
    pub t: u64,
}

impl<'a, O: GradientOracle + ?Sized> Rule<'a, O> {
    pub fn new(oracle: &'a O, kind: RuleKind, eta: StepSize) -> Self {
        Self {
            oracle,
            kind,
            eta,
            t: 1,
        }
    }

    pub fn at_step(mut self, t: u64) -> Self {
        self.t = t;
        self
    }
}

impl<O: GradientOracle + ?Sized> UpdateRule for Rule<'_, O> {
    fn update(&self, x: &ParticleCollection) -> Result<ParticleCollection> {
        match &self.kind {
            RuleKind::Gd => gd_update(self.oracle, x),
            RuleKind::Momentum { mu } => momentum_update_raw(self.oracle, x, *mu, self.eta),
            RuleKind::Adam(p) => adam_update_raw(self.oracle, x, p, self.t, self.eta),
        }
    }
}

/// JSON rule selection: `{"rule": "gd"|"momentum"|"adam", "eta": ..., ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    pub rule: String,
    pub eta: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub adam_ordering: AdamOrdering,
}

fn default_mu() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl RuleConfig {
    pub fn kind(&self) -> Result<RuleKind> {
        match self.rule.as_str() {
            "gd" => Ok(RuleKind::Gd),
            "momentum" => {
                if !(0.0..1.0).contains(&self.mu) {
                    return Err(Error::Config(format!(
                        "momentum mu must lie in [0, 1), got {}",
                        self.mu
                    )));
                }
                Ok(RuleKind::Momentum { mu: self.mu })
            }
            "adam" => {
                let p = AdamParams {
                    beta1: self.beta1,
                    beta2: self.beta2,
                    epsilon: self.epsilon,
                    ordering: self.adam_ordering,
                };
                p.validate().map_err(|e| Error::Config(e.to_string()))?;
                Ok(RuleKind::Adam(p))
            }
            other => Err(Error::Config(format!(
                "unknown rule {other:?}; expected gd, momentum or adam"
            ))),
        }
    }

    pub fn step_size(&self) -> Result<StepSize> {
        StepSize::new(self.eta).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivarianceReport {
    pub trials: usize,
    /// Largest `‖U(PX) - P·U(X)‖∞` over the tried permutations.
    pub max_deviation: f64,
}

impl EquivarianceReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_deviation <= tol
    }
}

/// Checks `U(PX) = P·U(X)` for the given permutations.
pub fn check_equivariance_with<R: UpdateRule + ?Sized>(
    rule: &R,
    x: &ParticleCollection,
    perms: &[Permutation],
) -> Result<EquivarianceReport> {
    let ux = rule.update(x)?;
    let mut max_deviation = 0.0f64;
    for p in perms {
        let lhs = rule.update(&apply_permutation(p, x)?)?;
        let rhs = apply_permutation(p, &ux)?;
        let dev = lhs
            .data()
            .iter()
            .zip(rhs.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        max_deviation = max_deviation.max(dev);
    }
    Ok(EquivarianceReport {
        trials: perms.len(),
        max_deviation,
    })
}

/// P1 checker over `trials` seeded random permutations.
pub fn check_equivariance<R: UpdateRule + ?Sized>(
    rule: &R,
    x: &ParticleCollection,
    trials: usize,
    seed: u64,
) -> Result<EquivarianceReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Permutation> = (0..trials).map(|_| Permutation::random(x.count(), &mut rng)).collect();
    check_equivariance_with(rule, x, &perms)
}

/// Empirical lower bounds on the continuity constant of a rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityEstimate {
    /// `max_{i≠j} ‖U_i - U_j‖ / ‖x_i - x_j‖`.
    pub k_pairwise: f64,
    /// `max ‖U(X+Δ) - U(X)‖ / ‖Δ‖` over sampled two-particle perturbations.
    pub k_perturb: f64,
    /// `max 2·sup_i ‖U_i(X+Δ) - U_i(X)‖ / ‖Δ‖` over the same perturbations.
    pub k_sup_entry: f64,
    /// Set when every pair of particles coincides.
    pub degenerate: bool,
}

/// `max_{i≠j, d_ij>0} ‖U_i - U_j‖ / d_ij` for a given update; `None` when all
/// particles coincide.
pub fn pairwise_ratio(x: &ParticleCollection, u: &ParticleCollection) -> Result<Option<f64>> {
    x.check_same_shape(u, "pairwise_ratio")?;
    let mut best: Option<f64> = None;
    for i in 0..x.count() {
        for j in i + 1..x.count() {
            let d = sq_dist(x.row(i), x.row(j));
            if d > 0.0 {
                let r = (sq_dist(u.row(i), u.row(j)) / d).sqrt();
                best = Some(best.map_or(r, |b| b.max(r)));
            }
        }
    }
    Ok(best)
}

pub fn default_radius(x: &ParticleCollection) -> f64 {
    1e-3 * (1.0 + x.mean_row_norm())
}

/// Estimates the three continuity constants. Perturbations touch two
/// particles antisymmetrically (`Δ_j = -Δ_i`), the shape of `X - PX` for a
/// transposition, with norm drawn from `[radius/10, radius]`.
pub fn estimate_continuity<R: UpdateRule + ?Sized>(
    rule: &R,
    x: &ParticleCollection,
    perturbations: usize,
    radius: f64,
    seed: u64,
) -> Result<ContinuityEstimate> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    let n = x.count();
    let dim = x.dim();
    let ux = rule.update(x)?;
    let pair = pairwise_ratio(x, &ux)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k_perturb = 0.0f64;
    let mut k_sup_entry = 0.0f64;
    for _ in 0..perturbations {
        let i = rng.random_range(0..n);
        let j = if n > 1 {
            let j = rng.random_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        } else {
            i
        };
        let mut delta: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let touched = if i == j { 1.0 } else { 2.0f64.sqrt() };
        let target = radius * rng.random_range(0.1..=1.0);
        for v in &mut delta {
            *v *= target / (norm * touched);
        }
        let mut data = x.data().to_vec();
        for k in 0..dim {
            data[i * dim + k] += delta[k];
            if j != i {
                data[j * dim + k] -= delta[k];
            }
        }
        let xp = ParticleCollection::new(dim, data)?;
        // measure the realised perturbation, not the nominal one
        let dnorm = sq_dist(xp.data(), x.data()).sqrt();
        if dnorm == 0.0 {
            continue;
        }
        let up = rule.update(&xp)?;
        let total = sq_dist(up.data(), ux.data()).sqrt();
        let sup = up
            .rows()
            .zip(ux.rows())
            .map(|(a, b)| sq_dist(a, b))
            .fold(0.0f64, f64::max)
            .sqrt();
        k_perturb = k_perturb.max(total / dnorm);
        k_sup_entry = k_sup_entry.max(2.0 * sup / dnorm);
    }
    Ok(ContinuityEstimate {
        k_pairwise: pair.unwrap_or(0.0),
        k_perturb,
        k_sup_entry,
        degenerate: pair.is_none(),
    })
}
