//! Checks of the topology-preservation bounds over recorded trajectories.
//!
//! The global continuity constant is never observable, so every check takes
//! per-step estimates: the pairwise constant recovered from the trajectory
//! itself for the distance sandwich, and the Hessian sharpness to decide
//! whether a step was sub-critical (`η·k̂ < 1`).

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::{sq_dist, step, ParticleCollection, StepSize};
use crate::rules::{GradientOracle, Rule, RuleKind, UpdateRule};
use crate::topology::UnionFind;

/// Absolute distance under which two particles count as coincident.
pub const COINCIDENCE_TOL: f64 = 1e-9;
pub const MERGE_HYSTERESIS: f64 = 10.0;
pub const JACOBIAN_TOL: f64 = 1e-3;

/// A step-dependent update rule `t ↦ U^{(t)}`, with `t` starting at 1.
pub trait Dynamics: Sync {
    fn update_at(&self, t: u64, x: &ParticleCollection) -> Result<ParticleCollection>;
}

impl<F> Dynamics for F
where
    F: Fn(u64, &ParticleCollection) -> Result<ParticleCollection> + Sync,
{
    fn update_at(&self, t: u64, x: &ParticleCollection) -> Result<ParticleCollection> {
        self(t, x)
    }
}

/// The built-in rules as [`Dynamics`].
pub struct RuleDynamics<'a, O: GradientOracle + ?Sized> {
    pub oracle: &'a O,
    pub kind: RuleKind,
    pub eta: StepSize,
}

impl<O: GradientOracle + ?Sized> Dynamics for RuleDynamics<'_, O> {
    fn update_at(&self, t: u64, x: &ParticleCollection) -> Result<ParticleCollection> {
        Rule::new(self.oracle, self.kind, self.eta).at_step(t).update(x)
    }
}

/// States `x_0, x_1, …` of a run with a fixed step size. `steps[k]` is the
/// step index of `states[k]`; gaps are allowed and treated as one step of
/// size `η·gap`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub eta: f64,
    pub steps: Vec<usize>,
    pub states: Vec<ParticleCollection>,
}

impl Trajectory {
    pub fn new(eta: f64, steps: Vec<usize>, states: Vec<ParticleCollection>) -> Result<Self> {
        if steps.len() != states.len() {
            return Err(Error::Dimension(format!(
                "{} step labels for {} states",
                steps.len(),
                states.len()
            )));
        }
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("trajectory steps must increase".into()));
        }
        if let Some(first) = states.first() {
            for s in &states[1..] {
                first.check_same_shape(s, "trajectory")?;
            }
        }
        Ok(Self { eta, steps, states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Effective step size between `states[k]` and `states[k + 1]`.
    fn interval_eta(&self, k: usize) -> f64 {
        self.eta * (self.steps[k + 1] - self.steps[k]) as f64
    }

    /// The same trajectory restricted to the leading `width` columns.
    pub fn columns(&self, width: usize) -> Result<Self> {
        let states = self.states.iter().map(|s| s.columns(0, width)).collect::<Result<_>>()?;
        Ok(Self {
            eta: self.eta,
            steps: self.steps.clone(),
            states,
        })
    }
}

/// Runs `steps` updates `x ← x + η U^{(t)}(x)` from `x0`.
pub fn simulate<D: Dynamics + ?Sized>(
    dynamics: &D,
    x0: &ParticleCollection,
    steps: usize,
    eta: StepSize,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    for t in 1..=steps {
        let x = states.last().expect("non-empty");
        let u = dynamics.update_at(t as u64, x)?;
        states.push(step(x, &u, eta)?);
    }
    Trajectory::new(eta.get(), (0..=steps).collect(), states)
}

fn find_duplicate(x: &ParticleCollection) -> Option<(usize, usize)> {
    for i in 0..x.count() {
        for j in i + 1..x.count() {
            if x.row(i) == x.row(j) {
                return Some((i, j));
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuplicateDrift {
    pub pair: (usize, usize),
    /// Largest distance reached by the duplicated pair.
    pub drift: f64,
}

/// Runs the dynamics from a collection containing two identical particles and
/// reports how far apart they drift. Particle 0 is duplicated (appended) if
/// `x0` has no identical rows.
pub fn check_well_definedness<D: Dynamics + ?Sized>(
    dynamics: &D,
    x0: &ParticleCollection,
    steps: usize,
    eta: StepSize,
) -> Result<DuplicateDrift> {
    let (x0, pair) = match find_duplicate(x0) {
        Some(pair) => (x0.clone(), pair),
        None => {
            if x0.count() == 0 {
                return Err(Error::InvalidArgument("empty collection".into()));
            }
            let mut data = x0.data().to_vec();
            data.extend_from_slice(x0.row(0));
            let mut x = ParticleCollection::new(x0.dim(), data)?;
            if let Some(m) = x0.multiplicity() {
                let mut m = m.to_vec();
                m.push(m[0]);
                x = x.with_multiplicity(m)?;
            }
            (x, (0, x0.count()))
        }
    };
    let mut x = x0;
    let mut drift = 0.0f64;
    for t in 1..=steps {
        let u = dynamics.update_at(t as u64, &x)?;
        x = step(&x, &u, eta)?;
        drift = drift.max(sq_dist(x.row(pair.0), x.row(pair.1)).sqrt());
    }
    Ok(DuplicateDrift { pair, drift })
}

/// `max ‖U_i − U_j‖ / d_ij` for each interval, with `U` recovered from the
/// trajectory as `(x' − x)/η`. `None` where all particles coincide.
pub fn pairwise_k_series(traj: &Trajectory) -> Vec<Option<f64>> {
    (0..traj.len().saturating_sub(1))
        .map(|k| {
            let (x, y) = (&traj.states[k], &traj.states[k + 1]);
            let eta = traj.interval_eta(k);
            let mut best: Option<f64> = None;
            for i in 0..x.count() {
                for j in i + 1..x.count() {
                    let d = sq_dist(x.row(i), x.row(j)).sqrt();
                    if d > 0.0 {
                        let du: f64 = x
                            .row(i)
                            .iter()
                            .zip(x.row(j))
                            .zip(y.row(i).iter().zip(y.row(j)))
                            .map(|((a, b), (c, e))| ((c - a) - (e - b)).powi(2))
                            .sum::<f64>()
                            .sqrt()
                            / eta;
                        let r = du / d;
                        best = Some(best.map_or(r, |b| b.max(r)));
                    }
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairViolation {
    pub step: usize,
    pub i: usize,
    pub j: usize,
    pub ratio: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBoundReport {
    pub intervals_checked: usize,
    pub violations: Vec<PairViolation>,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// `max (|r − 1| − η·k)` over pairs and intervals.
    pub max_pair_ratio_excess: f64,
    /// `max (|r − 1|·d − η‖U_i − U_j‖)`; nonpositive up to rounding.
    pub max_identity_excess: f64,
    /// A violation occurred at an interval whose supplied `k` exceeds the
    /// Hessian estimate, so the bound was tested with a surrogate constant.
    pub inconclusive: bool,
}

/// Tests `1 − ηk − tol ≤ d'_ij/d_ij ≤ 1 + ηk + tol` for every pair with
/// `d_ij > 0` on every interval, `tol = 1e-9 + 1e-6·η·k`.
pub fn check_no_merge_split(
    traj: &Trajectory,
    k_per_step: &[f64],
    k_hessian: Option<&[f64]>,
) -> Result<PairBoundReport> {
    if traj.len() < 2 {
        return Err(Error::InvalidArgument("trajectory needs at least two states".into()));
    }
    let intervals = traj.len() - 1;
    if k_per_step.len() != intervals || k_hessian.is_some_and(|h| h.len() != intervals) {
        return Err(Error::Dimension(format!("expected {intervals} per-step constants")));
    }
    let mut report = PairBoundReport {
        intervals_checked: intervals,
        violations: Vec::new(),
        min_ratio: f64::INFINITY,
        max_ratio: 0.0,
        max_pair_ratio_excess: f64::NEG_INFINITY,
        max_identity_excess: f64::NEG_INFINITY,
        inconclusive: false,
    };
    for k in 0..intervals {
        let (x, y) = (&traj.states[k], &traj.states[k + 1]);
        let eta = traj.interval_eta(k);
        let ek = eta * k_per_step[k];
        let tol = 1e-9 + 1e-6 * ek;
        for i in 0..x.count() {
            for j in i + 1..x.count() {
                let d = sq_dist(x.row(i), x.row(j)).sqrt();
                if d == 0.0 {
                    continue;
                }
                let r = sq_dist(y.row(i), y.row(j)).sqrt() / d;
                report.min_ratio = report.min_ratio.min(r);
                report.max_ratio = report.max_ratio.max(r);
                report.max_pair_ratio_excess = report.max_pair_ratio_excess.max((r - 1.0).abs() - ek);
                let du: f64 = x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .zip(y.row(i).iter().zip(y.row(j)))
                    .map(|((a, b), (c, e))| ((c - a) - (e - b)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                report.max_identity_excess = report.max_identity_excess.max((r - 1.0).abs() * d - du);
                let (lower, upper) = (1.0 - ek - tol, 1.0 + ek + tol);
                if r < lower || r > upper {
                    report.violations.push(PairViolation {
                        step: traj.steps[k],
                        i,
                        j,
                        ratio: r,
                        lower,
                        upper,
                    });
                    if k_hessian.is_some_and(|h| k_per_step[k] > h[k]) {
                        report.inconclusive = true;
                    }
                }
            }
        }
    }
    if !report.min_ratio.is_finite() {
        report.min_ratio = 1.0;
        report.max_ratio = 1.0;
    }
    if !report.max_pair_ratio_excess.is_finite() {
        report.max_pair_ratio_excess = 0.0;
        report.max_identity_excess = 0.0;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEvent {
    pub step: usize,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub merge_tol: f64,
    pub merge_events: Vec<PairEvent>,
    /// Previously merged pairs later found farther apart than `merge_tol`.
    pub split_events: Vec<PairEvent>,
}

/// `1e-7` times the initial diameter.
pub fn default_merge_tol(traj: &Trajectory) -> f64 {
    traj.states.first().map_or(0.0, |x| 1e-7 * x.diameter())
}

/// Incremental merge/split detection over a sequence of clouds.
#[derive(Debug, Clone)]
pub struct MergeTracker {
    tol: f64,
    n: usize,
    armed: Vec<bool>,
    merged: Vec<bool>,
    report: InjectivityReport,
}

impl MergeTracker {
    pub fn new(n: usize, merge_tol: f64) -> Result<Self> {
        if !(merge_tol > 0.0) || !merge_tol.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "merge_tol must be positive, got {merge_tol}"
            )));
        }
        Ok(Self {
            tol: merge_tol,
            n,
            armed: vec![false; n * n],
            merged: vec![false; n * n],
            report: InjectivityReport {
                merge_tol,
                ..Default::default()
            },
        })
    }

    /// Feeds the cloud at `step`; returns the number of new merge events.
    pub fn observe(&mut self, step: usize, x: &ParticleCollection) -> Result<usize> {
        if x.count() != self.n {
            return Err(Error::Dimension(format!(
                "tracker expects {} particles, got {}",
                self.n,
                x.count()
            )));
        }
        let before = self.report.merge_events.len();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let d = sq_dist(x.row(i), x.row(j)).sqrt();
                let p = i * self.n + j;
                if d > MERGE_HYSTERESIS * self.tol {
                    self.armed[p] = true;
                }
                if self.merged[p] && d > self.tol {
                    self.merged[p] = false;
                    self.report.split_events.push(PairEvent { step, i, j });
                }
                if self.armed[p] && d < self.tol {
                    self.armed[p] = false;
                    self.merged[p] = true;
                    self.report.merge_events.push(PairEvent { step, i, j });
                }
            }
        }
        Ok(self.report.merge_events.len() - before)
    }

    pub fn report(&self) -> &InjectivityReport {
        &self.report
    }

    pub fn into_report(self) -> InjectivityReport {
        self.report
    }
}

/// Records a merge when a pair's distance drops below `merge_tol` after
/// having exceeded `10·merge_tol`, and a split when a merged pair moves
/// beyond `merge_tol` again.
pub fn check_injectivity(traj: &Trajectory, merge_tol: f64) -> Result<InjectivityReport> {
    let n = traj.states.first().map_or(0, ParticleCollection::count);
    let mut tracker = MergeTracker::new(n, merge_tol)?;
    for (x, &s) in traj.states.iter().zip(&traj.steps) {
        tracker.observe(s, x)?;
    }
    Ok(tracker.into_report())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianBand {
    pub min_sv: f64,
    pub max_sv: f64,
    pub lower: f64,
    pub upper: f64,
    pub within: bool,
    pub particles: Vec<usize>,
}

/// Singular values of the finite-difference Jacobian of the one-particle map
/// `y ↦ y + η·U_i(X with x_i := y)` at sampled particles, against the band
/// `[1 − η·k̂ − tol, 1 + η·k̂ + tol]`.
pub fn check_jacobian_svs<R: UpdateRule + ?Sized>(
    rule: &R,
    x: &ParticleCollection,
    eta: StepSize,
    k_hat: f64,
    samples: usize,
    seed: u64,
) -> Result<JacobianBand> {
    let ek = eta.get() * k_hat;
    if !(ek < 1.0) {
        return Err(Error::Precondition(format!(
            "eta * k_hat = {ek} is not below 1; the singular-value band does not apply"
        )));
    }
    let (n, dim) = (x.count(), x.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut particles = sample_indices(&mut rng, n, samples.min(n)).into_vec();
    particles.sort_unstable();
    let mut min_sv = f64::INFINITY;
    let mut max_sv = 0.0f64;
    for &i in &particles {
        let xi = x.row(i);
        let h = 1e-5 * (1.0 + xi.iter().map(|v| v * v).sum::<f64>().sqrt());
        let mut jac = DMatrix::<f64>::identity(dim, dim);
        for c in 0..dim {
            let shifted = |sign: f64| -> Result<Vec<f64>> {
                let mut data = x.data().to_vec();
                data[i * dim + c] += sign * h;
                let u = rule.update(&ParticleCollection::new(dim, data)?)?;
                Ok(u.row(i).to_vec())
            };
            let (up, down) = (shifted(1.0)?, shifted(-1.0)?);
            for r in 0..dim {
                jac[(r, c)] += eta.get() * (up[r] - down[r]) / (2.0 * h);
            }
        }
        let svs = jac.singular_values();
        min_sv = min_sv.min(svs.min());
        max_sv = max_sv.max(svs.max());
    }
    let (lower, upper) = (1.0 - ek - JACOBIAN_TOL, 1.0 + ek + JACOBIAN_TOL);
    Ok(JacobianBand {
        min_sv,
        max_sv,
        lower,
        upper,
        within: particles.is_empty() || (min_sv >= lower && max_sv <= upper),
        particles,
    })
}

/// Sorted total multiplicities of the coincidence classes of `x`.
pub fn multiplicity_histogram(x: &ParticleCollection) -> Vec<u64> {
    let n = x.count();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if sq_dist(x.row(i), x.row(j)).sqrt() <= COINCIDENCE_TOL {
                uf.union(i, j);
            }
        }
    }
    let mut totals: Vec<u64> = uf
        .groups()
        .iter()
        .map(|g| g.iter().map(|&i| u64::from(x.weight(i))).sum())
        .collect();
    totals.sort_unstable_by(|a, b| b.cmp(a));
    totals
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramChange {
    pub step: usize,
    /// `η·k̂` of the interval that produced the change.
    pub eta_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    /// No histogram change at any sub-critical interval.
    pub preserved: bool,
    pub first_failure: Option<usize>,
    pub changes: Vec<HistogramChange>,
    pub initial: Vec<u64>,
    pub last: Vec<u64>,
}

/// Tracks the multiplicity histogram of coincidence classes. Particles
/// without a multiplicity vector count once each. `eta_k[k]` classifies the
/// interval from `states[k]` to `states[k + 1]`.
pub fn check_measure_preservation(traj: &Trajectory, eta_k: &[f64]) -> Result<MeasureReport> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    if eta_k.len() + 1 != traj.len() {
        return Err(Error::Dimension(format!(
            "expected {} eta*k values, got {}",
            traj.len() - 1,
            eta_k.len()
        )));
    }
    let initial = multiplicity_histogram(&traj.states[0]);
    let mut prev = initial.clone();
    let mut changes = Vec::new();
    let mut first_failure = None;
    for (k, x) in traj.states.iter().enumerate().skip(1) {
        let with_weights = match (x.multiplicity(), traj.states[0].multiplicity()) {
            (None, Some(m)) => x.clone().with_multiplicity(m.to_vec())?,
            _ => x.clone(),
        };
        let hist = multiplicity_histogram(&with_weights);
        if hist != prev {
            let ek = eta_k[k - 1];
            changes.push(HistogramChange {
                step: traj.steps[k],
                eta_k: ek,
            });
            if ek < 1.0 && first_failure.is_none() {
                first_failure = Some(traj.steps[k]);
            }
        }
        prev = hist;
    }
    Ok(MeasureReport {
        preserved: first_failure.is_none(),
        first_failure,
        changes,
        initial,
        last: prev,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCheckReport {
    pub steps_checked: usize,
    pub max_equivariance_dev: Option<f64>,
    pub max_pair_ratio_excess: f64,
    pub max_identity_excess: f64,
    pub pair_bound_violations: usize,
    pub inconclusive: bool,
    pub merge_events: Vec<PairEvent>,
    pub split_events: Vec<PairEvent>,
    pub duplicate_drift: Option<f64>,
    pub multiplicity_histogram_ok: bool,
    pub histogram_changes: Vec<HistogramChange>,
    pub jacobian_sv_range: Option<(f64, f64)>,
}

/// Trajectory-only checks: the pair sandwich with the trajectory's own
/// pairwise constants, merges, drift of initially duplicated pairs, and the
/// multiplicity histogram. `eta_k` classifies intervals for the histogram
/// check; without it every interval counts as sub-critical.
pub fn check_trajectory(
    traj: &Trajectory,
    eta_k: Option<&[f64]>,
    merge_tol: Option<f64>,
) -> Result<TrajectoryCheckReport> {
    if traj.len() < 2 {
        return Err(Error::InvalidArgument("trajectory needs at least two states".into()));
    }
    let k: Vec<f64> = pairwise_k_series(traj).into_iter().map(|k| k.unwrap_or(0.0)).collect();
    let pairs = check_no_merge_split(traj, &k, None)?;
    let tol = merge_tol.unwrap_or_else(|| default_merge_tol(traj));
    let injectivity = if tol > 0.0 {
        check_injectivity(traj, tol)?
    } else {
        InjectivityReport::default()
    };
    let duplicate_drift = find_duplicate(&traj.states[0]).map(|(i, j)| {
        traj.states
            .iter()
            .map(|x| sq_dist(x.row(i), x.row(j)).sqrt())
            .fold(0.0, f64::max)
    });
    let zeros = vec![0.0; traj.len() - 1];
    let measure = check_measure_preservation(traj, eta_k.unwrap_or(&zeros))?;
    Ok(TrajectoryCheckReport {
        steps_checked: traj.len() - 1,
        max_equivariance_dev: None,
        max_pair_ratio_excess: pairs.max_pair_ratio_excess,
        max_identity_excess: pairs.max_identity_excess,
        pair_bound_violations: pairs.violations.len(),
        inconclusive: pairs.inconclusive,
        merge_events: injectivity.merge_events,
        split_events: injectivity.split_events,
        duplicate_drift,
        multiplicity_histogram_ok: measure.preserved,
        histogram_changes: measure.changes,
        jacobian_sv_range: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::quadratic::{IsotropicQuadratic, ParticleQuadratic};
    use crate::rules::AdamParams;

    fn gd<'a, O: GradientOracle>(oracle: &'a O, eta: f64) -> RuleDynamics<'a, O> {
        RuleDynamics {
            oracle,
            kind: RuleKind::Gd,
            eta: StepSize::new(eta).unwrap(),
        }
    }

    fn cloud(seed: u64, n: usize, dim: usize) -> ParticleCollection {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        ParticleCollection::new(dim, data).unwrap()
    }

    #[test]
    fn duplicates_do_not_drift_under_gd() {
        let q = ParticleQuadratic::diagonal(&[1.0, 3.0]);
        let eta = StepSize::new(0.1).unwrap();
        let r = check_well_definedness(&gd(&q, 0.1), &cloud(1, 5, 2), 100, eta).unwrap();
        assert_eq!(r.pair, (0, 5));
        assert_eq!(r.drift, 0.0);
    }

    #[test]
    fn duplicates_do_not_drift_under_packed_adam() {
        let q = ParticleQuadratic::diagonal(&[1.0, 3.0]);
        let eta = StepSize::new(0.01).unwrap();
        let kind = RuleKind::Adam(AdamParams::default());
        let x0 = kind.pack(&cloud(2, 4, 2)).unwrap();
        let dynamics = RuleDynamics { oracle: &q, kind, eta };
        let r = check_well_definedness(&dynamics, &x0, 100, eta).unwrap();
        assert!(r.drift <= 1e-12);
    }

    #[test]
    fn index_dependent_noise_is_detected() {
        let q = IsotropicQuadratic::new(2, 1.0);
        let noisy = |_t: u64, x: &ParticleCollection| -> Result<ParticleCollection> {
            let u = crate::rules::gd_update(&q, x)?;
            let data = u
                .data()
                .iter()
                .enumerate()
                .map(|(k, v)| v + 1e-3 * (k / x.dim()) as f64)
                .collect();
            ParticleCollection::new(x.dim(), data)
        };
        let eta = StepSize::new(0.1).unwrap();
        let r = check_well_definedness(&noisy, &cloud(3, 3, 2), 10, eta).unwrap();
        assert!(r.drift > 0.0);
    }

    #[test]
    fn subcritical_quadratic_respects_pair_bounds() {
        let lambda = 4.0;
        let q = ParticleQuadratic::diagonal(&[lambda, 1.0, 0.5]);
        let eta = 0.5 / lambda;
        let traj = simulate(&gd(&q, eta), &cloud(4, 6, 3), 20, StepSize::new(eta).unwrap()).unwrap();
        let k = vec![lambda; 20];
        let r = check_no_merge_split(&traj, &k, None).unwrap();
        assert!(r.violations.is_empty());
        assert!(r.min_ratio >= 1.0 - eta * lambda - 1e-12);
        assert!(r.max_identity_excess <= 1e-12);
    }

    #[test]
    fn eigen_aligned_pair_merges_at_critical_step() {
        let lambda = 2.0;
        let q = ParticleQuadratic::diagonal(&[lambda, 0.5]);
        let x0 = ParticleCollection::from_rows(&[[1.0, 0.3], [-1.0, 0.3]]).unwrap();
        let eta = 1.0 / lambda;
        let traj = simulate(&gd(&q, eta), &x0, 1, StepSize::new(eta).unwrap()).unwrap();
        let d = sq_dist(traj.states[1].row(0), traj.states[1].row(1)).sqrt();
        assert!(d <= 1e-12);
        let inj = check_injectivity(&traj, 1e-9).unwrap();
        assert_eq!(inj.merge_events, vec![PairEvent { step: 1, i: 0, j: 1 }]);
        assert!(inj.split_events.is_empty());
    }

    #[test]
    fn upper_bound_holds_with_trajectory_constants() {
        let q = ParticleQuadratic::diagonal(&[3.0, 1.0]);
        let eta = 0.9;
        let traj = simulate(&gd(&q, eta), &cloud(5, 5, 2), 5, StepSize::new(eta).unwrap()).unwrap();
        let k: Vec<f64> = pairwise_k_series(&traj).into_iter().map(Option::unwrap).collect();
        let r = check_no_merge_split(&traj, &k, None).unwrap();
        assert!(r.violations.is_empty());
        assert!(r.max_pair_ratio_excess <= 1e-12);
    }

    #[test]
    fn violation_against_surrogate_is_inconclusive() {
        let q = ParticleQuadratic::diagonal(&[3.0, 1.0]);
        let traj = simulate(&gd(&q, 0.1), &cloud(6, 4, 2), 2, StepSize::new(0.1).unwrap()).unwrap();
        let tiny = vec![1e-6; 2];
        let r = check_no_merge_split(&traj, &tiny, Some(&[1e-8, 1e-8])).unwrap();
        assert!(!r.violations.is_empty());
        assert!(r.inconclusive);
        let r = check_no_merge_split(&traj, &tiny, Some(&[3.0, 3.0])).unwrap();
        assert!(!r.inconclusive);
    }

    #[test]
    fn hysteresis_suppresses_flapping() {
        let rows = |d: f64| ParticleCollection::from_rows(&[[0.0], [d]]).unwrap();
        let traj = Trajectory::new(
            0.1,
            vec![0, 1, 2, 3, 4],
            vec![rows(20.0), rows(0.5), rows(1.5), rows(0.5), rows(5.0)],
        )
        .unwrap();
        let r = check_injectivity(&traj, 1.0).unwrap();
        assert_eq!(r.merge_events.len(), 1);
        assert_eq!(r.split_events.len(), 1);
        assert_eq!(r.split_events[0].step, 2);
    }

    #[test]
    fn jacobian_of_quadratic_is_i_minus_eta_h() {
        let q = ParticleQuadratic::diagonal(&[2.0, 1.0, 0.5]);
        let x = cloud(7, 5, 3);
        let eta = StepSize::new(0.25).unwrap();
        let rule = Rule::new(&q, RuleKind::Gd, eta);
        let band = check_jacobian_svs(&rule, &x, eta, 2.0, 5, 0).unwrap();
        assert!((band.min_sv - 0.5).abs() < 1e-6);
        assert!((band.max_sv - 0.875).abs() < 1e-6);
        assert!(band.within);
        let small = StepSize::new(1e-6).unwrap();
        let band = check_jacobian_svs(&Rule::new(&q, RuleKind::Gd, small), &x, small, 2.0, 5, 0).unwrap();
        assert!((band.min_sv - 1.0).abs() < 1e-5 && (band.max_sv - 1.0).abs() < 1e-5);
        assert!(matches!(
            check_jacobian_svs(&rule, &x, eta, 4.0, 5, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn histogram_is_constant_without_merges() {
        let q = IsotropicQuadratic::new(2, 1.0);
        let traj = simulate(&gd(&q, 0.1), &cloud(8, 6, 2), 10, StepSize::new(0.1).unwrap()).unwrap();
        let r = check_measure_preservation(&traj, &[0.1; 10]).unwrap();
        assert!(r.preserved);
        assert_eq!(r.initial, vec![1; 6]);
    }

    #[test]
    fn seeded_multiplicities_survive_small_steps() {
        let q = ParticleQuadratic::diagonal(&[2.0, 1.0]);
        let base = cloud(9, 3, 2).with_multiplicity(vec![3, 1, 1]).unwrap();
        let traj = simulate(&gd(&q, 0.1), &base, 20, StepSize::new(0.1).unwrap()).unwrap();
        let r = check_measure_preservation(&traj, &[0.2; 20]).unwrap();
        assert!(r.preserved);
        assert_eq!(r.initial, vec![3, 1, 1]);
        assert_eq!(r.last, vec![3, 1, 1]);
    }

    #[test]
    fn forced_merge_is_attributed_to_supercritical_step() {
        let lambda = 4.0;
        let q = IsotropicQuadratic::new(2, lambda);
        let base = cloud(10, 3, 2).with_multiplicity(vec![3, 1, 1]).unwrap();
        let eta = 1.0 / lambda;
        let traj = simulate(&gd(&q, eta), &base, 3, StepSize::new(eta).unwrap()).unwrap();
        let r = check_measure_preservation(&traj, &[1.0; 3]).unwrap();
        assert!(r.preserved);
        assert_eq!(r.changes.len(), 1);
        assert_eq!(r.changes[0].step, 1);
        assert_eq!(r.last, vec![5]);
        let r = check_measure_preservation(&traj, &[0.5; 3]).unwrap();
        assert_eq!(r.first_failure, Some(1));
    }

    #[test]
    fn trajectory_report_aggregates() {
        let q = ParticleQuadratic::diagonal(&[2.0, 1.0]);
        let mut rows: Vec<Vec<f64>> = cloud(11, 4, 2).rows().map(<[f64]>::to_vec).collect();
        rows.push(rows[1].clone());
        let x0 = ParticleCollection::from_rows(&rows).unwrap();
        let traj = simulate(&gd(&q, 0.1), &x0, 10, StepSize::new(0.1).unwrap()).unwrap();
        let r = check_trajectory(&traj, None, None).unwrap();
        assert_eq!(r.steps_checked, 10);
        assert_eq!(r.duplicate_drift, Some(0.0));
        assert_eq!(r.pair_bound_violations, 0);
        assert!(r.merge_events.is_empty());
        assert!(r.multiplicity_histogram_ok);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"steps_checked\":10"));
    }
}
