//! Seeded samplers for structured initial neuron clouds and isometric
//! embedding into neuron space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::ParticleCollection;

pub const MAX_PROPOSALS: usize = 1_000_000;
/// Residual accepted for projected genus-2 samples.
pub const GENUS2_RESIDUAL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    Circle,
    DisjointCircles,
    /// Planar region with two circular holes; Betti (1, 2, 0).
    AnnulusTwoHoles,
    Sphere,
    Torus,
    DisjointTori,
    Genus2,
}

impl ManifoldKind {
    pub fn ambient_dim(self) -> usize {
        match self {
            Self::Circle | Self::DisjointCircles | Self::AnnulusTwoHoles => 2,
            _ => 3,
        }
    }

    /// Betti numbers of the underlying space.
    pub fn expected_betti(self) -> (usize, usize, usize) {
        match self {
            Self::Circle => (1, 1, 0),
            Self::DisjointCircles => (2, 2, 0),
            Self::AnnulusTwoHoles => (1, 2, 0),
            Self::Sphere => (1, 0, 1),
            Self::Torus => (1, 2, 1),
            Self::DisjointTori => (2, 4, 2),
            Self::Genus2 => (1, 4, 1),
        }
    }
}

/// What to sample. Parameters not used by `kind` are ignored; missing ones
/// take the defaults listed on each accessor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Distance between the centers of the two copies in disjoint variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub major_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minor_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semi_axes: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hole_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hole_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

impl ManifoldSpec {
    pub fn new(kind: ManifoldKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            seed,
            radius: None,
            separation: None,
            major_radius: None,
            minor_radius: None,
            semi_axes: None,
            hole_radius: None,
            hole_offset: None,
            s: None,
            t: None,
        }
    }

    /// Circle / sphere radius, default 1.
    pub fn radius(&self) -> f64 {
        self.radius.unwrap_or(1.0)
    }

    /// Default 4 for circles, 8 for tori.
    pub fn separation(&self) -> f64 {
        self.separation.unwrap_or(match self.kind {
            ManifoldKind::DisjointTori => 8.0,
            _ => 4.0,
        })
    }

    /// Torus `R`, default 2.
    pub fn major_radius(&self) -> f64 {
        self.major_radius.unwrap_or(2.0)
    }

    /// Torus `r`, default 1.
    pub fn minor_radius(&self) -> f64 {
        self.minor_radius.unwrap_or(1.0)
    }

    /// Outer ellipse of the two-hole region, default (4, 2.2).
    pub fn semi_axes(&self) -> [f64; 2] {
        self.semi_axes.unwrap_or([4.0, 2.2])
    }

    /// Default 1.4.
    pub fn hole_radius(&self) -> f64 {
        self.hole_radius.unwrap_or(1.4)
    }

    /// Holes are centered at `(±hole_offset, 0)`, default 1.9.
    pub fn hole_offset(&self) -> f64 {
        self.hole_offset.unwrap_or(1.9)
    }

    /// Genus-2 constants, defaults s = 36, t = 0.04.
    pub fn genus2_constants(&self) -> (f64, f64) {
        (self.s.unwrap_or(36.0), self.t.unwrap_or(0.04))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let positive = [
            ("radius", self.radius()),
            ("separation", self.separation()),
            ("major_radius", self.major_radius()),
            ("minor_radius", self.minor_radius()),
            ("semi_axes[0]", self.semi_axes()[0]),
            ("semi_axes[1]", self.semi_axes()[1]),
            ("hole_radius", self.hole_radius()),
            ("s", self.genus2_constants().0),
            ("t", self.genus2_constants().1),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.hole_offset().is_finite() {
            return Err(Error::InvalidArgument("hole_offset must be finite".into()));
        }
        Ok(())
    }
}

fn gaussian3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ]
}

fn unit_sphere_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let g = gaussian3(rng);
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if norm > 1e-12 {
            return [g[0] / norm, g[1] / norm, g[2] / norm];
        }
    }
}

fn torus_point(rng: &mut ChaCha8Rng, big_r: f64, small_r: f64) -> [f64; 3] {
    let u = rng.random_range(0.0..std::f64::consts::TAU);
    let v = rng.random_range(0.0..std::f64::consts::TAU);
    let ring = big_r + small_r * v.cos();
    [ring * u.cos(), ring * u.sin(), small_r * v.sin()]
}

/// `((x²−1)x² + y²)² + z²/s − t`.
pub fn genus2_implicit(p: [f64; 3], s: f64, t: f64) -> f64 {
    let [x, y, z] = p;
    let g = (x * x - 1.0) * x * x + y * y;
    g * g + z * z / s - t
}

fn genus2_gradient(p: [f64; 3], s: f64) -> [f64; 3] {
    let [x, y, z] = p;
    let g = (x * x - 1.0) * x * x + y * y;
    [2.0 * g * (4.0 * x * x * x - 2.0 * x), 2.0 * g * 2.0 * y, 2.0 * z / s]
}

/// Newton projection along the gradient onto the zero set.
fn project_genus2(mut p: [f64; 3], s: f64, t: f64) -> Option<[f64; 3]> {
    let start = p;
    for _ in 0..60 {
        let f = genus2_implicit(p, s, t);
        if f.abs() <= GENUS2_RESIDUAL {
            let moved = ((p[0] - start[0]).powi(2) + (p[1] - start[1]).powi(2) + (p[2] - start[2]).powi(2)).sqrt();
            return (moved < 0.5).then_some(p);
        }
        let g = genus2_gradient(p, s);
        let gg = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
        if gg < 1e-14 {
            return None;
        }
        for k in 0..3 {
            p[k] -= f * g[k] / gg;
        }
    }
    None
}

fn genus2_bounds(s: f64, t: f64) -> [f64; 3] {
    let root_t = t.sqrt();
    let x_max = ((1.0 + (1.0 + 4.0 * root_t).sqrt()) / 2.0).sqrt();
    let y_max = (root_t + 0.25).sqrt();
    let z_max = (s * t).sqrt();
    [x_max * 1.05, y_max * 1.05, z_max * 1.05]
}

/// Draws `spec.n` points on the named manifold.
pub fn sample(spec: &ManifoldSpec) -> Result<ParticleCollection> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let dim = spec.kind.ambient_dim();
    let mut data = Vec::with_capacity(n * dim);
    match spec.kind {
        ManifoldKind::Circle | ManifoldKind::DisjointCircles => {
            let r = spec.radius();
            let half = spec.separation() / 2.0;
            for i in 0..n {
                let cx = match spec.kind {
                    ManifoldKind::Circle => 0.0,
                    _ if i < n.div_ceil(2) => -half,
                    _ => half,
                };
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                data.extend_from_slice(&[cx + r * a.cos(), r * a.sin()]);
            }
        }
        ManifoldKind::AnnulusTwoHoles => {
            let [a, b] = spec.semi_axes();
            let (hr, off) = (spec.hole_radius(), spec.hole_offset());
            let mut proposals = 0;
            while data.len() < n * dim {
                proposals += 1;
                if proposals > MAX_PROPOSALS {
                    return Err(Error::Sampling(format!(
                        "two-hole region accepted {} of {n} points in {MAX_PROPOSALS} proposals",
                        data.len() / dim
                    )));
                }
                let x = rng.random_range(-a..a);
                let y = rng.random_range(-b..b);
                let inside = (x / a).powi(2) + (y / b).powi(2) <= 1.0;
                let in_hole = (x - off).hypot(y) < hr || (x + off).hypot(y) < hr;
                if inside && !in_hole {
                    data.extend_from_slice(&[x, y]);
                }
            }
        }
        ManifoldKind::Sphere => {
            let r = spec.radius();
            for _ in 0..n {
                let p = unit_sphere_point(&mut rng);
                data.extend(p.iter().map(|v| v * r));
            }
        }
        ManifoldKind::Torus | ManifoldKind::DisjointTori => {
            let (big, small) = (spec.major_radius(), spec.minor_radius());
            let half = spec.separation() / 2.0;
            for i in 0..n {
                let cx = match spec.kind {
                    ManifoldKind::Torus => 0.0,
                    _ if i < n.div_ceil(2) => -half,
                    _ => half,
                };
                let p = torus_point(&mut rng, big, small);
                data.extend_from_slice(&[p[0] + cx, p[1], p[2]]);
            }
        }
        ManifoldKind::Genus2 => {
            let (s, t) = spec.genus2_constants();
            let bounds = genus2_bounds(s, t);
            let mut proposals = 0;
            while data.len() < n * dim {
                proposals += 1;
                if proposals > MAX_PROPOSALS {
                    return Err(Error::Sampling(format!(
                        "genus-2 projection accepted {} of {n} points in {MAX_PROPOSALS} proposals",
                        data.len() / dim
                    )));
                }
                let p = [
                    rng.random_range(-bounds[0]..bounds[0]),
                    rng.random_range(-bounds[1]..bounds[1]),
                    rng.random_range(-bounds[2]..bounds[2]),
                ];
                if let Some(q) = project_genus2(p, s, t) {
                    data.extend_from_slice(&q);
                }
            }
        }
    }
    ParticleCollection::new(dim, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Random orthonormal frame.
    #[default]
    Frame,
    /// Coordinates copied into the leading slots, the rest zero.
    ZeroPad,
}

/// `target_dim × dim` matrix with orthonormal columns, column-major.
pub fn random_frame(target_dim: usize, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if target_dim < dim {
        return Err(Error::Dimension(format!(
            "cannot embed dimension {dim} into {target_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..target_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        // two Gram–Schmidt passes
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    Ok(cols.concat())
}

/// Isometric embedding of a cloud into `target_dim` dimensions.
pub fn embed(points: &ParticleCollection, target_dim: usize, seed: u64) -> Result<ParticleCollection> {
    embed_with(points, target_dim, seed, EmbedMode::Frame)
}

pub fn embed_with(
    points: &ParticleCollection,
    target_dim: usize,
    seed: u64,
    mode: EmbedMode,
) -> Result<ParticleCollection> {
    let dim = points.dim();
    if target_dim < dim {
        return Err(Error::Dimension(format!(
            "cannot embed dimension {dim} into {target_dim}"
        )));
    }
    let mut data = vec![0.0; points.count() * target_dim];
    match mode {
        EmbedMode::ZeroPad => {
            for (i, row) in points.rows().enumerate() {
                data[i * target_dim..i * target_dim + dim].copy_from_slice(row);
            }
        }
        EmbedMode::Frame => {
            let frame = random_frame(target_dim, dim, seed)?;
            for (i, row) in points.rows().enumerate() {
                let out = &mut data[i * target_dim..(i + 1) * target_dim];
                for (c, &x) in row.iter().enumerate() {
                    let col = &frame[c * target_dim..(c + 1) * target_dim];
                    out.iter_mut().zip(col).for_each(|(o, q)| *o += x * q);
                }
            }
        }
    }
    let embedded = ParticleCollection::new(target_dim, data)?;
    Ok(match points.multiplicity() {
        Some(m) => embedded.with_multiplicity(m.to_vec())?,
        None => embedded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{measure_betti, TopologyOptions};

    #[test]
    fn sphere_points_have_unit_norm() {
        let pts = sample(&ManifoldSpec::new(ManifoldKind::Sphere, 4096, 1)).unwrap();
        assert_eq!((pts.count(), pts.dim()), (4096, 3));
        for row in pts.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn torus_satisfies_parametric_identity() {
        let mut spec = ManifoldSpec::new(ManifoldKind::Torus, 2000, 2);
        spec.minor_radius = Some(0.5);
        let pts = sample(&spec).unwrap();
        for p in pts.rows() {
            let lhs = (p[0].hypot(p[1]) - 2.0).powi(2) + p[2] * p[2];
            assert!((lhs - 0.25).abs() <= 1e-9);
        }
    }

    #[test]
    fn genus2_residual_is_small() {
        let spec = ManifoldSpec::new(ManifoldKind::Genus2, 500, 3);
        let pts = sample(&spec).unwrap();
        for p in pts.rows() {
            assert!(genus2_implicit([p[0], p[1], p[2]], 36.0, 0.04).abs() <= 1e-6);
        }
    }

    #[test]
    fn two_hole_region_avoids_holes() {
        let spec = ManifoldSpec::new(ManifoldKind::AnnulusTwoHoles, 1000, 4);
        let pts = sample(&spec).unwrap();
        for p in pts.rows() {
            assert!((p[0] / 4.0).powi(2) + (p[1] / 2.2).powi(2) <= 1.0);
            assert!((p[0] - 1.9).hypot(p[1]) >= 1.4 && (p[0] + 1.9).hypot(p[1]) >= 1.4);
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        for kind in [
            ManifoldKind::Circle,
            ManifoldKind::DisjointCircles,
            ManifoldKind::AnnulusTwoHoles,
            ManifoldKind::Sphere,
            ManifoldKind::Torus,
            ManifoldKind::DisjointTori,
            ManifoldKind::Genus2,
        ] {
            let spec = ManifoldSpec::new(kind, 50, 9);
            assert_eq!(sample(&spec).unwrap(), sample(&spec).unwrap(), "{kind:?}");
            let other = ManifoldSpec::new(kind, 50, 10);
            assert_ne!(sample(&spec).unwrap(), sample(&other).unwrap(), "{kind:?}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(sample(&ManifoldSpec::new(ManifoldKind::Circle, 0, 0)).is_err());
        let mut spec = ManifoldSpec::new(ManifoldKind::Sphere, 10, 0);
        spec.radius = Some(-1.0);
        assert!(sample(&spec).is_err());
        let mut spec = ManifoldSpec::new(ManifoldKind::AnnulusTwoHoles, 10, 0);
        spec.hole_radius = Some(10.0);
        assert!(matches!(sample(&spec), Err(Error::Sampling(_))));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec: ManifoldSpec =
            serde_json::from_str(r#"{"kind":"torus","n":10,"seed":3,"minor_radius":0.5}"#).unwrap();
        assert_eq!(spec.kind, ManifoldKind::Torus);
        assert_eq!(spec.minor_radius(), 0.5);
        assert_eq!(spec.major_radius(), 2.0);
        let back: ManifoldSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<ManifoldSpec>(r#"{"kind":"torus","n":10,"bogus":1}"#).is_err());
    }

    fn max_distance_change(a: &ParticleCollection, b: &ParticleCollection) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..a.count() {
            for j in i + 1..a.count() {
                let da = crate::particles::sq_dist(a.row(i), a.row(j)).sqrt();
                let db = crate::particles::sq_dist(b.row(i), b.row(j)).sqrt();
                worst = worst.max((da - db).abs());
            }
        }
        worst
    }

    #[test]
    fn embedding_preserves_distances() {
        let pts = sample(&ManifoldSpec::new(ManifoldKind::Sphere, 200, 5)).unwrap();
        let same = embed(&pts, 3, 1).unwrap();
        assert!(max_distance_change(&pts, &same) <= 1e-9);
        let big = embed(&pts, 794, 1).unwrap();
        assert_eq!(big.dim(), 794);
        assert!(max_distance_change(&pts, &big) <= 1e-9);
        let padded = embed_with(&pts, 10, 0, EmbedMode::ZeroPad).unwrap();
        assert_eq!(max_distance_change(&pts, &padded), 0.0);
        assert!(matches!(embed(&big, 3, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn frame_columns_are_orthonormal() {
        let f = random_frame(50, 3, 7).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..50).map(|k| f[a * 50 + k] * f[b * 50 + k]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_clouds_have_expected_topology() {
        let opts = TopologyOptions::default();
        for (kind, n) in [
            (ManifoldKind::Circle, 200),
            (ManifoldKind::DisjointCircles, 300),
            (ManifoldKind::AnnulusTwoHoles, 300),
            (ManifoldKind::Sphere, 600),
            (ManifoldKind::Torus, 600),
        ] {
            let pts = sample(&ManifoldSpec::new(kind, n, 11)).unwrap();
            let m = measure_betti(&pts, &opts).unwrap();
            assert_eq!(m.profile.triple(), kind.expected_betti(), "{kind:?}");
        }
    }

    #[test]
    fn betti_survives_embedding() {
        let pts = sample(&ManifoldSpec::new(ManifoldKind::Sphere, 200, 12)).unwrap();
        let opts = TopologyOptions::default();
        let a = measure_betti(&pts, &opts).unwrap().profile;
        let b = measure_betti(&embed(&pts, 40, 2).unwrap(), &opts).unwrap().profile;
        assert_eq!(a.triple(), b.triple());
    }
}
