//! Vietoris–Rips complexes at a single scale and their Betti numbers.
//!
//! Ranks of the boundary maps are computed over GF(2) by reducing the
//! coboundary matrices dimension by dimension. A column whose simplex already
//! appeared as a pivot one dimension lower is known to reduce to zero and is
//! skipped ("clearing"), which removes most of the work for dense complexes.
//! [`betti_oracle`] recomputes the same numbers by a structurally different
//! route (union–find plus exact integer rank over ℚ) for small complexes.

use std::collections::HashMap;

use num_bigint::BigInt;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::{sq_dist, ParticleCollection};

/// Relative slack on the `d ≤ scale` edge test so that rigid motions of a
/// cloud cannot flip edge membership through rounding.
pub const SNAP_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_SIMPLEX_BUDGET: usize = 50_000_000;
pub const ORACLE_CAP: usize = 2000;
const ROOT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn diameter(&self) -> f64 {
        self.entries.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn pairwise_distances(points: &ParticleCollection) -> DistanceMatrix {
    let n = points.count();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| sq_dist(points.row(i), points.row(j)).sqrt())
                .collect()
        })
        .collect();
    let mut entries = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &d) in row.iter().enumerate() {
            let j = i + 1 + off;
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    DistanceMatrix { n, entries }
}

/// A quarter of the cloud diameter.
pub fn adaptive_scale(dm: &DistanceMatrix) -> Result<f64> {
    if dm.n < 2 {
        return Err(Error::DegenerateCloud(
            "adaptive scale needs at least two points".into(),
        ));
    }
    let diameter = dm.diameter();
    if diameter <= 0.0 {
        return Err(Error::DegenerateCloud("all points coincide".into()));
    }
    Ok(diameter / 4.0)
}

/// Sorted vertex tuples of one dimension, stored flat with stride `dim + 1`
/// in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SimplexList {
    width: usize,
    verts: Vec<u32>,
}

impl SimplexList {
    pub fn new(dim: usize) -> Self {
        Self {
            width: dim + 1,
            verts: Vec::new(),
        }
    }

    /// Builds a list from arbitrary tuples, sorting each tuple and the list.
    pub fn from_simplices(dim: usize, simplices: &[Vec<u32>]) -> Result<Self> {
        let mut sorted: Vec<Vec<u32>> = Vec::with_capacity(simplices.len());
        for s in simplices {
            if s.len() != dim + 1 {
                return Err(Error::MalformedComplex(format!("{s:?} is not a {dim}-simplex")));
            }
            let mut s = s.clone();
            s.sort_unstable();
            if s.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::MalformedComplex(format!("{s:?} repeats a vertex")));
            }
            sorted.push(s);
        }
        sorted.sort();
        sorted.dedup();
        Ok(Self {
            width: dim + 1,
            verts: sorted.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.verts.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.verts.is_empty()
    }

    pub fn get(&self, idx: usize) -> &[u32] {
        &self.verts[idx * self.width..(idx + 1) * self.width]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, u32> {
        self.verts.chunks_exact(self.width)
    }

    /// Position of `simplex` (sorted) in the list.
    pub fn index_of(&self, simplex: &[u32]) -> Option<usize> {
        let (mut lo, mut hi) = (0, self.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.get(mid).cmp(simplex) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(mid),
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RipsComplex {
    pub scale: f64,
    /// `simplices[k]` holds the k-simplices, `k = 0..=max_dim`.
    pub simplices: Vec<SimplexList>,
}

impl RipsComplex {
    /// Assembles a complex from explicit simplex lists (no closure check;
    /// [`betti_numbers`] rejects complexes missing a face).
    pub fn from_lists(scale: f64, simplices: Vec<SimplexList>) -> Self {
        Self { scale, simplices }
    }

    pub fn max_dim(&self) -> usize {
        self.simplices.len().saturating_sub(1)
    }

    pub fn n_points(&self) -> usize {
        self.simplices.first().map_or(0, SimplexList::len)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.simplices.iter().map(SimplexList::len).collect()
    }

    pub fn total(&self) -> usize {
        self.counts().iter().sum()
    }
}

fn edge_threshold(scale: f64) -> f64 {
    scale * (1.0 + SNAP_TOLERANCE)
}

struct Adjacency {
    words: usize,
    bits: Vec<u64>,
    higher: Vec<Vec<u32>>,
}

impl Adjacency {
    fn new(dm: &DistanceMatrix, scale: f64) -> Self {
        let n = dm.n;
        let words = n.div_ceil(64);
        let thr = edge_threshold(scale);
        let mut bits = vec![0u64; n * words];
        let mut higher = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if i != j && dm.get(i, j) <= thr {
                    bits[i * words + j / 64] |= 1 << (j % 64);
                    if j > i {
                        higher[i].push(j as u32);
                    }
                }
            }
        }
        Self { words, bits, higher }
    }

    #[inline]
    fn adjacent(&self, i: u32, j: u32) -> bool {
        let (i, j) = (i as usize, j as usize);
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }
}

fn expand(
    adj: &Adjacency,
    clique: &mut Vec<u32>,
    candidates: &[u32],
    max_dim: usize,
    out: &mut [Vec<u32>],
    count: &mut usize,
    budget: usize,
) -> Result<()> {
    for (idx, &u) in candidates.iter().enumerate() {
        clique.push(u);
        let dim = clique.len() - 1;
        out[dim].extend_from_slice(clique);
        *count += 1;
        if *count > budget {
            return Err(Error::SimplexBudget { budget });
        }
        if dim < max_dim {
            let next: Vec<u32> = candidates[idx + 1..]
                .iter()
                .copied()
                .filter(|&w| adj.adjacent(u, w))
                .collect();
            if !next.is_empty() {
                expand(adj, clique, &next, max_dim, out, count, budget)?;
            }
        }
        clique.pop();
    }
    Ok(())
}

pub fn build_rips(dm: &DistanceMatrix, scale: f64, max_dim: usize) -> Result<RipsComplex> {
    build_rips_with_budget(dm, scale, max_dim, DEFAULT_SIMPLEX_BUDGET)
}

/// Vertices, edges with `d ≤ scale`, and every clique of the edge graph up to
/// `max_dim + 1` vertices. Lists come out lexicographically sorted.
pub fn build_rips_with_budget(dm: &DistanceMatrix, scale: f64, max_dim: usize, budget: usize) -> Result<RipsComplex> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    if !(1..=3).contains(&max_dim) {
        return Err(Error::InvalidArgument(format!(
            "max_dim must be 1, 2 or 3, got {max_dim}"
        )));
    }
    let n = dm.n;
    if n > budget {
        return Err(Error::SimplexBudget { budget });
    }
    let adj = Adjacency::new(dm, scale);
    let mut simplices: Vec<SimplexList> = (0..=max_dim).map(SimplexList::new).collect();
    simplices[0].verts = (0..n as u32).collect();
    let mut total = n;
    // roots are expanded in parallel a chunk at a time and appended in root
    // order, which keeps the lists sorted and independent of the thread count
    let roots: Vec<usize> = (0..n).collect();
    for chunk in roots.chunks(ROOT_CHUNK) {
        let per_root: Vec<Result<Vec<Vec<u32>>>> = chunk
            .par_iter()
            .map(|&v| {
                let mut out = vec![Vec::new(); max_dim + 1];
                let mut count = 0usize;
                let mut clique = vec![v as u32];
                expand(&adj, &mut clique, &adj.higher[v], max_dim, &mut out, &mut count, budget)?;
                Ok(out)
            })
            .collect();
        for root in per_root {
            for (k, list) in root?.into_iter().enumerate().skip(1) {
                total += list.len() / (k + 1);
                if total > budget {
                    return Err(Error::SimplexBudget { budget });
                }
                simplices[k].verts.extend(list);
            }
        }
    }
    Ok(RipsComplex { scale, simplices })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BettiProfile {
    pub b0: usize,
    pub b1: usize,
    /// Exact when the complex reaches dimension 3; for a 2-dimensional
    /// complex this is the rank of the 2-cycle space.
    pub b2: usize,
    pub scale_used: f64,
    pub n_points: usize,
}

impl BettiProfile {
    pub fn triple(&self) -> (usize, usize, usize) {
        (self.b0, self.b1, self.b2)
    }

    /// `b0,b1,b2,scale,n_points`.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.b0, self.b1, self.b2, self.scale_used, self.n_points
        )
    }
}

/// Simplex counts and GF(2) boundary ranks of a complex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HomologyRanks {
    /// `counts[k]` = number of k-simplices.
    pub counts: Vec<usize>,
    /// `boundary_ranks[k]` = rank of ∂_k : C_k → C_{k-1}; `boundary_ranks[0] = 0`.
    pub boundary_ranks: Vec<usize>,
}

impl HomologyRanks {
    /// `b_k = n_k - rank ∂_k - rank ∂_{k+1}` for `k = 0..=max_dim`; the top
    /// entry has no higher boundary and counts cycles.
    pub fn betti(&self) -> Vec<usize> {
        (0..self.counts.len())
            .map(|k| {
                let next = self.boundary_ranks.get(k + 1).copied().unwrap_or(0);
                self.counts[k] - self.boundary_ranks[k] - next
            })
            .collect()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.counts
            .iter()
            .enumerate()
            .map(|(k, &c)| if k % 2 == 0 { c as i64 } else { -(c as i64) })
            .sum()
    }
}

/// Cofaces of every k-simplex, in CSR form with ascending coface indices.
struct Coboundary {
    offsets: Vec<usize>,
    entries: Vec<u32>,
}

fn for_each_facet(lower: &SimplexList, upper: &SimplexList, mut visit: impl FnMut(usize, usize)) -> Result<()> {
    let width = upper.width;
    let mut face = vec![0u32; width - 1];
    for (t, simplex) in upper.iter().enumerate() {
        for skip in 0..width {
            let mut w = 0;
            for (p, &v) in simplex.iter().enumerate() {
                if p != skip {
                    face[w] = v;
                    w += 1;
                }
            }
            let idx = lower
                .index_of(&face)
                .ok_or_else(|| Error::MalformedComplex(format!("face {face:?} of {simplex:?} is missing")))?;
            visit(t, idx);
        }
    }
    Ok(())
}

/// Transposes the facet relation. Facets are looked up twice (count, then
/// fill) rather than buffered, which halves peak memory on large complexes.
fn coboundary(lower: &SimplexList, upper: &SimplexList) -> Result<Coboundary> {
    let n_lower = lower.len();
    let mut offsets = vec![0usize; n_lower + 1];
    for_each_facet(lower, upper, |_, f| offsets[f + 1] += 1)?;
    for k in 0..n_lower {
        offsets[k + 1] += offsets[k];
    }
    let mut fill = offsets[..n_lower].to_vec();
    let mut entries = vec![0u32; offsets[n_lower]];
    for_each_facet(lower, upper, |t, f| {
        entries[fill[f]] = t as u32;
        fill[f] += 1;
    })?;
    Ok(Coboundary { offsets, entries })
}

/// Symmetric difference of two ascending index lists.
fn xor_into(a: &[u32], b: &[u32], out: &mut Vec<u32>) {
    out.clear();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
}

const NO_PIVOT: u32 = u32::MAX;

/// Reduces the coboundary matrix column by column (pivot = largest row
/// index), skipping cleared columns. Returns the rank and which rows became
/// pivots.
fn reduce_coboundary(cob: &Coboundary, n_rows: usize, cleared: &[bool]) -> (usize, Vec<bool>) {
    let n_cols = cob.offsets.len() - 1;
    let mut pivot_col = vec![NO_PIVOT; n_rows];
    let mut stored: Vec<Vec<u32>> = Vec::new();
    let mut stored_of_col: HashMap<u32, usize> = HashMap::new();
    let mut is_pivot_row = vec![false; n_rows];
    let mut rank = 0;
    let mut col = Vec::new();
    let mut scratch = Vec::new();
    for (j, &done) in cleared.iter().enumerate().take(n_cols) {
        if done {
            continue;
        }
        col.clear();
        col.extend_from_slice(&cob.entries[cob.offsets[j]..cob.offsets[j + 1]]);
        while let Some(&low) = col.last() {
            let owner = pivot_col[low as usize];
            if owner == NO_PIVOT {
                pivot_col[low as usize] = j as u32;
                is_pivot_row[low as usize] = true;
                stored_of_col.insert(j as u32, stored.len());
                stored.push(std::mem::take(&mut col));
                rank += 1;
                break;
            }
            let other = &stored[stored_of_col[&owner]];
            xor_into(&col, other, &mut scratch);
            std::mem::swap(&mut col, &mut scratch);
        }
    }
    (rank, is_pivot_row)
}

/// Simplex counts and all boundary ranks over GF(2).
pub fn homology_ranks(complex: &RipsComplex) -> Result<HomologyRanks> {
    let lists = &complex.simplices;
    if lists.is_empty() {
        return Err(Error::MalformedComplex("complex has no vertex list".into()));
    }
    for (k, l) in lists.iter().enumerate() {
        if l.width != k + 1 {
            return Err(Error::MalformedComplex(format!("list {k} has stride {}", l.width)));
        }
        if l.iter().any(|s| s.windows(2).any(|w| w[0] >= w[1]))
            || l.verts
                .chunks_exact(l.width)
                .collect::<Vec<_>>()
                .windows(2)
                .any(|w| w[0] >= w[1])
        {
            return Err(Error::MalformedComplex(format!("{k}-simplices are not sorted")));
        }
    }
    let counts = complex.counts();
    let mut boundary_ranks = vec![0usize; counts.len()];
    let mut cleared = vec![false; counts[0]];
    for k in 0..counts.len() - 1 {
        let cob = coboundary(&lists[k], &lists[k + 1])?;
        let (rank, pivots) = reduce_coboundary(&cob, counts[k + 1], &cleared);
        boundary_ranks[k + 1] = rank;
        cleared = pivots;
    }
    Ok(HomologyRanks { counts, boundary_ranks })
}

/// `(b0, b1, b2)` of a complex by GF(2) rank computation.
pub fn betti_numbers(complex: &RipsComplex) -> Result<BettiProfile> {
    let ranks = homology_ranks(complex)?;
    let b = ranks.betti();
    Ok(BettiProfile {
        b0: b[0],
        b1: b.get(1).copied().unwrap_or(0),
        b2: b.get(2).copied().unwrap_or(0),
        scale_used: complex.scale,
        n_points: complex.n_points(),
    })
}

/// Disjoint-set forest with union by size and path halving.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }

    pub fn components(&mut self) -> usize {
        (0..self.parent.len()).filter(|&x| self.find(x) == x).count()
    }

    /// Members grouped by representative, groups ordered by smallest member.
    pub fn groups(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: HashMap<usize, usize> = HashMap::new();
        let mut out: Vec<Vec<usize>> = Vec::new();
        for x in 0..self.parent.len() {
            let r = self.find(x);
            let slot = *by_root.entry(r).or_insert_with(|| {
                out.push(Vec::new());
                out.len() - 1
            });
            out[slot].push(x);
        }
        out
    }
}

/// Connected components of the complex's 1-skeleton.
pub fn union_find_components(complex: &RipsComplex) -> usize {
    let mut uf = UnionFind::new(complex.n_points());
    if let Some(edges) = complex.simplices.get(1) {
        for e in edges.iter() {
            uf.union(e[0] as usize, e[1] as usize);
        }
    }
    uf.components()
}

/// Signed boundary matrix ∂_k as dense rows (one row per (k-1)-simplex).
fn signed_boundary(lower: &[Vec<u32>], upper: &[Vec<u32>]) -> Result<Vec<Vec<i64>>> {
    let index: HashMap<&[u32], usize> = lower.iter().enumerate().map(|(i, s)| (s.as_slice(), i)).collect();
    let mut m = vec![vec![0i64; upper.len()]; lower.len()];
    for (c, s) in upper.iter().enumerate() {
        for skip in 0..s.len() {
            let face: Vec<u32> = s
                .iter()
                .enumerate()
                .filter(|(p, _)| *p != skip)
                .map(|(_, &v)| v)
                .collect();
            let r = *index
                .get(face.as_slice())
                .ok_or_else(|| Error::MalformedComplex(format!("face {face:?} of {s:?} is missing")))?;
            m[r][c] = if skip % 2 == 0 { 1 } else { -1 };
        }
    }
    Ok(m)
}

/// Rank over ℚ by fraction-free (Bareiss) elimination in i128; `None` on
/// overflow.
#[allow(clippy::needless_range_loop)]
fn bareiss_rank_i128(m: &[Vec<i64>]) -> Option<usize> {
    let mut a: Vec<Vec<i128>> = m.iter().map(|r| r.iter().map(|&v| i128::from(v)).collect()).collect();
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let mut prev: i128 = 1;
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows).find(|&r| a[r][c] != 0) else {
            continue;
        };
        a.swap(rank, p);
        let piv = a[rank][c];
        for r in rank + 1..rows {
            let f = a[r][c];
            for k in c..cols {
                let v = a[r][k].checked_mul(piv)?.checked_sub(f.checked_mul(a[rank][k])?)?;
                a[r][k] = v / prev;
            }
        }
        prev = piv;
        rank += 1;
        if rank == rows {
            break;
        }
    }
    Some(rank)
}

#[allow(clippy::needless_range_loop)]
fn bareiss_rank_big(m: &[Vec<i64>]) -> usize {
    let mut a: Vec<Vec<BigInt>> = m.iter().map(|r| r.iter().map(|&v| BigInt::from(v)).collect()).collect();
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let mut prev = BigInt::one();
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows).find(|&r| !a[r][c].is_zero()) else {
            continue;
        };
        a.swap(rank, p);
        let piv = a[rank][c].clone();
        for r in rank + 1..rows {
            let f = a[r][c].clone();
            for k in c..cols {
                let v = &a[r][k] * &piv - &f * &a[rank][k];
                a[r][k] = v / &prev;
            }
        }
        prev = piv;
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

fn rational_rank(m: &[Vec<i64>]) -> usize {
    if m.is_empty() || m[0].is_empty() {
        return 0;
    }
    bareiss_rank_i128(m).unwrap_or_else(|| bareiss_rank_big(m))
}

/// Independent Betti computation for small complexes: `b0` by union–find,
/// higher numbers from exact ranks of the signed boundary matrices over ℚ.
pub fn betti_oracle(complex: &RipsComplex) -> Result<BettiProfile> {
    let total = complex.total();
    if total > ORACLE_CAP {
        return Err(Error::OracleCap {
            count: total,
            cap: ORACLE_CAP,
        });
    }
    let lists: Vec<Vec<Vec<u32>>> = complex
        .simplices
        .iter()
        .map(|l| l.iter().map(<[u32]>::to_vec).collect())
        .collect();
    let counts: Vec<usize> = lists.iter().map(Vec::len).collect();
    let mut ranks = vec![0usize; lists.len() + 1];
    for k in 1..lists.len() {
        ranks[k] = rational_rank(&signed_boundary(&lists[k - 1], &lists[k])?);
    }
    let betti = |k: usize| -> usize { counts.get(k).map_or(0, |&n| n - ranks[k] - ranks[k + 1]) };
    Ok(BettiProfile {
        b0: union_find_components(complex),
        b1: betti(1),
        b2: betti(2),
        scale_used: complex.scale,
        n_points: complex.n_points(),
    })
}

/// Farthest-point subsample of `cap` indices, starting from a seeded random
/// point. Returned indices are in selection order.
pub fn farthest_point_subsample(points: &ParticleCollection, cap: usize, seed: u64) -> Vec<usize> {
    let n = points.count();
    if cap >= n {
        return (0..n).collect();
    }
    if cap == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    while chosen.len() < cap {
        let (next, _) = nearest
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    chosen
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Adaptive,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyOptions {
    pub scale: ScaleMode,
    pub max_dim: usize,
    /// Farthest-point subsample larger clouds down to this many points.
    pub subsample_cap: Option<usize>,
    pub simplex_budget: usize,
    pub seed: u64,
}

impl Default for TopologyOptions {
    fn default() -> Self {
        Self {
            scale: ScaleMode::Adaptive,
            max_dim: 3,
            subsample_cap: None,
            simplex_budget: DEFAULT_SIMPLEX_BUDGET,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BettiMeasurement {
    pub profile: BettiProfile,
    /// Number of points kept when subsampling was applied.
    pub subsampled_to: Option<usize>,
    pub simplex_counts: Vec<usize>,
}

/// Point cloud → (optional subsample) → distances → scale → Rips → Betti.
pub fn measure_betti(points: &ParticleCollection, opts: &TopologyOptions) -> Result<BettiMeasurement> {
    let (cloud, subsampled_to) = match opts.subsample_cap {
        Some(cap) if cap < points.count() => {
            let keep = farthest_point_subsample(points, cap, opts.seed);
            let mut data = Vec::with_capacity(keep.len() * points.dim());
            for &i in &keep {
                data.extend_from_slice(points.row(i));
            }
            (ParticleCollection::new(points.dim(), data)?, Some(keep.len()))
        }
        _ => (points.clone(), None),
    };
    let dm = pairwise_distances(&cloud);
    let scale = match opts.scale {
        ScaleMode::Adaptive => adaptive_scale(&dm)?,
        ScaleMode::Fixed(r) => r,
    };
    let complex = build_rips_with_budget(&dm, scale, opts.max_dim, opts.simplex_budget)?;
    let profile = betti_numbers(&complex)?;
    Ok(BettiMeasurement {
        profile,
        subsampled_to,
        simplex_counts: complex.counts(),
    })
}
