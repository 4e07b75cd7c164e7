//! Finite indexed collections of D-dimensional particles.
//!
//! A [`ParticleCollection`] holds one row per particle (a neuron, possibly
//! augmented with optimizer state). Everything else in the crate consumes and
//! produces these collections: update rules map a collection to a same-shaped
//! update, [`step`] applies it, and the topology code reads the rows as a
//! point cloud.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Row-major N×D matrix of finite reals plus optional integer multiplicities.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCollection {
    dim: usize,
    count: usize,
    data: Vec<f64>,
    multiplicity: Option<Vec<u32>>,
}

impl ParticleCollection {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("particle dimension must be positive".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} values cannot be split into rows of width {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "particle data",
                index: pos / dim,
            });
        }
        let count = data.len() / dim;
        Ok(Self {
            dim,
            count,
            data,
            multiplicity: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::InvalidArgument("empty row list".into()))?;
        let mut data = Vec::with_capacity(dim * rows.len());
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Dimension(format!(
                    "row {i} has width {} but row 0 has width {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn zeros(count: usize, dim: usize) -> Result<Self> {
        Self::new(dim, vec![0.0; count * dim])
    }

    /// All-ones multiplicities are stored as none.
    pub fn with_multiplicity(mut self, multiplicity: Vec<u32>) -> Result<Self> {
        if multiplicity.len() != self.count {
            return Err(Error::Dimension(format!(
                "multiplicity has length {} but collection has {} particles",
                multiplicity.len(),
                self.count
            )));
        }
        if multiplicity.contains(&0) {
            return Err(Error::InvalidArgument("multiplicities must be >= 1".into()));
        }
        self.multiplicity = multiplicity.iter().any(|&m| m != 1).then_some(multiplicity);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    /// Explicit multiplicities, if any were attached.
    pub fn multiplicity(&self) -> Option<&[u32]> {
        self.multiplicity.as_deref()
    }

    /// Multiplicity of particle `i`, defaulting to 1.
    pub fn weight(&self, i: usize) -> u32 {
        self.multiplicity.as_ref().map_or(1, |m| m[i])
    }

    pub fn weights(&self) -> Vec<u32> {
        (0..self.count).map(|i| self.weight(i)).collect()
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.count {
            Err(Error::IndexOutOfRange {
                index: i,
                count: self.count,
            })
        } else {
            Ok(())
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.dim != other.dim || self.count != other.count {
            return Err(Error::Dimension(format!(
                "{what}: shapes {}x{} and {}x{} differ",
                self.count, self.dim, other.count, other.dim
            )));
        }
        Ok(())
    }

    /// Columns `start..start+width` of every row, as a new collection.
    /// Multiplicities carry over.
    pub fn columns(&self, start: usize, width: usize) -> Result<Self> {
        if width == 0 || start + width > self.dim {
            return Err(Error::Dimension(format!(
                "column block {start}..{} outside width {}",
                start + width,
                self.dim
            )));
        }
        let mut data = Vec::with_capacity(self.count * width);
        for r in self.rows() {
            data.extend_from_slice(&r[start..start + width]);
        }
        Ok(Self {
            dim: width,
            count: self.count,
            data,
            multiplicity: self.multiplicity.clone(),
        })
    }

    /// Row-wise concatenation of same-count collections. Multiplicity is taken
    /// from the first block.
    pub fn hconcat(blocks: &[&Self]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("no blocks to concatenate".into()))?;
        let count = first.count;
        if let Some(b) = blocks.iter().find(|b| b.count != count) {
            return Err(Error::Dimension(format!(
                "cannot concatenate collections of {} and {} particles",
                count, b.count
            )));
        }
        let dim: usize = blocks.iter().map(|b| b.dim).sum();
        let mut data = Vec::with_capacity(count * dim);
        for i in 0..count {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Self {
            dim,
            count,
            data,
            multiplicity: first.multiplicity.clone(),
        })
    }

    /// Frobenius norm of the whole collection.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean_row_norm(&self) -> f64 {
        self.rows()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / self.count as f64
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest pairwise Euclidean distance between rows.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.count {
            for j in i + 1..self.count {
                best = best.max(sq_dist(self.row(i), self.row(j)));
            }
        }
        best.sqrt()
    }

    /// Overwrites row `i`. The caller is responsible for finiteness.
    #[cfg(test)]
    pub(crate) fn set_row(&mut self, i: usize, values: &[f64]) {
        self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(values);
    }

    pub(crate) fn from_raw_unchecked(dim: usize, data: Vec<f64>, multiplicity: Option<Vec<u32>>) -> Self {
        debug_assert_eq!(data.len() % dim, 0);
        Self {
            dim,
            count: data.len() / dim,
            data,
            multiplicity,
        }
    }

    /// Writes the snapshot CSV: header `x0,...,x{D-1},mult`, 17 significant
    /// digits per value.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 26);
        for k in 0..self.dim {
            let _ = write!(out, "x{k},");
        }
        out.push_str("mult\n");
        for (i, r) in self.rows().enumerate() {
            for v in r {
                let _ = write!(out, "{v:.16e},");
            }
            let _ = writeln!(out, "{}", self.weight(i));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(BufReader::new(f), path)
    }

    pub fn parse_csv<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?
            .map_err(|e| Error::io(path, e))?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let has_mult = cols.last() == Some(&"mult");
        let dim = if has_mult { cols.len() - 1 } else { cols.len() };
        for (k, c) in cols.iter().take(dim).enumerate() {
            if *c != format!("x{k}") {
                return Err(parse_err(1, format!("expected column x{k}, found {c:?}")));
            }
        }
        let mut data = Vec::new();
        let mut mult = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(parse_err(
                    n + 2,
                    format!("expected {} fields, found {}", cols.len(), fields.len()),
                ));
            }
            for f in &fields[..dim] {
                data.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| parse_err(n + 2, format!("{f:?}: {e}")))?,
                );
            }
            if has_mult {
                let f = fields[dim].trim();
                mult.push(
                    f.parse::<u32>()
                        .map_err(|e| parse_err(n + 2, format!("multiplicity {f:?}: {e}")))?,
                );
            }
        }
        let pc = Self::new(dim, data)?;
        if has_mult {
            pc.with_multiplicity(mult)
        } else {
            Ok(pc)
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A bijection on `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || seen[m] {
                return Err(Error::InvalidArgument(format!(
                    "mapping {mapping:?} is not a permutation of 0..{}",
                    mapping.len()
                )));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn transposition(n: usize, i: usize, j: usize) -> Result<Self> {
        if i >= n || j >= n {
            return Err(Error::IndexOutOfRange {
                index: i.max(j),
                count: n,
            });
        }
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.swap(i, j);
        Ok(Self { mapping })
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct StepSize(f64);

impl StepSize {
    pub fn new(eta: f64) -> Result<Self> {
        if eta.is_finite() && eta > 0.0 {
            Ok(Self(eta))
        } else {
            Err(Error::InvalidArgument(format!(
                "step size must be positive and finite, got {eta}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Row `i` of the result is row `p[i]` of `x`; multiplicities follow their rows.
pub fn apply_permutation(p: &Permutation, x: &ParticleCollection) -> Result<ParticleCollection> {
    if p.len() != x.count() {
        return Err(Error::Dimension(format!(
            "permutation of length {} applied to {} particles",
            p.len(),
            x.count()
        )));
    }
    let mut data = Vec::with_capacity(x.data.len());
    for &src in p.mapping() {
        data.extend_from_slice(x.row(src));
    }
    let multiplicity = x
        .multiplicity
        .as_ref()
        .map(|m| p.mapping().iter().map(|&src| m[src]).collect());
    Ok(ParticleCollection::from_raw_unchecked(x.dim, data, multiplicity))
}

/// `sqrt(sum_i |x_i - y_i|^2)`.
pub fn collection_distance(x: &ParticleCollection, y: &ParticleCollection) -> Result<f64> {
    x.check_same_shape(y, "collection_distance")?;
    Ok(sq_dist(&x.data, &y.data).sqrt())
}

pub fn pair_distance(x: &ParticleCollection, i: usize, j: usize) -> Result<f64> {
    x.check_index(i)?;
    x.check_index(j)?;
    Ok(sq_dist(x.row(i), x.row(j)).sqrt())
}

/// One generic update: `x_i + eta * u_i` for every particle.
pub fn step(x: &ParticleCollection, u: &ParticleCollection, eta: StepSize) -> Result<ParticleCollection> {
    x.check_same_shape(u, "step")?;
    let eta = eta.get();
    let data: Vec<f64> = x.data.iter().zip(&u.data).map(|(a, b)| a + eta * b).collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "stepped collection",
            index: pos / x.dim,
        });
    }
    Ok(ParticleCollection::from_raw_unchecked(
        x.dim,
        data,
        x.multiplicity.clone(),
    ))
}
