//! Two-layer sigmoid networks whose hidden units are the particles.
//!
//! Neuron `i` is the row `(w_i, a_i)` with `w_i ∈ ℝ^d` its incoming weights
//! and `a_i ∈ ℝ^C` its outgoing weights, so the network output
//! `F(z) = Σ_i a_i σ(⟨w_i, z⟩)` is a symmetric sum over rows. No biases.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::ParticleCollection;
use crate::rules::{Evaluation, GradientOracle};

#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    input_dim: usize,
    output_dim: usize,
    neurons: ParticleCollection,
}

impl TwoLayerNet {
    pub fn new(input_dim: usize, output_dim: usize, neurons: ParticleCollection) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument(
                "input and output dimensions must be positive".into(),
            ));
        }
        if neurons.dim() != input_dim + output_dim {
            return Err(Error::Dimension(format!(
                "neuron width {} != input {input_dim} + output {output_dim}",
                neurons.dim()
            )));
        }
        Ok(Self {
            input_dim,
            output_dim,
            neurons,
        })
    }

    /// `w ~ N(0, 1/d)`, `a ~ N(0, 1/h)`.
    pub fn gaussian(input_dim: usize, output_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wn = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).expect("positive std");
        let an = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive std");
        let mut data = Vec::with_capacity(hidden * (input_dim + output_dim));
        for _ in 0..hidden {
            data.extend((0..input_dim).map(|_| wn.sample(&mut rng)));
            data.extend((0..output_dim).map(|_| an.sample(&mut rng)));
        }
        Self::new(
            input_dim,
            output_dim,
            ParticleCollection::new(input_dim + output_dim, data)?,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden(&self) -> usize {
        self.neurons.count()
    }

    pub fn neurons(&self) -> &ParticleCollection {
        &self.neurons
    }

    pub fn into_neurons(self) -> ParticleCollection {
        self.neurons
    }
}

/// `Σ_i a_i σ(⟨w_i, z⟩)`.
pub fn forward(net: &TwoLayerNet, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != net.input_dim {
        return Err(Error::Dimension(format!(
            "input has {} entries, expected {}",
            z.len(),
            net.input_dim
        )));
    }
    Ok(forward_raw(&net.neurons, net.input_dim, net.output_dim, z))
}

fn forward_raw(neurons: &ParticleCollection, d: usize, c: usize, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in neurons.rows() {
        let s = sigmoid(dot(&row[..d], z));
        for (o, a) in out.iter_mut().zip(&row[d..]) {
            *o += a * s;
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inputs and targets, the first `train_count` rows forming the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    train_count: usize,
}

impl Dataset {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        inputs: Vec<f64>,
        targets: Vec<f64>,
        train_fraction: f64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument("dataset dimensions must be positive".into()));
        }
        if inputs.is_empty() || !inputs.len().is_multiple_of(input_dim) {
            return Err(Error::Dimension("inputs do not form whole rows".into()));
        }
        let n = inputs.len() / input_dim;
        if targets.len() != n * output_dim {
            return Err(Error::Dimension(format!(
                "{} input rows but {} target values for width {output_dim}",
                n,
                targets.len()
            )));
        }
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::InvalidArgument(format!(
                "train fraction {train_fraction} outside [0, 1]"
            )));
        }
        let train_count = ((n as f64) * train_fraction).round() as usize;
        Ok(Self {
            input_dim,
            output_dim,
            inputs,
            targets,
            train_count: train_count.clamp(1, n),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input(&self, s: usize) -> &[f64] {
        &self.inputs[s * self.input_dim..(s + 1) * self.input_dim]
    }

    pub fn target(&self, s: usize) -> &[f64] {
        &self.targets[s * self.output_dim..(s + 1) * self.output_dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.train_count).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (self.train_count..self.len()).collect()
    }

    pub fn train_count(&self) -> usize {
        self.train_count
    }

    /// CSV with columns `z0..z{d-1},y0..y{C-1}`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.input_dim)
            .map(|k| format!("z{k}"))
            .chain((0..self.output_dim).map(|k| format!("y{k}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for s in 0..self.len() {
            let vals: Vec<String> = self
                .input(s)
                .iter()
                .chain(self.target(s))
                .map(|v| format!("{v:.16e}"))
                .collect();
            let _ = writeln!(out, "{}", vals.join(","));
        }
        out
    }

    pub fn read_csv(path: &Path, train_fraction: f64) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let perr = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| perr("missing header".into()))?
            .map_err(|e| Error::io(path, e))?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let d = cols.iter().take_while(|c| c.starts_with('z')).count();
        let c = cols.len() - d;
        if d == 0 || c == 0 || cols[d..].iter().any(|c| !c.starts_with('y')) {
            return Err(perr(format!("header {header:?} is not z*,y* columns")));
        }
        let (mut inputs, mut targets) = (Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .trim()
                .split(',')
                .map(|f| f.parse::<f64>().map_err(|e| perr(format!("line {}: {e}", n + 2))))
                .collect::<Result<_>>()?;
            if vals.len() != d + c {
                return Err(perr(format!("line {}: expected {} fields", n + 2, d + c)));
            }
            inputs.extend_from_slice(&vals[..d]);
            targets.extend_from_slice(&vals[d..]);
        }
        Self::new(d, c, inputs, targets, train_fraction)
    }
}

/// Frozen teacher weights `a* ∈ ℝ^{h*}`, `W* ∈ ℝ^{h*×d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub hidden_star: usize,
    pub input_dim: usize,
    pub a_star: Vec<f64>,
    /// Row-major `h* × d`.
    pub w_star: Vec<f64>,
    pub seed: u64,
}

impl TeacherSpec {
    /// `a*_j ~ N(0, 1)`, `w*_{jk} ~ N(0, 0.36)`.
    pub fn sample(hidden_star: usize, input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(0.0, 1.0).expect("valid");
        let w = Normal::new(0.0, 0.6).expect("valid");
        let a_star = (0..hidden_star).map(|_| a.sample(&mut rng)).collect();
        let w_star = (0..hidden_star * input_dim).map(|_| w.sample(&mut rng)).collect();
        Self {
            hidden_star,
            input_dim,
            a_star,
            w_star,
            seed,
        }
    }

    pub fn label(&self, z: &[f64]) -> f64 {
        self.a_star
            .iter()
            .zip(self.w_star.chunks_exact(self.input_dim))
            .map(|(a, w)| a * sigmoid(dot(w, z)))
            .sum()
    }
}

pub const DEFAULT_TEACHER_SAMPLES: usize = 5000;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_BATCH_SIZE: usize = 128;

/// Inputs `z_{s,j} ~ N(0, 4)` labelled by the teacher.
pub fn generate_teacher_dataset(spec: &TeacherSpec, n: usize, train_fraction: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 2.0).expect("valid");
    let d = spec.input_dim;
    let inputs: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
    let targets = inputs.chunks_exact(d).map(|z| spec.label(z)).collect();
    Dataset::new(d, 1, inputs, targets, train_fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Mean squared error `(1/B) Σ_s ‖F(z_s) - y_s‖²` and its per-neuron gradient.
pub fn mse_loss(net: &TwoLayerNet, data: &Dataset, batch: &[usize]) -> Result<(f64, ParticleCollection)> {
    loss_and_grad(&net.neurons, net.input_dim, net.output_dim, data, batch, LossKind::Mse)
}

/// Mean softmax cross-entropy against one-hot targets and its per-neuron gradient.
pub fn cross_entropy_loss(net: &TwoLayerNet, data: &Dataset, batch: &[usize]) -> Result<(f64, ParticleCollection)> {
    loss_and_grad(
        &net.neurons,
        net.input_dim,
        net.output_dim,
        data,
        batch,
        LossKind::CrossEntropy,
    )
}

fn check_one_hot(data: &Dataset, batch: &[usize]) -> Result<()> {
    if data.output_dim < 2 {
        return Err(Error::InvalidArgument(
            "cross-entropy needs at least two classes".into(),
        ));
    }
    for &s in batch {
        let t = data.target(s);
        let ones = t.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || t.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("target row {s} is not one-hot")));
        }
    }
    Ok(())
}

fn loss_and_grad(
    neurons: &ParticleCollection,
    d: usize,
    c: usize,
    data: &Dataset,
    batch: &[usize],
    kind: LossKind,
) -> Result<(f64, ParticleCollection)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if neurons.dim() != d + c || data.input_dim != d || data.output_dim != c {
        return Err(Error::Dimension(format!(
            "network ({d} -> {c}, width {}) does not match data ({} -> {})",
            neurons.dim(),
            data.input_dim,
            data.output_dim
        )));
    }
    if let Some(&s) = batch.iter().find(|&&s| s >= data.len()) {
        return Err(Error::IndexOutOfRange {
            index: s,
            count: data.len(),
        });
    }
    if kind == LossKind::CrossEntropy {
        check_one_hot(data, batch)?;
    }
    let h = neurons.count();
    let b = batch.len() as f64;

    // activations[s*h + i] = σ(⟨w_i, z_s⟩); dloss[s*c + k] = ∂L/∂F_{s,k}
    let per_sample: Vec<(Vec<f64>, Vec<f64>, f64)> = batch
        .par_iter()
        .map(|&s| {
            let z = data.input(s);
            let act: Vec<f64> = neurons.rows().map(|r| sigmoid(dot(&r[..d], z))).collect();
            let mut out = vec![0.0; c];
            for (r, &a) in neurons.rows().zip(&act) {
                for (o, w) in out.iter_mut().zip(&r[d..]) {
                    *o += w * a;
                }
            }
            let y = data.target(s);
            let (dl, l) = match kind {
                LossKind::Mse => {
                    let diff: Vec<f64> = out.iter().zip(y).map(|(f, t)| f - t).collect();
                    let l = diff.iter().map(|v| v * v).sum::<f64>();
                    (diff.iter().map(|v| 2.0 * v / b).collect(), l)
                }
                LossKind::CrossEntropy => {
                    let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + out.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    let l = out.iter().zip(y).map(|(f, t)| t * (lse - f)).sum::<f64>();
                    (out.iter().zip(y).map(|(f, t)| ((f - lse).exp() - t) / b).collect(), l)
                }
            };
            (act, dl, l)
        })
        .collect();
    let loss = per_sample.iter().map(|p| p.2).sum::<f64>() / b;

    let grad: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|i| {
            let row = neurons.row(i);
            let a = &row[d..];
            let mut g = vec![0.0; d + c];
            for (&s, (act, dl, _)) in batch.iter().zip(&per_sample) {
                let sig = act[i];
                let back = dot(a, dl) * sig * (1.0 - sig);
                for (gk, zk) in g[..d].iter_mut().zip(data.input(s)) {
                    *gk += back * zk;
                }
                for (gk, dk) in g[d..].iter_mut().zip(dl) {
                    *gk += dk * sig;
                }
            }
            g.into_iter()
        })
        .collect();
    Ok((loss, ParticleCollection::from_raw_unchecked(d + c, grad, None)))
}

/// Network loss on a fixed set of samples, as a gradient oracle over neurons.
#[derive(Debug, Clone)]
pub struct NetObjective<'a> {
    pub input_dim: usize,
    pub output_dim: usize,
    pub loss: LossKind,
    pub data: &'a Dataset,
    pub batch: Vec<usize>,
}

impl<'a> NetObjective<'a> {
    pub fn new(data: &'a Dataset, loss: LossKind, batch: Vec<usize>) -> Self {
        Self {
            input_dim: data.input_dim,
            output_dim: data.output_dim,
            loss,
            data,
            batch,
        }
    }
}

impl GradientOracle for NetObjective<'_> {
    fn dim(&self) -> usize {
        self.input_dim + self.output_dim
    }

    fn evaluate(&self, theta: &ParticleCollection) -> Result<Evaluation> {
        let (loss, grad) = loss_and_grad(
            theta,
            self.input_dim,
            self.output_dim,
            self.data,
            &self.batch,
            self.loss,
        )?;
        Ok(Evaluation { loss, grad })
    }

    fn loss(&self, theta: &ParticleCollection) -> Result<f64> {
        let b = self.batch.len() as f64;
        if self.batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let total: f64 = self
            .batch
            .iter()
            .map(|&s| {
                let out = forward_raw(theta, self.input_dim, self.output_dim, self.data.input(s));
                let y = self.data.target(s);
                match self.loss {
                    LossKind::Mse => out.iter().zip(y).map(|(f, t)| (f - t) * (f - t)).sum::<f64>(),
                    LossKind::CrossEntropy => {
                        let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + out.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        out.iter().zip(y).map(|(f, t)| t * (lse - f)).sum::<f64>()
                    }
                }
            })
            .sum();
        Ok(total / b)
    }
}

/// Test-set metric: mean squared error for regression, accuracy for
/// classification.
pub fn test_metric(neurons: &ParticleCollection, data: &Dataset, loss: LossKind, indices: &[usize]) -> Option<f64> {
    if indices.is_empty() {
        return None;
    }
    let (d, c) = (data.input_dim, data.output_dim);
    let vals: Vec<f64> = indices
        .par_iter()
        .map(|&s| {
            let out = forward_raw(neurons, d, c, data.input(s));
            let y = data.target(s);
            match loss {
                LossKind::Mse => out.iter().zip(y).map(|(f, t)| (f - t) * (f - t)).sum::<f64>(),
                LossKind::CrossEntropy => {
                    let argmax = |v: &[f64]| {
                        v.iter()
                            .enumerate()
                            .fold(
                                (0, f64::NEG_INFINITY),
                                |best, (k, &x)| if x > best.1 { (k, x) } else { best },
                            )
                            .0
                    };
                    f64::from(u8::from(argmax(&out) == argmax(y)))
                }
            }
        })
        .collect();
    Some(vals.iter().sum::<f64>() / indices.len() as f64)
}

/// Seeded shuffled partitions of an index set, one per epoch.
#[derive(Debug, Clone)]
pub struct Minibatcher {
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl Minibatcher {
    pub fn new(indices: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(Self {
            indices,
            batch_size,
            seed,
        })
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order = self.indices.clone();
        order.shuffle(&mut rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// One shuffled partition of `0..n`; the final short batch is kept.
pub fn minibatches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    Ok(Minibatcher::new((0..n).collect(), batch_size, seed)?.epoch(0))
}

/// Parsed IDX array: big-endian dimensions and raw unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

impl IdxArray {
    pub fn parse(buf: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, reason: &str| Error::Format {
            offset,
            reason: reason.to_string(),
        };
        if buf.len() < 4 {
            return Err(fmt(buf.len(), "truncated magic number"));
        }
        if buf[0] != 0 || buf[1] != 0 {
            return Err(fmt(0, "magic number must start with two zero bytes"));
        }
        if buf[2] != 0x08 {
            return Err(fmt(2, &format!("unsupported element type 0x{:02x}", buf[2])));
        }
        let rank = buf[3] as usize;
        if rank == 0 {
            return Err(fmt(3, "rank must be at least 1"));
        }
        let header = 4 + 4 * rank;
        if buf.len() < header {
            return Err(fmt(buf.len(), "truncated dimension header"));
        }
        let dims: Vec<usize> = buf[4..header]
            .chunks_exact(4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .collect();
        let total = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fmt(4, "dimension product overflows"))?;
        let payload = &buf[header..];
        if payload.len() < total {
            return Err(fmt(
                buf.len(),
                &format!("truncated payload: {} of {total} bytes", payload.len()),
            ));
        }
        if payload.len() > total {
            return Err(fmt(header + total, "trailing bytes after payload"));
        }
        Ok(Self {
            dims,
            bytes: payload.to_vec(),
        })
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Entries per row: the product of all dimensions after the first.
    pub fn row_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    /// Rows flattened and scaled to `[0, 1]`.
    pub fn to_unit_matrix(&self) -> Vec<f64> {
        self.bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
    }
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    IdxArray::parse(&buf)
}

/// MNIST-style images + labels into a one-hot classification dataset.
pub fn load_idx_classification(
    images: &Path,
    labels: &Path,
    classes: usize,
    limit: Option<usize>,
    train_fraction: f64,
) -> Result<Dataset> {
    let img = load_idx(images)?;
    let lab = load_idx(labels)?;
    if lab.dims.len() != 1 || lab.rows() != img.rows() {
        return Err(Error::Dimension(format!(
            "{} images but label array has dims {:?}",
            img.rows(),
            lab.dims
        )));
    }
    let n = limit.map_or(img.rows(), |l| l.min(img.rows()));
    let d = img.row_len();
    let inputs = img.to_unit_matrix()[..n * d].to_vec();
    let mut targets = vec![0.0; n * classes];
    for (s, &l) in lab.bytes[..n].iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} at row {s} exceeds {classes} classes"
            )));
        }
        targets[s * classes + l] = 1.0;
    }
    Dataset::new(d, classes, inputs, targets, train_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particles::{apply_permutation, Permutation};

    fn net(d: usize, c: usize, rows: &[&[f64]]) -> TwoLayerNet {
        TwoLayerNet::new(d, c, ParticleCollection::from_rows(rows).unwrap()).unwrap()
    }

    fn central_diff_check(
        neurons: &ParticleCollection,
        d: usize,
        c: usize,
        data: &Dataset,
        batch: &[usize],
        kind: LossKind,
        tol: f64,
    ) {
        let (_, grad) = loss_and_grad(neurons, d, c, data, batch, kind).unwrap();
        let obj = NetObjective::new(data, kind, batch.to_vec());
        for k in 0..neurons.data().len() {
            let h = 1e-5 * (1.0 + neurons.data()[k].abs());
            let mut plus = neurons.data().to_vec();
            plus[k] += h;
            let mut minus = neurons.data().to_vec();
            minus[k] -= h;
            let fp = obj.loss(&ParticleCollection::new(d + c, plus).unwrap()).unwrap();
            let fm = obj.loss(&ParticleCollection::new(d + c, minus).unwrap()).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.data()[k];
            assert!(
                (fd - an).abs() <= tol * an.abs().max(fd.abs()).max(1e-3),
                "coordinate {k}: analytic {an} vs finite difference {fd}"
            );
        }
    }

    #[test]
    fn forward_examples() {
        let zero_out = net(2, 1, &[&[1.0, 2.0, 0.0], &[0.3, -1.0, 0.0]]);
        assert_eq!(forward(&zero_out, &[5.0, -2.0]).unwrap(), vec![0.0]);
        let one = net(1, 1, &[&[0.0, 2.0]]);
        assert_eq!(forward(&one, &[123.0]).unwrap(), vec![1.0]);
        let pair = net(1, 1, &[&[1.0, 1.0], &[-1.0, 1.0]]);
        assert!((forward(&pair, &[3.0]).unwrap()[0] - 1.0).abs() < 1e-15);
        assert!(forward(&pair, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_for_huge_inputs() {
        let n = net(2, 1, &[&[1.0, 1.0, 1.0], &[-1.0, 0.5, 2.0]]);
        for z in [[1e6, 0.0], [-1e6, 0.0], [7e5, -7e5]] {
            assert!(forward(&n, &z).unwrap().iter().all(|v| v.is_finite()));
        }
        assert_eq!(sigmoid(-1e6), 0.0);
        assert_eq!(sigmoid(1e6), 1.0);
    }

    #[test]
    fn teacher_copy_has_zero_loss_and_gradient() {
        let teacher = TeacherSpec::sample(4, 2, 7);
        let data = generate_teacher_dataset(&teacher, 50, 0.7, 8).unwrap();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|j| vec![teacher.w_star[2 * j], teacher.w_star[2 * j + 1], teacher.a_star[j]])
            .collect();
        let student = TwoLayerNet::new(2, 1, ParticleCollection::from_rows(&rows).unwrap()).unwrap();
        let (loss, grad) = mse_loss(&student, &data, &data.train_indices()).unwrap();
        assert!(loss < 1e-28);
        assert!(grad.max_abs() < 1e-13);
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let teacher = TeacherSpec::sample(3, 1, 1);
        let data = generate_teacher_dataset(&teacher, 5, 1.0, 2).unwrap();
        let single = net(1, 1, &[&[0.7, -0.4]]);
        central_diff_check(single.neurons(), 1, 1, &data, &[0], LossKind::Mse, 1e-6);
        let wide = TwoLayerNet::gaussian(1, 1, 6, 3).unwrap();
        central_diff_check(wide.neurons(), 1, 1, &data, &[0, 1, 2, 3, 4], LossKind::Mse, 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut targets = vec![0.0; 10 * 3];
        for s in 0..3 {
            targets[s * 10 + s] = 1.0;
        }
        let data = Dataset::new(2, 10, vec![0.1, 0.2, -1.0, 0.5, 2.0, 2.0], targets, 1.0).unwrap();
        let mut rows = vec![vec![0.0; 12]; 5];
        for (i, r) in rows.iter_mut().enumerate() {
            r[0] = i as f64;
            r[1] = -0.5;
        }
        let zero_out = TwoLayerNet::new(2, 10, ParticleCollection::from_rows(&rows).unwrap()).unwrap();
        let (loss, _) = cross_entropy_loss(&zero_out, &data, &[0, 1, 2]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_and_validation() {
        let targets = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let inputs = vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.9, 1.0, 1.0];
        let data = Dataset::new(2, 3, inputs, targets, 1.0).unwrap();
        let n = TwoLayerNet::gaussian(2, 3, 4, 9).unwrap();
        central_diff_check(n.neurons(), 2, 3, &data, &[0, 1, 2, 3], LossKind::CrossEntropy, 1e-5);

        let bad = Dataset::new(1, 2, vec![0.0], vec![0.5, 0.5], 1.0).unwrap();
        let n1 = TwoLayerNet::gaussian(1, 2, 2, 0).unwrap();
        assert!(cross_entropy_loss(&n1, &bad, &[0]).is_err());
        let single = Dataset::new(1, 1, vec![0.0], vec![1.0], 1.0).unwrap();
        let n2 = TwoLayerNet::gaussian(1, 1, 2, 0).unwrap();
        assert!(cross_entropy_loss(&n2, &single, &[0]).is_err());
        assert!(cross_entropy_loss(&n, &data, &[]).is_err());
        assert!(mse_loss(&n2, &single, &[]).is_err());
    }

    #[test]
    fn losses_are_permutation_symmetric() {
        let teacher = TeacherSpec::sample(5, 2, 4);
        let data = generate_teacher_dataset(&teacher, 40, 1.0, 5).unwrap();
        let n = TwoLayerNet::gaussian(2, 1, 12, 6).unwrap();
        let obj = NetObjective::new(&data, LossKind::Mse, data.train_indices());
        let base = obj.loss(n.neurons()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let p = Permutation::random(12, &mut rng);
            let l = obj.loss(&apply_permutation(&p, n.neurons()).unwrap()).unwrap();
            assert!((l - base).abs() <= 1e-12 * base.max(1.0));
        }
    }

    #[test]
    fn duplicating_and_halving_preserves_loss() {
        let teacher = TeacherSpec::sample(5, 2, 4);
        let data = generate_teacher_dataset(&teacher, 40, 1.0, 5).unwrap();
        let n = TwoLayerNet::gaussian(2, 1, 7, 1).unwrap();
        let mut rows = Vec::new();
        for r in n.neurons().rows() {
            let halved = vec![r[0], r[1], r[2] / 2.0];
            rows.push(halved.clone());
            rows.push(halved);
        }
        let doubled = TwoLayerNet::new(2, 1, ParticleCollection::from_rows(&rows).unwrap()).unwrap();
        let batch = data.train_indices();
        let (a, _) = mse_loss(&n, &data, &batch).unwrap();
        let (b, _) = mse_loss(&doubled, &data, &batch).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn teacher_dataset_moments() {
        let teacher = TeacherSpec::sample(50, 1, 3);
        let data = generate_teacher_dataset(&teacher, 50_000, 0.7, 4).unwrap();
        let mean = data.inputs().iter().sum::<f64>() / 50_000.0;
        let var = data.inputs().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 49_999.0;
        assert!((var - 4.0).abs() < 0.15, "input variance {var}");
        assert_eq!(data.train_count(), 35_000);

        let big = TeacherSpec::sample(100, 20, 5);
        let n = big.w_star.len() as f64;
        let wm = big.w_star.iter().sum::<f64>() / n;
        let wv = big.w_star.iter().map(|v| (v - wm) * (v - wm)).sum::<f64>() / (n - 1.0);
        assert!((wv - 0.36).abs() < 0.05, "teacher weight variance {wv}");

        let again = generate_teacher_dataset(&teacher, 50_000, 0.7, 4).unwrap();
        assert_eq!(again, data);
        assert!(generate_teacher_dataset(&teacher, 0, 0.7, 4).is_err());
    }

    #[test]
    fn minibatch_partition() {
        let batches = minibatches(10, 3, 42).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(minibatches(10, 3, 42).unwrap(), batches);
        assert!(minibatches(10, 0, 42).is_err());
        let mb = Minibatcher::new((0..100).collect(), 10, 1).unwrap();
        assert_ne!(mb.epoch(0), mb.epoch(1));
    }

    fn idx_bytes(magic: [u8; 4], dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn idx_parsing() {
        assert_eq!(IDX_IMAGES_MAGIC.to_be_bytes(), [0, 0, 8, 3]);
        assert_eq!(IDX_LABELS_MAGIC.to_be_bytes(), [0, 0, 8, 1]);
        let arr = IdxArray::parse(&idx_bytes([0, 0, 8, 3], &[1, 2, 2], &[0, 255, 128, 64])).unwrap();
        assert_eq!(arr.dims, vec![1, 2, 2]);
        assert_eq!((arr.rows(), arr.row_len()), (1, 4));
        assert_eq!(arr.to_unit_matrix(), vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);

        let full = idx_bytes([0, 0, 8, 3], &[1, 2, 2], &[0, 255, 128, 64]);
        let err = IdxArray::parse(&full[..6]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 6, .. }), "{err}");
        let err = IdxArray::parse(&full[..17]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let err = IdxArray::parse(&idx_bytes([1, 0, 8, 1], &[1], &[0])).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let err = IdxArray::parse(&idx_bytes([0, 0, 0x0d, 1], &[1], &[0, 0, 0, 0])).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 2, .. }));
    }

    #[test]
    fn idx_classification_and_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        std::fs::write(&img, idx_bytes([0, 0, 8, 3], &[3, 1, 2], &[0, 255, 10, 20, 30, 40])).unwrap();
        std::fs::write(&lab, idx_bytes([0, 0, 8, 1], &[3], &[2, 0, 1])).unwrap();
        let data = load_idx_classification(&img, &lab, 3, None, 1.0).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.target(0), &[0.0, 0.0, 1.0]);
        assert_eq!(data.input(0), &[0.0, 1.0]);

        let csv = dir.path().join("data.csv");
        std::fs::write(&csv, data.to_csv_string()).unwrap();
        let back = Dataset::read_csv(&csv, 1.0).unwrap();
        assert_eq!(back, data);
    }
}
