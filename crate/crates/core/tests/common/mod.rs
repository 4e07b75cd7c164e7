#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use neurotopo::models::{generate_teacher_dataset, Dataset, TeacherSpec};
use neurotopo::particles::ParticleCollection;
use neurotopo::rules::GradientOracle;

/// Dense Hessian from second differences of the loss alone, so it shares no
/// code with the analytic gradients.
pub fn dense_hessian<O: GradientOracle + ?Sized>(oracle: &O, x: &ParticleCollection, h: f64) -> DMatrix<f64> {
    let n = x.data().len();
    let dim = x.dim();
    let loss = |shifts: &[(usize, f64)]| {
        let mut data = x.data().to_vec();
        for &(k, s) in shifts {
            data[k] += s;
        }
        oracle.loss(&ParticleCollection::new(dim, data).unwrap()).unwrap()
    };
    let f0 = loss(&[]);
    let mut m = DMatrix::zeros(n, n);
    for a in 0..n {
        m[(a, a)] = (loss(&[(a, h)]) - 2.0 * f0 + loss(&[(a, -h)])) / (h * h);
        for b in 0..a {
            let v = (loss(&[(a, h), (b, h)]) - loss(&[(a, h), (b, -h)]) - loss(&[(a, -h), (b, h)])
                + loss(&[(a, -h), (b, -h)]))
                / (4.0 * h * h);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    m
}

/// Eigenvalue of largest magnitude.
pub fn top_abs_eigenvalue(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .fold(0.0f64, |best, v| best.max(v.abs()))
}

pub fn cloud(rows: &[&[f64]]) -> ParticleCollection {
    ParticleCollection::from_rows(rows).unwrap()
}

pub fn octahedron() -> ParticleCollection {
    cloud(&[
        &[1.0, 0.0, 0.0],
        &[-1.0, 0.0, 0.0],
        &[0.0, 1.0, 0.0],
        &[0.0, -1.0, 0.0],
        &[0.0, 0.0, 1.0],
        &[0.0, 0.0, -1.0],
    ])
}

/// Unit square; at scale 1 only the sides are edges.
pub fn square() -> ParticleCollection {
    cloud(&[&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0]])
}

pub fn three_points() -> ParticleCollection {
    cloud(&[&[0.0, 0.0], &[10.0, 0.0], &[0.0, 10.0]])
}

pub fn teacher_data(input_dim: usize, samples: usize, seed: u64) -> Dataset {
    let teacher = TeacherSpec::sample(4, input_dim, seed);
    generate_teacher_dataset(&teacher, samples, 0.7, seed + 1).unwrap()
}

pub fn neurotopo_bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_neurotopo"))
}
