#![allow(dead_code)]

use cafa::nn::{Activation, AdaptiveModel, Architecture, ParamId, ParamKind};
use cafa::numcore::{Matrix, Vector};
use cafa::stats::{CovarianceMode, SourceStats};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let b = normal_matrix(rng, d, d, 1.0);
    let mut a = b.transpose().matmul(&b).unwrap();
    a.add_diagonal(0.5);
    // exact symmetry
    for i in 0..d {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    a
}

pub fn random_vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vector {
    Vector::from((0..d).map(|_| rng.random_range(-scale..scale)).collect::<Vec<_>>())
}

/// Small model with non-trivial BN parameters and running statistics.
pub fn small_model(seed: u64, input_dim: usize, hidden: &[usize], n_classes: usize) -> AdaptiveModel {
    let arch = Architecture {
        input_dim,
        hidden: hidden.to_vec(),
        n_classes,
        activation: Activation::Relu,
        feature_activation: Activation::Relu,
        bn_momentum: 0.1,
    };
    let mut m = AdaptiveModel::new(&arch, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for id in m.param_ids() {
        let p = m.param_mut(&id).unwrap();
        match id.kind {
            ParamKind::Gamma => p.iter_mut().for_each(|v| *v = r.random_range(0.6..1.4)),
            ParamKind::Beta | ParamKind::Bias => p.iter_mut().for_each(|v| *v = r.random_range(-0.3..0.5)),
            ParamKind::Weight => {}
        }
    }
    m
}

/// Class-wise stats fitted to the model's own running-statistics features of
/// random inputs with random labels.
pub fn stats_for(model: &AdaptiveModel, seed: u64, mode: CovarianceMode) -> SourceStats {
    let mut r = rng(seed);
    let n = 60 * model.n_classes();
    let x = normal_matrix(&mut r, n, model.input_dim(), 1.0);
    let mut feats = model.forward_features(&x, cafa::nn::StatMode::RunningEval).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % model.n_classes()).collect();
    // separate the classes a little
    for (i, &y) in labels.iter().enumerate() {
        for v in feats.row_mut(i).iter_mut().skip(y).step_by(model.n_classes()) {
            *v += 1.0;
        }
    }
    SourceStats::from_features(&feats, &labels, model.n_classes(), mode, 1e-3).unwrap()
}

pub fn bits(m: &AdaptiveModel, id: &ParamId) -> Vec<u64> {
    m.param(id).unwrap().iter().map(|v| v.to_bits()).collect()
}
