//! Seeded Gaussian-mixture data and covariate shifts.

use cafa::numcore::{spd_factor, Matrix};
use cafa::tta::LabeledBatch;
use cafa::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Magnitude multiplier for severities 1 through 5.
pub const SEVERITY_SCALE: [f64; 5] = [0.2, 0.4, 0.6, 0.9, 1.3];

// Independent random streams drawn from one seed.
const STREAM_TRAIN: u64 = 0;
const STREAM_TEST: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_SHIFT: u64 = 3;

/// Class-conditional Gaussian mixture with balanced classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub input_dim: usize,
    pub means: Vec<Vec<f64>>,
    /// Row-major `input_dim × input_dim` covariance per class.
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::desk(3, 8, 0)
    }
}

impl SyntheticSpec {
    /// The standard mixture: `n_classes` classes in `input_dim` dimensions.
    ///
    /// The class geometry is fixed; `seed` only drives sampling. Class `c`
    /// sits at distance 5 along signal direction `c mod min(C, d)`, where
    /// the variance is about 1. The remaining directions carry tiny variance
    /// and small mean offsets, so a source model can lean on them and then
    /// breaks when noise swamps them.
    pub fn desk(n_classes: usize, input_dim: usize, seed: u64) -> Self {
        const SEPARATION: f64 = 5.0;
        const NUISANCE_STD: f64 = 0.01;
        const JITTER: f64 = 0.15;
        let mut g = ChaCha8Rng::seed_from_u64(0x00c0_ffee);
        let signal = n_classes.min(input_dim);
        let means = (0..n_classes)
            .map(|c| {
                (0..input_dim)
                    .map(|k| {
                        let base = if k < signal && k == c % signal { SEPARATION } else { 0.0 };
                        base + g.random_range(-JITTER..JITTER)
                    })
                    .collect()
            })
            .collect();
        let covariances = (0..n_classes)
            .map(|_| {
                let scales: Vec<f64> = (0..input_dim)
                    .map(|k| {
                        if k < signal {
                            1.0
                        } else {
                            NUISANCE_STD * g.random_range(0.8..1.2)
                        }
                    })
                    .collect();
                // Σ = S A Aᵀ S with A = I + small perturbation
                let a: Vec<Vec<f64>> = (0..input_dim)
                    .map(|i| {
                        (0..input_dim)
                            .map(|j| if i == j { 1.0 } else { 0.0 } + g.random_range(-JITTER..JITTER))
                            .collect()
                    })
                    .collect();
                (0..input_dim)
                    .map(|i| {
                        (0..input_dim)
                            .map(|j| {
                                let dot: f64 = (0..input_dim).map(|k| a[i][k] * a[j][k]).sum();
                                scales[i] * scales[j] * dot
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        SyntheticSpec {
            n_classes,
            input_dim,
            means,
            covariances,
            train_per_class: 500,
            test_per_class: 200,
            seed,
        }
    }

    /// Two well-separated isotropic classes in the plane.
    pub fn separable_2d(seed: u64) -> Self {
        SyntheticSpec {
            n_classes: 2,
            input_dim: 2,
            means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            covariances: vec![vec![vec![0.25, 0.0], vec![0.0, 0.25]]; 2],
            train_per_class: 300,
            test_per_class: 200,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.n_classes == 0 || self.input_dim == 0 {
            return bad("synthetic spec needs at least one class and one dimension".into());
        }
        if self.means.len() != self.n_classes || self.covariances.len() != self.n_classes {
            return bad(format!(
                "{} classes but {} means and {} covariances",
                self.n_classes,
                self.means.len(),
                self.covariances.len()
            ));
        }
        for (c, m) in self.means.iter().enumerate() {
            if m.len() != self.input_dim || m.iter().any(|v| !v.is_finite()) {
                return bad(format!("mean of class {c} must be {} finite values", self.input_dim));
            }
            if self.means[..c].contains(m) {
                return bad(format!("mean of class {c} duplicates an earlier class"));
            }
        }
        for c in 0..self.n_classes {
            self.cov_matrix(c)
                .and_then(|s| spd_factor(&s))
                .map_err(|e| Error::ConfigInvalid(format!("covariance of class {c}: {e}")))?;
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("samples per class must be positive".into());
        }
        Ok(())
    }

    fn cov_matrix(&self, c: usize) -> Result<Matrix> {
        let m = Matrix::from_rows(&self.covariances[c])?;
        if m.shape() != (self.input_dim, self.input_dim) {
            return Err(Error::DimensionMismatch(format!("covariance shape {:?}", m.shape())));
        }
        Ok(m)
    }

    /// Mean over classes of `sqrt(trace(Σ_c) / d)`.
    pub fn mean_class_std(&self) -> f64 {
        let d = self.input_dim as f64;
        let total: f64 = (0..self.n_classes)
            .map(|c| ((0..self.input_dim).map(|k| self.covariances[c][k][k]).sum::<f64>() / d).sqrt())
            .sum();
        total / self.n_classes as f64
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }

    /// `per_class` draws of every class, shuffled.
    fn draw(&self, per_class: usize, rng: &mut ChaCha8Rng) -> Result<LabeledBatch> {
        self.validate()?;
        let mut labels: Vec<usize> = (0..self.n_classes * per_class).map(|i| i % self.n_classes).collect();
        labels.shuffle(rng);
        self.draw_labels(labels, rng)
    }

    fn draw_labels(&self, labels: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<LabeledBatch> {
        let d = self.input_dim;
        let factors = (0..self.n_classes)
            .map(|c| Ok(spd_factor(&self.cov_matrix(c)?)?.lower()))
            .collect::<Result<Vec<Matrix>>>()?;
        let mut data = Vec::with_capacity(labels.len() * d);
        for &y in &labels {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let l = &factors[y];
            for i in 0..d {
                let lz: f64 = (0..=i).map(|k| l[(i, k)] * z[k]).sum();
                data.push(self.means[y][i] + lz);
            }
        }
        LabeledBatch::new(Matrix::from_vec(labels.len(), d, data)?, labels)
    }
}

/// Source training and held-out test sets.
#[derive(Clone, Debug)]
pub struct SourceData {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

pub fn generate_source(spec: &SyntheticSpec) -> Result<SourceData> {
    Ok(SourceData {
        train: spec.draw(spec.train_per_class, &mut spec.rng(STREAM_TRAIN))?,
        test: spec.draw(spec.test_per_class, &mut spec.rng(STREAM_TEST))?,
    })
}

/// One covariate transform. Magnitudes are the severity-5 values scaled by
/// [`SEVERITY_SCALE`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Transform {
    /// Isotropic noise with standard deviation `sigma · mean_class_std`.
    AdditiveGaussianNoise { sigma: f64 },
    /// Adds `vector`.
    MeanShift { vector: Vec<f64> },
    /// Multiplies dimension `k` by `1 + (factors[k] − 1)·s`.
    Scaling { factors: Vec<f64> },
    /// Rotates dimensions `plane` by `angle` radians about the origin.
    Rotation { angle: f64, plane: (usize, usize) },
}

/// Composable shift; transforms apply in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub transforms: Vec<Transform>,
    pub severity: u8,
}

/// Severity-5 additive noise.
impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec::noise(5)
    }
}

impl ShiftSpec {
    pub fn none() -> Self {
        ShiftSpec {
            transforms: Vec::new(),
            severity: 1,
        }
    }

    pub fn noise(severity: u8) -> Self {
        ShiftSpec {
            transforms: vec![Transform::AdditiveGaussianNoise { sigma: 1.0 }],
            severity,
        }
    }

    pub fn scale(&self) -> Result<f64> {
        match self.severity {
            1..=5 => Ok(SEVERITY_SCALE[usize::from(self.severity) - 1]),
            s => Err(Error::ConfigInvalid(format!("severity {s} outside 1..=5"))),
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        self.scale()?;
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        for t in &self.transforms {
            match t {
                Transform::AdditiveGaussianNoise { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                    return bad(format!("noise sigma {sigma} must be finite and >= 0"));
                }
                Transform::MeanShift { vector } if vector.len() != input_dim => {
                    return bad(format!(
                        "mean shift of dim {} for inputs of dim {input_dim}",
                        vector.len()
                    ));
                }
                Transform::Scaling { factors } if factors.len() != input_dim => {
                    return bad(format!(
                        "{} scaling factors for inputs of dim {input_dim}",
                        factors.len()
                    ));
                }
                Transform::Rotation { plane: (i, j), .. } if i == j || *i >= input_dim || *j >= input_dim => {
                    return bad(format!("rotation plane ({i}, {j}) invalid for dim {input_dim}"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Applies the shift in place. Labels are untouched.
    pub fn apply(&self, inputs: &mut Matrix, mean_class_std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        self.validate(inputs.cols())?;
        let s = self.scale()?;
        for t in &self.transforms {
            match t {
                Transform::AdditiveGaussianNoise { sigma } => {
                    let std = sigma * s * mean_class_std;
                    for v in inputs.as_mut_slice() {
                        let z: f64 = StandardNormal.sample(rng);
                        *v += std * z;
                    }
                }
                Transform::MeanShift { vector } => {
                    for i in 0..inputs.rows() {
                        for (v, dv) in inputs.row_mut(i).iter_mut().zip(vector) {
                            *v += s * dv;
                        }
                    }
                }
                Transform::Scaling { factors } => {
                    for i in 0..inputs.rows() {
                        for (v, f) in inputs.row_mut(i).iter_mut().zip(factors) {
                            *v *= 1.0 + (f - 1.0) * s;
                        }
                    }
                }
                Transform::Rotation { angle, plane: (a, b) } => {
                    let (sin, cos) = (angle * s).sin_cos();
                    for i in 0..inputs.rows() {
                        let row = inputs.row_mut(i);
                        let (x, y) = (row[*a], row[*b]);
                        row[*a] = cos * x - sin * y;
                        row[*b] = sin * x + cos * y;
                    }
                }
            }
        }
        Ok(())
    }
}

/// The target stream: `n_batches` balanced, shuffled batches drawn from the
/// source mixture and passed through `shift`.
pub fn generate_dataset(
    spec: &SyntheticSpec,
    shift: Option<&ShiftSpec>,
    n_batches: usize,
    batch_size: usize,
) -> Result<Vec<LabeledBatch>> {
    spec.validate()?;
    if n_batches == 0 || batch_size < 2 {
        return Err(Error::ConfigInvalid(format!(
            "stream of {n_batches} batches of {batch_size} (need >= 1 batch of >= 2)"
        )));
    }
    let mut rng = spec.rng(STREAM_TARGET);
    let mut labels: Vec<usize> = (0..n_batches * batch_size).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let mut pool = spec.draw_labels(labels, &mut rng)?;
    if let Some(shift) = shift {
        shift.apply(&mut pool.inputs, spec.mean_class_std(), &mut spec.rng(STREAM_SHIFT))?;
    }
    Ok(pool.chunks(batch_size))
}
