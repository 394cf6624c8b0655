//! Source statistics: class-conditional Gaussians of penultimate features plus
//! the class-agnostic source Gaussian, estimated once before adaptation.

mod io;

use serde::{Deserialize, Serialize};

pub use io::{decode_stats, encode_stats, load_stats, save_stats, STATS_FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::nn::{AdaptiveModel, StatMode};
use crate::numcore::{spd_factor, CovAccumulator, Matrix, SpdFactor, Vector};
use crate::tta::LabeledBatch;

pub const DEFAULT_EPS_SCALE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    ClassWise,
    Tied,
}

/// `ε = eps_scale · trace(Σ)/d`, falling back to `eps_scale` itself when the
/// covariance has zero trace (every sample identical).
pub fn regularization_for(sigma: &Matrix, eps_scale: f64) -> f64 {
    let d = sigma.rows().max(1) as f64;
    let mean_var = sigma.trace() / d;
    if mean_var > 0.0 {
        eps_scale * mean_var
    } else {
        eps_scale
    }
}

#[derive(Clone, Debug)]
pub struct ClassGaussian {
    pub class_id: usize,
    pub mu: Vector,
    pub sigma: Matrix,
    pub n_samples: usize,
    /// Absolute ridge added to `sigma` before factoring.
    pub ridge: f64,
    precision: SpdFactor,
}

impl ClassGaussian {
    /// Builds the Gaussian with an explicit ridge; `ridge = 0` factors `sigma`
    /// as is.
    pub fn with_ridge(class_id: usize, mu: Vector, sigma: Matrix, n_samples: usize, ridge: f64) -> Result<Self> {
        if !sigma.is_square() || sigma.rows() != mu.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mean of dim {} with covariance {:?}",
                mu.dim(),
                sigma.shape()
            )));
        }
        let mut reg = sigma.clone();
        reg.add_diagonal(ridge);
        let precision = spd_factor(&reg)?;
        Ok(ClassGaussian {
            class_id,
            mu,
            sigma,
            n_samples,
            ridge,
            precision,
        })
    }

    pub fn new(class_id: usize, mu: Vector, sigma: Matrix, n_samples: usize, eps_scale: f64) -> Result<Self> {
        let ridge = regularization_for(&sigma, eps_scale);
        Self::with_ridge(class_id, mu, sigma, n_samples, ridge)
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    /// Cholesky factor of `sigma + ridge·I`.
    pub fn precision(&self) -> &SpdFactor {
        &self.precision
    }

    /// Mahalanobis distance `(x−μ)ᵀ(Σ+εI)⁻¹(x−μ)`.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let diff = Vector::from(x.to_vec()).sub(&self.mu);
        self.precision.inv_quad_form(&diff)
    }

    /// Distance together with `(Σ+εI)⁻¹(x−μ)`; the gradient of the distance
    /// with respect to `x` is twice the second component.
    pub fn distance_with_direction(&self, x: &[f64]) -> Result<(f64, Vector)> {
        self.check_dim(x)?;
        let diff = Vector::from(x.to_vec()).sub(&self.mu);
        self.precision.solve_with_quad_form(&diff)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "feature of dim {} vs Gaussian of dim {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

impl PartialEq for ClassGaussian {
    fn eq(&self, other: &Self) -> bool {
        self.class_id == other.class_id
            && self.mu == other.mu
            && self.sigma == other.sigma
            && self.n_samples == other.n_samples
            && self.ridge.to_bits() == other.ridge.to_bits()
            && self.precision == other.precision
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceStats {
    pub classes: Vec<ClassGaussian>,
    pub global_mu: Vector,
    pub global_sigma: Matrix,
    pub covariance_mode: CovarianceMode,
    pub feature_dim: usize,
    pub eps_scale: f64,
    /// Classes with `N_c ≤ d`: their raw covariance is rank deficient and only
    /// the ridge makes the precision exist.
    pub underdetermined_classes: Vec<usize>,
}

impl SourceStats {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total_samples(&self) -> usize {
        self.classes.iter().map(|c| c.n_samples).sum()
    }

    pub fn class(&self, label: usize) -> Result<&ClassGaussian> {
        self.classes.get(label).ok_or(Error::UnknownClass {
            label,
            n_classes: self.classes.len(),
        })
    }

    pub fn warnings(&self) -> Vec<String> {
        self.underdetermined_classes
            .iter()
            .map(|c| {
                format!(
                    "class {c}: {} samples for feature dim {}; covariance is rank deficient",
                    self.classes[*c].n_samples, self.feature_dim
                )
            })
            .collect()
    }

    /// Estimates the statistics directly from labeled feature rows.
    pub fn from_features(
        features: &Matrix,
        labels: &[usize],
        n_classes: usize,
        mode: CovarianceMode,
        eps_scale: f64,
    ) -> Result<Self> {
        let mut est = Estimator::new(features.cols(), n_classes);
        est.push_batch(features, labels)?;
        est.finish(mode, eps_scale)
    }

    /// Reassembles statistics from per-class moments, recomputing the tied
    /// covariance (if any) and every precision factor.
    pub fn from_parts(
        class_moments: Vec<(Vector, Matrix, usize)>,
        global_mu: Vector,
        global_sigma: Matrix,
        mode: CovarianceMode,
        eps_scale: f64,
    ) -> Result<Self> {
        validate_moments(&class_moments, &global_mu, &global_sigma, eps_scale)?;
        let tied = match mode {
            CovarianceMode::ClassWise => None,
            CovarianceMode::Tied => Some(pooled_within_class(&class_moments)),
        };
        let class_moments = match tied {
            None => class_moments,
            Some(t) => class_moments.into_iter().map(|(mu, _, n)| (mu, t.clone(), n)).collect(),
        };
        Self::assemble(class_moments, global_mu, global_sigma, mode, eps_scale)
    }

    /// Builds the statistics with each class's covariance taken as final.
    pub(crate) fn assemble(
        class_moments: Vec<(Vector, Matrix, usize)>,
        global_mu: Vector,
        global_sigma: Matrix,
        mode: CovarianceMode,
        eps_scale: f64,
    ) -> Result<Self> {
        validate_moments(&class_moments, &global_mu, &global_sigma, eps_scale)?;
        let d = global_mu.dim();
        let underdetermined_classes = class_moments
            .iter()
            .enumerate()
            .filter(|(_, (_, _, n))| *n <= d)
            .map(|(c, _)| c)
            .collect();
        let classes = class_moments
            .into_iter()
            .enumerate()
            .map(|(c, (mu, sigma, n))| ClassGaussian::new(c, mu, sigma, n, eps_scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(SourceStats {
            classes,
            global_mu,
            global_sigma,
            covariance_mode: mode,
            feature_dim: d,
            eps_scale,
            underdetermined_classes,
        })
    }
}

fn validate_moments(
    class_moments: &[(Vector, Matrix, usize)],
    global_mu: &Vector,
    global_sigma: &Matrix,
    eps_scale: f64,
) -> Result<()> {
    if !(eps_scale >= 0.0 && eps_scale.is_finite()) {
        return Err(Error::ConfigInvalid(format!("eps_scale {eps_scale} must be >= 0")));
    }
    let d = global_mu.dim();
    if global_sigma.shape() != (d, d) {
        return Err(Error::DimensionMismatch("global moments".into()));
    }
    if class_moments.is_empty() {
        return Err(Error::MissingClass(0));
    }
    for (c, (mu, sigma, n)) in class_moments.iter().enumerate() {
        if mu.dim() != d || sigma.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!("class {c} moments")));
        }
        if *n == 0 {
            return Err(Error::MissingClass(c));
        }
    }
    Ok(())
}

/// Sample-weighted average of the class covariances, written as
/// `Σ₀ + Σ_c (N_c/N)(Σ_c − Σ₀)` so identical inputs come back unchanged.
fn pooled_within_class(moments: &[(Vector, Matrix, usize)]) -> Matrix {
    let total: usize = moments.iter().map(|m| m.2).sum();
    let base = &moments[0].1;
    let mut pooled = base.clone();
    for (_, sigma, n) in moments {
        let w = *n as f64 / total as f64;
        for (p, (s, b)) in pooled
            .as_mut_slice()
            .iter_mut()
            .zip(sigma.as_slice().iter().zip(base.as_slice()))
        {
            *p += w * (s - b);
        }
    }
    pooled
}

/// Incremental pre-stage estimator; batches are folded in arrival order.
#[derive(Clone, Debug)]
pub struct Estimator {
    per_class: Vec<CovAccumulator>,
    global: CovAccumulator,
}

impl Estimator {
    pub fn new(feature_dim: usize, n_classes: usize) -> Self {
        Estimator {
            per_class: vec![CovAccumulator::new(feature_dim); n_classes],
            global: CovAccumulator::new(feature_dim),
        }
    }

    pub fn push_batch(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows with {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let n_classes = self.per_class.len();
        for (row, &label) in features.row_iter().zip(labels) {
            let acc = self
                .per_class
                .get_mut(label)
                .ok_or(Error::UnknownClass { label, n_classes })?;
            acc.push(row)?;
            self.global.push(row)?;
        }
        Ok(())
    }

    pub fn finish(self, mode: CovarianceMode, eps_scale: f64) -> Result<SourceStats> {
        let mut moments = Vec::with_capacity(self.per_class.len());
        for (c, acc) in self.per_class.iter().enumerate() {
            match acc.count() {
                0 => return Err(Error::MissingClass(c)),
                1 => {
                    return Err(Error::ConfigInvalid(format!(
                        "class {c} has a single sample; at least 2 are needed"
                    )))
                }
                n => moments.push((acc.mean(), acc.covariance()?, n)),
            }
        }
        let global_sigma = self.global.covariance()?;
        SourceStats::from_parts(moments, self.global.mean(), global_sigma, mode, eps_scale)
    }
}

/// Runs the pretrained feature extractor (running statistics) over labeled
/// source data and fits the class-conditional and global Gaussians.
pub fn estimate_source_stats(
    model: &AdaptiveModel,
    source_data: &[LabeledBatch],
    mode: CovarianceMode,
    eps_scale: f64,
) -> Result<SourceStats> {
    let mut est = Estimator::new(model.feature_dim(), model.n_classes());
    for batch in source_data {
        let feats = model.forward_features(&batch.inputs, StatMode::RunningEval)?;
        est.push_batch(&feats, &batch.labels)?;
    }
    est.finish(mode, eps_scale)
}
