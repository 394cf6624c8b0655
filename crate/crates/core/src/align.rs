//! Mahalanobis distances, alignment losses and the baseline objectives.
//!
//! Every loss here comes in two shapes: a value-only public function and a
//! crate-internal `*_grad` variant that also returns the gradient with respect
//! to its input matrix (features or logits). [`crate::nn::grad`] chains those
//! input gradients back into the network.

use crate::error::{Error, Result};
use crate::numcore::{mean_and_cov_rows, Matrix};
use crate::stats::{ClassGaussian, SourceStats};

/// Lower clamp on both sides of the class-aware log ratio.
pub const CAFA_CLAMP: f64 = 1e-12;

/// Objective optimized by [`crate::nn::grad`].
#[derive(Clone, Copy, Debug)]
pub enum LossSpec<'a> {
    /// Squared distance between batch and source feature moments.
    GlobalFa(&'a SourceStats),
    /// Mean Mahalanobis distance to the predicted class.
    IntraOnly(&'a SourceStats),
    /// Mean log ratio of predicted-class distance to the sum over classes.
    Cafa(&'a SourceStats),
    /// Mean prediction entropy.
    Entropy,
    /// Cross-entropy against the batch's own argmax predictions.
    PseudoLabelCe,
    /// Cross-entropy against true labels; source pre-training only.
    SupervisedCe(&'a [usize]),
    None,
}

impl LossSpec<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::GlobalFa(_) => "global-fa",
            LossSpec::IntraOnly(_) => "intra-only",
            LossSpec::Cafa(_) => "cafa",
            LossSpec::Entropy => "entropy",
            LossSpec::PseudoLabelCe => "pseudo-label",
            LossSpec::SupervisedCe(_) => "supervised-ce",
            LossSpec::None => "none",
        }
    }

    pub fn source_stats(&self) -> Option<&SourceStats> {
        match self {
            LossSpec::GlobalFa(s) | LossSpec::IntraOnly(s) | LossSpec::Cafa(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceReport {
    pub mean_intra: f64,
    pub mean_inter: f64,
}

/// Loss value plus its gradient with respect to features and/or logits.
#[derive(Clone, Debug)]
pub(crate) struct LossGrad {
    pub value: f64,
    pub d_features: Option<Matrix>,
    pub d_logits: Option<Matrix>,
}

pub fn mahalanobis(x_feat: &[f64], g: &ClassGaussian) -> Result<f64> {
    g.distance(x_feat)
}

pub fn intra_distance(x_feat: &[f64], label: usize, stats: &SourceStats) -> Result<f64> {
    stats.class(label)?.distance(x_feat)
}

pub fn inter_distance(x_feat: &[f64], label: usize, stats: &SourceStats) -> Result<f64> {
    let c = stats.n_classes();
    if c < 2 {
        return Err(Error::SingleClass);
    }
    stats.class(label)?;
    let mut sum = 0.0;
    for g in stats.classes.iter().filter(|g| g.class_id != label) {
        sum += g.distance(x_feat)?;
    }
    Ok(sum / (c - 1) as f64)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_feats(feats: &Matrix, stats: &SourceStats) -> Result<()> {
    if feats.cols() != stats.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "features of dim {} vs source stats of dim {}",
            feats.cols(),
            stats.feature_dim
        )));
    }
    Ok(())
}

fn check_labels(n_rows: usize, labels: &[usize], n_classes: usize) -> Result<()> {
    if labels.len() != n_rows {
        return Err(Error::DimensionMismatch(format!(
            "{n_rows} rows with {} labels",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::UnknownClass { label, n_classes });
    }
    Ok(())
}

pub fn loss_global_fa(batch_feats: &Matrix, stats: &SourceStats) -> Result<f64> {
    Ok(global_fa_grad(batch_feats, stats, false)?.value)
}

pub(crate) fn global_fa_grad(feats: &Matrix, stats: &SourceStats, want_grad: bool) -> Result<LossGrad> {
    check_feats(feats, stats)?;
    let n = feats.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let (mu_t, sigma_t) = mean_and_cov_rows(feats)?;
    let mean_diff = mu_t.sub(&stats.global_mu);
    let cov_diff = sigma_t.sub(&stats.global_sigma)?;
    let value = mean_diff.norm_sq() + cov_diff.frobenius_sq();

    let d_features = want_grad.then(|| {
        // ∂/∂x_n = (2/N)(μ_t − μ_s) + (4/N)(Σ_t − Σ_s)(x_n − μ_t)
        let nf = n as f64;
        let mut g = Matrix::zeros(n, feats.cols());
        for (i, row) in feats.row_iter().enumerate() {
            let centered: Vec<f64> = row.iter().zip(mu_t.iter()).map(|(x, m)| x - m).collect();
            let cov_term = cov_diff.matvec(&centered).expect("square");
            for (j, out) in g.row_mut(i).iter_mut().enumerate() {
                *out = 2.0 / nf * mean_diff[j] + 4.0 / nf * cov_term[j];
            }
        }
        g
    });
    Ok(LossGrad {
        value,
        d_features,
        d_logits: None,
    })
}

pub fn loss_intra(batch_feats: &Matrix, pseudo_labels: &[usize], stats: &SourceStats) -> Result<f64> {
    Ok(intra_grad(batch_feats, pseudo_labels, stats, false)?.value)
}

pub(crate) fn intra_grad(feats: &Matrix, labels: &[usize], stats: &SourceStats, want_grad: bool) -> Result<LossGrad> {
    check_feats(feats, stats)?;
    check_labels(feats.rows(), labels, stats.n_classes())?;
    let n = feats.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let nf = n as f64;
    let mut sum = 0.0;
    let mut g = want_grad.then(|| Matrix::zeros(n, feats.cols()));
    for (i, (row, &label)) in feats.row_iter().zip(labels).enumerate() {
        let gauss = &stats.classes[label];
        if let Some(g) = g.as_mut() {
            let (d, dir) = gauss.distance_with_direction(row)?;
            sum += d;
            for (out, v) in g.row_mut(i).iter_mut().zip(dir.iter()) {
                *out = 2.0 * v / nf;
            }
        } else {
            sum += gauss.distance(row)?;
        }
    }
    Ok(LossGrad {
        value: sum / nf,
        d_features: g,
        d_logits: None,
    })
}

pub fn loss_cafa(batch_feats: &Matrix, pseudo_labels: &[usize], stats: &SourceStats) -> Result<f64> {
    Ok(cafa_grad(batch_feats, pseudo_labels, stats, false)?.value)
}

pub(crate) fn cafa_grad(feats: &Matrix, labels: &[usize], stats: &SourceStats, want_grad: bool) -> Result<LossGrad> {
    check_feats(feats, stats)?;
    check_labels(feats.rows(), labels, stats.n_classes())?;
    let n = feats.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let nf = n as f64;
    let d = feats.cols();
    let mut sum = 0.0;
    let mut g = want_grad.then(|| Matrix::zeros(n, d));
    let mut dists = Vec::with_capacity(stats.n_classes());
    let mut dirs = Vec::with_capacity(stats.n_classes());
    for (i, (row, &label)) in feats.row_iter().zip(labels).enumerate() {
        dists.clear();
        dirs.clear();
        for gauss in &stats.classes {
            if want_grad {
                let (dist, dir) = gauss.distance_with_direction(row)?;
                dists.push(dist);
                dirs.push(dir);
            } else {
                dists.push(gauss.distance(row)?);
            }
        }
        let numer = dists[label];
        let denom: f64 = dists.iter().sum();
        let numer_c = numer.max(CAFA_CLAMP);
        let denom_c = denom.max(CAFA_CLAMP);
        sum += (numer_c / denom_c).ln();

        if let Some(g) = g.as_mut() {
            // ∂ log D_y = 2 P_y(x−μ_y) / D_y, ∂ log ΣD = Σ_c 2 P_c(x−μ_c) / ΣD;
            // a clamped side contributes nothing.
            let out = g.row_mut(i);
            if numer > CAFA_CLAMP {
                for (o, v) in out.iter_mut().zip(dirs[label].iter()) {
                    *o += 2.0 * v / numer / nf;
                }
            }
            if denom > CAFA_CLAMP {
                for dir in &dirs {
                    for (o, v) in out.iter_mut().zip(dir.iter()) {
                        *o -= 2.0 * v / denom / nf;
                    }
                }
            }
        }
    }
    Ok(LossGrad {
        value: sum / nf,
        d_features: g,
        d_logits: None,
    })
}

/// Log-softmax of one row via log-sum-exp.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn loss_entropy(logits: &Matrix) -> Result<f64> {
    Ok(entropy_grad(logits, false)?.value)
}

pub(crate) fn entropy_grad(logits: &Matrix, want_grad: bool) -> Result<LossGrad> {
    let n = logits.rows();
    if n == 0 || logits.cols() == 0 {
        return Err(Error::EmptyInput);
    }
    let nf = n as f64;
    let mut sum = 0.0;
    let mut g = want_grad.then(|| Matrix::zeros(n, logits.cols()));
    for (i, row) in logits.row_iter().enumerate() {
        let logp = log_softmax(row);
        let h: f64 = -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>();
        sum += h;
        if let Some(g) = g.as_mut() {
            // ∂H/∂z_j = −p_j (log p_j + H)
            for (o, lp) in g.row_mut(i).iter_mut().zip(&logp) {
                *o = -lp.exp() * (lp + h) / nf;
            }
        }
    }
    Ok(LossGrad {
        value: sum / nf,
        d_features: None,
        d_logits: g,
    })
}

pub fn loss_pseudo_label(logits: &Matrix, pseudo_labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_grad(logits, pseudo_labels, false)?.value)
}

pub(crate) fn cross_entropy_grad(logits: &Matrix, labels: &[usize], want_grad: bool) -> Result<LossGrad> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    check_labels(n, labels, logits.cols())?;
    let nf = n as f64;
    let mut sum = 0.0;
    let mut g = want_grad.then(|| Matrix::zeros(n, logits.cols()));
    for (i, (row, &label)) in logits.row_iter().zip(labels).enumerate() {
        let logp = log_softmax(row);
        sum -= logp[label];
        if let Some(g) = g.as_mut() {
            for (j, (o, lp)) in g.row_mut(i).iter_mut().zip(&logp).enumerate() {
                let target = if j == label { 1.0 } else { 0.0 };
                *o = (lp.exp() - target) / nf;
            }
        }
    }
    Ok(LossGrad {
        value: sum / nf,
        d_features: None,
        d_logits: g,
    })
}

/// Evaluates `spec` on one forward pass. Pseudo labels are the argmax of
/// `logits`, treated as constants.
pub(crate) fn evaluate(spec: &LossSpec, feats: &Matrix, logits: &Matrix, want_grad: bool) -> Result<LossGrad> {
    let lg = match spec {
        LossSpec::GlobalFa(s) => global_fa_grad(feats, s, want_grad)?,
        LossSpec::IntraOnly(s) => intra_grad(feats, &argmax_rows(logits), s, want_grad)?,
        LossSpec::Cafa(s) => cafa_grad(feats, &argmax_rows(logits), s, want_grad)?,
        LossSpec::Entropy => entropy_grad(logits, want_grad)?,
        LossSpec::PseudoLabelCe => cross_entropy_grad(logits, &argmax_rows(logits), want_grad)?,
        LossSpec::SupervisedCe(labels) => cross_entropy_grad(logits, labels, want_grad)?,
        LossSpec::None => LossGrad {
            value: 0.0,
            d_features: None,
            d_logits: None,
        },
    };
    if !lg.value.is_finite() {
        return Err(Error::NonFiniteLoss(lg.value));
    }
    Ok(lg)
}

/// Batch means of the intra- and inter-class distances under ground-truth
/// labels. Instrumentation only.
pub fn distance_report(batch_feats: &Matrix, true_labels: &[usize], stats: &SourceStats) -> Result<DistanceReport> {
    check_feats(batch_feats, stats)?;
    check_labels(batch_feats.rows(), true_labels, stats.n_classes())?;
    if stats.n_classes() < 2 {
        return Err(Error::SingleClass);
    }
    let n = batch_feats.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut intra = 0.0;
    let mut inter = 0.0;
    for (row, &label) in batch_feats.row_iter().zip(true_labels) {
        intra += intra_distance(row, label, stats)?;
        inter += inter_distance(row, label, stats)?;
    }
    Ok(DistanceReport {
        mean_intra: intra / n as f64,
        mean_inter: inter / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Vector;
    use crate::stats::CovarianceMode;

    fn identity_stats(means: &[Vec<f64>]) -> SourceStats {
        let d = means[0].len();
        let moments = means
            .iter()
            .map(|m| (Vector::from(m.clone()), Matrix::identity(d), 100))
            .collect();
        SourceStats::from_parts(
            moments,
            Vector::zeros(d),
            Matrix::identity(d),
            CovarianceMode::ClassWise,
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn distance_zero_at_mean() {
        let s = identity_stats(&[vec![1.0, 2.0]]);
        assert_eq!(mahalanobis(&[1.0, 2.0], &s.classes[0]).unwrap(), 0.0);
    }

    #[test]
    fn euclidean_case() {
        let s = identity_stats(&[vec![0.0, 0.0]]);
        let d = mahalanobis(&[3.0, 4.0], &s.classes[0]).unwrap();
        let eps = 1e-6;
        assert!((d - 25.0 / (1.0 + eps)).abs() < 1e-12);
        assert!(matches!(
            mahalanobis(&[1.0], &s.classes[0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn intra_and_inter_symmetric_pair() {
        let s = identity_stats(&[vec![-1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(intra_distance(&[-1.0, 0.0], 0, &s).unwrap(), 0.0);
        assert_eq!(intra_distance(&[1.0, 0.0], 1, &s).unwrap(), 0.0);
        assert!(intra_distance(&[1.0, 0.0], 0, &s).unwrap() > 0.0);
        let inter = inter_distance(&[1.0, 0.0], 1, &s).unwrap();
        assert_eq!(inter, mahalanobis(&[1.0, 0.0], &s.classes[0]).unwrap());
        assert!(matches!(
            intra_distance(&[0.0, 0.0], 2, &s),
            Err(Error::UnknownClass { label: 2, .. })
        ));
    }

    #[test]
    fn inter_of_equidistant_point() {
        let s = identity_stats(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]);
        let v = mahalanobis(&[0.0, 0.0], &s.classes[1]).unwrap();
        let inter = inter_distance(&[0.0, 0.0], 0, &s).unwrap();
        assert!((inter - v).abs() < 1e-15);
    }

    #[test]
    fn single_class_inter_is_undefined() {
        let s = identity_stats(&[vec![0.0]]);
        assert!(matches!(inter_distance(&[1.0], 0, &s), Err(Error::SingleClass)));
    }

    #[test]
    fn global_fa_constructed_match() {
        let moments = vec![(Vector::from(vec![0.0]), Matrix::identity(1), 10)];
        let s = SourceStats::from_parts(
            moments,
            Vector::from(vec![0.0]),
            Matrix::identity(1),
            CovarianceMode::ClassWise,
            1e-6,
        )
        .unwrap();
        let batch = Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(loss_global_fa(&batch, &s).unwrap(), 0.0);
        let one = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(loss_global_fa(&one, &s), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn cafa_single_class_is_zero() {
        let s = identity_stats(&[vec![0.5, -0.5]]);
        let batch = Matrix::from_rows(&[vec![3.0, 1.0], vec![-2.0, 0.0], vec![0.5, -0.5]]).unwrap();
        assert_eq!(loss_cafa(&batch, &[0, 0, 0], &s).unwrap(), 0.0);
    }

    #[test]
    fn cafa_clamps_at_class_mean() {
        let s = identity_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        let batch = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let v = mahalanobis(&[0.0, 0.0], &s.classes[1]).unwrap();
        let expected = (CAFA_CLAMP / (0.0 + v)).ln();
        assert_eq!(loss_cafa(&batch, &[0], &s).unwrap(), expected);
    }

    #[test]
    fn entropy_extremes() {
        let peaked = Matrix::from_rows(&[vec![1e6, 0.0, 0.0]]).unwrap();
        assert!(loss_entropy(&peaked).unwrap().abs() < 1e-12);
        let uniform = Matrix::from_rows(&[vec![0.3; 4], vec![-2.0; 4]]).unwrap();
        assert!((loss_entropy(&uniform).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_extremes() {
        let peaked = Matrix::from_rows(&[vec![0.0, 1e6, 0.0]]).unwrap();
        assert!(loss_pseudo_label(&peaked, &[1]).unwrap().abs() < 1e-12);
        let uniform = Matrix::from_rows(&[vec![1.0; 4], vec![1.0; 4]]).unwrap();
        assert!((loss_pseudo_label(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            loss_pseudo_label(&uniform, &[0, 4]),
            Err(Error::UnknownClass { label: 4, n_classes: 4 })
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let l = Matrix::from_rows(&[vec![0.1, 0.9, 0.2], vec![0.5, 0.5, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&l), vec![1, 0]);
    }

    #[test]
    fn report_at_true_means() {
        let s = identity_stats(&[vec![-1.0, 0.0], vec![1.0, 0.0]]);
        let batch = Matrix::from_rows(&[vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let r = distance_report(&batch, &[0, 1], &s).unwrap();
        assert_eq!(r.mean_intra, 0.0);
        let cross = mahalanobis(&[-1.0, 0.0], &s.classes[1]).unwrap();
        assert_eq!(r.mean_inter, cross);
    }

    #[test]
    fn evaluate_flags_non_finite() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let feats = Matrix::zeros(1, 2);
        let lg = evaluate(&LossSpec::None, &feats, &logits, true).unwrap();
        assert_eq!(lg.value, 0.0);
    }
}
