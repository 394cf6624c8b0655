use cafa::numcore::{mean_and_cov_rows, spd_factor, Matrix};
use cafa::tta::LabeledBatch;
use cafa::Error;
use cafa_bench::synthetic::{generate_dataset, generate_source, ShiftSpec, SyntheticSpec, Transform, SEVERITY_SCALE};

fn pooled(batches: &[LabeledBatch]) -> LabeledBatch {
    let d = batches[0].inputs.cols();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for b in batches {
        data.extend_from_slice(b.inputs.as_slice());
        labels.extend_from_slice(&b.labels);
    }
    LabeledBatch::new(Matrix::from_vec(labels.len(), d, data).unwrap(), labels).unwrap()
}

fn class_rows(batch: &LabeledBatch, c: usize) -> Matrix {
    let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.labels[i] == c).collect();
    batch.inputs.select_rows(&idx)
}

#[test]
fn unshifted_stream_matches_the_source_mixture() {
    let spec = SyntheticSpec::default();
    let stream = pooled(&generate_dataset(&spec, None, 40, 64).unwrap());
    for c in 0..spec.n_classes {
        let rows = class_rows(&stream, c);
        let n = rows.rows() as f64;
        let (mean, _) = mean_and_cov_rows(&rows).unwrap();
        for k in 0..spec.input_dim {
            let se = (spec.covariances[c][k][k] / n).sqrt();
            let diff = (mean[k] - spec.means[c][k]).abs();
            assert!(
                diff < 3.0 * se,
                "class {c} dim {k}: |Δ| {diff:e} vs 3σ/√N {:e}",
                3.0 * se
            );
        }
    }
}

#[test]
fn empty_shift_is_identity() {
    let spec = SyntheticSpec::default().with_seed(4);
    let a = generate_dataset(&spec, None, 5, 32).unwrap();
    let b = generate_dataset(&spec, Some(&ShiftSpec::none()), 5, 32).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.inputs, y.inputs);
        assert_eq!(x.labels, y.labels);
    }
}

#[test]
fn mean_shift_moves_the_empirical_mean() {
    let spec = SyntheticSpec::default().with_seed(9);
    let v: Vec<f64> = (0..spec.input_dim).map(|k| 0.5 - 0.2 * k as f64).collect();
    let shift = ShiftSpec {
        transforms: vec![Transform::MeanShift { vector: v.clone() }],
        severity: 5,
    };
    let s = SEVERITY_SCALE[4];
    let base = pooled(&generate_dataset(&spec, None, 40, 64).unwrap());
    let moved = pooled(&generate_dataset(&spec, Some(&shift), 40, 64).unwrap());
    let (m0, _) = mean_and_cov_rows(&base.inputs).unwrap();
    let (m1, _) = mean_and_cov_rows(&moved.inputs).unwrap();
    for k in 0..spec.input_dim {
        // the same draws underlie both streams, so the difference is exact
        assert!((m1[k] - m0[k] - s * v[k]).abs() < 1e-12);
    }
    // and against the population mean, within sampling error
    let n = moved.len() as f64;
    for k in 0..spec.input_dim {
        let pop: f64 = spec.means.iter().map(|m| m[k]).sum::<f64>() / spec.n_classes as f64;
        let spread: f64 = spec.means.iter().map(|m| (m[k] - pop).powi(2)).sum::<f64>() / spec.n_classes as f64;
        let var: f64 = spec.covariances.iter().map(|c| c[k][k]).sum::<f64>() / spec.n_classes as f64 + spread;
        assert!((m1[k] - pop - s * v[k]).abs() < 3.0 * (var / n).sqrt(), "dim {k}");
    }
}

fn mean_distance_to_true_class(spec: &SyntheticSpec, shift: &ShiftSpec) -> f64 {
    let stream = pooled(&generate_dataset(spec, Some(shift), 10, 64).unwrap());
    let factors: Vec<_> = spec
        .covariances
        .iter()
        .map(|c| spd_factor(&Matrix::from_rows(c).unwrap()).unwrap())
        .collect();
    let total: f64 = (0..stream.len())
        .map(|i| {
            let y = stream.labels[i];
            let diff: Vec<f64> = stream
                .inputs
                .row(i)
                .iter()
                .zip(&spec.means[y])
                .map(|(x, m)| x - m)
                .collect();
            factors[y].inv_quad_form(&diff).unwrap()
        })
        .sum();
    total / stream.len() as f64
}

#[test]
fn severity_increases_distance_to_the_true_class() {
    let shifts: Vec<ShiftSpec> = vec![
        ShiftSpec::noise(1),
        ShiftSpec {
            transforms: vec![Transform::Scaling { factors: vec![1.5; 8] }],
            severity: 1,
        },
        ShiftSpec {
            transforms: vec![Transform::Rotation {
                angle: 0.8,
                plane: (0, 1),
            }],
            severity: 1,
        },
        ShiftSpec {
            transforms: vec![Transform::MeanShift { vector: vec![0.5; 8] }],
            severity: 1,
        },
    ];
    for base in shifts {
        let curve: Vec<f64> = (1..=5u8)
            .map(|sev| {
                let shift = ShiftSpec {
                    severity: sev,
                    ..base.clone()
                };
                (0..5)
                    .map(|seed| mean_distance_to_true_class(&SyntheticSpec::default().with_seed(seed), &shift))
                    .sum::<f64>()
                    / 5.0
            })
            .collect();
        assert!(
            curve.windows(2).all(|w| w[0] < w[1]),
            "{:?}: {curve:?}",
            base.transforms
        );
    }
}

#[test]
fn shifts_preserve_labels() {
    let spec = SyntheticSpec::default().with_seed(2);
    let clean = generate_dataset(&spec, None, 6, 50).unwrap();
    let all = ShiftSpec {
        transforms: vec![
            Transform::AdditiveGaussianNoise { sigma: 1.0 },
            Transform::MeanShift { vector: vec![1.0; 8] },
            Transform::Scaling { factors: vec![0.5; 8] },
            Transform::Rotation {
                angle: 1.0,
                plane: (2, 5),
            },
        ],
        severity: 5,
    };
    let shifted = generate_dataset(&spec, Some(&all), 6, 50).unwrap();
    assert_eq!(clean.len(), shifted.len());
    for (a, b) in clean.iter().zip(&shifted) {
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.inputs, b.inputs);
    }
}

#[test]
fn streams_are_balanced_and_sized() {
    let spec = SyntheticSpec::default();
    let stream = generate_dataset(&spec, None, 60, 64).unwrap();
    assert_eq!(stream.len(), 60);
    assert!(stream.iter().all(|b| b.len() == 64 && b.inputs.cols() == 8));
    let all = pooled(&stream);
    for c in 0..3 {
        assert_eq!(all.labels.iter().filter(|&&y| y == c).count(), 1280);
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = SyntheticSpec::default().with_seed(17);
    let shift = ShiftSpec::noise(5);
    let a = generate_dataset(&spec, Some(&shift), 4, 32).unwrap();
    let b = generate_dataset(&spec, Some(&shift), 4, 32).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let xb: Vec<u64> = x.inputs.as_slice().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.inputs.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
        assert_eq!(x.labels, y.labels);
    }
    let c = generate_dataset(&spec.clone().with_seed(18), Some(&shift), 4, 32).unwrap();
    assert_ne!(a[0].inputs, c[0].inputs);

    let s1 = generate_source(&spec).unwrap();
    let s2 = generate_source(&spec).unwrap();
    assert_eq!(s1.train.inputs, s2.train.inputs);
    assert_eq!(s1.test.labels, s2.test.labels);
    assert_ne!(s1.train.inputs.row(0), s1.test.inputs.row(0));
}

#[test]
fn invalid_specs_are_rejected() {
    let mut dup = SyntheticSpec::default();
    dup.means[1] = dup.means[0].clone();
    assert!(matches!(dup.validate(), Err(Error::ConfigInvalid(_))));

    let mut indefinite = SyntheticSpec::separable_2d(0);
    indefinite.covariances[0] = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
    assert!(matches!(indefinite.validate(), Err(Error::ConfigInvalid(_))));

    let mut short = SyntheticSpec::default();
    short.means[2].pop();
    assert!(matches!(generate_source(&short), Err(Error::ConfigInvalid(_))));

    let spec = SyntheticSpec::default();
    let bad_severity = ShiftSpec {
        severity: 6,
        ..ShiftSpec::noise(1)
    };
    assert!(matches!(
        generate_dataset(&spec, Some(&bad_severity), 2, 8),
        Err(Error::ConfigInvalid(_))
    ));
    let bad_plane = ShiftSpec {
        transforms: vec![Transform::Rotation {
            angle: 1.0,
            plane: (3, 3),
        }],
        severity: 1,
    };
    assert!(matches!(bad_plane.validate(8), Err(Error::ConfigInvalid(_))));
    assert!(matches!(
        generate_dataset(&spec, None, 0, 8),
        Err(Error::ConfigInvalid(_))
    ));
}

#[test]
fn severity_scale_is_strictly_increasing() {
    assert!(SEVERITY_SCALE.windows(2).all(|w| w[0] < w[1]));
    let scales: Vec<f64> = (1..=5).map(|s| ShiftSpec::noise(s).scale().unwrap()).collect();
    assert_eq!(scales, SEVERITY_SCALE);
}
