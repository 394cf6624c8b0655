mod common;

use cafa::nn::{write_checkpoint, AdaptiveModel, ParamGroup, StatMode};
use cafa::stats::{CovarianceMode, SourceStats};
use cafa::tta::{adapt_stream, Adapter, LabeledBatch, Method, TtaConfig};
use cafa::Error;
use common::*;

fn shifted_stream(seed: u64, input_dim: usize, n_classes: usize, n_batches: usize) -> Vec<LabeledBatch> {
    let mut r = rng(seed);
    (0..n_batches)
        .map(|b| {
            let mut x = normal_matrix(&mut r, 24, input_dim, 1.0);
            let labels: Vec<usize> = (0..24).map(|i| (i + b) % n_classes).collect();
            for (i, &y) in labels.iter().enumerate() {
                let row = x.row_mut(i);
                row[y % input_dim] += 1.5;
                row.iter_mut().for_each(|v| *v = 1.8 * *v + 0.7);
            }
            LabeledBatch::new(x, labels).unwrap()
        })
        .collect()
}

fn setup() -> (AdaptiveModel, SourceStats, Vec<LabeledBatch>) {
    let model = small_model(11, 5, &[10, 6], 3);
    let stats = stats_for(&model, 12, CovarianceMode::ClassWise);
    (model, stats, shifted_stream(13, 5, 3, 6))
}

fn config(method: Method, group: ParamGroup, steps: usize) -> TtaConfig {
    let mut c = TtaConfig::for_method(method);
    c.param_group = group;
    if method.optimizes() {
        c.steps_per_batch = steps;
    }
    c.learning_rate = 1e-2;
    c
}

#[test]
fn source_leaves_model_bitwise_unchanged() {
    let (model, stats, batches) = setup();
    let before = write_checkpoint(&model);
    let (after, record) =
        adapt_stream(model, &stats, &batches, &config(Method::Source, ParamGroup::BnOnly, 0)).unwrap();
    assert_eq!(write_checkpoint(&after), before);
    assert_eq!(record.rows.len(), batches.len());
}

#[test]
fn bn_baseline_changes_predictions_not_parameters() {
    let (model, stats, batches) = setup();
    let before = write_checkpoint(&model);
    let (_, source) = adapt_stream(
        model.clone(),
        &stats,
        &batches,
        &config(Method::Source, ParamGroup::BnOnly, 0),
    )
    .unwrap();
    let (after, bn) = adapt_stream(model, &stats, &batches, &config(Method::Bn, ParamGroup::BnOnly, 0)).unwrap();
    assert_eq!(write_checkpoint(&after), before);
    let differs = source
        .rows
        .iter()
        .zip(&bn.rows)
        .any(|(a, b)| a.predictions != b.predictions);
    assert!(differs);
}

#[test]
fn predictions_precede_updates() {
    let (model, stats, batches) = setup();
    for method in [Method::Cafa, Method::Entropy, Method::GlobalFa] {
        let mut adapter = Adapter::new(
            model.clone(),
            &stats,
            config(method, ParamGroup::FeatureFull, 2),
            "replay",
        )
        .unwrap();
        for batch in &batches {
            let snapshot = adapter.model().clone();
            let expected = snapshot.predict(&batch.inputs, StatMode::BatchOnly).unwrap();
            let row = adapter.process_batch(batch).unwrap().clone();
            assert_eq!(row.predictions, expected, "{method}");
            let acc = expected.iter().zip(&batch.labels).filter(|(p, y)| p == y).count() as f64 / batch.len() as f64;
            assert_eq!(row.accuracy, acc);
            assert_ne!(
                write_checkpoint(adapter.model()),
                write_checkpoint(&snapshot),
                "{method} made no update"
            );
        }
    }
}

#[test]
fn parameter_group_containment() {
    let (model, stats, batches) = setup();
    for method in Method::ALL.into_iter().filter(|m| m.optimizes()) {
        for group in [ParamGroup::BnOnly, ParamGroup::FeatureFull] {
            let (after, _) = adapt_stream(model.clone(), &stats, &batches, &config(method, group, 2)).unwrap();
            let selected = model.group_ids(group);
            let mut moved = false;
            for id in model.param_ids() {
                let same = bits(&model, &id) == bits(&after, &id);
                if id.is_classifier() || !selected.contains(&id) {
                    assert!(same, "{method} {group:?} touched {id}");
                } else {
                    moved |= !same;
                }
            }
            assert!(moved, "{method} {group:?} updated nothing");
            for (a, b) in model.blocks().iter().zip(after.blocks()) {
                assert_eq!(a.bn.running_mean, b.bn.running_mean);
                assert_eq!(a.bn.running_var, b.bn.running_var);
            }
        }
    }
}

#[test]
fn every_configured_step_runs_once() {
    let (model, stats, batches) = setup();
    for steps in 1..=3 {
        let mut adapter = Adapter::new(
            model.clone(),
            &stats,
            config(Method::Cafa, ParamGroup::BnOnly, steps),
            "s",
        )
        .unwrap();
        for batch in &batches {
            adapter.process_batch(batch).unwrap();
        }
        assert_eq!(adapter.adam_state().t(), (steps * batches.len()) as u64);
        assert!(adapter.record().rows.iter().all(|r| r.steps_run == steps));
    }
}

#[test]
fn runs_are_deterministic() {
    let (model, stats, batches) = setup();
    for method in Method::ALL {
        let c = config(method, ParamGroup::BnOnly, 2);
        let (m1, r1) = adapt_stream(model.clone(), &stats, &batches, &c).unwrap();
        let (m2, r2) = adapt_stream(model.clone(), &stats, &batches, &c).unwrap();
        assert_eq!(write_checkpoint(&m1), write_checkpoint(&m2));
        for (a, b) in r1.rows.iter().zip(&r2.rows) {
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.mean_intra.to_bits(), b.mean_intra.to_bits());
            assert_eq!(a.mean_inter.to_bits(), b.mean_inter.to_bits());
            assert_eq!(a.predictions, b.predictions);
        }
    }
}

#[test]
fn record_rows_follow_stream_order() {
    let (model, stats, batches) = setup();
    let (_, record) = adapt_stream(model, &stats, &batches, &config(Method::Cafa, ParamGroup::BnOnly, 1)).unwrap();
    assert_eq!(record.header.n_batches, batches.len());
    for (i, row) in record.rows.iter().enumerate() {
        assert_eq!(row.batch_index, i);
        assert!((0.0..=1.0).contains(&row.accuracy));
        assert!(row.mean_intra >= 0.0 && row.mean_inter >= 0.0);
        assert!(row.loss < 0.0);
    }
    let parsed = cafa::tta::parse_rows(&record.to_csv().unwrap()).unwrap();
    assert_eq!(parsed.len(), record.rows.len());
    for (a, b) in parsed.iter().zip(&record.rows) {
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
}

#[test]
fn failures_keep_the_partial_record() {
    let (model, stats, mut batches) = setup();
    // a corrupt sample in the fourth batch is rejected before any update
    batches[3].inputs[(5, 2)] = f64::NAN;
    let err = adapt_stream(model, &stats, &batches, &config(Method::Cafa, ParamGroup::BnOnly, 1)).unwrap_err();
    assert_eq!(err.record.rows.len(), 3);
    assert!(matches!(err.error, Error::NonFinite), "{}", err.error);
    assert!(err.error.is_numerical());
}

#[test]
fn mismatched_stats_are_rejected() {
    let (model, _, _) = setup();
    let other = small_model(1, 5, &[10, 4], 3);
    let stats = stats_for(&other, 2, CovarianceMode::ClassWise);
    let r = Adapter::new(model, &stats, TtaConfig::for_method(Method::Cafa), "x");
    assert!(matches!(r, Err(Error::DimensionMismatch(_))));
}
