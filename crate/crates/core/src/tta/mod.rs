//! Online test-time adaptation.
//!
//! Batches arrive in order. For each one the engine first predicts with the
//! current model (that prediction is what gets scored), then runs the
//! configured number of optimization steps on the selected parameter group.
//! A batch is never revisited.

mod adam;
mod record;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamHyper, AdamState};
pub use record::{parse_rows, BatchRow, RunHeader, RunRecord, RECORD_COLUMNS};

use crate::align::{self, LossSpec};
use crate::error::{Error, Result};
use crate::nn::{self, AdaptiveModel, ParamGroup, StatMode};
use crate::numcore::Matrix;
use crate::stats::SourceStats;

/// Inputs with their ground-truth labels. Labels are read for metrics only.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows with {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits into consecutive batches of `size` rows; a short tail is
    /// dropped.
    pub fn chunks(&self, size: usize) -> Vec<LabeledBatch> {
        if size == 0 {
            return Vec::new();
        }
        (0..self.len() / size)
            .map(|b| {
                let idx: Vec<usize> = (b * size..(b + 1) * size).collect();
                LabeledBatch {
                    inputs: self.inputs.select_rows(&idx),
                    labels: self.labels[b * size..(b + 1) * size].to_vec(),
                }
            })
            .collect()
    }
}

/// Adaptation method: baselines and the alignment losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// No adaptation, running BN statistics.
    Source,
    /// No optimization, current-batch BN statistics.
    Bn,
    PseudoLabel,
    Entropy,
    GlobalFa,
    IntraOnly,
    Cafa,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Source,
        Method::Bn,
        Method::PseudoLabel,
        Method::Entropy,
        Method::GlobalFa,
        Method::IntraOnly,
        Method::Cafa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::Bn => "bn",
            Method::PseudoLabel => "pseudo-label",
            Method::Entropy => "entropy",
            Method::GlobalFa => "global-fa",
            Method::IntraOnly => "intra-only",
            Method::Cafa => "cafa",
        }
    }

    pub fn optimizes(self) -> bool {
        !matches!(self, Method::Source | Method::Bn)
    }

    pub fn stat_mode(self) -> StatMode {
        match self {
            Method::Source => StatMode::RunningEval,
            _ => StatMode::BatchOnly,
        }
    }

    pub fn loss_spec(self, stats: &SourceStats) -> LossSpec<'_> {
        match self {
            Method::Source | Method::Bn => LossSpec::None,
            Method::PseudoLabel => LossSpec::PseudoLabelCe,
            Method::Entropy => LossSpec::Entropy,
            Method::GlobalFa => LossSpec::GlobalFa(stats),
            Method::IntraOnly => LossSpec::IntraOnly(stats),
            Method::Cafa => LossSpec::Cafa(stats),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaConfig {
    pub method: Method,
    pub param_group: ParamGroup,
    pub steps_per_batch: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl TtaConfig {
    /// Defaults for `method`: BN-only updates, one step per batch for
    /// optimizing methods, Adam (0.9, 0.999, 1e-8), lr 1e-3, batch 64.
    pub fn for_method(method: Method) -> Self {
        TtaConfig {
            method,
            param_group: ParamGroup::BnOnly,
            steps_per_batch: usize::from(method.optimizes()),
            learning_rate: 1e-3,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.method.optimizes() && self.steps_per_batch == 0 {
            return bad(format!("{} needs steps_per_batch >= 1", self.method));
        }
        if !self.method.optimizes() && self.steps_per_batch != 0 {
            return bad(format!("{} does not optimize; steps_per_batch must be 0", self.method));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be >= 2", self.batch_size));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0,1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps {} must be > 0", self.adam_eps));
        }
        Ok(())
    }
}

/// Adaptation engine owning one model for the length of a stream.
pub struct Adapter<'s> {
    model: AdaptiveModel,
    stats: &'s SourceStats,
    config: TtaConfig,
    adam: AdamState,
    record: RunRecord,
}

impl<'s> Adapter<'s> {
    pub fn new(
        model: AdaptiveModel,
        stats: &'s SourceStats,
        config: TtaConfig,
        label: impl Into<String>,
    ) -> Result<Self> {
        config.validate()?;
        if stats.feature_dim != model.feature_dim() || stats.n_classes() != model.n_classes() {
            return Err(Error::DimensionMismatch(format!(
                "stats for d={} C={} vs model with d={} C={}",
                stats.feature_dim,
                stats.n_classes(),
                model.feature_dim(),
                model.n_classes()
            )));
        }
        Ok(Adapter {
            model,
            stats,
            record: RunRecord::new(label, config.clone()),
            config,
            adam: AdamState::new(),
        })
    }

    pub fn model(&self) -> &AdaptiveModel {
        &self.model
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn into_parts(self) -> (AdaptiveModel, RunRecord) {
        (self.model, self.record)
    }

    /// Predicts on `batch`, scores the prediction, then adapts on it.
    pub fn process_batch(&mut self, batch: &LabeledBatch) -> Result<&BatchRow> {
        let start = Instant::now();
        let method = self.config.method;
        let mode = method.stat_mode();

        let (feats, logits) = self.model.forward(&batch.inputs, mode)?;
        let predictions = align::argmax_rows(&logits);
        let correct = predictions.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        let accuracy = correct as f64 / batch.len() as f64;
        let report = align::distance_report(&feats, &batch.labels, self.stats)?;

        let spec = method.loss_spec(self.stats);
        debug_assert!(
            !matches!(spec, LossSpec::SupervisedCe(_)),
            "adaptation losses never see ground-truth labels"
        );
        let hyper = self.config.adam();
        let mut loss = if self.config.steps_per_batch == 0 {
            nn::loss_value(&self.model, &batch.inputs, mode, &spec)?
        } else {
            0.0
        };
        for step in 0..self.config.steps_per_batch {
            let g = nn::grad(&self.model, &batch.inputs, mode, &spec, self.config.param_group)?;
            if step == 0 {
                loss = g.loss;
            }
            adam_step(&mut self.model, &g.grads, &mut self.adam, &hyper)?;
        }

        let row = BatchRow {
            batch_index: self.record.rows.len(),
            accuracy,
            loss,
            mean_intra: report.mean_intra,
            mean_inter: report.mean_inter,
            wall_time_s: start.elapsed().as_secs_f64(),
            predictions,
            steps_run: self.config.steps_per_batch,
        };
        self.record.push(row);
        Ok(self.record.rows.last().expect("just pushed"))
    }
}

/// A run that stopped early, with everything recorded before the failure.
#[derive(Debug)]
pub struct AdaptFailure {
    pub error: Error,
    pub record: RunRecord,
}

impl fmt::Display for AdaptFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "adaptation `{}` failed after {} batches: {}",
            self.record.label(),
            self.record.rows.len(),
            self.error
        )
    }
}

impl std::error::Error for AdaptFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `config` over `batches` in order, starting from `model`.
pub fn adapt_stream(
    model: AdaptiveModel,
    stats: &SourceStats,
    batches: &[LabeledBatch],
    config: &TtaConfig,
) -> std::result::Result<(AdaptiveModel, RunRecord), AdaptFailure> {
    adapt_stream_labeled(model, stats, batches, config, config.method.name())
}

pub fn adapt_stream_labeled(
    model: AdaptiveModel,
    stats: &SourceStats,
    batches: &[LabeledBatch],
    config: &TtaConfig,
    label: &str,
) -> std::result::Result<(AdaptiveModel, RunRecord), AdaptFailure> {
    let mut adapter = Adapter::new(model, stats, config.clone(), label).map_err(|error| AdaptFailure {
        error,
        record: RunRecord::new(label, config.clone()),
    })?;
    for batch in batches {
        if let Err(error) = adapter.process_batch(batch) {
            let (_, record) = adapter.into_parts();
            return Err(AdaptFailure { error, record });
        }
    }
    Ok(adapter.into_parts())
}
