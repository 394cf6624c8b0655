//! Experiment configuration and the method-comparison driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use cafa::nn::{load_checkpoint, save_checkpoint, AdaptiveModel, Architecture, ParamGroup};
use cafa::stats::{estimate_source_stats, load_stats, save_stats, CovarianceMode, SourceStats};
use cafa::tta::{adapt_stream_labeled, LabeledBatch, Method, RunRecord, TtaConfig};
use cafa::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::pretrain::{pretrain_source, PretrainConfig};
use crate::report::{write_report, SummaryRow};
use crate::synthetic::{generate_dataset, generate_source, ShiftSpec, SyntheticSpec};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STATS_FILE: &str = "source.stats";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub covariance_mode: CovarianceMode,
    pub eps_scale: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            covariance_mode: CovarianceMode::ClassWise,
            eps_scale: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub n_batches: usize,
    pub batch_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            n_batches: 60,
            batch_size: 64,
        }
    }
}

/// Settings shared by every method unless a method entry overrides them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationDefaults {
    pub param_group: ParamGroup,
    /// Steps for methods that optimize; baselines always take 0.
    pub steps_per_batch: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for AdaptationDefaults {
    fn default() -> Self {
        let base = TtaConfig::for_method(Method::Cafa);
        AdaptationDefaults {
            param_group: base.param_group,
            steps_per_batch: 1,
            learning_rate: 1e-2,
            adam_beta1: base.adam_beta1,
            adam_beta2: base.adam_beta2,
            adam_eps: base.adam_eps,
            seed: base.seed,
        }
    }
}

/// One method to run; unset fields come from [`AdaptationDefaults`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: Method,
    /// Names the output files; defaults to the method name.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub param_group: Option<ParamGroup>,
    #[serde(default)]
    pub steps_per_batch: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

impl MethodEntry {
    pub fn new(method: Method) -> Self {
        MethodEntry {
            method,
            label: None,
            param_group: None,
            steps_per_batch: None,
            learning_rate: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn tta_config(&self, defaults: &AdaptationDefaults, batch_size: usize) -> TtaConfig {
        let steps = if self.method.optimizes() {
            self.steps_per_batch.unwrap_or(defaults.steps_per_batch)
        } else {
            self.steps_per_batch.unwrap_or(0)
        };
        TtaConfig {
            method: self.method,
            param_group: self.param_group.unwrap_or(defaults.param_group),
            steps_per_batch: steps,
            learning_rate: self.learning_rate.unwrap_or(defaults.learning_rate),
            batch_size,
            adam_beta1: defaults.adam_beta1,
            adam_beta2: defaults.adam_beta2,
            adam_eps: defaults.adam_eps,
            seed: defaults.seed,
        }
    }
}

fn default_methods() -> Vec<MethodEntry> {
    Method::ALL.into_iter().map(MethodEntry::new).collect()
}

/// A full experiment. Every section is optional in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    /// An empty transform list leaves the target stream unshifted.
    #[serde(default)]
    pub shift: ShiftSpec,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub adaptation: AdaptationDefaults,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodEntry>,
    /// Load this checkpoint instead of pre-training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Load these statistics instead of estimating them.
    #[serde(default)]
    pub stats_file: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synthetic: SyntheticSpec::default(),
            shift: ShiftSpec::default(),
            architecture: Architecture::default(),
            pretrain: PretrainConfig::default(),
            stats: StatsConfig::default(),
            stream: StreamConfig::default(),
            adaptation: AdaptationDefaults::default(),
            methods: default_methods(),
            checkpoint: None,
            stats_file: None,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Sets the seed of data generation and of pre-training together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synthetic.seed = seed;
        self.pretrain.seed = seed;
        self
    }

    pub fn tta_configs(&self) -> Vec<(String, TtaConfig)> {
        self.methods
            .iter()
            .map(|m| (m.label(), m.tta_config(&self.adaptation, self.stream.batch_size)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.shift.validate(self.synthetic.input_dim)?;
        if self.architecture.input_dim != self.synthetic.input_dim
            || self.architecture.n_classes != self.synthetic.n_classes
        {
            return Err(Error::ConfigInvalid(format!(
                "architecture ({} inputs, {} classes) does not match the data ({} inputs, {} classes)",
                self.architecture.input_dim,
                self.architecture.n_classes,
                self.synthetic.input_dim,
                self.synthetic.n_classes
            )));
        }
        self.pretrain.validate()?;
        if !(self.stats.eps_scale > 0.0 && self.stats.eps_scale.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "eps_scale {} must be > 0",
                self.stats.eps_scale
            )));
        }
        if self.stream.n_batches == 0 || self.stream.batch_size < 2 {
            return Err(Error::ConfigInvalid("stream needs >= 1 batch of >= 2 samples".into()));
        }
        let mut labels = Vec::new();
        for (label, c) in self.tta_configs() {
            c.validate()?;
            if label.is_empty() || label.contains(['/', '\\']) || labels.contains(&label) {
                return Err(Error::ConfigInvalid(format!(
                    "method label `{label}` is empty, a path or a duplicate"
                )));
            }
            labels.push(label);
        }
        if self.stats_file.is_some() && self.checkpoint.is_none() {
            return Err(Error::ConfigInvalid(
                "stats_file needs the checkpoint it was computed from".into(),
            ));
        }
        Ok(())
    }
}

/// A source model with its statistics, ready to adapt.
#[derive(Clone, Debug)]
pub struct SourceModel {
    pub model: AdaptiveModel,
    pub stats: SourceStats,
    /// Held-out source accuracy; `None` when loaded from disk.
    pub source_accuracy: Option<f64>,
}

impl SourceModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&self.model, dir.join(CHECKPOINT_FILE))?;
        save_stats(&self.stats, dir.join(STATS_FILE))
    }
}

/// Pre-trains and estimates statistics, or loads whatever the config points
/// at.
pub fn prepare_source(config: &ExperimentConfig) -> Result<SourceModel> {
    let data = generate_source(&config.synthetic)?;
    let (model, source_accuracy) = match &config.checkpoint {
        Some(path) => (load_checkpoint(path)?, None),
        None => {
            let p = pretrain_source(&config.architecture, &data, &config.pretrain)?;
            (p.model, Some(p.source_accuracy))
        }
    };
    let stats = match &config.stats_file {
        Some(path) => load_stats(path)?,
        None => source_stats(&model, &data.train, &config.stats)?,
    };
    Ok(SourceModel {
        model,
        stats,
        source_accuracy,
    })
}

pub fn source_stats(model: &AdaptiveModel, train: &LabeledBatch, config: &StatsConfig) -> Result<SourceStats> {
    estimate_source_stats(
        model,
        std::slice::from_ref(train),
        config.covariance_mode,
        config.eps_scale,
    )
}

pub fn target_stream(config: &ExperimentConfig) -> Result<Vec<LabeledBatch>> {
    generate_dataset(
        &config.synthetic,
        Some(&config.shift),
        config.stream.n_batches,
        config.stream.batch_size,
    )
}

/// Runs each labeled config on its own copy of `source.model`, all on the
/// same stream. Methods run on separate threads; results keep input order.
pub fn run_methods(
    source: &SourceModel,
    stream: &[LabeledBatch],
    configs: &[(String, TtaConfig)],
) -> Result<Vec<RunRecord>> {
    thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|(label, c)| {
                s.spawn(move || {
                    adapt_stream_labeled(source.model.clone(), &source.stats, stream, c, label)
                        .map(|(_, record)| record)
                        .map_err(|f| f.error)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("adaptation thread panicked"))
            .collect()
    })
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub source_accuracy: Option<f64>,
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

impl Comparison {
    pub fn record(&self, label: &str) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.label() == label)
    }
}

/// Pre-trains (or loads), adapts with every configured method on one shared
/// stream and writes the report if `output_dir` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Comparison> {
    config.validate()?;
    let source = prepare_source(config)?;
    let stream = target_stream(config)?;
    let records = run_methods(&source, &stream, &config.tta_configs())?;
    let summary = match &config.output_dir {
        Some(dir) => {
            let rows = write_report(dir, &records)?;
            let cfg = dir.join("config.toml");
            fs::write(&cfg, config.to_toml()?).map_err(|e| Error::io(cfg, e))?;
            rows
        }
        None => crate::report::summarize(&records)?,
    };
    Ok(Comparison {
        source_accuracy: source.source_accuracy,
        records,
        summary,
    })
}
