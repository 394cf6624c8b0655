//! Small feed-forward network with batch normalization.
//!
//! The feature extractor is a stack of `dense → BN → activation` blocks; the
//! classifier is a single dense layer on top. Gradients are computed by hand
//! (reverse mode) and include the dependence of batch statistics on their
//! inputs when normalization uses the current batch.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use crate::align::{self, LossSpec};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Vector};

/// Added to the variance inside every BN normalization.
pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatMode {
    /// Normalize with batch statistics and fold them into the running ones.
    TrainUpdate,
    /// Normalize with batch statistics; running statistics untouched.
    BatchOnly,
    /// Normalize with stored running statistics.
    RunningEval,
}

impl StatMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, StatMode::RunningEval)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative_at(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

/// Which parameters adaptation may touch. The classifier is never included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// BN scale and shift of every block.
    BnOnly,
    /// Every feature-extractor parameter.
    FeatureFull,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Block(usize),
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub layer: Layer,
    pub kind: ParamKind,
}

impl ParamId {
    pub fn is_bn(&self) -> bool {
        matches!(self.kind, ParamKind::Gamma | ParamKind::Beta)
    }

    pub fn is_classifier(&self) -> bool {
        self.layer == Layer::Classifier
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ParamKind::Weight => "dense.weight",
            ParamKind::Bias => "dense.bias",
            ParamKind::Gamma => "bn.gamma",
            ParamKind::Beta => "bn.beta",
        };
        match self.layer {
            Layer::Block(i) => write!(f, "block{i}.{kind}"),
            Layer::Classifier => write!(f, "classifier.{kind}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vector,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vector) -> Result<Self> {
        if weight.rows() != bias.dim() {
            return Err(Error::DimensionMismatch(format!(
                "weight {:?} with bias of {}",
                weight.shape(),
                bias.dim()
            )));
        }
        Ok(DenseLayer { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_t(&self.weight)?;
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(self.bias.iter()) {
                *o += b;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer {
    pub gamma: Vector,
    pub beta: Vector,
    pub running_mean: Vector,
    pub running_var: Vector,
    pub momentum: f64,
}

impl BnLayer {
    pub fn new(dim: usize, momentum: f64) -> Self {
        BnLayer {
            gamma: Vector::filled(dim, 1.0),
            beta: Vector::zeros(dim),
            running_mean: Vector::zeros(dim),
            running_var: Vector::filled(dim, 1.0),
            momentum,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.dim()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.beta.dim() != d || self.running_mean.dim() != d || self.running_var.dim() != d {
            return Err(Error::DimensionMismatch("BN parameter lengths differ".into()));
        }
        if self.running_var.iter().any(|v| *v < 0.0) {
            return Err(Error::ConfigInvalid("negative running variance".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "BN momentum {} outside (0,1)",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub dense: DenseLayer,
    pub bn: BnLayer,
    pub activation: Activation,
}

/// Per-unit batch mean and (biased) variance of one BN layer's input.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Shape of a freshly initialized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output width of each block; the last entry is the feature dimension.
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub activation: Activation,
    /// Activation of the last block, whose output is the feature vector.
    /// Identity keeps the features Gaussian-shaped, matching the class
    /// models the alignment losses assume.
    pub feature_activation: Activation,
    pub bn_momentum: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: 8,
            hidden: vec![32, 16],
            n_classes: 3,
            activation: Activation::Relu,
            feature_activation: Activation::Identity,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveModel {
    blocks: Vec<FeatureBlock>,
    classifier: DenseLayer,
}

/// Cached activations of one block, kept for the backward pass.
struct BlockTrace {
    input: Matrix,
    xhat: Matrix,
    inv_std: Vec<f64>,
    bn_out: Matrix,
    stats: Option<BatchStats>,
}

struct ForwardTrace {
    blocks: Vec<BlockTrace>,
    features: Matrix,
    logits: Matrix,
}

/// Result of [`grad`]: loss value, gradients for the selected parameters and
/// the batch statistics seen by each BN layer (empty in `RunningEval`).
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub grads: GradStore,
    pub batch_stats: Vec<BatchStats>,
}

/// Gradients keyed by parameter, iterated in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore(BTreeMap<ParamId, Vec<f64>>);

impl GradStore {
    pub fn get(&self, id: &ParamId) -> Option<&[f64]> {
        self.0.get(id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.0.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &[f64])> {
        self.0.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.0.keys()
    }

    fn insert(&mut self, id: ParamId, g: Vec<f64>) {
        self.0.insert(id, g);
    }
}

#[derive(Clone, Copy, Debug)]
struct Selection {
    bn: bool,
    dense: bool,
    classifier: bool,
}

impl From<ParamGroup> for Selection {
    fn from(g: ParamGroup) -> Self {
        match g {
            ParamGroup::BnOnly => Selection {
                bn: true,
                dense: false,
                classifier: false,
            },
            ParamGroup::FeatureFull => Selection {
                bn: true,
                dense: true,
                classifier: false,
            },
        }
    }
}

impl AdaptiveModel {
    pub fn from_parts(blocks: Vec<FeatureBlock>, classifier: DenseLayer) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::ConfigInvalid("model needs at least one feature block".into()));
        }
        let mut width = blocks[0].dense.in_dim();
        for (i, b) in blocks.iter().enumerate() {
            if b.dense.in_dim() != width {
                return Err(Error::DimensionMismatch(format!(
                    "block {i} expects {} inputs, previous layer gives {width}",
                    b.dense.in_dim()
                )));
            }
            if b.dense.bias.dim() != b.dense.out_dim() || b.bn.dim() != b.dense.out_dim() {
                return Err(Error::DimensionMismatch(format!("block {i} layer widths")));
            }
            b.bn.validate()?;
            width = b.dense.out_dim();
        }
        if classifier.in_dim() != width || classifier.bias.dim() != classifier.out_dim() {
            return Err(Error::DimensionMismatch(format!(
                "classifier expects {} features, extractor gives {width}",
                classifier.in_dim()
            )));
        }
        Ok(AdaptiveModel { blocks, classifier })
    }

    /// He-initialized dense layers, identity BN, zero biases.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.hidden.is_empty() || arch.hidden.contains(&0) || arch.input_dim == 0 {
            return Err(Error::ConfigInvalid("architecture widths must be positive".into()));
        }
        if arch.n_classes < 1 {
            return Err(Error::ConfigInvalid("need at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |out: usize, inp: usize| {
            let std = (2.0 / inp as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let w: Vec<f64> = (0..out * inp).map(|_| normal.sample(&mut rng)).collect();
            DenseLayer {
                weight: Matrix::from_vec(out, inp, w).expect("shape"),
                bias: Vector::zeros(out),
            }
        };
        let mut blocks = Vec::with_capacity(arch.hidden.len());
        let mut width = arch.input_dim;
        for (i, &h) in arch.hidden.iter().enumerate() {
            let activation = if i + 1 == arch.hidden.len() {
                arch.feature_activation
            } else {
                arch.activation
            };
            blocks.push(FeatureBlock {
                dense: layer(h, width),
                bn: BnLayer::new(h, arch.bn_momentum),
                activation,
            });
            width = h;
        }
        let classifier = layer(arch.n_classes, width);
        AdaptiveModel::from_parts(blocks, classifier)
    }

    pub fn blocks(&self) -> &[FeatureBlock] {
        &self.blocks
    }

    pub fn classifier(&self) -> &DenseLayer {
        &self.classifier
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].dense.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    /// Every trainable parameter id, in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for i in 0..self.blocks.len() {
            for kind in [ParamKind::Weight, ParamKind::Bias, ParamKind::Gamma, ParamKind::Beta] {
                ids.push(ParamId {
                    layer: Layer::Block(i),
                    kind,
                });
            }
        }
        for kind in [ParamKind::Weight, ParamKind::Bias] {
            ids.push(ParamId {
                layer: Layer::Classifier,
                kind,
            });
        }
        ids
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        let sel = Selection::from(group);
        self.param_ids()
            .into_iter()
            .filter(|id| match (id.layer, id.is_bn()) {
                (Layer::Classifier, _) => sel.classifier,
                (_, true) => sel.bn,
                (_, false) => sel.dense,
            })
            .collect()
    }

    pub fn param(&self, id: &ParamId) -> Option<&[f64]> {
        let v = match id.layer {
            Layer::Classifier => match id.kind {
                ParamKind::Weight => self.classifier.weight.as_slice(),
                ParamKind::Bias => self.classifier.bias.as_slice(),
                _ => return None,
            },
            Layer::Block(i) => {
                let b = self.blocks.get(i)?;
                match id.kind {
                    ParamKind::Weight => b.dense.weight.as_slice(),
                    ParamKind::Bias => b.dense.bias.as_slice(),
                    ParamKind::Gamma => b.bn.gamma.as_slice(),
                    ParamKind::Beta => b.bn.beta.as_slice(),
                }
            }
        };
        Some(v)
    }

    pub fn param_mut(&mut self, id: &ParamId) -> Option<&mut [f64]> {
        let v = match id.layer {
            Layer::Classifier => match id.kind {
                ParamKind::Weight => self.classifier.weight.as_mut_slice(),
                ParamKind::Bias => &mut self.classifier.bias[..],
                _ => return None,
            },
            Layer::Block(i) => {
                let b = self.blocks.get_mut(i)?;
                match id.kind {
                    ParamKind::Weight => b.dense.weight.as_mut_slice(),
                    ParamKind::Bias => &mut b.dense.bias[..],
                    ParamKind::Gamma => &mut b.bn.gamma[..],
                    ParamKind::Beta => &mut b.bn.beta[..],
                }
            }
        };
        Some(v)
    }

    fn trace(&self, batch: &Matrix, mode: StatMode, keep: bool) -> Result<ForwardTrace> {
        if batch.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch of width {} for model input {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let n = batch.rows();
        if mode.uses_batch_stats() && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        // a NaN would otherwise leak through batch statistics and be masked by ReLU
        if batch.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut x = batch.clone();
        for block in &self.blocks {
            let z = block.dense.apply(&x)?;
            let width = z.cols();
            let (mean, var, stats) = if mode.uses_batch_stats() {
                let (mean, var) = column_moments(&z);
                // overflowing activations give infinite variance, which would
                // silently normalize every sample to zero
                if mean.iter().chain(&var).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite);
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            } else {
                (block.bn.running_mean.to_vec(), block.bn.running_var.to_vec(), None)
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = Matrix::zeros(n, width);
            let mut bn_out = Matrix::zeros(n, width);
            let mut out = Matrix::zeros(n, width);
            for i in 0..n {
                for j in 0..width {
                    let h = (z[(i, j)] - mean[j]) * inv_std[j];
                    let y = block.bn.gamma[j] * h + block.bn.beta[j];
                    xhat[(i, j)] = h;
                    bn_out[(i, j)] = y;
                    out[(i, j)] = block.activation.apply(y);
                }
            }
            let input = std::mem::replace(&mut x, out);
            if keep {
                traces.push(BlockTrace {
                    input,
                    xhat,
                    inv_std,
                    bn_out,
                    stats,
                });
            } else {
                traces.push(BlockTrace {
                    input: Matrix::zeros(0, 0),
                    xhat: Matrix::zeros(0, 0),
                    inv_std: Vec::new(),
                    bn_out: Matrix::zeros(0, 0),
                    stats,
                });
            }
        }
        let logits = self.classifier.apply(&x)?;
        Ok(ForwardTrace {
            blocks: traces,
            features: x,
            logits,
        })
    }

    /// Feature matrix `g(x)`, one row per input row. `TrainUpdate` normalizes
    /// like `BatchOnly` here; use [`AdaptiveModel::forward_features_update`]
    /// to also fold the batch statistics into the running ones.
    pub fn forward_features(&self, batch: &Matrix, mode: StatMode) -> Result<Matrix> {
        Ok(self.trace(batch, mode, false)?.features)
    }

    /// `TrainUpdate` forward: batch-statistic normalization, then running
    /// statistics are updated.
    pub fn forward_features_update(&mut self, batch: &Matrix) -> Result<Matrix> {
        let t = self.trace(batch, StatMode::TrainUpdate, false)?;
        let stats: Vec<BatchStats> = t.blocks.into_iter().filter_map(|b| b.stats).collect();
        self.commit_batch_stats(&stats)?;
        Ok(t.features)
    }

    /// Exponential moving average of running statistics toward `stats`.
    pub fn commit_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} batch statistics for {} BN layers",
                stats.len(),
                self.blocks.len()
            )));
        }
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            let m = block.bn.momentum;
            for j in 0..block.bn.dim() {
                block.bn.running_mean[j] = (1.0 - m) * block.bn.running_mean[j] + m * s.mean[j];
                block.bn.running_var[j] = (1.0 - m) * block.bn.running_var[j] + m * s.var[j];
            }
        }
        Ok(())
    }

    pub fn forward_logits(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "features of dim {} for classifier input {}",
                features.cols(),
                self.feature_dim()
            )));
        }
        self.classifier.apply(features)
    }

    /// Features and logits from one forward pass.
    pub fn forward(&self, batch: &Matrix, mode: StatMode) -> Result<(Matrix, Matrix)> {
        let t = self.trace(batch, mode, false)?;
        Ok((t.features, t.logits))
    }

    pub fn predict(&self, batch: &Matrix, mode: StatMode) -> Result<Vec<usize>> {
        let (_, logits) = self.forward(batch, mode)?;
        Ok(align::argmax_rows(&logits))
    }
}

/// Column means and biased variances.
fn column_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = z.rows() as f64;
    let w = z.cols();
    let mut mean = vec![0.0; w];
    for row in z.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; w];
    for row in z.row_iter() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

pub fn forward_features(model: &AdaptiveModel, batch: &Matrix, mode: StatMode) -> Result<Matrix> {
    model.forward_features(batch, mode)
}

pub fn forward_logits(model: &AdaptiveModel, features: &Matrix) -> Result<Matrix> {
    model.forward_logits(features)
}

pub fn predict(model: &AdaptiveModel, batch: &Matrix, mode: StatMode) -> Result<Vec<usize>> {
    model.predict(batch, mode)
}

/// Loss value of `loss` on `batch` without a backward pass.
pub fn loss_value(model: &AdaptiveModel, batch: &Matrix, mode: StatMode, loss: &LossSpec) -> Result<f64> {
    let t = model.trace(batch, mode, false)?;
    Ok(align::evaluate(loss, &t.features, &t.logits, false)?.value)
}

/// Gradient of `loss` with respect to every parameter of `group`.
pub fn grad(
    model: &AdaptiveModel,
    batch: &Matrix,
    mode: StatMode,
    loss: &LossSpec,
    group: ParamGroup,
) -> Result<Gradients> {
    backprop(model, batch, mode, loss, Selection::from(group))
}

/// Gradient with respect to every parameter, classifier included. Source
/// pre-training only.
pub fn grad_all(model: &AdaptiveModel, batch: &Matrix, mode: StatMode, loss: &LossSpec) -> Result<Gradients> {
    backprop(
        model,
        batch,
        mode,
        loss,
        Selection {
            bn: true,
            dense: true,
            classifier: true,
        },
    )
}

fn backprop(
    model: &AdaptiveModel,
    batch: &Matrix,
    mode: StatMode,
    loss: &LossSpec,
    sel: Selection,
) -> Result<Gradients> {
    let trace = model.trace(batch, mode, true)?;
    let lg = align::evaluate(loss, &trace.features, &trace.logits, true)?;
    let n = batch.rows();
    let batch_stats: Vec<BatchStats> = trace.blocks.iter().filter_map(|b| b.stats.clone()).collect();

    let mut grads = GradStore::default();
    let mut d_feat = lg.d_features.unwrap_or_else(|| Matrix::zeros(n, model.feature_dim()));
    if let Some(d_logits) = &lg.d_logits {
        let w = &model.classifier.weight;
        d_feat = d_feat.add(&d_logits.matmul(w)?)?;
        if sel.classifier {
            grads.insert(
                ParamId {
                    layer: Layer::Classifier,
                    kind: ParamKind::Weight,
                },
                d_logits.transpose().matmul(&trace.features)?.as_slice().to_vec(),
            );
            grads.insert(
                ParamId {
                    layer: Layer::Classifier,
                    kind: ParamKind::Bias,
                },
                column_sums(d_logits),
            );
        }
    } else if sel.classifier {
        let c = model.n_classes();
        for (kind, len) in [(ParamKind::Weight, c * model.feature_dim()), (ParamKind::Bias, c)] {
            grads.insert(
                ParamId {
                    layer: Layer::Classifier,
                    kind,
                },
                vec![0.0; len],
            );
        }
    }

    let mut d_out = d_feat;
    for (idx, (block, bt)) in model.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        let width = block.bn.dim();
        // through the activation
        let mut d_y = d_out;
        for i in 0..n {
            for j in 0..width {
                d_y[(i, j)] *= block.activation.derivative_at(bt.bn_out[(i, j)]);
            }
        }
        if sel.bn {
            let mut d_gamma = vec![0.0; width];
            let mut d_beta = vec![0.0; width];
            for i in 0..n {
                for j in 0..width {
                    d_gamma[j] += d_y[(i, j)] * bt.xhat[(i, j)];
                    d_beta[j] += d_y[(i, j)];
                }
            }
            grads.insert(
                ParamId {
                    layer: Layer::Block(idx),
                    kind: ParamKind::Gamma,
                },
                d_gamma,
            );
            grads.insert(
                ParamId {
                    layer: Layer::Block(idx),
                    kind: ParamKind::Beta,
                },
                d_beta,
            );
        }
        let earliest_needed = !sel.dense && idx == 0;
        if earliest_needed {
            break;
        }
        // through the normalization
        let mut d_z = Matrix::zeros(n, width);
        if mode.uses_batch_stats() {
            let nf = n as f64;
            for j in 0..width {
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for i in 0..n {
                    let dh = d_y[(i, j)] * block.bn.gamma[j];
                    sum_dh += dh;
                    sum_dh_h += dh * bt.xhat[(i, j)];
                }
                for i in 0..n {
                    let dh = d_y[(i, j)] * block.bn.gamma[j];
                    d_z[(i, j)] = bt.inv_std[j] / nf * (nf * dh - sum_dh - bt.xhat[(i, j)] * sum_dh_h);
                }
            }
        } else {
            for i in 0..n {
                for j in 0..width {
                    d_z[(i, j)] = d_y[(i, j)] * block.bn.gamma[j] * bt.inv_std[j];
                }
            }
        }
        if sel.dense {
            grads.insert(
                ParamId {
                    layer: Layer::Block(idx),
                    kind: ParamKind::Weight,
                },
                d_z.transpose().matmul(&bt.input)?.as_slice().to_vec(),
            );
            grads.insert(
                ParamId {
                    layer: Layer::Block(idx),
                    kind: ParamKind::Bias,
                },
                column_sums(&d_z),
            );
        }
        if idx == 0 {
            break;
        }
        d_out = d_z.matmul(&block.dense.weight)?;
    }

    Ok(Gradients {
        loss: lg.value,
        grads,
        batch_stats,
    })
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (a, v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    s
}
