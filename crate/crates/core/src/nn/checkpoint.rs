//! Plain-text model checkpoints.
//!
//! ```text
//! cafa-checkpoint 1
//! blocks 2
//! block 0 activation relu
//! block 0 bn.momentum 1 1 0.1
//! block 0 dense.weight 32 8 <32·8 values>
//! ...
//! classifier dense.weight 3 16 <values>
//! classifier dense.bias 3 1 <values>
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a save/load cycle is
//! lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Activation, AdaptiveModel, BnLayer, DenseLayer, FeatureBlock};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Vector};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "cafa-checkpoint";

const BLOCK_FIELDS: [&str; 7] = [
    "bn.momentum",
    "dense.weight",
    "dense.bias",
    "bn.gamma",
    "bn.beta",
    "bn.running_mean",
    "bn.running_var",
];

fn put(out: &mut String, layer: &str, name: &str, rows: usize, cols: usize, values: &[f64]) {
    write!(out, "{layer} {name} {rows} {cols}").unwrap();
    for v in values {
        write!(out, " {v}").unwrap();
    }
    out.push('\n');
}

pub fn write_checkpoint(model: &AdaptiveModel) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC} {CHECKPOINT_VERSION}").unwrap();
    writeln!(out, "blocks {}", model.blocks.len()).unwrap();
    for (i, b) in model.blocks.iter().enumerate() {
        let layer = format!("block {i}");
        writeln!(out, "{layer} activation {}", b.activation.name()).unwrap();
        let (o, n) = b.dense.weight.shape();
        put(&mut out, &layer, "bn.momentum", 1, 1, &[b.bn.momentum]);
        put(&mut out, &layer, "dense.weight", o, n, b.dense.weight.as_slice());
        put(&mut out, &layer, "dense.bias", o, 1, &b.dense.bias);
        put(&mut out, &layer, "bn.gamma", o, 1, &b.bn.gamma);
        put(&mut out, &layer, "bn.beta", o, 1, &b.bn.beta);
        put(&mut out, &layer, "bn.running_mean", o, 1, &b.bn.running_mean);
        put(&mut out, &layer, "bn.running_var", o, 1, &b.bn.running_var);
    }
    let (c, d) = model.classifier.weight.shape();
    put(
        &mut out,
        "classifier",
        "dense.weight",
        c,
        d,
        model.classifier.weight.as_slice(),
    );
    put(&mut out, "classifier", "dense.bias", c, 1, &model.classifier.bias);
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, Vec<&'a str>)> {
        loop {
            let (no, line) = self
                .inner
                .next()
                .ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
            let line = line.trim();
            if !line.is_empty() {
                return Ok((no + 1, line.split_ascii_whitespace().collect()));
            }
        }
    }

    /// Reads `<prefix…> <name> <rows> <cols> <values…>`.
    fn tensor(&mut self, prefix: &[&str], name: &str) -> Result<(usize, usize, Vec<f64>)> {
        let (no, toks) = self.next()?;
        let bad = |what: &str| Error::Format(format!("line {no}: {what}"));
        let k = prefix.len();
        if toks.len() < k + 3 || toks[..k] != *prefix || toks[k] != name {
            return Err(bad(&format!("expected `{} {name}`", prefix.join(" "))));
        }
        let rows: usize = toks[k + 1].parse().map_err(|_| bad("bad row count"))?;
        let cols: usize = toks[k + 2].parse().map_err(|_| bad("bad column count"))?;
        let values = toks[k + 3..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("bad value `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != rows * cols {
            return Err(bad(&format!("{} values for shape {rows}x{cols}", values.len())));
        }
        Ok((rows, cols, values))
    }
}

pub fn read_checkpoint(text: &str) -> Result<AdaptiveModel> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, header) = lines.next()?;
    if header.len() != 2 || header[0] != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version: u32 = header[1]
        .parse()
        .map_err(|_| Error::Format("bad checkpoint version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersionMismatch {
            expected: CHECKPOINT_VERSION as u8,
            found: version.min(255) as u8,
        });
    }
    let (_, count) = lines.next()?;
    let n_blocks: usize = match count.as_slice() {
        ["blocks", n] => n.parse().map_err(|_| Error::Format("bad block count".into()))?,
        _ => return Err(Error::Format("expected `blocks <n>`".into())),
    };

    let mut blocks = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        let idx = i.to_string();
        let prefix = ["block", idx.as_str()];
        let (no, act) = lines.next()?;
        let activation = match act.as_slice() {
            ["block", j, "activation", "relu"] if *j == idx => Activation::Relu,
            ["block", j, "activation", "identity"] if *j == idx => Activation::Identity,
            _ => return Err(Error::Format(format!("line {no}: expected activation of block {i}"))),
        };
        let mut fields = Vec::with_capacity(BLOCK_FIELDS.len());
        for name in BLOCK_FIELDS {
            fields.push(lines.tensor(&prefix, name)?);
        }
        let momentum = fields[0].2[0];
        let (o, n, w) = fields[1].clone();
        let vec_of = |k: usize| -> Result<Vector> {
            let (r, c, v) = &fields[k];
            if (*r, *c) != (o, 1) {
                return Err(Error::Format(format!(
                    "block {i} {} has shape {r}x{c}",
                    BLOCK_FIELDS[k]
                )));
            }
            Vector::new(v.clone())
        };
        blocks.push(FeatureBlock {
            dense: DenseLayer::new(Matrix::from_vec(o, n, w)?, vec_of(2)?)?,
            bn: BnLayer {
                gamma: vec_of(3)?,
                beta: vec_of(4)?,
                running_mean: vec_of(5)?,
                running_var: vec_of(6)?,
                momentum,
            },
            activation,
        });
    }
    let (c, d, w) = lines.tensor(&["classifier"], "dense.weight")?;
    let (bc, _, b) = lines.tensor(&["classifier"], "dense.bias")?;
    if bc != c {
        return Err(Error::Format("classifier bias length".into()));
    }
    let classifier = DenseLayer::new(Matrix::from_vec(c, d, w)?, Vector::new(b)?)?;
    AdaptiveModel::from_parts(blocks, classifier)
}

pub fn save_checkpoint(model: &AdaptiveModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AdaptiveModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text)
}
