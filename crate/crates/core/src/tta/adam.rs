//! Adam with bias correction, keyed by model parameter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdaptiveModel, GradStore, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    t: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of optimizer steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: &ParamId) -> Option<&[f64]> {
        self.moments.get(id).map(|m| m.m.as_slice())
    }

    pub fn second_moment(&self, id: &ParamId) -> Option<&[f64]> {
        self.moments.get(id).map(|m| m.v.as_slice())
    }

    /// Advances the step counter; call once per optimizer step, before the
    /// per-tensor [`AdamState::update`] calls of that step.
    pub fn begin_step(&mut self) -> u64 {
        self.t += 1;
        self.t
    }

    /// Applies the current step to one tensor.
    pub fn update(&mut self, id: ParamId, param: &mut [f64], grad: &[f64], hyper: &AdamHyper) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::DimensionMismatch(format!(
                "{id}: {} parameters, {} gradient entries",
                param.len(),
                grad.len()
            )));
        }
        if self.t == 0 {
            return Err(Error::ConfigInvalid("Adam update before begin_step".into()));
        }
        let mom = self.moments.entry(id).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        if mom.m.len() != param.len() {
            return Err(Error::DimensionMismatch(format!("{id}: moment shape changed")));
        }
        let t = self.t as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for (((p, g), m), v) in param.iter_mut().zip(grad).zip(&mut mom.m).zip(&mut mom.v) {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
        Ok(())
    }
}

/// One optimizer step over every parameter present in `grads`.
pub fn adam_step(model: &mut AdaptiveModel, grads: &GradStore, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    state.begin_step();
    for (id, g) in grads.iter() {
        let p = model
            .param_mut(id)
            .ok_or_else(|| Error::DimensionMismatch(format!("model has no parameter {id}")))?;
        state.update(*id, p, g, hyper)?;
    }
    Ok(())
}
