//! Adaptive-moment optimizer with decoupled weight decay, plus the
//! linear warmup / linear decay learning-rate schedule.
//!
//! Moment buffers are keyed by parameter name, so optimizer state can be
//! checkpointed and restored alongside the parameters for bit-exact
//! resumption. Decay skips gains and biases via each parameter's flag.

use super::{ModelError, ParamView};
use std::collections::BTreeMap;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Learning-rate multiplier for a 0-based step index: linear ramp over
/// the warmup span, then linear decay toward zero at `total_steps`. The
/// factor stays strictly positive for every step in `0..total_steps`.
pub fn schedule_factor(step: u64, total_steps: u64, warmup_ratio: f64) -> f64 {
    let total = total_steps.max(1);
    let warmup = ((total as f64 * warmup_ratio).round() as u64).max(1);
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        (total - step) as f64 / (total - warmup) as f64
    } else {
        1.0
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled-weight-decay Adam over named parameters.
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Completed update count, used for bias correction.
    pub t: u64,
    slots: BTreeMap<String, Slot>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update to every visited parameter at the given
    /// learning-rate multiplier. The caller visits parameters in a fixed
    /// order; moment buffers are created lazily on first sight.
    pub fn step<V>(&mut self, lr_factor: f64, mut visit_params: V) -> Result<(), ModelError>
    where
        V: FnMut(&mut dyn FnMut(ParamView)),
    {
        self.t += 1;
        let t = self.t;
        let lr = self.learning_rate * lr_factor;
        let bias1 = 1.0 - BETA1.powi(t as i32);
        let bias2 = 1.0 - BETA2.powi(t as i32);
        let decay = self.weight_decay;
        let slots = &mut self.slots;
        let mut fault: Option<ModelError> = None;
        visit_params(&mut |p: ParamView| {
            if fault.is_some() {
                return;
            }
            let slot = slots.entry(p.name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
            });
            if slot.m.len() != p.value.len() {
                fault = Some(ModelError::Config(format!(
                    "optimizer state for {} has {} entries, parameter has {}",
                    p.name,
                    slot.m.len(),
                    p.value.len()
                )));
                return;
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * g;
                slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * g * g;
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                let mut update = lr * m_hat / (v_hat.sqrt() + EPS);
                if p.decay {
                    update += lr * decay * p.value[i];
                }
                p.value[i] -= update;
            }
        });
        match fault {
            Some(err) => Err(err),
            None => Ok(()),
        }
    }

    /// Moment buffers as named tensors, for checkpointing. Names carry
    /// `adam.m.` / `adam.v.` prefixes ahead of the parameter name.
    pub fn export_state(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, slot) in &self.slots {
            out.push((format!("adam.m.{name}"), slot.m.clone()));
            out.push((format!("adam.v.{name}"), slot.v.clone()));
        }
        out
    }

    /// Restores moment buffers exported by [`AdamW::export_state`].
    pub fn import_state(
        &mut self,
        t: u64,
        tensors: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), ModelError> {
        self.t = t;
        self.slots.clear();
        for (name, data) in tensors {
            let Some(rest) = name.strip_prefix("adam.m.") else {
                continue;
            };
            let v_name = format!("adam.v.{rest}");
            let v = tensors.get(&v_name).ok_or_else(|| {
                ModelError::Checkpoint(format!("missing optimizer tensor {v_name}"))
            })?;
            if v.len() != data.len() {
                return Err(ModelError::Checkpoint(format!(
                    "optimizer tensors for {rest} disagree on length"
                )));
            }
            self.slots.insert(
                rest.to_string(),
                Slot {
                    m: data.clone(),
                    v: v.clone(),
                },
            );
        }
        Ok(())
    }
}
