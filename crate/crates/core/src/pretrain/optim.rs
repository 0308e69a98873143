use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::encoder::{GradientSet, ParameterSet, Precision};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, p)| Mat::zeros(p.dim())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters stored at 32-bit precision are
/// rounded after the update.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &GradientSet,
    state: &mut AdamState,
    learning_rate: f64,
    config: &AdamConfig,
    precision: Precision,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::numeric("optimizer state does not match the parameter set"));
    }
    if !grads.all_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let (b1, b2, eps) = (config.beta1, config.beta2, config.epsilon);
    for slot in 0..params.len() {
        let g = grads.get(slot);
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        let p = params.by_slot_mut(slot);
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            *p -= update;
            if precision == Precision::F32 {
                *p = *p as f32 as f64;
            }
        });
    }
    if !params.all_finite() {
        return Err(Error::numeric("parameters became non-finite"));
    }
    Ok(())
}
