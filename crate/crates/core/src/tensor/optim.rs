use super::{ParamStore, Parameter, Tensor};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step_count: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }
}

/// One bias-corrected Adam update. The gradient is left untouched.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState, lr: f64) -> Result<()> {
    let shape = param.value.shape();
    if param.grad.shape() != shape || state.m.shape() != shape || state.v.shape() != shape {
        return Err(Error::dim(format!(
            "adam: parameter {} {:?} vs grad {:?} / state {:?}",
            param.name,
            shape,
            param.grad.shape(),
            state.m.shape()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let grad = param.grad.data();
    let m = state.m.data_mut();
    for (mi, g) in m.iter_mut().zip(grad) {
        *mi = b1 * *mi + (1.0 - b1) * g;
    }
    let v = state.v.data_mut();
    for (vi, g) in v.iter_mut().zip(grad) {
        *vi = b2 * *vi + (1.0 - b2) * g * g;
    }
    let (m, v) = (state.m.data(), state.v.data());
    for ((p, mi), vi) in param.value.data_mut().iter_mut().zip(m).zip(v) {
        let mhat = mi / c1;
        let vhat = vi / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    if !param.value.is_finite() {
        return Err(Error::NonFinite("adam_step"));
    }
    Ok(())
}

/// Adam over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let states = params.iter().map(|(_, p)| AdamState::new(p.value.shape())).collect();
        Self { lr, states }
    }

    pub fn from_states(lr: f64, states: Vec<AdamState>) -> Self {
        Self { lr, states }
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step_count)
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.states.len() != params.len() {
            return Err(Error::dim("optimizer state does not match parameter count"));
        }
        for (p, s) in params.iter_mut().zip(self.states.iter_mut()) {
            adam_step(p, s, self.lr)?;
        }
        Ok(())
    }
}
