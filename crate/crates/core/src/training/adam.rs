//! Adam with bias correction, the optimizer used for every run.

use std::collections::BTreeMap;

use super::TrainError;
use crate::model::{GradientSet, ModelParameters};
use crate::tensor::{Matrix, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// First/second moment estimates for every parameter tensor, plus the step
/// counter the bias correction depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Real> {
    m: BTreeMap<String, Matrix<F>>,
    v: BTreeMap<String, Matrix<F>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<F: Real> AdamState<F> {
    /// Zero moments with the default hyperparameters (β1 0.9, β2 0.98, ε 1e-9).
    pub fn new(params: &ModelParameters<F>) -> Self {
        Self::with_hyperparameters(params, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    }

    pub fn with_hyperparameters(
        params: &ModelParameters<F>,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let zeros = |p: &ModelParameters<F>| {
            p.iter()
                .map(|(name, t)| (name.clone(), Matrix::zeros(t.rows(), t.cols())))
                .collect()
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Rebuild state from checkpoint tensors. Moment maps must mirror each
    /// other exactly.
    pub(crate) fn from_parts(
        m: BTreeMap<String, Matrix<F>>,
        v: BTreeMap<String, Matrix<F>>,
        step: u64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        debug_assert!(m.keys().eq(v.keys()));
        Self {
            m,
            v,
            step,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn first_moments(&self) -> impl Iterator<Item = (&String, &Matrix<F>)> {
        self.m.iter()
    }

    pub fn second_moments(&self) -> impl Iterator<Item = (&String, &Matrix<F>)> {
        self.v.iter()
    }
}

/// One Adam update: m/v moment updates, bias correction by 1−βᵗ, then
/// θ ← θ − lr·m̂/(√v̂ + ε). Gradients are checked for shape agreement and
/// finiteness before anything mutates, so a failed step leaves parameters
/// and state untouched.
pub fn adam_step<F: Real>(
    params: &mut ModelParameters<F>,
    grads: &GradientSet<F>,
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<(), TrainError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TrainError::InvalidPlan(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    for (name, grad) in grads.iter() {
        let param = params
            .get(name)
            .ok_or_else(|| TrainError::MissingTensor { name: name.clone() })?;
        if grad.rows() != param.rows() || grad.cols() != param.cols() {
            return Err(TrainError::ShapeMismatch {
                name: name.clone(),
                expected: (param.rows(), param.cols()),
                actual: (grad.rows(), grad.cols()),
            });
        }
        if !grad.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                name: name.clone(),
                step: state.step + 1,
            });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let beta1 = F::from_f64(state.beta1);
    let beta2 = F::from_f64(state.beta2);
    let one_minus_beta1 = F::from_f64(1.0 - state.beta1);
    let one_minus_beta2 = F::from_f64(1.0 - state.beta2);
    let corr1 = F::from_f64(1.0 - state.beta1.powf(t));
    let corr2 = F::from_f64(1.0 - state.beta2.powf(t));
    let eps = F::from_f64(state.eps);
    let step_size = F::from_f64(lr);

    for (name, grad) in grads.iter() {
        let m = state.m.get_mut(name).expect("moments mirror parameters");
        let v = state.v.get_mut(name).expect("moments mirror parameters");
        let param = params.get_mut(name).expect("checked above");
        let (ms, vs, ps, gs) = (
            m.as_mut_slice(),
            v.as_mut_slice(),
            param.as_mut_slice(),
            grad.as_slice(),
        );
        for i in 0..gs.len() {
            let g = gs[i];
            ms[i] = beta1 * ms[i] + one_minus_beta1 * g;
            vs[i] = beta2 * vs[i] + one_minus_beta2 * g * g;
            let m_hat = ms[i] / corr1;
            let v_hat = vs[i] / corr2;
            ps[i] -= step_size * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
