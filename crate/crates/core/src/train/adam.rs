//! Adaptive-moment optimizer step over named weight maps.

use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
pub struct AdamState<T> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self { m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One bias-corrected update. Weights without a gradient entry are treated as
/// having zero gradient, so their moments still decay. Non-finite gradients
/// abort with a diagnostic naming the tensor.
pub fn adam_step<T: Scalar>(
    weights: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    params: &AdamParams,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step;
    let b1 = sc::<T>(params.beta1);
    let b2 = sc::<T>(params.beta2);
    let corr1 = sc::<T>(1.0 - params.beta1.powi(t as i32));
    let corr2 = sc::<T>(1.0 - params.beta2.powi(t as i32));
    let lr = sc::<T>(params.lr);
    let eps = sc::<T>(params.eps);
    let one = T::one();

    for (name, w) in weights.iter_mut() {
        let zeros = || Tensor::zeros(w.shape());
        let m = state.m.entry(name.clone()).or_insert_with(zeros);
        let v = state.v.entry(name.clone()).or_insert_with(zeros);
        let gd = grads.get(name);
        for i in 0..w.len() {
            let g = gd.map_or(T::zero(), |g| g.data()[i]);
            let mi = b1 * m.data()[i] + (one - b1) * g;
            let vi = b2 * v.data()[i] + (one - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / corr1;
            let v_hat = vi / corr2;
            w.data_mut()[i] = w.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::seeded_tensor;

    fn one_weight(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn zero_gradients_leave_weights_fixed() {
        let mut w = BTreeMap::from([("a".to_string(), seeded_tensor::<f64>(&[4], 3, -1.0, 1.0))]);
        let before = w["a"].clone();
        let mut state = AdamState::new();
        let grads = BTreeMap::from([("a".to_string(), Tensor::zeros(&[4]))]);
        for _ in 0..3 {
            adam_step(&mut w, &grads, &mut state, &AdamParams::default()).unwrap();
        }
        assert_eq!(w["a"].data(), before.data());
        assert_eq!(state.step_count(), 3);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // from zero moments, one step moves the weight by
        // -lr * g / (|g| * sqrt(corr2)/corr2 ... ) which collapses to
        // -lr * sign(g) up to the eps term; assert the exact expression
        let params = AdamParams { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let g = -0.37f64;
        let mut w = one_weight(1.0);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![g]).unwrap())]);
        let mut state = AdamState::new();
        adam_step(&mut w, &grads, &mut state, &params).unwrap();
        let m_hat = (1.0 - params.beta1) * g / (1.0 - params.beta1);
        let v_hat = (1.0 - params.beta2) * g * g / (1.0 - params.beta2);
        let expect = 1.0 - params.lr * m_hat / (v_hat.sqrt() + params.eps);
        assert!((w["w"].data()[0] - expect).abs() < 1e-15);
        // direction is minus the gradient sign
        assert!(w["w"].data()[0] > 1.0);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut w = BTreeMap::from([("a".to_string(), seeded_tensor::<f32>(&[8], 5, -1.0, 1.0))]);
            let mut state = AdamState::new();
            for s in 0..10 {
                let grads =
                    BTreeMap::from([("a".to_string(), seeded_tensor::<f32>(&[8], 100 + s, -1.0, 1.0))]);
                adam_step(&mut w, &grads, &mut state, &AdamParams::default()).unwrap();
            }
            w["a"].clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut w = one_weight(0.0);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![f64::NAN]).unwrap())]);
        let err = adam_step(&mut w, &grads, &mut AdamState::new(), &AdamParams::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
