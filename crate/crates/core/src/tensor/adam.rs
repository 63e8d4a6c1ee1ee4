//! Adam with bias correction, a linear-warmup / exponential-decay learning
//! rate schedule, and whole-tensor freeze masks.

use std::collections::{BTreeMap, BTreeSet};

use super::scalar::Scalar;
use super::{Tensor, TensorError};

/// Linear warmup to `base` over `warmup_steps`, then per-step decay by `gamma`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base: 3e-4, warmup_steps: 200, gamma: 0.9995 }
    }
}

/// Learning rate at a 0-based optimizer step. `warmup_steps = 0` degenerates
/// to pure decay from step 0.
pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    if step < schedule.warmup_steps {
        schedule.base * step as f64 / schedule.warmup_steps as f64
    } else {
        schedule.base * schedule.gamma.powi((step - schedule.warmup_steps) as i32)
    }
}

/// Names of parameter tensors excluded from gradient updates.
#[derive(Debug, Clone, Default)]
pub struct FreezeMask {
    frozen: BTreeSet<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask::default()
    }

    pub fn from_keys<I: IntoIterator<Item = String>>(keys: I) -> Self {
        FreezeMask { frozen: keys.into_iter().collect() }
    }

    pub fn is_frozen(&self, key: &str) -> bool {
        self.frozen.contains(key)
    }

    pub fn frozen_keys(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }
}

/// Optimizer state: first/second moments per trainable parameter plus the
/// step counter. Moment arrays are allocated on first use, so frozen
/// parameters never get any.
pub struct AdamState<E: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    step: u64,
    moments: BTreeMap<String, (Vec<E>, Vec<E>)>,
}

impl<E: Scalar> AdamState<E> {
    pub fn new(schedule: LrSchedule) -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_moments_for(&self, key: &str) -> bool {
        self.moments.contains_key(key)
    }
}

/// One bias-corrected Adam update over `params`, skipping frozen tensors.
///
/// `grads` maps parameter names to accumulated gradients; a missing entry is
/// a zero gradient (moments still decay for previously-stepped parameters).
pub fn adam_step<E: Scalar>(
    state: &mut AdamState<E>,
    params: &mut BTreeMap<String, Tensor<E>>,
    grads: &BTreeMap<String, Tensor<E>>,
    mask: &FreezeMask,
) -> Result<f64, TensorError> {
    for (key, g) in grads {
        if !g.all_finite() {
            return Err(TensorError::NanGradient { key: key.clone() });
        }
    }
    let lr = lr_at(&state.schedule, state.step);
    state.step += 1;
    let t = state.step as i32;
    let b1 = E::from_f64(state.beta1);
    let b2 = E::from_f64(state.beta2);
    let one_m_b1 = E::from_f64(1.0 - state.beta1);
    let one_m_b2 = E::from_f64(1.0 - state.beta2);
    let bc1 = E::from_f64(1.0 - state.beta1.powi(t));
    let bc2 = E::from_f64(1.0 - state.beta2.powi(t));
    let eps = E::from_f64(state.eps);
    let lr_e = E::from_f64(lr);

    for (key, param) in params.iter_mut() {
        if mask.is_frozen(key) {
            continue;
        }
        let zero;
        let grad = match grads.get(key) {
            Some(g) => g,
            None if !state.moments.contains_key(key) => continue,
            None => {
                zero = Tensor::zeros(param.rows(), param.cols());
                &zero
            }
        };
        if grad.shape() != param.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{key}: grad {:?} against param {:?}", grad.shape(), param.shape()),
            });
        }
        let (m, v) = state
            .moments
            .entry(key.clone())
            .or_insert_with(|| (vec![E::ZERO; param.len()], vec![E::ZERO; param.len()]));
        let pd = param.data_mut();
        let gd = grad.data();
        for idx in 0..pd.len() {
            let g = gd[idx];
            m[idx] = b1 * m[idx] + one_m_b1 * g;
            v[idx] = b2 * v[idx] + one_m_b2 * g * g;
            let m_hat = m[idx] / bc1;
            let v_hat = v[idx] / bc2;
            pd[idx] -= lr_e * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_starts_at_zero_and_reaches_base() {
        let s = LrSchedule { base: 1e-3, warmup_steps: 100, gamma: 0.9999 };
        assert_eq!(lr_at(&s, 0), 0.0);
        assert_eq!(lr_at(&s, 100), 1e-3);
        assert!(lr_at(&s, 50) > 0.0 && lr_at(&s, 50) < 1e-3);
    }

    #[test]
    fn decay_after_warmup() {
        let s = LrSchedule { base: 1e-3, warmup_steps: 100, gamma: 0.9999 };
        let expected = 1e-3 * 0.9999f64.powi(10);
        assert!((lr_at(&s, 110) - expected).abs() < 1e-15);
        assert!((expected - 9.990e-4).abs() < 1e-6);
    }

    #[test]
    fn zero_warmup_is_pure_decay() {
        let s = LrSchedule { base: 1e-3, warmup_steps: 0, gamma: 0.5 };
        assert_eq!(lr_at(&s, 0), 1e-3);
        assert_eq!(lr_at(&s, 1), 5e-4);
    }

    #[test]
    fn schedule_shape_monotonicity() {
        let s = LrSchedule { base: 2e-4, warmup_steps: 37, gamma: 0.999 };
        for step in 0..37 {
            assert!(lr_at(&s, step) <= lr_at(&s, step + 1));
        }
        for step in 37..200 {
            assert!(lr_at(&s, step) > lr_at(&s, step + 1));
        }
    }

    fn constant_schedule(lr: f64) -> LrSchedule {
        LrSchedule { base: lr, warmup_steps: 0, gamma: 1.0 }
    }

    #[test]
    fn single_step_hand_value() {
        // w = 0, grad = 1, lr = 0.1: m_hat = 1, v_hat = 1,
        // w <- -0.1 / (1 + 1e-8)
        let mut state = AdamState::<f64>::new(constant_schedule(0.1));
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::scalar(0.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        adam_step(&mut state, &mut params, &grads, &FreezeMask::none()).unwrap();
        let w = params["w"].item();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-15, "w = {w}");
        assert!((w + 0.1).abs() < 1e-8);
    }

    #[test]
    fn frozen_parameter_is_bitwise_unchanged_and_has_no_moments() {
        let mut state = AdamState::<f64>::new(constant_schedule(0.1));
        let mut params = BTreeMap::new();
        params.insert("frozen".to_string(), Tensor::from_vec(1, 2, vec![1.25, -3.5]));
        params.insert("live".to_string(), Tensor::from_vec(1, 2, vec![1.25, -3.5]));
        let mut grads = BTreeMap::new();
        grads.insert("frozen".to_string(), Tensor::from_vec(1, 2, vec![1.0, 1.0]));
        grads.insert("live".to_string(), Tensor::from_vec(1, 2, vec![1.0, 1.0]));
        let mask = FreezeMask::from_keys(["frozen".to_string()]);
        let before = params["frozen"].clone();
        for _ in 0..5 {
            adam_step(&mut state, &mut params, &grads, &mask).unwrap();
        }
        assert!(params["frozen"].bit_eq(&before));
        assert!(!params["live"].bit_eq(&before));
        assert!(!state.has_moments_for("frozen"));
        assert!(state.has_moments_for("live"));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut state = AdamState::<f64>::new(constant_schedule(0.1));
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::from_vec(1, 2, vec![0.5, -0.25]));
        let before = params["w"].clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(1, 2));
        adam_step(&mut state, &mut params, &grads, &FreezeMask::none()).unwrap();
        assert!(params["w"].bit_eq(&before));
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut state = AdamState::<f64>::new(constant_schedule(0.1));
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::scalar(0.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(f64::NAN));
        assert!(matches!(
            adam_step(&mut state, &mut params, &grads, &FreezeMask::none()),
            Err(TensorError::NanGradient { .. })
        ));
    }
}
