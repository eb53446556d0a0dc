//! Adam with bias correction.

use indexmap::IndexMap;

use crate::error::NumericError;
use crate::params::ParamStore;
use crate::tensor::Tensor2;

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor2,
    pub v: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of completed steps.
    pub t: u64,
    pub moments: IndexMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(DEFAULT_LEARNING_RATE)
    }
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            moments: IndexMap::new(),
        }
    }
}

/// One Adam update over every trainable entry of `store`. Non-trainable
/// entries keep their values. All gradient buffers are zeroed afterwards.
///
/// A non-finite gradient aborts before any value is touched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<(), NumericError> {
    for (name, entry) in store.iter() {
        if entry.trainable && !entry.grad.is_finite() {
            return Err(NumericError::NonFiniteGradient(name.to_string()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);

    for (name, entry) in store.iter_mut() {
        if !entry.trainable {
            continue;
        }
        let moments = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: Tensor2::zeros(entry.value.rows(), entry.value.cols()),
                v: Tensor2::zeros(entry.value.rows(), entry.value.cols()),
            });
        let values = entry.value.data_mut();
        let grads = entry.grad.data();
        let ms = moments.m.data_mut();
        let vs = moments.v.data_mut();
        for k in 0..values.len() {
            let g = grads[k];
            ms[k] = b1 * ms[k] + (1.0 - b1) * g;
            vs[k] = b2 * vs[k] + (1.0 - b2) * g * g;
            let m_hat = ms[k] / bc1;
            let v_hat = vs[k] / bc2;
            values[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    store.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor2::from_vec(1, 1, vec![value]).unwrap())
            .unwrap();
        store
            .accumulate_grad("p", &Tensor2::from_vec(1, 1, vec![grad]).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut store = store_with(0.7, 0.0);
        let before = store.clone();
        let mut state = AdamState::default();
        adam_step(&mut store, &mut state).unwrap();
        assert_eq!(store.value("p").unwrap(), before.value("p").unwrap());
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.3, -2.5, 1e-3] {
            let mut store = store_with(1.0, g);
            let mut state = AdamState::default();
            assert_eq!(state.learning_rate, 0.001);
            adam_step(&mut store, &mut state).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
            let expected = 1.0 - 0.001 * g / (g.abs() + 1e-8);
            let got = store.value("p").unwrap().get(0, 0);
            assert!((got - expected).abs() < 1e-15, "g={g}");
            assert!((got - (1.0 - 0.001 * g.signum())).abs() < 1e-8);
            assert_eq!(store.grad("p").unwrap().get(0, 0), 0.0);
        }
    }

    #[test]
    fn frozen_entries_are_untouched() {
        let mut store = store_with(1.0, 0.5);
        store.set_trainable("p", false).unwrap();
        let mut state = AdamState::default();
        adam_step(&mut store, &mut state).unwrap();
        assert_eq!(store.value("p").unwrap().get(0, 0), 1.0);
        assert!(state.moments.is_empty());
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        store.insert("lstm.W_u", Tensor2::zeros(1, 1)).unwrap();
        store.get_mut("lstm.W_u").unwrap().grad.set(0, 0, f64::NAN);
        let err = adam_step(&mut store, &mut AdamState::default()).unwrap_err();
        assert_eq!(err, NumericError::NonFiniteGradient("lstm.W_u".into()));
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut store = store_with(0.0, -3.0);
        let mut state = AdamState::default();
        for step in 0..5 {
            store
                .accumulate_grad(
                    "p",
                    &Tensor2::from_vec(1, 1, vec![(step as f64) - 2.0]).unwrap(),
                )
                .unwrap();
            adam_step(&mut store, &mut state).unwrap();
            assert!(state.moments["p"].v.data().iter().all(|&v| v >= 0.0));
        }
        assert_eq!(state.t, 5);
    }
}
