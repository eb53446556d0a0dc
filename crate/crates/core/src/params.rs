//! Named parameter store. Every learnable tensor lives here together with its
//! gradient buffer and a trainable flag.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::NumericError;
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor2,
    pub grad: Tensor2,
    pub trainable: bool,
}

/// Ordered map `name -> (value, grad, trainable)`. Iteration follows
/// registration order, which keeps optimizer and checkpoint output stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor2) -> Result<(), NumericError> {
        if self.entries.contains_key(name) {
            return Err(NumericError::DuplicateParameter(name.to_string()));
        }
        value.ensure_finite(name)?;
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad,
                trainable: true,
            },
        );
        Ok(())
    }

    /// Registers a `rows × cols` matrix drawn uniformly from ±1/√fan_in,
    /// with `fan_in = rows`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<(), NumericError> {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Tensor2::from_raw(rows, cols, data))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry, NumericError> {
        self.entries
            .get(name)
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry, NumericError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2, NumericError> {
        self.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor2, NumericError> {
        self.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2, NumericError> {
        self.get(name).map(|e| &e.grad)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), NumericError> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.entries.values_mut().for_each(|e| e.trainable = false);
    }

    /// Adds `grad` into the stored gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor2) -> Result<(), NumericError> {
        let entry = self.get_mut(name)?;
        if entry.grad.shape() != grad.shape() {
            return Err(NumericError::Shape {
                op: "accumulate_grad",
                lhs: entry.grad.shape(),
                rhs: grad.shape(),
            });
        }
        for (g, d) in entry.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(|e| e.grad.fill(0.0));
    }

    pub fn scale_grads(&mut self, s: f64) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }

    /// L2 norm of all trainable gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.grad.frobenius_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales trainable gradients so their global norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for e in self.entries.values_mut().filter(|e| e.trainable) {
                e.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_shape_follows_value() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::zeros(3, 2)).unwrap();
        assert_eq!(store.grad("w").unwrap().shape(), (3, 2));
        assert!(matches!(
            store.insert("w", Tensor2::zeros(1, 1)),
            Err(NumericError::DuplicateParameter(_))
        ));
        assert!(store
            .accumulate_grad("w", &Tensor2::zeros(2, 3))
            .is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor2::zeros(1, 2)).unwrap();
        store.insert("b", Tensor2::zeros(1, 1)).unwrap();
        store
            .accumulate_grad("a", &Tensor2::from_vec(1, 2, vec![3.0, 0.0]).unwrap())
            .unwrap();
        store
            .accumulate_grad("b", &Tensor2::from_vec(1, 1, vec![4.0]).unwrap())
            .unwrap();
        let before = store.clip_grad_norm(1.0);
        assert!((before - 5.0).abs() < 1e-15);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
        assert!((store.grad("a").unwrap().get(0, 0) - 0.6).abs() < 1e-12);
    }
}
