//! Named parameter storage and the Adam update rule.
//!
//! Parameters live in a [`ParameterStore`] keyed by dotted path names
//! (`block1.conv1.weight`, `head.fc1.bias`, ...). Trainable entries are
//! bound onto a tape per forward pass; non-trainable entries hold
//! batch-norm running statistics. Adam keeps per-parameter first/second
//! moments and step counters so freshly added parameters start cold while
//! transferred ones keep their history out of the picture entirely.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, TracedValue};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct ParameterEntry<E: Scalar> {
    pub tensor: Tensor<E>,
    pub trainable: bool,
}

/// Ordered name -> tensor map. Iteration order is the sorted name order,
/// which keeps every walk over the parameters deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<E: Scalar> {
    entries: BTreeMap<String, ParameterEntry<E>>,
}

impl<E: Scalar> ParameterStore<E> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>, trainable: bool) {
        self.entries
            .insert(name.into(), ParameterEntry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParameter {
                name: name.to_string(),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::UnknownParameter {
                name: name.to_string(),
            })
    }

    /// Replace an existing entry's tensor, keeping its trainable flag.
    pub fn set(&mut self, name: &str, tensor: Tensor<E>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter {
                name: name.to_string(),
            })?;
        entry.tensor = tensor;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ParameterEntry<E>> {
        self.entries.remove(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map_or(false, |e| e.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParameterEntry<E>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total element count across trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Element-wise precision change, preserving names and flags.
    pub fn cast<F: Scalar>(&self) -> ParameterStore<F> {
        let entries = self
            .entries
            .iter()
            .map(|(n, e)| {
                (
                    n.clone(),
                    ParameterEntry {
                        tensor: e.tensor.cast(),
                        trainable: e.trainable,
                    },
                )
            })
            .collect();
        ParameterStore { entries }
    }

    /// Record every trainable parameter as a tape leaf, once each, so
    /// weight sharing accumulates gradients naturally.
    pub fn bind(&self, tape: &mut Tape<E>) -> BoundParams {
        let mut map = BTreeMap::new();
        for (name, entry) in &self.entries {
            if entry.trainable {
                map.insert(name.clone(), tape.leaf(entry.tensor.clone()));
            }
        }
        BoundParams { map }
    }
}

/// Name -> tape handle map produced by [`ParameterStore::bind`].
pub struct BoundParams {
    map: BTreeMap<String, TracedValue>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<TracedValue> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter {
                name: name.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TracedValue)> {
        self.map.iter()
    }

    /// Gather gradients for every bound parameter after a backward pass.
    /// Parameters the loss never touched come back as zeros.
    pub fn collect_grads<E: Scalar>(&self, tape: &Tape<E>) -> BTreeMap<String, Tensor<E>> {
        self.map
            .iter()
            .map(|(name, &tv)| (name.clone(), tape.grad(tv)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
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

#[derive(Clone, Debug)]
pub struct AdamSlot<E: Scalar> {
    pub m: Tensor<E>,
    pub v: Tensor<E>,
    pub t: u64,
}

/// Adam state across steps: first/second moment estimates and a step
/// counter, all per parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState<E: Scalar> {
    slots: BTreeMap<String, AdamSlot<E>>,
}

impl<E: Scalar> AdamState<E> {
    pub fn new() -> Self {
        AdamState {
            slots: BTreeMap::new(),
        }
    }

    pub fn slots(&self) -> &BTreeMap<String, AdamSlot<E>> {
        &self.slots
    }

    pub fn insert_slot(&mut self, name: impl Into<String>, slot: AdamSlot<E>) {
        self.slots.insert(name.into(), slot);
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// One Adam update over every trainable parameter in the store.
    /// `grads` must contain an entry per trainable parameter; a missing
    /// one is an error naming the parameter rather than a silent skip.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<E>,
        grads: &BTreeMap<String, Tensor<E>>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        let b1 = E::from_f64(cfg.beta1);
        let b2 = E::from_f64(cfg.beta2);
        let eps = E::from_f64(cfg.epsilon);
        let one = E::one();

        for name in store.trainable_names() {
            let grad = grads.get(&name).ok_or_else(|| Error::MissingGradient {
                name: name.clone(),
            })?;
            let param = store.get_mut(&name)?;
            if grad.shape() != param.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "gradient for {name} has shape {:?}, parameter is {:?}",
                        grad.shape(),
                        param.shape()
                    ),
                ));
            }
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
                t: 0,
            });
            slot.t += 1;
            let bc1 = one - b1.powi(slot.t as i32);
            let bc2 = one - b2.powi(slot.t as i32);
            let lr_e = E::from_f64(lr);
            let md = slot.m.data_mut();
            let vd = slot.v.data_mut();
            let pd = param.data_mut();
            for ((p, (m, v)), &g) in pd
                .iter_mut()
                .zip(md.iter_mut().zip(vd.iter_mut()))
                .zip(grad.data())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr_e * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_orders_names_and_reports_unknown() {
        let mut store: ParameterStore<f32> = ParameterStore::new();
        store.insert("b.weight", Tensor::zeros(&[2]), true);
        store.insert("a.bias", Tensor::zeros(&[3]), true);
        store.insert("a.running_mean", Tensor::zeros(&[3]), false);
        let names: Vec<_> = store.names().cloned().collect();
        assert_eq!(names, ["a.bias", "a.running_mean", "b.weight"]);
        assert_eq!(store.trainable_names(), ["a.bias", "b.weight"]);
        assert_eq!(store.num_trainable(), 5);
        let err = store.get("nope").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // With a fresh slot, bias correction makes the very first step
        // exactly lr * sign(g) (up to epsilon).
        let mut store: ParameterStore<f64> = ParameterStore::new();
        store.insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), true);
        let mut grads = BTreeMap::new();
        grads.insert(
            "w".to_string(),
            Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap(),
        );
        let mut adam = AdamState::new();
        adam.step(&mut store, &grads, 0.01, &AdamConfig::default())
            .unwrap();
        let w = store.get("w").unwrap();
        assert!((w.data()[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((w.data()[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        // Independent scalar recurrence, three steps of a fixed gradient.
        let g = 0.5f64;
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let (mut m, mut v, mut p_ref) = (0.0, 0.0, 1.0);
        for t in 1..=3u32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            p_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut store: ParameterStore<f64> = ParameterStore::new();
        store.insert("p", Tensor::scalar(1.0), true);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(g));
        let mut adam = AdamState::new();
        for _ in 0..3 {
            adam.step(&mut store, &grads, lr, &AdamConfig::default())
                .unwrap();
        }
        assert!((store.get("p").unwrap().item() - p_ref).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut store: ParameterStore<f64> = ParameterStore::new();
        store.insert("head.fc1.weight", Tensor::zeros(&[2]), true);
        let grads = BTreeMap::new();
        let mut adam = AdamState::new();
        let err = adam
            .step(&mut store, &grads, 0.1, &AdamConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::MissingGradient { .. }));
        assert!(err.to_string().contains("head.fc1.weight"));
    }

    #[test]
    fn step_counters_are_per_parameter() {
        let mut store: ParameterStore<f64> = ParameterStore::new();
        store.insert("old", Tensor::scalar(0.0), true);
        let mut grads = BTreeMap::new();
        grads.insert("old".to_string(), Tensor::scalar(1.0));
        let mut adam = AdamState::new();
        adam.step(&mut store, &grads, 0.1, &AdamConfig::default())
            .unwrap();
        // A parameter added later starts its own counter at zero.
        store.insert("new", Tensor::scalar(0.0), true);
        grads.insert("new".to_string(), Tensor::scalar(1.0));
        adam.step(&mut store, &grads, 0.1, &AdamConfig::default())
            .unwrap();
        assert_eq!(adam.slots()["old"].t, 2);
        assert_eq!(adam.slots()["new"].t, 1);
    }

    #[test]
    fn bind_collects_zero_grads_for_untouched_params() {
        let mut store: ParameterStore<f64> = ParameterStore::new();
        store.insert("used", Tensor::scalar(2.0), true);
        store.insert("unused", Tensor::zeros(&[3]), true);
        store.insert("buffer", Tensor::zeros(&[1]), false);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        assert!(bound.get("buffer").is_err());
        let used = bound.get("used").unwrap();
        let y = tape.scale(used, 3.0);
        tape.backward(y).unwrap();
        let grads = bound.collect_grads(&tape);
        assert_eq!(grads["used"].item(), 3.0);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
    }
}
