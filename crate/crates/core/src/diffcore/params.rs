use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether an entry is learned by the optimizer or is running state
/// (batch-norm statistics, codebook bookkeeping).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug)]
pub(crate) struct Entry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
    pub lr_scale: f64,
}

/// Named parameters plus AdamW moment accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, ParamKind::Buffer)
    }

    fn insert(&mut self, name: String, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        let (m, v) = match kind {
            ParamKind::Trainable => (value.zeros_like(), value.zeros_like()),
            ParamKind::Buffer => (Tensor::scalar(0.0), Tensor::scalar(0.0)),
        };
        self.entries.push(Entry {
            name: name.clone(),
            kind,
            value,
            grad: None,
            m,
            v,
            steps: 0,
            lr_scale: 1.0,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    /// Multiplier on the optimizer's learning rate for one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.entries[id.0].lr_scale = scale;
    }

    pub fn lr_scale(&self, id: ParamId) -> f64 {
        self.entries[id.0].lr_scale
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        let e = &self.entries[id.0];
        (&e.m, &e.v)
    }

    /// Number of optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Replaces all gradient slots with the given map; parameters absent from
    /// the map are left without a gradient (and are skipped by the optimizer).
    pub fn set_grads(&mut self, grads: BTreeMap<ParamId, Tensor>) {
        for e in &mut self.entries {
            e.grad = None;
        }
        for (id, g) in grads {
            self.entries[id.0].grad = Some(g);
        }
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Names and values in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.kind, &e.value))
    }

    /// Copies every value (not the optimizer state) from `other`, matching by name.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .get(&e.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", e.name)))?;
            if src.shape() != e.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [Entry] {
        &mut self.entries
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::Config("optimizer.learning_rate must be >= 0".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer.weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("optimizer.epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// One AdamW update over every trainable parameter holding a gradient.
///
/// Weight decay is decoupled: `w ← w − lr·wd·w` is applied before the
/// bias-corrected adaptive step and never enters the moment estimates.
/// Parameters without a gradient slot did not take part in the loss and are
/// left untouched, decay included. Gradient slots are consumed.
pub fn adamw_step(store: &mut ParamStore, cfg: &OptimizerConfig) -> Result<()> {
    cfg.validate()?;
    let any = store
        .entries
        .iter()
        .any(|e| e.kind == ParamKind::Trainable && e.grad.is_some());
    if !any {
        return Err(Error::Contract(
            "adamw_step called without any populated gradient".into(),
        ));
    }
    for e in store.entries_mut() {
        if e.kind != ParamKind::Trainable {
            continue;
        }
        let Some(g) = e.grad.take() else { continue };
        if !g.same_shape(&e.value) {
            return Err(Error::shape(
                "adamw_step",
                format!("gradient for {} has shape {:?}", e.name, g.shape()),
            ));
        }
        e.steps += 1;
        let t = e.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let lr = cfg.learning_rate * e.lr_scale;
        let decay = lr * cfg.weight_decay;
        let w = e.value.data_mut();
        let m = e.m.data_mut();
        let v = e.v.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            w[i] -= decay * w[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    store.bump_step();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::scalar(g));
        s.set_grads(grads);
        (s, id)
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let (mut s, id) = single(1.0, 1.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &cfg).unwrap();
        // m̂ = v̂ = 1 → w = 1 − 0.1·1/(1 + 1e-8)
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expect).abs() < 1e-15);
        assert!((s.value(id).item() - 0.9).abs() < 1e-8);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (mut s, id) = single(0.37, 0.0);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &cfg).unwrap();
        assert_eq!(s.value(id).item().to_bits(), 0.37f64.to_bits());
    }

    #[test]
    fn pure_decoupled_decay() {
        let (mut s, id) = single(1.0, 0.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut s, &cfg).unwrap();
        assert!((s.value(id).item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn step_without_gradients_is_a_contract_error() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        let err = adamw_step(&mut s, &OptimizerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn params_without_gradient_are_untouched_even_with_decay() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(1.0)).unwrap();
        let b = s.add("b", Tensor::scalar(2.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert(a, Tensor::scalar(0.5));
        s.set_grads(grads);
        adamw_step(&mut s, &OptimizerConfig::default()).unwrap();
        assert_eq!(s.value(b).item(), 2.0);
        assert_ne!(s.value(a).item(), 1.0);
    }

    #[test]
    fn step_counter_and_moment_shapes() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[3, 2])).unwrap();
        for k in 1..=4 {
            let mut grads = BTreeMap::new();
            grads.insert(id, Tensor::full(&[3, 2], 0.1));
            s.set_grads(grads);
            adamw_step(&mut s, &OptimizerConfig::default()).unwrap();
            assert_eq!(s.step_count(), k);
        }
        let (m, v) = s.moments(id);
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(v.shape(), &[3, 2]);
    }

    #[test]
    fn invalid_betas_rejected() {
        let cfg = OptimizerConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
