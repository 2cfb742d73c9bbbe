use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
}

/// Named parameters in insertion order, with Adam moment buffers.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    adam_t: u64,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            params: self.params.clone(),
            index: self.index.clone(),
            adam_t: self.adam_t,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            params: Vec::new(),
            index: HashMap::new(),
            adam_t: 0,
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let zeros = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            grad: None,
            trainable: true,
            m: zeros.clone(),
            v: zeros,
            value,
        });
        Ok(())
    }

    /// Normal(0, std) initialised parameter.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        std: f64,
        rng: &mut Rng,
    ) -> Result<()> {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = std * rng.normal();
        }
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub(crate) fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub(crate) fn param_at(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.index_of(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index_of(name)?;
        Ok(&mut self.params[i].value)
    }

    /// Replace a value, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self.index_of(name)?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<Option<&Tensor>> {
        Ok(self.params[self.index_of(name)?].grad.as_ref())
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.params[self.index_of(name)?].trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = self.index_of(name)?;
        self.params[i].trainable = trainable;
        Ok(())
    }

    /// Set the trainable flag of every parameter from a predicate on its name.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| false);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn has_any_grad(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| p.grad.is_some())
            .map(|p| p.name.as_str())
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, grad: &[f64]) {
        let p = &mut self.params[idx];
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(
                    Tensor::new(p.value.shape().to_vec(), grad.to_vec())
                        .expect("gradient length matches parameter"),
                );
            }
        }
    }

    /// Multiply every stored gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    pub fn adam_steps_taken(&self) -> u64 {
        self.adam_t
    }

    /// One Adam update on trainable parameters, then clear all gradients.
    ///
    /// Frozen parameters are never written, even when a gradient is present.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let g = p.grad.as_ref().expect("checked above");
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Order-sensitive FNV-1a digest over names and value bits.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint_where(|_| true)
    }

    pub fn fingerprint_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| pred(&p.name)) {
            eat(p.name.as_bytes());
            for x in p.value.data() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<Param> {
        &mut self.params
    }

    pub(crate) fn set_adam_t(&mut self, t: u64) {
        self.adam_t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![value])).unwrap();
        s
    }

    #[test]
    fn adam_first_step_matches_hand_recurrence() {
        let mut s = one_param(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let g = 0.5;
        s.accumulate_grad(0, &[g]);
        s.adam_step(&cfg).unwrap();
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let expected = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        let got = s.get("w").unwrap().item();
        assert!((got - expected).abs() <= 1e-14 * expected.abs(), "{got} vs {expected}");
        assert!(s.grad("w").unwrap().is_none());
    }

    #[test]
    fn frozen_param_untouched() {
        let mut s = one_param(2.0);
        s.set_trainable("w", false).unwrap();
        s.accumulate_grad(0, &[3.0]);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut s = one_param(2.0);
        s.accumulate_grad(0, &[3.0]);
        s.adam_step(&AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        })
        .unwrap();
        assert_eq!(s.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut s = one_param(2.0);
        assert!(matches!(
            s.adam_step(&AdamConfig::default()),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = one_param(0.0);
        assert!(s.insert("w", Tensor::scalar(1.0)).is_err());
    }
}
