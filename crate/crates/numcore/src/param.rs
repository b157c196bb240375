use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;
use crate::NumError;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Named trainable tensors plus their Adam moment accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { what: format!("parameter {name}") });
        }
        let n = value.len();
        self.moments.insert(name.to_string(), Moments { first: vec![0.0; n], second: vec![0.0; n] });
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data)).expect("finite init");
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape)).expect("finite init");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Overwrites the value of an existing parameter, keeping its optimizer state.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), NumError> {
        let slot = self.params.get_mut(name).ok_or_else(|| NumError::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(NumError::Shape {
                op: "set",
                node: None,
                detail: format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Copy of the values with fresh optimizer state.
    pub fn values_only(&self) -> Self {
        let mut out = Self::new();
        for (k, v) in &self.params {
            out.insert(k, v.clone()).expect("already validated");
        }
        out
    }

    /// One Adam update. Parameters without an entry in `grads` are left alone.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: &AdamConfig) -> Result<(), NumError> {
        for (name, g) in grads {
            let p = self.params.get(name).ok_or_else(|| NumError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NumError::Shape {
                    op: "adam_step",
                    node: None,
                    detail: format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(NumError::Divergence(format!("non-finite gradient for {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            let m = self.moments.get_mut(name).expect("moments track params");
            for (((w, &gv), m1), m2) in p.data_mut().iter_mut().zip(g.data()).zip(&mut m.first).zip(&mut m.second) {
                *m1 = cfg.beta1 * *m1 + (1.0 - cfg.beta1) * gv;
                *m2 = cfg.beta2 * *m2 + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vals.to_vec())).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(&[0.5, -1.5]);
        let before = s.get("w").unwrap().clone();
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        for _ in 0..5 {
            s.adam_step(&grads, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.get("w").unwrap(), &before);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // t=1: m = (1-b1) g, v = (1-b2) g^2, mhat = g, vhat = g^2,
        // delta = -lr * g / (|g| + eps)
        let g = [0.3, -2.0];
        let lr = 0.01;
        let mut s = store_with(&[1.0, 1.0]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(g.to_vec()))]);
        s.adam_step(&grads, lr, &AdamConfig::default()).unwrap();
        for (w, gv) in s.get("w").unwrap().data().iter().zip(g) {
            let expected = 1.0 - lr * gv / (gv.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let mut s = store_with(&[1.0]);
        let mut t = Tensor::zeros(&[1]);
        t.data_mut()[0] = f64::NAN;
        let grads = BTreeMap::from([("w".to_string(), t)]);
        assert!(matches!(s.adam_step(&grads, 0.1, &AdamConfig::default()), Err(NumError::Divergence(_))));
        assert_eq!(s.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut s = ParamStore::new();
            s.init_uniform("w", &[3, 4], 4, &mut rng);
            for k in 0..10 {
                let g: Vec<f64> = (0..12).map(|i| ((i * 7 + k) as f64).sin()).collect();
                let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[3, 4], g).unwrap())]);
                s.adam_step(&grads, 0.05, &AdamConfig::default()).unwrap();
            }
            s
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.init_uniform("w", &[50, 16], 16, &mut rng);
        assert!(s.get("w").unwrap().data().iter().all(|v| v.abs() <= 0.25));
    }
}
