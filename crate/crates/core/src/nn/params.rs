//! Named parameter storage, initialization, and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// One named tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

/// Deterministically ordered map of named parameters.
///
/// Frozen (non-trainable) entries are never touched by the optimizer; their
/// bytes can be hashed with [`ParamStore::frozen_hash`] to assert the
/// freezing contract.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) {
        let grad = ArrayD::zeros(value.raw_dim());
        let prev = self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &ArrayD<f64> {
        &self.entries[name].value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        &mut self.entries.get_mut(name).expect("unknown parameter").value
    }

    pub fn grad(&self, name: &str) -> &ArrayD<f64> {
        &self.entries[name].grad
    }

    pub fn add_grad(&mut self, name: &str, g: &ArrayD<f64>) {
        let p = self.entries.get_mut(name).expect("unknown parameter");
        p.grad += g;
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = false;
            }
        }
    }

    /// SHA-256 over names, shapes, and little-endian bytes of frozen entries.
    pub fn frozen_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in &self.entries {
            if p.trainable {
                continue;
            }
            hasher.update(name.as_bytes());
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// True if every gradient and value is finite.
    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Standard-normal samples via Box-Muller, scaled by `std`.
pub fn randn(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| std * normal_sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn normal_sample(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fan-in scaled init for weight tensors (first axis = output channels).
pub fn kaiming(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    randn(rng, shape, (1.0 / fan_in as f64).sqrt())
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Adam with bias correction; state is keyed by parameter name.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update from the accumulated gradients of trainable entries.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, p) in store.entries.iter_mut() {
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn frozen_hash_ignores_trainable_entries() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("frozen.w", randn(&mut rng, &[3, 3], 1.0), false);
        store.insert("train.w", randn(&mut rng, &[2, 2], 1.0), true);
        let h0 = store.frozen_hash();
        store.value_mut("train.w")[[0, 0]] += 1.0;
        assert_eq!(h0, store.frozen_hash());
        store.value_mut("frozen.w")[[0, 0]] += 1.0;
        assert_ne!(h0, store.frozen_hash());
    }

    #[test]
    fn adam_zero_lr_leaves_weights_unchanged() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.insert("w", randn(&mut rng, &[4], 1.0), true);
        let before = store.value("w").clone();
        let mut opt = Adam::new(0.0);
        store.add_grad("w", &randn(&mut rng, &[4], 1.0));
        opt.step(&mut store);
        assert_eq!(before, *store.value("w"));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[1]), 5.0), true);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            store.zero_grads();
            let x = store.value("x")[[0]];
            store.add_grad("x", &ArrayD::from_elem(IxDyn(&[1]), 2.0 * x));
            opt.step(&mut store);
        }
        assert!(store.value("x")[[0]].abs() < 1e-2);
    }

    #[test]
    fn freeze_prefix_marks_expected_subset() {
        let mut store = ParamStore::new();
        store.insert("backbone.a", zeros(&[1]), true);
        store.insert("adapter.a", zeros(&[1]), true);
        store.freeze_prefix("backbone.");
        assert!(!store.entries["backbone.a"].trainable);
        assert!(store.entries["adapter.a"].trainable);
    }
}
