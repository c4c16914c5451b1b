use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, Real, Result, Tensor, TensorError};

/// One named parameter with its Adam moments.
#[derive(Debug, Clone)]
pub struct Param<T: Real = f32> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
}

impl<T: Real> Param<T> {
    fn new(tensor: Tensor<T>) -> Self {
        let n = tensor.numel();
        Self {
            tensor: tensor.with_requires_grad(true),
            trainable: true,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step: 0,
        }
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real = f32> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param::new(tensor));
        Ok(())
    }

    /// Replace the value of an existing parameter, keeping its flags.
    pub fn set_value(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                lhs: p.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor.with_requires_grad(p.tensor.requires_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
                p.tensor = p.tensor.clone().with_requires_grad(trainable);
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.set_trainable("", trainable);
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.set_grad(None);
        }
    }

    /// Add the gradients of every bound parameter from a graph that has run
    /// `backward`.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (var, name) in graph.bindings() {
            let (Some(g), Some(p)) = (graph.grad(var), self.params.get_mut(name)) else {
                continue;
            };
            for (o, &x) in p.tensor.grad_mut().iter_mut().zip(g) {
                *o += x;
            }
        }
    }

    /// Sum of squared gradient entries over all parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.tensor.grad())
            .flatten()
            .map(|g| g.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Bias-corrected Adam update of every trainable parameter, then clears
    /// gradients. Trainable parameters without a gradient are skipped.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        for (name, p) in self.params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
                log::warn!("adam: `{name}` has no gradient, skipped");
                continue;
            };
            p.step += 1;
            let t = p.step as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let data = p.tensor.data_mut();
            for (j, &g) in grad.iter().enumerate() {
                let m = b1 * p.first_moment[j] + (T::one() - b1) * g;
                let v = b2 * p.second_moment[j] + (T::one() - b2) * g * g;
                p.first_moment[j] = m;
                p.second_moment[j] = v;
                data[j] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            }
            p.tensor.set_grad(None);
        }
    }

    /// FNV-1a over names, shapes and raw value bits, optionally restricted to
    /// a name prefix. Used to prove that frozen parameters did not move.
    pub fn checksum(&self, prefix: &str) -> u64 {
        self.checksum_where(|n| n.starts_with(prefix))
    }

    /// [`ParamStore::checksum`] over the names accepted by `keep`.
    pub fn checksum_where(&self, keep: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, p) in self.params.iter().filter(|(n, _)| keep(n)) {
            feed(name.as_bytes());
            for &d in p.tensor.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                feed(&v.to_f64().unwrap().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    let mut q = Param::new(p.tensor.cast());
                    q.trainable = p.trainable;
                    q.tensor = q.tensor.with_requires_grad(p.trainable);
                    (k.clone(), q)
                })
                .collect(),
        }
    }
}

/// Gaussian initializer with standard deviation `std`.
pub(crate) fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = s.get("w").unwrap().tensor.clone();
        s.get_mut("w").unwrap().tensor.set_grad(Some(vec![0.0; 3]));
        s.adam_step(&AdamConfig::default());
        assert_eq!(s.get("w").unwrap().tensor.data(), before.data());
        assert_eq!(s.get("w").unwrap().step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::scalar(0.0)).unwrap();
        s.get_mut("w").unwrap().tensor.set_grad(Some(vec![1.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        s.adam_step(&cfg);
        let w = s.get("w").unwrap().tensor.data()[0];
        assert!((w + 0.1).abs() < 1e-6, "{w}");
    }

    #[test]
    fn missing_grad_is_skipped() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::scalar(2.0)).unwrap();
        s.adam_step(&AdamConfig::default());
        assert_eq!(s.get("w").unwrap().tensor.data(), &[2.0]);
        assert_eq!(s.get("w").unwrap().step, 0);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", Tensor::scalar(1.0)).unwrap();
        s.insert("b.w", Tensor::scalar(1.0)).unwrap();
        let (a0, b0) = (s.checksum("a."), s.checksum("b."));
        s.set_value("b.w", Tensor::scalar(1.5)).unwrap();
        assert_eq!(s.checksum("a."), a0);
        assert_ne!(s.checksum("b."), b0);
    }
}
