use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, LayerKind};
use crate::ops::RunningStats;
use crate::tensor::Scalar;

/// Named parameter arrays with momentum buffers, trainable flags and
/// batchnorm running statistics.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    arrays: BTreeMap<String, Vec<T>>,
    momentum: BTreeMap<String, Vec<T>>,
    trainable: BTreeMap<String, bool>,
    running_stats: BTreeMap<String, RunningStats<T>>,
}

/// Stable 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent stream seed from a master seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    fnv1a64(label.as_bytes()) ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            arrays: BTreeMap::new(),
            momentum: BTreeMap::new(),
            trainable: BTreeMap::new(),
            running_stats: BTreeMap::new(),
        }
    }

    /// Insert (or replace) an array with a zeroed velocity.
    pub fn insert(&mut self, name: impl Into<String>, values: Vec<T>, trainable: bool) {
        let name = name.into();
        self.momentum.insert(name.clone(), vec![T::zero(); values.len()]);
        self.trainable.insert(name.clone(), trainable);
        self.arrays.insert(name, values);
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.arrays.get(name).map(Vec::as_slice)
    }

    pub fn require(&self, name: &str) -> Result<&[T]> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` not in store")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        self.arrays.get_mut(name)
    }

    pub fn momentum(&self, name: &str) -> Option<&[T]> {
        self.momentum.get(name).map(Vec::as_slice)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn arrays(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(t) = self.trainable.get_mut(name) {
            *t = trainable;
        }
    }

    pub fn freeze_all(&mut self) {
        self.trainable.values_mut().for_each(|t| *t = false);
    }

    pub fn running(&self, bn: &str) -> Option<&RunningStats<T>> {
        self.running_stats.get(bn)
    }

    pub fn set_running(&mut self, bn: impl Into<String>, stats: RunningStats<T>) {
        self.running_stats.insert(bn.into(), stats);
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.running_stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total learnable scalars.
    pub fn numel(&self) -> usize {
        self.arrays.values().map(Vec::len).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.arrays
            .iter()
            .filter(|(k, _)| self.is_trainable(k))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Apply one momentum step to a trainable array:
    /// `v = mu * v - rate * g; w = w + v`.
    pub(crate) fn momentum_update(&mut self, name: &str, grad: &[T], rate: T, mu: T) -> Result<()> {
        let w = self
            .arrays
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown array `{name}`")))?;
        let v = self.momentum.get_mut(name).expect("momentum shares keys");
        if grad.len() != w.len() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has {} values, array has {}",
                grad.len(),
                w.len()
            )));
        }
        for ((wi, vi), &g) in w.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = mu * *vi - rate * g;
            *wi = *wi + *vi;
        }
        Ok(())
    }

    /// SHA-256 over the names and little-endian bytes of every frozen array
    /// and the running statistics of frozen batchnorms, in key order.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, values) in &self.arrays {
            if self.is_trainable(name) {
                continue;
            }
            h.update(name.as_bytes());
            for v in values {
                h.update(Scalar::to_f64(*v).to_le_bytes());
            }
            if let Some(bn) = name.strip_suffix(".gamma") {
                if let Some(st) = self.running_stats.get(bn) {
                    for v in st.mean.iter().chain(&st.var) {
                        h.update(Scalar::to_f64(*v).to_le_bytes());
                    }
                }
            }
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::from_f64(x.to_f64())).collect::<Vec<U>>();
        ParamStore {
            arrays: self.arrays.iter().map(|(k, v)| (k.clone(), conv(v))).collect(),
            momentum: self.momentum.iter().map(|(k, v)| (k.clone(), conv(v))).collect(),
            trainable: self.trainable.clone(),
            running_stats: self
                .running_stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copy every array (and running statistics) belonging to the listed
    /// nodes from `other`, with the given trainable flag.
    pub fn copy_nodes_from(
        &mut self,
        other: &ParamStore<T>,
        graph: &GraphSpec,
        nodes: std::ops::Range<usize>,
        trainable: bool,
    ) -> Result<()> {
        for node in &graph.nodes()[nodes] {
            for pname in node.param_names() {
                let v = other.require(&pname)?.to_vec();
                self.insert(pname, v, trainable);
            }
            if matches!(node.kind, LayerKind::BatchNorm { .. }) {
                if let Some(st) = other.running(&node.name) {
                    self.set_running(node.name.clone(), st.clone());
                }
            }
        }
        Ok(())
    }
}

/// Gaussian weight initialization. Weights are drawn from `N(0, std^2)`
/// using a stream seeded by `(seed, array name)`, so an array's values do
/// not depend on which other arrays exist. Biases and `beta` start at zero,
/// `gamma` at one; running statistics at zero mean and unit variance.
pub fn init_params<T: Scalar>(graph: &GraphSpec, init_std: f64, seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    init_nodes(&mut store, graph, 0..graph.nodes().len(), init_std, seed, true)?;
    Ok(store)
}

pub(crate) fn init_nodes<T: Scalar>(
    store: &mut ParamStore<T>,
    graph: &GraphSpec,
    nodes: std::ops::Range<usize>,
    init_std: f64,
    seed: u64,
    trainable: bool,
) -> Result<()> {
    if !(init_std >= 0.0) || !init_std.is_finite() {
        return Err(Error::Config(format!("init_std must be finite and >= 0, got {init_std}")));
    }
    for node in &graph.nodes()[nodes] {
        for (suffix, len) in node.kind.param_arrays() {
            let name = node.param_name(suffix);
            let values = match suffix {
                "weight" if init_std > 0.0 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &name));
                    let normal = Normal::new(0.0, init_std).expect("valid std");
                    (0..len).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                }
                "gamma" => vec![T::one(); len],
                _ => vec![T::zero(); len],
            };
            store.insert(name, values, trainable);
        }
        if let LayerKind::BatchNorm { channels } = node.kind {
            store.set_running(node.name.clone(), RunningStats::identity(channels));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_trunk, ArchConfig};

    #[test]
    fn zero_std_gives_zero_weights() {
        let g = build_trunk(&ArchConfig::desk()).unwrap();
        let s: ParamStore<f32> = init_params(&g, 0.0, 1).unwrap();
        for (name, v) in s.arrays() {
            let expect = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            assert!(v.iter().all(|&x| x == expect), "{name}");
        }
    }

    #[test]
    fn same_seed_same_store() {
        let g = build_trunk(&ArchConfig::desk()).unwrap();
        let a: ParamStore<f32> = init_params(&g, 0.1, 42).unwrap();
        let b: ParamStore<f32> = init_params(&g, 0.1, 42).unwrap();
        assert_eq!(a, b);
        let c: ParamStore<f32> = init_params(&g, 0.1, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_moments_within_three_standard_errors() {
        let g = crate::graph::linear_graph(100, 1000, LayerKind::SoftmaxHead).unwrap();
        let std = 0.1;
        let s: ParamStore<f64> = init_params(&g, std, 7).unwrap();
        let w = s.get("fc.weight").unwrap();
        let n = w.len() as f64;
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 * std / n.sqrt(), "mean {mean}");
        // standard error of the sample std is about std / sqrt(2n)
        assert!((var.sqrt() - std).abs() < 3.0 * std / (2.0 * n).sqrt(), "std {}", var.sqrt());
    }

    #[test]
    fn frozen_checksum_ignores_trainable_arrays() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", vec![1.0, 2.0], false);
        s.insert("b", vec![3.0], true);
        let before = s.frozen_checksum();
        s.get_mut("b").unwrap()[0] = 9.0;
        assert_eq!(before, s.frozen_checksum());
        s.get_mut("a").unwrap()[0] = 9.0;
        assert_ne!(before, s.frozen_checksum());
    }
}
