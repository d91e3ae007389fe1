use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::graph::{forward, infer_nodes, linear_graph, GraphSpec, LayerKind, Mode, INPUT};
use crate::tensor::Tensor;
use crate::train::{batch_accuracy, derive_seed, init_params, train, ParamStore, TrainConfig};

/// Probe optimizer: 2 000 minibatches of 32 at a constant rate of 0.01.
pub fn probe_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr0: 0.01,
        lr_decay_every: u64::MAX,
        batch_size: 32,
        max_minibatches: 2000,
        init_std: 0.01,
        seed,
        ..TrainConfig::default()
    }
}

/// A factor to probe for, with labels for the fit and held-out images.
#[derive(Clone, Debug)]
pub struct ProbeFactor {
    pub name: String,
    pub train: Labels,
    pub test: Labels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub layers: Vec<String>,
    pub factors: Vec<String>,
    /// `accuracy[layer][factor]` on held-out images.
    pub accuracy: Vec<Vec<f64>>,
}

impl ProbeResult {
    pub fn cell(&self, layer: &str, factor: &str) -> Option<f64> {
        let l = self.layers.iter().position(|x| x == layer)?;
        let f = self.factors.iter().position(|x| x == factor)?;
        Some(self.accuracy[l][f])
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("layer");
        for f in &self.factors {
            s.push('\t');
            s.push_str(f);
        }
        s.push('\n');
        for (l, row) in self.layers.iter().zip(&self.accuracy) {
            s.push_str(l);
            for a in row {
                let _ = write!(s, "\t{a:.4}");
            }
            s.push('\n');
        }
        s
    }
}

/// Spatial mean per channel: `(n, c, h, w)` to `(n, c)`.
fn pooled(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * s.c);
    for v in t.data().chunks(plane) {
        out.push((v.iter().map(|&x| x as f64).sum::<f64>() / plane as f64) as f32);
    }
    Tensor::matrix(s.n, s.c, out).expect("n*c values")
}

/// Standardize columns with the fit set's mean and deviation.
fn standardize(fit: &mut Tensor<f32>, other: &mut Tensor<f32>) {
    let (n, d) = (fit.shape().n, fit.shape().per_sample());
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| fit.data()[i * d + j] as f64).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        for t in [&mut *fit, &mut *other] {
            let m = t.shape().n;
            for i in 0..m {
                let v = &mut t.data_mut()[i * d + j];
                *v = ((*v as f64 - mean) * inv) as f32;
            }
        }
    }
}

/// Linear softmax probes on spatially pooled, standardized activations of
/// each listed node (`input` allowed).
pub fn invariance_probe(
    trunk: &GraphSpec,
    params: &ParamStore<f32>,
    train_images: &Tensor<f32>,
    test_images: &Tensor<f32>,
    factors: &[ProbeFactor],
    layers: &[&str],
    config: &TrainConfig,
) -> Result<ProbeResult> {
    for l in layers {
        if *l != INPUT && trunk.position(l).is_none() {
            return Err(Error::UnknownLayer {
                name: l.to_string(),
                valid: std::iter::once(INPUT)
                    .chain(trunk.nodes().iter().map(|n| n.name.as_str()))
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
    }
    let nodes: Vec<&str> = layers.iter().copied().filter(|l| *l != INPUT).collect();
    let run = |images: &Tensor<f32>| -> Result<BTreeMap<String, Tensor<f32>>> {
        let seeds = BTreeMap::from([(INPUT.to_string(), images.clone())]);
        let mut acts = if nodes.is_empty() {
            BTreeMap::new()
        } else {
            infer_nodes(trunk, params, &seeds, 0, &nodes, 64)?
        };
        acts.insert(INPUT.to_string(), images.clone());
        Ok(acts)
    };
    let fit_acts = run(train_images)?;
    let test_acts = run(test_images)?;
    let mut accuracy = Vec::with_capacity(layers.len());
    for l in layers {
        let mut fit = pooled(&fit_acts[*l]);
        let mut test = pooled(&test_acts[*l]);
        standardize(&mut fit, &mut test);
        let d = fit.shape().per_sample();
        let mut row = Vec::with_capacity(factors.len());
        for f in factors {
            let (Labels::Class { classes, .. }, Labels::Class { .. }) = (&f.train, &f.test) else {
                return Err(Error::InvalidArgument(format!("factor `{}` needs class labels", f.name)));
            };
            let g = linear_graph(d, *classes, LayerKind::SoftmaxHead)?;
            let seed = derive_seed(config.seed, &format!("probe {l}/{}", f.name));
            let cfg = TrainConfig { seed, ..config.clone() };
            let mut p = init_params(&g, cfg.init_std, seed)?;
            train(&g, &mut p, &Dataset::new(fit.clone(), f.train.clone())?, &cfg)
                .map_err(|e| e.context(format!("probe ({l}, {})", f.name)))?;
            let out = forward(&g, &p, &test, Mode::Infer)?;
            row.push(batch_accuracy(&out["head"], &f.test));
        }
        accuracy.push(row);
    }
    Ok(ProbeResult {
        layers: layers.iter().map(|s| s.to_string()).collect(),
        factors: factors.iter().map(|f| f.name.clone()).collect(),
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_trunk, ArchConfig};
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
        // Factor = which channel carries the bright square.
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let k = r.random_range(0..3);
            for c in 0..3 {
                for _ in 0..16 * 16 {
                    data.push(if c == k { 1.0 } else { 0.0 } + r.random_range(-0.1..0.1));
                }
            }
            labels.push(k);
        }
        (Tensor::from_vec(Shape::new(n, 3, 16, 16), data).unwrap(), labels)
    }

    #[test]
    fn input_probe_recovers_pixel_factor_and_random_is_chance() {
        let g = build_trunk(&ArchConfig {
            input_size: 16,
            num_identities: 3,
            ..ArchConfig::desk()
        })
        .unwrap();
        let p = init_params(&g, 0.1, 0).unwrap();
        let (tr, ytr) = images(200, 1);
        let (te, yte) = images(400, 2);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let noise_tr: Vec<usize> = (0..200).map(|_| r.random_range(0..2)).collect();
        let noise_te: Vec<usize> = (0..400).map(|_| r.random_range(0..2)).collect();
        let factors = vec![
            ProbeFactor {
                name: "channel".into(),
                train: Labels::class(3, ytr).unwrap(),
                test: Labels::class(3, yte).unwrap(),
            },
            ProbeFactor {
                name: "random".into(),
                train: Labels::class(2, noise_tr).unwrap(),
                test: Labels::class(2, noise_te).unwrap(),
            },
        ];
        let cfg = TrainConfig {
            max_minibatches: 300,
            ..probe_config(4)
        };
        let res = invariance_probe(&g, &p, &tr, &te, &factors, &[INPUT], &cfg).unwrap();
        assert!(res.cell(INPUT, "channel").unwrap() > 0.97);
        assert!((res.cell(INPUT, "random").unwrap() - 0.5).abs() < 0.1);
        assert!(invariance_probe(&g, &p, &tr, &te, &factors, &["nope"], &cfg).is_err());
    }
}
