//! Helpers shared by the integration suites: per-op finite-difference checks
//! and brute-force oracles for the evaluation protocols.
#![allow(dead_code)]

use attrnet::eval::{above_one, select_operating_point, verify_scores, OperatingPoint, VerifyReport};
use attrnet::ops::{
    avgpool_global, avgpool_global_backward, batchnorm_backward, batchnorm_forward, conv2d_backward,
    conv2d_forward, elementwise_add, elementwise_add_backward, fully_connected, fully_connected_backward,
    grad_check, maxpool2x2, maxpool2x2_backward, relu, relu_backward, sigmoid_multilabel_loss,
    softmax_cross_entropy, BnMode, ClassTargets, KernelShape, BN_EPSILON,
};
use attrnet::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_SEEDS: u64 = 20;
pub const GRAD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
const ALL: usize = usize::MAX;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Values at least 0.05 away from zero, so a step never crosses a kink.
fn off_zero(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = r.random_range(0.05..1.0);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect()
}

fn tensor(shape: Shape, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn worst(errors: impl IntoIterator<Item = f64>) -> f64 {
    errors.into_iter().fold(0.0, f64::max)
}

/// Loss `<op(x), r>` for a fixed random `r`, so the output gradient is `r`.
pub fn check_conv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let k = [1, 3][r.random_range(0..2)];
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=k / 2);
    let (h, w) = (r.random_range(k..=6), r.random_range(k..=6));
    let s = Shape::new(n, ci, h, w);
    let ks = KernelShape { c_out: co, c_in: ci, k };
    let x = uniform(&mut r, s.numel());
    let wt = uniform(&mut r, ks.numel());
    let b = uniform(&mut r, co);
    let out = conv2d_forward(&tensor(s, &x), &wt, ks, Some(&b), stride, pad).unwrap();
    let proj = uniform(&mut r, out.len());
    let g = conv2d_backward(&tensor(s, &x), &wt, ks, Some(&b), &tensor(out.shape(), &proj), stride, pad).unwrap();
    let f = |x: &[f64], wt: &[f64], b: &[f64]| {
        dot(conv2d_forward(&tensor(s, x), wt, ks, Some(b), stride, pad).unwrap().data(), &proj)
    };
    worst([
        grad_check(|v| f(v, &wt, &b), &x, g.input_grad.data(), FD_STEP, ALL, 0).max_rel_error,
        grad_check(|v| f(&x, v, &b), &wt, &g.param_grads["weight"], FD_STEP, ALL, 0).max_rel_error,
        grad_check(|v| f(&x, &wt, v), &b, &g.param_grads["bias"], FD_STEP, ALL, 0).max_rel_error,
    ])
}

pub fn check_batchnorm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = Shape::new(r.random_range(2..=4), r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3));
    let x: Vec<f64> = uniform(&mut r, s.numel()).iter().map(|v| 2.0 * v + 0.5).collect();
    let gamma = off_zero(&mut r, s.c);
    let beta = uniform(&mut r, s.c);
    let proj = uniform(&mut r, s.numel());
    let fwd = |x: &[f64], g: &[f64], b: &[f64]| batchnorm_forward(&tensor(s, x), g, b, None, BnMode::Train, BN_EPSILON).unwrap();
    let out = fwd(&x, &gamma, &beta);
    let gr = batchnorm_backward(out.cache.as_ref().unwrap(), &gamma, &tensor(s, &proj)).unwrap();
    let f = |x: &[f64], g: &[f64], b: &[f64]| dot(fwd(x, g, b).output.data(), &proj);
    worst([
        grad_check(|v| f(v, &gamma, &beta), &x, gr.input_grad.data(), FD_STEP, ALL, 0).max_rel_error,
        grad_check(|v| f(&x, v, &beta), &gamma, &gr.param_grads["gamma"], FD_STEP, ALL, 0).max_rel_error,
        grad_check(|v| f(&x, &gamma, v), &beta, &gr.param_grads["beta"], FD_STEP, ALL, 0).max_rel_error,
    ])
}

pub fn check_fc(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = Shape::new(r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=2), r.random_range(1..=2));
    let (d, m) = (s.per_sample(), r.random_range(1..=5));
    let x = uniform(&mut r, s.numel());
    let wt = uniform(&mut r, d * m);
    let b = uniform(&mut r, m);
    let proj = uniform(&mut r, s.n * m);
    let g = fully_connected_backward(&tensor(s, &x), &wt, &b, &Tensor::matrix(s.n, m, proj.clone()).unwrap(), d, m).unwrap();
    let f = |x: &[f64], wt: &[f64], b: &[f64]| dot(fully_connected(&tensor(s, x), wt, b, d, m).unwrap().data(), &proj);
    worst([
        grad_check(|v| f(v, &wt, &b), &x, g.input_grad.data(), FD_STEP, ALL, 0).max_rel_error,
        grad_check(|v| f(&x, v, &b), &wt, &g.param_grads["weight"], FD_STEP, ALL, 0).max_rel_error,
        grad_check(|v| f(&x, &wt, v), &b, &g.param_grads["bias"], FD_STEP, ALL, 0).max_rel_error,
    ])
}

pub fn check_maxpool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = Shape::new(r.random_range(1..=2), r.random_range(1..=3), 2 * r.random_range(1..=3), 2 * r.random_range(1..=3));
    // a shuffled grid with spacing 0.01 keeps every window's maximum unique
    let mut x: Vec<f64> = (0..s.numel()).map(|i| i as f64 * 0.01).collect();
    for i in (1..x.len()).rev() {
        x.swap(i, r.random_range(0..=i));
    }
    let proj = uniform(&mut r, s.numel() / 4);
    let out = maxpool2x2(&tensor(s, &x)).unwrap();
    let gx = maxpool2x2_backward(s, &out.argmax, &tensor(out.output.shape(), &proj)).unwrap();
    let f = |x: &[f64]| dot(maxpool2x2(&tensor(s, x)).unwrap().output.data(), &proj);
    grad_check(f, &x, gx.data(), FD_STEP, ALL, 0).max_rel_error
}

pub fn check_avgpool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = Shape::new(r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=7), r.random_range(1..=7));
    let x = uniform(&mut r, s.numel());
    let proj = uniform(&mut r, s.n * s.c);
    let gx = avgpool_global_backward(s, &tensor(Shape::new(s.n, s.c, 1, 1), &proj)).unwrap();
    let f = |x: &[f64]| dot(avgpool_global(&tensor(s, x)).data(), &proj);
    grad_check(f, &x, gx.data(), FD_STEP, ALL, 0).max_rel_error
}

pub fn check_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = Shape::new(2, r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4));
    let x = off_zero(&mut r, s.numel());
    let proj = uniform(&mut r, s.numel());
    let gx = relu_backward(&tensor(s, &x), &tensor(s, &proj)).unwrap();
    let f = |x: &[f64]| dot(relu(&tensor(s, x)).data(), &proj);
    grad_check(f, &x, gx.data(), FD_STEP, ALL, 0).max_rel_error
}

pub fn check_add(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = Shape::new(2, r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4));
    let a = uniform(&mut r, s.numel());
    let b = uniform(&mut r, s.numel());
    let proj = uniform(&mut r, s.numel());
    let (ga, gb) = elementwise_add_backward(&tensor(s, &proj));
    let f = |a: &[f64], b: &[f64]| dot(elementwise_add(&tensor(s, a), &tensor(s, b)).unwrap().data(), &proj);
    worst([
        grad_check(|v| f(v, &b), &a, ga.input_grad.data(), FD_STEP, ALL, 0).max_rel_error,
        grad_check(|v| f(&a, v), &b, gb.data(), FD_STEP, ALL, 0).max_rel_error,
    ])
}

pub fn check_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, m) = (r.random_range(1..=4), r.random_range(2..=6));
    let z: Vec<f64> = uniform(&mut r, n * m).iter().map(|v| 3.0 * v).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let loss = |z: &[f64]| {
        softmax_cross_entropy(&Tensor::matrix(n, m, z.to_vec()).unwrap(), ClassTargets::Indices(&labels)).unwrap()
    };
    let g = loss(&z).logit_grad;
    grad_check(|v| loss(v).loss, &z, g.data(), FD_STEP, ALL, 0).max_rel_error
}

pub fn check_sigmoid(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, m) = (r.random_range(1..=4), r.random_range(1..=9));
    let z: Vec<f64> = uniform(&mut r, n * m).iter().map(|v| 4.0 * v).collect();
    let y: Vec<f64> = (0..n * m).map(|_| r.random_range(0..2) as f64).collect();
    let loss = |z: &[f64]| sigmoid_multilabel_loss(&Tensor::matrix(n, m, z.to_vec()).unwrap(), &y).unwrap();
    let g = loss(&z).logit_grad;
    grad_check(|v| loss(v).loss, &z, g.data(), FD_STEP, ALL, 0).max_rel_error
}

pub type OpCheck = fn(u64) -> f64;

pub fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("conv", check_conv),
        ("batchnorm", check_batchnorm),
        ("fc", check_fc),
        ("maxpool", check_maxpool),
        ("avgpool", check_avgpool),
        ("relu", check_relu),
        ("add", check_add),
        ("softmax", check_softmax),
        ("sigmoid", check_sigmoid),
    ]
}

/// Worst relative error of one op over [`GRAD_SEEDS`] seeds.
pub fn op_worst(check: OpCheck) -> f64 {
    worst((0..GRAD_SEEDS).map(|s| check(1000 + s)))
}

// ---- protocol oracles ----

/// Exhaustive sweep: every candidate threshold (−∞, each midpoint, +∞) is
/// scored by direct counting; the smallest maximizer wins.
pub fn oracle_threshold(samples: &[(f64, bool)]) -> (f64, usize) {
    let mut vals: Vec<f64> = samples.iter().map(|s| s.0).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let mut cands = vec![f64::NEG_INFINITY];
    cands.extend(vals.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    cands.push(f64::INFINITY);
    let mut best = (f64::NAN, 0);
    for t in cands {
        let correct = samples.iter().filter(|(x, same)| (*x >= t) == *same).count();
        if best.0.is_nan() || correct > best.1 {
            best = (t, correct);
        }
    }
    best
}

pub fn oracle_verify(sims: &[f64], meta: &[(bool, usize)]) -> Vec<(f64, f64)> {
    let splits = meta.iter().map(|m| m.1 + 1).max().unwrap();
    (0..splits)
        .map(|s| {
            let rest: Vec<(f64, bool)> = sims.iter().zip(meta).filter(|(_, m)| m.1 != s).map(|(&x, m)| (x, m.0)).collect();
            let (t, _) = oracle_threshold(&rest);
            let held: Vec<(f64, bool)> = sims.iter().zip(meta).filter(|(_, m)| m.1 == s).map(|(&x, m)| (x, m.0)).collect();
            let hits = held.iter().filter(|(x, same)| (*x >= t) == *same).count();
            (t, hits as f64 / held.len() as f64)
        })
        .collect()
}

/// Every observed score and the above-one sentinel, tested in increasing
/// order with rates counted directly.
pub fn oracle_operating_point(scores: &[f64], labels: &[bool], classes: usize, target: f64) -> OperatingPoint {
    let mut cands = scores.to_vec();
    cands.push(above_one());
    cands.sort_by(f64::total_cmp);
    let n = scores.len() / classes;
    for t in cands {
        let neg = labels.iter().filter(|l| !**l).count();
        let pos = labels.len() - neg;
        let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count();
        let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count();
        let fpr = if neg == 0 { 0.0 } else { fp as f64 / neg as f64 };
        if fpr <= target {
            let abstain = (0..n).filter(|i| scores[i * classes..(i + 1) * classes].iter().all(|s| *s < t)).count();
            return OperatingPoint {
                threshold: t,
                tpr: if pos == 0 { 0.0 } else { tp as f64 / pos as f64 },
                fpr,
                abstain_rate: if n == 0 { 0.0 } else { abstain as f64 / n as f64 },
            };
        }
    }
    unreachable!("the sentinel admits no false positives")
}

/// A random verification instance; half the instances draw similarities
/// from a coarse grid so ties are common.
pub fn verify_instance(seed: u64) -> (Vec<f64>, Vec<(bool, usize)>) {
    let mut r = rng(seed);
    let n = r.random_range(20..=2000);
    let splits = r.random_range(2..=10);
    let coarse = seed.is_multiple_of(2);
    let mut sims = Vec::with_capacity(n);
    let mut meta = Vec::with_capacity(n);
    for i in 0..n {
        let same = r.random_bool(0.5);
        let mut x: f64 = r.random_range(-1.0..1.0) + if same { 0.4 } else { 0.0 };
        if coarse {
            x = (x * 10.0).round() / 10.0;
        }
        sims.push(x);
        // every split gets at least one pair
        meta.push((same, if i < splits { i } else { r.random_range(0..splits) }));
    }
    (sims, meta)
}

pub fn operating_instance(seed: u64) -> (Vec<f64>, Vec<bool>, usize, f64) {
    let mut r = rng(seed);
    let classes = r.random_range(1..=9);
    let n = r.random_range(1..=2000 / classes);
    let coarse = seed.is_multiple_of(2);
    let mut scores = Vec::with_capacity(n * classes);
    let mut labels = Vec::with_capacity(n * classes);
    for _ in 0..n * classes {
        let l = r.random_bool(0.3);
        let mut s: f64 = (r.random_range(0.0..1.0f64) + if l { 0.3 } else { 0.0 }).min(1.0);
        if coarse {
            s = (s * 20.0).round() / 20.0;
        }
        scores.push(s);
        labels.push(l);
    }
    let target = [0.0, 0.0103, 0.05, 0.2, r.random_range(0.0..1.0)][r.random_range(0..5)];
    (scores, labels, classes, target)
}

/// Outcome of one randomized protocol comparison; `None` when the library
/// and oracle agree exactly (and the fpr bound holds).
pub fn protocol_mismatch(seed: u64) -> Option<String> {
    let (sims, meta) = verify_instance(seed);
    let got: VerifyReport = verify_scores(&sims, &meta).unwrap();
    let want = oracle_verify(&sims, &meta);
    for (g, (t, acc)) in got.splits.iter().zip(&want) {
        if g.threshold.to_bits() != t.to_bits() || g.accuracy != *acc {
            return Some(format!("verify seed {seed} split {}: got ({}, {}), oracle ({t}, {acc})", g.split, g.threshold, g.accuracy));
        }
    }
    let (scores, labels, classes, target) = operating_instance(seed);
    let got = select_operating_point(&scores, &labels, classes, target).unwrap();
    let want = oracle_operating_point(&scores, &labels, classes, target);
    if got != want {
        return Some(format!("operating point seed {seed}: got {got:?}, oracle {want:?}"));
    }
    if got.fpr > target {
        return Some(format!("operating point seed {seed}: fpr {} above target {target}", got.fpr));
    }
    None
}
