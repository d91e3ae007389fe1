use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::params::{derive_seed, ParamStore};
use super::schedule::lr_at;
use super::sgd::sgd_momentum_step;
use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::graph::{backward_to, run_from, GraphSpec, LayerKind, Mode, INPUT};
use crate::ops::{sigmoid_multilabel_loss, softmax_cross_entropy, ClassTargets, LossOutput};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub index: u64,
    pub rate: f64,
    pub loss: f32,
    pub accuracy: f64,
}

/// Per-minibatch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub init_std: f64,
    pub seed: u64,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# init_std={} seed={}\nindex\trate\tloss\taccuracy\n", self.init_std, self.seed);
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.index, r.rate, r.loss, r.accuracy);
        }
        s
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Node producing the logits consumed by the graph's head.
pub fn classifier(graph: &GraphSpec) -> &str {
    &graph.output().inputs[0]
}

fn check_labels(graph: &GraphSpec, labels: &Labels) -> Result<()> {
    let (width, _, _) = graph.dims_of(classifier(graph)).expect("classifier exists");
    match (&graph.output().kind, labels) {
        (LayerKind::SoftmaxHead, Labels::Class { classes, .. })
        | (LayerKind::SigmoidHead, Labels::Multi { classes, .. })
            if *classes <= width => {}
        (kind, l) => {
            return Err(Error::InvalidArgument(format!(
                "{} labels with {} classes do not fit a {}-wide {} head",
                match l {
                    Labels::Class { .. } => "class",
                    Labels::Multi { .. } => "multi-label",
                },
                l.classes(),
                width,
                kind.tag()
            )))
        }
    }
    Ok(())
}

/// Loss and logit gradient for the graph's head kind.
pub fn head_loss(graph: &GraphSpec, logits: &Tensor<f32>, labels: &Labels) -> Result<LossOutput<f32>> {
    match (&graph.output().kind, labels) {
        (LayerKind::SoftmaxHead, Labels::Class { values, .. }) => {
            softmax_cross_entropy(logits, ClassTargets::Indices(values))
        }
        (LayerKind::SigmoidHead, Labels::Multi { values, .. }) => sigmoid_multilabel_loss(logits, values),
        _ => Err(Error::InvalidArgument("labels do not match head kind".into())),
    }
}

/// Fraction of samples whose argmax matches (class labels), or of
/// `(sample, class)` entries whose 0.5-thresholded score matches
/// (multi-label).
pub fn batch_accuracy(scores: &Tensor<f32>, labels: &Labels) -> f64 {
    let n = scores.shape().n;
    if n == 0 {
        return 0.0;
    }
    match labels {
        Labels::Class { values, .. } => {
            let hits = (0..n).filter(|&i| argmax(scores.sample(i)) == values[i]).count();
            hits as f64 / n as f64
        }
        Labels::Multi { values, .. } => {
            let hits = scores
                .data()
                .iter()
                .zip(values)
                .filter(|(&p, &t)| (p >= 0.5) == (t == 1.0))
                .count();
            hits as f64 / values.len() as f64
        }
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Epoch-wise reshuffled minibatches; a tail shorter than the batch size is
/// dropped.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Sampler {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "minibatch order")),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Train the whole graph on images.
pub fn train(
    graph: &GraphSpec,
    store: &mut ParamStore<f32>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainLog> {
    let seeds = BTreeMap::from([(INPUT.to_string(), data.images.clone())]);
    train_from(graph, store, &seeds, &data.labels, 0, config)
}

/// Train nodes `start..` given per-sample seed activations for the
/// frontier of `start`. Batchnorms whose scale is frozen run on their
/// running statistics; backward stops at the first node holding a
/// trainable array.
pub fn train_from(
    graph: &GraphSpec,
    store: &mut ParamStore<f32>,
    seeds: &BTreeMap<String, Tensor<f32>>,
    labels: &Labels,
    start: usize,
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    check_labels(graph, labels)?;
    let n = labels.len();
    if let Some((k, t)) = seeds.iter().find(|(_, t)| t.shape().n != n) {
        return Err(Error::Shape(format!(
            "seed `{k}` has {} samples, labels have {n}",
            t.shape().n
        )));
    }
    let mut log = TrainLog {
        init_std: config.init_std,
        seed: config.seed,
        rows: Vec::new(),
    };
    if config.max_minibatches == 0 {
        return Ok(log);
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let stop = graph.nodes()[start..]
        .iter()
        .position(|node| node.param_names().iter().any(|p| store.is_trainable(p)))
        .map(|p| p + start);
    let logits_node = classifier(graph).to_string();
    let mut sampler = Sampler::new(n, config.batch_size, config.seed);
    for t in 0..config.max_minibatches {
        let idx = sampler.next();
        let batch: BTreeMap<String, Tensor<f32>> =
            seeds.iter().map(|(k, v)| (k.clone(), v.gather(&idx))).collect();
        let y = labels.gather(&idx);
        let pass = run_from(graph, store, batch, start, Mode::Train)
            .map_err(|e| e.context(format!("minibatch {t}")))?;
        let out = head_loss(graph, &pass.acts[&logits_node], &y)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged { index: t as usize });
        }
        let rate = lr_at(t, config);
        if let Some(stop) = stop {
            let grads = backward_to(graph, store, &pass, &logits_node, out.logit_grad.clone(), stop)
                .map_err(|e| e.context(format!("minibatch {t}")))?;
            sgd_momentum_step(store, &grads.params, rate, config.momentum)?;
        }
        for (bn, st) in pass.stat_updates {
            store.set_running(bn, st);
        }
        log.rows.push(LogRow {
            index: t,
            rate,
            loss: out.loss,
            accuracy: batch_accuracy(&out.scores, &y),
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::linear_graph;
    use crate::train::init_params;

    fn separable() -> Dataset {
        // Two clusters on either side of x0 + x1 = 0.
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..64 {
            let t = i as f32 / 64.0;
            let (a, b) = (t * 2.0 - 1.0, 1.0 - t);
            let cls = i % 2;
            let s = if cls == 1 { 1.0 } else { -1.0 };
            x.extend_from_slice(&[a + s, b + s, 0.3 * t]);
            y.push(cls);
        }
        Dataset::new(Tensor::matrix(64, 3, x).unwrap(), Labels::class(2, y).unwrap()).unwrap()
    }

    #[test]
    fn zero_minibatches_leave_store_unchanged() {
        let g = linear_graph(3, 2, LayerKind::SoftmaxHead).unwrap();
        let mut p = init_params(&g, 0.1, 4).unwrap();
        let before = p.clone();
        let cfg = TrainConfig {
            max_minibatches: 0,
            ..TrainConfig::default()
        };
        let log = train(&g, &mut p, &separable(), &cfg).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let g = linear_graph(3, 2, LayerKind::SoftmaxHead).unwrap();
        let data = separable();
        let mut p = init_params(&g, 0.1, 4).unwrap();
        let cfg = TrainConfig {
            max_minibatches: 500,
            batch_size: 16,
            ..TrainConfig::default()
        };
        train(&g, &mut p, &data, &cfg).unwrap();
        let logits = crate::graph::forward(&g, &p, &data.images, Mode::Infer).unwrap();
        assert_eq!(batch_accuracy(&logits["head"], &data.labels), 1.0);
    }

    #[test]
    fn divergence_reports_index() {
        let g = linear_graph(3, 2, LayerKind::SoftmaxHead).unwrap();
        let mut p = init_params(&g, 0.1, 4).unwrap();
        let mut data = separable();
        data.images.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            max_minibatches: 50,
            batch_size: 64,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&g, &mut p, &data, &cfg), Err(Error::Diverged { index: 0 })));
    }

    #[test]
    fn label_width_mismatch_rejected() {
        let g = linear_graph(3, 2, LayerKind::SoftmaxHead).unwrap();
        let mut p = init_params(&g, 0.1, 4).unwrap();
        let d = separable();
        let bad = Dataset::new(d.images.clone(), Labels::class(5, vec![0; 64]).unwrap()).unwrap();
        assert!(train(&g, &mut p, &bad, &TrainConfig::default()).is_err());
    }
}
