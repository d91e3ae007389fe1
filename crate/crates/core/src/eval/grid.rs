use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::graph::{infer_nodes, GraphSpec, INPUT};
use crate::tensor::Tensor;
use crate::train::{
    batch_accuracy, derive_seed, finetune_cached, make_branch, HeadSpec, LossKind, ParamStore, TrainConfig,
};

/// One column of the grid: a task with training and held-out data.
#[derive(Clone, Debug)]
pub struct GridTask {
    pub name: String,
    pub loss: LossKind,
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub finetune: TrainConfig,
    pub warm: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub layers: Vec<String>,
    pub tasks: Vec<String>,
    /// `accuracy[layer][task]` on held-out data.
    pub accuracy: Vec<Vec<f64>>,
    pub seed: u64,
}

impl GridResult {
    /// Best layer index per task; ties go to the deeper layer.
    pub fn best(&self) -> Vec<usize> {
        (0..self.tasks.len())
            .map(|t| {
                let mut best = 0;
                for l in 0..self.layers.len() {
                    if self.accuracy[l][t] >= self.accuracy[best][t] {
                        best = l;
                    }
                }
                best
            })
            .collect()
    }

    pub fn best_layer(&self, task: &str) -> Option<&str> {
        let t = self.tasks.iter().position(|x| x == task)?;
        Some(&self.layers[self.best()[t]])
    }

    pub fn cell(&self, layer: &str, task: &str) -> Option<f64> {
        let l = self.layers.iter().position(|x| x == layer)?;
        let t = self.tasks.iter().position(|x| x == task)?;
        Some(self.accuracy[l][t])
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# seed={}\nlayer", self.seed);
        for t in &self.tasks {
            s.push('\t');
            s.push_str(t);
        }
        s.push('\n');
        for (l, row) in self.layers.iter().zip(&self.accuracy) {
            s.push_str(l);
            for a in row {
                let _ = write!(s, "\t{a:.4}");
            }
            s.push('\n');
        }
        s.push_str("best");
        for b in self.best() {
            s.push('\t');
            s.push_str(&self.layers[b]);
        }
        s.push('\n');
        s
    }

    /// Aligned table with the best cell of each column starred.
    pub fn to_table(&self) -> String {
        let best = self.best();
        let lw = self.layers.iter().map(String::len).max().unwrap_or(5).max(5);
        let cw = self.tasks.iter().map(|t| t.len()).max().unwrap_or(0).max(8);
        let mut s = format!("{:lw$}", "layer");
        for t in &self.tasks {
            let _ = write!(s, "  {t:>cw$}");
        }
        s.push('\n');
        for (l, row) in self.accuracy.iter().enumerate() {
            let _ = write!(s, "{:lw$}", self.layers[l]);
            for (t, a) in row.iter().enumerate() {
                let mark = if best[t] == l { "*" } else { " " };
                let cell = format!("{:.2}{mark}", a * 100.0);
                let _ = write!(s, "  {cell:>cw$}");
            }
            s.push('\n');
        }
        s
    }
}

/// Fine-tune a head for every `(layer, task)` cell and score it on the
/// task's held-out data. Frozen activations are extracted once for all
/// layers; cell seeds derive from `(config seed, layer, task)`.
pub fn branch_grid(
    trunk: &GraphSpec,
    params: &ParamStore<f32>,
    tasks: &[GridTask],
    layers: &[&str],
    config: &GridConfig,
) -> Result<GridResult> {
    let mut starts = Vec::with_capacity(layers.len());
    for l in layers {
        starts.push(trunk.branch_index(l)?);
    }
    let mut names: Vec<String> = starts.iter().flat_map(|&s| trunk.frontier(s)).collect();
    names.sort();
    names.dedup();
    let keep: Vec<&str> = names.iter().map(String::as_str).filter(|n| *n != INPUT).collect();
    let extract = |images: &Tensor<f32>| -> Result<BTreeMap<String, Tensor<f32>>> {
        let seeds = BTreeMap::from([(INPUT.to_string(), images.clone())]);
        let mut acts = infer_nodes(trunk, params, &seeds, 0, &keep, 64)?;
        acts.insert(INPUT.to_string(), images.clone());
        Ok(acts)
    };
    let mut cache: Vec<(BTreeMap<String, Tensor<f32>>, BTreeMap<String, Tensor<f32>>)> = Vec::new();
    for t in tasks {
        cache.push((extract(&t.train.images)?, extract(&t.val.images)?));
    }

    let mut accuracy = vec![vec![0.0; tasks.len()]; layers.len()];
    for (li, (&layer, &start)) in layers.iter().zip(&starts).enumerate() {
        let frontier = trunk.frontier(start);
        let pick = |acts: &BTreeMap<String, Tensor<f32>>| -> BTreeMap<String, Tensor<f32>> {
            frontier.iter().map(|n| (n.clone(), acts[n].clone())).collect()
        };
        for (ti, task) in tasks.iter().enumerate() {
            let cell = format!("cell ({layer}, {})", task.name);
            let spec = HeadSpec {
                task: task.name.clone(),
                branch_layer: layer.to_string(),
                num_classes: task.train.labels.classes(),
                loss: task.loss,
            };
            let seed = derive_seed(config.finetune.seed, &format!("{layer}/{}", task.name));
            let mut head = make_branch(trunk, params, &spec, config.warm, config.finetune.init_std, seed)
                .map_err(|e| e.context(cell.clone()))?;
            let ft = TrainConfig {
                seed,
                ..config.finetune.clone()
            };
            finetune_cached(&mut head, &pick(&cache[ti].0), &task.train, &ft).map_err(|e| e.context(cell.clone()))?;
            let out = infer_nodes(
                &head.graph,
                &head.params,
                &pick(&cache[ti].1),
                start,
                &[&head.graph.output().name],
                256,
            )
            .map_err(|e| e.context(cell))?;
            accuracy[li][ti] = batch_accuracy(&out[&head.graph.output().name], &task.val.labels);
        }
    }
    Ok(GridResult {
        layers: layers.iter().map(|s| s.to_string()).collect(),
        tasks: tasks.iter().map(|t| t.name.clone()).collect(),
        accuracy,
        seed: config.finetune.seed,
    })
}

/// Checks that a grid task's labels suit its loss.
pub fn grid_task(name: &str, loss: LossKind, train: Dataset, val: Dataset) -> Result<GridTask> {
    let ok = |l: &Labels| matches!((loss, l), (LossKind::Softmax, Labels::Class { .. }) | (LossKind::SigmoidMultilabel, Labels::Multi { .. }));
    if !ok(&train.labels) || !ok(&val.labels) {
        return Err(Error::InvalidArgument(format!("task `{name}` labels do not suit a {loss} head")));
    }
    Ok(GridTask {
        name: name.to_string(),
        loss,
        train,
        val,
    })
}
