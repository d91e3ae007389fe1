//! Shared-trunk inference: the trunk runs once per batch and every head
//! continues from the cached activations at its branch point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::graph::{count_flops, forward, head_cost, run_from, FlopConvention, GraphSpec, Mode, INPUT};
use crate::tensor::Tensor;
use crate::train::{argmax, load_checkpoint, save_checkpoint, BranchHead, HeadSpec, LossKind, ParamStore};

pub const TRUNK_FILE: &str = "trunk.ckpt";
pub const MANIFEST_FILE: &str = "heads.txt";

#[derive(Debug)]
pub struct MultiHeadModel {
    pub trunk: GraphSpec,
    pub trunk_params: ParamStore<f32>,
    pub heads: Vec<BranchHead>,
    trunk_runs: AtomicUsize,
}

/// Scores of one head over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutput {
    pub task: String,
    pub loss: LossKind,
    /// `(n, k)` softmax distributions or sigmoid scores.
    pub scores: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `(n, identities)` classifier outputs before the softmax.
    pub identity_logits: Tensor<f32>,
    pub tasks: Vec<TaskOutput>,
}

impl Predictions {
    /// `id task=label:prob ...`, then `<task>_scores=[...]` for every
    /// multi-label head.
    pub fn line(&self, i: usize, id: &str) -> String {
        let mut s = id.to_string();
        let ident = self.identity_logits.sample(i);
        let _ = write!(s, " identity={}", argmax(ident));
        for t in &self.tasks {
            let row = t.scores.sample(i);
            let _ = write!(s, " {}={}:{:.6}", t.task, t.labels[i], row[t.labels[i]]);
        }
        for t in self.tasks.iter().filter(|t| t.loss == LossKind::SigmoidMultilabel) {
            let v: Vec<String> = t.scores.sample(i).iter().map(|p| format!("{p:.6}")).collect();
            let _ = write!(s, " {}_scores=[{}]", t.task, v.join(","));
        }
        s
    }
}

/// Cost of the combined model under one convention.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedCost {
    pub convention: FlopConvention,
    pub trunk: u64,
    pub per_head: Vec<(String, u64)>,
    pub total: u64,
}

impl CombinedCost {
    pub fn ratio(&self) -> f64 {
        self.total as f64 / self.trunk as f64
    }
}

fn check_head(trunk: &GraphSpec, head: &BranchHead) -> Result<()> {
    let start = trunk.branch_index(&head.spec.branch_layer)?;
    if start != head.start
        || head.graph.input_shape() != trunk.input_shape()
        || head.graph.nodes()[..start] != trunk.nodes()[..start]
    {
        return Err(Error::Shape(format!(
            "head `{}` does not share the trunk below `{}`",
            head.spec.task, head.spec.branch_layer
        )));
    }
    Ok(())
}

impl MultiHeadModel {
    pub fn new(trunk: GraphSpec, trunk_params: ParamStore<f32>, heads: Vec<BranchHead>) -> Result<Self> {
        for h in &heads {
            check_head(&trunk, h)?;
        }
        let mut tasks: Vec<&str> = heads.iter().map(|h| h.spec.task.as_str()).collect();
        tasks.sort_unstable();
        if let Some(w) = tasks.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("duplicate task `{}`", w[0])));
        }
        Ok(MultiHeadModel {
            trunk,
            trunk_params,
            heads,
            trunk_runs: AtomicUsize::new(0),
        })
    }

    /// Number of trunk evaluations so far.
    pub fn trunk_runs(&self) -> usize {
        self.trunk_runs.load(Ordering::SeqCst)
    }

    /// Run the trunk once and every head from its branch point.
    pub fn predict_all(&self, input: &Tensor<f32>) -> Result<Predictions> {
        let (c, h, w) = self.trunk.input_shape();
        let s = input.shape();
        if (s.c, s.h, s.w) != (c, h, w) {
            return Err(Error::Shape(format!("input is {s}, trunk expects {c}x{h}x{w}")));
        }
        let acts = forward(&self.trunk, &self.trunk_params, input, Mode::Infer)?;
        self.trunk_runs.fetch_add(1, Ordering::SeqCst);
        let identity_logits = acts["fc"].clone();
        let mut tasks = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let mut seeds = BTreeMap::new();
            for name in head.graph.frontier(head.start) {
                let t = if name == INPUT { input.clone() } else { acts[&name].clone() };
                seeds.insert(name, t);
            }
            let mut pass = run_from(&head.graph, &head.params, seeds, head.start, Mode::Infer)
                .map_err(|e| e.context(format!("head `{}`", head.spec.task)))?;
            let scores = pass.acts.remove(&head.graph.output().name).expect("head evaluated");
            tasks.push(task_output(head, scores));
        }
        Ok(Predictions { identity_logits, tasks })
    }

    /// One head evaluated on its own through the full graph.
    pub fn predict_standalone(&self, task: &str, input: &Tensor<f32>) -> Result<TaskOutput> {
        let head = self
            .heads
            .iter()
            .find(|h| h.spec.task == task)
            .ok_or_else(|| Error::InvalidArgument(format!("no head for task `{task}`")))?;
        let merged = head.merged(&self.trunk_params)?;
        let mut acts = forward(&head.graph, &merged, input, Mode::Infer)?;
        let scores = acts.remove(&head.graph.output().name).expect("head evaluated");
        Ok(task_output(head, scores))
    }

    /// Trunk cost plus, per head, the layers from its branch point onward
    /// with its own classifier.
    pub fn combined_flops(&self, convention: FlopConvention) -> Result<CombinedCost> {
        let flops = count_flops(&self.trunk, self.trunk.input_shape(), convention)?;
        let mut per_head = Vec::new();
        for h in &self.heads {
            per_head.push((
                h.spec.task.clone(),
                head_cost(&self.trunk, &flops, &h.spec.branch_layer, h.spec.num_classes)?,
            ));
        }
        let total = flops.total + per_head.iter().map(|(_, c)| c).sum::<u64>();
        Ok(CombinedCost {
            convention,
            trunk: flops.total,
            per_head,
            total,
        })
    }

    /// Directory with `trunk.ckpt`, `heads/<task>.ckpt` and a `heads.txt`
    /// manifest of `task branch_layer num_classes loss` lines.
    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("heads"))
            .map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))?;
        save_checkpoint(&dir.join(TRUNK_FILE), &self.trunk, &self.trunk_params)?;
        let mut manifest = String::new();
        for h in &self.heads {
            save_head(dir, h)?;
            let _ = writeln!(manifest, "{}", h.spec);
        }
        std::fs::write(dir.join(MANIFEST_FILE), manifest)
            .map_err(|e| Error::from(e).context(format!("writing {}", dir.display())))
    }

    pub fn load_bundle(dir: &Path) -> Result<Self> {
        let (trunk, trunk_params) = load_checkpoint(&dir.join(TRUNK_FILE))?;
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap_or_default();
        let mut heads = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let spec: HeadSpec = line.parse()?;
            let (graph, params) = load_checkpoint(&head_path(dir, &spec.task))?;
            let start = graph.branch_index(&spec.branch_layer)?;
            heads.push(BranchHead {
                spec,
                graph,
                params,
                start,
            });
        }
        MultiHeadModel::new(trunk, trunk_params, heads)
    }
}

pub fn head_path(dir: &Path, task: &str) -> std::path::PathBuf {
    dir.join("heads").join(format!("{task}.ckpt"))
}

/// Write one head's checkpoint into a bundle directory and register it in
/// the manifest, replacing an existing entry for the same task.
pub fn add_head_to_bundle(dir: &Path, head: &BranchHead) -> Result<()> {
    std::fs::create_dir_all(dir.join("heads"))
        .map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))?;
    save_head(dir, head)?;
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap_or_default();
    let mut lines: Vec<String> = text
        .lines()
        .filter(|l| l.split_whitespace().next() != Some(head.spec.task.as_str()) && !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    lines.push(head.spec.to_string());
    std::fs::write(&path, lines.join("\n") + "\n")
        .map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

fn save_head(dir: &Path, h: &BranchHead) -> Result<()> {
    save_checkpoint(&head_path(dir, &h.spec.task), &h.graph, &h.params)
}

fn task_output(head: &BranchHead, scores: Tensor<f32>) -> TaskOutput {
    let labels = (0..scores.shape().n).map(|i| argmax(scores.sample(i))).collect();
    TaskOutput {
        task: head.spec.task.clone(),
        loss: head.spec.loss,
        scores,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_trunk, ArchConfig};
    use crate::tensor::Shape;
    use crate::train::{init_params, make_branch};

    fn model(heads: &[(&str, &str, usize, LossKind)]) -> MultiHeadModel {
        let g = build_trunk(&ArchConfig {
            num_identities: 5,
            ..ArchConfig::desk()
        })
        .unwrap();
        let p = init_params(&g, 0.1, 2).unwrap();
        let hs = heads
            .iter()
            .map(|(t, b, k, l)| {
                let spec = HeadSpec {
                    task: t.to_string(),
                    branch_layer: b.to_string(),
                    num_classes: *k,
                    loss: *l,
                };
                make_branch(&g, &p, &spec, false, 0.1, 5).unwrap()
            })
            .collect();
        MultiHeadModel::new(g, p, hs).unwrap()
    }

    #[test]
    fn no_heads_identity_only() {
        let m = model(&[]);
        let x = Tensor::full(Shape::new(1, 3, 56, 56), 0.25f32);
        let p = m.predict_all(&x).unwrap();
        assert!(p.tasks.is_empty());
        assert_eq!(p.identity_logits.shape().per_sample(), 5);
        let c = m.combined_flops(FlopConvention::Macs).unwrap();
        assert_eq!(c.total, c.trunk);
    }

    #[test]
    fn fc_heads_share_one_trunk_run() {
        let m = model(&[
            ("gender", "fc", 2, LossKind::Softmax),
            ("ethnicity", "fc", 9, LossKind::SigmoidMultilabel),
        ]);
        let x = Tensor::full(Shape::new(2, 3, 56, 56), 0.5f32);
        let p = m.predict_all(&x).unwrap();
        assert_eq!(m.trunk_runs(), 1);
        assert_eq!(p.tasks.len(), 2);
        let line = p.line(0, "a");
        assert!(line.starts_with("a identity="));
        assert!(line.contains(" ethnicity_scores=["));
        let c = m.combined_flops(FlopConvention::Macs).unwrap();
        let emb = 80;
        assert_eq!(c.total, c.trunk + emb * 2 + emb * 9);
    }

    #[test]
    fn mismatched_head_rejected() {
        let m = model(&[("age", "conv22", 14, LossKind::Softmax)]);
        let wide = build_trunk(&ArchConfig {
            num_identities: 5,
            stem_channels: 64,
            ..ArchConfig::desk()
        })
        .unwrap();
        let p = init_params(&wide, 0.1, 2).unwrap();
        let err = MultiHeadModel::new(wide, p, m.heads.clone()).unwrap_err();
        assert!(err.to_string().contains("does not share"), "{err}");
    }
}
