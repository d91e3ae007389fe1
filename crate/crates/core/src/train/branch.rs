use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::config::TrainConfig;
use super::params::{derive_seed, init_nodes, ParamStore};
use super::trainer::{train, train_from, TrainLog};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{infer_nodes, GraphSpec, LayerKind, INPUT};
use crate::tensor::Tensor;

/// Samples per chunk when extracting frozen activations.
const EXTRACT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Softmax,
    SigmoidMultilabel,
}

impl LossKind {
    pub fn head_kind(self) -> LayerKind {
        match self {
            LossKind::Softmax => LayerKind::SoftmaxHead,
            LossKind::SigmoidMultilabel => LayerKind::SigmoidHead,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Softmax => "softmax",
            LossKind::SigmoidMultilabel => "sigmoid",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(LossKind::Softmax),
            "sigmoid" | "sigmoid-multilabel" => Ok(LossKind::SigmoidMultilabel),
            _ => Err(Error::Config(format!("unknown loss `{s}` (softmax, sigmoid)"))),
        }
    }
}

/// What a head predicts and where it leaves the trunk. Serialized as one
/// manifest line: `task branch_layer num_classes loss`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub task: String,
    pub branch_layer: String,
    pub num_classes: usize,
    pub loss: LossKind,
}

impl fmt::Display for HeadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.task, self.branch_layer, self.num_classes, self.loss)
    }
}

impl FromStr for HeadSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t: Vec<&str> = s.split_whitespace().collect();
        let [task, branch, k, loss] = t.as_slice() else {
            return Err(Error::Format(format!(
                "head line `{s}` is not `task branch_layer num_classes loss`"
            )));
        };
        Ok(HeadSpec {
            task: task.to_string(),
            branch_layer: branch.to_string(),
            num_classes: k
                .parse()
                .map_err(|_| Error::Format(format!("bad class count `{k}`")))?,
            loss: loss.parse()?,
        })
    }
}

/// A task head: the trunk graph with its classifier replaced, and the
/// parameters of every node from the branch point onward. Nodes below the
/// branch point take their parameters from the (frozen) trunk.
#[derive(Clone, Debug)]
pub struct BranchHead {
    pub spec: HeadSpec,
    pub graph: GraphSpec,
    pub params: ParamStore<f32>,
    /// Position of the branch layer in `graph`.
    pub start: usize,
}

/// Build a head branching at `spec.branch_layer`. Layers from the branch
/// point up to the classifier are freshly initialized, or copied from
/// `pretrained` when `warm`; the classifier is always fresh.
pub fn make_branch(
    trunk: &GraphSpec,
    pretrained: &ParamStore<f32>,
    spec: &HeadSpec,
    warm: bool,
    init_std: f64,
    seed: u64,
) -> Result<BranchHead> {
    let start = trunk.branch_index(&spec.branch_layer)?;
    if spec.num_classes < 2 && spec.loss == LossKind::Softmax {
        return Err(Error::InvalidArgument("a softmax head needs at least 2 classes".into()));
    }
    let graph = trunk.with_classifier(spec.num_classes, spec.loss.head_kind())?;
    let fc = graph
        .position("fc")
        .ok_or_else(|| Error::Format("trunk has no `fc` classifier".into()))?;
    let seed = derive_seed(seed, &format!("head {}", spec.task));
    let mut params = ParamStore::new();
    if warm {
        params.copy_nodes_from(pretrained, &graph, start..fc, true)?;
    } else {
        init_nodes(&mut params, &graph, start..fc, init_std, seed, true)?;
    }
    init_nodes(&mut params, &graph, fc..graph.nodes().len(), init_std, seed, true)?;
    Ok(BranchHead {
        spec: spec.clone(),
        graph,
        params,
        start,
    })
}

impl BranchHead {
    /// Full parameter set: the trunk's arrays below the branch point
    /// (frozen) plus this head's arrays.
    pub fn merged(&self, trunk: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        let mut m = self.params.clone();
        m.copy_nodes_from(trunk, &self.graph, 0..self.start, false)?;
        Ok(m)
    }

    /// Activations the head reads from the frozen trunk, for every image.
    pub fn frontier_activations(
        &self,
        trunk: &ParamStore<f32>,
        images: &Tensor<f32>,
    ) -> Result<BTreeMap<String, Tensor<f32>>> {
        frontier_activations(&self.graph, trunk, images, self.start)
    }
}

/// Infer-mode outputs of the nodes feeding `start` and later nodes.
pub fn frontier_activations(
    graph: &GraphSpec,
    trunk: &ParamStore<f32>,
    images: &Tensor<f32>,
    start: usize,
) -> Result<BTreeMap<String, Tensor<f32>>> {
    let names = graph.frontier(start);
    let keep: Vec<&str> = names.iter().map(String::as_str).filter(|n| *n != INPUT).collect();
    let seeds = BTreeMap::from([(INPUT.to_string(), images.clone())]);
    let mut acts = if keep.is_empty() {
        BTreeMap::new()
    } else {
        infer_nodes(graph, trunk, &seeds, 0, &keep, EXTRACT_CHUNK)?
    };
    if names.iter().any(|n| n == INPUT) {
        acts.insert(INPUT.to_string(), images.clone());
    }
    Ok(acts)
}

/// Train only the head: frozen activations are computed once and the
/// head's nodes are trained on them.
pub fn finetune(
    head: &mut BranchHead,
    trunk: &ParamStore<f32>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainLog> {
    let seeds = head.frontier_activations(trunk, &data.images)?;
    finetune_cached(head, &seeds, data, config)
}

/// As [`finetune`], with precomputed frontier activations.
pub fn finetune_cached(
    head: &mut BranchHead,
    seeds: &BTreeMap<String, Tensor<f32>>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainLog> {
    train_from(&head.graph, &mut head.params, seeds, &data.labels, head.start, config)
}

/// Fine-tune through the full graph with the trunk prefix frozen. Returns
/// the log and the merged store after training; the head's own arrays are
/// updated in place.
pub fn finetune_full(
    head: &mut BranchHead,
    trunk: &ParamStore<f32>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(TrainLog, ParamStore<f32>)> {
    let mut merged = head.merged(trunk)?;
    let log = train(&head.graph, &mut merged, data, config)?;
    let mut updated = ParamStore::new();
    updated.copy_nodes_from(&merged, &head.graph, head.start..head.graph.nodes().len(), true)?;
    head.params = updated;
    Ok((log, merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_trunk, head_params, ArchConfig};
    use crate::train::init_params;

    fn spec(branch: &str, k: usize) -> HeadSpec {
        HeadSpec {
            task: "t".into(),
            branch_layer: branch.into(),
            num_classes: k,
            loss: LossKind::Softmax,
        }
    }

    #[test]
    fn fc_head_counts() {
        let g = build_trunk(&ArchConfig::canonical()).unwrap();
        let p = ParamStore::new();
        let two = make_branch(&g, &p, &spec("fc", 2), false, 0.1, 0).unwrap();
        assert_eq!(two.params.trainable_numel(), 642);
        let nine = make_branch(&g, &p, &spec("fc", 9), false, 0.1, 0).unwrap();
        assert_eq!(nine.params.trainable_numel(), 2889);
    }

    #[test]
    fn head_count_matches_accounting() {
        let g = build_trunk(&ArchConfig::desk()).unwrap();
        let p = init_params(&g, 0.1, 1).unwrap();
        for b in g.branch_points() {
            for warm in [false, true] {
                let h = make_branch(&g, &p, &spec(b, 7), warm, 0.1, 0).unwrap();
                assert_eq!(h.params.trainable_numel() as u64, head_params(&g, b, 7).unwrap());
            }
        }
    }

    #[test]
    fn unknown_branch_lists_valid_names() {
        let g = build_trunk(&ArchConfig::desk()).unwrap();
        let err = make_branch(&g, &ParamStore::new(), &spec("conv3", 2), false, 0.1, 0).unwrap_err();
        assert!(err.to_string().contains("conv19"), "{err}");
    }

    #[test]
    fn warm_copies_intermediate_layers() {
        let g = build_trunk(&ArchConfig::desk()).unwrap();
        let p = init_params(&g, 0.1, 1).unwrap();
        let h = make_branch(&g, &p, &spec("conv22", 3), true, 0.1, 0).unwrap();
        assert_eq!(h.params.get("conv22.weight"), p.get("conv22.weight"));
        let cold = make_branch(&g, &p, &spec("conv22", 3), false, 0.1, 0).unwrap();
        assert_ne!(cold.params.get("conv22.weight"), p.get("conv22.weight"));
    }

    #[test]
    fn head_line_round_trip() {
        let h: HeadSpec = "ethnicity fc 9 sigmoid".parse().unwrap();
        assert_eq!(h.loss, LossKind::SigmoidMultilabel);
        assert_eq!(h.to_string(), "ethnicity fc 9 sigmoid");
        assert!("gender fc".parse::<HeadSpec>().is_err());
    }
}
