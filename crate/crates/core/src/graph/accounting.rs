use std::fmt;

use super::spec::{GraphSpec, LayerKind};
use crate::error::{Error, Result};

/// How a multiply-accumulate is counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlopConvention {
    /// One MAC counts as one operation.
    Macs,
    /// One MAC counts as two floating-point operations.
    Flops2x,
}

impl FlopConvention {
    pub fn factor(self) -> u64 {
        match self {
            FlopConvention::Macs => 1,
            FlopConvention::Flops2x => 2,
        }
    }
}

impl fmt::Display for FlopConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlopConvention::Macs => "macs",
            FlopConvention::Flops2x => "flops2x",
        })
    }
}

impl std::str::FromStr for FlopConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macs" => Ok(FlopConvention::Macs),
            "flops2x" => Ok(FlopConvention::Flops2x),
            _ => Err(Error::Config(format!("unknown flop convention `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// `(layer, learnable scalars)` for every node, in graph order.
    pub per_layer: Vec<(String, u64)>,
    pub total: u64,
}

impl ParamCount {
    /// Sum over nodes at or after position `start`.
    pub fn from_index(&self, start: usize) -> u64 {
        self.per_layer[start..].iter().map(|(_, p)| p).sum()
    }
}

/// Learnable scalars: conv weights (+bias), batchnorm gamma and beta, fc
/// weights and bias. Running statistics are not counted.
pub fn count_params(graph: &GraphSpec) -> ParamCount {
    let per_layer: Vec<(String, u64)> = graph
        .nodes()
        .iter()
        .map(|n| {
            let p: usize = n.kind.param_arrays().iter().map(|(_, c)| c).sum();
            (n.name.clone(), p as u64)
        })
        .collect();
    let total = per_layer.iter().map(|(_, p)| p).sum();
    ParamCount { per_layer, total }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub kind: &'static str,
    pub out_shape: (usize, usize, usize),
    pub params: u64,
    /// Convolution and fully connected cost under the chosen convention.
    pub main: u64,
    /// Elementwise, pooling and normalization operations.
    pub aux: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopCount {
    pub convention: FlopConvention,
    pub per_layer: Vec<LayerFlops>,
    /// Convolution + fully connected cost.
    pub total: u64,
    pub aux_total: u64,
}

impl FlopCount {
    pub fn from_index(&self, start: usize) -> u64 {
        self.per_layer[start..].iter().map(|l| l.main).sum()
    }

    /// Delimited accounting table with a totals row.
    pub fn table(&self) -> String {
        let mut s = format!("layer\tkind\tout_shape\tparams\t{}\taux_ops\n", self.convention);
        let mut params = 0;
        for l in &self.per_layer {
            params += l.params;
            s.push_str(&format!(
                "{}\t{}\t{}x{}x{}\t{}\t{}\t{}\n",
                l.name, l.kind, l.out_shape.0, l.out_shape.1, l.out_shape.2, l.params, l.main, l.aux
            ));
        }
        s.push_str(&format!(
            "TOTAL\t-\t-\t{params}\t{}\t{}\n",
            self.total, self.aux_total
        ));
        s
    }
}

/// Per-image cost at `input_shape`. Convolutions cost `out elements * c_in *
/// k^2` MACs, fully connected layers `d * m`.
pub fn count_flops(
    graph: &GraphSpec,
    input_shape: (usize, usize, usize),
    convention: FlopConvention,
) -> Result<FlopCount> {
    let g;
    let graph = if input_shape == graph.input_shape() {
        graph
    } else {
        g = graph.with_input(input_shape)?;
        &g
    };
    let f = convention.factor();
    let mut per_layer = Vec::with_capacity(graph.nodes().len());
    for (node, &out) in graph.nodes().iter().zip(graph.shapes()) {
        let elems = (out.0 * out.1 * out.2) as u64;
        let in_dims = node
            .inputs
            .first()
            .and_then(|i| graph.dims_of(i))
            .unwrap_or((0, 0, 0));
        let in_elems = (in_dims.0 * in_dims.1 * in_dims.2) as u64;
        let (main, aux) = match node.kind {
            LayerKind::Conv { c_in, k, bias, .. } => (
                elems * (c_in * k * k) as u64 * f,
                if bias { elems } else { 0 },
            ),
            LayerKind::Fc { d_in, d_out } => ((d_in * d_out) as u64 * f, d_out as u64),
            LayerKind::BatchNorm { .. } => (0, 2 * elems),
            LayerKind::Relu | LayerKind::Add => (0, elems),
            LayerKind::MaxPool => (0, 3 * elems),
            LayerKind::AvgPool => (0, in_elems),
            LayerKind::SoftmaxHead | LayerKind::SigmoidHead => (0, 3 * elems),
        };
        let params: usize = node.kind.param_arrays().iter().map(|(_, c)| c).sum();
        per_layer.push(LayerFlops {
            name: node.name.clone(),
            kind: node.kind.tag(),
            out_shape: out,
            params: params as u64,
            main,
            aux,
        });
    }
    let total = per_layer.iter().map(|l| l.main).sum();
    let aux_total = per_layer.iter().map(|l| l.aux).sum();
    Ok(FlopCount {
        convention,
        per_layer,
        total,
        aux_total,
    })
}

/// Cost of a head branching at `branch_layer`: every trunk layer from the
/// branch point up to (excluding) the identity classifier, plus a fresh
/// `num_classes`-wide classifier.
pub fn head_cost(
    graph: &GraphSpec,
    flops: &FlopCount,
    branch_layer: &str,
    num_classes: usize,
) -> Result<u64> {
    let start = graph.branch_index(branch_layer)?;
    let mut total = 0;
    for (node, l) in graph.nodes()[start..].iter().zip(&flops.per_layer[start..]) {
        match node.kind {
            LayerKind::Fc { d_in, .. } => {
                total += (d_in * num_classes) as u64 * flops.convention.factor();
            }
            _ => total += l.main,
        }
    }
    Ok(total)
}

/// Learnable scalars of a head branching at `branch_layer` with a
/// `num_classes`-wide classifier.
pub fn head_params(graph: &GraphSpec, branch_layer: &str, num_classes: usize) -> Result<u64> {
    let start = graph.branch_index(branch_layer)?;
    let counts = count_params(graph);
    let mut total = 0;
    for (node, (_, p)) in graph.nodes()[start..].iter().zip(&counts.per_layer[start..]) {
        total += match node.kind {
            LayerKind::Fc { d_in, .. } => (d_in * num_classes + num_classes) as u64,
            _ => *p,
        };
    }
    Ok(total)
}
