use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::ops::conv_output_dim;

/// Name of the graph's source tensor.
pub const INPUT: &str = "input";

/// Layers eligible for fine-tune branching, shallowest first.
pub const BRANCH_POINTS: [&str; 6] = ["conv17", "conv19", "conv21", "conv22", "conv-bn320", "fc"];

/// Per-sample activation extents `(c, h, w)`.
pub type Dims = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool,
    AvgPool,
    Add,
    Fc {
        d_in: usize,
        d_out: usize,
    },
    SoftmaxHead,
    SigmoidHead,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::Add => "add",
            LayerKind::Fc { .. } => "fc",
            LayerKind::SoftmaxHead => "softmax-head",
            LayerKind::SigmoidHead => "sigmoid-head",
        }
    }

    /// Learnable arrays as `(suffix, element count)`.
    pub fn param_arrays(&self) -> Vec<(&'static str, usize)> {
        match *self {
            LayerKind::Conv {
                c_in,
                c_out,
                k,
                bias,
                ..
            } => {
                let mut v = vec![("weight", c_out * c_in * k * k)];
                if bias {
                    v.push(("bias", c_out));
                }
                v
            }
            LayerKind::BatchNorm { channels } => vec![("gamma", channels), ("beta", channels)],
            LayerKind::Fc { d_in, d_out } => vec![("weight", d_in * d_out), ("bias", d_out)],
            _ => Vec::new(),
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, LayerKind::SoftmaxHead | LayerKind::SigmoidHead)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn param_name(&self, suffix: &str) -> String {
        format!("{}.{}", self.name, suffix)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.kind
            .param_arrays()
            .into_iter()
            .map(|(s, _)| self.param_name(s))
            .collect()
    }

    fn serialize(&self) -> String {
        let mut s = format!("{} {}", self.name, self.kind.tag());
        match self.kind {
            LayerKind::Conv {
                c_in,
                c_out,
                k,
                stride,
                pad,
                bias,
            } => {
                let _ = write!(
                    s,
                    " c_in={c_in} c_out={c_out} k={k} stride={stride} pad={pad} bias={}",
                    bias as u8
                );
            }
            LayerKind::BatchNorm { channels } => {
                let _ = write!(s, " channels={channels}");
            }
            LayerKind::Fc { d_in, d_out } => {
                let _ = write!(s, " d_in={d_in} d_out={d_out}");
            }
            _ => {}
        }
        let _ = write!(s, " inputs={}", self.inputs.join(","));
        s
    }
}

/// Topologically ordered layer graph with inferred activation shapes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphSpec {
    nodes: Vec<LayerNode>,
    input_shape: Dims,
    shapes: Vec<Dims>,
    index: HashMap<String, usize>,
}

fn infer_node(kind: &LayerKind, ins: &[Dims], name: &str) -> Result<Dims> {
    let one = |ins: &[Dims]| -> Result<Dims> {
        match ins {
            [d] => Ok(*d),
            _ => Err(Error::Shape(format!(
                "`{name}` expects one input, got {}",
                ins.len()
            ))),
        }
    };
    match *kind {
        LayerKind::Conv {
            c_in,
            c_out,
            k,
            stride,
            pad,
            ..
        } => {
            let (c, h, w) = one(ins)?;
            if c != c_in {
                return Err(Error::Shape(format!(
                    "`{name}` expects {c_in} channels, input has {c}"
                )));
            }
            match (conv_output_dim(h, k, stride, pad), conv_output_dim(w, k, stride, pad)) {
                (Some(oh), Some(ow)) => Ok((c_out, oh, ow)),
                _ => Err(Error::Shape(format!(
                    "`{name}` kernel {k} does not fit a {h}x{w} input"
                ))),
            }
        }
        LayerKind::BatchNorm { channels } => {
            let d = one(ins)?;
            if d.0 != channels {
                return Err(Error::Shape(format!(
                    "`{name}` normalizes {channels} channels, input has {}",
                    d.0
                )));
            }
            Ok(d)
        }
        LayerKind::Relu | LayerKind::SoftmaxHead | LayerKind::SigmoidHead => one(ins),
        LayerKind::MaxPool => {
            let (c, h, w) = one(ins)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Shape(format!(
                    "`{name}` max pooling needs even dims, got {h}x{w}"
                )));
            }
            Ok((c, h / 2, w / 2))
        }
        LayerKind::AvgPool => {
            let (c, _, _) = one(ins)?;
            Ok((c, 1, 1))
        }
        LayerKind::Add => match ins {
            [a, b] if a == b => Ok(*a),
            [a, b] => Err(Error::Shape(format!(
                "`{name}` adds {}x{}x{} and {}x{}x{}",
                a.0, a.1, a.2, b.0, b.1, b.2
            ))),
            _ => Err(Error::Shape(format!("`{name}` expects two inputs"))),
        },
        LayerKind::Fc { d_in, d_out } => {
            let (c, h, w) = one(ins)?;
            if c * h * w != d_in {
                return Err(Error::Shape(format!(
                    "`{name}` expects {d_in} features, input has {}",
                    c * h * w
                )));
            }
            Ok((d_out, 1, 1))
        }
    }
}

impl GraphSpec {
    pub fn new(input_shape: Dims, nodes: Vec<LayerNode>) -> Result<Self> {
        let mut g = GraphSpec {
            nodes: Vec::with_capacity(nodes.len()),
            input_shape,
            shapes: Vec::with_capacity(nodes.len()),
            index: HashMap::new(),
        };
        for n in nodes {
            g.push(n)?;
        }
        Ok(g)
    }

    fn push(&mut self, node: LayerNode) -> Result<()> {
        if node.name == INPUT || node.name.is_empty() || node.name.contains(char::is_whitespace) {
            return Err(Error::Format(format!("invalid node name `{}`", node.name)));
        }
        if self.index.contains_key(&node.name) {
            return Err(Error::Format(format!("duplicate node name `{}`", node.name)));
        }
        let ins = node
            .inputs
            .iter()
            .map(|i| self.dims_of(i).ok_or_else(|| {
                Error::Format(format!("`{}` reads unknown input `{i}`", node.name))
            }))
            .collect::<Result<Vec<_>>>()?;
        let d = infer_node(&node.kind, &ins, &node.name)?;
        self.index.insert(node.name.clone(), self.nodes.len());
        self.nodes.push(node);
        self.shapes.push(d);
        Ok(())
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn input_shape(&self) -> Dims {
        self.input_shape
    }

    pub fn shapes(&self) -> &[Dims] {
        &self.shapes
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn node(&self, name: &str) -> Option<&LayerNode> {
        self.position(name).map(|i| &self.nodes[i])
    }

    /// Activation dims of a node or of the graph input.
    pub fn dims_of(&self, name: &str) -> Option<Dims> {
        if name == INPUT {
            Some(self.input_shape)
        } else {
            self.position(name).map(|i| self.shapes[i])
        }
    }

    pub fn output(&self) -> &LayerNode {
        self.nodes.last().expect("graph has nodes")
    }

    /// Branch points present in this graph, shallowest first.
    pub fn branch_points(&self) -> Vec<&'static str> {
        BRANCH_POINTS
            .iter()
            .copied()
            .filter(|b| self.position(b).is_some())
            .collect()
    }

    pub fn branch_index(&self, layer: &str) -> Result<usize> {
        let points = self.branch_points();
        if !points.contains(&layer) {
            return Err(Error::UnknownLayer {
                name: layer.to_string(),
                valid: points.join(", "),
            });
        }
        Ok(self.position(layer).expect("branch point exists"))
    }

    /// Nodes whose outputs are needed to evaluate everything from `start`
    /// onward, in topological order (`input` first when needed).
    pub fn frontier(&self, start: usize) -> Vec<String> {
        self.frontier_range(start, self.nodes.len())
    }

    /// As [`GraphSpec::frontier`], for evaluating only nodes `start..end`.
    pub fn frontier_range(&self, start: usize, end: usize) -> Vec<String> {
        let mut needed: Vec<(usize, String)> = Vec::new();
        for node in &self.nodes[start..end] {
            for i in &node.inputs {
                let pos = if i == INPUT { Some(0) } else { self.position(i).map(|p| p + 1) };
                if let Some(p) = pos {
                    if p <= start && !needed.iter().any(|(_, n)| n == i) {
                        needed.push((p, i.clone()));
                    }
                }
            }
        }
        needed.sort();
        needed.into_iter().map(|(_, n)| n).collect()
    }

    /// Non-shortcut convolutions (`conv*` names).
    pub fn non_shortcut_convs(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv { .. }) && n.name.starts_with("conv"))
            .count()
    }

    /// Same graph with the final classifier replaced by a `num_classes`-wide
    /// layer and the given head kind.
    pub fn with_classifier(&self, num_classes: usize, head: LayerKind) -> Result<GraphSpec> {
        if !head.is_head() {
            return Err(Error::InvalidArgument(format!("`{}` is not a head kind", head.tag())));
        }
        let mut nodes = self.nodes.clone();
        for n in nodes.iter_mut() {
            if let LayerKind::Fc { d_out, .. } = &mut n.kind {
                if n.name == "fc" {
                    *d_out = num_classes;
                }
            }
        }
        let last = nodes.last_mut().ok_or_else(|| Error::Format("empty graph".into()))?;
        if !last.kind.is_head() {
            return Err(Error::Format("graph does not end in a head".into()));
        }
        last.kind = head;
        GraphSpec::new(self.input_shape, nodes)
    }

    /// Same nodes evaluated at a different input resolution.
    pub fn with_input(&self, input_shape: Dims) -> Result<GraphSpec> {
        GraphSpec::new(input_shape, self.nodes.clone())
    }

    pub fn serialize(&self) -> String {
        let (c, h, w) = self.input_shape;
        let mut s = format!("{INPUT} c={c} h={h} w={w}\n");
        for n in &self.nodes {
            s.push_str(&n.serialize());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<GraphSpec> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty graph text".into()))?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some(INPUT) {
            return Err(Error::Format(format!("graph header `{header}` must start with `{INPUT}`")));
        }
        let kv = keyvals(toks)?;
        let input = (req(&kv, "c")?, req(&kv, "h")?, req(&kv, "w")?);
        let mut nodes = Vec::new();
        for line in lines {
            let mut toks = line.split_whitespace();
            let name = toks.next().unwrap_or_default().to_string();
            let tag = toks
                .next()
                .ok_or_else(|| Error::Format(format!("node line `{line}` lacks a kind")))?;
            let kv = keyvals(toks)?;
            let kind = match tag {
                "conv" => LayerKind::Conv {
                    c_in: req(&kv, "c_in")?,
                    c_out: req(&kv, "c_out")?,
                    k: req(&kv, "k")?,
                    stride: req(&kv, "stride")?,
                    pad: req(&kv, "pad")?,
                    bias: req::<u8>(&kv, "bias")? != 0,
                },
                "batchnorm" => LayerKind::BatchNorm {
                    channels: req(&kv, "channels")?,
                },
                "relu" => LayerKind::Relu,
                "maxpool" => LayerKind::MaxPool,
                "avgpool" => LayerKind::AvgPool,
                "add" => LayerKind::Add,
                "fc" => LayerKind::Fc {
                    d_in: req(&kv, "d_in")?,
                    d_out: req(&kv, "d_out")?,
                },
                "softmax-head" => LayerKind::SoftmaxHead,
                "sigmoid-head" => LayerKind::SigmoidHead,
                other => return Err(Error::Format(format!("unknown layer kind `{other}`"))),
            };
            let inputs = kv
                .get("inputs")
                .ok_or_else(|| Error::Format(format!("node `{name}` lacks inputs=")))?
                .split(',')
                .map(str::to_string)
                .collect();
            nodes.push(LayerNode { name, kind, inputs });
        }
        GraphSpec::new(input, nodes)
    }
}

fn keyvals<'a>(toks: impl Iterator<Item = &'a str>) -> Result<BTreeMap<&'a str, &'a str>> {
    toks.map(|t| {
        t.split_once('=')
            .ok_or_else(|| Error::Format(format!("expected key=value, got `{t}`")))
    })
    .collect()
}

fn req<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    kv.get(key)
        .ok_or_else(|| Error::Format(format!("missing `{key}=`")))?
        .parse()
        .map_err(|_| Error::Format(format!("bad value for `{key}`")))
}

struct TrunkBuilder {
    graph: GraphSpec,
    conv_no: usize,
    bias: bool,
    stage: String,
}

impl TrunkBuilder {
    fn add(&mut self, name: String, kind: LayerKind, inputs: &[&str]) -> Result<String> {
        let node = LayerNode {
            name: name.clone(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        };
        self.graph
            .push(node)
            .map_err(|e| e.context(format!("stage ({})", self.stage)))?;
        Ok(name)
    }

    fn channels(&self, name: &str) -> usize {
        self.graph.dims_of(name).expect("known node").0
    }

    /// Numbered conv + batchnorm; returns the batchnorm name.
    fn conv_bn(&mut self, input: &str, c_out: usize, k: usize, stride: usize) -> Result<String> {
        self.conv_no += 1;
        let c_in = self.channels(input);
        let conv = self.add(
            format!("conv{}", self.conv_no),
            LayerKind::Conv {
                c_in,
                c_out,
                k,
                stride,
                pad: k / 2,
                bias: self.bias,
            },
            &[input],
        )?;
        self.add(
            format!("bn{}", self.conv_no),
            LayerKind::BatchNorm { channels: c_out },
            &[&conv],
        )
    }
}

/// Build the identity trunk described by `config`.
///
/// Stem: 7x7/2 conv, batchnorm, ReLU, 2x2 max pool. Each block: 1x1 reducing
/// conv, batchnorm, ReLU, 3x3 expanding conv (stride 2 on the first block of
/// a downsampling stage), batchnorm, add with the shortcut, ReLU. The
/// shortcut is a 1x1 conv + batchnorm (`projN`) whenever shape changes.
/// Head: global average pool, 1x1 conv to the embedding width with bias
/// (`conv-bn320`) + batchnorm (`bn320`), `fc` to the identity classes and a
/// softmax head. Non-shortcut convolutions are numbered in topological
/// order.
pub fn build_trunk(config: &ArchConfig) -> Result<GraphSpec> {
    config.validate()?;
    let sc = config.scale;
    let size = sc.apply(config.input_size);
    let mut b = TrunkBuilder {
        graph: GraphSpec::new((config.input_channels, size, size), Vec::new())?,
        conv_no: 0,
        bias: config.conv_bias,
        stage: "a".into(),
    };
    let bn = b.conv_bn(INPUT, sc.apply(config.stem_channels), 7, 2)?;
    let r = b.add("relu1".into(), LayerKind::Relu, &[&bn])?;
    let mut x = b.add("pool1".into(), LayerKind::MaxPool, &[&r])?;

    let mut block = 0;
    for stage in &config.stages {
        b.stage = stage.label.to_string();
        for rep in 0..stage.repeats {
            block += 1;
            let stride = if stage.downsample && rep == 0 { 2 } else { 1 };
            let (width, narrow) = (sc.apply(stage.expanded), sc.apply(stage.bottleneck));
            let reduce = b.conv_bn(&x, narrow, 1, 1)?;
            let relu = b.add(format!("relu{}", b.conv_no), LayerKind::Relu, &[&reduce])?;
            let expand = b.conv_bn(&relu, width, 3, stride)?;
            let c_in = b.channels(&x);
            let shortcut = if stride != 1 || c_in != width {
                let p = b.add(
                    format!("proj{block}"),
                    LayerKind::Conv {
                        c_in,
                        c_out: width,
                        k: 1,
                        stride,
                        pad: 0,
                        bias: config.conv_bias,
                    },
                    &[&x],
                )?;
                b.add(
                    format!("proj{block}-bn"),
                    LayerKind::BatchNorm { channels: width },
                    &[&p],
                )?
            } else {
                x.clone()
            };
            let sum = b.add(format!("add{block}"), LayerKind::Add, &[&expand, &shortcut])?;
            x = b.add(format!("out{block}"), LayerKind::Relu, &[&sum])?;
        }
    }

    b.stage = "g".into();
    let gap = b.add("gap".into(), LayerKind::AvgPool, &[&x])?;
    let emb = sc.apply(config.embedding_dim);
    let c_in = b.channels(&gap);
    let conv = b.add(
        "conv-bn320".into(),
        LayerKind::Conv {
            c_in,
            c_out: emb,
            k: 1,
            stride: 1,
            pad: 0,
            bias: true,
        },
        &[&gap],
    )?;
    let bn = b.add("bn320".into(), LayerKind::BatchNorm { channels: emb }, &[&conv])?;
    let fc = b.add(
        "fc".into(),
        LayerKind::Fc {
            d_in: emb,
            d_out: config.num_identities,
        },
        &[&bn],
    )?;
    b.add("softmax".into(), LayerKind::SoftmaxHead, &[&fc])?;
    Ok(b.graph)
}

/// Graph consisting of a single fully connected layer and a head, used for
/// linear probes and feature-level training.
pub fn linear_graph(d_in: usize, num_classes: usize, head: LayerKind) -> Result<GraphSpec> {
    GraphSpec::new(
        (d_in, 1, 1),
        vec![
            LayerNode {
                name: "fc".into(),
                kind: LayerKind::Fc {
                    d_in,
                    d_out: num_classes,
                },
                inputs: vec![INPUT.into()],
            },
            LayerNode {
                name: "head".into(),
                kind: head,
                inputs: vec!["fc".into()],
            },
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_trunk_structure() {
        let g = build_trunk(&ArchConfig::canonical()).unwrap();
        assert_eq!(g.non_shortcut_convs(), 24);
        assert_eq!(g.dims_of("bn320"), Some((320, 1, 1)));
        assert_eq!(g.branch_points(), BRANCH_POINTS.to_vec());
        assert_eq!(g.dims_of("relu1"), Some((32, 112, 112)));
        assert_eq!(g.dims_of("pool1"), Some((32, 56, 56)));
        let trace: Vec<usize> = (1..=11)
            .map(|k| g.dims_of(&format!("out{k}")).unwrap().1)
            .collect();
        assert_eq!(trace, vec![56, 28, 14, 14, 14, 14, 14, 14, 14, 7, 7]);
        assert_eq!(g.dims_of("out11"), Some((512, 7, 7)));
    }

    #[test]
    fn desk_trunk_trace() {
        let g = build_trunk(&ArchConfig::desk()).unwrap();
        assert_eq!(g.input_shape(), (3, 56, 56));
        assert_eq!(g.dims_of("relu1").unwrap().1, 28);
        assert_eq!(g.dims_of("pool1").unwrap().1, 14);
        assert_eq!(g.dims_of("out2").unwrap().1, 7);
        assert_eq!(g.dims_of("out3").unwrap().1, 4);
        assert_eq!(g.dims_of("out10").unwrap().1, 2);
        assert_eq!(g.dims_of("bn320"), Some((80, 1, 1)));
        assert_eq!(g.non_shortcut_convs(), 24);
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let g = build_trunk(&ArchConfig::desk()).unwrap();
        let text = g.serialize();
        let back = GraphSpec::parse(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn mismatched_add_is_rejected() {
        let text = "input c=2 h=4 w=4\n\
                    a conv c_in=2 c_out=3 k=1 stride=1 pad=0 bias=0 inputs=input\n\
                    s add inputs=a,input\n";
        let err = GraphSpec::parse(text).unwrap_err();
        assert!(err.to_string().contains("`s`"), "{err}");
    }

    #[test]
    fn odd_stem_output_names_stage() {
        let mut cfg = ArchConfig::canonical();
        cfg.input_size = 30; // stem output 15 cannot be max-pooled
        let err = build_trunk(&cfg).unwrap_err();
        assert!(err.to_string().contains("stage (a)"), "{err}");
    }

    #[test]
    fn frontier_of_mid_block_branch() {
        let g = build_trunk(&ArchConfig::desk()).unwrap();
        let i = g.branch_index("conv19").unwrap();
        assert_eq!(g.frontier(i), vec!["out8".to_string(), "relu18".to_string()]);
        let j = g.branch_index("fc").unwrap();
        assert_eq!(g.frontier(j), vec!["bn320".to_string()]);
        assert_eq!(g.frontier(0), vec![INPUT.to_string()]);
    }

    #[test]
    fn unknown_branch_lists_valid_names() {
        let g = build_trunk(&ArchConfig::desk()).unwrap();
        let err = g.branch_index("conv5").unwrap_err();
        assert!(err.to_string().contains("conv17, conv19"), "{err}");
    }
}
