//! Graph evaluation and reverse-mode gradient composition.

use std::collections::{BTreeMap, HashMap};

use super::spec::{GraphSpec, LayerKind, LayerNode, INPUT};
use crate::error::{Error, Result};
use crate::ops::{self, BnMode, KernelShape, BN_EPSILON};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::train::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
enum NodeCache<T: Scalar> {
    Bn(ops::BatchNormCache<T>),
    Pool(Vec<usize>),
}

/// Activations (and backward caches) of one evaluation.
#[derive(Clone, Debug)]
pub struct ForwardPass<T: Scalar> {
    /// Outputs of every evaluated node plus the seed activations.
    pub acts: BTreeMap<String, Tensor<T>>,
    /// Running statistics after this pass, for batchnorms evaluated with
    /// batch statistics.
    pub stat_updates: BTreeMap<String, ops::RunningStats<T>>,
    caches: HashMap<String, NodeCache<T>>,
    start: usize,
}

/// Gradients from [`backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar> {
    /// Keyed by full parameter name (`conv5.weight`).
    pub params: BTreeMap<String, Vec<T>>,
    /// Gradients reaching the seed activations (e.g. `input`).
    pub seeds: BTreeMap<String, Tensor<T>>,
}

fn conv_params<'a, T: Scalar>(
    node: &LayerNode,
    params: &'a ParamStore<T>,
) -> Result<(KernelShape, &'a [T], Option<&'a [T]>, usize, usize)> {
    let LayerKind::Conv {
        c_in,
        c_out,
        k,
        stride,
        pad,
        bias,
    } = node.kind
    else {
        unreachable!("conv node")
    };
    let w = params.require(&node.param_name("weight"))?;
    let b = if bias {
        Some(params.require(&node.param_name("bias"))?)
    } else {
        None
    };
    Ok((KernelShape { c_out, c_in, k }, w, b, stride, pad))
}

/// A batchnorm runs with batch statistics only in training mode and when its
/// scale is trainable; frozen normalizations use their running statistics.
fn bn_mode<T: Scalar>(node: &LayerNode, params: &ParamStore<T>, mode: Mode) -> BnMode {
    if mode == Mode::Train && params.is_trainable(&node.param_name("gamma")) {
        BnMode::Train
    } else {
        BnMode::Infer
    }
}

/// Evaluate nodes `start..` given the activations they read from below
/// `start` (`seeds`, which must include `input` when `start == 0`).
pub fn run_from<T: Scalar>(
    graph: &GraphSpec,
    params: &ParamStore<T>,
    seeds: BTreeMap<String, Tensor<T>>,
    start: usize,
    mode: Mode,
) -> Result<ForwardPass<T>> {
    run_range(graph, params, seeds, start, graph.nodes().len(), mode)
}

/// Evaluate only nodes `start..end`.
pub fn run_range<T: Scalar>(
    graph: &GraphSpec,
    params: &ParamStore<T>,
    seeds: BTreeMap<String, Tensor<T>>,
    start: usize,
    end: usize,
    mode: Mode,
) -> Result<ForwardPass<T>> {
    if start > end || end > graph.nodes().len() {
        return Err(Error::InvalidArgument(format!(
            "node range {start}..{end} outside graph of {}",
            graph.nodes().len()
        )));
    }
    for name in graph.frontier_range(start, end) {
        let t = seeds
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing activation `{name}`")))?;
        let (c, h, w) = graph.dims_of(&name).expect("frontier node exists");
        if t.shape().with_n(0) != Shape::new(0, c, h, w) {
            return Err(Error::Shape(format!(
                "activation `{name}` is {}, graph expects {c}x{h}x{w}",
                t.shape()
            )));
        }
    }
    let mut pass = ForwardPass {
        acts: seeds,
        stat_updates: BTreeMap::new(),
        caches: HashMap::new(),
        start,
    };
    for node in &graph.nodes()[start..end] {
        let out = eval_node(node, params, &mut pass, mode)
            .map_err(|e| e.context(format!("node `{}`", node.name)))?;
        pass.acts.insert(node.name.clone(), out);
    }
    Ok(pass)
}

fn eval_node<T: Scalar>(
    node: &LayerNode,
    params: &ParamStore<T>,
    pass: &mut ForwardPass<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let x = &pass.acts[&node.inputs[0]];
    Ok(match node.kind {
        LayerKind::Conv { .. } => {
            let (ks, w, b, stride, pad) = conv_params(node, params)?;
            ops::conv2d_forward(x, w, ks, b, stride, pad)?
        }
        LayerKind::BatchNorm { .. } => {
            let gamma = params.require(&node.param_name("gamma"))?;
            let beta = params.require(&node.param_name("beta"))?;
            let bm = bn_mode(node, params, mode);
            let stats = params.running(&node.name);
            if bm == BnMode::Infer && stats.is_none() {
                return Err(Error::UninitializedStats(node.name.clone()));
            }
            let out = ops::batchnorm_forward(x, gamma, beta, stats, bm, BN_EPSILON)?;
            if let Some(c) = out.cache {
                pass.caches.insert(node.name.clone(), NodeCache::Bn(c));
            }
            if let Some(s) = out.updated_stats {
                pass.stat_updates.insert(node.name.clone(), s);
            }
            out.output
        }
        LayerKind::Relu => ops::relu(x),
        LayerKind::MaxPool => {
            let p = ops::maxpool2x2(x)?;
            pass.caches.insert(node.name.clone(), NodeCache::Pool(p.argmax));
            p.output
        }
        LayerKind::AvgPool => ops::avgpool_global(x),
        LayerKind::Add => ops::elementwise_add(x, &pass.acts[&node.inputs[1]])?,
        LayerKind::Fc { d_in, d_out } => {
            let w = params.require(&node.param_name("weight"))?;
            let b = params.require(&node.param_name("bias"))?;
            ops::fully_connected(x, w, b, d_in, d_out)?
        }
        LayerKind::SoftmaxHead => {
            let (n, m) = (x.shape().n, x.shape().per_sample());
            let mut data = Vec::with_capacity(n * m);
            for i in 0..n {
                let z = x.sample(i);
                let max = z.iter().copied().fold(T::neg_infinity(), T::max);
                let e: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
                let s: T = e.iter().copied().sum();
                data.extend(e.into_iter().map(|v| v / s));
            }
            Tensor::from_vec(x.shape(), data)?
        }
        LayerKind::SigmoidHead => x.map(|z| T::one() / (T::one() + (-z).exp())),
    })
}

/// Evaluate the whole graph on `input`, returning every node's activation.
pub fn forward<T: Scalar>(
    graph: &GraphSpec,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut seeds = BTreeMap::new();
    seeds.insert(INPUT.to_string(), input.clone());
    let mut pass = run_from(graph, params, seeds, 0, mode)?;
    pass.acts.remove(INPUT);
    Ok(pass.acts)
}

/// Infer-mode evaluation in chunks of `chunk` samples, keeping only the
/// outputs of `keep`. Nodes past the last kept one are not evaluated.
/// Batchnorm in infer mode makes the result independent of chunking.
pub fn infer_nodes<T: Scalar>(
    graph: &GraphSpec,
    params: &ParamStore<T>,
    seeds: &BTreeMap<String, Tensor<T>>,
    start: usize,
    keep: &[&str],
    chunk: usize,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut end = start;
    for k in keep {
        let p = graph
            .position(k)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown node `{k}`")))?;
        if p < start {
            return Err(Error::InvalidArgument(format!("`{k}` precedes the evaluated range")));
        }
        end = end.max(p + 1);
    }
    let n = seeds
        .values()
        .next()
        .ok_or_else(|| Error::InvalidArgument("no seed activations".into()))?
        .shape()
        .n;
    let chunk = chunk.max(1);
    let mut parts: BTreeMap<String, Vec<Tensor<T>>> = BTreeMap::new();
    let mut lo = 0;
    while lo < n {
        let idx: Vec<usize> = (lo..(lo + chunk).min(n)).collect();
        let batch = seeds.iter().map(|(k, t)| (k.clone(), t.gather(&idx))).collect();
        let mut pass = run_range(graph, params, batch, start, end, Mode::Infer)?;
        for k in keep {
            let t = pass.acts.remove(*k).expect("kept node evaluated");
            parts.entry(k.to_string()).or_default().push(t);
        }
        lo += chunk;
    }
    parts
        .into_iter()
        .map(|(k, v)| Ok((k, Tensor::concat(&v)?)))
        .collect()
}

fn accumulate<T: Scalar>(map: &mut BTreeMap<String, Tensor<T>>, name: &str, g: Tensor<T>) {
    match map.get_mut(name) {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => {
            map.insert(name.to_string(), g);
        }
    }
}

/// Propagate `grad` (the gradient of a scalar loss with respect to the
/// output of node `from`) back through every node evaluated by `pass`.
/// Gradients reaching activations below the pass's start are returned in
/// [`Gradients::seeds`].
pub fn backward<T: Scalar>(
    graph: &GraphSpec,
    params: &ParamStore<T>,
    pass: &ForwardPass<T>,
    from: &str,
    grad: Tensor<T>,
) -> Result<Gradients<T>> {
    backward_to(graph, params, pass, from, grad, pass.start)
}

/// As [`backward`], but stops at node `stop`: gradients reaching outputs of
/// nodes below `stop` are returned as seeds and nothing lower is visited.
pub fn backward_to<T: Scalar>(
    graph: &GraphSpec,
    params: &ParamStore<T>,
    pass: &ForwardPass<T>,
    from: &str,
    grad: Tensor<T>,
    stop: usize,
) -> Result<Gradients<T>> {
    let stop = stop.max(pass.start);
    let end = graph
        .position(from)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown node `{from}`")))?;
    if end < pass.start {
        return Err(Error::InvalidArgument(format!(
            "`{from}` was not evaluated by this pass"
        )));
    }
    let mut pending: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    pending.insert(from.to_string(), grad);
    let mut out = Gradients::default();
    for i in (stop..=end).rev() {
        let node = &graph.nodes()[i];
        let Some(dy) = pending.remove(&node.name) else {
            continue;
        };
        let input_grads = node_backward(node, params, pass, &dy, &mut out.params)
            .map_err(|e| e.context(format!("backward through `{}`", node.name)))?;
        for (inp, g) in node.inputs.iter().zip(input_grads) {
            let below = inp == INPUT || graph.position(inp).is_none_or(|p| p < stop);
            if below {
                accumulate(&mut out.seeds, inp, g);
            } else {
                accumulate(&mut pending, inp, g);
            }
        }
    }
    Ok(out)
}

fn node_backward<T: Scalar>(
    node: &LayerNode,
    params: &ParamStore<T>,
    pass: &ForwardPass<T>,
    dy: &Tensor<T>,
    param_grads: &mut BTreeMap<String, Vec<T>>,
) -> Result<Vec<Tensor<T>>> {
    let x = &pass.acts[&node.inputs[0]];
    let mut store = |g: ops::LayerGrad<T>| {
        for (k, v) in g.param_grads {
            param_grads.insert(node.param_name(&k), v);
        }
        g.input_grad
    };
    Ok(match node.kind {
        LayerKind::Conv { .. } => {
            let (ks, w, b, stride, pad) = conv_params(node, params)?;
            vec![store(ops::conv2d_backward(x, w, ks, b, dy, stride, pad)?)]
        }
        LayerKind::BatchNorm { .. } => {
            let gamma = params.require(&node.param_name("gamma"))?;
            match pass.caches.get(&node.name) {
                Some(NodeCache::Bn(cache)) => vec![store(ops::batchnorm_backward(cache, gamma, dy)?)],
                _ => {
                    // Normalized with running statistics: a per-channel scale.
                    let st = params
                        .running(&node.name)
                        .ok_or_else(|| Error::UninitializedStats(node.name.clone()))?;
                    let s = dy.shape();
                    let eps = T::from_f64(BN_EPSILON);
                    let mut dx = dy.clone();
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let k = gamma[c] / (st.var[c] + eps).sqrt();
                            let off = (n * s.c + c) * s.plane();
                            for v in &mut dx.data_mut()[off..off + s.plane()] {
                                *v = *v * k;
                            }
                        }
                    }
                    vec![dx]
                }
            }
        }
        LayerKind::Relu => vec![ops::relu_backward(x, dy)?],
        LayerKind::MaxPool => {
            let Some(NodeCache::Pool(argmax)) = pass.caches.get(&node.name) else {
                return Err(Error::InvalidArgument("max pool cache missing".into()));
            };
            vec![ops::maxpool2x2_backward(x.shape(), argmax, dy)?]
        }
        LayerKind::AvgPool => vec![ops::avgpool_global_backward(x.shape(), dy)?],
        LayerKind::Add => {
            let (a, b) = ops::elementwise_add_backward(dy);
            vec![a.input_grad, b]
        }
        LayerKind::Fc { d_in, d_out } => {
            let w = params.require(&node.param_name("weight"))?;
            let b = params.require(&node.param_name("bias"))?;
            vec![store(ops::fully_connected_backward(x, w, b, dy, d_in, d_out)?)]
        }
        LayerKind::SoftmaxHead | LayerKind::SigmoidHead => {
            return Err(Error::InvalidArgument(
                "backward starts at the classifier, not the head".into(),
            ))
        }
    })
}
