mod common;

use std::collections::BTreeMap;

use attrnet::data::{KvConfig, TensorContainer};
use attrnet::eval::{best_threshold, cosine_similarity, select_operating_point};
use attrnet::graph::{build_trunk, head_params, linear_graph, ArchConfig, GraphSpec, LayerKind, Scale};
use attrnet::ops::{
    avgpool_global, avgpool_global_backward, conv2d_backward, conv2d_forward, conv_output_dim, maxpool2x2,
    maxpool2x2_backward, sigmoid_multilabel_loss, softmax_cross_entropy, ClassTargets, KernelShape,
};
use attrnet::train::{
    checkpoint_bytes, init_params, lr_at, make_branch, parse_checkpoint, sgd_momentum_step, HeadSpec, LossKind,
    ParamStore, TrainConfig,
};
use attrnet::{Shape, Tensor};
use common::oracle_threshold;
use proptest::prelude::*;

fn tensor_strategy(max_n: usize, max_c: usize, max_hw: usize) -> impl Strategy<Value = Tensor<f32>> {
    (1..=max_n, 1..=max_c, 1..=max_hw, 1..=max_hw).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-10.0f32..10.0, n * c * h * w)
            .prop_map(move |d| Tensor::from_vec(Shape::new(n, c, h, w), d).unwrap())
    })
}

fn desk_trunk() -> &'static (GraphSpec, ParamStore<f32>) {
    static CELL: std::sync::OnceLock<(GraphSpec, ParamStore<f32>)> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let g = build_trunk(&ArchConfig::desk()).unwrap();
        let p = init_params(&g, 0.1, 1).unwrap();
        (g, p)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shapes_and_finiteness(
        x in tensor_strategy(2, 3, 9),
        co in 1usize..4,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        pad in 0usize..3,
        seed in any::<u64>(),
    ) {
        let s = x.shape();
        let ks = KernelShape { c_out: co, c_in: s.c, k };
        let w: Vec<f32> = common::uniform(&mut common::rng(seed), ks.numel()).into_iter().map(|v| v as f32).collect();
        let b = vec![0.5f32; co];
        match (conv_output_dim(s.h, k, stride, pad), conv_output_dim(s.w, k, stride, pad)) {
            (Some(oh), Some(ow)) => {
                let y = conv2d_forward(&x, &w, ks, Some(&b), stride, pad).unwrap();
                prop_assert_eq!(y.shape(), Shape::new(s.n, co, oh, ow));
                prop_assert_eq!(y.len(), s.n * co * oh * ow);
                prop_assert!(y.all_finite());
                let g = conv2d_backward(&x, &w, ks, Some(&b), &y, stride, pad).unwrap();
                prop_assert_eq!(g.input_grad.shape(), s);
                prop_assert_eq!(g.param_grads["weight"].len(), w.len());
                prop_assert_eq!(g.param_grads["bias"].len(), co);
                prop_assert!(g.input_grad.all_finite());
            }
            _ => prop_assert!(conv2d_forward(&x, &w, ks, Some(&b), stride, pad).is_err()),
        }
    }

    #[test]
    fn maxpool_dominates_window_and_routes_all_gradient(x in tensor_strategy(2, 3, 6)) {
        let s = x.shape();
        let r = maxpool2x2(&x);
        if s.h % 2 == 1 || s.w % 2 == 1 {
            prop_assert!(r.is_err());
            return Ok(());
        }
        let out = r.unwrap();
        for n in 0..s.n { for c in 0..s.c { for i in 0..s.h { for j in 0..s.w {
            prop_assert!(out.output.at(n, c, i / 2, j / 2) >= x.at(n, c, i, j));
        }}}}
        let ones = Tensor::full(out.output.shape(), 1.0f32);
        let dx = maxpool2x2_backward(s, &out.argmax, &ones).unwrap();
        prop_assert_eq!(dx.data().iter().sum::<f32>(), out.output.len() as f32);
    }

    #[test]
    fn avgpool_of_constant_is_constant(c in -5.0f32..5.0, h in 1usize..8, w in 1usize..8) {
        let s = Shape::new(2, 3, h, w);
        let y = avgpool_global(&Tensor::full(s, c as f64));
        prop_assert!(y.data().iter().all(|v| (v - c as f64).abs() < 1e-12));
        let g = avgpool_global_backward(s, &Tensor::full(Shape::new(2, 3, 1, 1), 1.0f64)).unwrap();
        prop_assert!((g.data().iter().sum::<f64>() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn losses_are_well_formed(
        (n, m, z) in (1usize..5, 2usize..8).prop_flat_map(|(n, m)| (Just(n), Just(m), prop::collection::vec(-30.0f32..30.0, n * m))),
        seed in any::<u64>(),
    ) {
        let logits = Tensor::matrix(n, m, z).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize + i) % m).collect();
        let sm = softmax_cross_entropy(&logits, ClassTargets::Indices(&labels)).unwrap();
        prop_assert!(sm.loss >= 0.0 && sm.loss.is_finite());
        for row in sm.scores.data().chunks(m) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let y: Vec<f32> = (0..n * m).map(|i| ((seed >> (i % 64)) & 1) as f32).collect();
        let sg = sigmoid_multilabel_loss(&logits, &y).unwrap();
        prop_assert!(sg.loss >= 0.0 && sg.loss.is_finite());
        prop_assert!(sg.scores.data().iter().all(|s| (0.0..=1.0).contains(s)));
        prop_assert!(sg.logit_grad.all_finite() && sm.logit_grad.all_finite());
    }

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_free(
        (a, b) in (1usize..40).prop_flat_map(|d| (prop::collection::vec(-5.0f32..5.0, d), prop::collection::vec(-5.0f32..5.0, d))),
        k in 0.1f32..10.0,
    ) {
        prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
        let s = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, cosine_similarity(&b, &a).unwrap());
        let scaled: Vec<f32> = a.iter().map(|v| v * k).collect();
        prop_assert!((cosine_similarity(&scaled, &b).unwrap() - s).abs() < 1e-5);
    }

    #[test]
    fn best_threshold_beats_constant_rules_and_matches_sweep(
        samples in prop::collection::vec(((0i32..20).prop_map(|v| v as f64 / 10.0), any::<bool>()), 1..200),
    ) {
        let (t, correct) = best_threshold(&samples);
        let same = samples.iter().filter(|s| s.1).count();
        prop_assert!(correct >= same.max(samples.len() - same));
        prop_assert_eq!(samples.iter().filter(|(x, l)| (*x >= t) == *l).count(), correct);
        let (ot, oc) = oracle_threshold(&samples);
        prop_assert_eq!((t.to_bits(), correct), (ot.to_bits(), oc));
    }

    #[test]
    fn operating_point_respects_target_and_is_monotone(
        cells in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..300),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let scores: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let labels: Vec<bool> = cells.iter().map(|c| c.1).collect();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = select_operating_point(&scores, &labels, 1, lo).unwrap();
        let b = select_operating_point(&scores, &labels, 1, hi).unwrap();
        prop_assert!(a.fpr <= lo && b.fpr <= hi);
        prop_assert!(b.threshold <= a.threshold);
        prop_assert!(b.tpr >= a.tpr);
    }

    #[test]
    fn frozen_arrays_survive_any_number_of_steps(steps in 0usize..20, rate in 0.0f64..1.0, seed in any::<u64>()) {
        let g = linear_graph(6, 3, LayerKind::SoftmaxHead).unwrap();
        let mut store: ParamStore<f32> = init_params(&g, 0.5, seed).unwrap();
        store.set_trainable("fc.bias", false);
        let before = store.get("fc.bias").unwrap().to_vec();
        let checksum = store.frozen_checksum();
        let grads: BTreeMap<String, Vec<f32>> = store.arrays().map(|(k, v)| (k.to_string(), vec![1.0; v.len()])).collect();
        for _ in 0..steps {
            sgd_momentum_step(&mut store, &grads, rate, 0.9).unwrap();
        }
        prop_assert_eq!(store.get("fc.bias").unwrap(), before.as_slice());
        prop_assert_eq!(store.frozen_checksum(), checksum);
        let names: Vec<&str> = store.names().collect();
        prop_assert!(names.iter().all(|n| store.momentum(n).is_some()));
    }

    #[test]
    fn lr_is_a_nonincreasing_step_function(t in 0u64..1_000_000, every in 1u64..20_000, factor in 1.0f64..10.0) {
        let cfg = TrainConfig { lr_decay_every: every, lr_decay_factor: factor, ..TrainConfig::default() };
        let here = lr_at(t, &cfg);
        prop_assert!(lr_at(t + 1, &cfg) <= here);
        prop_assert_eq!(here, cfg.lr0 * factor.powi(-((t / every) as i32)));
    }

    #[test]
    fn container_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = common::uniform(&mut common::rng(seed), n).into_iter().map(|v| v as f32).collect();
        let c = TensorContainer::new(dims, data).unwrap();
        let bytes = c.to_bytes();
        prop_assert_eq!(TensorContainer::from_bytes(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        let i = (seed as usize) % bad.len();
        bad[i] ^= 0x10;
        prop_assert!(TensorContainer::from_bytes(&bad).is_err());
    }

    #[test]
    fn kv_round_trip(entries in prop::collection::btree_map("[a-z_]{1,10}", "[a-z0-9./,]{1,10}", 0..10)) {
        let mut kv = KvConfig::default();
        for (k, v) in &entries {
            kv.set(k, v);
        }
        let back = KvConfig::parse(&kv.to_text()).unwrap();
        for (k, v) in &entries {
            prop_assert_eq!(back.get_str(k), Some(v.as_str()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trunk_structure_follows_repeats(repeats in prop::array::uniform4(1usize..4)) {
        let cfg = ArchConfig { scale: Scale { num: 1, den: 8 }, ..ArchConfig::family(repeats, [32, 64, 128, 256]) };
        let g = build_trunk(&cfg).unwrap();
        prop_assert_eq!(g.non_shortcut_convs(), 2 + 2 * repeats.iter().sum::<usize>());
        prop_assert_eq!(g.non_shortcut_convs(), cfg.non_shortcut_convs());
        let mut names: Vec<&str> = g.nodes().iter().map(|n| n.name.as_str()).collect();
        names.sort();
        let before = names.len();
        names.dedup();
        prop_assert_eq!(before, names.len());
        for w in cfg.stages.windows(2) {
            if w[1].downsample {
                prop_assert_eq!(w[1].expanded, 2 * w[0].expanded);
            }
        }
        prop_assert_eq!(GraphSpec::parse(&g.serialize()).unwrap(), g);
    }

    #[test]
    fn head_counts_match_accounting(branch in 0usize..6, classes in 2usize..20, sigmoid in any::<bool>()) {
        let (g, p) = desk_trunk();
        let layer = g.branch_points()[branch];
        let spec = HeadSpec {
            task: "t".into(),
            branch_layer: layer.into(),
            num_classes: classes,
            loss: if sigmoid { LossKind::SigmoidMultilabel } else { LossKind::Softmax },
        };
        let head = make_branch(g, p, &spec, false, 0.1, 5).unwrap();
        prop_assert_eq!(head.params.trainable_numel() as u64, head_params(g, layer, classes).unwrap());
        prop_assert_eq!(head.graph.dims_of(attrnet::train::classifier(&head.graph)).unwrap().0, classes);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(d in 1usize..20, m in 2usize..6, seed in any::<u64>()) {
        let g = linear_graph(d, m, LayerKind::SoftmaxHead).unwrap();
        let p: ParamStore<f32> = init_params(&g, 0.3, seed).unwrap();
        let bytes = checkpoint_bytes(&g, &p);
        let (g2, p2) = parse_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&g2, &g);
        prop_assert_eq!(checkpoint_bytes(&g2, &p2), bytes);
    }
}
