use afrcnn::audio::{coverage, frame_count, overlap_add, segment, synth_mixture};
use afrcnn::graph::{
    build_block, run_block, tie_parameters, topo_order, validate_block, BlockSpec, ConnMethod, ConnType, FusionKind,
    SchemeId, TransformOrder,
};
use afrcnn::model::{MacroMode, ModelConfig, SeparationModel};
use afrcnn::nnops::kernels::{
    concat_channels, conv1d, narrow_channels, pixel_shuffle_1d, pixel_unshuffle_1d, transposed_conv1d_to_len,
    Conv1dAttrs, Padding,
};
use afrcnn::nnops::Graph;
use afrcnn::objectives::{permutations, pit_loss, si_snr, si_snri};
use afrcnn::params::{ParamKey, ParamStore};
use afrcnn::trainer::{clip_global_norm, Grads};
use afrcnn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn signal(n: usize, seed: u64) -> Vec<f64> {
    tensor(&[n], seed).into_data()
}

fn edge_set(g: &afrcnn::graph::BlockGraph, keep: impl Fn(ConnType) -> bool) -> Vec<String> {
    let mut v: Vec<String> = g
        .edges
        .iter()
        .filter(|e| keep(e.conn))
        .map(|e| {
            let (a, b) = (g.nodes[e.src], g.nodes[e.dst]);
            format!("{}.{}->{}.{} {}", a.stage, a.phase, b.stage, b.phase, e.conn)
        })
        .collect();
    v.sort();
    v
}

fn scheme() -> impl Strategy<Value = SchemeId> {
    prop::sample::select(SchemeId::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn builders_are_valid_and_acyclic(s in scheme(), stages in 2usize..=8) {
        let g = build_block(s, stages).unwrap();
        prop_assert!(validate_block(&g).is_ok(), "{}", g.dump());
        let order = topo_order(&g).unwrap();
        prop_assert_eq!(order.len(), g.nodes.len());
        let pos: Vec<usize> = {
            let mut p = vec![0; order.len()];
            for (i, &n) in order.iter().enumerate() { p[n] = i; }
            p
        };
        for e in &g.edges {
            prop_assert!(pos[e.src] < pos[e.dst]);
        }
    }

    #[test]
    fn noskip_is_s_frcnn_without_skips(stages in 2usize..=8) {
        let full = build_block(SchemeId::SFrcnn, stages).unwrap();
        let noskip = build_block(SchemeId::SFrcnnNoskip, stages).unwrap();
        prop_assert_eq!(full.nodes.len(), noskip.nodes.len());
        prop_assert_eq!(edge_set(&full, |c| !c.is_skip()), edge_set(&noskip, |_| true));
    }

    #[test]
    fn method_b_weights_only_on_bottom_up(s in scheme(), stages in 2usize..=8) {
        let g = build_block(s, stages).unwrap();
        let ties = tie_parameters(&g, ConnMethod::B, FusionKind::Concat);
        for (e, steps) in g.edges.iter().zip(&ties.edge_steps) {
            let weighted = steps.iter().any(|st| st.key().is_some());
            prop_assert_eq!(weighted, matches!(e.conn, ConnType::BottomUp(_)));
        }
    }

    #[test]
    fn param_count_ignores_blocks(s in scheme(), m in prop::sample::select(vec![MacroMode::Dc, MacroMode::Cc, MacroMode::Sc]), b in 1usize..20) {
        let cfg = |blocks| ModelConfig { scheme: s, macro_mode: m, blocks, channels: 16, enc_channels: 16, stages: 3, ..ModelConfig::default() };
        let one: usize = cfg(1).tensor_specs().unwrap().iter().map(|t| t.numel()).sum();
        let many: usize = cfg(b).tensor_specs().unwrap().iter().map(|t| t.numel()).sum();
        prop_assert_eq!(one, many);
    }

    #[test]
    fn coverage_identity(len in 2usize..24, stride_frac in 0.05f64..0.95, t in 1usize..300, seed in any::<u64>()) {
        let stride = ((len as f64 * stride_frac) as usize).clamp(1, len - 1);
        // Integer-valued samples keep every sum exact.
        let x: Vec<f64> = signal(t, seed).iter().map(|v| (v * 100.0).round()).collect();
        let frames = segment(&x, len, stride).unwrap();
        prop_assert_eq!(frames.len(), frame_count(t, len, stride));
        let y = overlap_add(&frames, stride, t).unwrap();
        for i in 0..t {
            prop_assert_eq!(y[i], x[i] * coverage(i, frames.len(), len, stride) as f64);
        }
    }

    #[test]
    fn si_snr_scale_invariant(seed in any::<u64>(), a in prop::sample::select(vec![0.1, 3.0, 100.0])) {
        let s = signal(400, seed);
        let e: Vec<f64> = s.iter().zip(signal(400, seed ^ 1)).map(|(x, n)| x + 0.3 * n).collect();
        let scaled: Vec<f64> = e.iter().map(|v| v * a).collect();
        let d = (si_snr(&scaled, &s).unwrap() - si_snr(&e, &s).unwrap()).abs();
        prop_assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn pit_matches_enumeration(seed in any::<u64>(), n in 1usize..=4) {
        let refs: Vec<Vec<f64>> = (0..n).map(|i| signal(200, seed.wrapping_add(i as u64))).collect();
        let ests: Vec<Vec<f64>> = (0..n).map(|i| signal(200, seed.wrapping_add(100 + i as u64))).collect();
        let pit = pit_loss(&ests, &refs).unwrap();
        let brute = permutations(n)
            .into_iter()
            .map(|p| -(0..n).map(|i| si_snr(&ests[p[i]], &refs[i]).unwrap()).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(pit.loss, brute);
        // Shuffling the estimates leaves the loss alone and composes the permutation.
        let rot: Vec<Vec<f64>> = (0..n).map(|i| ests[(i + 1) % n].clone()).collect();
        let again = pit_loss(&rot, &refs).unwrap();
        prop_assert_eq!(again.loss, pit.loss);
        for i in 0..n {
            prop_assert_eq!((again.perm[i] + 1) % n, pit.perm[i]);
        }
    }

    #[test]
    fn mixture_improvement_zero(seed in any::<u64>()) {
        let mix = signal(300, seed);
        let r = signal(300, seed ^ 7);
        prop_assert_eq!(si_snri(&mix, &r, &mix).unwrap(), 0.0);
    }

    #[test]
    fn clip_bounds_norm(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut g = Grads::new();
        g.insert("a".into(), tensor(&[3, 7], seed).map(|v| v * scale));
        g.insert("b".into(), tensor(&[11], seed ^ 3).map(|v| v * scale));
        clip_global_norm(&mut g, 5.0);
        let n = g.values().map(|t| t.sum_sq()).sum::<f64>().sqrt();
        prop_assert!(n <= 5.0 + 1e-9);
    }

    #[test]
    fn conv_adjoint(seed in any::<u64>(), stride in 1usize..4, k in 1usize..6, frames in 4usize..20) {
        let (cin, cout) = (3, 2);
        let len = (frames - 1) * stride + k;
        let x = tensor(&[cin, len], seed);
        let w = tensor(&[cout, cin, k], seed ^ 1);
        let y = conv1d(&x, &w, None, Conv1dAttrs::new(stride, 1, Padding::Valid)).unwrap();
        let dy = tensor(y.shape(), seed ^ 2);
        let xt = transposed_conv1d_to_len(&dy, &w, stride, len).unwrap();
        let lhs = y.dot(&dy);
        let rhs = x.dot(&xt);
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} {rhs}");
    }

    #[test]
    fn shuffle_and_concat_are_bijections(seed in any::<u64>(), r in 1usize..4, c in 1usize..4, f in 1usize..9) {
        let x = tensor(&[c * r, f], seed);
        let y = pixel_shuffle_1d(&x, r).unwrap();
        prop_assert_eq!(y.shape(), &[c, f * r]);
        prop_assert_eq!(pixel_unshuffle_1d(&y, r).unwrap(), x.clone());
        let z = tensor(&[2, f], seed ^ 5);
        let cat = concat_channels(&[&x, &z]).unwrap();
        prop_assert_eq!(narrow_channels(&cat, 0, c * r).unwrap(), x);
        prop_assert_eq!(narrow_channels(&cat, c * r, 2).unwrap(), z);
    }

    #[test]
    fn synthesis_is_pure(seed in any::<u64>()) {
        let a = synth_mixture(seed, 0.5, 8000, (-5.0, 5.0)).unwrap();
        let b = synth_mixture(seed, 0.5, 8000, (-5.0, 5.0)).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_outputs_match_input_length(s in scheme(), t in 21usize..700, seed in any::<u64>()) {
        let cfg = ModelConfig { scheme: s, channels: 4, enc_channels: 4, stages: 3, blocks: 2, ..ModelConfig::default() };
        let m = SeparationModel::<f64>::new(cfg, seed).unwrap();
        let x = signal(t, seed);
        let out = m.forward(&x).unwrap();
        prop_assert_eq!(out.len(), 2);
        for o in &out {
            prop_assert_eq!(o.len(), t);
            prop_assert!(o.iter().all(|v| v.is_finite()));
        }
        prop_assert_eq!(m.forward(&x).unwrap(), out);
    }
}

#[test]
fn zero_input_gives_zero_block_output() {
    for s in SchemeId::ALL {
        for method in [ConnMethod::A, ConnMethod::B] {
            let spec = BlockSpec::new(s, 3, method, FusionKind::Concat, TransformOrder::PreluThenNorm).unwrap();
            let cfg = ModelConfig { channels: 4, enc_channels: 4, stages: 3, ..ModelConfig::default() };
            let dims = cfg.dims();
            let keys: Vec<ParamKey> = spec.ties.keys().into_iter().collect();
            let specs: Vec<_> = keys.iter().flat_map(|k| k.specs(&dims)).collect();
            let mut store = ParamStore::<f64>::init(&specs, &mut ChaCha8Rng::seed_from_u64(1));
            for (name, t) in store.iter_mut() {
                if name.ends_with("_b") || name.ends_with(".b") || name.ends_with("bias") {
                    t.data_mut().fill(0.0);
                }
            }
            let mut g = Graph::new();
            let inputs: Vec<_> = spec
                .graph
                .inputs
                .iter()
                .map(|&n| g.input(Tensor::zeros(&[4, 16 >> (spec.graph.nodes[n].stage - 1)])))
                .collect();
            for y in run_block(&mut g, &spec, &store, &dims, &inputs).unwrap() {
                assert!(g.value(y).data().iter().all(|&v| v == 0.0), "{s} {method:?}");
            }
        }
    }
}

#[test]
fn larger_and_concat_models_cost_more() {
    let count = |c: usize, fusion| {
        let cfg = ModelConfig { channels: c, enc_channels: c, fusion, ..ModelConfig::default() };
        cfg.tensor_specs().unwrap().iter().map(|t| t.numel()).sum::<usize>()
    };
    assert!(count(64, FusionKind::Concat) > count(32, FusionKind::Concat));
    assert!(count(64, FusionKind::Sum) < count(64, FusionKind::Concat));
}
