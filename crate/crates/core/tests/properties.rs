mod common;

use common::{rand_matrix, random_instance};
use hgl_core::autodiff::Tape;
use hgl_core::cvm::{cvm_forward, CvmWeights, ResidualReading};
use hgl_core::fusion::{modality_weights, parse, ModalityWeights, ParserWeights};
use hgl_core::hetgraph::{graph_reason, heterogeneous_forward, GraphModuleWeights, Source};
use hgl_core::model::{predict, Model, ModelConfig, Prediction};
use hgl_core::params::ParameterStore;
use hgl_core::tensor::{self, Activation, SoftmaxMode, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn mode_strategy() -> impl Strategy<Value = SoftmaxMode> {
    prop_oneof![Just(SoftmaxMode::Global), Just(SoftmaxMode::PerRow)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_normalizes_and_ignores_shifts(seed in any::<u64>(), r in 1usize..6, c in 1usize..6, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_matrix(&mut rng, r, c, 5.0);
        let g = tensor::softmax(&x, SoftmaxMode::Global).unwrap();
        prop_assert!((g.sum() - 1.0).abs() <= 1e-12);
        let p = tensor::softmax(&x, SoftmaxMode::PerRow).unwrap();
        for i in 0..r {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = x.map(|v| v + shift);
        for mode in [SoftmaxMode::Global, SoftmaxMode::PerRow] {
            let a = tensor::softmax(&x, mode).unwrap();
            let b = tensor::softmax(&shifted, mode).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn source_permutation_leaves_reasoning_unchanged(seed in any::<u64>(), n in 1usize..7, b in 1usize..7, mode in mode_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut store = ParameterStore::new();
        let w = GraphModuleWeights::register(&mut store, "g", d, Activation::Relu, &mut rng).unwrap();
        let src = rand_matrix(&mut rng, n, d, 1.0);
        let ans = rand_matrix(&mut rng, b, d, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let psrc = permute_rows(&src, &perm);

        let mut tape = Tape::new();
        let (s, a, ps) = (tape.input(src), tape.input(ans), tape.input(psrc));
        let out = heterogeneous_forward(&mut tape, &store, s, a, &w, mode, Source::Vision).unwrap();
        let pout = heterogeneous_forward(&mut tape, &store, ps, a, &w, mode, Source::Vision).unwrap();
        let adj = tape.value(out.adjacency).clone();
        prop_assert!(permute_rows(&adj, &perm).max_abs_diff(tape.value(pout.adjacency)) <= 1e-12);
        let y = graph_reason(&mut tape, &store, out.adjacency, s, w.reason, w.delta).unwrap();
        let py = graph_reason(&mut tape, &store, pout.adjacency, ps, w.reason, w.delta).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(tape.value(py)) <= 1e-10);
        prop_assert!(tape.value(out.guided).max_abs_diff(tape.value(pout.guided)) <= 1e-10);
        prop_assert_eq!(tape.shape(out.guided), &[b, d]);
    }

    #[test]
    fn answer_permutation_permutes_guided_rows(seed in any::<u64>(), n in 1usize..7, b in 1usize..7, mode in mode_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut store = ParameterStore::new();
        let w = GraphModuleWeights::register(&mut store, "g", d, Activation::Tanh, &mut rng).unwrap();
        let src = rand_matrix(&mut rng, n, d, 1.0);
        let ans = rand_matrix(&mut rng, b, d, 1.0);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng);
        let pans = permute_rows(&ans, &perm);
        let mut tape = Tape::new();
        let (s, a, pa) = (tape.input(src), tape.input(ans), tape.input(pans));
        let out = heterogeneous_forward(&mut tape, &store, s, a, &w, mode, Source::Question).unwrap();
        let pout = heterogeneous_forward(&mut tape, &store, s, pa, &w, mode, Source::Question).unwrap();
        let expect = permute_rows(tape.value(out.guided), &perm);
        prop_assert!(expect.max_abs_diff(tape.value(pout.guided)) <= 1e-10);
    }

    #[test]
    fn cvm_is_permutation_equivariant(seed in any::<u64>(), p in 1usize..7, c in 1usize..5, self_reading in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let w = CvmWeights::register(&mut store, "cvm", c, Activation::Relu, &mut rng).unwrap();
        let x = rand_matrix(&mut rng, p, c, 1.0);
        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(&mut rng);
        let reading = if self_reading { ResidualReading::SelfScaled } else { ResidualReading::Aggregate };
        let mut tape = Tape::new();
        let (xv, pxv) = (tape.input(x.clone()), tape.input(permute_rows(&x, &perm)));
        let out = cvm_forward(&mut tape, &store, xv, &w, reading).unwrap();
        let pout = cvm_forward(&mut tape, &store, pxv, &w, reading).unwrap();
        let expect = permute_rows(tape.value(out.output), &perm);
        prop_assert!(expect.max_abs_diff(tape.value(pout.output)) <= 1e-10);
        let votes = tape.value(out.votes);
        for i in 0..p {
            prop_assert!((votes.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn parse_of_equal_inputs_ignores_modality_weights(seed in any::<u64>(), b in 1usize..6, wo in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut store = ParameterStore::new();
        let w = ParserWeights::register(&mut store, "p", d, Activation::Relu, &mut rng).unwrap();
        let y = rand_matrix(&mut rng, b, d, 1.0);
        let mut tape = Tape::new();
        let yv = tape.input(y);
        let learned = {
            let (o, q, a) = (
                tape.input(rand_matrix(&mut rng, 1, d, 1.0)),
                tape.input(rand_matrix(&mut rng, 1, d, 1.0)),
                tape.input(rand_matrix(&mut rng, 1, d, 1.0)),
            );
            modality_weights(&mut tape, &store, o, q, a, &w).unwrap()
        };
        let (lo, lq) = learned.values(&tape);
        prop_assert!((lo + lq - 1.0).abs() <= 1e-12);
        let forced = ModalityWeights::forced(&mut tape, wo, 1.0 - wo);
        let a = parse(&mut tape, &store, yv, yv, learned, &w).unwrap();
        let bb = parse(&mut tape, &store, yv, yv, forced, &w).unwrap();
        prop_assert!(tape.value(a).max_abs_diff(tape.value(bb)) <= 1e-12);
    }

    #[test]
    fn logit_shift_leaves_probabilities(seed in any::<u64>(), shift in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_matrix(&mut rng, 1, 4, 10.0);
        let a = Prediction::from_logits(logits.clone()).unwrap();
        let b = Prediction::from_logits(logits.map(|v| v + shift)).unwrap();
        prop_assert!(a.probabilities.max_abs_diff(&b.probabilities) <= 1e-12);
        prop_assert!((a.probabilities.sum() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn candidate_permutation_permutes_logits(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { dim: 4, vocab_size: 7, channels: 3, ..ModelConfig::default() };
        let mut store = ParameterStore::new();
        let model = Model::new(cfg, &mut store, &mut rng).unwrap();
        let inst = random_instance(&mut rng, 7, 3, 4, 4);
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut rng);
        let mut permuted = inst.clone();
        permuted.candidates = perm.iter().map(|&k| inst.candidates[k].clone()).collect();
        permuted.gold = perm.iter().position(|&k| k == inst.gold).unwrap();

        let (a, _) = predict(&store, &model, &inst).unwrap();
        let (b, _) = predict(&store, &model, &permuted).unwrap();
        for (slot, &k) in perm.iter().enumerate() {
            prop_assert_eq!(a.logits.data()[k].to_bits(), b.logits.data()[slot].to_bits());
        }
        let max = a.logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unique = a.logits.data().iter().filter(|&&v| v == max).count() == 1;
        if unique {
            prop_assert_eq!(perm[b.chosen], a.chosen);
            prop_assert_eq!(a.chosen == inst.gold, b.chosen == permuted.gold);
        }
    }

    #[test]
    fn forward_is_bit_deterministic_and_replays(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { dim: 4, vocab_size: 7, channels: 3, ..ModelConfig::default() };
        let mut store = ParameterStore::new();
        let model = Model::new(cfg, &mut store, &mut rng).unwrap();
        let inst = random_instance(&mut rng, 7, 3, 4, 4);
        let run = || {
            let mut tape = Tape::new();
            let trace = hgl_core::model::forward(&mut tape, &store, &model, &inst).unwrap();
            let l = hgl_core::model::loss(&mut tape, trace.logits, inst.gold).unwrap();
            let g = tape.backward(l).unwrap();
            let grads: Vec<u64> = g.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect();
            (tape, l, grads)
        };
        let (tape, l, g1) = run();
        let (_, _, g2) = run();
        prop_assert_eq!(g1, g2);
        let replayed = tape.replay().unwrap();
        prop_assert_eq!(replayed.len(), tape.len());
        prop_assert_eq!(&replayed[l.index()], tape.value(l));
    }
}
