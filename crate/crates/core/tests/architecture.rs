use lexnet::backbone::{Activation, Backbone, BackboneConfig, BlockKind, BlockSpec};
use lexnet::lproto::{self, CellMajor, LastLayer, PrototypeSet, SIM_EPS};
use lexnet::model::{LexNetModel, ModelConfig};
use lexnet::tensor::{finite_diff_check, ParamGroup, Tensor};
use lexnet::{Error, Execution};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_inputs(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..n * 40).map(|i| if i % 2 == 0 { r.random::<f32>() } else if r.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn cumulative(cfg: BackboneConfig) -> Vec<usize> {
    Backbone::<f32>::new(cfg, &mut rng(0)).unwrap().layer_params().iter().map(|r| r.cumulative).collect()
}

#[test]
fn lexnet_cumulative_parameter_counts() {
    assert_eq!(cumulative(BackboneConfig::lexnet()), vec![88, 3_088, 7_760, 19_520, 38_080]);
}

#[test]
fn twin_block_counts_and_leres_saving() {
    let b = Backbone::<f32>::new(BackboneConfig::resnet_twin(), &mut rng(0)).unwrap();
    let per: Vec<usize> = b.layer_params().iter().map(|r| r.params).collect();
    assert_eq!(per, vec![88, 3_680, 4_672, 14_528, 18_560]);
    assert_eq!(b.param_count(), 41_528);
    let l = Backbone::<f32>::new(BackboneConfig::lexnet(), &mut rng(0)).unwrap();
    let lp: Vec<usize> = l.layer_params().iter().map(|r| r.params).collect();
    assert_eq!(lp, vec![88, 3_000, 4_672, 11_760, 18_560]);
    for i in [1, 3] {
        assert!((lp[i] as f64) <= 0.85 * per[i] as f64, "block {i}: {} vs {}", lp[i], per[i]);
    }
}

#[test]
fn empty_block_list_is_stem_only() {
    let mut cfg = BackboneConfig::lexnet();
    cfg.blocks.clear();
    assert_eq!(cumulative(cfg), vec![88]);
}

#[test]
fn inconsistent_chain_is_rejected() {
    let mut cfg = BackboneConfig::lexnet();
    cfg.blocks[2].in_channels = 8;
    assert!(matches!(Backbone::<f32>::new(cfg, &mut rng(0)), Err(Error::Config(_))));
    let mut cfg = BackboneConfig::lexnet();
    cfg.blocks[0] = BlockSpec::new(8, 24, BlockKind::Leres);
    assert!(Backbone::<f32>::new(cfg, &mut rng(0)).is_err());
}

#[test]
fn latent_shape_range_and_determinism() {
    let mut b = Backbone::<f32>::new(BackboneConfig::lexnet(), &mut rng(1)).unwrap();
    let x = random_inputs(8, 2);
    b.forward_train(&x, 8, Execution::Sequential).unwrap();
    let sample = Tensor::from_vec(&[1, 20, 2], x[..40].to_vec()).unwrap();
    let z = b.forward_sample(&sample).unwrap();
    assert_eq!(z.shape(), &[32, 20, 2]);
    assert!(z.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(b.forward_sample(&sample).unwrap().data(), z.data());
    // inference is per-sample: the batch context must not leak into a sample's output
    let all = b.forward_infer(&x, 8, Execution::Sequential).unwrap();
    assert_eq!(&all[..z.len()], z.data());
}

#[test]
fn inference_before_statistics_is_an_error() {
    let b = Backbone::<f32>::new(BackboneConfig::lexnet(), &mut rng(1)).unwrap();
    let x = random_inputs(1, 2);
    assert!(matches!(b.forward_infer(&x, 1, Execution::Sequential), Err(Error::UninitializedStats)));
}

#[test]
fn wrong_input_shape_is_an_error() {
    let mut b = Backbone::<f32>::new(BackboneConfig::lexnet(), &mut rng(1)).unwrap();
    b.forward_train(&random_inputs(4, 2), 4, Execution::Sequential).unwrap();
    let bad = Tensor::from_vec(&[1, 10, 2], vec![0.0; 20]).unwrap();
    assert!(matches!(b.forward_sample(&bad), Err(Error::Dimension { .. })));
}

#[test]
fn zero_weights_and_input_give_zero_output() {
    for kind in [BlockKind::Leres, BlockKind::StandardRes] {
        let cfg = BackboneConfig {
            input_shape: (1, 20, 2),
            stem_channels: 8,
            blocks: vec![BlockSpec::new(8, 16, kind), BlockSpec::new(16, 16, kind)],
            final_activation: Activation::Relu,
        };
        let mut b = Backbone::<f32>::new(cfg, &mut rng(3)).unwrap();
        for p in b.params_mut() {
            if p.name().ends_with("conv") || p.name().ends_with("ghost") {
                p.values_mut().fill(0.0);
            }
        }
        let (y, _) = b.forward_train(&vec![0.0; 80], 2, Execution::Sequential).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn equal_width_block_with_silenced_branch_is_identity() {
    let stem_only = BackboneConfig { blocks: vec![], final_activation: Activation::Relu, ..BackboneConfig::lexnet() };
    let with_block = BackboneConfig {
        blocks: vec![BlockSpec::new(8, 8, BlockKind::Leres)],
        final_activation: Activation::Relu,
        ..BackboneConfig::lexnet()
    };
    let mut a = Backbone::<f32>::new(stem_only, &mut rng(4)).unwrap();
    let mut b = Backbone::<f32>::new(with_block, &mut rng(4)).unwrap();
    for bn in b.batch_norms_mut().into_iter().skip(1) {
        bn.gamma.values_mut().fill(0.0);
    }
    let x = random_inputs(4, 5);
    let (ya, _) = a.forward_train(&x, 4, Execution::Sequential).unwrap();
    let (yb, _) = b.forward_train(&x, 4, Execution::Sequential).unwrap();
    assert_eq!(ya, yb);
}

#[test]
fn ghost_branch_is_not_degenerate() {
    let x = random_inputs(4, 6);
    let mut a = Backbone::<f32>::new(BackboneConfig::lexnet(), &mut rng(7)).unwrap();
    let mut b = a.clone();
    for p in b.params_mut() {
        if p.name().ends_with("ghost") {
            p.values_mut().fill(0.0);
        }
    }
    let (ya, _) = a.forward_train(&x, 4, Execution::Sequential).unwrap();
    let (yb, _) = b.forward_train(&x, 4, Execution::Sequential).unwrap();
    let diff: f32 = ya.iter().zip(&yb).map(|(p, q)| (p - q).abs()).sum();
    assert!(diff > 1e-3, "ghost maps had no effect ({diff})");
}

#[test]
fn sequential_and_parallel_agree() {
    let mut a = Backbone::<f32>::new(BackboneConfig::lexnet(), &mut rng(8)).unwrap();
    let mut b = a.clone();
    let x = random_inputs(6, 9);
    let (ya, ca) = a.forward_train(&x, 6, Execution::Sequential).unwrap();
    let (yb, cb) = b.forward_train(&x, 6, Execution::Parallel).unwrap();
    assert_eq!(ya, yb);
    let g: Vec<f32> = ya.iter().map(|v| v - 0.5).collect();
    let ga = a.backward(ca, g.clone(), Execution::Sequential);
    let gb = b.backward(cb, g, Execution::Parallel);
    assert_eq!(ga, gb);
    for (p, q) in a.params_mut().into_iter().zip(b.params_mut()) {
        assert_eq!(p.grad_mut().to_vec(), q.grad_mut().to_vec(), "{}", p.name());
    }
}

#[test]
fn backbone_input_gradient_matches_finite_differences() {
    let mut b = Backbone::<f32>::new(BackboneConfig::lexnet(), &mut rng(10)).unwrap().cast::<f64>();
    let x: Vec<f64> = random_inputs(3, 11).iter().map(|&v| v as f64).collect();
    let w: Vec<f64> = (0..3 * 32 * 40).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
    let (_, cache) = b.forward_train(&x, 3, Execution::Sequential).unwrap();
    let gx = b.backward(cache, w.clone(), Execution::Sequential);
    let mut probe = b.clone();
    let check = finite_diff_check(
        |xs| {
            let (y, _) = probe.forward_train(xs, 3, Execution::Sequential).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        },
        &x,
        &gx,
        1e-6,
        1e-6,
    );
    assert!(check.passes(1e-3), "{check:?}");
}

fn small_model(seed: u64) -> LexNetModel<f64> {
    let labels = (0..4).map(|k| format!("c{k}")).collect();
    let mut m = LexNetModel::<f32>::new(ModelConfig::default(), labels, &mut rng(seed)).unwrap().cast::<f64>();
    m.add_prototype(1, vec![0.4; 32], None).unwrap();
    m.add_prototype(3, vec![0.6; 32], None).unwrap();
    m
}

#[test]
fn end_to_end_loss_gradient_on_random_parameters() {
    let mut model = small_model(12);
    let x: Vec<f64> = random_inputs(4, 13).iter().map(|&v| v as f64).collect();
    let labels = [0, 1, 2, 3];
    model.accumulate_gradients(&x, &labels, true, Execution::Sequential).unwrap();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng(14);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    while picks.len() < 20 {
        let mut flat = r.random_range(0..total);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        if !picks.contains(&(pi, flat)) {
            picks.push((pi, flat));
        }
    }
    let analytic: Vec<f64> = {
        let mut ps = model.params_mut();
        picks.iter().map(|&(pi, i)| ps[pi].grad_mut()[i]).collect()
    };
    let x0: Vec<f64> = {
        let ps = model.params();
        picks.iter().map(|&(pi, i)| ps[pi].values()[i]).collect()
    };
    let base = model.clone();
    let check = finite_diff_check(
        |vals| {
            let mut m = base.clone();
            {
                let mut ps = m.params_mut();
                for (&(pi, i), &v) in picks.iter().zip(vals) {
                    ps[pi].values_mut()[i] = v;
                }
            }
            m.accumulate_gradients(&x, &labels, false, Execution::Sequential).unwrap()
        },
        &x0,
        &analytic,
        1e-6,
        1e-7,
    );
    let groups: Vec<ParamGroup> = picks.iter().map(|&(pi, _)| model.params()[pi].group()).collect();
    assert!(check.passes(1e-3), "{check:?} groups {groups:?}");
}

#[test]
fn prototype_scores_gradient_matches_finite_differences() {
    let mut r = rng(15);
    let latent: Vec<f64> = (0..32 * 40).map(|_| r.random()).collect();
    let cm = CellMajor::from_channel_major(&latent, 32, 20, 2);
    let p0: Vec<f64> = (0..32).map(|_| r.random()).collect();
    let set = PrototypeSet::from_vectors(1, 32, 5, vec![(0, p0.clone())]).unwrap();
    let fwd = lproto::score_cells(&cm, &set).unwrap();
    let mut gl = vec![0.0; latent.len()];
    let mut gp = vec![vec![0.0; 32]];
    lproto::lproto_backward(&cm, &set, &fwd, &[1.0], &mut gl, Some(&mut gp));
    let check = finite_diff_check(
        |p| {
            let s = PrototypeSet::from_vectors(1, 32, 5, vec![(0, p.to_vec())]).unwrap();
            lproto::score_cells(&cm, &s).unwrap().scores[0]
        },
        &p0,
        &gp[0],
        1e-6,
        1e-6,
    );
    assert!(check.passes(1e-3), "{check:?}");
}

fn naive_distance(latent: &[f32], p: &[f32], t: usize, v: usize) -> f32 {
    (0..32).map(|d| (latent[d * 40 + t * 2 + v] - p[d]).powi(2)).sum()
}

#[test]
fn distance_map_examples() {
    let mut r = rng(16);
    let latent: Vec<f32> = (0..32 * 40).map(|_| r.random()).collect();
    let lt = Tensor::from_vec(&[32, 20, 2], latent.clone()).unwrap();
    let patch: Vec<f32> = (0..32).map(|d| latent[d * 40 + 7 * 2 + 1]).collect();
    let set = PrototypeSet::from_vectors(1, 32, 5, vec![(0, patch)]).unwrap();
    let dm = lproto::distance_map(&lt, &set, 0).unwrap();
    assert_eq!(dm.shape(), &[20, 2]);
    assert_eq!(dm.data()[7 * 2 + 1], 0.0);
    let s = lproto::lproto_forward(&lt, &set).unwrap();
    assert_eq!(s.locations[0], (7, 1));
    assert_eq!(s.scores[0], lproto::similarity(0.0f32));

    let zeros = Tensor::<f32>::zeros(&[32, 20, 2]);
    let zset = PrototypeSet::from_vectors(1, 32, 5, vec![(0, vec![0.0; 32])]).unwrap();
    assert!(lproto::distance_map(&zeros, &zset, 0).unwrap().data().iter().all(|&d| d == 0.0));

    let wrong = Tensor::<f32>::zeros(&[16, 20, 2]);
    assert!(lproto::distance_map(&wrong, &zset, 0).is_err());
}

#[test]
fn similarity_closed_forms() {
    assert!((lproto::similarity(0.0f64) - (1.0 / SIM_EPS).ln()).abs() < 1e-12);
    assert!((lproto::similarity(0.0f64) - 9.2103).abs() < 1e-4);
    assert!((lproto::similarity(1.0f64) - 0.6930).abs() < 1e-4);
    assert!(lproto::similarity(1e12f64) < 1e-11);
    assert!(lproto::similarity_checked(-1.0).is_err());
}

#[test]
fn score_vector_length_and_param_counts() {
    let mut r = rng(17);
    let class_of: Vec<usize> = (0..340).map(|j| j % 200).collect();
    let vectors = class_of.iter().map(|&k| (k, (0..32).map(|_| r.random::<f32>()).collect())).collect();
    let set = PrototypeSet::from_vectors(200, 32, 5, vectors).unwrap();
    let lt = Tensor::from_vec(&[32, 20, 2], (0..1280).map(|_| r.random::<f32>()).collect()).unwrap();
    assert_eq!(lproto::lproto_forward(&lt, &set).unwrap().scores.len(), 340);
    assert_eq!(lproto::param_count_lproto(&set), 10_880);
    let head = LastLayer::<f32>::init_for(&class_of, 200);
    assert_eq!(head.weight.len(), 68_000);
    let vectors = (0..400).map(|j| (j % 200, vec![0.5f32; 32])).collect();
    let set400 = PrototypeSet::from_vectors(200, 32, 5, vectors).unwrap();
    assert_eq!(lproto::param_count_lproto(&set400), 12_800);
}

#[test]
fn classify_examples() {
    let head = LastLayer::<f32>::init_for(&[0, 1, 2, 2], 3);
    let (logits, k) = lproto::classify(&[0.0, 0.0, 3.0, 0.0], &head).unwrap();
    assert_eq!(k, 2);
    assert_eq!(logits, vec![-1.5, -1.5, 3.0]);
    let (logits, k) = lproto::classify(&[0.0; 4], &head).unwrap();
    assert_eq!((logits, k), (vec![0.0; 3], 0));
    assert!(lproto::classify(&[1.0; 3], &head).is_err());
}

#[test]
fn empty_prototype_set_is_an_error() {
    let lt = Tensor::<f32>::zeros(&[32, 20, 2]);
    let set = PrototypeSet::<f32>::from_vectors(0, 32, 5, vec![]).unwrap();
    assert!(matches!(lproto::lproto_forward(&lt, &set), Err(Error::Empty(_))));
}

#[test]
fn model_parameter_total() {
    let m = small_model(18);
    assert_eq!(m.param_count(), 38_080 + 6 * 32 + 6 * 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_is_positive_and_decreasing(a in 0.0f64..1e6, b in 0.0f64..1e6) {
        prop_assume!(a < b);
        let (sa, sb) = (lproto::similarity(a), lproto::similarity(b));
        prop_assert!(sa > 0.0 && sb > 0.0);
        prop_assert!(sa > sb);
    }

    #[test]
    fn distance_map_matches_naive_loop(seed in any::<u64>()) {
        let mut r = rng(seed);
        let latent: Vec<f32> = (0..1280).map(|_| r.random()).collect();
        let p: Vec<f32> = (0..32).map(|_| r.random()).collect();
        let set = PrototypeSet::from_vectors(1, 32, 5, vec![(0, p.clone())]).unwrap();
        let lt = Tensor::from_vec(&[32, 20, 2], latent.clone()).unwrap();
        let dm = lproto::distance_map(&lt, &set, 0).unwrap();
        for t in 0..20 {
            for v in 0..2 {
                prop_assert_eq!(dm.data()[t * 2 + v], naive_distance(&latent, &p, t, v));
            }
        }
        let s = lproto::lproto_forward(&lt, &set).unwrap();
        for &d in dm.data() {
            prop_assert!(s.scores[0] >= lproto::similarity(d));
        }
    }

    #[test]
    fn logits_are_linear_in_scores(seed in any::<u64>(), a in 0.01f64..100.0) {
        let mut r = rng(seed);
        let class_of: Vec<usize> = (0..7).map(|j| j % 3).collect();
        let mut head = LastLayer::<f64>::init_for(&class_of, 3);
        head.weight.values_mut().iter_mut().for_each(|w| *w += r.random::<f64>() - 0.5);
        let s: Vec<f64> = (0..7).map(|_| r.random::<f64>() * 9.0).collect();
        let scaled: Vec<f64> = s.iter().map(|v| v * a).collect();
        let (l1, k1) = lproto::classify(&s, &head).unwrap();
        let (l2, k2) = lproto::classify(&scaled, &head).unwrap();
        for (x, y) in l1.iter().zip(&l2) {
            prop_assert!((x * a - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        prop_assert_eq!(k1, k2);
    }
}
