use std::sync::OnceLock;

use lexnet::explain::*;
use lexnet::flowdata::{stratified_split, synth_generate, DatasetSplit, SynthConfig};
use lexnet::model::{LexNetModel, ModelConfig};
use lexnet::trainer::{train, TrainConfig};
use lexnet::{Error, Execution, Result};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained() -> &'static (LexNetModel, DatasetSplit) {
    static M: OnceLock<(LexNetModel, DatasetSplit)> = OnceLock::new();
    M.get_or_init(|| {
        let (records, _) = synth_generate(&SynthConfig::balanced(3, 16, 0.1, 8)).unwrap();
        let (tr, te) = stratified_split(&records, 0.5, 8).unwrap();
        let s = DatasetSplit::encode(&tr, &te).unwrap();
        let cfg = TrainConfig { n_epochs_outer: 2, n_sgd: 2, n_last: 2, batch_size: 8, seed: 8, ..TrainConfig::default() };
        let (m, _) = train(ModelConfig::default(), s.labels.names.clone(), &s.train, None, &cfg, Execution::Sequential).unwrap();
        (m, s)
    })
}

/// Logit = Σ_c v_c Σ_cells A_c, so every gradient entry of channel c is v_c.
struct SumPooled {
    maps: Vec<f64>,
    head: Vec<f64>,
}

impl FeatureGradient for SumPooled {
    fn maps_and_grad(&self, _x: &[f32], _target: usize) -> Result<(Vec<f64>, Vec<f64>, (usize, usize, usize))> {
        let grad = self.head.iter().flat_map(|&v| std::iter::repeat_n(v, 40)).collect();
        Ok((self.maps.clone(), grad, (self.head.len(), 20, 2)))
    }
}

#[test]
fn grad_cam_weights_equal_head_weights_on_linear_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = vec![0.5, -1.0, 2.0];
    let maps: Vec<f64> = (0..120).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let net = SumPooled { maps: maps.clone(), head: head.clone() };
    let gc = grad_cam_with(&net, &[0.0; 40], 0).unwrap();
    assert_eq!(gc.weights, head);
    assert!(!gc.zero_gradient);
    for cell in 0..40 {
        let want = (0..3).map(|c| head[c] * maps[c * 40 + cell]).sum::<f64>().max(0.0);
        assert!((gc.map.values.data()[cell] - want).abs() < 1e-12);
    }
}

#[test]
fn grad_cam_single_channel_is_scaled_relu_of_map() {
    let maps: Vec<f64> = (0..40).map(|i| i as f64 - 20.0).collect();
    let gc = grad_cam_with(&SumPooled { maps: maps.clone(), head: vec![3.0] }, &[0.0; 40], 0).unwrap();
    for (v, a) in gc.map.values.data().iter().zip(&maps) {
        assert_eq!(*v, (3.0 * a).max(0.0));
    }
    let zero = grad_cam_with(&SumPooled { maps, head: vec![0.0] }, &[0.0; 40], 0).unwrap();
    assert!(zero.zero_gradient && zero.map.is_all_zero());
}

#[test]
fn grad_cam_on_model_is_nonnegative() {
    let (m, s) = trained();
    for i in 0..4 {
        let map = grad_cam(m, s.test.input(i), i % 3).unwrap();
        assert!(map.values.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
    assert!(matches!(grad_cam(m, s.test.input(0), 3), Err(Error::LabelOutOfRange { .. })));
}

#[test]
fn grad_cam_gradient_matches_finite_differences() {
    // The model's feature gradient against central differences of the logit
    // through the prototype layer and head only.
    let (m, s) = trained();
    let x = s.test.input(1);
    let target = 1;
    let (lat, grad, (d, h, w)) = m.maps_and_grad(x, target).unwrap();
    let logit = |z: &[f64]| -> f64 {
        let zf: Vec<f32> = z.iter().map(|&v| v as f32).collect();
        let cm = lexnet::lproto::CellMajor::from_channel_major(&zf, d, h, w);
        m.predict_latent(&cm).unwrap().logits[target] as f64
    };
    let eps = 1e-2;
    for idx in [0, 7, 40, 100, lat.len() - 1] {
        let mut p = lat.clone();
        p[idx] += eps;
        let mut q = lat.clone();
        q[idx] -= eps;
        let fd = (logit(&p) - logit(&q)) / (2.0 * eps);
        assert!((fd - grad[idx]).abs() < 2e-2 * (1.0 + fd.abs()), "{idx}: fd {fd} vs {}", grad[idx]);
    }
}

/// `f(z) = Σ a_i z_i + b z_0 z_1` with a zero baseline: the exact Shapley
/// value is `a_i x_i`, plus half the interaction for cells 0 and 1.
#[test]
fn exact_shapley_on_small_model() {
    let a = [1.0, -2.0, 0.5, 3.0, 0.0, -1.5];
    let b = 0.75;
    let x = [1.0f32, 2.0, -1.0, 0.5, 4.0, 2.0];
    let f = |states: &[f32]| -> Result<Vec<f64>> {
        Ok(states
            .chunks(6)
            .map(|z| z.iter().zip(&a).map(|(&zi, ai)| ai * zi as f64).sum::<f64>() + b * z[0] as f64 * z[1] as f64)
            .collect())
    };
    let est = shapley_from_permutations(f, &x, &[0.0; 6], all_permutations(6)).unwrap();
    assert_eq!(est.permutations, 720);
    let inter = b * 2.0;
    for i in 0..6 {
        let want = a[i] * x[i] as f64 + if i < 2 { inter / 2.0 } else { 0.0 };
        assert!((est.values[i] - want).abs() < 1e-6, "cell {i}");
    }
    let total: f64 = est.values.iter().sum();
    assert!((total - (est.f_x - est.f_baseline)).abs() < 1e-9);
    assert!(est.total_std_error < 1e-9);
}

#[test]
fn input_equal_to_baseline_gets_zero_attribution() {
    let (m, _) = trained();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (map, est) = shapley_mc(m, &[0.0; 40], 0, 5, &mut rng).unwrap();
    assert!(map.is_all_zero());
    assert_eq!(est.f_x, est.f_baseline);
}

#[test]
fn monte_carlo_shapley_is_efficient() {
    let (m, s) = trained();
    let x = s.test.input(2);
    let (_, est) = shapley_mc(m, x, 1, 8, &mut sample_rng(0, 2)).unwrap();
    let total: f64 = est.values.iter().sum();
    // Every permutation telescopes to f(x) - f(0); only rounding remains.
    assert!((total - (est.f_x - est.f_baseline)).abs() < 1e-4 * (1.0 + est.f_x.abs()));
    assert!(est.std_errors.iter().all(|s| s.is_finite() && *s >= 0.0));
}

#[test]
fn sample_streams_are_reproducible_and_distinct() {
    let draw = |seed, idx| {
        let mut r = sample_rng(seed, idx);
        random_map(0, &mut r).unwrap()
    };
    assert_eq!(draw(1, 5), draw(1, 5));
    assert_ne!(draw(1, 5), draw(1, 6));
    assert_ne!(draw(1, 5), draw(2, 5));
}

#[test]
fn all_permutations_enumerates_factorial() {
    let p = all_permutations(4);
    assert_eq!(p.len(), 24);
    let mut sorted = p.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted, p);
}

#[test]
fn top_regions_orders_and_breaks_ties_row_major() {
    let mut v = vec![0.0; 40];
    v[5] = 2.0;
    v[3] = 1.0;
    v[7] = 1.0;
    let map = AttributionMap::new(Method::Random, 0, v).unwrap();
    assert_eq!(top_regions(&map, 3).unwrap(), vec![(2, 1), (1, 1), (3, 1)]);
    let all = top_regions(&map, 40).unwrap();
    assert_eq!(all.len(), 40);
    assert_eq!(all[3], (0, 0));
    assert!(top_regions(&map, 0).is_err());
    assert!(top_regions(&map, 41).is_err());
}

proptest! {
    #[test]
    fn top_regions_is_a_sorted_prefix(vals in prop::collection::vec(-5.0f64..5.0, 40), k in 1usize..=40) {
        let map = AttributionMap::new(Method::Random, 0, vals.clone()).unwrap();
        let top = top_regions(&map, k).unwrap();
        let picked: Vec<f64> = top.iter().map(|&c| map.value(c)).collect();
        prop_assert!(picked.windows(2).all(|w| w[0] >= w[1]));
        let cut = picked[k - 1];
        let above = vals.iter().filter(|&&v| v > cut).count();
        prop_assert!(above < k);
    }
}

#[test]
fn explanation_lists_predicted_class_prototypes() {
    let (m, s) = trained();
    let e = explain_prediction(m, s.test.input(0), "t0").unwrap();
    assert_eq!(e.entries.len(), m.prototypes.count_for(e.predicted));
    assert_eq!(e.label, m.labels[e.predicted]);
    let pred = m.predict(s.test.input(0)).unwrap();
    for (j, entry) in m.prototypes.indices_of(e.predicted).into_iter().zip(&e.entries) {
        assert_eq!(entry.score, pred.protos.scores[j]);
        assert_eq!(entry.location, pred.protos.locations[j]);
        assert!(entry.provenance.starts_with("training sample"));
    }
    assert_eq!(e.sizes.len(), 20);
    assert_eq!(e.dirs.len(), 20);

    let fresh = LexNetModel::new(ModelConfig::default(), vec!["a".into(), "b".into()], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(explain_prediction(&fresh, &[0.0; 40], "x"), Err(Error::Untrained)));
}

#[test]
fn by_design_evaluated_against_itself_is_perfect() {
    let (m, s) = trained();
    let r = faithfulness_eval(m, &s.test, &FaithfulnessConfig::new(Method::ByDesign), Execution::Parallel).unwrap();
    assert_eq!(r.samples, s.test.len());
    assert_eq!(r.top_protos_accuracy, 1.0);
    assert_eq!(r.top_protos_hit_rate, 1.0);
    let small = r.restricted(|o| o.regions <= 10);
    assert_eq!(small.top_10_accuracy, 1.0);
}

#[test]
fn faithfulness_is_reproducible_across_execution_modes() {
    let (m, s) = trained();
    let cfg = FaithfulnessConfig { n_permutations: 3, max_samples: Some(6), ..FaithfulnessConfig::new(Method::ShapleyMc) };
    let a = faithfulness_eval(m, &s.test, &cfg, Execution::Sequential).unwrap();
    let b = faithfulness_eval(m, &s.test, &cfg, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples, 6);
    let r = faithfulness_eval(m, &s.test, &FaithfulnessConfig { seed: 9, ..FaithfulnessConfig::new(Method::Random) }, Execution::Parallel).unwrap();
    assert!((0.0..=1.0).contains(&r.top_10_hit_rate));
}

#[test]
fn report_summaries_follow_outcomes() {
    let o = |regions, hp, h10| SampleOutcome { sample: 0, predicted: 0, prototypes: 2, regions, hits_top_protos: hp, hits_top_10: h10 };
    let r = FaithfulnessReport::from_outcomes(Method::GradCam, vec![o(2, 2, 2), o(2, 1, 2), o(1, 0, 0), o(1, 1, 1)]);
    assert_eq!(r.top_protos_accuracy, 0.5);
    assert_eq!(r.top_10_accuracy, 0.75);
    assert!((r.top_protos_hit_rate - 4.0 / 6.0).abs() < 1e-12);
    assert!((r.top_10_hit_rate - 5.0 / 6.0).abs() < 1e-12);
}

fn highlight_count(svg: &str) -> usize {
    svg.matches("stroke=\"#1f5fd6\"").count()
}

#[test]
fn rendering_highlights_each_entry() {
    let e = Explanation {
        sample_id: "s1".into(),
        predicted: 0,
        label: "web".into(),
        entries: vec![
            ExplanationEntry { proto_id: 0, score: 4.0, location: (3, 0), provenance: "p".into() },
            ExplanationEntry { proto_id: 2, score: 1.5, location: (9, 1), provenance: "q".into() },
        ],
        sizes: vec![0.5; 20],
        dirs: vec![-1.0; 20],
    };
    let fig = render_explanation(&e);
    assert_eq!(highlight_count(&fig.svg), 2);
    assert!(fig.warning.is_none());
    assert_eq!(fig.sidecar.cells, e.cells());
    assert_eq!(fig.sidecar.scores, vec![4.0, 1.5]);

    let dir = tempfile::tempdir().unwrap();
    let (svg, side) = write_figure(dir.path(), &fig).unwrap();
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
    let back: Sidecar = serde_json::from_str(std::fs::read_to_string(side).unwrap().trim()).unwrap();
    assert_eq!(back, fig.sidecar);
}

#[test]
fn all_zero_attribution_renders_with_warning() {
    let map = AttributionMap::new(Method::GradCam, 1, vec![0.0; 40]).unwrap();
    let fig = render_attribution(&map, &[0.0; 40], "z", 5).unwrap();
    assert_eq!(highlight_count(&fig.svg), 0);
    assert!(fig.warning.is_some());
    assert!(fig.sidecar.cells.is_empty());

    let mut v = vec![0.0; 40];
    v[0] = 1.0;
    v[1] = -1.0;
    v[10] = 0.5;
    let fig = render_attribution(&AttributionMap::new(Method::GradCam, 1, v).unwrap(), &[0.0; 40], "z", 5).unwrap();
    assert_eq!(fig.sidecar.cells, vec![(0, 0), (5, 0)]);
}

#[test]
fn method_names_round_trip() {
    for m in [Method::ByDesign, Method::GradCam, Method::ShapleyMc, Method::Random] {
        assert_eq!(Method::parse(m.name()), Some(m));
    }
    assert_eq!(Method::parse("lime"), None);
}
