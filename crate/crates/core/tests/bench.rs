use lexnet::backbone::{Backbone, BackboneConfig};
use lexnet::bench::*;
use lexnet::flowdata::{Dataset, LabelMap};
use lexnet::model::{LexNetModel, ModelConfig};
use lexnet::{Error, Execution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::default();
    for i in 0..n {
        let grid: Vec<f32> = (0..40).map(|c| if c % 2 == 0 { rng.random() } else if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        d.push(&grid, 0, format!("r{i}"));
    }
    d
}

fn model(classes: usize, seed: u64) -> LexNetModel {
    let labels = (0..classes).map(|k| format!("c{k}")).collect();
    let mut m = LexNetModel::new(ModelConfig::default(), labels, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    m.calibrate_batch_norm(&random_data(16, seed).inputs, Execution::Sequential).unwrap();
    m
}

fn backbone(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Backbone {
    let mut b = Backbone::<f32>::new(config, rng).unwrap();
    b.forward_train(&random_data(16, 9).inputs, 16, Execution::Sequential).unwrap();
    b
}

#[test]
fn percentiles_are_ordered() {
    let r = bench_inference(&model(3, 1), &random_data(8, 1), 2, 40, 1).unwrap();
    assert!(r.p50_us <= r.p95_us && r.p95_us <= r.p99_us);
    assert!(r.samples_per_sec > 0.0 && r.mean_us > 0.0);
    assert_eq!((r.batch, r.warmup_iters, r.measured_iters), (1, 2, 40));
    assert_eq!(r.params, model(3, 1).param_count());
    assert!(r.to_string().contains("samples/s"));
}

#[test]
fn batched_timing_reports_per_sample_latency() {
    let r = bench_inference(&model(3, 1), &random_data(8, 2), 1, 5, 4).unwrap();
    assert_eq!(r.batch, 4);
    assert!(r.p50_us <= r.p99_us);
}

#[test]
fn empty_dataset_and_zero_iterations_are_rejected() {
    let m = model(2, 1);
    assert!(matches!(bench_inference(&m, &Dataset::default(), 0, 5, 1), Err(Error::Empty(_))));
    assert!(bench_inference(&m, &random_data(2, 1), 0, 0, 1).is_err());
    assert!(bench_inference(&m, &random_data(2, 1), 0, 1, 0).is_err());
}

#[test]
fn paired_comparison_runs_both_backbones() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = backbone(BackboneConfig::lexnet(), &mut rng);
    let b = backbone(BackboneConfig::resnet_twin(), &mut rng);
    let p = paired_backbones(&a, &b, &random_data(8, 3), 3, 5, 1).unwrap();
    assert_eq!(p.rounds, 3);
    assert!(p.a_us > 0.0 && p.b_us > 0.0 && p.a_wins <= 3);
    assert!(paired_backbones(&a, &b, &random_data(8, 3), 0, 5, 1).is_err());
}

#[test]
fn parameter_table_rows() {
    let labels = LabelMap { names: (0..200).map(|k| format!("c{k}")).collect() };
    let mut m = LexNetModel::new(ModelConfig::default(), labels.names.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // 340 prototypes in total, as in the reference configuration.
    for i in 0..140 {
        m.add_prototype(i, vec![0.0; 32], None).unwrap();
    }
    let t = report_params(&m);
    let cum: Vec<usize> = t.rows.iter().map(|r| r.cumulative).collect();
    assert_eq!(&cum[..5], &[88, 3_088, 7_760, 19_520, 38_080]);
    assert_eq!(t.row("lproto").unwrap().params, 340 * 32);
    assert_eq!(t.row("lproto").unwrap().cumulative, 38_080 + 340 * 32);
    assert_eq!(t.row("fc").unwrap().params, 68_000);
    assert_eq!(t.total(), 38_080 + 340 * 32 + 68_000);
    assert_eq!(t.total(), m.param_count());
    let text = t.to_string();
    assert!(text.contains("3,088") && text.contains("38,080"));
    assert_eq!(text.lines().count(), 8);
}
