//! Trains on a planted-signature corpus and prints per-iteration progress.
//!
//! `cargo run --release -p lexnet --example synthetic -- [outer] [n_sgd] [seed]`

use std::time::Instant;

use lexnet::flowdata::{stratified_split, synth_generate, DatasetSplit, SynthConfig};
use lexnet::model::ModelConfig;
use lexnet::trainer::{train, TrainConfig};
use lexnet::Execution;

fn main() -> lexnet::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let arg = |i: usize, d: u64| args.get(i).copied().unwrap_or(d);
    let (records, signatures) = synth_generate(&SynthConfig::imbalanced(10, 200, 4.0, 0.1, arg(2, 7)))?;
    let (tr, te) = stratified_split(&records, 0.5, arg(2, 7))?;
    let split = DatasetSplit::encode(&tr, &te)?;
    let mut cfg = TrainConfig { n_epochs_outer: arg(0, 10) as usize, n_sgd: arg(1, 5) as usize, seed: arg(2, 7), ..TrainConfig::default() };
    // Extra fields as a JSON object, e.g. LEXNET_TRAIN='{"momentum":0.9}'.
    if let Ok(extra) = std::env::var("LEXNET_TRAIN") {
        let mut v = serde_json::to_value(&cfg)?;
        if let (Some(base), serde_json::Value::Object(over)) = (v.as_object_mut(), serde_json::from_str(&extra)?) {
            base.extend(over);
        }
        cfg = serde_json::from_value(v)?;
    }
    let start = Instant::now();
    let (model, report) = train(ModelConfig::default(), split.labels.names.clone(), &split.train, Some(&split.test), &cfg, Execution::Parallel)?;
    for it in &report.iterations {
        println!(
            "it {:2} loss {:.4} last {:.4} train {:.4} test {:?} protos {:?} kurt {:?}",
            it.iteration,
            it.stage1_losses.last().unwrap_or(&f64::NAN),
            it.stage3_losses.last().unwrap_or(&f64::NAN),
            it.train_accuracy,
            it.test_accuracy,
            it.prototypes_per_class,
            it.kurtosis
        );
    }
    let preds = model.predict_batch(&split.test.inputs, Execution::Parallel)?;
    let mut recovered = 0;
    for sig in &signatures {
        let k = split.labels.id(&sig.class).expect("class present");
        let cells: Vec<(usize, usize)> = sig.markers.iter().map(|m| m.cell()).collect();
        let idx = split.test.indices_of(k);
        let best = model
            .prototypes
            .indices_of(k)
            .into_iter()
            .map(|j| idx.iter().filter(|&&i| cells.contains(&preds[i].protos.locations[j])).count() as f64 / idx.len() as f64)
            .fold(0.0, f64::max);
        recovered += usize::from(best >= 0.5);
        println!("{} markers {:?} best hit rate {:.3}", sig.class, cells, best);
    }
    println!("recovered {recovered}/{}", signatures.len());
    println!("final accuracy {:.4} in {:.1?}, {} prototypes", report.final_metrics.accuracy, start.elapsed(), model.prototypes.len());
    Ok(())
}
