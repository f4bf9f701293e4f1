//! Inference timing and parameter accounting.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::backbone::{Backbone, LayerParams};
use crate::error::{Error, Result};
use crate::flowdata::Dataset;
use crate::model::LexNetModel;
use crate::Execution;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub samples_per_sec: f64,
    /// Latency per sample, µs.
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub batch: usize,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    pub params: usize,
    pub environment: String,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples/s   {:.1}", self.samples_per_sec)?;
        writeln!(f, "mean (us)   {:.2}", self.mean_us)?;
        writeln!(f, "p50 (us)    {:.2}", self.p50_us)?;
        writeln!(f, "p95 (us)    {:.2}", self.p95_us)?;
        writeln!(f, "p99 (us)    {:.2}", self.p99_us)?;
        writeln!(f, "batch       {}", self.batch)?;
        writeln!(f, "warmup      {}", self.warmup_iters)?;
        writeln!(f, "iterations  {}", self.measured_iters)?;
        writeln!(f, "params      {}", self.params)?;
        write!(f, "environment {}", self.environment)
    }
}

pub fn environment_note() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{} {}, {cpus} logical cpus, {} build, parallel feature {}, timing single-threaded",
        std::env::consts::OS,
        std::env::consts::ARCH,
        if cfg!(debug_assertions) { "debug" } else { "release" },
        if Execution::parallel_available() { "on" } else { "off" },
    )
}

/// Nearest-rank percentile of sorted values.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `run` on consecutive batches of `batch` samples cycling over
/// `data`. Each measured iteration yields one per-sample latency.
fn time_batches<F>(data: &Dataset, warmup: usize, iters: usize, batch: usize, mut run: F) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f32]) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if iters == 0 || batch == 0 {
        return Err(Error::Config("measured iterations and batch size must be at least 1".into()));
    }
    let width = data.inputs.len() / data.len();
    let mut buf = Vec::with_capacity(batch * width);
    let mut next = 0usize;
    let mut fill = |buf: &mut Vec<f32>| {
        buf.clear();
        for _ in 0..batch {
            buf.extend_from_slice(data.input(next));
            next = (next + 1) % data.len();
        }
    };
    for _ in 0..warmup {
        fill(&mut buf);
        run(&buf)?;
    }
    let mut lat = Vec::with_capacity(iters);
    let mut total = 0.0;
    for _ in 0..iters {
        fill(&mut buf);
        let t = Instant::now();
        run(&buf)?;
        let s = t.elapsed().as_secs_f64();
        total += s;
        lat.push(s * 1e6 / batch as f64);
    }
    Ok((lat, total))
}

fn report(mut lat: Vec<f64>, total: f64, batch: usize, warmup: usize, params: usize) -> BenchReport {
    let n = lat.len();
    let mean_us = lat.iter().sum::<f64>() / n as f64;
    lat.sort_by(f64::total_cmp);
    BenchReport {
        samples_per_sec: (n * batch) as f64 / total.max(f64::MIN_POSITIVE),
        mean_us,
        p50_us: nearest_rank(&lat, 0.50),
        p95_us: nearest_rank(&lat, 0.95),
        p99_us: nearest_rank(&lat, 0.99),
        batch,
        warmup_iters: warmup,
        measured_iters: n,
        params,
        environment: environment_note(),
    }
}

/// Full-model forward passes on already-encoded samples, one thread.
pub fn bench_inference(model: &LexNetModel, data: &Dataset, warmup_iters: usize, measured_iters: usize, batch: usize) -> Result<BenchReport> {
    let (lat, total) = time_batches(data, warmup_iters, measured_iters, batch, |x| {
        black_box(model.predict_batch(black_box(x), Execution::Sequential)?);
        Ok(())
    })?;
    Ok(report(lat, total, batch, warmup_iters, model.param_count()))
}

/// Backbone-only forward passes, one thread.
pub fn bench_backbone(backbone: &Backbone, data: &Dataset, warmup_iters: usize, measured_iters: usize, batch: usize) -> Result<BenchReport> {
    let (lat, total) = time_batches(data, warmup_iters, measured_iters, batch, |x| {
        black_box(backbone.forward_infer(black_box(x), batch, Execution::Sequential)?);
        Ok(())
    })?;
    Ok(report(lat, total, batch, warmup_iters, backbone.param_count()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedComparison {
    /// Median over rounds of each backbone's mean µs/sample.
    pub a_us: f64,
    pub b_us: f64,
    pub rounds: usize,
    /// Rounds in which `a` was at least as fast as `b`.
    pub a_wins: usize,
}

impl PairedComparison {
    /// `a`'s median time relative to `b`'s, minus one (negative means faster).
    pub fn relative_change(&self) -> f64 {
        self.a_us / self.b_us - 1.0
    }
}

/// Alternates short runs of two backbones so drift in machine load hits both.
pub fn paired_backbones(a: &Backbone, b: &Backbone, data: &Dataset, rounds: usize, iters: usize, batch: usize) -> Result<PairedComparison> {
    if rounds == 0 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    bench_backbone(a, data, iters, 1, batch)?;
    bench_backbone(b, data, iters, 1, batch)?;
    let mut ta = Vec::with_capacity(rounds);
    let mut tb = Vec::with_capacity(rounds);
    for r in 0..rounds {
        // Swap the order every round.
        let (x, y) = if r % 2 == 0 {
            let x = bench_backbone(a, data, 0, iters, batch)?.mean_us;
            (x, bench_backbone(b, data, 0, iters, batch)?.mean_us)
        } else {
            let y = bench_backbone(b, data, 0, iters, batch)?.mean_us;
            (bench_backbone(a, data, 0, iters, batch)?.mean_us, y)
        };
        ta.push(x);
        tb.push(y);
    }
    let a_wins = ta.iter().zip(&tb).filter(|(x, y)| x <= y).count();
    ta.sort_by(f64::total_cmp);
    tb.sort_by(f64::total_cmp);
    Ok(PairedComparison { a_us: ta[rounds / 2], b_us: tb[rounds / 2], rounds, a_wins })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub layer: String,
    /// `C × T × V` entering the layer.
    pub input: (usize, usize, usize),
    pub operator: String,
    pub out_channels: usize,
    pub params: usize,
    pub cumulative: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
}

impl ParamTable {
    pub fn total(&self) -> usize {
        self.rows.last().map_or(0, |r| r.cumulative)
    }

    pub fn row(&self, layer: &str) -> Option<&ParamRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }
}

impl fmt::Display for ParamTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:<12} {:<22} {:>6} {:>12}", "Layer", "Input", "Operator", "Out", "Cum. Params")?;
        for r in &self.rows {
            let input = format!("{}x{}x{}", r.input.0, r.input.1, r.input.2);
            writeln!(f, "{:<8} {:<12} {:<22} {:>6} {:>12}", r.layer, input, r.operator, r.out_channels, group_digits(r.cumulative))?;
        }
        Ok(())
    }
}

fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Backbone rows with running totals, then the prototype layer (`m · D`)
/// and the fully connected head (`m · K`).
pub fn report_params(model: &LexNetModel) -> ParamTable {
    let layers: Vec<LayerParams> = model.backbone.layer_params();
    let mut rows: Vec<ParamRow> = layers
        .iter()
        .enumerate()
        .map(|(i, l)| ParamRow {
            layer: if i == 0 { "stem".into() } else { format!("block{i}") },
            input: l.input_dims,
            operator: l.operator.clone(),
            out_channels: l.out_channels,
            params: l.params,
            cumulative: l.cumulative,
        })
        .collect();
    let (d, h, w) = model.latent_dims();
    let m = model.prototypes.len();
    let mut cum = model.backbone.param_count();
    let lp = crate::lproto::param_count_lproto(&model.prototypes);
    cum += lp;
    rows.push(ParamRow { layer: "lproto".into(), input: (d, h, w), operator: "LProto".into(), out_channels: m, params: lp, cumulative: cum });
    let fc = model.last.weight.len();
    cum += fc;
    rows.push(ParamRow { layer: "fc".into(), input: (m, 1, 1), operator: "FC".into(), out_channels: model.num_classes(), params: fc, cumulative: cum });
    ParamTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.5), 50.0);
        assert_eq!(nearest_rank(&v, 0.95), 95.0);
        assert_eq!(nearest_rank(&v, 0.99), 99.0);
        assert_eq!(nearest_rank(&[7.0], 0.99), 7.0);
    }

    #[test]
    fn digit_grouping() {
        assert_eq!(group_digits(88), "88");
        assert_eq!(group_digits(3088), "3,088");
        assert_eq!(group_digits(1_234_567), "1,234,567");
    }
}
