//! Three-stage training: SGD of backbone and prototypes, projection of the
//! prototypes onto real training patches, kurtosis-driven prototype growth,
//! and a refit of the last layer on frozen similarity scores.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::flowdata::Dataset;
use crate::lproto::{CellMajor, Provenance};
use crate::model::{LexNetModel, ModelConfig, Objective};
use crate::tensor::ops::softmax_cross_entropy;
use crate::tensor::{sgd_step, ParamGroup, SgdConfig, WeightDecay};

/// Samples per inference chunk when scanning the training set.
const SCAN_CHUNK: usize = 512;
/// Upper bound on samples used to refresh batch norm statistics.
const BN_CALIBRATION_SAMPLES: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_epochs_outer: usize,
    pub n_sgd: usize,
    pub n_last: usize,
    pub warmup_epochs: usize,
    pub lr_backbone: f64,
    pub lr_proto: f64,
    pub lr_last: f64,
    pub proto_l2: f64,
    pub batch_size: usize,
    pub proto_cap_per_class: usize,
    /// Fraction of classes (the worst covered) eligible for a new prototype.
    pub growth_quantile: f64,
    pub momentum: f64,
    /// Optional cluster / separation costs; both off by default.
    pub cluster_cost: f64,
    pub separation_cost: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_epochs_outer: 10,
            n_sgd: 20,
            n_last: 5,
            warmup_epochs: 5,
            lr_backbone: 0.05,
            lr_proto: 0.05,
            lr_last: 0.05,
            proto_l2: 1e-3,
            batch_size: 64,
            proto_cap_per_class: 5,
            growth_quantile: 0.25,
            momentum: 0.9,
            cluster_cost: 0.0,
            separation_cost: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_epochs_outer == 0 {
            return bad("n_epochs_outer must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2 (batch norm)", self.batch_size));
        }
        if self.proto_cap_per_class == 0 {
            return bad("proto_cap_per_class must be at least 1".into());
        }
        if !(self.growth_quantile > 0.0 && self.growth_quantile < 1.0) {
            return bad(format!("growth_quantile {} must lie in (0, 1)", self.growth_quantile));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_proto", self.lr_proto),
            ("lr_last", self.lr_last),
            ("proto_l2", self.proto_l2),
            ("cluster_cost", self.cluster_cost),
            ("separation_cost", self.separation_cost),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        Ok(())
    }

    /// Backbone learning rate of global Stage-1 epoch `epoch` (0-based), ramped
    /// linearly over the warm-up epochs.
    pub fn backbone_lr(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.lr_backbone * (epoch + 1) as f64 / (self.warmup_epochs + 1) as f64
        } else {
            self.lr_backbone
        }
    }

    fn objective(&self, head_grad: bool) -> Objective {
        Objective { head_grad, cluster: self.cluster_cost, separation: self.separation_cost }
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    // A trailing singleton cannot be batch-normalized on its own.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// One Stage-1 epoch: mini-batch SGD on the backbone and prototype groups;
/// the last layer is frozen. `epoch` is the global Stage-1 epoch index that
/// drives the warm-up ramp.
///
/// Returns mean cross-entropy over the epoch plus `proto_l2 · Σ‖p‖²` at its end.
pub fn stage1_epoch(
    model: &mut LexNetModel,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    exec: Execution,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let obj = cfg.objective(false);
    let decay = WeightDecay::prototypes_only(cfg.proto_l2);
    let bb = SgdConfig { lr: cfg.backbone_lr(epoch), momentum: cfg.momentum };
    let pr = SgdConfig { lr: cfg.lr_proto, momentum: cfg.momentum };
    let mut total = 0.0;
    let mut x = Vec::with_capacity(cfg.batch_size * Dataset::SAMPLE_LEN);
    for batch in batches(data.len(), cfg.batch_size, rng) {
        x.clear();
        for &i in &batch {
            x.extend_from_slice(data.input(i));
        }
        let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let loss = model.accumulate_gradients_with(&x, &y, &obj, exec)?;
        total += loss * batch.len() as f64;
        sgd_step(model.backbone.params_mut(), ParamGroup::Backbone, bb, &decay)?;
        sgd_step(model.prototypes.params_mut(), ParamGroup::Prototype, pr, &decay)?;
    }
    Ok(total / data.len() as f64 + cfg.proto_l2 * model.prototypes.sum_sq())
}

/// Sets batch norm running statistics from (a strided subset of) the data.
pub fn refresh_statistics(model: &mut LexNetModel, data: &Dataset, exec: Execution) -> Result<()> {
    let n = data.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let step = n.div_ceil(BN_CALIBRATION_SAMPLES);
    let mut x = Vec::with_capacity(n.min(BN_CALIBRATION_SAMPLES) * Dataset::SAMPLE_LEN);
    for i in (0..n).step_by(step) {
        x.extend_from_slice(data.input(i));
    }
    model.calibrate_batch_norm(&x, exec)
}

/// Calls `f(first_index, latents)` over inference-mode latents of the data in
/// fixed-size chunks, in sample order.
fn scan_latents(
    model: &LexNetModel,
    data: &Dataset,
    exec: Execution,
    mut f: impl FnMut(usize, Vec<CellMajor<f32>>) -> Result<()>,
) -> Result<()> {
    for start in (0..data.len()).step_by(SCAN_CHUNK) {
        let end = (start + SCAN_CHUNK).min(data.len());
        let lat = model.latents(&data.inputs[start * Dataset::SAMPLE_LEN..end * Dataset::SAMPLE_LEN], exec)?;
        f(start, lat)?;
    }
    Ok(())
}

fn check_classes(model: &LexNetModel, data: &Dataset) -> Result<()> {
    let counts = data.class_counts(model.num_classes());
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(model.labels[k].clone()));
    }
    if let Some(&k) = data.labels.iter().find(|&&k| k >= model.num_classes()) {
        return Err(Error::LabelOutOfRange { label: k, classes: model.num_classes() });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEntry {
    pub proto_id: usize,
    pub class_id: usize,
    pub sample: usize,
    pub location: (usize, usize),
    /// Squared distance moved by the projection.
    pub distance: f64,
}

/// Closest patch `(d², sample, cell)` of each prototype among samples of its class.
type Best = Option<(f32, usize, usize)>;

/// Stage 2: replaces each prototype with its nearest same-class latent patch.
///
/// Ties go to the earliest sample, then the earliest row-major cell.
pub fn project_prototypes(model: &mut LexNetModel, data: &Dataset, exec: Execution) -> Result<Vec<ProjectionEntry>> {
    check_classes(model, data)?;
    let set = &model.prototypes;
    let patch = set.patch();
    let m = set.len();
    let by_class: Vec<Vec<usize>> = (0..model.num_classes()).map(|k| set.indices_of(k)).collect();
    let mut best: Vec<Best> = vec![None; m];
    let mut best_patch: Vec<Vec<f32>> = vec![Vec::new(); m];
    scan_latents(model, data, exec, |start, lat| {
        let local = exec.map(&lat, |i, cm| {
            let s = start + i;
            let (_, mw) = cm.map_dims(patch);
            by_class[data.labels[s]]
                .iter()
                .map(|&j| {
                    let d = cm.distances(set.get(j).vector(), patch);
                    let (cell, dist) = d
                        .iter()
                        .enumerate()
                        .fold((0, f32::INFINITY), |acc, (c, &v)| if v < acc.1 { (c, v) } else { acc });
                    (j, dist, cell, cm.patch_vector((cell / mw, cell % mw), patch))
                })
                .collect::<Vec<_>>()
        });
        for (i, per) in local.into_iter().enumerate() {
            for (j, dist, cell, pv) in per {
                if best[j].is_none_or(|(bd, _, _)| dist < bd) {
                    best[j] = Some((dist, start + i, cell));
                    best_patch[j] = pv;
                }
            }
        }
        Ok(())
    })?;
    let mw = model.latent_dims().2 + 1 - patch.1;
    let mut log = Vec::with_capacity(m);
    for (j, b) in best.into_iter().enumerate() {
        let (dist, sample, cell) = b.expect("every class has samples");
        let location = (cell / mw, cell % mw);
        let p = model.prototypes.get_mut(j);
        p.param.values_mut().copy_from_slice(&best_patch[j]);
        p.provenance = Some(Provenance { sample, location });
        log.push(ProjectionEntry { proto_id: p.id, class_id: p.class_id, sample, location, distance: dist as f64 });
    }
    Ok(log)
}

/// The least covered sample of a class and its closest latent patch.
#[derive(Clone, Debug, PartialEq)]
pub struct WorstCovered {
    pub sample: usize,
    pub location: (usize, usize),
    pub min_dist2: f64,
    pub patch: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    /// Mean over a class's samples of the minimum squared distance to the class's prototypes.
    pub avg_dists: Vec<f64>,
    pub worst: Vec<WorstCovered>,
}

/// Per-class coverage of the training set by the current prototypes.
pub fn compute_coverage(model: &LexNetModel, data: &Dataset, exec: Execution) -> Result<Coverage> {
    check_classes(model, data)?;
    let k = model.num_classes();
    let set = &model.prototypes;
    let patch = set.patch();
    let by_class: Vec<Vec<usize>> = (0..k).map(|c| set.indices_of(c)).collect();
    let mut sums = vec![0.0f64; k];
    let mut worst: Vec<Option<WorstCovered>> = vec![None; k];
    scan_latents(model, data, exec, |start, lat| {
        let local = exec.map(&lat, |i, cm| {
            let c = data.labels[start + i];
            let (_, mw) = cm.map_dims(patch);
            let mut best = (f32::INFINITY, 0usize);
            for &j in &by_class[c] {
                for (cell, &d) in cm.distances(set.get(j).vector(), patch).iter().enumerate() {
                    if d < best.0 {
                        best = (d, cell);
                    }
                }
            }
            let loc = (best.1 / mw, best.1 % mw);
            (best.0 as f64, loc, cm.patch_vector(loc, patch))
        });
        for (i, (d, loc, pv)) in local.into_iter().enumerate() {
            let s = start + i;
            let c = data.labels[s];
            sums[c] += d;
            if worst[c].as_ref().is_none_or(|w| d > w.min_dist2) {
                worst[c] = Some(WorstCovered { sample: s, location: loc, min_dist2: d, patch: pv });
            }
        }
        Ok(())
    })?;
    let counts = data.class_counts(k);
    Ok(Coverage {
        avg_dists: sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect(),
        worst: worst.into_iter().map(|w| w.expect("non-empty class")).collect(),
    })
}

pub fn compute_avg_dists(model: &LexNetModel, data: &Dataset, exec: Execution) -> Result<Vec<f64>> {
    compute_coverage(model, data, exec).map(|c| c.avg_dists)
}

/// Bias-corrected sample excess kurtosis `G2` (zero for a normal sample),
/// from single-pass central moment updates. `None` below four values or for
/// zero variance.
pub fn excess_kurtosis(xs: &[f64]) -> Option<f64> {
    let (mut n, mut mean, mut m2, mut m3, mut m4) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &x in xs {
        let n1 = n;
        n += 1.0;
        let delta = x - mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        mean += dn;
        m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * m2 - 4.0 * dn * m3;
        m3 += term1 * dn * (n - 2.0) - 3.0 * dn * m2;
        m2 += term1;
    }
    if xs.len() < 4 || m2 <= 0.0 {
        return None;
    }
    let g2 = n * m4 / (m2 * m2) - 3.0;
    Some(((n + 1.0) * g2 + 6.0) * (n - 1.0) / ((n - 2.0) * (n - 3.0)))
}

/// Linear-interpolation percentile, `q ∈ [0, 1]`.
pub fn percentile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrowthDecision {
    pub kurtosis: Option<f64>,
    /// avg_dist cut-off of the worst-covered quantile, when growth triggered.
    pub threshold: Option<f64>,
    pub classes: Vec<usize>,
}

/// Which classes gain a prototype: when the excess kurtosis of `avg_dists` is
/// positive, every class in the top `quantile` of avg_dists that is below the cap.
pub fn growth_classes(avg_dists: &[f64], counts: &[usize], cap: usize, quantile: f64) -> GrowthDecision {
    let kurtosis = excess_kurtosis(avg_dists);
    if !kurtosis.is_some_and(|k| k > 0.0) {
        return GrowthDecision { kurtosis, ..GrowthDecision::default() };
    }
    let threshold = percentile(avg_dists, 1.0 - quantile).expect("non-empty");
    let classes = (0..avg_dists.len()).filter(|&k| avg_dists[k] >= threshold && counts[k] < cap).collect();
    GrowthDecision { kurtosis, threshold: Some(threshold), classes }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrowthLog {
    pub decision: GrowthDecision,
    /// `(class, new prototype id)`.
    pub added: Vec<(usize, usize)>,
}

/// Adds one prototype to each selected class, initialized to the closest patch
/// of that class's worst-covered sample, with a fresh head column.
pub fn grow_prototypes(model: &mut LexNetModel, coverage: &Coverage, cfg: &TrainConfig) -> Result<GrowthLog> {
    let counts = model.prototypes.counts_per_class();
    let cap = cfg.proto_cap_per_class.min(model.prototypes.cap());
    let decision = growth_classes(&coverage.avg_dists, &counts, cap, cfg.growth_quantile);
    let mut added = Vec::with_capacity(decision.classes.len());
    for &k in &decision.classes {
        let w = &coverage.worst[k];
        let prov = Provenance { sample: w.sample, location: w.location };
        added.push((k, model.add_prototype(k, w.patch.clone(), Some(prov))?));
    }
    Ok(GrowthLog { decision, added })
}

/// Prototype scores of every sample (inference mode); Stage 3 input.
pub fn precompute_scores(model: &LexNetModel, data: &Dataset, exec: Execution) -> Result<Vec<Vec<f32>>> {
    Ok(model.scores(&data.inputs, exec)?.into_iter().map(|s| s.scores).collect())
}

/// One Stage-3 epoch: mini-batch SGD of the last layer on fixed scores.
/// Returns mean cross-entropy over the epoch (each batch before its update).
pub fn stage3_epoch(
    model: &mut LexNetModel,
    scores: &[Vec<f32>],
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if scores.len() != labels.len() {
        return Err(Error::dim("stage3", format!("{} score rows, {} labels", scores.len(), labels.len())));
    }
    let m = model.last.num_inputs();
    let k = model.last.num_classes();
    let sgd = SgdConfig { lr: cfg.lr_last, momentum: cfg.momentum };
    let mut total = 0.0;
    for batch in batches(scores.len(), cfg.batch_size, rng) {
        let inv_b = 1.0 / batch.len() as f32;
        let mut g = vec![0.0f32; k * m];
        for &i in &batch {
            let logits = model.last.logits(&scores[i])?;
            let (loss, gl) = softmax_cross_entropy(&logits, labels[i])?;
            total += loss as f64;
            for (c, &glc) in gl.iter().enumerate() {
                let row = &mut g[c * m..(c + 1) * m];
                for (r, &s) in row.iter_mut().zip(&scores[i]) {
                    *r += glc * s * inv_b;
                }
            }
        }
        model.last.weight.tensor.set_grad(g)?;
        sgd_step(std::iter::once(&mut model.last.weight), ParamGroup::LastLayer, sgd, &WeightDecay::default())?;
    }
    Ok(total / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub accuracy: f64,
    /// `None` for classes without samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub prototypes_mean: f64,
    pub prototypes_min: usize,
    pub prototypes_max: usize,
}

/// Accuracy from true and predicted labels.
pub fn metrics_from(truth: &[usize], predicted: &[usize], num_classes: usize, proto_counts: &[usize]) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    Ok(Metrics {
        samples: truth.len(),
        accuracy: correct as f64 / truth.len() as f64,
        per_class_accuracy,
        confusion,
        prototypes_mean: proto_counts.iter().sum::<usize>() as f64 / proto_counts.len().max(1) as f64,
        prototypes_min: proto_counts.iter().copied().min().unwrap_or(0),
        prototypes_max: proto_counts.iter().copied().max().unwrap_or(0),
    })
}

pub fn evaluate(model: &LexNetModel, data: &Dataset, exec: Execution) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let predicted: Vec<usize> = model.predict_batch(&data.inputs, exec)?.into_iter().map(|p| p.class).collect();
    metrics_from(&data.labels, &predicted, model.num_classes(), &model.prototypes.counts_per_class())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub stage1_losses: Vec<f64>,
    pub stage3_losses: Vec<f64>,
    pub projection_mean_distance: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub prototypes_per_class: Vec<usize>,
    pub kurtosis: Option<f64>,
    pub grown_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: Vec<IterationRecord>,
    /// On the test set when one was given, else on the training set.
    pub final_metrics: Metrics,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine<'a> {
    Iteration(&'a IterationRecord),
    Final(&'a Metrics),
}

impl TrainReport {
    /// One JSON object per line: each outer iteration, then the final metrics.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for it in &self.iterations {
            serde_json::to_writer(&mut w, &ReportLine::Iteration(it))?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &ReportLine::Final(&self.final_metrics))?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Trains a fresh model. Outer iteration: Stage 1 for `n_sgd` epochs, batch
/// norm statistics refresh, Stage 2 projection, growth check, Stage 3 for
/// `n_last` epochs. Deterministic for a fixed `cfg.seed`.
pub fn train(
    model_config: ModelConfig,
    labels: Vec<String>,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(LexNetModel, TrainReport)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model_config = ModelConfig { proto_cap_per_class: cfg.proto_cap_per_class, ..model_config };
    let mut model = LexNetModel::new(model_config, labels, &mut rng)?;
    check_classes(&model, train_set)?;
    let mut iterations = Vec::with_capacity(cfg.n_epochs_outer);
    let mut epoch = 0;
    for it in 0..cfg.n_epochs_outer {
        let mut stage1_losses = Vec::with_capacity(cfg.n_sgd);
        for _ in 0..cfg.n_sgd {
            stage1_losses.push(stage1_epoch(&mut model, train_set, cfg, epoch, &mut rng, exec)?);
            epoch += 1;
        }
        refresh_statistics(&mut model, train_set, exec)?;
        let proj = project_prototypes(&mut model, train_set, exec)?;
        let coverage = compute_coverage(&model, train_set, exec)?;
        let growth = grow_prototypes(&mut model, &coverage, cfg)?;
        let scores = precompute_scores(&model, train_set, exec)?;
        let stage3_losses =
            (0..cfg.n_last).map(|_| stage3_epoch(&mut model, &scores, &train_set.labels, cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
        let train_accuracy = evaluate(&model, train_set, exec)?.accuracy;
        let test_accuracy = test_set.filter(|t| !t.is_empty()).map(|t| evaluate(&model, t, exec)).transpose()?.map(|m| m.accuracy);
        log::info!(
            "iteration {it}: stage1 loss {:.4}, train acc {train_accuracy:.4}, test acc {test_accuracy:?}, prototypes {}",
            stage1_losses.last().copied().unwrap_or(f64::NAN),
            model.prototypes.len()
        );
        iterations.push(IterationRecord {
            iteration: it,
            stage1_losses,
            stage3_losses,
            projection_mean_distance: proj.iter().map(|p| p.distance).sum::<f64>() / proj.len() as f64,
            train_accuracy,
            test_accuracy,
            prototypes_per_class: model.prototypes.counts_per_class(),
            kurtosis: growth.decision.kurtosis,
            grown_classes: growth.decision.classes,
        });
    }
    let final_metrics = match test_set.filter(|t| !t.is_empty()) {
        Some(t) => evaluate(&model, t, exec)?,
        None => evaluate(&model, train_set, exec)?,
    };
    Ok((model, TrainReport { iterations, final_metrics }))
}
