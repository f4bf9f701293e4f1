//! Explanations: by-design prototype regions, Grad-CAM and Monte-Carlo
//! Shapley attributions, region-faithfulness scoring and SVG rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::flowdata::{Dataset, MTS_LEN, MTS_VARS};
use crate::lproto::{self, CellMajor};
use crate::model::LexNetModel;
use crate::tensor::Tensor;

/// Cells of the input grid.
pub const CELLS: usize = MTS_LEN * MTS_VARS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "bydesign")]
    ByDesign,
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "shapley")]
    ShapleyMc,
    #[serde(rename = "random")]
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ByDesign => "bydesign",
            Method::GradCam => "gradcam",
            Method::ShapleyMc => "shapley",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bydesign" | "by-design" => Some(Method::ByDesign),
            "gradcam" | "grad-cam" => Some(Method::GradCam),
            "shapley" | "shapley_mc" | "shap" => Some(Method::ShapleyMc),
            "random" => Some(Method::Random),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub proto_id: usize,
    pub score: f32,
    /// `(packet, variable)`.
    pub location: (usize, usize),
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: String,
    pub predicted: usize,
    pub label: String,
    pub entries: Vec<ExplanationEntry>,
    /// Bar values: scaled sizes and direction signs per packet.
    pub sizes: Vec<f32>,
    pub dirs: Vec<f32>,
}

impl Explanation {
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|e| e.location).collect()
    }
}

fn bars(x: &[f32]) -> (Vec<f32>, Vec<f32>) {
    (x.iter().step_by(MTS_VARS).copied().collect(), x.iter().skip(1).step_by(MTS_VARS).copied().collect())
}

/// Prediction for one sample with the predicted class's prototypes, their
/// scores and argmax locations.
pub fn explain_prediction(model: &LexNetModel, x: &[f32], sample_id: &str) -> Result<Explanation> {
    if model.prototypes.iter().any(|p| p.provenance.is_none()) {
        return Err(Error::Untrained);
    }
    let pred = model.predict(x)?;
    let entries = model
        .prototypes
        .indices_of(pred.class)
        .into_iter()
        .map(|j| {
            let prov = model.prototypes.get(j).provenance.expect("checked above");
            ExplanationEntry {
                proto_id: model.prototypes.get(j).id,
                score: pred.protos.scores[j],
                location: pred.protos.locations[j],
                provenance: format!("training sample {} at packet {}, variable {}", prov.sample, prov.location.0, prov.location.1),
            }
        })
        .collect();
    let (sizes, dirs) = bars(x);
    Ok(Explanation { sample_id: sample_id.to_string(), predicted: pred.class, label: model.labels[pred.class].clone(), entries, sizes, dirs })
}

/// A per-cell attribution over the `20 × 2` input grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub method: Method,
    pub target: usize,
    pub values: Tensor<f64>,
}

impl AttributionMap {
    pub fn new(method: Method, target: usize, values: Vec<f64>) -> Result<Self> {
        let values = Tensor::from_vec(&[MTS_LEN, MTS_VARS], values)?;
        values.ensure_finite("attribution")?;
        Ok(Self { method, target, values })
    }

    pub fn value(&self, cell: (usize, usize)) -> f64 {
        self.values.data()[cell.0 * MTS_VARS + cell.1]
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }
}

/// By-design regions as a map: each used cell carries its best prototype score.
pub fn by_design_map(expl: &Explanation) -> Result<AttributionMap> {
    let mut v = vec![0.0f64; CELLS];
    for e in &expl.entries {
        let c = &mut v[e.location.0 * MTS_VARS + e.location.1];
        *c = c.max(e.score as f64);
    }
    AttributionMap::new(Method::ByDesign, expl.predicted, v)
}

pub type MapsAndGrad = (Vec<f64>, Vec<f64>, (usize, usize, usize));

/// Anything Grad-CAM can be run on: final feature maps and the gradient of a
/// class logit with respect to them.
pub trait FeatureGradient {
    /// `(maps, grad, (channels, h, w))`, both channel-major.
    fn maps_and_grad(&self, x: &[f32], target: usize) -> Result<MapsAndGrad>;
}

impl FeatureGradient for LexNetModel {
    fn maps_and_grad(&self, x: &[f32], target: usize) -> Result<MapsAndGrad> {
        if target >= self.num_classes() {
            return Err(Error::LabelOutOfRange { label: target, classes: self.num_classes() });
        }
        let (d, h, w) = self.latent_dims();
        let lat = self.backbone.forward_infer(x, 1, Execution::Sequential)?;
        let cm = CellMajor::from_channel_major(&lat, d, h, w);
        let fwd = lproto::score_cells(&cm, &self.prototypes)?;
        let m = self.last.num_inputs();
        let row = &self.last.weight.values()[target * m..(target + 1) * m];
        let mut g = vec![0.0f32; lat.len()];
        lproto::lproto_backward(&cm, &self.prototypes, &fwd, row, &mut g, None);
        Ok((lat.iter().map(|&v| v as f64).collect(), g.iter().map(|&v| v as f64).collect(), (d, h, w)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    pub map: AttributionMap,
    /// Spatial mean of the gradient per channel.
    pub weights: Vec<f64>,
    /// Set when the gradient vanished everywhere (the map is then all zero).
    pub zero_gradient: bool,
}

/// `relu(Σ_c w_c · A_c)` with `w_c` the spatial mean of `∂logit/∂A_c`. Maps
/// already have the input's spatial size, so there is no upsampling.
pub fn grad_cam_with(net: &impl FeatureGradient, x: &[f32], target: usize) -> Result<GradCam> {
    let (maps, grad, (c, h, w)) = net.maps_and_grad(x, target)?;
    if (h, w) != (MTS_LEN, MTS_VARS) {
        return Err(Error::dim("grad_cam", format!("feature maps are {h}x{w}")));
    }
    let hw = h * w;
    let weights: Vec<f64> = grad.chunks(hw).map(|g| g.iter().sum::<f64>() / hw as f64).collect();
    let zero_gradient = grad.iter().all(|&g| g == 0.0);
    let mut v = vec![0.0f64; hw];
    for ch in 0..c {
        for (o, &a) in v.iter_mut().zip(&maps[ch * hw..(ch + 1) * hw]) {
            *o += weights[ch] * a;
        }
    }
    for o in &mut v {
        *o = o.max(0.0);
    }
    if zero_gradient {
        log::warn!("grad-cam: zero gradient for class {target}");
    }
    Ok(GradCam { map: AttributionMap::new(Method::GradCam, target, v)?, weights, zero_gradient })
}

pub fn grad_cam(model: &LexNetModel, x: &[f32], target: usize) -> Result<AttributionMap> {
    grad_cam_with(model, x, target).map(|g| g.map)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyEstimate {
    pub values: Vec<f64>,
    /// Standard error of each value's mean over permutations.
    pub std_errors: Vec<f64>,
    /// Standard error of the per-permutation attribution total.
    pub total_std_error: f64,
    pub permutations: usize,
    pub f_x: f64,
    pub f_baseline: f64,
}

/// Permutation estimator: for each ordering, cells are revealed from
/// `baseline` to `x` one at a time and each cell is credited with the change
/// in `f`. `f` scores a packed batch of inputs.
pub fn shapley_from_permutations<F, I>(mut f: F, x: &[f32], baseline: &[f32], perms: I) -> Result<ShapleyEstimate>
where
    F: FnMut(&[f32]) -> Result<Vec<f64>>,
    I: IntoIterator<Item = Vec<usize>>,
{
    let n = x.len();
    if baseline.len() != n {
        return Err(Error::dim("shapley", format!("baseline has {} values, input {n}", baseline.len())));
    }
    let mut mean = vec![0.0f64; n];
    let mut m2 = vec![0.0f64; n];
    let (mut tmean, mut tm2) = (0.0f64, 0.0f64);
    let mut count = 0usize;
    let (mut f_x, mut f_baseline) = (0.0, 0.0);
    let mut states = Vec::with_capacity((n + 1) * n);
    for perm in perms {
        if perm.len() != n {
            return Err(Error::dim("shapley", format!("permutation of {} cells for {n} inputs", perm.len())));
        }
        states.clear();
        let mut cur = baseline.to_vec();
        states.extend_from_slice(&cur);
        for &i in &perm {
            cur[i] = x[i];
            states.extend_from_slice(&cur);
        }
        let fs = f(&states)?;
        count += 1;
        let c = count as f64;
        for (k, &i) in perm.iter().enumerate() {
            let delta = fs[k + 1] - fs[k];
            let d0 = delta - mean[i];
            mean[i] += d0 / c;
            m2[i] += d0 * (delta - mean[i]);
        }
        let total = fs[n] - fs[0];
        let d0 = total - tmean;
        tmean += d0 / c;
        tm2 += d0 * (total - tmean);
        (f_x, f_baseline) = (fs[n], fs[0]);
    }
    if count == 0 {
        return Err(Error::Config("at least one permutation is required".into()));
    }
    let se = |m2: f64| if count > 1 { (m2 / (count - 1) as f64 / count as f64).sqrt() } else { 0.0 };
    Ok(ShapleyEstimate {
        std_errors: m2.iter().map(|&v| se(v)).collect(),
        values: mean,
        total_std_error: se(tm2),
        permutations: count,
        f_x,
        f_baseline,
    })
}

/// Every ordering of `0..n`, lexicographic.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else { break };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
    out
}

/// Random stream for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Monte-Carlo Shapley values of the target logit over the 40 input cells,
/// against the zero grid.
pub fn shapley_mc(model: &LexNetModel, x: &[f32], target: usize, n_permutations: usize, rng: &mut ChaCha8Rng) -> Result<(AttributionMap, ShapleyEstimate)> {
    if n_permutations == 0 {
        return Err(Error::Config("n_permutations must be at least 1".into()));
    }
    if target >= model.num_classes() {
        return Err(Error::LabelOutOfRange { label: target, classes: model.num_classes() });
    }
    let perms: Vec<Vec<usize>> = (0..n_permutations)
        .map(|_| {
            let mut p: Vec<usize> = (0..x.len()).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    let baseline = vec![0.0f32; x.len()];
    let f = |states: &[f32]| -> Result<Vec<f64>> {
        Ok(model.predict_batch(states, Execution::Sequential)?.into_iter().map(|p| p.logits[target] as f64).collect())
    };
    let est = shapley_from_permutations(f, x, &baseline, perms)?;
    Ok((AttributionMap::new(Method::ShapleyMc, target, est.values.clone())?, est))
}

pub fn random_map(target: usize, rng: &mut ChaCha8Rng) -> Result<AttributionMap> {
    AttributionMap::new(Method::Random, target, (0..CELLS).map(|_| rng.random::<f64>()).collect())
}

/// The `k` highest-valued cells, ties in row-major order.
pub fn top_regions(map: &AttributionMap, k: usize) -> Result<Vec<(usize, usize)>> {
    let v = map.values.data();
    if k == 0 || k > v.len() {
        return Err(Error::Config(format!("top_regions k = {k} must lie in 1..={}", v.len())));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    Ok(idx[..k].iter().map(|&i| (i / MTS_VARS, i % MTS_VARS)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaithfulnessConfig {
    pub method: Method,
    pub seed: u64,
    /// Shapley permutations per sample.
    pub n_permutations: usize,
    /// Evaluate only the first this many samples.
    pub max_samples: Option<usize>,
}

impl FaithfulnessConfig {
    pub fn new(method: Method) -> Self {
        Self { method, seed: 0, n_permutations: 20, max_samples: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample: usize,
    pub predicted: usize,
    /// Prototypes of the predicted class (the top-protos cut).
    pub prototypes: usize,
    /// Distinct by-design regions.
    pub regions: usize,
    pub hits_top_protos: usize,
    pub hits_top_10: usize,
}

impl SampleOutcome {
    pub fn top_protos(&self) -> bool {
        self.hits_top_protos == self.regions
    }

    pub fn top_10(&self) -> bool {
        self.hits_top_10 == self.regions
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub method: Method,
    pub samples: usize,
    /// Share of samples whose every by-design region is in the method's top-m cells.
    pub top_protos_accuracy: f64,
    pub top_10_accuracy: f64,
    /// Share of all by-design regions recovered.
    pub top_protos_hit_rate: f64,
    pub top_10_hit_rate: f64,
    #[serde(skip)]
    pub outcomes: Vec<SampleOutcome>,
}

impl FaithfulnessReport {
    pub fn from_outcomes(method: Method, outcomes: Vec<SampleOutcome>) -> Self {
        let n = outcomes.len().max(1) as f64;
        let regions = outcomes.iter().map(|o| o.regions).sum::<usize>().max(1) as f64;
        Self {
            method,
            samples: outcomes.len(),
            top_protos_accuracy: outcomes.iter().filter(|o| o.top_protos()).count() as f64 / n,
            top_10_accuracy: outcomes.iter().filter(|o| o.top_10()).count() as f64 / n,
            top_protos_hit_rate: outcomes.iter().map(|o| o.hits_top_protos).sum::<usize>() as f64 / regions,
            top_10_hit_rate: outcomes.iter().map(|o| o.hits_top_10).sum::<usize>() as f64 / regions,
            outcomes,
        }
    }

    /// The same summary over the outcomes matching `keep`.
    pub fn restricted(&self, keep: impl Fn(&SampleOutcome) -> bool) -> Self {
        Self::from_outcomes(self.method, self.outcomes.iter().filter(|o| keep(o)).cloned().collect())
    }
}

fn attribution_for(model: &LexNetModel, x: &[f32], expl: &Explanation, cfg: &FaithfulnessConfig, index: usize) -> Result<AttributionMap> {
    let mut rng = sample_rng(cfg.seed, index as u64);
    match cfg.method {
        Method::ByDesign => by_design_map(expl),
        Method::GradCam => grad_cam(model, x, expl.predicted),
        Method::ShapleyMc => shapley_mc(model, x, expl.predicted, cfg.n_permutations, &mut rng).map(|r| r.0),
        Method::Random => random_map(expl.predicted, &mut rng),
    }
}

/// Compares a method's top cells with the by-design regions of each sample's
/// predicted class.
pub fn faithfulness_eval(model: &LexNetModel, data: &Dataset, cfg: &FaithfulnessConfig, exec: Execution) -> Result<FaithfulnessReport> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let n = cfg.max_samples.map_or(data.len(), |m| m.min(data.len()));
    let outcomes = exec.map_range(n, |i| -> Result<SampleOutcome> {
        let x = data.input(i);
        let expl = explain_prediction(model, x, &data.ids[i])?;
        let map = attribution_for(model, x, &expl, cfg, i)?;
        let mut regions = expl.cells();
        regions.sort();
        regions.dedup();
        let m = expl.entries.len();
        let top10 = top_regions(&map, 10)?;
        let top_m = top_regions(&map, m.clamp(1, CELLS))?;
        Ok(SampleOutcome {
            sample: i,
            predicted: expl.predicted,
            prototypes: m,
            regions: regions.len(),
            hits_top_protos: regions.iter().filter(|r| top_m.contains(r)).count(),
            hits_top_10: regions.iter().filter(|r| top10.contains(r)).count(),
        })
    });
    Ok(FaithfulnessReport::from_outcomes(cfg.method, outcomes.into_iter().collect::<Result<Vec<_>>>()?))
}

/// Machine-readable companion of a rendered figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub sample_id: String,
    pub method: Method,
    pub cells: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    pub svg: String,
    pub sidecar: Sidecar,
    pub warning: Option<String>,
}

pub fn render_explanation(expl: &Explanation) -> Figure {
    let cells: Vec<((usize, usize), f64)> = expl.entries.iter().map(|e| (e.location, e.score as f64)).collect();
    let title = format!("{}: predicted {}", expl.sample_id, expl.label);
    render(&expl.sizes, &expl.dirs, &expl.sample_id, Method::ByDesign, &cells, &title)
}

/// Highlights the top `k` cells with a positive value.
pub fn render_attribution(map: &AttributionMap, x: &[f32], sample_id: &str, k: usize) -> Result<Figure> {
    let cells: Vec<((usize, usize), f64)> =
        top_regions(map, k)?.into_iter().map(|c| (c, map.value(c))).filter(|&(_, v)| v > 0.0).collect();
    let (sizes, dirs) = bars(x);
    let title = format!("{sample_id}: {} attribution for class {}", map.method.name(), map.target);
    Ok(render(&sizes, &dirs, sample_id, map.method, &cells, &title))
}

const PANEL_W: f64 = 600.0;
const PANEL_H: f64 = 120.0;
const MARGIN: f64 = 30.0;

fn render(sizes: &[f32], dirs: &[f32], sample_id: &str, method: Method, cells: &[((usize, usize), f64)], title: &str) -> Figure {
    let n = sizes.len().max(1);
    let slot = PANEL_W / n as f64;
    let bar = slot * 0.7;
    let height = 2.0 * PANEL_H + 3.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
        PANEL_W + 2.0 * MARGIN
    );
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="18">{}</text>"#, escape(title));
    // Panel origins (top-left) for the size and direction variables.
    let top = [MARGIN + 5.0, 2.0 * MARGIN + PANEL_H + 5.0];
    for (v, (name, vals)) in [("size", sizes), ("direction", dirs)].into_iter().enumerate() {
        let y0 = top[v];
        let _ = writeln!(s, r##"<rect x="{MARGIN}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#999"/>"##);
        let _ = writeln!(s, r#"<text x="{MARGIN}" y="{}">{name}</text>"#, y0 - 3.0);
        let base = if v == 0 { y0 + PANEL_H } else { y0 + PANEL_H / 2.0 };
        let scale = if v == 0 { PANEL_H } else { PANEL_H / 2.0 };
        for (t, &val) in vals.iter().enumerate() {
            let x = MARGIN + t as f64 * slot + (slot - bar) / 2.0;
            let hgt = (val as f64).abs() * scale;
            let y = if val >= 0.0 { base - hgt } else { base };
            let _ = writeln!(s, r##"<rect x="{x:.1}" y="{y:.1}" width="{bar:.1}" height="{hgt:.1}" fill="#777"/>"##);
        }
    }
    for &((t, v), score) in cells {
        let x = MARGIN + t as f64 * slot;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{:.1}" width="{slot:.1}" height="{PANEL_H}" fill="none" stroke="#1f5fd6" stroke-width="2"><title>packet {t}, variable {v}: {score:.4}</title></rect>"##,
            top[v.min(1)]
        );
    }
    s.push_str("</svg>\n");
    let warning = cells.is_empty().then(|| {
        let w = format!("{sample_id}: no cell to highlight for {}", method.name());
        log::warn!("{w}");
        w
    });
    Figure {
        svg: s,
        sidecar: Sidecar {
            sample_id: sample_id.to_string(),
            method,
            cells: cells.iter().map(|c| c.0).collect(),
            scores: cells.iter().map(|c| c.1).collect(),
        },
        warning,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<sample>-<method>.svg` and `<sample>-<method>.jsonl` into `dir`.
pub fn write_figure(dir: &Path, fig: &Figure) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let stem: String = format!("{}-{}", fig.sidecar.sample_id, fig.sidecar.method.name())
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    let svg = dir.join(format!("{stem}.svg"));
    let side = dir.join(format!("{stem}.jsonl"));
    fs::write(&svg, &fig.svg)?;
    let mut line = serde_json::to_string(&fig.sidecar)?;
    line.push('\n');
    fs::write(&side, line)?;
    Ok((svg, side))
}
