//! The assembled network: backbone → prototype layer → linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lproto::{self, CellMajor, LastLayer, ProtoScores, PrototypeSet};
use crate::tensor::ops::softmax_cross_entropy;
use crate::tensor::{Parameter, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "BackboneConfig::lexnet")]
    pub backbone: BackboneConfig,
    /// Prototype spatial size on the latent map; `(1, 1)` by default.
    #[serde(default = "default_patch")]
    pub proto_patch: (usize, usize),
    #[serde(default = "default_cap")]
    pub proto_cap_per_class: usize,
}

fn default_patch() -> (usize, usize) {
    (1, 1)
}

fn default_cap() -> usize {
    5
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::lexnet(), proto_patch: default_patch(), proto_cap_per_class: default_cap() }
    }
}

/// What a training step differentiates besides cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Objective {
    /// Accumulate head gradients too.
    pub head_grad: bool,
    /// Weight of the mean distance from each sample to its closest own-class prototype.
    pub cluster: f64,
    /// Weight of the (negated) distance to the closest other-class prototype.
    pub separation: f64,
}

impl Objective {
    /// Per-sample cost and its gradient on each prototype's minimum distance,
    /// already scaled by `inv_b`.
    fn distance_costs<T: Real>(&self, set: &PrototypeSet<T>, fwd: &ProtoScores<T>, label: usize, inv_b: T) -> (T, Option<Vec<T>>) {
        if self.cluster == 0.0 && self.separation == 0.0 {
            return (T::zero(), None);
        }
        let nearest = |own: bool| {
            set.iter()
                .enumerate()
                .filter(|(_, p)| (p.class_id == label) == own)
                .map(|(j, _)| (j, fwd.min_dist2[j]))
                .fold(None, |best: Option<(usize, T)>, (j, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((j, d)),
                })
        };
        let mut g = vec![T::zero(); set.len()];
        let mut cost = T::zero();
        if let (true, Some((j, d))) = (self.cluster != 0.0, nearest(true)) {
            cost = cost + T::of(self.cluster) * d;
            g[j] = g[j] + T::of(self.cluster) * inv_b;
        }
        if let (true, Some((j, d))) = (self.separation != 0.0, nearest(false)) {
            cost = cost - T::of(self.separation) * d;
            g[j] = g[j] - T::of(self.separation) * inv_b;
        }
        (cost, Some(g))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T = f32> {
    pub class: usize,
    pub logits: Vec<T>,
    pub protos: ProtoScores<T>,
}

#[derive(Clone, Debug)]
pub struct LexNetModel<T: Real = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub prototypes: PrototypeSet<T>,
    pub last: LastLayer<T>,
    pub labels: Vec<String>,
}

impl<T: Real> LexNetModel<T> {
    /// Fresh model: Kaiming-uniform backbone, one uniform prototype per class,
    /// head at the `1 / -0.5` pattern.
    pub fn new<R: Rng>(config: ModelConfig, labels: Vec<String>, rng: &mut R) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("at least one class label is required".into()));
        }
        let backbone = Backbone::new(config.backbone.clone(), rng)?;
        let prototypes = PrototypeSet::init_uniform(
            labels.len(),
            backbone.output_channels(),
            config.proto_patch,
            config.proto_cap_per_class,
            rng,
        )?;
        let last = LastLayer::init_for(&prototypes.class_ids(), labels.len());
        Ok(Self { config, backbone, prototypes, last, labels })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        backbone: Backbone<T>,
        prototypes: PrototypeSet<T>,
        last: LastLayer<T>,
        labels: Vec<String>,
    ) -> Result<Self> {
        if last.num_inputs() != prototypes.len() || last.num_classes() != labels.len() {
            return Err(Error::dim("model", "head does not match prototypes / labels"));
        }
        Ok(Self { config, backbone, prototypes, last, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.backbone.config().input_shape
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape();
        c * h * w
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let (_, h, w) = self.input_shape();
        (self.backbone.output_channels(), h, w)
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + lproto::param_count_lproto(&self.prototypes) + self.last.weight.len()
    }

    fn check_batch(&self, x: &[T]) -> Result<usize> {
        let n = self.input_len();
        if !x.len().is_multiple_of(n) {
            return Err(Error::dim("model", format!("{} values is not a whole number of {n}-value samples", x.len())));
        }
        Ok(x.len() / n)
    }

    /// Cell-major latent maps of a packed batch (inference mode).
    pub fn latents(&self, x: &[T], exec: Execution) -> Result<Vec<CellMajor<T>>> {
        let b = self.check_batch(x)?;
        let (d, h, w) = self.latent_dims();
        let lat = self.backbone.forward_infer(x, b, exec)?;
        Ok(exec.map_range(b, |s| CellMajor::from_channel_major(&lat[s * d * h * w..(s + 1) * d * h * w], d, h, w)))
    }

    /// Prediction for one packed sample (`[1, T, V]` values).
    pub fn predict(&self, x: &[T]) -> Result<Prediction<T>> {
        self.predict_batch(x, Execution::Sequential).map(|mut v| v.remove(0))
    }

    pub fn predict_batch(&self, x: &[T], exec: Execution) -> Result<Vec<Prediction<T>>> {
        let lat = self.latents(x, exec)?;
        exec.map(&lat, |_, cm| self.predict_latent(cm)).into_iter().collect()
    }

    pub fn predict_latent(&self, cm: &CellMajor<T>) -> Result<Prediction<T>> {
        let protos = lproto::score_cells(cm, &self.prototypes)?;
        let (logits, class) = lproto::classify(&protos.scores, &self.last)?;
        Ok(Prediction { class, logits, protos })
    }

    pub fn predict_tensor(&self, sample: &Tensor<T>) -> Result<Prediction<T>> {
        let (c, h, w) = self.input_shape();
        if sample.shape() != [c, h, w] {
            return Err(Error::dim("model", format!("sample {:?}, expected [{c}, {h}, {w}]", sample.shape())));
        }
        self.predict(sample.data())
    }

    /// Prototype scores of a packed batch in inference mode.
    pub fn scores(&self, x: &[T], exec: Execution) -> Result<Vec<ProtoScores<T>>> {
        let lat = self.latents(x, exec)?;
        exec.map(&lat, |_, cm| lproto::score_cells(cm, &self.prototypes)).into_iter().collect()
    }

    /// Training-mode forward and backward on a packed batch.
    ///
    /// Returns the mean cross-entropy. Accumulates gradients into backbone and
    /// prototype parameters, and into the head when `head_grad` is set.
    pub fn accumulate_gradients(&mut self, x: &[T], labels: &[usize], head_grad: bool, exec: Execution) -> Result<f64> {
        self.accumulate_gradients_with(x, labels, &Objective { head_grad, ..Objective::default() }, exec)
    }

    /// [`Self::accumulate_gradients`] with optional cluster and separation
    /// costs; returns the mean of cross-entropy plus those costs.
    pub fn accumulate_gradients_with(&mut self, x: &[T], labels: &[usize], obj: &Objective, exec: Execution) -> Result<f64> {
        let head_grad = obj.head_grad;
        let b = self.check_batch(x)?;
        if b != labels.len() {
            return Err(Error::dim("model", format!("{b} samples but {} labels", labels.len())));
        }
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        let (d, h, w) = self.latent_dims();
        let per = d * h * w;
        let (latent, cache) = self.backbone.forward_train(x, b, exec)?;
        let m = self.prototypes.len();
        let vlen = self.prototypes.vector_len();
        let inv_b = T::of(1.0 / b as f64);
        let (protos, last) = (&self.prototypes, &self.last);
        let parts = exec.map_range(b, |s| -> Result<_> {
            let cm = CellMajor::from_channel_major(&latent[s * per..(s + 1) * per], d, h, w);
            let fwd = lproto::score_cells(&cm, protos)?;
            let logits = last.logits(&fwd.scores)?;
            let (ce, mut gl) = softmax_cross_entropy(&logits, labels[s])?;
            gl.iter_mut().for_each(|g| *g = *g * inv_b);
            let (extra, g_dist) = obj.distance_costs(protos, &fwd, labels[s], inv_b);
            let loss = ce + extra;
            let wt = last.weight.values();
            let gs: Vec<T> = (0..m).map(|j| (0..gl.len()).map(|k| wt[k * m + j] * gl[k]).sum()).collect();
            let mut g_lat = vec![T::zero(); per];
            let mut g_pro = vec![vec![T::zero(); vlen]; m];
            lproto::lproto_backward_with_dist(&cm, protos, &fwd, &gs, g_dist.as_deref(), &mut g_lat, Some(&mut g_pro));
            let g_head = head_grad.then(|| {
                let mut g = vec![T::zero(); gl.len() * m];
                for (k, &glk) in gl.iter().enumerate() {
                    for j in 0..m {
                        g[k * m + j] = glk * fwd.scores[j];
                    }
                }
                g
            });
            Ok((loss, g_lat, g_pro, g_head))
        });
        let mut total = 0.0;
        let mut grad_latent = Vec::with_capacity(b * per);
        let mut g_protos = vec![vec![T::zero(); vlen]; m];
        let mut g_head = vec![T::zero(); if head_grad { self.last.weight.len() } else { 0 }];
        for part in parts {
            let (loss, gl, gp, gh) = part?;
            total += loss.to_f64().unwrap_or(f64::NAN);
            grad_latent.extend_from_slice(&gl);
            for (acc, g) in g_protos.iter_mut().zip(&gp) {
                crate::tensor::kernels::add_inplace(acc, g);
            }
            if let Some(gh) = gh {
                crate::tensor::kernels::add_inplace(&mut g_head, &gh);
            }
        }
        for (p, g) in self.prototypes.params_mut().zip(&g_protos) {
            crate::tensor::kernels::add_inplace(p.grad_mut(), g);
        }
        if head_grad {
            crate::tensor::kernels::add_inplace(self.last.weight.grad_mut(), &g_head);
        }
        self.backbone.backward(cache, grad_latent, exec);
        Ok(total / b as f64)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.backbone.params();
        v.extend(self.prototypes.params());
        v.push(&self.last.weight);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.backbone.params_mut();
        v.extend(self.prototypes.params_mut());
        v.push(&mut self.last.weight);
        v
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Adds a prototype of class `k` with its head column.
    pub fn add_prototype(&mut self, k: usize, vector: Vec<T>, provenance: Option<lproto::Provenance>) -> Result<usize> {
        let id = self.prototypes.push(k, vector, provenance)?;
        self.last.add_column(k);
        Ok(id)
    }

    /// Sets every batch norm's running statistics from the given samples at once.
    pub fn calibrate_batch_norm(&mut self, x: &[T], exec: Execution) -> Result<()> {
        let b = self.check_batch(x)?;
        for bn in self.backbone.batch_norms_mut() {
            bn.initialized = false;
        }
        // A training-mode pass over the whole set records its exact statistics
        // because uninitialized stats are overwritten rather than blended.
        self.backbone.record_statistics(x, b, exec)
    }

    pub fn cast<U: Real>(&self) -> LexNetModel<U> {
        LexNetModel {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            prototypes: self.prototypes.cast(),
            last: LastLayer { weight: self.last.weight.cast() },
            labels: self.labels.clone(),
        }
    }
}
