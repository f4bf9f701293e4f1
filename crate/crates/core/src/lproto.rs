//! The prototype layer: class-specific latent prototypes, squared-L2 distance
//! maps, log-ratio similarities, global max pooling and the bias-free head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{ParamGroup, Parameter, Real, Tensor};

/// Denominator offset of the similarity activation.
pub const SIM_EPS: f64 = 1e-4;

/// `ln((d² + 1) / (d² + ε))`: positive, strictly decreasing, `ln(1/ε)` at zero.
pub fn similarity<T: Real>(d2: T) -> T {
    ((d2 + T::one()) / (d2 + T::of(SIM_EPS))).ln()
}

/// [`similarity`] with input validation.
pub fn similarity_checked(d2: f64) -> Result<f64> {
    if d2 < 0.0 || d2.is_nan() {
        return Err(Error::NegativeDistance(d2));
    }
    Ok(similarity(d2))
}

/// Derivative of [`similarity`] with respect to `d²`.
pub fn similarity_grad<T: Real>(d2: T) -> T {
    T::one() / (d2 + T::one()) - T::one() / (d2 + T::of(SIM_EPS))
}

/// Where a prototype was last projected: a training sample and latent cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample: usize,
    pub location: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Prototype<T: Real = f32> {
    pub id: usize,
    pub class_id: usize,
    pub param: Parameter<T>,
    pub provenance: Option<Provenance>,
}

impl<T: Real> Prototype<T> {
    pub fn vector(&self) -> &[T] {
        self.param.values()
    }
}

/// All prototypes in head-column order, plus the per-class cap.
#[derive(Clone, Debug)]
pub struct PrototypeSet<T: Real = f32> {
    protos: Vec<Prototype<T>>,
    num_classes: usize,
    depth: usize,
    patch: (usize, usize),
    cap: usize,
    next_id: usize,
}

impl<T: Real> PrototypeSet<T> {
    /// One prototype per class drawn from `Uniform([0, 1])`.
    pub fn init_uniform<R: Rng>(num_classes: usize, depth: usize, patch: (usize, usize), cap: usize, rng: &mut R) -> Result<Self> {
        if num_classes == 0 || depth == 0 || patch.0 == 0 || patch.1 == 0 || cap == 0 {
            return Err(Error::Config("prototype set needs classes, depth, patch size and cap >= 1".into()));
        }
        let mut set = Self { protos: Vec::new(), num_classes, depth, patch, cap, next_id: 0 };
        for k in 0..num_classes {
            let v: Vec<T> = (0..set.vector_len()).map(|_| T::of(rng.random::<f64>())).collect();
            set.push(k, v, None)?;
        }
        Ok(set)
    }

    /// Builds a set from explicit vectors (`(class, vector)` in column order).
    pub fn from_vectors(num_classes: usize, depth: usize, cap: usize, vectors: Vec<(usize, Vec<T>)>) -> Result<Self> {
        let mut set = Self { protos: Vec::new(), num_classes, depth, patch: (1, 1), cap, next_id: 0 };
        for (k, v) in vectors {
            set.push(k, v, None)?;
        }
        set.check_every_class_covered()?;
        Ok(set)
    }

    pub(crate) fn restore(num_classes: usize, depth: usize, patch: (usize, usize), cap: usize, protos: Vec<Prototype<T>>) -> Result<Self> {
        let next_id = protos.iter().map(|p| p.id + 1).max().unwrap_or(0);
        let set = Self { protos, num_classes, depth, patch, cap, next_id };
        set.check_every_class_covered()?;
        Ok(set)
    }

    fn check_every_class_covered(&self) -> Result<()> {
        for k in 0..self.num_classes {
            if self.count_for(k) == 0 {
                return Err(Error::Config(format!("class {k} has no prototype")));
            }
        }
        Ok(())
    }

    /// Appends a prototype for class `k`; returns its id.
    pub fn push(&mut self, k: usize, vector: Vec<T>, provenance: Option<Provenance>) -> Result<usize> {
        if k >= self.num_classes {
            return Err(Error::LabelOutOfRange { label: k, classes: self.num_classes });
        }
        if vector.len() != self.vector_len() {
            return Err(Error::dim("prototype", format!("vector of {} values, expected {}", vector.len(), self.vector_len())));
        }
        if self.count_for(k) >= self.cap {
            return Err(Error::Config(format!("class {k} already has {} prototypes (cap)", self.cap)));
        }
        let id = self.next_id;
        self.next_id += 1;
        let (ph, pw) = self.patch;
        let t = Tensor::from_vec(&[self.depth, ph, pw], vector)?;
        self.protos.push(Prototype {
            id,
            class_id: k,
            param: Parameter::new(format!("proto{id}"), ParamGroup::Prototype, t),
            provenance,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn patch(&self) -> (usize, usize) {
        self.patch
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn vector_len(&self) -> usize {
        self.depth * self.patch.0 * self.patch.1
    }

    pub fn get(&self, j: usize) -> &Prototype<T> {
        &self.protos[j]
    }

    pub fn get_mut(&mut self, j: usize) -> &mut Prototype<T> {
        &mut self.protos[j]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prototype<T>> {
        self.protos.iter()
    }

    pub fn count_for(&self, k: usize) -> usize {
        self.protos.iter().filter(|p| p.class_id == k).count()
    }

    pub fn counts_per_class(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for p in &self.protos {
            c[p.class_id] += 1;
        }
        c
    }

    /// Column indices of class `k`'s prototypes.
    pub fn indices_of(&self, k: usize) -> Vec<usize> {
        self.protos.iter().enumerate().filter(|(_, p)| p.class_id == k).map(|(j, _)| j).collect()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.protos.iter().map(|p| p.class_id).collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.protos.iter_mut().map(|p| &mut p.param)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.protos.iter().map(|p| &p.param)
    }

    /// Total squared norm of all prototype vectors.
    pub fn sum_sq(&self) -> f64 {
        self.protos.iter().map(|p| p.param.tensor.sum_sq()).sum()
    }

    pub fn cast<U: Real>(&self) -> PrototypeSet<U> {
        PrototypeSet {
            protos: self
                .protos
                .iter()
                .map(|p| Prototype { id: p.id, class_id: p.class_id, param: p.param.cast(), provenance: p.provenance })
                .collect(),
            num_classes: self.num_classes,
            depth: self.depth,
            patch: self.patch,
            cap: self.cap,
            next_id: self.next_id,
        }
    }
}

/// Latent map stored cell-major (`[T][V][D]`) for contiguous patch access.
#[derive(Clone, Debug)]
pub struct CellMajor<T> {
    pub data: Vec<T>,
    pub depth: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Real> CellMajor<T> {
    /// Transposes a channel-major `[D][H][W]` latent map.
    pub fn from_channel_major(latent: &[T], depth: usize, h: usize, w: usize) -> CellMajor<T> {
        let hw = h * w;
        let mut data = vec![T::zero(); latent.len()];
        for d in 0..depth {
            for cell in 0..hw {
                data[cell * depth + d] = latent[d * hw + cell];
            }
        }
        CellMajor { data, depth, h, w }
    }

    pub fn patch_vector(&self, loc: (usize, usize), patch: (usize, usize)) -> Vec<T> {
        let (ph, pw) = patch;
        let mut v = vec![T::zero(); self.depth * ph * pw];
        for dy in 0..ph {
            for dx in 0..pw {
                let cell = (loc.0 + dy) * self.w + loc.1 + dx;
                for d in 0..self.depth {
                    v[(d * ph + dy) * pw + dx] = self.data[cell * self.depth + d];
                }
            }
        }
        v
    }

    /// Squared distance between prototype vector `p` (`[D][ph][pw]`) and the patch at `loc`.
    pub fn dist2(&self, p: &[T], loc: (usize, usize), patch: (usize, usize)) -> T {
        let (ph, pw) = patch;
        let mut acc = T::zero();
        if ph == 1 && pw == 1 {
            let z = &self.data[(loc.0 * self.w + loc.1) * self.depth..][..self.depth];
            for (&a, &b) in z.iter().zip(p) {
                let d = a - b;
                acc = acc + d * d;
            }
            return acc;
        }
        for dy in 0..ph {
            for dx in 0..pw {
                let cell = (loc.0 + dy) * self.w + loc.1 + dx;
                for d in 0..self.depth {
                    let diff = self.data[cell * self.depth + d] - p[(d * ph + dy) * pw + dx];
                    acc = acc + diff * diff;
                }
            }
        }
        acc
    }

    pub fn map_dims(&self, patch: (usize, usize)) -> (usize, usize) {
        (self.h + 1 - patch.0, self.w + 1 - patch.1)
    }

    /// All squared distances, row-major over valid patch positions.
    pub fn distances(&self, p: &[T], patch: (usize, usize)) -> Vec<T> {
        let (mh, mw) = self.map_dims(patch);
        let mut out = Vec::with_capacity(mh * mw);
        for t in 0..mh {
            for v in 0..mw {
                out.push(self.dist2(p, (t, v), patch));
            }
        }
        out
    }
}

fn check_latent<T: Real>(latent: &Tensor<T>, set: &PrototypeSet<T>) -> Result<(usize, usize)> {
    match *latent.shape() {
        [d, h, w] if d == set.depth() && h >= set.patch().0 && w >= set.patch().1 => Ok((h, w)),
        _ => Err(Error::dim(
            "lproto",
            format!("latent {:?} vs prototype depth {} patch {:?}", latent.shape(), set.depth(), set.patch()),
        )),
    }
}

/// Squared L2 distances between `proto` and every patch of `latent` (`[D, T, V]`).
pub fn distance_map<T: Real>(latent: &Tensor<T>, set: &PrototypeSet<T>, proto: usize) -> Result<Tensor<T>> {
    let (h, w) = check_latent(latent, set)?;
    let cm = CellMajor::from_channel_major(latent.data(), set.depth(), h, w);
    let (mh, mw) = cm.map_dims(set.patch());
    Tensor::from_vec(&[mh, mw], cm.distances(set.get(proto).vector(), set.patch()))
}

pub fn similarity_map<T: Real>(dist: &Tensor<T>) -> Result<Tensor<T>> {
    if dist.data().iter().any(|&d| d < T::zero()) {
        let bad = dist.data().iter().find(|&&d| d < T::zero()).copied().unwrap_or_default();
        return Err(Error::NegativeDistance(bad.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(dist.map(similarity))
}

/// Max-pooled prototype activations for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoScores<T> {
    pub scores: Vec<T>,
    /// Argmax location of each similarity map, `(packet, variable)`.
    pub locations: Vec<(usize, usize)>,
    /// Squared distance at that location.
    pub min_dist2: Vec<T>,
}

/// Scores every prototype against a cell-major latent map.
pub fn score_cells<T: Real>(cm: &CellMajor<T>, set: &PrototypeSet<T>) -> Result<ProtoScores<T>> {
    if set.is_empty() {
        return Err(Error::Empty("prototype set"));
    }
    let patch = set.patch();
    let (_, mw) = cm.map_dims(patch);
    let m = set.len();
    let mut out = ProtoScores { scores: Vec::with_capacity(m), locations: Vec::with_capacity(m), min_dist2: Vec::with_capacity(m) };
    let mut sims = Vec::new();
    for p in set.iter() {
        let d = cm.distances(p.vector(), patch);
        sims.clear();
        sims.extend(d.iter().map(|&x| similarity(x)));
        let (s, i) = kernels::argmax(&sims).ok_or(Error::Empty("similarity map"))?;
        out.scores.push(s);
        out.locations.push((i / mw, i % mw));
        out.min_dist2.push(d[i]);
    }
    Ok(out)
}

/// Similarity scores and argmax locations of all prototypes for one latent map.
pub fn lproto_forward<T: Real>(latent: &Tensor<T>, set: &PrototypeSet<T>) -> Result<ProtoScores<T>> {
    let (h, w) = check_latent(latent, set)?;
    let cm = CellMajor::from_channel_major(latent.data(), set.depth(), h, w);
    score_cells(&cm, set)
}

/// Reverse pass of [`lproto_forward`] for one sample.
///
/// Adds into `grad_latent` (channel-major, same layout as the latent) and, when
/// `grad_protos` is given, into one buffer per prototype.
pub fn lproto_backward<T: Real>(
    cm: &CellMajor<T>,
    set: &PrototypeSet<T>,
    fwd: &ProtoScores<T>,
    grad_scores: &[T],
    grad_latent: &mut [T],
    grad_protos: Option<&mut [Vec<T>]>,
) {
    lproto_backward_with_dist(cm, set, fwd, grad_scores, None, grad_latent, grad_protos)
}

/// [`lproto_backward`] with an extra gradient on each prototype's minimum
/// squared distance (`ProtoScores::min_dist2`).
pub fn lproto_backward_with_dist<T: Real>(
    cm: &CellMajor<T>,
    set: &PrototypeSet<T>,
    fwd: &ProtoScores<T>,
    grad_scores: &[T],
    grad_dist: Option<&[T]>,
    grad_latent: &mut [T],
    mut grad_protos: Option<&mut [Vec<T>]>,
) {
    let (ph, pw) = set.patch();
    let depth = set.depth();
    let hw = cm.h * cm.w;
    let two = T::of(2.0);
    for (j, p) in set.iter().enumerate() {
        let gd_extra = grad_dist.map_or(T::zero(), |g| g[j]);
        let g = grad_scores[j];
        if g == T::zero() && gd_extra == T::zero() {
            continue;
        }
        let coef = (g * similarity_grad(fwd.min_dist2[j]) + gd_extra) * two;
        let (t0, v0) = fwd.locations[j];
        let pv = p.vector();
        for dy in 0..ph {
            for dx in 0..pw {
                let cell = (t0 + dy) * cm.w + v0 + dx;
                for d in 0..depth {
                    let pi = (d * ph + dy) * pw + dx;
                    let diff = cm.data[cell * depth + d] - pv[pi];
                    let gd = coef * diff;
                    grad_latent[d * hw + cell] = grad_latent[d * hw + cell] + gd;
                    if let Some(gp) = grad_protos.as_deref_mut() {
                        gp[j][pi] = gp[j][pi] - gd;
                    }
                }
            }
        }
    }
}

/// Bias-free fully connected head over prototype scores.
#[derive(Clone, Debug)]
pub struct LastLayer<T: Real = f32> {
    pub weight: Parameter<T>,
}

impl<T: Real> LastLayer<T> {
    /// `w[k][j] = 1` when prototype `j` belongs to class `k`, `-0.5` otherwise.
    pub fn init_for(class_of: &[usize], num_classes: usize) -> Self {
        let m = class_of.len();
        let mut w = vec![T::zero(); num_classes * m];
        for k in 0..num_classes {
            for (j, &c) in class_of.iter().enumerate() {
                w[k * m + j] = if c == k { T::one() } else { T::of(-0.5) };
            }
        }
        Self { weight: Parameter::new("last", ParamGroup::LastLayer, Tensor::from_vec(&[num_classes, m], w).expect("head shape")) }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn num_inputs(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    /// Appends a column for a new prototype of `class`, initialized like [`init_for`](Self::init_for).
    pub fn add_column(&mut self, class: usize) {
        let (k, m) = (self.num_classes(), self.num_inputs());
        let old = self.weight.values();
        let mut w = Vec::with_capacity(k * (m + 1));
        for r in 0..k {
            w.extend_from_slice(&old[r * m..(r + 1) * m]);
            w.push(if r == class { T::one() } else { T::of(-0.5) });
        }
        self.weight.tensor = Tensor::from_vec(&[k, m + 1], w).expect("head shape");
        self.weight.velocity = None;
    }

    pub fn logits(&self, scores: &[T]) -> Result<Vec<T>> {
        crate::tensor::ops::linear(scores, &self.weight.tensor)
    }
}

/// Lowest index among maximal entries.
pub fn argmax_class<T: Real>(logits: &[T]) -> usize {
    kernels::argmax(logits).map_or(0, |(_, i)| i)
}

/// Logits and predicted class (ties go to the lowest class id).
pub fn classify<T: Real>(scores: &[T], last: &LastLayer<T>) -> Result<(Vec<T>, usize)> {
    let logits = last.logits(scores)?;
    let k = argmax_class(&logits);
    Ok((logits, k))
}

/// Trainable values in the prototype layer: `m · D` for `(1, 1)` prototypes.
pub fn param_count_lproto<T: Real>(set: &PrototypeSet<T>) -> usize {
    set.len() * set.vector_len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_closed_forms() {
        assert!((similarity(0.0f64) - 10_000f64.ln()).abs() < 1e-12);
        assert!((similarity(0.0f64) - 9.2103).abs() < 1e-4);
        assert!((similarity(1.0f64) - (2.0f64 / 1.0001).ln()).abs() < 1e-12);
        assert!((similarity(1.0f64) - 0.6930).abs() < 1e-4);
        assert!(similarity(1e12f64) < 1e-11 && similarity(1e12f64) > 0.0);
        assert!(similarity_checked(-1.0).is_err());
    }

    #[test]
    fn head_init_pattern() {
        let last = LastLayer::<f32>::init_for(&[0, 1, 1], 2);
        assert_eq!(last.weight.values(), &[1.0, -0.5, -0.5, -0.5, 1.0, 1.0]);
        let mut last = last;
        last.add_column(0);
        assert_eq!(last.weight.values(), &[1.0, -0.5, -0.5, 1.0, -0.5, 1.0, 1.0, -0.5]);
    }

    #[test]
    fn cap_enforced() {
        let mut set = PrototypeSet::<f32>::from_vectors(1, 2, 2, vec![(0, vec![0.0, 0.0])]).unwrap();
        set.push(0, vec![1.0, 1.0], None).unwrap();
        assert!(set.push(0, vec![1.0, 1.0], None).is_err());
        assert_eq!(set.counts_per_class(), vec![2]);
    }
}
