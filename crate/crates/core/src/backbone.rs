//! Convolutional feature extractor: a Conv3x3+BN stem followed by residual
//! blocks, either LERes (LEXNet) or classic residual (comparison twin).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tensor::kernels::{self, ConvScratch, ConvShape};
use crate::tensor::ops::{BatchNorm, BnCache, BnMode};
use crate::tensor::{ParamGroup, Parameter, Real, Tensor};

/// Samples lowered into one GEMM per task. Fixed so that results and gradient
/// sums do not depend on the execution mode or thread count.
const CONV_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Leres,
    StandardRes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kind: BlockKind,
}

impl BlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, kind: BlockKind) -> Self {
        Self { in_channels, out_channels, kind }
    }

    pub fn expands(&self) -> bool {
        self.out_channels == 2 * self.in_channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// `(channels, packets, variables)` of one encoded flow.
    pub input_shape: (usize, usize, usize),
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub final_activation: Activation,
}

impl BackboneConfig {
    /// The LEXNet backbone: stem of 8 channels, LERes blocks 8→16→16→32→32, sigmoid output.
    pub fn lexnet() -> Self {
        Self::with_kind(BlockKind::Leres, Activation::Sigmoid)
    }

    /// Same widths with classic residual blocks and a ReLU output.
    pub fn resnet_twin() -> Self {
        Self::with_kind(BlockKind::StandardRes, Activation::Relu)
    }

    fn with_kind(kind: BlockKind, final_activation: Activation) -> Self {
        let blocks = [(8, 16), (16, 16), (16, 32), (32, 32)]
            .into_iter()
            .map(|(i, o)| BlockSpec::new(i, o, kind))
            .collect();
        Self { input_shape: (1, 20, 2), stem_channels: 8, blocks, final_activation }
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 || self.stem_channels == 0 {
            return Err(Error::Config(format!("degenerate input shape {:?} or stem", self.input_shape)));
        }
        let mut width = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != width {
                return Err(Error::Config(format!(
                    "block {i} expects {} input channels but receives {width}",
                    b.in_channels
                )));
            }
            if b.out_channels != b.in_channels && !b.expands() {
                return Err(Error::Config(format!(
                    "block {i}: output channels must equal or double input channels ({} -> {})",
                    b.in_channels, b.out_channels
                )));
            }
            width = b.out_channels;
        }
        Ok(())
    }
}

/// Convolution (no bias) followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn<T: Real = f32> {
    pub kernel: Parameter<T>,
    pub bn: BatchNorm<T>,
    c_in: usize,
    c_out: usize,
    k: usize,
}

struct ConvBnCache<T> {
    bn: Option<BnCache<T>>,
}

fn kaiming_uniform<T: Real, R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
}

impl<T: Real> ConvBn<T> {
    fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        let data = kaiming_uniform(c_out * c_in * k * k, c_in * k * k, rng);
        let kernel = Tensor::from_vec(&[c_out, c_in, k, k], data).expect("kernel shape");
        Self {
            kernel: Parameter::new(format!("{name}.conv"), ParamGroup::Backbone, kernel),
            bn: BatchNorm::new(&format!("{name}.bn"), c_out, ParamGroup::Backbone),
            c_in,
            c_out,
            k,
        }
    }

    fn param_count(&self) -> usize {
        self.kernel.len() + self.bn.param_count()
    }

    fn shape(&self, geo: Geo) -> ConvShape {
        ConvShape { c_in: self.c_in, c_out: self.c_out, h: geo.h, w: geo.w, k: self.k }
    }

    fn conv(&self, x: &[T], geo: Geo, exec: Execution) -> Vec<T> {
        let mut z = vec![T::zero(); geo.b * self.c_out * geo.hw()];
        let kern = self.kernel.values();
        let cs = self.shape(geo);
        let (xin, xout) = (self.c_in * geo.hw(), self.c_out * geo.hw());
        exec.for_each_chunk_mut(&mut z, CONV_CHUNK * xout, |i, out| {
            let mut scratch = ConvScratch::new();
            let xs = &x[i * CONV_CHUNK * xin..];
            for (s, o) in out.chunks_mut(xout).enumerate() {
                kernels::conv_forward(&xs[s * xin..(s + 1) * xin], cs, kern, o, &mut scratch);
            }
        });
        z
    }

    fn forward(&mut self, x: &[T], geo: Geo, mode: BnMode, exec: Execution) -> Result<(Vec<T>, ConvBnCache<T>)> {
        let mut z = self.conv(x, geo, exec);
        let co = self.c_out;
        let shape = [geo.b, co, geo.h, geo.w];
        let bn = match mode {
            BnMode::Train => Some(self.bn.forward_train_inplace(&mut z, &shape)?),
            BnMode::Infer => {
                self.bn.forward_infer_inplace(&mut z, &shape)?;
                None
            }
        };
        Ok((z, ConvBnCache { bn }))
    }

    /// `g` holds the gradient w.r.t. this unit's output; returns the input gradient.
    fn backward(&mut self, x: &[T], geo: Geo, cache: &ConvBnCache<T>, mut g: Vec<T>, exec: Execution) -> Vec<T> {
        let bn_cache = cache.bn.as_ref().expect("backward requires a training-mode forward");
        self.bn.backward_inplace(bn_cache, &mut g);
        let cs = self.shape(geo);
        let (xin, xout) = (self.c_in * geo.hw(), self.c_out * geo.hw());
        let kern = self.kernel.values();
        let parts = exec.map_range(geo.b.div_ceil(CONV_CHUNK), |i| {
            let s0 = i * CONV_CHUNK;
            let n = CONV_CHUNK.min(geo.b - s0);
            let mut gx = vec![T::zero(); n * xin];
            let mut gk = vec![T::zero(); kern.len()];
            let mut scratch = ConvScratch::new();
            for s in 0..n {
                let xs = &x[(s0 + s) * xin..][..xin];
                let go = &g[(s0 + s) * xout..][..xout];
                let gxs = &mut gx[s * xin..(s + 1) * xin];
                kernels::conv_backward(xs, cs, kern, go, Some(gxs), &mut gk, &mut scratch);
            }
            (gx, gk)
        });
        let mut gx_all = Vec::with_capacity(geo.b * xin);
        let gk_total = self.kernel.grad_mut();
        for (gx, gk) in parts {
            gx_all.extend_from_slice(&gx);
            kernels::add_inplace(gk_total, &gk);
        }
        gx_all
    }

    fn params_mut(&mut self) -> [&mut Parameter<T>; 3] {
        [&mut self.kernel, &mut self.bn.gamma, &mut self.bn.beta]
    }

    fn params(&self) -> [&Parameter<T>; 3] {
        [&self.kernel, &self.bn.gamma, &self.bn.beta]
    }

    fn bns_mut(&mut self) -> &mut BatchNorm<T> {
        &mut self.bn
    }
}

#[derive(Clone, Copy, Debug)]
struct Geo {
    b: usize,
    h: usize,
    w: usize,
}

impl Geo {
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Residual block variants. Equal-width blocks are the same two-conv identity
/// residual for both families; they differ only in the expanding case.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Block<T: Real = f32> {
    /// conv1 n→n, depthwise "ghost" maps of conv1's output, conv2 2n→2n,
    /// shortcut `concat(x, a)`.
    LeresExpand { n: usize, conv1: ConvBn<T>, ghost: Parameter<T>, conv2: ConvBn<T> },
    /// conv1 n→n, conv2 n→n, identity shortcut.
    Plain { n: usize, kind: BlockKind, conv1: ConvBn<T>, conv2: ConvBn<T> },
    /// conv1 n→2n, conv2 2n→2n, 1x1 conv + BN on the shortcut.
    StandardExpand { n: usize, conv1: ConvBn<T>, conv2: ConvBn<T>, shortcut: ConvBn<T> },
}

enum BlockCache<T> {
    LeresExpand { x: Vec<T>, a: Vec<T>, u: Vec<T>, c1: ConvBnCache<T>, c2: ConvBnCache<T>, y: Vec<T> },
    Plain { x: Vec<T>, a: Vec<T>, c1: ConvBnCache<T>, c2: ConvBnCache<T>, y: Vec<T> },
    StandardExpand { x: Vec<T>, a: Vec<T>, c1: ConvBnCache<T>, c2: ConvBnCache<T>, c3: ConvBnCache<T>, y: Vec<T> },
}

fn activate<T: Real>(x: &mut [T], act: Activation) {
    match act {
        Activation::Relu => kernels::relu_inplace(x),
        Activation::Sigmoid => kernels::sigmoid_inplace(x),
    }
}

fn activate_backward<T: Real>(out: &[T], g: &mut [T], act: Activation) {
    match act {
        Activation::Relu => kernels::relu_backward_inplace(out, g),
        Activation::Sigmoid => kernels::sigmoid_backward_inplace(out, g),
    }
}

/// Interleaves two per-sample channel groups: `[B][c1] ++ [B][c2]` → `[B][c1 + c2]`.
fn concat_batch<T: Real>(a: &[T], ca: usize, b: &[T], cb: usize, batch: usize, hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * (ca + cb) * hw);
    for s in 0..batch {
        out.extend_from_slice(&a[s * ca * hw..(s + 1) * ca * hw]);
        out.extend_from_slice(&b[s * cb * hw..(s + 1) * cb * hw]);
    }
    out
}

/// Inverse of [`concat_batch`].
fn split_batch<T: Real>(x: &[T], ca: usize, cb: usize, batch: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mut a = Vec::with_capacity(batch * ca * hw);
    let mut b = Vec::with_capacity(batch * cb * hw);
    for s in 0..batch {
        let base = s * (ca + cb) * hw;
        a.extend_from_slice(&x[base..base + ca * hw]);
        b.extend_from_slice(&x[base + ca * hw..base + (ca + cb) * hw]);
    }
    (a, b)
}

impl<T: Real> Block<T> {
    fn new<R: Rng>(name: &str, spec: &BlockSpec, rng: &mut R) -> Self {
        let n = spec.in_channels;
        match (spec.kind, spec.expands()) {
            (kind, false) => Block::Plain {
                n,
                kind,
                conv1: ConvBn::new(&format!("{name}.conv1"), n, n, 3, rng),
                conv2: ConvBn::new(&format!("{name}.conv2"), n, n, 3, rng),
            },
            (BlockKind::Leres, true) => {
                let conv1 = ConvBn::new(&format!("{name}.conv1"), n, n, 3, rng);
                let ghost = Tensor::from_vec(&[n, 3, 3], kaiming_uniform(n * 9, 9, rng)).expect("ghost shape");
                Block::LeresExpand {
                    n,
                    conv1,
                    ghost: Parameter::new(format!("{name}.ghost"), ParamGroup::Backbone, ghost),
                    conv2: ConvBn::new(&format!("{name}.conv2"), 2 * n, 2 * n, 3, rng),
                }
            }
            (BlockKind::StandardRes, true) => Block::StandardExpand {
                n,
                conv1: ConvBn::new(&format!("{name}.conv1"), n, 2 * n, 3, rng),
                conv2: ConvBn::new(&format!("{name}.conv2"), 2 * n, 2 * n, 3, rng),
                shortcut: ConvBn::new(&format!("{name}.shortcut"), n, 2 * n, 1, rng),
            },
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Block::LeresExpand { n, .. } | Block::Plain { n, .. } | Block::StandardExpand { n, .. } => *n,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Plain { n, .. } => *n,
            Block::LeresExpand { n, .. } | Block::StandardExpand { n, .. } => 2 * n,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        match self {
            Block::LeresExpand { conv1, ghost, conv2, .. } => {
                let mut v: Vec<&Parameter<T>> = conv1.params().into();
                v.push(ghost);
                v.extend(conv2.params());
                v
            }
            Block::Plain { conv1, conv2, .. } => conv1.params().into_iter().chain(conv2.params()).collect(),
            Block::StandardExpand { conv1, conv2, shortcut, .. } => {
                conv1.params().into_iter().chain(conv2.params()).chain(shortcut.params()).collect()
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Block::LeresExpand { conv1, ghost, conv2, .. } => {
                let mut v: Vec<&mut Parameter<T>> = conv1.params_mut().into();
                v.push(ghost);
                v.extend(conv2.params_mut());
                v
            }
            Block::Plain { conv1, conv2, .. } => conv1.params_mut().into_iter().chain(conv2.params_mut()).collect(),
            Block::StandardExpand { conv1, conv2, shortcut, .. } => conv1
                .params_mut()
                .into_iter()
                .chain(conv2.params_mut())
                .chain(shortcut.params_mut())
                .collect(),
        }
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        match self {
            Block::LeresExpand { conv1, conv2, .. } | Block::Plain { conv1, conv2, .. } => {
                vec![conv1.bns_mut(), conv2.bns_mut()]
            }
            Block::StandardExpand { conv1, conv2, shortcut, .. } => {
                vec![conv1.bns_mut(), conv2.bns_mut(), shortcut.bns_mut()]
            }
        }
    }

    fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        match self {
            Block::LeresExpand { conv1, conv2, .. } | Block::Plain { conv1, conv2, .. } => vec![&conv1.bn, &conv2.bn],
            Block::StandardExpand { conv1, conv2, shortcut, .. } => vec![&conv1.bn, &conv2.bn, &shortcut.bn],
        }
    }

    fn forward_impl(
        &mut self,
        x: Vec<T>,
        geo: Geo,
        mode: BnMode,
        act: Activation,
        exec: Execution,
        keep: bool,
    ) -> Result<(Vec<T>, Option<BlockCache<T>>)> {
        let hw = geo.hw();
        match self {
            Block::LeresExpand { n, conv1, ghost, conv2 } => {
                let n = *n;
                let (mut a, c1) = conv1.forward(&x, geo, mode, exec)?;
                kernels::relu_inplace(&mut a);
                let mut gh = vec![T::zero(); a.len()];
                let gk = ghost.values();
                exec.for_each_chunk_mut(&mut gh, n * hw, |s, out| {
                    kernels::depthwise_forward(&a[s * n * hw..(s + 1) * n * hw], n, geo.h, geo.w, gk, out);
                });
                let u = concat_batch(&a, n, &gh, n, geo.b, hw);
                drop(gh);
                let (mut y, c2) = conv2.forward(&u, geo, mode, exec)?;
                for s in 0..geo.b {
                    let base = s * 2 * n * hw;
                    kernels::add_inplace(&mut y[base..base + n * hw], &x[s * n * hw..(s + 1) * n * hw]);
                    kernels::add_inplace(&mut y[base + n * hw..base + 2 * n * hw], &a[s * n * hw..(s + 1) * n * hw]);
                }
                activate(&mut y, act);
                let cache = keep.then(|| BlockCache::LeresExpand { x, a, u, c1, c2, y: y.clone() });
                Ok((y, cache))
            }
            Block::Plain { conv1, conv2, .. } => {
                let (mut a, c1) = conv1.forward(&x, geo, mode, exec)?;
                kernels::relu_inplace(&mut a);
                let (mut y, c2) = conv2.forward(&a, geo, mode, exec)?;
                kernels::add_inplace(&mut y, &x);
                activate(&mut y, act);
                let cache = keep.then(|| BlockCache::Plain { x, a, c1, c2, y: y.clone() });
                Ok((y, cache))
            }
            Block::StandardExpand { conv1, conv2, shortcut, .. } => {
                let (mut a, c1) = conv1.forward(&x, geo, mode, exec)?;
                kernels::relu_inplace(&mut a);
                let (mut y, c2) = conv2.forward(&a, geo, mode, exec)?;
                let (sc, c3) = shortcut.forward(&x, geo, mode, exec)?;
                kernels::add_inplace(&mut y, &sc);
                activate(&mut y, act);
                let cache = keep.then(|| BlockCache::StandardExpand { x, a, c1, c2, c3, y: y.clone() });
                Ok((y, cache))
            }
        }
    }

    fn backward(&mut self, cache: BlockCache<T>, mut g: Vec<T>, geo: Geo, act: Activation, exec: Execution) -> Vec<T> {
        let hw = geo.hw();
        match (self, cache) {
            (Block::LeresExpand { n, conv1, ghost, conv2 }, BlockCache::LeresExpand { x, a, u, c1, c2, y }) => {
                let n = *n;
                activate_backward(&y, &mut g, act);
                let (gx_short, mut ga) = split_batch(&g, n, n, geo.b, hw);
                let gu = conv2.backward(&u, geo, &c2, g, exec);
                let (ga_direct, g_ghost) = split_batch(&gu, n, n, geo.b, hw);
                kernels::add_inplace(&mut ga, &ga_direct);
                let gk = ghost.values();
                let parts = exec.map_range(geo.b, |s| {
                    let mut gxs = vec![T::zero(); n * hw];
                    let mut gks = vec![T::zero(); n * 9];
                    kernels::depthwise_backward(
                        &a[s * n * hw..(s + 1) * n * hw],
                        n,
                        geo.h,
                        geo.w,
                        gk,
                        &g_ghost[s * n * hw..(s + 1) * n * hw],
                        Some(&mut gxs),
                        &mut gks,
                    );
                    (gxs, gks)
                });
                let gk_total = ghost.grad_mut();
                for (s, (gxs, gks)) in parts.into_iter().enumerate() {
                    kernels::add_inplace(&mut ga[s * n * hw..(s + 1) * n * hw], &gxs);
                    kernels::add_inplace(gk_total, &gks);
                }
                kernels::relu_backward_inplace(&a, &mut ga);
                let mut gx = conv1.backward(&x, geo, &c1, ga, exec);
                kernels::add_inplace(&mut gx, &gx_short);
                gx
            }
            (Block::Plain { conv1, conv2, .. }, BlockCache::Plain { x, a, c1, c2, y }) => {
                activate_backward(&y, &mut g, act);
                let mut ga = conv2.backward(&a, geo, &c2, g.clone(), exec);
                kernels::relu_backward_inplace(&a, &mut ga);
                let mut gx = conv1.backward(&x, geo, &c1, ga, exec);
                kernels::add_inplace(&mut gx, &g);
                gx
            }
            (
                Block::StandardExpand { conv1, conv2, shortcut, .. },
                BlockCache::StandardExpand { x, a, c1, c2, c3, y },
            ) => {
                activate_backward(&y, &mut g, act);
                let gsc = shortcut.backward(&x, geo, &c3, g.clone(), exec);
                let mut ga = conv2.backward(&a, geo, &c2, g, exec);
                kernels::relu_backward_inplace(&a, &mut ga);
                let mut gx = conv1.backward(&x, geo, &c1, ga, exec);
                kernels::add_inplace(&mut gx, &gsc);
                gx
            }
            _ => unreachable!("block cache does not match block variant"),
        }
    }

    /// Runs the block on a `[B, C, H, W]` batch with activation `act` after the Add.
    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode, act: Activation, exec: Execution) -> Result<Tensor<T>> {
        let (b, c, h, w) = match *x.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::dim("block", format!("expected [B, C, H, W], got {:?}", x.shape()))),
        };
        if c != self.in_channels() {
            return Err(Error::dim("block", format!("{c} channels into a block expecting {}", self.in_channels())));
        }
        let (y, _) = self.forward_impl(x.data().to_vec(), Geo { b, h, w }, mode, act, exec, false)?;
        Tensor::from_vec(&[b, self.out_channels(), h, w], y)
    }

    fn cast<U: Real>(&self) -> Block<U> {
        fn cb<T: Real, U: Real>(c: &ConvBn<T>) -> ConvBn<U> {
            ConvBn { kernel: c.kernel.cast(), bn: c.bn.cast(), c_in: c.c_in, c_out: c.c_out, k: c.k }
        }
        match self {
            Block::LeresExpand { n, conv1, ghost, conv2 } => {
                Block::LeresExpand { n: *n, conv1: cb(conv1), ghost: ghost.cast(), conv2: cb(conv2) }
            }
            Block::Plain { n, kind, conv1, conv2 } => Block::Plain { n: *n, kind: *kind, conv1: cb(conv1), conv2: cb(conv2) },
            Block::StandardExpand { n, conv1, conv2, shortcut } => {
                Block::StandardExpand { n: *n, conv1: cb(conv1), conv2: cb(conv2), shortcut: cb(shortcut) }
            }
        }
    }
}

/// Activations retained by a training-mode forward for the reverse pass.
pub struct BackboneCache<T> {
    input: Vec<T>,
    stem: ConvBnCache<T>,
    stem_out: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    geo: Geo,
}

/// One row of the cumulative parameter table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerParams {
    pub input_dims: (usize, usize, usize),
    pub operator: String,
    pub out_channels: usize,
    pub params: usize,
    pub cumulative: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone<T: Real = f32> {
    config: BackboneConfig,
    stem: ConvBn<T>,
    blocks: Vec<Block<T>>,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new("stem", config.input_shape.0, config.stem_channels, 3, rng);
        let blocks = config.blocks.iter().enumerate().map(|(i, s)| Block::new(&format!("block{i}"), s, rng)).collect();
        Ok(Self { config, stem, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn output_channels(&self) -> usize {
        self.config.output_channels()
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count() + self.blocks.iter().map(Block::param_count).sum::<usize>()
    }

    /// Per-layer parameter counts with running totals, stem first.
    pub fn layer_params(&self) -> Vec<LayerParams> {
        let (c, h, w) = self.config.input_shape;
        let mut rows = Vec::with_capacity(self.blocks.len() + 1);
        let mut cum = self.stem.param_count();
        rows.push(LayerParams {
            input_dims: (c, h, w),
            operator: "Conv3x3+BN".into(),
            out_channels: self.config.stem_channels,
            params: cum,
            cumulative: cum,
        });
        for (spec, block) in self.config.blocks.iter().zip(&self.blocks) {
            let p = block.param_count();
            cum += p;
            rows.push(LayerParams {
                input_dims: (spec.in_channels, h, w),
                operator: match spec.kind {
                    BlockKind::Leres => "LERes Block".into(),
                    BlockKind::StandardRes => "Res Block".into(),
                },
                out_channels: spec.out_channels,
                params: p,
                cumulative: cum,
            });
        }
        rows
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self.stem.params().into();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self.stem.params_mut().into();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        let mut v = vec![&self.stem.bn];
        for b in &self.blocks {
            v.extend(b.batch_norms());
        }
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = vec![&mut self.stem.bn];
        for b in &mut self.blocks {
            v.extend(b.batch_norms_mut());
        }
        v
    }

    fn stem_activation(&self) -> Activation {
        if self.blocks.is_empty() {
            self.config.final_activation
        } else {
            Activation::Relu
        }
    }

    fn block_activation(&self, i: usize) -> Activation {
        if i + 1 == self.blocks.len() {
            self.config.final_activation
        } else {
            Activation::Relu
        }
    }

    fn check_input(&self, x: &[T], batch: usize) -> Result<Geo> {
        let (c, h, w) = self.config.input_shape;
        if x.len() != batch * c * h * w {
            return Err(Error::dim(
                "backbone",
                format!("expected {batch} samples of {c}x{h}x{w}, got {} values", x.len()),
            ));
        }
        Ok(Geo { b: batch, h, w })
    }

    fn run(&mut self, x: &[T], batch: usize, mode: BnMode, exec: Execution, keep: bool) -> Result<(Vec<T>, Option<BackboneCache<T>>)> {
        let geo = self.check_input(x, batch)?;
        let stem_act = self.stem_activation();
        let (mut h, stem_cache) = self.stem.forward(x, geo, mode, exec)?;
        activate(&mut h, stem_act);
        let stem_out = if keep { h.clone() } else { Vec::new() };
        let mut caches = Vec::new();
        for i in 0..self.blocks.len() {
            let act = self.block_activation(i);
            let (y, cache) = self.blocks[i].forward_impl(h, geo, mode, act, exec, keep)?;
            caches.extend(cache);
            h = y;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backbone forward"));
        }
        let cache = keep.then(|| BackboneCache { input: x.to_vec(), stem: stem_cache, stem_out, blocks: caches, geo });
        Ok((h, cache))
    }

    /// Training-mode forward of `batch` samples packed as `[B, 1, T, V]`; keeps a cache.
    pub fn forward_train(&mut self, x: &[T], batch: usize, exec: Execution) -> Result<(Vec<T>, BackboneCache<T>)> {
        let (out, cache) = self.run(x, batch, BnMode::Train, exec, true)?;
        Ok((out, cache.expect("cache kept")))
    }

    /// Training-mode forward that only updates batch norm running statistics.
    pub fn record_statistics(&mut self, x: &[T], batch: usize, exec: Execution) -> Result<()> {
        self.run(x, batch, BnMode::Train, exec, false).map(|_| ())
    }

    /// Inference-mode forward of a batch. Each sample's output does not depend
    /// on the other samples in the batch.
    pub fn forward_infer(&self, x: &[T], batch: usize, exec: Execution) -> Result<Vec<T>> {
        // Inference never mutates: BN running stats are read-only in this mode.
        let geo = self.check_input(x, batch)?;
        let mut h = infer_convbn(&self.stem, x, geo, exec)?;
        activate(&mut h, self.stem_activation());
        for (i, block) in self.blocks.iter().enumerate() {
            h = infer_block(block, h, geo, self.block_activation(i), exec)?;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backbone forward"));
        }
        Ok(h)
    }

    /// Latent map `[D, T, V]` of one encoded sample `[1, T, V]`.
    pub fn forward_sample(&self, sample: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = self.config.input_shape;
        if sample.shape() != [c, h, w] {
            return Err(Error::dim("backbone", format!("sample shape {:?}, expected [{c}, {h}, {w}]", sample.shape())));
        }
        let out = self.forward_infer(sample.data(), 1, Execution::Sequential)?;
        Tensor::from_vec(&[self.output_channels(), h, w], out)
    }

    /// Reverse pass; accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: BackboneCache<T>, grad_out: Vec<T>, exec: Execution) -> Vec<T> {
        let BackboneCache { input, stem, stem_out, blocks, geo } = cache;
        let mut g = grad_out;
        for (i, bc) in blocks.into_iter().enumerate().rev() {
            let act = self.block_activation(i);
            g = self.blocks[i].backward(bc, g, geo, act, exec);
        }
        activate_backward(&stem_out, &mut g, self.stem_activation());
        self.stem.backward(&input, geo, &stem, g, exec)
    }

    /// Precision conversion; used to run gradient checks in `f64`.
    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            stem: ConvBn {
                kernel: self.stem.kernel.cast(),
                bn: self.stem.bn.cast(),
                c_in: self.stem.c_in,
                c_out: self.stem.c_out,
                k: self.stem.k,
            },
            blocks: self.blocks.iter().map(Block::cast).collect(),
        }
    }
}

fn infer_convbn<T: Real>(cb: &ConvBn<T>, x: &[T], geo: Geo, exec: Execution) -> Result<Vec<T>> {
    let mut z = cb.conv(x, geo, exec);
    cb.bn.forward_infer_inplace(&mut z, &[geo.b, cb.c_out, geo.h, geo.w])?;
    Ok(z)
}

fn infer_block<T: Real>(block: &Block<T>, x: Vec<T>, geo: Geo, act: Activation, exec: Execution) -> Result<Vec<T>> {
    let hw = geo.hw();
    match block {
        Block::LeresExpand { n, conv1, ghost, conv2 } => {
            let n = *n;
            // Build concat(a, ghost(a)) in place, one sample at a time.
            let mut u = vec![T::zero(); geo.b * 2 * n * hw];
            let gk = ghost.values();
            let cs = conv1.shape(geo);
            let bn_shape = [1, n, geo.h, geo.w];
            let status: Vec<Result<()>> = exec.map_chunks_mut(&mut u, CONV_CHUNK * 2 * n * hw, |i, chunk| {
                let mut scratch = ConvScratch::new();
                for (j, out) in chunk.chunks_mut(2 * n * hw).enumerate() {
                    let s = i * CONV_CHUNK + j;
                    let (a, ghosts) = out.split_at_mut(n * hw);
                    kernels::conv_forward(&x[s * n * hw..(s + 1) * n * hw], cs, conv1.kernel.values(), a, &mut scratch);
                    conv1.bn.forward_infer_inplace(a, &bn_shape)?;
                    kernels::relu_inplace(a);
                    kernels::depthwise_forward(a, n, geo.h, geo.w, gk, ghosts);
                }
                Ok(())
            });
            status.into_iter().collect::<Result<Vec<()>>>()?;
            let mut y = infer_convbn(conv2, &u, geo, exec)?;
            for s in 0..geo.b {
                let base = s * 2 * n * hw;
                kernels::add_inplace(&mut y[base..base + n * hw], &x[s * n * hw..(s + 1) * n * hw]);
                kernels::add_inplace(&mut y[base + n * hw..base + 2 * n * hw], &u[base..base + n * hw]);
            }
            activate(&mut y, act);
            Ok(y)
        }
        Block::Plain { conv1, conv2, .. } => {
            let mut a = infer_convbn(conv1, &x, geo, exec)?;
            kernels::relu_inplace(&mut a);
            let mut y = infer_convbn(conv2, &a, geo, exec)?;
            kernels::add_inplace(&mut y, &x);
            activate(&mut y, act);
            Ok(y)
        }
        Block::StandardExpand { conv1, conv2, shortcut, .. } => {
            let mut a = infer_convbn(conv1, &x, geo, exec)?;
            kernels::relu_inplace(&mut a);
            let mut y = infer_convbn(conv2, &a, geo, exec)?;
            let sc = infer_convbn(shortcut, &x, geo, exec)?;
            kernels::add_inplace(&mut y, &sc);
            activate(&mut y, act);
            Ok(y)
        }
    }
}
