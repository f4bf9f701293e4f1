//! Slice-level forward/backward kernels.
//!
//! Layouts are channel-major: a single sample is `[C][H][W]` flattened, a batch
//! is `[B][C][H][W]`. All convolutions are stride 1 with "same" zero padding.

use std::cell::RefCell;
use std::rc::Rc;

use super::Real;

/// For each tap `t` and output cell `p`, the input cell read by the
/// receptive field, or `h * w` where it falls in the zero padding.
#[derive(Clone, Debug, PartialEq, Eq)]
struct TapTable {
    dims: (usize, usize, usize),
    idx: Vec<u32>,
}

impl TapTable {
    fn new(h: usize, w: usize, k: usize) -> Self {
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut idx = Vec::with_capacity(k * k * hw);
        for dy in 0..k as isize {
            for dx in 0..k as isize {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (sy, sx) = (y + dy - pad, x + dx - pad);
                        let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                        idx.push(if inside { (sy as usize * w + sx as usize) as u32 } else { hw as u32 });
                    }
                }
            }
        }
        Self { dims: (h, w, k), idx }
    }

    /// Shared table for these dimensions, built once per thread.
    fn get(h: usize, w: usize, k: usize) -> Rc<TapTable> {
        thread_local! {
            static TABLES: RefCell<Vec<Rc<TapTable>>> = const { RefCell::new(Vec::new()) };
        }
        TABLES.with(|t| {
            let mut t = t.borrow_mut();
            if let Some(found) = t.iter().find(|x| x.dims == (h, w, k)) {
                return Rc::clone(found);
            }
            let table = Rc::new(TapTable::new(h, w, k));
            t.push(Rc::clone(&table));
            table
        })
    }

    fn hw(&self) -> usize {
        self.dims.0 * self.dims.1
    }

    /// Appends the receptive fields of `x` to `col`.
    fn im2col_extend<T: Real>(&self, x: &[T], c: usize, plane: &mut Vec<T>, col: &mut Vec<T>) {
        let hw = self.hw();
        plane.clear();
        plane.resize(hw + 1, T::zero());
        for ch in 0..c {
            plane[..hw].copy_from_slice(&x[ch * hw..(ch + 1) * hw]);
            col.extend(self.idx.iter().map(|&i| plane[i as usize]));
        }
    }

    fn col2im_add<T: Real>(&self, col: &[T], c: usize, plane: &mut Vec<T>, gx: &mut [T]) {
        let hw = self.hw();
        let block = self.idx.len();
        plane.clear();
        plane.resize(hw + 1, T::zero());
        for ch in 0..c {
            plane[..hw].copy_from_slice(&gx[ch * hw..(ch + 1) * hw]);
            for (&g, &i) in col[ch * block..(ch + 1) * block].iter().zip(&self.idx) {
                plane[i as usize] = plane[i as usize] + g;
            }
            gx[ch * hw..(ch + 1) * hw].copy_from_slice(&plane[..hw]);
        }
    }
}

/// Writes the zero-padded receptive fields of one sample `x` (`[c][h][w]`)
/// into `col` (`[c * k * k][h * w]`).
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let mut v = Vec::with_capacity(col.len());
    TapTable::get(h, w, k).im2col_extend(x, c, &mut Vec::new(), &mut v);
    col.copy_from_slice(&v);
}

/// Scatter-adds `col` back onto `gx`; adjoint of [`im2col`].
pub fn col2im_add<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, gx: &mut [T]) {
    TapTable::get(h, w, k).col2im_add(col, c, &mut Vec::new(), gx);
}

/// `out[m][n] = sum_r a[m][r] * b[r][n]` (overwrites `out`).
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, r: usize, n: usize, out: &mut [T]) {
    if r == 0 {
        out[..m * n].fill(T::zero());
        return;
    }
    T::gemm(m, r, n, (a, r, 1), (b, n, 1), T::zero(), (out, n, 1));
}

/// `out[r][n] += sum_m a[m][r] * g[m][n]`.
pub fn matmul_at_add<T: Real>(a: &[T], g: &[T], m: usize, r: usize, n: usize, out: &mut [T]) {
    T::gemm(r, m, n, (a, 1, r), (g, n, 1), T::one(), (out, n, 1));
}

/// `out[m][r] += sum_n g[m][n] * b[r][n]`.
pub fn matmul_bt_add<T: Real>(g: &[T], b: &[T], m: usize, r: usize, n: usize, out: &mut [T]) {
    T::gemm(m, n, r, (g, n, 1), (b, 1, n), T::one(), (out, r, 1));
}

/// Reusable buffers for convolutions.
#[derive(Default)]
pub struct ConvScratch<T> {
    col: Vec<T>,
    gcol: Vec<T>,
    plane: Vec<T>,
    taps: Option<Rc<TapTable>>,
}

impl<T: Real> ConvScratch<T> {
    pub fn new() -> Self {
        Self { col: Vec::new(), gcol: Vec::new(), plane: Vec::new(), taps: None }
    }

    fn fill_col(&mut self, x: &[T], cs: ConvShape) {
        let taps = self.taps(cs);
        self.col.clear();
        taps.im2col_extend(x, cs.c_in, &mut self.plane, &mut self.col);
    }

    fn taps(&mut self, cs: ConvShape) -> Rc<TapTable> {
        if self.taps.as_ref().is_none_or(|t| t.dims != (cs.h, cs.w, cs.k)) {
            self.taps = Some(TapTable::get(cs.h, cs.w, cs.k));
        }
        Rc::clone(self.taps.as_ref().expect("set above"))
    }
}

/// Geometry of a same-padded stride-1 convolution, kernel `[c_out][c_in][k][k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.rows()
    }
}

/// Convolution of one sample `x` (`[c_in][h][w]`) into `out` (`[c_out][h][w]`).
pub fn conv_forward<T: Real>(x: &[T], cs: ConvShape, kernel: &[T], out: &mut [T], scratch: &mut ConvScratch<T>) {
    let (hw, rows) = (cs.hw(), cs.rows());
    if cs.k == 1 {
        matmul(kernel, x, cs.c_out, rows, hw, out);
        return;
    }
    scratch.fill_col(x, cs);
    matmul(kernel, &scratch.col, cs.c_out, rows, hw, out);
}

/// Backward of [`conv_forward`]: accumulates into `gk` and, when given, `gx`.
pub fn conv_backward<T: Real>(
    x: &[T],
    cs: ConvShape,
    kernel: &[T],
    gout: &[T],
    gx: Option<&mut [T]>,
    gk: &mut [T],
    scratch: &mut ConvScratch<T>,
) {
    let (hw, rows) = (cs.hw(), cs.rows());
    if cs.k == 1 {
        matmul_bt_add(gout, x, cs.c_out, rows, hw, gk);
        if let Some(gx) = gx {
            matmul_at_add(kernel, gout, cs.c_out, rows, hw, gx);
        }
        return;
    }
    scratch.fill_col(x, cs);
    matmul_bt_add(gout, &scratch.col, cs.c_out, rows, hw, gk);
    if let Some(gx) = gx {
        scratch.gcol.resize(rows * hw, T::zero());
        T::gemm(rows, cs.c_out, hw, (kernel, 1, rows), (gout, hw, 1), T::zero(), (&mut scratch.gcol, hw, 1));
        let taps = scratch.taps(cs);
        taps.col2im_add(&scratch.gcol, cs.c_in, &mut scratch.plane, gx);
    }
}

/// Per-channel 3x3 same-padded correlation, kernel `[c][3][3]`.
pub fn depthwise_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize, kernel: &[T], out: &mut [T]) {
    let hw = h * w;
    // Zero-bordered `(h + 2) × (w + 2)` planes: every tap becomes one shifted
    // axpy; the last two columns of each `acc` row are junk and discarded.
    let pw = w + 2;
    let span = h * pw;
    let mut src = vec![T::zero(); (h + 2) * pw + 2];
    let mut acc = vec![T::zero(); span];
    for ch in 0..c {
        for y in 0..h {
            src[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&x[ch * hw + y * w..ch * hw + (y + 1) * w]);
        }
        acc.fill(T::zero());
        for (t, &k) in kernel[ch * 9..(ch + 1) * 9].iter().enumerate() {
            let off = (t / 3) * pw + t % 3;
            for (o, &v) in acc.iter_mut().zip(&src[off..off + span]) {
                *o = *o + k * v;
            }
        }
        for y in 0..h {
            out[ch * hw + y * w..ch * hw + (y + 1) * w].copy_from_slice(&acc[y * pw..y * pw + w]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    gk: &mut [T],
) {
    let hw = h * w;
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        let g = &gout[ch * hw..(ch + 1) * hw];
        let kk = &kernel[ch * 9..(ch + 1) * 9];
        for y in 0..h {
            for xx in 0..w {
                let go = g[y * w + xx];
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let si = sy as usize * w + sx as usize;
                        let t = &mut gk[ch * 9 + dy * 3 + dx];
                        *t = *t + go * src[si];
                        if let Some(gx) = gx.as_deref_mut() {
                            let t = &mut gx[ch * hw + si];
                            *t = *t + go * kk[dy * 3 + dx];
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `g` where the forward output was not positive (subgradient 0 at 0).
pub fn relu_backward_inplace<T: Real>(out: &[T], g: &mut [T]) {
    for (gv, &o) in g.iter_mut().zip(out) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
}

/// Stable for both signs: exp only ever sees a non-positive argument.
#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    let e = (-v.abs()).exp();
    let num = if v >= T::zero() { T::one() } else { e };
    num / (T::one() + e)
}

pub fn sigmoid_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        *v = sigmoid(*v);
    }
}

pub fn sigmoid_backward_inplace<T: Real>(out: &[T], g: &mut [T]) {
    for (gv, &s) in g.iter_mut().zip(out) {
        *gv = *gv * s * (T::one() - s);
    }
}

pub fn add_inplace<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Value and first row-major location of the maximum; `None` on empty input.
pub fn argmax<T: Real>(x: &[T]) -> Option<(T, usize)> {
    let mut it = x.iter().enumerate();
    let (_, &first) = it.next()?;
    let mut best = (first, 0);
    for (i, &v) in it {
        if v > best.0 {
            best = (v, i);
        }
    }
    Some(best)
}

/// Batch-norm statistics for one channel computed over `B * H * W` values.
pub struct ChannelStats {
    pub mean: f64,
    pub var: f64,
}

/// Per-channel batch mean and biased variance of a `[B][C][HW]` buffer.
pub fn batch_channel_stats<T: Real>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<ChannelStats> {
    let n = (b * hw) as f64;
    (0..c)
        .map(|ch| {
            let mut sum = 0.0;
            for s in 0..b {
                for &v in &x[(s * c + ch) * hw..][..hw] {
                    sum += v.to_f64().unwrap_or(f64::NAN);
                }
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for s in 0..b {
                for &v in &x[(s * c + ch) * hw..][..hw] {
                    let d = v.to_f64().unwrap_or(f64::NAN) - mean;
                    sq += d * d;
                }
            }
            ChannelStats { mean, var: sq / n }
        })
        .collect()
}
