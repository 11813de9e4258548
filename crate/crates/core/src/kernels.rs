//! Raw numeric kernels over `f64` slices: convolution via im2col + GEMM,
//! transposed convolution, 2x2 max pooling, bilinear resampling and batch
//! normalization. The autograd graph calls into these; nothing here knows
//! about graphs or parameters.

use crate::tensor::{Shape, Tensor};

/// Upper bound on the im2col scratch buffer, in elements.
const COLS_BUDGET: usize = 1 << 20;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// "Same" padding for odd kernels.
    pub const fn same(kernel: usize, stride: usize) -> Self {
        Self::new(kernel, stride, kernel / 2)
    }

    /// Output extent of a forward convolution, `None` if the kernel does not fit.
    pub fn conv_out(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution.
    pub fn transpose_out(&self, input: usize, output_pad: usize) -> Option<usize> {
        let full = (input - 1) * self.stride + self.kernel + output_pad;
        full.checked_sub(2 * self.pad).filter(|&v| v > 0)
    }
}

/// `C = alpha * A * B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller
    // guarantees; strides describe views into the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Layout of one im2col pass: an input plane stack `(c, h, w)` read through a
/// kernel laid over an output grid `(gh, gw)`.
#[derive(Clone, Copy, Debug)]
struct Patches {
    c: usize,
    h: usize,
    w: usize,
    gh: usize,
    gw: usize,
    geom: ConvGeom,
}

impl Patches {
    fn rows(&self) -> usize {
        self.c * self.geom.kernel * self.geom.kernel
    }

    fn grid(&self) -> usize {
        self.gh * self.gw
    }

    fn tile(&self) -> usize {
        (COLS_BUDGET / self.rows().max(1)).clamp(1, self.grid().max(1))
    }

    /// Source pixel for kernel offset `(ki, kj)` at grid position `p`.
    #[inline]
    fn source(&self, p: usize, ki: usize, kj: usize) -> Option<usize> {
        let oy = p / self.gw;
        let ox = p % self.gw;
        let iy = (oy * self.geom.stride + ki).checked_sub(self.geom.pad)?;
        let ix = (ox * self.geom.stride + kj).checked_sub(self.geom.pad)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }

    fn im2col(&self, x: &[f64], p0: usize, p1: usize, cols: &mut [f64]) {
        let np = p1 - p0;
        let k = self.geom.kernel;
        let plane = self.h * self.w;
        for ci in 0..self.c {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let r = (ci * k + ki) * k + kj;
                    let row = &mut cols[r * np..(r + 1) * np];
                    for (slot, p) in row.iter_mut().zip(p0..p1) {
                        *slot = self.source(p, ki, kj).map_or(0.0, |i| src[i]);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], p0: usize, p1: usize, x: &mut [f64]) {
        let np = p1 - p0;
        let k = self.geom.kernel;
        let plane = self.h * self.w;
        for ci in 0..self.c {
            let dst = &mut x[ci * plane..(ci + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let r = (ci * k + ki) * k + kj;
                    let row = &cols[r * np..(r + 1) * np];
                    for (&v, p) in row.iter().zip(p0..p1) {
                        if let Some(i) = self.source(p, ki, kj) {
                            dst[i] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(feature = "parallel")]
fn for_each_item<F>(out: &mut [f64], item_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    out.par_chunks_mut(item_len)
        .enumerate()
        .for_each(|(n, chunk)| f(n, chunk));
}

#[cfg(not(feature = "parallel"))]
fn for_each_item<F>(out: &mut [f64], item_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    out.chunks_mut(item_len)
        .enumerate()
        .for_each(|(n, chunk)| f(n, chunk));
}

/// Per-item partial results reduced in batch order, so the sum is identical
/// whether or not items were computed in parallel.
#[cfg(feature = "parallel")]
fn map_items<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_items<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad(dy: &Tensor) -> Vec<f64> {
    let s = dy.shape();
    let mut db = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, slot) in db.iter_mut().enumerate() {
            *slot += dy.plane(n, c).iter().sum::<f64>();
        }
    }
    db
}

/// Forward convolution. `w` is `[out, in, k, k]`, `b` has `out` entries.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&[f64]>, geom: ConvGeom) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.c, ws.c, "conv input has {} channels, weight expects {}", xs.c, ws.c);
    let ho = geom.conv_out(xs.h).expect("kernel larger than padded input");
    let wo = geom.conv_out(xs.w).expect("kernel larger than padded input");
    let out_shape = Shape::new(xs.n, ws.n, ho, wo);
    let patches = Patches {
        c: xs.c,
        h: xs.h,
        w: xs.w,
        gh: ho,
        gw: wo,
        geom,
    };
    let rows = patches.rows();
    let grid = patches.grid();
    let tile = patches.tile();
    let mut out = Tensor::zeros(out_shape);
    let item_len = ws.n * grid;
    for_each_item(out.data_mut(), item_len, |n, y| {
        let mut cols = vec![0.0; rows * tile];
        let xi = x.item(n);
        let mut p0 = 0;
        while p0 < grid {
            let p1 = (p0 + tile).min(grid);
            let np = p1 - p0;
            patches.im2col(xi, p0, p1, &mut cols);
            gemm(
                ws.n,
                rows,
                np,
                w.data(),
                (rows, 1),
                &cols,
                (np, 1),
                0.0,
                &mut y[p0..],
                (grid, 1),
            );
            p0 = p1;
        }
        if let Some(b) = b {
            add_bias(y, b, grid);
        }
    });
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    geom: ConvGeom,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Vec<f64>) {
    let xs = x.shape();
    let ws = w.shape();
    let ys = dy.shape();
    let patches = Patches {
        c: xs.c,
        h: xs.h,
        w: xs.w,
        gh: ys.h,
        gw: ys.w,
        geom,
    };
    let rows = patches.rows();
    let grid = patches.grid();
    let tile = patches.tile();
    let per_item = map_items(xs.n, |n| {
        let mut cols = vec![0.0; rows * tile];
        let mut dcols = vec![0.0; if need_dx { rows * tile } else { 0 }];
        let mut dw = vec![0.0; ws.numel()];
        let mut dx = vec![0.0; if need_dx { xs.c * xs.plane() } else { 0 }];
        let xi = x.item(n);
        let dyi = dy.item(n);
        let mut p0 = 0;
        while p0 < grid {
            let p1 = (p0 + tile).min(grid);
            let np = p1 - p0;
            patches.im2col(xi, p0, p1, &mut cols);
            gemm(
                ws.n,
                np,
                rows,
                &dyi[p0..],
                (grid, 1),
                &cols,
                (1, np),
                1.0,
                &mut dw,
                (rows, 1),
            );
            if need_dx {
                gemm(
                    rows,
                    ws.n,
                    np,
                    w.data(),
                    (1, rows),
                    &dyi[p0..],
                    (grid, 1),
                    0.0,
                    &mut dcols,
                    (np, 1),
                );
                patches.col2im(&dcols, p0, p1, &mut dx);
            }
            p0 = p1;
        }
        (dx, dw)
    });
    let mut dw = Tensor::zeros(ws);
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let item_len = xs.c * xs.plane();
    for (n, (dxi, dwi)) in per_item.into_iter().enumerate() {
        for (a, b) in dw.data_mut().iter_mut().zip(&dwi) {
            *a += b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.data_mut()[n * item_len..(n + 1) * item_len].copy_from_slice(&dxi);
        }
    }
    (dx, dw, bias_grad(dy))
}

/// Transposed convolution. `w` is `[in, out, k, k]`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&[f64]>,
    geom: ConvGeom,
    output_pad: usize,
) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.c, ws.n, "deconv input has {} channels, weight expects {}", xs.c, ws.n);
    let ho = geom
        .transpose_out(xs.h, output_pad)
        .expect("degenerate transposed convolution");
    let wo = geom
        .transpose_out(xs.w, output_pad)
        .expect("degenerate transposed convolution");
    let cout = ws.c;
    let patches = Patches {
        c: cout,
        h: ho,
        w: wo,
        gh: xs.h,
        gw: xs.w,
        geom,
    };
    let rows = patches.rows();
    let grid = patches.grid();
    let tile = patches.tile();
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, ho, wo));
    let item_len = cout * ho * wo;
    for_each_item(out.data_mut(), item_len, |n, y| {
        let mut cols = vec![0.0; rows * tile];
        let xi = x.item(n);
        let mut p0 = 0;
        while p0 < grid {
            let p1 = (p0 + tile).min(grid);
            let np = p1 - p0;
            gemm(
                rows,
                xs.c,
                np,
                w.data(),
                (1, rows),
                &xi[p0..],
                (grid, 1),
                0.0,
                &mut cols,
                (np, 1),
            );
            patches.col2im(&cols, p0, p1, y);
            p0 = p1;
        }
        if let Some(b) = b {
            add_bias(y, b, ho * wo);
        }
    });
    out
}

/// Gradients of [`conv_transpose2d`].
pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    geom: ConvGeom,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Vec<f64>) {
    let xs = x.shape();
    let ws = w.shape();
    let ys = dy.shape();
    let patches = Patches {
        c: ys.c,
        h: ys.h,
        w: ys.w,
        gh: xs.h,
        gw: xs.w,
        geom,
    };
    let rows = patches.rows();
    let grid = patches.grid();
    let tile = patches.tile();
    let per_item = map_items(xs.n, |n| {
        let mut dcols = vec![0.0; rows * tile];
        let mut dw = vec![0.0; ws.numel()];
        let mut dx = vec![0.0; if need_dx { xs.c * grid } else { 0 }];
        let xi = x.item(n);
        let dyi = dy.item(n);
        let mut p0 = 0;
        while p0 < grid {
            let p1 = (p0 + tile).min(grid);
            let np = p1 - p0;
            patches.im2col(dyi, p0, p1, &mut dcols);
            gemm(
                xs.c,
                np,
                rows,
                &xi[p0..],
                (grid, 1),
                &dcols,
                (1, np),
                1.0,
                &mut dw,
                (rows, 1),
            );
            if need_dx {
                gemm(
                    xs.c,
                    rows,
                    np,
                    w.data(),
                    (rows, 1),
                    &dcols,
                    (np, 1),
                    0.0,
                    &mut dx[p0..],
                    (grid, 1),
                );
            }
            p0 = p1;
        }
        (dx, dw)
    });
    let mut dw = Tensor::zeros(ws);
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let item_len = xs.c * grid;
    for (n, (dxi, dwi)) in per_item.into_iter().enumerate() {
        for (a, b) in dw.data_mut().iter_mut().zip(&dwi) {
            *a += b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.data_mut()[n * item_len..(n + 1) * item_len].copy_from_slice(&dxi);
        }
    }
    (dx, dw, bias_grad(dy))
}

/// 2x2 / stride-2 max pooling with ceil-mode edges. Returns the pooled map and
/// the in-plane argmax of every output cell.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let (ho, wo) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    let mut arg = vec![0u32; out.len()];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for iy in 2 * oy..(2 * oy + 2).min(s.h) {
                        for ix in 2 * ox..(2 * ox + 2).min(s.w) {
                            let i = iy * s.w + ix;
                            if plane[i] > best {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(input: Shape, out: Shape, arg: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input);
    let plane_in = input.plane();
    let plane_out = out.plane();
    for (nc, chunk) in dy.data().chunks(plane_out).enumerate() {
        let base = nc * plane_in;
        let args = &arg[nc * plane_out..(nc + 1) * plane_out];
        for (&g, &a) in chunk.iter().zip(args) {
            dx.data_mut()[base + a as usize] += g;
        }
    }
    dx
}

/// One axis of a bilinear resampling: source taps and weights per output index.
#[derive(Clone, Debug)]
struct Axis {
    taps: Vec<(usize, usize, f64, f64)>,
}

impl Axis {
    /// Half-pixel-centre mapping (`align_corners = false`), edge-clamped.
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let frac = (src - i0 as f64).clamp(0.0, 1.0);
                (i0, i1, 1.0 - frac, frac)
            })
            .collect();
        Self { taps }
    }
}

/// Bilinear resize of every plane to `(h, w)`.
pub fn resize_bilinear(x: &Tensor, h: usize, w: usize) -> Tensor {
    let s = x.shape();
    if (s.h, s.w) == (h, w) {
        return x.clone();
    }
    let ay = Axis::new(s.h, h);
    let ax = Axis::new(s.w, w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for (src, dst) in x
        .data()
        .chunks(s.plane())
        .zip(out.data_mut().chunks_mut(h * w))
    {
        for (oy, &(y0, y1, wy0, wy1)) in ay.taps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in ax.taps.iter().enumerate() {
                dst[oy * w + ox] = wy0 * (wx0 * src[y0 * s.w + x0] + wx1 * src[y0 * s.w + x1])
                    + wy1 * (wx0 * src[y1 * s.w + x0] + wx1 * src[y1 * s.w + x1]);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(input: Shape, dy: &Tensor) -> Tensor {
    let os = dy.shape();
    if (input.h, input.w) == (os.h, os.w) {
        return dy.clone();
    }
    let ay = Axis::new(input.h, os.h);
    let ax = Axis::new(input.w, os.w);
    let mut dx = Tensor::zeros(input);
    let iw = input.w;
    for (g, dst) in dy
        .data()
        .chunks(os.plane())
        .zip(dx.data_mut().chunks_mut(input.plane()))
    {
        for (oy, &(y0, y1, wy0, wy1)) in ay.taps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in ax.taps.iter().enumerate() {
                let v = g[oy * os.w + ox];
                dst[y0 * iw + x0] += v * wy0 * wx0;
                dst[y0 * iw + x1] += v * wy0 * wx1;
                dst[y1 * iw + x0] += v * wy1 * wx0;
                dst[y1 * iw + x1] += v * wy1 * wx1;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize (half-pixel centres); used for binary masks.
pub fn resize_nearest(x: &Tensor, h: usize, w: usize) -> Tensor {
    let s = x.shape();
    if (s.h, s.w) == (h, w) {
        return x.clone();
    }
    let pick = |o: usize, out: usize, inp: usize| {
        (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
    };
    let ys: Vec<usize> = (0..h).map(|o| pick(o, h, s.h)).collect();
    let xs: Vec<usize> = (0..w).map(|o| pick(o, w, s.w)).collect();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for (src, dst) in x
        .data()
        .chunks(s.plane())
        .zip(out.data_mut().chunks_mut(h * w))
    {
        for (oy, &iy) in ys.iter().enumerate() {
            for (ox, &ix) in xs.iter().enumerate() {
                dst[oy * w + ox] = src[iy * s.w + ix];
            }
        }
    }
    out
}

/// Per-channel statistics and normalized activations of a batch-norm forward.
pub struct BatchNormSaved {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization. With `stats = None` the batch statistics are used;
/// otherwise the given `(mean, var)` are treated as constants.
pub fn batch_norm(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    stats: Option<(&[f64], &[f64])>,
    eps: f64,
) -> (Tensor, BatchNormSaved) {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let (mean, var) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mut mean = vec![0.0; s.c];
            let mut var = vec![0.0; s.c];
            for c in 0..s.c {
                let m = (0..s.n).map(|n| x.plane(n, c).iter().sum::<f64>()).sum::<f64>() / count;
                let v = (0..s.n)
                    .map(|n| x.plane(n, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                    .sum::<f64>()
                    / count;
                mean[c] = m;
                var[c] = v;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (
        y,
        BatchNormSaved {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`. `batch_stats` selects the training-mode
/// formula where the mean and variance depend on `x`.
pub fn batch_norm_backward(
    dy: &Tensor,
    gamma: &[f64],
    saved: &BatchNormSaved,
    batch_stats: bool,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = dy.shape();
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                dgamma[c] += dy.data()[i] * saved.xhat.data()[i];
                dbeta[c] += dy.data()[i];
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            let k = gamma[c] * saved.inv_std[c];
            for i in start..start + plane {
                let g = dy.data()[i];
                dx.data_mut()[i] = if batch_stats {
                    k * (g - dbeta[c] / count - saved.xhat.data()[i] * dgamma[c] / count)
                } else {
                    k * g
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], g: ConvGeom) -> Tensor {
        let xs = x.shape();
        let ws = w.shape();
        let ho = g.conv_out(xs.h).unwrap();
        let wo = g.conv_out(xs.w).unwrap();
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, ho, wo));
        for n in 0..xs.n {
            for o in 0..ws.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for c in 0..xs.c {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += w.at(o, c, ki, kj) * x.at(n, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(n, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    /// Scatter form of the transposed convolution.
    fn naive_conv_t(x: &Tensor, w: &Tensor, b: &[f64], g: ConvGeom, op: usize) -> Tensor {
        let xs = x.shape();
        let ws = w.shape();
        let ho = g.transpose_out(xs.h, op).unwrap();
        let wo = g.transpose_out(xs.w, op).unwrap();
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.c, ho, wo));
        for n in 0..xs.n {
            for c in 0..xs.c {
                for iy in 0..xs.h {
                    for ix in 0..xs.w {
                        for o in 0..ws.c {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let oy = (iy * g.stride + ki) as isize - g.pad as isize;
                                    let ox = (ix * g.stride + kj) as isize - g.pad as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < ho && (ox as usize) < wo {
                                        let i = out.index(n, o, oy as usize, ox as usize);
                                        out.data_mut()[i] += w.at(c, o, ki, kj) * x.at(n, c, iy, ix);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for o in 0..ws.c {
                for v in 0..ho * wo {
                    let i = (n * ws.c + o) * ho * wo + v;
                    out.data_mut()[i] += b[o];
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p, h, w) in &[(3, 1, 1, 5, 6), (3, 2, 1, 7, 8), (1, 1, 0, 4, 4), (7, 2, 3, 9, 9)] {
            let x = Tensor::randn(Shape::new(2, 3, h, w), 1.0, &mut rng);
            let wt = Tensor::randn(Shape::new(4, 3, k, k), 1.0, &mut rng);
            let b: Vec<f64> = (0..4).map(|i| i as f64 * 0.1).collect();
            let g = ConvGeom::new(k, s, p);
            let fast = conv2d(&x, &wt, Some(&b), g);
            let slow = naive_conv(&x, &wt, &b, g);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_matches_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(s, op) in &[(1, 0), (2, 1)] {
            let x = Tensor::randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
            let wt = Tensor::randn(Shape::new(3, 2, 3, 3), 1.0, &mut rng);
            let b = [0.5, -0.25];
            let g = ConvGeom::new(3, s, 1);
            let fast = conv_transpose2d(&x, &wt, Some(&b), g, op);
            let slow = naive_conv_t(&x, &wt, &b, g, op);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn transposed_stride_two_doubles() {
        let g = ConvGeom::new(3, 2, 1);
        assert_eq!(g.transpose_out(8, 1), Some(16));
        assert_eq!(g.transpose_out(1, 1), Some(2));
        assert_eq!(ConvGeom::new(3, 1, 1).transpose_out(32, 0), Some(32));
    }

    #[test]
    fn bilinear_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(Shape::new(1, 2, 6, 6), 1.0, &mut rng);
        assert_eq!(resize_bilinear(&x, 6, 6), x);
        let c = Tensor::full(Shape::new(1, 1, 3, 5), 0.7);
        for &(h, w) in &[(9, 2), (1, 1), (12, 20)] {
            let r = resize_bilinear(&c, h, w);
            assert!(r.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(Shape::new(1, 1, 5, 3), 1.0, &mut rng);
        let dy = Tensor::randn(Shape::new(1, 1, 8, 7), 1.0, &mut rng);
        let y = resize_bilinear(&x, 8, 7);
        let dx = resize_bilinear_backward(x.shape(), &dy);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn max_pool_ceil_mode() {
        let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
        let dx = max_pool2_backward(x.shape(), y.shape(), &arg, &Tensor::full(y.shape(), 1.0));
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn nearest_keeps_binary_values() {
        let m = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_nearest(&m, 5, 3);
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(resize_nearest(&m, 2, 2), m);
    }
}
