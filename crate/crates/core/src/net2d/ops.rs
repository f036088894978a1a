//! Forward and backward kernels for the 2D network.
//!
//! All image tensors are NCHW. Each output element is produced by exactly
//! one task with a fixed reduction order, so results are bitwise identical
//! regardless of thread count.

use crate::error::{Error, Result};
use crate::gemm::{gemm, Op};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Stride-1 geometry whose output matches the input size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding).saturating_sub(span) / self.stride + 1
    }
}

struct ConvShape {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_shape(x: &[usize], k: &[usize], g: &ConvGeometry) -> Result<ConvShape> {
    if x.len() != 4 || k.len() != 4 {
        return Err(Error::argument(format!(
            "conv2d expects NCHW input and OIHW kernel, got {x:?} and {k:?}"
        )));
    }
    if g.stride == 0 || g.dilation == 0 || g.groups == 0 {
        return Err(Error::argument("conv2d stride, dilation and groups must be positive"));
    }
    let (n, c_in, h, w) = (x[0], x[1], x[2], x[3]);
    let (c_out, cin_g, kh, kw) = (k[0], k[1], k[2], k[3]);
    if c_in % g.groups != 0 || c_out % g.groups != 0 || cin_g * g.groups != c_in {
        return Err(Error::argument(format!(
            "conv2d: {c_in} input / {c_out} output channels incompatible with {} groups and kernel {k:?}",
            g.groups
        )));
    }
    if h + 2 * g.padding < g.dilation * (kh - 1) + 1 || w + 2 * g.padding < g.dilation * (kw - 1) + 1
    {
        return Err(Error::argument(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"
        )));
    }
    Ok(ConvShape {
        n,
        c_in,
        h,
        w,
        c_out,
        cin_g,
        kh,
        kw,
        oh: g.output_len(h, kh),
        ow: g.output_len(w, kw),
    })
}

/// Range of output indices whose tap `offset` lands inside `0..len`.
fn valid_outputs(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // input = o * stride + offset must satisfy 0 <= input < len
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = if (len as isize) <= offset {
        0
    } else {
        ((len as isize - offset + s - 1) / s).min(out_len as isize)
    };
    (lo as usize, hi.max(lo) as usize)
}

impl ConvShape {
    fn plane_in(&self) -> usize {
        self.h * self.w
    }

    fn plane_out(&self) -> usize {
        self.oh * self.ow
    }

    fn cout_g(&self, g: &ConvGeometry) -> usize {
        self.c_out / g.groups
    }

    /// Rows of the unfolded input: one per (input channel, tap) of a group.
    fn col_rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    /// A 1x1 stride-1 unpadded conv reads its input as the unfolded matrix.
    fn is_pointwise(&self, g: &ConvGeometry) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.padding == 0
    }
}

/// Unfolds the channels of one group of one image into
/// `[cin_g * kh * kw, oh * ow]`, zero where a tap falls in the padding.
fn im2col(xg: &[f64], s: &ConvShape, g: &ConvGeometry, col: &mut [f64]) {
    let po = s.plane_out();
    for icl in 0..s.cin_g {
        let xp = &xg[icl * s.plane_in()..][..s.plane_in()];
        for ki in 0..s.kh {
            let off_y = (ki * g.dilation) as isize - g.padding as isize;
            let (oy0, oy1) = valid_outputs(off_y, g.stride, s.h, s.oh);
            for kj in 0..s.kw {
                let off_x = (kj * g.dilation) as isize - g.padding as isize;
                let (ox0, ox1) = valid_outputs(off_x, g.stride, s.w, s.ow);
                let row = &mut col[((icl * s.kh + ki) * s.kw + kj) * po..][..po];
                row.fill(0.0);
                for oy in oy0..oy1 {
                    let iy = ((oy * g.stride) as isize + off_y) as usize;
                    let xrow = &xp[iy * s.w..][..s.w];
                    let orow = &mut row[oy * s.ow..][..s.ow];
                    if ox0 == ox1 {
                        continue;
                    }
                    if g.stride == 1 {
                        let ix0 = (ox0 as isize + off_x) as usize;
                        orow[ox0..ox1].copy_from_slice(&xrow[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            orow[ox] = xrow[((ox * g.stride) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates unfolded gradients into `gx`.
fn col2im(col: &[f64], s: &ConvShape, g: &ConvGeometry, gx: &mut [f64]) {
    let po = s.plane_out();
    for icl in 0..s.cin_g {
        let gp = &mut gx[icl * s.plane_in()..][..s.plane_in()];
        for ki in 0..s.kh {
            let off_y = (ki * g.dilation) as isize - g.padding as isize;
            let (oy0, oy1) = valid_outputs(off_y, g.stride, s.h, s.oh);
            for kj in 0..s.kw {
                let off_x = (kj * g.dilation) as isize - g.padding as isize;
                let (ox0, ox1) = valid_outputs(off_x, g.stride, s.w, s.ow);
                let row = &col[((icl * s.kh + ki) * s.kw + kj) * po..][..po];
                for oy in oy0..oy1 {
                    let iy = ((oy * g.stride) as isize + off_y) as usize;
                    let grow = &mut gp[iy * s.w..][..s.w];
                    let crow = &row[oy * s.ow..][..s.ow];
                    for ox in ox0..ox1 {
                        grow[((ox * g.stride) as isize + off_x) as usize] += crow[ox];
                    }
                }
            }
        }
    }
}

/// Grouped, strided, dilated cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, kernel: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let s = conv_shape(x.shape(), kernel.shape(), &g)?;
    let cout_g = s.cout_g(&g);
    let (pi, po, rows) = (s.plane_in(), s.plane_out(), s.col_rows());
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; s.n * s.c_out * po];
    // one task per (image, group); its output channels are contiguous
    par::for_each_chunk(&mut out, (cout_g * po).max(1), |idx, y| {
        let (b, grp) = (idx / g.groups, idx % g.groups);
        let xg = &xd[(b * s.c_in + grp * s.cin_g) * pi..][..s.cin_g * pi];
        let kg = &kd[grp * cout_g * rows..][..cout_g * rows];
        if s.is_pointwise(&g) {
            gemm(cout_g, rows, po, kg, Op::N, xg, Op::N, y, false);
        } else {
            let mut col = vec![0.0; rows * po];
            im2col(xg, &s, &g, &mut col);
            gemm(cout_g, rows, po, kg, Op::N, &col, Op::N, y, false);
        }
    });
    Tensor::from_vec(&[s.n, s.c_out, s.oh, s.ow], out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(
    grad_y: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    g: ConvGeometry,
) -> Result<Tensor> {
    let s = conv_shape(input_shape, kernel.shape(), &g)?;
    grad_y.expect_shape(&[s.n, s.c_out, s.oh, s.ow], "conv2d grad_y")?;
    let cout_g = s.cout_g(&g);
    let (pi, po, rows) = (s.plane_in(), s.plane_out(), s.col_rows());
    let gyd = grad_y.data();
    let kd = kernel.data();
    let mut out = vec![0.0; s.n * s.c_in * pi];
    par::for_each_chunk(&mut out, (s.cin_g * pi).max(1), |idx, gx| {
        let (b, grp) = (idx / g.groups, idx % g.groups);
        let gy = &gyd[(b * s.c_out + grp * cout_g) * po..][..cout_g * po];
        let kg = &kd[grp * cout_g * rows..][..cout_g * rows];
        if s.is_pointwise(&g) {
            gemm(rows, cout_g, po, kg, Op::T, gy, Op::N, gx, false);
        } else {
            let mut col = vec![0.0; rows * po];
            gemm(rows, cout_g, po, kg, Op::T, gy, Op::N, &mut col, false);
            col2im(&col, &s, &g, gx);
        }
    });
    Tensor::from_vec(input_shape, out)
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel(
    grad_y: &Tensor,
    x: &Tensor,
    kernel_shape: &[usize],
    g: ConvGeometry,
) -> Result<Tensor> {
    let s = conv_shape(x.shape(), kernel_shape, &g)?;
    grad_y.expect_shape(&[s.n, s.c_out, s.oh, s.ow], "conv2d grad_y")?;
    let cout_g = s.cout_g(&g);
    let (pi, po, rows) = (s.plane_in(), s.plane_out(), s.col_rows());
    let gyd = grad_y.data();
    let xd = x.data();
    let mut out = vec![0.0; s.c_out * rows];
    // one task per group, images accumulated in order
    par::for_each_chunk(&mut out, (cout_g * rows).max(1), |grp, gk| {
        let mut col = vec![0.0; if s.is_pointwise(&g) { 0 } else { rows * po }];
        for b in 0..s.n {
            let gy = &gyd[(b * s.c_out + grp * cout_g) * po..][..cout_g * po];
            let xg = &xd[(b * s.c_in + grp * s.cin_g) * pi..][..s.cin_g * pi];
            if s.is_pointwise(&g) {
                gemm(cout_g, po, rows, gy, Op::N, xg, Op::T, gk, b > 0);
            } else {
                im2col(xg, &s, &g, &mut col);
                gemm(cout_g, po, rows, gy, Op::N, &col, Op::T, gk, b > 0);
            }
        }
    });
    Tensor::from_vec(kernel_shape, out)
}

/// State kept by [`conv2d_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Conv2dSaved {
    pub x: Tensor,
    pub kernel: Tensor,
    pub geometry: ConvGeometry,
}

pub fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    geometry: ConvGeometry,
) -> Result<(Tensor, Conv2dSaved)> {
    let y = conv2d(x, kernel, geometry)?;
    Ok((
        y,
        Conv2dSaved {
            x: x.clone(),
            kernel: kernel.clone(),
            geometry,
        },
    ))
}

/// Returns `(grad_x, grad_kernel)`.
pub fn conv2d_backward(grad_y: &Tensor, saved: &Conv2dSaved) -> Result<(Tensor, Tensor)> {
    let gx = conv2d_grad_input(grad_y, &saved.kernel, saved.x.shape(), saved.geometry)?;
    let gk = conv2d_grad_kernel(grad_y, &saved.x, saved.kernel.shape(), saved.geometry)?;
    Ok((gx, gk))
}

/// Adds a per-channel bias to an NCHW tensor.
pub fn add_channel_bias(y: &mut Tensor, bias: &[f64]) {
    let c = y.dim(1);
    let plane = y.dim(2) * y.dim(3);
    par::for_each_chunk(y.data_mut(), plane.max(1), |idx, p| {
        let b = bias[idx % c];
        p.iter_mut().for_each(|v| *v += b);
    });
}

/// Sums an NCHW gradient over everything but the channel axis.
pub fn channel_sums(t: &Tensor) -> Vec<f64> {
    let (n, c) = (t.dim(0), t.dim(1));
    let plane = t.dim(2) * t.dim(3);
    let d = t.data();
    (0..c)
        .map(|ch| {
            (0..n)
                .map(|b| d[(b * c + ch) * plane..][..plane].iter().sum::<f64>())
                .sum()
        })
        .collect()
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Gradient of ReLU given its input `x`.
pub fn relu_backward(grad_y: &Tensor, x: &Tensor) -> Tensor {
    let data = grad_y
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel normalization state saved by [`batchnorm_forward`].
#[derive(Debug, Clone)]
pub struct BatchNormSaved {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

/// Running statistics and hyper-parameters of a batch norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// Number of training batches folded into the running statistics.
    pub batches_seen: u64,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            batches_seen: 0,
        }
    }
}

/// Per channel `ch` of NCHW buffers `a` and `b`, the sum of
/// `term(ch, a, b)` over elements, added plane by plane in batch order.
fn channel_reduce<F>(a: &[f64], b: &[f64], n: usize, c: usize, plane: usize, term: F) -> Vec<f64>
where
    F: Fn(usize, f64, f64) -> f64 + Sync + Send,
{
    let plane_sum = |ch: usize, idx: usize| {
        let (pa, pb) = (&a[idx * plane..][..plane], &b[idx * plane..][..plane]);
        pa.iter().zip(pb).fold(0.0, |s, (&x, &y)| s + term(ch, x, y))
    };
    if plane >= PLANE_TASK {
        return par::map_range(c, |ch| (0..n).fold(0.0, |s, bi| s + plane_sum(ch, bi * c + ch)));
    }
    let mut acc = vec![0.0; c];
    for bi in 0..n {
        for (ch, s) in acc.iter_mut().enumerate() {
            *s += plane_sum(ch, bi * c + ch);
        }
    }
    acc
}

/// Elementwise `f(ch, a, b)` over NCHW buffers.
fn channel_map<F>(a: &[f64], b: &[f64], c: usize, plane: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, f64, f64) -> f64 + Sync + Send,
{
    let mut out = vec![0.0; a.len()];
    let fill = |idx: usize, ch: usize, o: &mut [f64]| {
        let (pa, pb) = (&a[idx * plane..][..plane], &b[idx * plane..][..plane]);
        for ((o, &x), &y) in o.iter_mut().zip(pa).zip(pb) {
            *o = f(ch, x, y);
        }
    };
    if plane >= PLANE_TASK {
        par::for_each_chunk(&mut out, plane, |idx, o| fill(idx, idx % c, o));
    } else {
        par::for_each_chunk(&mut out, c * plane * BATCH_ROWS, |task, rows| {
            for (r, row) in rows.chunks_exact_mut(c * plane).enumerate() {
                let base = (task * BATCH_ROWS + r) * c;
                for (ch, o) in row.chunks_exact_mut(plane).enumerate() {
                    fill(base + ch, ch, o);
                }
            }
        });
    }
    out
}

/// Planes at least this large are reduced one channel per task.
const PLANE_TASK: usize = 256;
/// Batch entries per task for small planes.
const BATCH_ROWS: usize = 256;

/// Normalizes an NCHW tensor per channel (axis 1); `[N, C]` inputs should be
/// reshaped to `[N, C, 1, 1]`.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    stats: &mut BatchNormStats,
    mode: Mode,
) -> Result<(Tensor, BatchNormSaved)> {
    if x.rank() != 4 || x.dim(1) != gamma.len() || gamma.len() != beta.len() {
        return Err(Error::argument(format!(
            "batchnorm: input {:?} vs {} channels",
            x.shape(),
            gamma.len()
        )));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    let m = n * plane;
    if m == 0 {
        return Err(Error::argument("batchnorm over an empty batch"));
    }
    let xd = x.data();
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let sums = channel_reduce(xd, xd, n, c, plane, |_, v, _| v);
            let means: Vec<f64> = sums.iter().map(|s| s / m as f64).collect();
            let sq = channel_reduce(xd, xd, n, c, plane, |ch, v, _| {
                (v - means[ch]) * (v - means[ch])
            });
            let mv: Vec<(f64, f64)> =
                means.iter().zip(&sq).map(|(&mean, s)| (mean, s / m as f64)).collect();
            let mom = stats.momentum;
            for (ch, &(mean, var)) in mv.iter().enumerate() {
                let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                stats.running_mean[ch] = (1.0 - mom) * stats.running_mean[ch] + mom * mean;
                stats.running_var[ch] = (1.0 - mom) * stats.running_var[ch] + mom * unbiased;
            }
            stats.batches_seen += 1;
            mv.into_iter().unzip()
        }
        Mode::Eval => {
            if stats.batches_seen == 0 {
                return Err(Error::state(
                    "batchnorm in eval mode before any running statistics were accumulated",
                ));
            }
            (stats.running_mean.clone(), stats.running_var.clone())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
    let x_hat = channel_map(xd, xd, c, plane, |ch, v, _| (v - mean[ch]) * inv_std[ch]);
    let y = channel_map(&x_hat, &x_hat, c, plane, |ch, v, _| gamma[ch] * v + beta[ch]);
    Ok((
        Tensor::from_vec(x.shape(), y)?,
        BatchNormSaved {
            x_hat: Tensor::from_vec(x.shape(), x_hat)?,
            inv_std,
            mode,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    grad_y: &Tensor,
    gamma: &[f64],
    saved: &BatchNormSaved,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    grad_y.expect_shape(saved.x_hat.shape(), "batchnorm grad_y")?;
    let (n, c) = (grad_y.dim(0), grad_y.dim(1));
    let plane = grad_y.dim(2) * grad_y.dim(3);
    let m = (n * plane) as f64;
    let gd = grad_y.data();
    let xh = saved.x_hat.data();
    let grad_beta = channel_reduce(gd, gd, n, c, plane, |_, g, _| g);
    let grad_gamma = channel_reduce(gd, xh, n, c, plane, |_, g, h| g * h);
    let scale: Vec<f64> = gamma.iter().zip(&saved.inv_std).map(|(g, s)| g * s).collect();
    let gx = match saved.mode {
        Mode::Train => channel_map(gd, xh, c, plane, |ch, g, h| {
            scale[ch] * (g - grad_beta[ch] / m - h * grad_gamma[ch] / m)
        }),
        Mode::Eval => channel_map(gd, gd, c, plane, |ch, g, _| scale[ch] * g),
    };
    Ok((Tensor::from_vec(grad_y.shape(), gx)?, grad_gamma, grad_beta))
}

/// Interpolation taps along one axis, half-pixel centers.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.rank() != 4 || out_h == 0 || out_w == 0 || x.dim(2) == 0 || x.dim(3) == 0 {
        return Err(Error::argument(format!(
            "upsample_bilinear {:?} -> {out_h}x{out_w}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let xd = x.data();
    let mut out = vec![0.0; n * c * out_h * out_w];
    par::for_each_chunk(&mut out, out_h * out_w, |idx, y| {
        let p = &xd[idx * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                y[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    });
    Tensor::from_vec(&[n, c, out_h, out_w], out)
}

pub fn upsample_bilinear_backward(grad_y: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (out_h, out_w) = (grad_y.dim(2), grad_y.dim(3));
    grad_y.expect_shape(&[n, c, out_h, out_w], "upsample_bilinear grad_y")?;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let gd = grad_y.data();
    let mut out = vec![0.0; n * c * h * w];
    par::for_each_chunk(&mut out, h * w, |idx, gx| {
        let g = &gd[idx * out_h * out_w..][..out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                gx[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                gx[y0 * w + x1] += v * (1.0 - ly) * lx;
                gx[y1 * w + x0] += v * ly * (1.0 - lx);
                gx[y1 * w + x1] += v * ly * lx;
            }
        }
    });
    Tensor::from_vec(input_shape, out)
}

/// `[N, C, H, W] -> [N, C, 1, 1]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::from_vec(&[n, c, 1, 1], data).expect("pooled shape")
}

pub fn global_avg_pool_backward(grad_y: &Tensor, input_shape: &[usize]) -> Tensor {
    let plane = input_shape[2] * input_shape[3];
    let data = grad_y
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / plane as f64, plane))
        .collect();
    Tensor::from_vec(input_shape, data).expect("pool grad shape")
}

/// Repeats a `[N, C, 1, 1]` tensor over an `h x w` grid.
pub fn broadcast_spatial(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c) = (x.dim(0), x.dim(1));
    let data = x
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, h * w))
        .collect();
    Tensor::from_vec(&[n, c, h, w], data).expect("broadcast shape")
}

pub fn broadcast_spatial_backward(grad_y: &Tensor) -> Tensor {
    let (n, c) = (grad_y.dim(0), grad_y.dim(1));
    let plane = grad_y.dim(2) * grad_y.dim(3);
    let data = grad_y
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum())
        .collect();
    Tensor::from_vec(&[n, c, 1, 1], data).expect("broadcast grad shape")
}

/// Zero-pads the bottom and right of an NCHW tensor.
pub fn pad_to(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, ih, iw) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if (ih, iw) == (h, w) {
        return x.clone();
    }
    let mut out = vec![0.0; n * c * h * w];
    let xd = x.data();
    for p in 0..n * c {
        for r in 0..ih {
            out[p * h * w + r * w..][..iw].copy_from_slice(&xd[p * ih * iw + r * iw..][..iw]);
        }
    }
    Tensor::from_vec(&[n, c, h, w], out).expect("padded shape")
}

/// Keeps the top-left `h x w` window; the adjoint of [`pad_to`].
pub fn crop_to(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, ih, iw) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if (ih, iw) == (h, w) {
        return x.clone();
    }
    let mut out = vec![0.0; n * c * h * w];
    let xd = x.data();
    for p in 0..n * c {
        for r in 0..h {
            out[p * h * w + r * w..][..w].copy_from_slice(&xd[p * ih * iw + r * iw..][..w]);
        }
    }
    Tensor::from_vec(&[n, c, h, w], out).expect("cropped shape")
}

/// `y = x W + b` for `x: [N, in]`, `W: [in, out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (n, d_in) = (x.dim(0), x.dim(1));
    if weight.rank() != 2 || weight.dim(0) != d_in || weight.dim(1) != bias.len() {
        return Err(Error::argument(format!(
            "linear: input {:?}, weight {:?}, bias {}",
            x.shape(),
            weight.shape(),
            bias.len()
        )));
    }
    let d_out = bias.len();
    let mut out: Vec<f64> = (0..n).flat_map(|_| bias.iter().copied()).collect();
    gemm(n, d_in, d_out, x.data(), Op::N, weight.data(), Op::N, &mut out, true);
    Tensor::from_vec(&[n, d_out], out)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn linear_backward(
    grad_y: &Tensor,
    x: &Tensor,
    weight: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (n, d_in) = (x.dim(0), x.dim(1));
    let d_out = weight.dim(1);
    grad_y.expect_shape(&[n, d_out], "linear grad_y")?;
    let gd = grad_y.data();
    let mut gx = vec![0.0; n * d_in];
    gemm(n, d_out, d_in, gd, Op::N, weight.data(), Op::T, &mut gx, false);
    let mut gw = vec![0.0; d_in * d_out];
    gemm(d_in, n, d_out, x.data(), Op::T, gd, Op::N, &mut gw, false);
    let mut gb = vec![0.0; d_out];
    for row in gd.chunks_exact(d_out.max(1)) {
        for (a, &v) in gb.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok((
        Tensor::from_vec(&[n, d_in], gx)?,
        Tensor::from_vec(&[d_in, d_out], gw)?,
        gb,
    ))
}
