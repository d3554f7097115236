//! Convolution family, pooling, resampling and normalization over
//! `N×C×H×W` variables.

use crate::error::{invalid, Result, TensorError};
use crate::flops;
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::{dims4, Tensor};

/// Stride, zero padding and dilation of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvGeometry {
    /// Stride 1 with the padding that keeps the spatial size for kernel `k`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    /// `floor((len + 2·pad − dil·(k−1) − 1)/stride) + 1`, or `None` when the
    /// dilated kernel does not fit.
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || self.dilation == 0 || kernel == 0 {
            return None;
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Columns {
    /// Plain zero-padded taps.
    Plain,
    /// Tap minus the window center; taps outside the image contribute
    /// nothing.
    CentralDifference,
}

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

impl ConvShape {
    fn taps(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Range of output columns whose tap at horizontal kernel offset `off`
    /// (already dilated) lands inside the image.
    fn valid_cols(&self, off: usize) -> (usize, usize) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        let lo = if off >= p { 0 } else { (p - off).div_ceil(s) };
        let hi = if self.w + p > off {
            ((self.w - 1 + p - off) / s + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn center_offset(&self) -> isize {
        (self.k / 2 * self.geom.dilation) as isize - self.geom.padding as isize
    }
}

fn im2col<T: Real>(x: &[T], sh: &ConvShape, mode: Columns, cols: &mut [T]) {
    let (k, s, d, p) = (sh.k, sh.geom.stride, sh.geom.dilation, sh.geom.padding);
    let (h, w, ow, positions) = (sh.h, sh.w, sh.ow, sh.positions());
    let center = sh.center_offset();
    for c in 0..sh.c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut cols[row * positions..(row + 1) * positions];
                let (lo, hi) = sh.valid_cols(kj * d);
                for oy in 0..sh.oh {
                    let dst = &mut dst_row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * s + ki * d) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    for ox in lo..hi {
                        dst[ox] = src[ox * s + kj * d - p];
                    }
                    if mode == Columns::CentralDifference {
                        let cy = (oy * s) as isize + center;
                        let crow = &plane[cy as usize * w..(cy as usize + 1) * w];
                        for ox in lo..hi {
                            let cx = ((ox * s) as isize + center) as usize;
                            dst[ox] = dst[ox] - crow[cx];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], sh: &ConvShape, mode: Columns, gx: &mut [T]) {
    let (k, s, d, p) = (sh.k, sh.geom.stride, sh.geom.dilation, sh.geom.padding);
    let (h, w, ow, positions) = (sh.h, sh.w, sh.ow, sh.positions());
    let center = sh.center_offset();
    for c in 0..sh.c_in {
        let plane = &mut gx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * positions..(row + 1) * positions];
                let (lo, hi) = sh.valid_cols(kj * d);
                for oy in 0..sh.oh {
                    let iy = (oy * s + ki * d) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &src_row[oy * ow..(oy + 1) * ow];
                    let base = iy as usize * w;
                    for ox in lo..hi {
                        let ix = ox * s + kj * d - p;
                        plane[base + ix] = plane[base + ix] + src[ox];
                    }
                    if mode == Columns::CentralDifference {
                        let cbase = ((oy * s) as isize + center) as usize * w;
                        for ox in lo..hi {
                            let cx = ((ox * s) as isize + center) as usize;
                            plane[cbase + cx] = plane[cbase + cx] - src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_impl<'t, T: Real>(
    op: &'static str,
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    geom: ConvGeometry,
    mode: Columns,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let wv = weight.value();
    let (n, c_in, h, w) = dims4(op, xv.shape())?;
    let (c_out, wc, kh, kw) = dims4(op, wv.shape())?;
    if wc != c_in || kh != kw {
        return Err(TensorError::ShapeMismatch {
            op,
            left: xv.shape().to_vec(),
            right: wv.shape().to_vec(),
        });
    }
    if let Some(b) = &bias {
        if b.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op,
                left: wv.shape().to_vec(),
                right: b.shape(),
            });
        }
    }
    let k = kh;
    let (oh, ow) = match (geom.output_len(h, k), geom.output_len(w, k)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(invalid(
                op,
                format!("kernel {k} with {geom:?} does not fit {h}x{w}"),
            ))
        }
    };
    if mode == Columns::CentralDifference && 2 * geom.padding != geom.dilation * (k - 1) {
        return Err(invalid(op, "central difference needs same-size padding"));
    }
    let sh = ConvShape {
        c_in,
        h,
        w,
        k,
        oh,
        ow,
        geom,
    };
    let (taps, positions) = (sh.taps(), sh.positions());
    let mut out = vec![T::zero(); n * c_out * positions];
    let mut cols = vec![T::zero(); taps * positions];
    let bias_v = bias.map(|b| b.value());
    for b in 0..n {
        im2col(&xv.data()[b * c_in * h * w..(b + 1) * c_in * h * w], &sh, mode, &mut cols);
        let dst = &mut out[b * c_out * positions..(b + 1) * c_out * positions];
        T::gemm(c_out, taps, positions, wv.data(), (taps, 1), &cols, (positions, 1), T::zero(), dst, (positions, 1));
        if let Some(bv) = &bias_v {
            for (o, chunk) in dst.chunks_mut(positions).enumerate() {
                let bo = bv.data()[o];
                chunk.iter_mut().for_each(|v| *v = *v + bo);
            }
        }
    }
    flops::record((2 * n * c_out * taps * positions) as u64);
    let out = Tensor::new(&[n, c_out, oh, ow], out)?;

    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    let has_bias = bias_v.is_some();
    Ok(x.tape().record(
        &inputs,
        out,
        Box::new(move |g, vals, _| {
            let (xv, wv) = (vals[0], vals[1]);
            let mut gx = vec![T::zero(); xv.numel()];
            let mut gw = vec![T::zero(); wv.numel()];
            let mut gb = vec![T::zero(); c_out];
            let mut cols = vec![T::zero(); taps * positions];
            let mut gcols = vec![T::zero(); taps * positions];
            for b in 0..n {
                let xs = b * c_in * h * w..(b + 1) * c_in * h * w;
                let gn = &g.data()[b * c_out * positions..(b + 1) * c_out * positions];
                im2col(&xv.data()[xs.clone()], &sh, mode, &mut cols);
                // grad_w += g·colsᵀ
                T::gemm(c_out, positions, taps, gn, (positions, 1), &cols, (1, positions), T::one(), &mut gw, (taps, 1));
                // grad_cols = wᵀ·g
                T::gemm(taps, c_out, positions, wv.data(), (1, taps), gn, (positions, 1), T::zero(), &mut gcols, (positions, 1));
                col2im(&gcols, &sh, mode, &mut gx[xs]);
                if has_bias {
                    for (o, chunk) in gn.chunks(positions).enumerate() {
                        gb[o] = gb[o] + chunk.iter().copied().sum::<T>();
                    }
                }
            }
            let mut grads = vec![
                Some(Tensor::new(xv.shape(), gx).unwrap()),
                Some(Tensor::new(wv.shape(), gw).unwrap()),
            ];
            if has_bias {
                grads.push(Some(Tensor::new(&[c_out], gb).unwrap()));
            }
            grads
        }),
    ))
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    geom: ConvGeometry,
) -> Result<Var<'t, T>> {
    conv_impl("conv2d", x, weight, bias, geom, Columns::Plain)
}

/// Central-difference convolution:
/// `y(p₀) = Σₙ w(pₙ)·(x(p₀+pₙ) − x(p₀)) + b`, summing only over taps that
/// fall inside the image. A constant input therefore maps to the bias
/// everywhere, borders included. Padding must keep the spatial size.
pub fn central_difference_conv2d<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    geom: ConvGeometry,
) -> Result<Var<'t, T>> {
    conv_impl(
        "central_difference_conv2d",
        x,
        weight,
        bias,
        geom,
        Columns::CentralDifference,
    )
}

/// 2×2 max pooling with stride 2. Ties go to the first element in scan order.
pub fn max_pool2<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = dims4("max_pool2", xv.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("max_pool2", format!("odd spatial extent {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [best + 1, best + w, best + w + 1] {
                    if xv.data()[idx] > xv.data()[best] {
                        best = idx;
                    }
                }
                out.push(xv.data()[best]);
                argmax.push(best);
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    Ok(x.tape().record(
        &[x],
        out,
        Box::new(move |g, vals, _| {
            let mut gx = Tensor::zeros(vals[0].shape());
            let gd = gx.data_mut();
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                gd[src] = gd[src] + gv;
            }
            vec![Some(gx)]
        }),
    ))
}

/// Interpolation taps along one axis: `(i0, i1, frac)` per output index,
/// using the half-pixel (align_corners = false) convention.
fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|t| {
            let s = ((t as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of the spatial dimensions.
pub fn bilinear_resize<'t, T: Real>(x: Var<'t, T>, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = dims4("bilinear_resize", xv.shape())?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(invalid("bilinear_resize", "empty extent"));
    }
    let ty: Vec<(usize, usize, T)> = linear_taps(h, out_h)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::of(f)))
        .collect();
    let tx: Vec<(usize, usize, T)> = linear_taps(w, out_w)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::of(f)))
        .collect();
    let one = T::one();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in xv.data().chunks(h * w) {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (one - fy) + bot * fy);
            }
        }
    }
    let out = Tensor::new(&[n, c, out_h, out_w], out)?;
    Ok(x.tape().record(
        &[x],
        out,
        Box::new(move |g, vals, _| {
            let mut gx = Tensor::zeros(vals[0].shape());
            for (gplane, dst) in g.data().chunks(out_h * out_w).zip(gx.data_mut().chunks_mut(h * w)) {
                let mut it = gplane.iter();
                for &(y0, y1, fy) in &ty {
                    for &(x0, x1, fx) in &tx {
                        let gv = *it.next().unwrap();
                        let (top, bot) = (gv * (one - fy), gv * fy);
                        dst[y0 * w + x0] = dst[y0 * w + x0] + top * (one - fx);
                        dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (one - fx);
                        dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Bilinear 2× upsampling.
pub fn bilinear_upsample2<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (_, _, h, w) = dims4("bilinear_upsample2", &shape)?;
    bilinear_resize(x, 2 * h, 2 * w)
}

/// Mean across channels: `N×C×H×W → N×1×H×W`.
pub fn channel_mean<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = dims4("channel_mean", xv.shape())?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(c).unwrap();
    let mut out = vec![T::zero(); n * hw];
    for b in 0..n {
        let dst = &mut out[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let src = &xv.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
        }
        dst.iter_mut().for_each(|d| *d = *d * inv);
    }
    let out = Tensor::new(&[n, 1, h, w], out)?;
    Ok(x.tape().record(
        &[x],
        out,
        Box::new(move |g, vals, _| {
            let mut gx = Tensor::zeros(vals[0].shape());
            for (b, chunk) in gx.data_mut().chunks_mut(c * hw).enumerate() {
                let gs = &g.data()[b * hw..(b + 1) * hw];
                for plane in chunk.chunks_mut(hw) {
                    plane.iter_mut().zip(gs).for_each(|(d, &gv)| *d = gv * inv);
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Maximum across channels: `N×C×H×W → N×1×H×W`. Ties go to the lowest
/// channel index.
pub fn channel_max<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = dims4("channel_max", xv.shape())?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    let mut arg = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = b * c * hw + p;
            for ch in 1..c {
                let idx = (b * c + ch) * hw + p;
                if xv.data()[idx] > xv.data()[best] {
                    best = idx;
                }
            }
            out.push(xv.data()[best]);
            arg.push(best);
        }
    }
    let out = Tensor::new(&[n, 1, h, w], out)?;
    Ok(x.tape().record(
        &[x],
        out,
        Box::new(move |g, vals, _| {
            let mut gx = Tensor::zeros(vals[0].shape());
            for (&src, &gv) in arg.iter().zip(g.data()) {
                gx.data_mut()[src] = gv;
            }
            vec![Some(gx)]
        }),
    ))
}

/// Multiplies `x: N×C×H×W` by a single-channel map `m: N×1×H×W`
/// broadcast over channels.
pub fn mul_channel_broadcast<'t, T: Real>(x: Var<'t, T>, m: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xv, mv) = (x.value(), m.value());
    let (n, c, h, w) = dims4("mul_channel_broadcast", xv.shape())?;
    if mv.shape() != [n, 1, h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "mul_channel_broadcast",
            left: xv.shape().to_vec(),
            right: mv.shape().to_vec(),
        });
    }
    let hw = h * w;
    let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * mv.data()[(i / (c * hw)) * hw + i % hw]);
    flops::record(out.numel() as u64);
    Ok(x.tape().record(
        &[x, m],
        out,
        Box::new(move |g, vals, _| {
            let (xv, mv) = (vals[0], vals[1]);
            let gx = Tensor::from_fn(xv.shape(), |i| g.data()[i] * mv.data()[(i / (c * hw)) * hw + i % hw]);
            let mut gm = Tensor::zeros(mv.shape());
            for (i, (&gv, &xvv)) in g.data().iter().zip(xv.data()).enumerate() {
                let j = (i / (c * hw)) * hw + i % hw;
                gm.data_mut()[j] = gm.data_mut()[j] + gv * xvv;
            }
            vec![Some(gx), Some(gm)]
        }),
    ))
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    /// Exponential moving average toward the given batch statistics.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch.mean.data()) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch.unbiased_var.data()) {
            *r = keep * *r + momentum * b;
        }
    }
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub unbiased_var: Tensor<T>,
}

/// Batch normalization. In training mode the batch statistics normalize the
/// input and are returned for the running-average update; otherwise the
/// running statistics are used.
pub fn batch_norm<'t, T: Real>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running: &RunningStats<T>,
    training: bool,
    eps: T,
) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
    let xv = x.value();
    let (n, c, h, w) = dims4("batch_norm", xv.shape())?;
    for v in [gamma, beta] {
        if v.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: xv.shape().to_vec(),
                right: v.shape(),
            });
        }
    }
    if running.mean.shape() != [c] || running.var.shape() != [c] {
        return Err(invalid("batch_norm", "running statistics have the wrong length"));
    }
    let hw = h * w;
    let m = n * hw;
    let (gv, bv) = (gamma.value(), beta.value());
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let channel = move |ch: usize| (0..n).flat_map(move |b| ((b * c + ch) * hw)..((b * c + ch + 1) * hw));
    let stats = if training {
        if m < 2 {
            return Err(invalid("batch_norm", "training mode needs more than one value per channel"));
        }
        let mt = T::from_usize(m).unwrap();
        for ch in 0..c {
            let mu = channel(ch).map(|i| xv.data()[i]).sum::<T>() / mt;
            let v = channel(ch).map(|i| (xv.data()[i] - mu).powi(2)).sum::<T>() / mt;
            mean[ch] = mu;
            var[ch] = v;
        }
        let factor = mt / T::from_usize(m - 1).unwrap();
        Some(BatchStats {
            mean: Tensor::new(&[c], mean.clone())?,
            unbiased_var: Tensor::new(&[c], var.iter().map(|&v| v * factor).collect())?,
        })
    } else {
        mean.copy_from_slice(running.mean.data());
        var.copy_from_slice(running.var.data());
        None
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); xv.numel()];
    let mut normalized = vec![T::zero(); xv.numel()];
    for ch in 0..c {
        for i in channel(ch) {
            let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
            normalized[i] = xh;
            out[i] = gv.data()[ch] * xh + bv.data()[ch];
        }
    }
    flops::record(4 * xv.numel() as u64);
    let out = Tensor::new(xv.shape(), out)?;
    let var_out = x.tape().record(
        &[x, gamma, beta],
        out,
        Box::new(move |g, vals, _| {
            let gamma = vals[1];
            let mt = T::from_usize(m).unwrap();
            let mut gx = vec![T::zero(); g.numel()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for ch in 0..c {
                let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                for i in channel(ch) {
                    sum_g = sum_g + g.data()[i];
                    sum_gx = sum_gx + g.data()[i] * normalized[i];
                }
                gb[ch] = sum_g;
                gg[ch] = sum_gx;
                let scale = gamma.data()[ch] * inv_std[ch];
                for i in channel(ch) {
                    gx[i] = if training {
                        scale * (g.data()[i] - sum_g / mt - normalized[i] * sum_gx / mt)
                    } else {
                        scale * g.data()[i]
                    };
                }
            }
            vec![
                Some(Tensor::new(g.shape(), gx).unwrap()),
                Some(Tensor::new(&[c], gg).unwrap()),
                Some(Tensor::new(&[c], gb).unwrap()),
            ]
        }),
    );
    Ok((var_out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn t4(shape: [usize; 4], data: &[f64]) -> Tensor<f64> {
        Tensor::new(&shape, data.to_vec()).unwrap()
    }

    #[test]
    fn ones_kernel_on_ones_image() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = conv2d(x, w, None, ConvGeometry::same(3, 1)).unwrap().value();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_kernel_and_dilated_shape() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[1, 1, 4, 5], |i| i as f64 * 0.5);
        let xv = tape.leaf(x.clone());
        let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
        assert_eq!(*conv2d(xv, w, None, ConvGeometry::default()).unwrap().value(), x);

        let x = tape.leaf(Tensor::zeros(&[1, 1, 8, 8]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let geom = ConvGeometry { stride: 1, padding: 2, dilation: 2 };
        assert_eq!(conv2d(x, w, None, geom).unwrap().shape(), vec![1, 1, 8, 8]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(conv2d(x, w, None, ConvGeometry::same(3, 1)).is_err());
        let w = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        let geom = ConvGeometry { stride: 1, padding: 0, dilation: 4 };
        assert!(conv2d(x, w, None, geom).is_err());
        let geom = ConvGeometry { stride: 0, padding: 1, dilation: 1 };
        assert!(conv2d(x, w, None, geom).is_err());
    }

    #[test]
    fn central_difference_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 5, 5], 3.25));
        let w = tape.leaf(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64).sin()));
        let b = tape.leaf(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = central_difference_conv2d(x, w, Some(b), ConvGeometry::same(3, 1)).unwrap().value();
        for (i, &v) in y.data().iter().enumerate() {
            assert_eq!(v, [0.5, -1.0, 2.0][i / 25]);
        }

        let v = 2.5;
        let mut img = vec![0.0; 25];
        img[12] = v;
        let x = tape.leaf(t4([1, 1, 5, 5], &img));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = central_difference_conv2d(x, w, None, ConvGeometry::same(3, 1)).unwrap().value();
        assert_eq!(y.data()[12], -8.0 * v);
        for idx in [6, 7, 8, 11, 13, 16, 17, 18] {
            assert_eq!(y.data()[idx], v);
        }
        assert_eq!(y.data()[0], 0.0);
    }

    #[test]
    fn max_pool_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(max_pool2(x).unwrap().value().data(), &[4.0]);

        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let loss = max_pool2(x).unwrap().sum_all();
        assert_eq!(tape.backward(loss).unwrap().get(x).data(), &[1.0, 0.0, 0.0, 0.0]);

        let x = tape.leaf(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(max_pool2(x).is_err());
    }

    #[test]
    fn upsample_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 3, 3], 0.75));
        assert!(bilinear_upsample2(x).unwrap().value().data().iter().all(|&v| v == 0.75));
        let x = tape.leaf(Tensor::full(&[1, 1, 1, 1], 4.0));
        assert_eq!(bilinear_upsample2(x).unwrap().value().data(), &[4.0; 4]);
        let x = tape.leaf(t4([1, 1, 1, 2], &[0.0, 1.0]));
        let y = bilinear_upsample2(x).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn batch_norm_examples() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| ((i * 7919) % 13) as f64 - 4.0);
        let xv = tape.leaf(x.clone());
        let ones = tape.leaf(Tensor::ones(&[3]));
        let zeros = tape.leaf(Tensor::zeros(&[3]));
        let running = RunningStats::new(3);
        let (y, stats) = batch_norm(xv, ones, zeros, &running, true, 1e-5).unwrap();
        assert!(stats.is_some());
        let y = y.value();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.data()[(b * 3 + ch) * 4..(b * 3 + ch + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }

        let beta = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let (y, _) = batch_norm(xv, zeros, beta, &running, true, 1e-5).unwrap();
        for (i, &v) in y.value().data().iter().enumerate() {
            assert_eq!(v, [1.0, 2.0, 3.0][(i / 4) % 3]);
        }

        let (y, stats) = batch_norm(xv, ones, zeros, &running, false, 1e-5).unwrap();
        assert!(stats.is_none());
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert!((a - b).abs() <= b.abs() * 1e-5);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rs = RunningStats::<f64>::new(1);
        let batch = BatchStats {
            mean: Tensor::scalar(2.0),
            unbiased_var: Tensor::scalar(3.0),
        };
        rs.update(&batch, 0.1);
        assert!((rs.mean.item() - 0.2).abs() < 1e-12);
        assert!((rs.var.item() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn channel_pool_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t4([1, 2, 1, 1], &[2.0, 4.0]));
        assert_eq!(channel_mean(x).unwrap().value().data(), &[3.0]);
        assert_eq!(channel_max(x).unwrap().value().data(), &[4.0]);
        let single = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let x = tape.leaf(single.clone());
        assert_eq!(*channel_mean(x).unwrap().value(), single);
        assert_eq!(*channel_max(x).unwrap().value(), single);
    }
}
