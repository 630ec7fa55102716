//! Forward and backward kernels for the closed operator set.
//!
//! Every feature map is `[channels, frames]`, row-major. Convolution weights
//! are `[out, in / groups, kernel]`. Kernels are plain functions; the tape in
//! [`super::tape`] records which ones ran and calls the matching backward.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Epsilon added to the global layer norm variance.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// `(kernel - 1) / 2` zeros on both sides. Keeps the length at stride 1,
    /// and halves an even length at stride 2 for odd kernels.
    Same,
    Explicit { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dAttrs {
    pub stride: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl Conv1dAttrs {
    pub const POINTWISE: Conv1dAttrs = Conv1dAttrs {
        stride: 1,
        groups: 1,
        padding: Padding::Valid,
    };

    pub fn new(stride: usize, groups: usize, padding: Padding) -> Self {
        Conv1dAttrs {
            stride,
            groups,
            padding,
        }
    }

    fn pads(&self, kernel: usize) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((kernel - 1) / 2, (kernel - 1) / 2),
            Padding::Explicit { left, right } => (left, right),
        }
    }
}

/// Resolved geometry of one conv1d call.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub frames_in: usize,
    pub frames_out: usize,
    pub stride: usize,
    pub groups: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], attrs: Conv1dAttrs) -> Result<Self> {
        let (cin, frames) = match x_shape {
            [c, f] => (*c, *f),
            s => return Err(Error::dim("conv1d", "input rank", format!("expected [C, F], got {s:?}"))),
        };
        let (cout, cin_g, kernel) = match w_shape {
            [o, i, k] => (*o, *i, *k),
            s => return Err(Error::dim("conv1d", "weight rank", format!("expected [Cout, Cin/g, k], got {s:?}"))),
        };
        if attrs.stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        if attrs.groups == 0 || cin % attrs.groups != 0 {
            return Err(Error::dim(
                "conv1d",
                "input channels",
                format!("{cin} not divisible by groups {}", attrs.groups),
            ));
        }
        if cout % attrs.groups != 0 {
            return Err(Error::dim(
                "conv1d",
                "output channels",
                format!("{cout} not divisible by groups {}", attrs.groups),
            ));
        }
        if cin_g != cin / attrs.groups {
            return Err(Error::dim(
                "conv1d",
                "weight axis 1",
                format!("expected {} input channels per group, got {cin_g}", cin / attrs.groups),
            ));
        }
        let (pl, pr) = attrs.pads(kernel);
        let span = frames + pl + pr;
        if span < kernel {
            return Err(Error::dim(
                "conv1d",
                "frames",
                format!("{frames} frames (+{} padding) shorter than kernel {kernel}", pl + pr),
            ));
        }
        Ok(ConvGeom {
            cin,
            cout,
            kernel,
            frames_in: frames,
            frames_out: (span - kernel) / attrs.stride + 1,
            stride: attrs.stride,
            groups: attrs.groups,
            pad_left: pl,
        })
    }

    /// Output frames `f` for which tap `j` reads inside the unpadded input.
    fn valid_range(&self, j: usize) -> (usize, usize) {
        let (s, pl, n) = (self.stride, self.pad_left, self.frames_in);
        let lo = if pl > j { (pl - j).div_ceil(s) } else { 0 };
        if n + pl <= j {
            return (0, 0);
        }
        let hi = ((n - 1 + pl - j) / s + 1).min(self.frames_out);
        (lo.min(hi), hi)
    }

    pub fn macs(&self) -> u64 {
        (self.cout * (self.cin / self.groups) * self.kernel * self.frames_out) as u64
    }
}

pub fn conv1d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    attrs: Conv1dAttrs,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), attrs)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return Err(Error::dim("conv1d", "bias", format!("expected [{}], got {:?}", g.cout, b.shape())));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let ipg = g.cin / g.groups;
    let opg = g.cout / g.groups;
    let mut y = vec![T::zero(); g.cout * g.frames_out];
    par::for_each_row(&mut y, g.frames_out, |oc, yrow| {
        if let Some(b) = b {
            yrow.fill(b.data()[oc]);
        }
        let grp = oc / opg;
        for icl in 0..ipg {
            let ic = grp * ipg + icl;
            let xrow = &xd[ic * g.frames_in..(ic + 1) * g.frames_in];
            for j in 0..g.kernel {
                let wv = wd[(oc * ipg + icl) * g.kernel + j];
                let (lo, hi) = g.valid_range(j);
                if lo >= hi {
                    continue;
                }
                if g.stride == 1 {
                    let off = lo + j - g.pad_left;
                    for (yv, &xv) in yrow[lo..hi].iter_mut().zip(&xrow[off..off + hi - lo]) {
                        *yv += wv * xv;
                    }
                } else {
                    for (f, yv) in yrow.iter_mut().enumerate().take(hi).skip(lo) {
                        *yv += wv * xrow[f * g.stride + j - g.pad_left];
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[g.cout, g.frames_out], y)
}

pub struct Conv1dGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    attrs: Conv1dAttrs,
    dy: &Tensor<T>,
) -> Result<Conv1dGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), attrs)?;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let ipg = g.cin / g.groups;
    let opg = g.cout / g.groups;
    let fo = g.frames_out;

    let mut dw = vec![T::zero(); w.len()];
    par::for_each_row(&mut dw, ipg * g.kernel, |oc, dwrow| {
        let grp = oc / opg;
        let dyrow = &dyd[oc * fo..(oc + 1) * fo];
        for icl in 0..ipg {
            let ic = grp * ipg + icl;
            let xrow = &xd[ic * g.frames_in..(ic + 1) * g.frames_in];
            for j in 0..g.kernel {
                let (lo, hi) = g.valid_range(j);
                if lo >= hi {
                    continue;
                }
                let mut acc = T::zero();
                if g.stride == 1 {
                    let off = lo + j - g.pad_left;
                    for (&d, &xv) in dyrow[lo..hi].iter().zip(&xrow[off..off + hi - lo]) {
                        acc += d * xv;
                    }
                } else {
                    for f in lo..hi {
                        acc += dyrow[f] * xrow[f * g.stride + j - g.pad_left];
                    }
                }
                dwrow[icl * g.kernel + j] = acc;
            }
        }
    });

    let mut dx = vec![T::zero(); x.len()];
    par::for_each_row(&mut dx, g.frames_in, |ic, dxrow| {
        let grp = ic / ipg;
        let icl = ic % ipg;
        for oc in grp * opg..(grp + 1) * opg {
            let dyrow = &dyd[oc * fo..(oc + 1) * fo];
            for j in 0..g.kernel {
                let wv = wd[(oc * ipg + icl) * g.kernel + j];
                let (lo, hi) = g.valid_range(j);
                if lo >= hi {
                    continue;
                }
                if g.stride == 1 {
                    let off = lo + j - g.pad_left;
                    for (dxv, &d) in dxrow[off..off + hi - lo].iter_mut().zip(&dyrow[lo..hi]) {
                        *dxv += wv * d;
                    }
                } else {
                    for f in lo..hi {
                        dxrow[f * g.stride + j - g.pad_left] += wv * dyrow[f];
                    }
                }
            }
        }
    });

    let db = has_bias.then(|| {
        let v = (0..g.cout).map(|oc| dyd[oc * fo..(oc + 1) * fo].iter().copied().sum()).collect();
        Tensor::from_vec(&[g.cout], v).expect("bias shape")
    });
    Ok(Conv1dGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db,
    })
}

/// Output length of a transposed convolution over `frames` input columns.
pub fn transposed_len(frames: usize, kernel: usize, stride: usize) -> usize {
    (frames - 1) * stride + kernel
}

/// Transposed 1-D convolution: `x [Cin, K]`, `w [Cin, Cout, k]` -> `[Cout, (K-1)*stride + k]`.
///
/// This is the adjoint of [`conv1d`] with valid padding and the same weight array.
pub fn transposed_conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (cin, frames) = x.dims2()?;
    let (wcin, cout, k) = w.dims3()?;
    if stride == 0 {
        return Err(Error::Config("transposed_conv1d stride must be >= 1".into()));
    }
    if wcin != cin {
        return Err(Error::dim("transposed_conv1d", "weight axis 0", format!("expected {cin}, got {wcin}")));
    }
    let t = transposed_len(frames, k, stride);
    let (xd, wd) = (x.data(), w.data());
    let mut y = vec![T::zero(); cout * t];
    par::for_each_row(&mut y, t, |oc, yrow| {
        for ic in 0..cin {
            let xrow = &xd[ic * frames..(ic + 1) * frames];
            let wk = &wd[(ic * cout + oc) * k..(ic * cout + oc + 1) * k];
            for (f, &xv) in xrow.iter().enumerate() {
                let base = f * stride;
                for (yv, &wv) in yrow[base..base + k].iter_mut().zip(wk) {
                    *yv += xv * wv;
                }
            }
        }
    });
    Tensor::from_vec(&[cout, t], y)
}

/// Transposed convolution trimmed on the right to `len` samples.
///
/// `len` must lie in `(natural - stride, natural]`; anything else cannot come
/// from right-padding the forward framing and is rejected.
pub fn transposed_conv1d_to_len<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let (_, frames) = x.dims2()?;
    let (_, _, k) = w.dims3()?;
    let natural = transposed_len(frames, k, stride.max(1));
    if len > natural || len + stride <= natural {
        return Err(Error::dim(
            "transposed_conv1d",
            "output length",
            format!("{len} samples inconsistent with {frames} frames, kernel {k}, stride {stride} (natural {natural})"),
        ));
    }
    let full = transposed_conv1d(x, w, stride)?;
    trim_frames(&full, len)
}

pub fn transposed_conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (cin, frames) = x.dims2()?;
    let (_, cout, k) = w.dims3()?;
    let t = dy.dims2()?.1;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    // dx is conv1d(dy, w) with valid padding.
    let mut dx = vec![T::zero(); cin * frames];
    par::for_each_row(&mut dx, frames, |ic, dxrow| {
        for oc in 0..cout {
            let dyrow = &dyd[oc * t..(oc + 1) * t];
            let wk = &wd[(ic * cout + oc) * k..(ic * cout + oc + 1) * k];
            for (f, dxv) in dxrow.iter_mut().enumerate() {
                let base = f * stride;
                let mut acc = T::zero();
                for (&d, &wv) in dyrow[base..base + k].iter().zip(wk) {
                    acc += d * wv;
                }
                *dxv += acc;
            }
        }
    });
    let mut dw = vec![T::zero(); w.len()];
    par::for_each_row(&mut dw, k, |row, dwk| {
        let (ic, oc) = (row / cout, row % cout);
        let xrow = &xd[ic * frames..(ic + 1) * frames];
        let dyrow = &dyd[oc * t..(oc + 1) * t];
        for (f, &xv) in xrow.iter().enumerate() {
            let base = f * stride;
            for (dwv, &d) in dwk.iter_mut().zip(&dyrow[base..base + k]) {
                *dwv += xv * d;
            }
        }
    });
    Ok((Tensor::from_vec(x.shape(), dx)?, Tensor::from_vec(w.shape(), dw)?))
}

/// Weights of one depthwise-separable convolution.
#[derive(Debug, Clone)]
pub struct SeparableParams<T> {
    /// `[C, 1, k]`
    pub depthwise_w: Tensor<T>,
    /// `[C]`
    pub depthwise_b: Tensor<T>,
    /// `[Cout, C, 1]`
    pub pointwise_w: Tensor<T>,
    /// `[Cout]`
    pub pointwise_b: Tensor<T>,
}

pub fn separable_param_count(channels: usize, kernel: usize, out_channels: usize) -> usize {
    channels * kernel + channels + out_channels * channels + out_channels
}

pub fn depthwise_separable_conv<T: Scalar>(
    x: &Tensor<T>,
    p: &SeparableParams<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let c = x.dims2()?.0;
    let h = conv1d(x, &p.depthwise_w, Some(&p.depthwise_b), Conv1dAttrs::new(stride, c, padding))?;
    conv1d(&h, &p.pointwise_w, Some(&p.pointwise_b), Conv1dAttrs::POINTWISE)
}

pub fn check_interp_factor(factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() || factor > 128 {
        return Err(Error::Config(format!(
            "interpolation factor {factor} is not a supported power of two (1..=128)"
        )));
    }
    Ok(())
}

/// Nearest-neighbour upsampling along frames.
pub fn interpolate<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_interp_factor(factor)?;
    let (c, f) = x.dims2()?;
    let mut y = Vec::with_capacity(c * f * factor);
    for &v in x.data() {
        y.extend(std::iter::repeat_n(v, factor));
    }
    Tensor::from_vec(&[c, f * factor], y)
}

pub fn interpolate_backward<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, f) = dy.dims2()?;
    let v = dy.data().chunks(factor).map(|ch| ch.iter().copied().sum()).collect();
    Tensor::from_vec(&[c, f / factor], v)
}

/// `out[c, f*r + j] = x[c*r + j, f]`
pub fn pixel_shuffle_1d<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c, f) = x.dims2()?;
    if r == 0 || c % r != 0 {
        return Err(Error::dim("pixel_shuffle_1d", "channels", format!("{c} not divisible by {r}")));
    }
    let co = c / r;
    let xd = x.data();
    let mut y = vec![T::zero(); c * f];
    for oc in 0..co {
        for j in 0..r {
            let src = &xd[(oc * r + j) * f..(oc * r + j + 1) * f];
            for (t, &v) in src.iter().enumerate() {
                y[oc * f * r + t * r + j] = v;
            }
        }
    }
    Tensor::from_vec(&[co, f * r], y)
}

/// Inverse rearrangement of [`pixel_shuffle_1d`]; also its backward.
pub fn pixel_unshuffle_1d<T: Scalar>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (co, fr) = y.dims2()?;
    if r == 0 || fr % r != 0 {
        return Err(Error::dim("pixel_unshuffle_1d", "frames", format!("{fr} not divisible by {r}")));
    }
    let f = fr / r;
    let yd = y.data();
    let mut x = vec![T::zero(); co * fr];
    for oc in 0..co {
        for j in 0..r {
            for t in 0..f {
                x[(oc * r + j) * f + t] = yd[oc * fr + t * r + j];
            }
        }
    }
    Tensor::from_vec(&[co * r, f], x)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let v = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &d)| if xv > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), v).expect("same shape")
}

fn prelu_slope<T: Scalar>(a: &Tensor<T>, channels: usize) -> Result<impl Fn(usize) -> T + '_> {
    let n = a.len();
    if n != 1 && n != channels {
        return Err(Error::dim("prelu", "slope", format!("expected 1 or {channels} slopes, got {n}")));
    }
    Ok(move |c: usize| if n == 1 { a.data()[0] } else { a.data()[c] })
}

/// `x` if `x >= 0` else `a * x`, with `a` scalar (`[1]`) or per channel (`[C]`).
pub fn prelu<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, f) = x.dims2()?;
    let slope = prelu_slope(a, c)?;
    let mut y = x.clone();
    for (ch, row) in y.data_mut().chunks_mut(f).enumerate() {
        let s = slope(ch);
        for v in row {
            if *v < T::zero() {
                *v *= s;
            }
        }
    }
    Ok(y)
}

pub fn prelu_backward<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, f) = x.dims2()?;
    let slope = prelu_slope(a, c)?;
    let mut dx = dy.clone();
    let mut da = vec![T::zero(); a.len()];
    for ch in 0..c {
        let s = slope(ch);
        let xrow = &x.data()[ch * f..(ch + 1) * f];
        let dxrow = &mut dx.data_mut()[ch * f..(ch + 1) * f];
        let mut acc = T::zero();
        for (d, &xv) in dxrow.iter_mut().zip(xrow) {
            if xv < T::zero() {
                acc += *d * xv;
                *d *= s;
            }
        }
        da[if a.len() == 1 { 0 } else { ch }] += acc;
    }
    Ok((dx, Tensor::from_vec(a.shape(), da)?))
}

/// Normalized activations plus the inverse standard deviation, kept for backward.
pub struct NormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: T,
}

/// Global layer norm over all `C*F` entries with per-channel affine.
pub fn global_layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (c, f) = x.dims2()?;
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::dim(
            "global_layer_norm",
            "affine",
            format!("gain {:?} / bias {:?} for {c} channels", gain.shape(), bias.shape()),
        ));
    }
    let n = T::from_usize(c * f);
    let mean = x.data().iter().copied().sum::<T>() / n;
    let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + T::from_f64(NORM_EPS)).sqrt();
    let normalized = x.map(|v| (v - mean) * inv_std);
    let mut y = normalized.clone();
    for (ch, row) in y.data_mut().chunks_mut(f).enumerate() {
        let (g, b) = (gain.data()[ch], bias.data()[ch]);
        row.iter_mut().for_each(|v| *v = *v * g + b);
    }
    Ok((y, NormCache { normalized, inv_std }))
}

pub fn global_layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gain: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, f) = dy.dims2()?;
    let xh = cache.normalized.data();
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    let mut dxh = vec![T::zero(); c * f];
    for ch in 0..c {
        let g = gain.data()[ch];
        for i in ch * f..(ch + 1) * f {
            let d = dy.data()[i];
            dgain[ch] += d * xh[i];
            dbias[ch] += d;
            dxh[i] = d * g;
        }
    }
    let n = T::from_usize(c * f);
    let mean_d = dxh.iter().copied().sum::<T>() / n;
    let mean_dx = dxh.iter().zip(xh).map(|(&d, &x)| d * x).sum::<T>() / n;
    let dx = dxh
        .iter()
        .zip(xh)
        .map(|(&d, &x)| cache.inv_std * (d - mean_d - x * mean_dx))
        .collect();
    Ok((
        Tensor::from_vec(dy.shape(), dx)?,
        Tensor::from_vec(&[c], dgain)?,
        Tensor::from_vec(&[c], dbias)?,
    ))
}

/// Channel concatenation; every input must have the same frame count.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::Usage("concat_channels of an empty list".into()))?;
    let f = first.dims2()?.1;
    let mut c = 0;
    let mut data = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        let (ci, fi) = x.dims2()?;
        if fi != f {
            return Err(Error::dim("concat_channels", format!("input {i} frames"), format!("{fi} != {f}")));
        }
        c += ci;
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec(&[c, f], data)
}

/// Rows `[start, start + len)` of a `[C, F]` tensor.
pub fn narrow_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (c, f) = x.dims2()?;
    if len == 0 || start + len > c {
        return Err(Error::dim("narrow_channels", "channels", format!("[{start}, {}) of {c}", start + len)));
    }
    Tensor::from_vec(&[len, f], x.data()[start * f..(start + len) * f].to_vec())
}

pub fn add_all<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::Usage("add of an empty list".into()))?;
    let mut y = (*first).clone();
    for (i, x) in xs.iter().enumerate().skip(1) {
        if x.shape() != first.shape() {
            return Err(Error::dim(
                "add",
                format!("input {i}"),
                format!("{:?} != {:?}", x.shape(), first.shape()),
            ));
        }
        y.add_assign(x);
    }
    Ok(y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mul", "shape", format!("{:?} != {:?}", a.shape(), b.shape())));
    }
    let v = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), v)
}

/// Right-pads the frame axis with zeros.
pub fn pad_frames<T: Scalar>(x: &Tensor<T>, extra: usize) -> Result<Tensor<T>> {
    let (c, f) = x.dims2()?;
    let mut y = Vec::with_capacity(c * (f + extra));
    for row in x.data().chunks(f) {
        y.extend_from_slice(row);
        y.extend(std::iter::repeat_n(T::zero(), extra));
    }
    Tensor::from_vec(&[c, f + extra], y)
}

/// Keeps the first `len` frames.
pub fn trim_frames<T: Scalar>(x: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let (c, f) = x.dims2()?;
    if len == 0 || len > f {
        return Err(Error::dim("trim_frames", "frames", format!("cannot keep {len} of {f}")));
    }
    let mut y = Vec::with_capacity(c * len);
    for row in x.data().chunks(f) {
        y.extend_from_slice(&row[..len]);
    }
    Tensor::from_vec(&[c, len], y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn w3(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_moving_sum() {
        let x = t(&[&[1.0, 2.0, 3.0, 4.0]]);
        let w = w3(&[1, 1, 2], &[1.0, 1.0]);
        let b = w3(&[1], &[0.0]);
        let y = conv1d(&x, &w, Some(&b), Conv1dAttrs::new(1, 1, Padding::Valid)).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = t(&[&[0.5, -1.0, 2.0], &[3.0, 0.0, -4.0]]);
        let w = w3(&[2, 1, 1], &[1.0, 1.0]);
        let y = conv1d(&x, &w, None, Conv1dAttrs::new(1, 2, Padding::Valid)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv1d_output_length_formula() {
        let x = Tensor::<f64>::zeros(&[2, 17]);
        let w = Tensor::<f64>::zeros(&[4, 2, 5]);
        for (stride, pad) in [(1, 0), (2, 2), (3, 1), (2, 0)] {
            let y = conv1d(&x, &w, None, Conv1dAttrs::new(stride, 1, Padding::Explicit { left: pad, right: pad }))
                .unwrap();
            assert_eq!(y.shape()[1], (17 + 2 * pad - 5) / stride + 1);
        }
        // stride-2 same padding halves even lengths
        let x = Tensor::<f64>::zeros(&[2, 64]);
        let y = conv1d(&x, &w, None, Conv1dAttrs::new(2, 1, Padding::Same)).unwrap();
        assert_eq!(y.shape(), &[4, 32]);
    }

    #[test]
    fn conv1d_dimension_errors_name_axis() {
        let x = Tensor::<f64>::zeros(&[3, 8]);
        let w = Tensor::<f64>::zeros(&[4, 3, 3]);
        match conv1d(&x, &w, None, Conv1dAttrs::new(1, 2, Padding::Valid)) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "input channels"),
            other => panic!("unexpected {other:?}"),
        }
        let short = Tensor::<f64>::zeros(&[3, 2]);
        match conv1d(&short, &w, None, Conv1dAttrs::new(1, 1, Padding::Valid)) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "frames"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            conv1d(&x, &w, None, Conv1dAttrs::new(0, 1, Padding::Valid)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn transposed_impulse_and_placement() {
        let x = t(&[&[1.0]]);
        let w = w3(&[1, 1, 3], &[1.0, 1.0, 1.0]);
        assert_eq!(transposed_conv1d(&x, &w, 1).unwrap().data(), &[1.0, 1.0, 1.0]);

        let x = t(&[&[1.0, 1.0]]);
        let w = w3(&[1, 1, 2], &[1.0, 0.0]);
        assert_eq!(transposed_conv1d(&x, &w, 2).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn transposed_rejects_inconsistent_length() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let w = Tensor::<f64>::zeros(&[1, 1, 4]);
        // natural = 2*2 + 4 = 8
        assert!(transposed_conv1d_to_len(&x, &w, 2, 7).is_ok());
        assert!(transposed_conv1d_to_len(&x, &w, 2, 9).is_err());
        assert!(transposed_conv1d_to_len(&x, &w, 2, 6).is_err());
    }

    #[test]
    fn separable_count_formula() {
        assert_eq!(separable_param_count(512, 5, 512), 512 * 5 + 512 + 512 * 512 + 512);
        assert_eq!(separable_param_count(512, 5, 512), 265_728);
    }

    #[test]
    fn separable_identity() {
        let x = t(&[&[1.0, -2.0, 3.0, 0.5], &[0.0, 1.0, -1.0, 2.0]]);
        let p = SeparableParams {
            depthwise_w: w3(&[2, 1, 3], &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]),
            depthwise_b: w3(&[2], &[0.0, 0.0]),
            pointwise_w: w3(&[2, 2, 1], &[1.0, 0.0, 0.0, 1.0]),
            pointwise_b: w3(&[2], &[0.0, 0.0]),
        };
        let y = depthwise_separable_conv(&x, &p, 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn interpolate_replicates() {
        let x = t(&[&[1.0, 2.0]]);
        assert_eq!(interpolate(&x, 2).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(interpolate(&x, 1).unwrap(), x);
        assert!(matches!(interpolate(&x, 3), Err(Error::Config(_))));
        let d = interpolate_backward(&t(&[&[1.0, 2.0, 3.0, 4.0]]), 2).unwrap();
        assert_eq!(d.data(), &[3.0, 7.0]);
    }

    #[test]
    fn pixel_shuffle_index_formula() {
        let x = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let y = pixel_shuffle_1d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4]);
        assert_eq!(y.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(pixel_shuffle_1d(&x, 1).unwrap(), x);
        assert_eq!(pixel_unshuffle_1d(&y, 2).unwrap(), x);
        assert!(pixel_shuffle_1d(&t(&[&[1.0], &[2.0], &[3.0]]), 2).is_err());
    }

    #[test]
    fn activations() {
        let x = t(&[&[-1.0, 2.0]]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let a = w3(&[1], &[0.25]);
        assert_eq!(prelu(&t(&[&[-2.0]]), &a).unwrap().data(), &[-0.5]);
    }

    #[test]
    fn norm_of_constant_is_zero() {
        let x = Tensor::<f64>::full(&[3, 4], 7.0);
        let g = Tensor::full(&[3], 1.0);
        let b = Tensor::zeros(&[3]);
        let (y, _) = global_layer_norm(&x, &g, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_add_basics() {
        let a = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = t(&[&[7.0, 8.0, 9.0]]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(narrow_channels(&c, 0, 2).unwrap(), a);
        assert_eq!(narrow_channels(&c, 2, 1).unwrap(), b);
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(add_all(&[&a, &z]).unwrap(), a);
        let short = t(&[&[1.0, 2.0]]);
        assert!(matches!(concat_channels(&[&a, &short]), Err(Error::Dimension { .. })));
    }
}
