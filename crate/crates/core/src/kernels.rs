//! Forward and backward kernels for the differentiable primitives.
//!
//! Every kernel is a pure function of its inputs. Convolutions lower to
//! `im2col` followed by row-wise dot products, so each output element is
//! accumulated by exactly one loop in a fixed order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Tensor;

/// Spatial padding applied before a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PaddingSpec {
    None,
    Zero(usize),
    Reflect(usize),
}

impl PaddingSpec {
    pub fn amount(self) -> usize {
        match self {
            PaddingSpec::None => 0,
            PaddingSpec::Zero(p) | PaddingSpec::Reflect(p) => p,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    hp: usize,
    wp: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: PaddingSpec,
    ) -> Result<Self> {
        let (n, cin, h, w) = x.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::invalid(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::invalid(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                bias.shape()
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!("conv2d: unsupported stride {stride}")));
        }
        if let PaddingSpec::Reflect(p) = pad {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::invalid(format!(
                    "conv2d: reflection padding needs odd kernels, got {kh}x{kw}"
                )));
            }
            if p >= h || p >= w {
                return Err(Error::invalid(format!(
                    "conv2d: reflection pad {p} too large for {h}x{w} input"
                )));
            }
        }
        let p = pad.amount();
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        if hp < kh || wp < kw {
            return Err(Error::invalid(format!(
                "conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            hp,
            wp,
            oh: (hp - kh) / stride + 1,
            ow: (wp - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

#[inline]
fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * (len - 1) - i
    } else {
        i
    };
    r as usize
}

/// Pads every `(n, c)` plane of an NCHW buffer.
fn pad_planes<T: Scalar>(data: &[T], planes: usize, h: usize, w: usize, pad: PaddingSpec) -> Vec<T> {
    let p = pad.amount();
    if p == 0 {
        return data.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); planes * hp * wp];
    for pl in 0..planes {
        let src = &data[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * hp * wp..(pl + 1) * hp * wp];
        match pad {
            PaddingSpec::Zero(_) | PaddingSpec::None => {
                for i in 0..h {
                    dst[(i + p) * wp + p..(i + p) * wp + p + w].copy_from_slice(&src[i * w..(i + 1) * w]);
                }
            }
            PaddingSpec::Reflect(_) => {
                for i in 0..hp {
                    let si = reflect_index(i as isize - p as isize, h);
                    for j in 0..wp {
                        let sj = reflect_index(j as isize - p as isize, w);
                        dst[i * wp + j] = src[si * w + sj];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad_planes`]: folds padded-plane gradients back onto the source.
fn unpad_planes<T: Scalar>(gpad: &[T], planes: usize, h: usize, w: usize, pad: PaddingSpec) -> Vec<T> {
    let p = pad.amount();
    if p == 0 {
        return gpad.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &gpad[pl * hp * wp..(pl + 1) * hp * wp];
        let dst = &mut out[pl * h * w..(pl + 1) * h * w];
        match pad {
            PaddingSpec::Zero(_) | PaddingSpec::None => {
                for i in 0..h {
                    dst[i * w..(i + 1) * w].copy_from_slice(&src[(i + p) * wp + p..(i + p) * wp + p + w]);
                }
            }
            PaddingSpec::Reflect(_) => {
                for i in 0..hp {
                    let si = reflect_index(i as isize - p as isize, h);
                    for j in 0..wp {
                        let sj = reflect_index(j as isize - p as isize, w);
                        dst[si * w + sj] += src[i * wp + j];
                    }
                }
            }
        }
    }
    out
}

/// `cols[p, (ci, ki, kj)]` for one batch item of the padded input.
fn im2col<T: Scalar>(xp: &[T], g: &ConvGeom, cols: &mut [T]) {
    let k = g.k();
    for oi in 0..g.oh {
        for oj in 0..g.ow {
            let row = &mut cols[(oi * g.ow + oj) * k..(oi * g.ow + oj + 1) * k];
            let mut r = 0;
            for ci in 0..g.cin {
                let plane = &xp[ci * g.hp * g.wp..(ci + 1) * g.hp * g.wp];
                for ki in 0..g.kh {
                    let base = (oi * g.stride + ki) * g.wp + oj * g.stride;
                    row[r..r + g.kw].copy_from_slice(&plane[base..base + g.kw]);
                    r += g.kw;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, xp: &mut [T]) {
    let k = g.k();
    for oi in 0..g.oh {
        for oj in 0..g.ow {
            let row = &cols[(oi * g.ow + oj) * k..(oi * g.ow + oj + 1) * k];
            let mut r = 0;
            for ci in 0..g.cin {
                let plane = &mut xp[ci * g.hp * g.wp..(ci + 1) * g.hp * g.wp];
                for ki in 0..g.kh {
                    let base = (oi * g.stride + ki) * g.wp + oj * g.stride;
                    for kj in 0..g.kw {
                        plane[base + kj] += row[r + kj];
                    }
                    r += g.kw;
                }
            }
        }
    }
}

/// 2D cross-correlation, `weight: [Cout, Cin, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: PaddingSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, weight, bias, stride, pad)?;
    let xp = pad_planes(x.data(), g.n * g.cin, g.h, g.w, pad);
    let (k, np) = (g.k(), g.p());
    let mut cols = vec![T::zero(); np * k];
    let mut out = vec![T::zero(); g.n * g.cout * np];
    let wd = weight.data();
    for n in 0..g.n {
        im2col(
            &xp[n * g.cin * g.hp * g.wp..(n + 1) * g.cin * g.hp * g.wp],
            &g,
            &mut cols,
        );
        for co in 0..g.cout {
            let wrow = &wd[co * k..(co + 1) * k];
            let b = bias.data()[co];
            let orow = &mut out[(n * g.cout + co) * np..(n * g.cout + co + 1) * np];
            for (p, o) in orow.iter_mut().enumerate() {
                *o = b + dot(wrow, &cols[p * k..(p + 1) * k]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], out))
}

/// Gradients of a convolution-like op; `None` where not requested.
#[derive(Debug, Default)]
pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: PaddingSpec,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x, weight, bias, stride, pad)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::invalid(format!(
            "conv2d backward: grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let (k, np) = (g.k(), g.p());
    let go = grad_out.data();
    let wd = weight.data();
    let [need_x, need_w, need_b] = need;

    let mut gw = need_w.then(|| vec![T::zero(); g.cout * k]);
    let mut gxp = need_x.then(|| vec![T::zero(); g.n * g.cin * g.hp * g.wp]);
    let xp = if need_w {
        pad_planes(x.data(), g.n * g.cin, g.h, g.w, pad)
    } else {
        Vec::new()
    };
    let mut cols = vec![T::zero(); np * k];
    for n in 0..g.n {
        let gplane = |co: usize| &go[(n * g.cout + co) * np..(n * g.cout + co + 1) * np];
        if let Some(gw) = gw.as_mut() {
            im2col(
                &xp[n * g.cin * g.hp * g.wp..(n + 1) * g.cin * g.hp * g.wp],
                &g,
                &mut cols,
            );
            for co in 0..g.cout {
                let grow = &mut gw[co * k..(co + 1) * k];
                for (p, &gv) in gplane(co).iter().enumerate() {
                    axpy(gv, &cols[p * k..(p + 1) * k], grow);
                }
            }
        }
        if let Some(gxp) = gxp.as_mut() {
            cols.iter_mut().for_each(|c| *c = T::zero());
            for p in 0..np {
                let crow = &mut cols[p * k..(p + 1) * k];
                for co in 0..g.cout {
                    axpy(gplane(co)[p], &wd[co * k..(co + 1) * k], crow);
                }
            }
            col2im(
                &cols,
                &g,
                &mut gxp[n * g.cin * g.hp * g.wp..(n + 1) * g.cin * g.hp * g.wp],
            );
        }
    }
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, b) in gb.iter_mut().enumerate() {
                *b += go[(n * g.cout + co) * np..(n * g.cout + co + 1) * np]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
            }
        }
        Tensor::from_parts(vec![g.cout], gb)
    });
    Ok(ConvGrads {
        input: gxp.map(|gxp| Tensor::from_parts(x.shape().to_vec(), unpad_planes(&gxp, g.n * g.cin, g.h, g.w, pad))),
        weight: gw.map(|gw| Tensor::from_parts(weight.shape().to_vec(), gw)),
        bias: gb,
    })
}

#[derive(Clone, Copy, Debug)]
struct TransposeGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    hc: usize,
    wc: usize,
    oh: usize,
    ow: usize,
}

impl TransposeGeom {
    fn new<T: Scalar>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = x.dims4()?;
        let (wcin, cout, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::invalid(format!(
                "conv2d_transpose: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::invalid(format!(
                "conv2d_transpose: bias shape {:?}, expected [{cout}]",
                bias.shape()
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!("conv2d_transpose: unsupported stride {stride}")));
        }
        if output_padding >= stride {
            return Err(Error::invalid(format!(
                "conv2d_transpose: output_padding {output_padding} must be < stride {stride}"
            )));
        }
        let hc = (h - 1) * stride + kh + output_padding;
        let wc = (w - 1) * stride + kw + output_padding;
        if hc <= 2 * padding || wc <= 2 * padding {
            return Err(Error::invalid(format!(
                "conv2d_transpose: padding {padding} leaves no output for {h}x{w} input"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            hc,
            wc,
            oh: hc - 2 * padding,
            ow: wc - 2 * padding,
        })
    }

    fn k(&self) -> usize {
        self.cout * self.kh * self.kw
    }
}

/// Fractionally-strided convolution, `weight: [Cin, Cout, kh, kw]`.
///
/// Output extent is `(H-1)*stride - 2*padding + kh + output_padding`.
pub fn conv2d_transpose<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let g = TransposeGeom::new(x, weight, bias, stride, padding, output_padding)?;
    let (k, hw) = (g.k(), g.h * g.w);
    let xd = x.data();
    let wd = weight.data();
    let mut cols = vec![T::zero(); hw * k];
    let mut canvas = vec![T::zero(); g.cout * g.hc * g.wc];
    let mut out = vec![T::zero(); g.n * g.cout * g.oh * g.ow];
    for n in 0..g.n {
        cols.iter_mut().for_each(|c| *c = T::zero());
        canvas.iter_mut().for_each(|c| *c = T::zero());
        for p in 0..hw {
            let crow = &mut cols[p * k..(p + 1) * k];
            for ci in 0..g.cin {
                axpy(xd[(n * g.cin + ci) * hw + p], &wd[ci * k..(ci + 1) * k], crow);
            }
        }
        for ii in 0..g.h {
            for ij in 0..g.w {
                let crow = &cols[(ii * g.w + ij) * k..(ii * g.w + ij + 1) * k];
                let mut r = 0;
                for co in 0..g.cout {
                    let plane = &mut canvas[co * g.hc * g.wc..(co + 1) * g.hc * g.wc];
                    for ki in 0..g.kh {
                        let base = (ii * g.stride + ki) * g.wc + ij * g.stride;
                        for kj in 0..g.kw {
                            plane[base + kj] += crow[r + kj];
                        }
                        r += g.kw;
                    }
                }
            }
        }
        for co in 0..g.cout {
            let b = bias.data()[co];
            for oi in 0..g.oh {
                for oj in 0..g.ow {
                    out[((n * g.cout + co) * g.oh + oi) * g.ow + oj] =
                        canvas[co * g.hc * g.wc + (oi + g.padding) * g.wc + oj + g.padding] + b;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], out))
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = TransposeGeom::new(x, weight, bias, stride, padding, output_padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::invalid(format!(
            "conv2d_transpose backward: grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let (k, hw) = (g.k(), g.h * g.w);
    let (xd, wd, go) = (x.data(), weight.data(), grad_out.data());
    let [need_x, need_w, need_b] = need;
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![T::zero(); weight.numel()]);
    let mut gcanvas = vec![T::zero(); g.cout * g.hc * g.wc];
    let mut gcols = vec![T::zero(); hw * k];
    if need_x || need_w {
        for n in 0..g.n {
            for co in 0..g.cout {
                for oi in 0..g.oh {
                    let src = &go[((n * g.cout + co) * g.oh + oi) * g.ow..][..g.ow];
                    let dst = co * g.hc * g.wc + (oi + g.padding) * g.wc + g.padding;
                    gcanvas[dst..dst + g.ow].copy_from_slice(src);
                }
            }
            for ii in 0..g.h {
                for ij in 0..g.w {
                    let crow = &mut gcols[(ii * g.w + ij) * k..(ii * g.w + ij + 1) * k];
                    let mut r = 0;
                    for co in 0..g.cout {
                        let plane = &gcanvas[co * g.hc * g.wc..(co + 1) * g.hc * g.wc];
                        for ki in 0..g.kh {
                            let base = (ii * g.stride + ki) * g.wc + ij * g.stride;
                            crow[r..r + g.kw].copy_from_slice(&plane[base..base + g.kw]);
                            r += g.kw;
                        }
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                for ci in 0..g.cin {
                    let wrow = &wd[ci * k..(ci + 1) * k];
                    for p in 0..hw {
                        gx[(n * g.cin + ci) * hw + p] = dot(wrow, &gcols[p * k..(p + 1) * k]);
                    }
                }
            }
            if let Some(gw) = gw.as_mut() {
                for ci in 0..g.cin {
                    let grow = &mut gw[ci * k..(ci + 1) * k];
                    for p in 0..hw {
                        axpy(xd[(n * g.cin + ci) * hw + p], &gcols[p * k..(p + 1) * k], grow);
                    }
                }
            }
        }
    }
    let gb = need_b.then(|| {
        let plane = g.oh * g.ow;
        let mut gb = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, b) in gb.iter_mut().enumerate() {
                *b += go[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
            }
        }
        Tensor::from_parts(vec![g.cout], gb)
    });
    Ok(ConvGrads {
        input: gx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        weight: gw.map(|v| Tensor::from_parts(weight.shape().to_vec(), v)),
        bias: gb,
    })
}

/// Per-`(n, c)` standardization with population variance and no affine.
///
/// Returns the normalized output and the per-slice `1/sqrt(var + eps)`.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if eps <= 0.0 {
        return Err(Error::invalid(format!("instance_norm: eps must be > 0, got {eps}")));
    }
    let hw = h * w;
    let len = T::lit(hw as f64);
    let eps = T::lit(eps);
    let mut out = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); n * c];
    for (s, (src, dst)) in x.data().chunks_exact(hw).zip(out.chunks_exact_mut(hw)).enumerate() {
        let mean = src.iter().fold(T::zero(), |a, &v| a + v) / len;
        let var = src.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / len;
        let is = T::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * is;
        }
        inv_std[s] = is;
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        Tensor::from_parts(vec![n, c], inv_std),
    ))
}

/// Backward of [`instance_norm`] from its normalized output.
pub fn instance_norm_backward<T: Scalar>(
    normalized: &Tensor<T>,
    inv_std: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    normalized.expect_same_shape(grad_out)?;
    let (_, _, h, w) = normalized.dims4()?;
    let hw = h * w;
    let len = T::lit(hw as f64);
    let mut gx = vec![T::zero(); normalized.numel()];
    for (s, ((xh, g), dst)) in normalized
        .data()
        .chunks_exact(hw)
        .zip(grad_out.data().chunks_exact(hw))
        .zip(gx.chunks_exact_mut(hw))
        .enumerate()
    {
        let mg = g.iter().fold(T::zero(), |a, &v| a + v) / len;
        let mgx = g.iter().zip(xh).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv) / len;
        let is = inv_std.data()[s];
        for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xh) {
            *d = is * (gv - mg - xv * mgx);
        }
    }
    Ok(Tensor::from_parts(normalized.shape().to_vec(), gx))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// `ln(1 + e^v)` without overflow; equals `-ln(sigmoid(-v))`.
#[inline]
pub fn softplus_scalar<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Splits channels into the first `ceil(C/2)` and the remaining `floor(C/2)`.
pub fn channel_split<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, _, _) = x.dims4()?;
    if c < 2 {
        return Err(Error::invalid(format!(
            "channel_split: need at least 2 channels, got {c}"
        )));
    }
    let ca = c.div_ceil(2);
    Ok((channel_range(x, 0, ca)?, channel_range(x, ca, c - ca)?))
}

/// Channels `[start, start + count)` of an NCHW tensor.
pub fn channel_range<T: Scalar>(x: &Tensor<T>, start: usize, count: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if count == 0 || start + count > c {
        return Err(Error::invalid(format!(
            "channel range {start}+{count} out of bounds for {c} channels"
        )));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * count * hw);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + start) * hw..(b * c + start + count) * hw]);
    }
    Ok(Tensor::from_parts(vec![n, count, h, w], out))
}

pub fn channel_concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::invalid(format!(
            "channel_concat: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Ok(Tensor::from_parts(vec![n, ca + cb, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window convolution, independent of the im2col path.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        Tensor::from_fn(&[n, cout, oh, ow], |idx| {
            let oj = idx % ow;
            let oi = (idx / ow) % oh;
            let co = (idx / (ow * oh)) % cout;
            let bn = idx / (ow * oh * cout);
            let mut s = b.data()[co];
            for ci in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        let ij = (oj * stride + kj) as isize - pad as isize;
                        if ii < 0 || ij < 0 || ii >= h as isize || ij >= wd as isize {
                            continue;
                        }
                        s += w.data()[((co * cin + ci) * kh + ki) * kw + kj]
                            * x.data()[((bn * cin + ci) * h + ii as usize) * wd + ij as usize];
                    }
                }
            }
            s
        })
    }

    #[test]
    fn strided_zero_padded_window_sums() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 2, PaddingSpec::Zero(1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 6.0, 6.0, 9.0]);
        assert_eq!(conv_oracle(&x, &w, &b, 2, 1).data(), y.data());
    }

    #[test]
    fn identity_kernel_and_shape_contract() {
        let x = Tensor::<f32>::full(&[1, 1, 1, 1], 0.37);
        let w = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::<f32>::zeros(&[1]);
        assert_eq!(conv2d(&x, &w, &b, 1, PaddingSpec::None).unwrap(), x);

        let x = Tensor::<f32>::zeros(&[1, 3, 128, 128]);
        let w = Tensor::<f32>::zeros(&[32, 3, 7, 7]);
        let b = Tensor::<f32>::zeros(&[32]);
        let y = conv2d(&x, &w, &b, 1, PaddingSpec::Reflect(3)).unwrap();
        assert_eq!(y.shape(), &[1, 32, 128, 128]);
    }

    #[test]
    fn matches_direct_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
            let spec = if pad == 0 {
                PaddingSpec::None
            } else {
                PaddingSpec::Zero(pad)
            };
            let y = conv2d(&x, &w, &b, stride, spec).unwrap();
            let o = conv_oracle(&x, &w, &b, stride, pad);
            assert!(y.max_abs_diff(&o).unwrap() < 1e-12);
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64);
        let padded = pad_planes(x.data(), 1, 3, 3, PaddingSpec::Reflect(2));
        assert_eq!(&padded[2 * 7..3 * 7], &[3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(&padded[0..7], &[9.0, 8.0, 7.0, 8.0, 9.0, 8.0, 7.0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let w = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert!(conv2d(&x, &w, &b, 1, PaddingSpec::Reflect(3)).is_err());
        assert!(conv2d(&x, &w, &b, 3, PaddingSpec::None).is_err());
        let w_even = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &w_even, &b, 1, PaddingSpec::Reflect(1)).is_err());
        let w_bad = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w_bad, &b, 1, PaddingSpec::None).is_err());
        let wt = Tensor::<f32>::zeros(&[2, 1, 3, 3]);
        assert!(conv2d_transpose(&x, &wt, &b, 2, 1, 2).is_err());
    }

    #[test]
    fn transpose_shapes_and_impulse_identity() {
        let x = Tensor::<f32>::zeros(&[1, 64, 32, 32]);
        let w = Tensor::<f32>::zeros(&[64, 32, 3, 3]);
        let b = Tensor::<f32>::zeros(&[32]);
        let y = conv2d_transpose(&x, &w, &b, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 32, 64, 64]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[1, 1, 5, 5], 1.0, &mut rng);
        let mut imp = vec![0.0; 9];
        imp[4] = 1.0;
        let w = Tensor::new(vec![1, 1, 3, 3], imp).unwrap();
        let y = conv2d_transpose(&x, &w, &Tensor::zeros(&[1]), 1, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn transpose_is_adjoint_of_zero_padded_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, pad, op, size) in [(1, 1, 0, 5), (2, 1, 1, 6), (2, 1, 0, 5), (2, 0, 1, 6)] {
            let x = Tensor::<f64>::randn(&[1, 2, size, size], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut rng);
            // conv maps 3 -> 2 channels; its adjoint maps 2 -> 3
            let wc = w.clone();
            let zero3 = Tensor::<f64>::zeros(&[3]);
            let zero2 = Tensor::<f64>::zeros(&[2]);
            let tx = conv2d_transpose(&x, &w, &zero3, stride, pad, op).unwrap();
            let y = Tensor::<f64>::randn(tx.shape(), 1.0, &mut rng);
            let cy = conv2d(&y, &wc, &zero2, stride, PaddingSpec::Zero(pad)).unwrap();
            assert_eq!(cy.shape(), x.shape());
            let lhs = cy.dot(&x).unwrap();
            let rhs = y.dot(&tx).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn instance_norm_examples() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let (y, _) = instance_norm(&x, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);

        let c = Tensor::<f64>::full(&[1, 1, 2, 2], 5.0);
        assert_eq!(instance_norm(&c, 1e-5).unwrap().0, Tensor::zeros(&[1, 1, 2, 2]));

        let x = Tensor::<f64>::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, _) = instance_norm(&x, 1e-5).unwrap();
        assert!(y.mean().abs() < 1e-12);
        let var = y.data().iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!(var <= 1.0 && var > 1.0 - 10.0 * 1e-5 / (2.0 / 3.0));
    }

    #[test]
    fn activation_values() {
        let x = Tensor::<f64>::new(vec![3], vec![-1.0, 2.0, -10.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
        assert_eq!(leaky_relu(&x, 0.2).data()[2], -2.0);
        assert_eq!(tanh(&Tensor::<f64>::scalar(0.0)).item(), 0.0);
        assert_eq!(sigmoid(&Tensor::<f64>::scalar(0.0)).item(), 0.5);
        assert!(sigmoid_scalar(-800.0f64) >= 0.0);
        assert!(softplus_scalar(800.0f64).is_finite());
        assert!((softplus_scalar(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn split_concat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[2, 6, 3, 3], 1.0, &mut rng);
        let (a, b) = channel_split(&x).unwrap();
        assert_eq!(a.shape(), &[2, 3, 3, 3]);
        assert!(channel_concat(&a, &b).unwrap().bit_eq(&x));

        let x = Tensor::<f32>::randn(&[1, 5, 2, 2], 1.0, &mut rng);
        let (a, b) = channel_split(&x).unwrap();
        assert_eq!((a.shape()[1], b.shape()[1]), (3, 2));
        assert!(channel_concat(&a, &b).unwrap().bit_eq(&x));
    }
}
