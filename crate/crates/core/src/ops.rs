//! Forward and backward kernels on plain tensors. The tape in [`crate::autodiff`]
//! wires these together; nothing here records anything.

use crate::error::{shape_err, Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Convolution kernel (O, I, Kh, Kw) and its per-output-channel bias stored as (1, O, 1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeight<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvWeight<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [o, _, _, _] = kernel.shape();
        if bias.shape() != [1, o, 1, 1] {
            return shape_err(format!(
                "bias {:?} does not match kernel {:?}",
                bias.shape(),
                kernel.shape()
            ));
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Self {
        Self {
            kernel: Tensor::zeros([out_ch, in_ch, kh, kw]),
            bias: Tensor::zeros([1, out_ch, 1, 1]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Index range of output columns whose input column `o + k - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

fn conv_out_dims(
    x: [usize; 4],
    k: [usize; 4],
    ph: usize,
    pw: usize,
) -> Result<(usize, usize)> {
    if x[1] != k[1] {
        return shape_err(format!(
            "conv2d: input has {} channels, kernel expects {}",
            x[1], k[1]
        ));
    }
    let (hp, wp) = (x[2] + 2 * ph, x[3] + 2 * pw);
    if k[2] > hp || k[3] > wp || k[2] == 0 || k[3] == 0 {
        return shape_err(format!(
            "conv2d: kernel {}x{} larger than padded input {hp}x{wp}",
            k[2], k[3]
        ));
    }
    Ok((hp - k[2] + 1, wp - k[3] + 1))
}

/// Cross-correlation with zero padding `(ph, pw)` plus optional (1, O, 1, 1) bias.
pub fn conv2d_padded<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    ph: usize,
    pw: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    let (oh, ow) = conv_out_dims(xs, ks, ph, pw)?;
    let [n, ci, h, w] = xs;
    let [co, _, kh, kw] = ks;
    if let Some(b) = bias {
        if b.shape() != [1, co, 1, 1] {
            return shape_err(format!("conv2d: bias {:?} for {co} outputs", b.shape()));
        }
    }
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let xd = x.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for b in 0..n {
        for o in 0..co {
            let obase = (b * co + o) * oh * ow;
            let oplane = &mut od[obase..obase + oh * ow];
            if let Some(bias) = bias {
                let bv = bias.data()[o];
                oplane.iter_mut().for_each(|v| *v = bv);
            }
            for i in 0..ci {
                let xbase = (b * ci + i) * h * w;
                let xplane = &xd[xbase..xbase + h * w];
                for dy in 0..kh {
                    let (y0, y1) = valid_range(oh, h, dy, ph);
                    for dx in 0..kw {
                        let wv = kd[((o * ci + i) * kh + dy) * kw + dx];
                        let (x0, x1) = valid_range(ow, w, dx, pw);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y + dy - ph;
                            let orow = &mut oplane[y * ow + x0..y * ow + x1];
                            let irow = &xplane[iy * w + x0 + dx - pw..iy * w + x1 + dx - pw];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Same-padding convolution for square kernels: `pad` on both spatial axes.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &ConvWeight<T>, pad: usize) -> Result<Tensor<T>> {
    conv2d_padded(x, &w.kernel, Some(&w.bias), pad, pad)
}

pub fn conv2d_backward_input<T: Scalar>(
    gy: &Tensor<T>,
    kernel: &Tensor<T>,
    x_shape: [usize; 4],
    ph: usize,
    pw: usize,
) -> Tensor<T> {
    let [n, ci, h, w] = x_shape;
    let [co, _, kh, kw] = kernel.shape();
    let [_, _, oh, ow] = gy.shape();
    let mut gx = Tensor::zeros(x_shape);
    let gd = gy.data();
    let kd = kernel.data();
    let xd = gx.data_mut();
    for b in 0..n {
        for o in 0..co {
            let gbase = (b * co + o) * oh * ow;
            let gplane = &gd[gbase..gbase + oh * ow];
            for i in 0..ci {
                let xbase = (b * ci + i) * h * w;
                let xplane = &mut xd[xbase..xbase + h * w];
                for dy in 0..kh {
                    let (y0, y1) = valid_range(oh, h, dy, ph);
                    for dx in 0..kw {
                        let wv = kd[((o * ci + i) * kh + dy) * kw + dx];
                        let (x0, x1) = valid_range(ow, w, dx, pw);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y + dy - ph;
                            let grow = &gplane[y * ow + x0..y * ow + x1];
                            let xrow =
                                &mut xplane[iy * w + x0 + dx - pw..iy * w + x1 + dx - pw];
                            for (xv, &gv) in xrow.iter_mut().zip(grow) {
                                *xv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Dot product with eight independent accumulators so the loop vectorises.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut acc = lanes.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

pub fn conv2d_backward_kernel<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    k_shape: [usize; 4],
    ph: usize,
    pw: usize,
) -> Tensor<T> {
    let [n, ci, h, w] = x.shape();
    let [co, _, kh, kw] = k_shape;
    let [_, _, oh, ow] = gy.shape();
    let mut gk = Tensor::zeros(k_shape);
    let gd = gy.data();
    let xd = x.data();
    let kd = gk.data_mut();
    for b in 0..n {
        for o in 0..co {
            let gbase = (b * co + o) * oh * ow;
            let gplane = &gd[gbase..gbase + oh * ow];
            for i in 0..ci {
                let xbase = (b * ci + i) * h * w;
                let xplane = &xd[xbase..xbase + h * w];
                for dy in 0..kh {
                    let (y0, y1) = valid_range(oh, h, dy, ph);
                    for dx in 0..kw {
                        let (x0, x1) = valid_range(ow, w, dx, pw);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let iy = y + dy - ph;
                            let grow = &gplane[y * ow + x0..y * ow + x1];
                            let xrow = &xplane[iy * w + x0 + dx - pw..iy * w + x1 + dx - pw];
                            acc += dot(grow, xrow);
                        }
                        kd[((o * ci + i) * kh + dy) * kw + dx] += acc;
                    }
                }
            }
        }
    }
    gk
}

/// Sum over batch and space per channel, returned as (1, C, 1, 1).
pub fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [n, ch, _, _] = g.shape();
    let p = g.plane();
    let mut out = Tensor::zeros([1, ch, 1, 1]);
    for b in 0..n {
        for cc in 0..ch {
            let base = (b * ch + cc) * p;
            out.data_mut()[cc] += g.data()[base..base + p].iter().copied().sum::<T>();
        }
    }
    out
}

/// `y = W x + b` for each batch row; `x` is (N, Din, 1, 1), `W` is (Dout, Din, 1, 1).
pub fn linear<T: Scalar>(x: &Tensor<T>, wt: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, din, xh, xw] = x.shape();
    let [dout, wdin, wh, ww] = wt.shape();
    if xh != 1 || xw != 1 || wh != 1 || ww != 1 || din != wdin {
        return shape_err(format!(
            "linear: input {:?} with weight {:?}",
            x.shape(),
            wt.shape()
        ));
    }
    if b.shape() != [1, dout, 1, 1] {
        return shape_err(format!("linear: bias {:?} for {dout} outputs", b.shape()));
    }
    let mut y = Tensor::zeros([n, dout, 1, 1]);
    for r in 0..n {
        let xr = &x.data()[r * din..(r + 1) * din];
        for o in 0..dout {
            let wr = &wt.data()[o * din..(o + 1) * din];
            y.data_mut()[r * dout + o] = dot(wr, xr) + b.data()[o];
        }
    }
    Ok(y)
}

pub fn linear_backward<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    wt: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, din, _, _] = x.shape();
    let dout = wt.shape()[0];
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(wt.shape());
    let mut gb = Tensor::zeros([1, dout, 1, 1]);
    for r in 0..n {
        let xr = &x.data()[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = gy.data()[r * dout + o];
            gb.data_mut()[o] += g;
            let wr = &wt.data()[o * din..(o + 1) * din];
            let gxr = &mut gx.data_mut()[r * din..(r + 1) * din];
            for (gxv, &wv) in gxr.iter_mut().zip(wr) {
                *gxv += g * wv;
            }
            let gwr = &mut gw.data_mut()[o * din..(o + 1) * din];
            for (gwv, &xv) in gwr.iter_mut().zip(xr) {
                *gwv += g * xv;
            }
        }
    }
    (gx, gw, gb)
}

/// `out[n][c][h*r+i][w*r+j] = x[n][c*r*r + i*r + j][h][w]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, ch, h, w] = x.shape();
    if r == 0 || ch % (r * r) != 0 {
        return shape_err(format!(
            "pixel_shuffle: {ch} channels not divisible by {r}^2"
        ));
    }
    let co = ch / (r * r);
    let mut out = Tensor::zeros([n, co, h * r, w * r]);
    for b in 0..n {
        for oc in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let ic = oc * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            let v = x.at(b, ic, y, xx);
                            out.set(b, oc, y * r + i, xx * r + j, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse index map of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, co, hr, wr] = y.shape();
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return shape_err(format!("pixel_unshuffle: {hr}x{wr} not divisible by {r}"));
    }
    let (h, w) = (hr / r, wr / r);
    let mut x = Tensor::zeros([n, co * r * r, h, w]);
    for b in 0..n {
        for oc in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let ic = oc * r * r + i * r + j;
                    for yy in 0..h {
                        for xx in 0..w {
                            x.set(b, ic, yy, xx, y.at(b, oc, yy * r + i, xx * r + j));
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Exact GELU, `x * Phi(x)` with the normal CDF evaluated through `erf`.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * c::<T>(0.5) * (T::one() + (x * c::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let cdf = c::<T>(0.5) * (T::one() + (x * c::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * c::<T>(0.5)).exp() * c::<T>(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Zero-pads both spatial axes by `p`.
pub fn pad_spatial<T: Scalar>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    let [n, ch, h, w] = x.shape();
    let mut out = Tensor::zeros([n, ch, h + 2 * p, w + 2 * p]);
    for b in 0..n {
        for cc in 0..ch {
            for y in 0..h {
                let src = x.index(b, cc, y, 0);
                let dst = out.index(b, cc, y + p, p);
                out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    out
}

pub fn crop_spatial<T: Scalar>(g: &Tensor<T>, p: usize) -> Tensor<T> {
    let [n, ch, hp, wp] = g.shape();
    let (h, w) = (hp - 2 * p, wp - 2 * p);
    let mut out = Tensor::zeros([n, ch, h, w]);
    for b in 0..n {
        for cc in 0..ch {
            for y in 0..h {
                let src = g.index(b, cc, y + p, p);
                let dst = out.index(b, cc, y, 0);
                out.data_mut()[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
            }
        }
    }
    out
}

/// Depthwise constant 3x3 filter as an (C, C, 3, 3) block-diagonal kernel.
pub fn depthwise_kernel<T: Scalar>(channels: usize, filter: &[f64; 9]) -> Tensor<T> {
    let mut k = Tensor::zeros([channels, channels, 3, 3]);
    for ch in 0..channels {
        for (s, &f) in filter.iter().enumerate() {
            k.set(ch, ch, s / 3, s % 3, c(f));
        }
    }
    k
}

/// Per-channel convolution with the same constant 3x3 filter.
pub fn depthwise_fixed<T: Scalar>(x: &Tensor<T>, filter: &[f64; 9], pad: usize) -> Result<Tensor<T>> {
    let [n, ch, h, w] = x.shape();
    let single = Tensor::from_vec([1, 1, 3, 3], filter.iter().map(|&v| c(v)).collect())?;
    let mut outs = Vec::with_capacity(n * ch);
    let mut dims = None;
    for b in 0..n {
        for cc in 0..ch {
            let base = (b * ch + cc) * h * w;
            let plane = Tensor::from_vec([1, 1, h, w], x.data()[base..base + h * w].to_vec())?;
            let o = conv2d_padded(&plane, &single, None, pad, pad)?;
            dims = Some((o.shape()[2], o.shape()[3]));
            outs.extend_from_slice(o.data());
        }
    }
    let (oh, ow) = dims.unwrap_or((0, 0));
    Tensor::from_vec([n, ch, oh, ow], outs)
}

pub fn depthwise_fixed_backward<T: Scalar>(
    gy: &Tensor<T>,
    filter: &[f64; 9],
    x_shape: [usize; 4],
    pad: usize,
) -> Tensor<T> {
    let [n, ch, h, w] = x_shape;
    let [_, _, oh, ow] = gy.shape();
    let single = Tensor::from_vec([1, 1, 3, 3], filter.iter().map(|&v| c(v)).collect())
        .expect("3x3 filter");
    let mut gx = Vec::with_capacity(n * ch * h * w);
    for b in 0..n {
        for cc in 0..ch {
            let base = (b * ch + cc) * oh * ow;
            let plane = Tensor::from_vec([1, 1, oh, ow], gy.data()[base..base + oh * ow].to_vec())
                .expect("plane");
            gx.extend_from_slice(
                conv2d_backward_input(&plane, &single, [1, 1, h, w], pad, pad).data(),
            );
        }
    }
    Tensor::from_vec(x_shape, gx).expect("shape")
}

/// `y[n][c] = s[c] * x[n][c]`, `s` of shape (1, C, 1, 1).
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ch, _, _] = x.shape();
    if s.shape() != [1, ch, 1, 1] {
        return shape_err(format!("channel_scale: {:?} for {ch} channels", s.shape()));
    }
    let p = x.plane();
    let mut y = x.clone();
    for b in 0..n {
        for cc in 0..ch {
            let sv = s.data()[cc];
            let base = (b * ch + cc) * p;
            y.data_mut()[base..base + p].iter_mut().for_each(|v| *v *= sv);
        }
    }
    Ok(y)
}

/// Centre-aligns a kernel with Kh, Kw in {1, 3} inside a zero 3x3 kernel.
pub fn pad_kernel_3x3<T: Scalar>(k: &Tensor<T>) -> Result<Tensor<T>> {
    let [o, i, kh, kw] = k.shape();
    if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
        return Err(Error::InvalidArgument(format!(
            "pad_to_3x3: unsupported kernel size {kh}x{kw}"
        )));
    }
    let (oy, ox) = ((3 - kh) / 2, (3 - kw) / 2);
    let mut out = Tensor::zeros([o, i, 3, 3]);
    let (src, dst) = (k.data(), out.data_mut());
    for (d, s) in dst.chunks_exact_mut(9).zip(src.chunks_exact(kh * kw)) {
        for y in 0..kh {
            d[(y + oy) * 3 + ox..(y + oy) * 3 + ox + kw].copy_from_slice(&s[y * kw..(y + 1) * kw]);
        }
    }
    Ok(out)
}

pub fn unpad_kernel<T: Scalar>(g: &Tensor<T>, kh: usize, kw: usize) -> Tensor<T> {
    let [o, i, _, _] = g.shape();
    let (oy, ox) = ((3 - kh) / 2, (3 - kw) / 2);
    let mut out = Tensor::zeros([o, i, kh, kw]);
    let (src, dst) = (g.data(), out.data_mut());
    for (d, s) in dst.chunks_exact_mut(kh * kw).zip(src.chunks_exact(9)) {
        for y in 0..kh {
            d[y * kw..(y + 1) * kw].copy_from_slice(&s[(y + oy) * 3 + ox..(y + oy) * 3 + ox + kw]);
        }
    }
    out
}

fn compose_dims(a: [usize; 4], b: [usize; 4]) -> Result<(usize, usize)> {
    if a[1] != b[0] {
        return shape_err(format!("compose: inner channels {:?} vs {:?}", a, b));
    }
    let a_point = a[2] == 1 && a[3] == 1;
    let b_point = b[2] == 1 && b[3] == 1;
    if !a_point && !b_point {
        return shape_err(format!(
            "compose: one side must be 1x1, got {:?} and {:?}",
            a, b
        ));
    }
    Ok(if a_point { (b[2], b[3]) } else { (a[2], a[3]) })
}

/// Kernel of the composition "inner conv, then outer conv" when one of them is
/// pointwise: `out[o][i][s] = sum_m outer[o][m][s] * inner[m][i][s]`, with the
/// 1x1 side broadcast across space.
pub fn compose_pointwise<T: Scalar>(outer: &Tensor<T>, inner: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, b) = (outer.shape(), inner.shape());
    let (kh, kw) = compose_dims(a, b)?;
    let (o, m, i) = (a[0], a[1], b[1]);
    let sp = kh * kw;
    let mut out = Tensor::zeros([o, i, kh, kw]);
    let (ad, bd) = (outer.data(), inner.data());
    let od = out.data_mut();
    if a[2] * a[3] == 1 {
        // out[o] += outer[o][m] * inner[m], rows of length i * sp.
        let row = i * sp;
        for oo in 0..o {
            let orow = &mut od[oo * row..(oo + 1) * row];
            for mm in 0..m {
                let av = ad[oo * m + mm];
                for (d, &v) in orow.iter_mut().zip(&bd[mm * row..(mm + 1) * row]) {
                    *d += av * v;
                }
            }
        }
    } else {
        // out[o][i] += inner[m][i] * outer[o][m], rows of length sp.
        for oo in 0..o {
            for mm in 0..m {
                let arow = &ad[(oo * m + mm) * sp..(oo * m + mm + 1) * sp];
                for ii in 0..i {
                    let bv = bd[mm * i + ii];
                    for (d, &v) in od[(oo * i + ii) * sp..(oo * i + ii + 1) * sp].iter_mut().zip(arow) {
                        *d += bv * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn compose_pointwise_backward<T: Scalar>(
    g: &Tensor<T>,
    outer: &Tensor<T>,
    inner: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (a, b) = (outer.shape(), inner.shape());
    let (o, m, i) = (a[0], a[1], b[1]);
    let sp = g.shape()[2] * g.shape()[3];
    let mut ga = Tensor::zeros(a);
    let mut gb = Tensor::zeros(b);
    let (ad, bd, gd) = (outer.data(), inner.data(), g.data());
    if a[2] * a[3] == 1 {
        let row = i * sp;
        for oo in 0..o {
            let grow = &gd[oo * row..(oo + 1) * row];
            for mm in 0..m {
                let brow = &bd[mm * row..(mm + 1) * row];
                ga.data_mut()[oo * m + mm] = dot(grow, brow);
                let av = ad[oo * m + mm];
                for (d, &v) in gb.data_mut()[mm * row..(mm + 1) * row].iter_mut().zip(grow) {
                    *d += av * v;
                }
            }
        }
    } else {
        for oo in 0..o {
            for mm in 0..m {
                let arow = &ad[(oo * m + mm) * sp..(oo * m + mm + 1) * sp];
                for ii in 0..i {
                    let grow = &gd[(oo * i + ii) * sp..(oo * i + ii + 1) * sp];
                    let bv = bd[mm * i + ii];
                    gb.data_mut()[mm * i + ii] += dot(grow, arow);
                    for (d, &v) in ga.data_mut()[(oo * m + mm) * sp..(oo * m + mm + 1) * sp].iter_mut().zip(grow) {
                        *d += bv * v;
                    }
                }
            }
        }
    }
    (ga, gb)
}

/// Output bias produced by passing a constant per-channel input `b` through kernel `k`:
/// `out[o] = sum_m b[m] * sum_s k[o][m][s]`.
pub fn bias_through<T: Scalar>(k: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [o, m, kh, kw] = k.shape();
    if b.shape() != [1, m, 1, 1] {
        return shape_err(format!("bias_through: bias {:?} for kernel {:?}", b.shape(), k.shape()));
    }
    let sp = kh * kw;
    let mut out = Tensor::zeros([1, o, 1, 1]);
    for oo in 0..o {
        let mut acc = T::zero();
        for mm in 0..m {
            let base = (oo * m + mm) * sp;
            let ksum: T = k.data()[base..base + sp].iter().copied().sum();
            acc += b.data()[mm] * ksum;
        }
        out.data_mut()[oo] = acc;
    }
    Ok(out)
}

pub fn bias_through_backward<T: Scalar>(
    g: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [o, m, kh, kw] = k.shape();
    let sp = kh * kw;
    let mut gk = Tensor::zeros(k.shape());
    let mut gb = Tensor::zeros(b.shape());
    for oo in 0..o {
        let gv = g.data()[oo];
        for mm in 0..m {
            let base = (oo * m + mm) * sp;
            let ksum: T = k.data()[base..base + sp].iter().copied().sum();
            gb.data_mut()[mm] += gv * ksum;
            let bv = b.data()[mm];
            gk.data_mut()[base..base + sp].iter_mut().for_each(|v| *v += gv * bv);
        }
    }
    (gk, gb)
}

/// Block-diagonal kernel `K[o][o] = s[o] * filter`.
pub fn scaled_filter_kernel<T: Scalar>(s: &Tensor<T>, filter: &[f64; 9]) -> Tensor<T> {
    let ch = s.shape()[1];
    let mut k = Tensor::zeros([ch, ch, 3, 3]);
    for o in 0..ch {
        let sv = s.data()[o];
        for (p, &f) in filter.iter().enumerate() {
            k.set(o, o, p / 3, p % 3, sv * c(f));
        }
    }
    k
}

pub fn scaled_filter_kernel_backward<T: Scalar>(g: &Tensor<T>, filter: &[f64; 9]) -> Tensor<T> {
    let ch = g.shape()[0];
    let mut gs = Tensor::zeros([1, ch, 1, 1]);
    for o in 0..ch {
        let mut acc = T::zero();
        for (p, &f) in filter.iter().enumerate() {
            acc += g.at(o, o, p / 3, p % 3) * c(f);
        }
        gs.data_mut()[o] = acc;
    }
    gs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop reference convolution.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let [n, ci, h, w] = x.shape();
        let [co, _, kh, kw] = k.shape();
        let (oh, ow) = (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
        let mut out = Tensor::zeros([n, co, oh, ow]);
        for bb in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for i in 0..ci {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = y as isize + dy as isize - pad as isize;
                                    let ix = xx as isize + dx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += k.at(o, i, dy, dx) * x.at(bb, i, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(bb, o, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let w = ConvWeight::new(Tensor::full([1, 1, 3, 3], 1.0), Tensor::zeros([1, 1, 1, 1])).unwrap();
        let y = conv2d(&x, &w, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform([2, 1, 4, 5], -1.0, 1.0, &mut rng);
        let w = ConvWeight::new(Tensor::full([1, 1, 1, 1], 1.0), Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert_eq!(conv2d(&x, &w, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_loop_nest_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..200 {
            let ci = 1 + case % 4;
            let co = 1 + (case / 4) % 4;
            let (h, w) = (1 + case % 8, 1 + (case * 7) % 8);
            let (k, pad) = if case % 3 == 0 { (1, 0) } else { (3, 1) };
            let x = Tensor::<f64>::uniform([1 + case % 2, ci, h, w], -1.0, 1.0, &mut rng);
            let kt = Tensor::<f64>::uniform([co, ci, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::uniform([1, co, 1, 1], -1.0, 1.0, &mut rng);
            let got = conv2d_padded(&x, &kt, Some(&b), pad, pad).unwrap();
            let want = conv_oracle(&x, &kt, &b, pad);
            assert!(crate::tensor::rel_err(&got, &want) <= 1e-12, "case {case}");
            let got32 = conv2d_padded(&x.cast::<f32>(), &kt.cast(), Some(&b.cast()), pad, pad).unwrap();
            assert!(crate::tensor::rel_err(&got32.cast::<f64>(), &want) <= 1e-6, "case {case} f32");
        }
    }

    #[test]
    fn conv_spec_case_2x5x5_to_3() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform([3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform([1, 3, 1, 1], -1.0, 1.0, &mut rng);
        let got = conv2d_padded(&x.cast::<f32>(), &k.cast(), Some(&b.cast()), 1, 1).unwrap();
        assert_eq!(got.shape(), [1, 3, 5, 5]);
        assert!(crate::tensor::rel_err(&got.cast(), &conv_oracle(&x, &k, &b, 1)) <= 1e-6);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros([1, 2, 3, 3]);
        let k = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(conv2d_padded(&x, &k, None, 1, 1).is_err());
        let k = Tensor::<f32>::zeros([1, 2, 3, 3]);
        let small = Tensor::<f32>::zeros([1, 2, 1, 1]);
        assert!(conv2d_padded(&small, &k, None, 0, 0).is_err());
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::<f32>::vector(vec![1.0, 1.0]);
        let w = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![1.0]);
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[3.0]);

        let mut eye = Tensor::<f32>::zeros([3, 3, 1, 1]);
        for i in 0..3 {
            eye.set(i, i, 0, 0, 1.0);
        }
        let x = Tensor::vector(vec![0.5, -2.0, 7.0]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros([1, 3, 1, 1])).unwrap(), x);
        assert!(linear(&x, &Tensor::zeros([2, 2, 1, 1]), &Tensor::zeros([1, 2, 1, 1])).is_err());
    }

    #[test]
    fn linear_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::uniform([1, 8, 1, 1], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform([16, 8, 1, 1], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform([1, 16, 1, 1], -1.0, 1.0, &mut rng);
        let mut want = Tensor::<f64>::zeros([1, 16, 1, 1]);
        for o in 0..16 {
            let mut acc = b.data()[o];
            for i in 0..8 {
                acc += w.data()[o * 8 + i] * x.data()[i];
            }
            want.data_mut()[o] = acc;
        }
        let got = linear(&x.cast::<f32>(), &w.cast(), &b.cast()).unwrap();
        assert!(crate::tensor::rel_err(&got.cast(), &want) <= 1e-6);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = Tensor::<f32>::from_vec([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(pixel_shuffle(&Tensor::<f32>::zeros([1, 3, 1, 1]), 2).is_err());
    }

    #[test]
    fn pixel_shuffle_inverse_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform([1, 18, 4, 4], -1.0, 1.0, &mut rng);
        let y = pixel_shuffle(&x, 3).unwrap();
        assert_eq!(y.shape(), [1, 2, 12, 12]);
        assert_eq!(pixel_unshuffle(&y, 3).unwrap(), x);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(6.0f64) - 6.0).abs() < 1e-3);
        // 1 * Phi(1) = 0.5 * (1 + erf(1/sqrt 2))
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_scalar(1.0f32) - 0.8413).abs() < 1e-4);
    }

    #[test]
    fn pad_kernel_alignment() {
        let row = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_kernel_3x3(&row).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let col = Tensor::<f32>::from_vec([1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_kernel_3x3(&col).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 3.0, 0.0]);
        let pt = Tensor::<f32>::full([1, 1, 1, 1], 5.0);
        let p = pad_kernel_3x3(&pt).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
        let sq = Tensor::<f32>::full([2, 1, 3, 3], 0.5);
        assert_eq!(pad_kernel_3x3(&sq).unwrap(), sq);
        assert!(pad_kernel_3x3(&Tensor::<f32>::zeros([1, 1, 5, 5])).is_err());
    }
}
