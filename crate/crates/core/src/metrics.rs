//! PSNR, SSIM (with an analytic gradient for the training loss) and MS-SSIM.

use crate::error::{shape_err, Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const PSNR_CAP_DB: f64 = 100.0;

fn gaussian_taps<T: Scalar>() -> Vec<T> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| c(v / s)).collect()
}

/// Separable valid-mode Gaussian filtering of one plane.
fn blur_valid<T: Scalar>(p: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..h {
        let row = &p[y * w..(y + 1) * w];
        let dst = &mut tmp[y * ow..(y + 1) * ow];
        for (t, &tap) in taps.iter().enumerate() {
            for (d, &s) in dst.iter_mut().zip(&row[t..t + ow]) {
                *d += tap * s;
            }
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        for (t, &tap) in taps.iter().enumerate() {
            let src = &tmp[(y + t) * ow..(y + t + 1) * ow];
            for (o, &s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += tap * s;
            }
        }
    }
    out
}

/// Adjoint of [`blur_valid`].
fn blur_valid_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..oh {
        for (t, &tap) in taps.iter().enumerate() {
            let dst = &mut tmp[(y + t) * ow..(y + t + 1) * ow];
            for (d, &s) in dst.iter_mut().zip(&g[y * ow..(y + 1) * ow]) {
                *d += tap * s;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let src = &tmp[y * ow..(y + 1) * ow];
        for (t, &tap) in taps.iter().enumerate() {
            for (d, &v) in out[y * w + t..y * w + t + ow].iter_mut().zip(src) {
                *d += tap * v;
            }
        }
    }
    out
}

struct PlaneStats<T> {
    mu_x: Vec<T>,
    mu_y: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    b1: Vec<T>,
    b2: Vec<T>,
}

fn plane_stats<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, taps: &[T]) -> PlaneStats<T> {
    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let mu_x = blur_valid(x, h, w, taps);
    let mu_y = blur_valid(y, h, w, taps);
    let exx = blur_valid(&xx, h, w, taps);
    let eyy = blur_valid(&yy, h, w, taps);
    let exy = blur_valid(&xy, h, w, taps);
    let (c1, c2) = (c::<T>(SSIM_C1), c::<T>(SSIM_C2));
    let two = c::<T>(2.0);
    let n = mu_x.len();
    let mut st = PlaneStats {
        a1: Vec::with_capacity(n),
        a2: Vec::with_capacity(n),
        b1: Vec::with_capacity(n),
        b2: Vec::with_capacity(n),
        mu_x,
        mu_y,
    };
    for i in 0..n {
        let (mx, my) = (st.mu_x[i], st.mu_y[i]);
        let sxx = exx[i] - mx * mx;
        let syy = eyy[i] - my * my;
        let sxy = exy[i] - mx * my;
        st.a1.push(two * mx * my + c1);
        st.a2.push(two * sxy + c2);
        st.b1.push(mx * mx + my * my + c1);
        st.b2.push(sxx + syy + c2);
    }
    st
}

fn check_pair<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return shape_err(format!("metric inputs {:?} vs {:?}", x.shape(), y.shape()));
    }
    let [_, _, h, w] = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    Ok(())
}

/// Mean SSIM and mean contrast-structure term for each frame of the batch,
/// averaged over channels and valid window positions.
fn ssim_cs_per_frame<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Vec<(f64, f64)>> {
    check_pair(x, y)?;
    let [n, ch, h, w] = x.shape();
    let taps = gaussian_taps::<T>();
    let p = h * w;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let (mut ssum, mut csum, mut cnt) = (0.0f64, 0.0f64, 0usize);
        for cc in 0..ch {
            let base = (b * ch + cc) * p;
            let st = plane_stats(&x.data()[base..base + p], &y.data()[base..base + p], h, w, &taps);
            for i in 0..st.a1.len() {
                let cs = st.a2[i] / st.b2[i];
                ssum += (st.a1[i] * st.a2[i] / (st.b1[i] * st.b2[i])).to_f64_lossy();
                csum += cs.to_f64_lossy();
                cnt += 1;
            }
        }
        out.push((ssum / cnt as f64, csum / cnt as f64));
    }
    Ok(out)
}

/// SSIM of two single frames (or the mean over frames of a batch).
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let per = ssim_cs_per_frame(x, y)?;
    Ok(per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64)
}

/// Batch-mean SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_pair(x, y)?;
    let [n, ch, h, w] = x.shape();
    let taps = gaussian_taps::<T>();
    let p = h * w;
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let norm = T::one() / c::<T>((n * ch * oh * ow) as f64);
    let two = c::<T>(2.0);
    let mut total = T::zero();
    let mut grad = Tensor::zeros(x.shape());
    for b in 0..n {
        for cc in 0..ch {
            let base = (b * ch + cc) * p;
            let xs = &x.data()[base..base + p];
            let ys = &y.data()[base..base + p];
            let st = plane_stats(xs, ys, h, w, &taps);
            let m = st.a1.len();
            let mut d_mu = vec![T::zero(); m];
            let mut d_exx = vec![T::zero(); m];
            let mut d_exy = vec![T::zero(); m];
            for i in 0..m {
                let den = st.b1[i] * st.b2[i];
                let s = st.a1[i] * st.a2[i] / den;
                total += s;
                let (mx, my) = (st.mu_x[i], st.mu_y[i]);
                // dA1/dmx = 2my, dA2/dmx = -2my, dB1/dmx = 2mx, dB2/dmx = -2mx
                let ds_dmx = (two * my * st.a2[i] - two * my * st.a1[i]) / den
                    - s * (two * mx / st.b1[i] - two * mx / st.b2[i]);
                d_mu[i] = ds_dmx * norm;
                d_exx[i] = -s / st.b2[i] * norm;
                d_exy[i] = two * st.a1[i] / den * norm;
            }
            let g_mu = blur_valid_adjoint(&d_mu, h, w, &taps);
            let g_xx = blur_valid_adjoint(&d_exx, h, w, &taps);
            let g_xy = blur_valid_adjoint(&d_exy, h, w, &taps);
            let gd = &mut grad.data_mut()[base..base + p];
            for i in 0..p {
                gd[i] = g_mu[i] + two * xs[i] * g_xx[i] + ys[i] * g_xy[i];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Number of MS-SSIM scales that fit the frame (at most five).
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut s = 0;
    let (mut hh, mut ww) = (h, w);
    while s < MS_SSIM_WEIGHTS.len() && hh >= SSIM_WINDOW && ww >= SSIM_WINDOW {
        s += 1;
        hh /= 2;
        ww /= 2;
    }
    s
}

fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, ch, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, ch, oh, ow]);
    let q = c::<T>(0.25);
    for b in 0..n {
        for cc in 0..ch {
            for y in 0..oh {
                for xx in 0..ow {
                    let v = x.at(b, cc, 2 * y, 2 * xx)
                        + x.at(b, cc, 2 * y + 1, 2 * xx)
                        + x.at(b, cc, 2 * y, 2 * xx + 1)
                        + x.at(b, cc, 2 * y + 1, 2 * xx + 1);
                    out.set(b, cc, y, xx, v * q);
                }
            }
        }
    }
    out
}

/// Multi-scale SSIM. `scales = None` uses as many scales as the frame allows;
/// with fewer than five scales the leading weights are renormalised to sum to one.
/// Negative per-scale terms are clamped to zero before exponentiation; a single
/// scale returns plain SSIM.
pub fn ms_ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, scales: Option<usize>) -> Result<f64> {
    check_pair(x, y)?;
    let [n, _, h, w] = x.shape();
    let avail = ms_ssim_scales(h, w);
    let s = scales.unwrap_or(avail);
    if s == 0 || s > avail {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} frame supports {avail} MS-SSIM scales, {s} requested"
        )));
    }
    if s == 1 {
        return ssim(x, y);
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..s].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..s].iter().map(|v| v / wsum).collect();
    let mut acc = vec![1.0f64; n];
    let (mut xs, mut ys) = (x.clone(), y.clone());
    for (j, &wj) in weights.iter().enumerate() {
        let per = ssim_cs_per_frame(&xs, &ys)?;
        for (a, (sv, cs)) in acc.iter_mut().zip(per) {
            let term = if j + 1 == s { sv } else { cs };
            *a *= term.max(0.0).powf(wj);
        }
        if j + 1 < s {
            xs = avg_pool2(&xs);
            ys = avg_pool2(&ys);
        }
    }
    Ok(acc.iter().sum::<f64>() / n as f64)
}

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return shape_err(format!("mse: {:?} vs {:?}", x.shape(), y.shape()));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = (a - b).to_f64_lossy();
            d * d
        })
        .sum();
    Ok(s / x.len().max(1) as f64)
}

/// PSNR in dB on unit dynamic range, capped at 100 dB.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth_frame(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::<f64>::uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
        let mut t = Tensor::zeros([1, 3, h, w]);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let base = 0.5 + 0.3 * ((x as f64 * 0.2 + ch as f64).sin() * (y as f64 * 0.15).cos());
                    t.set(0, ch, y, x, (base + 0.1 * (noise.at(0, ch, y, x) - 0.5)).clamp(0.0, 1.0));
                }
            }
        }
        t
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = smooth_frame(1, 24, 24);
        let b = smooth_frame(2, 24, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        for &(a, b) in &[(0.2, 0.7), (0.5, 0.5), (0.0, 1.0), (0.9, 0.1)] {
            let x = Tensor::<f64>::full([1, 1, 16, 20], a);
            let y = Tensor::<f64>::full([1, 1, 16, 20], b);
            let want = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
            assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn ssim_rejects_small_frames() {
        let x = Tensor::<f64>::zeros([1, 1, 10, 40]);
        assert!(ssim(&x, &x).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let x = smooth_frame(3, 13, 14);
        let y = smooth_frame(4, 13, 14);
        let (v, g) = ssim_with_grad(&x, &y).unwrap();
        assert!((v - ssim(&x, &y).unwrap()).abs() < 1e-12);
        let h = 1e-4;
        let mut max_err = 0.0f64;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (ssim(&xp, &y).unwrap() - ssim(&xm, &y).unwrap()) / (2.0 * h);
            max_err = max_err.max((fd - g.data()[i]).abs());
        }
        assert!(max_err / g.max_abs() < 1e-5, "{max_err}");
    }

    #[test]
    fn psnr_closed_forms() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        let x = Tensor::<f64>::full([1, 3, 4, 4], 0.3);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    }

    #[test]
    fn ms_ssim_basics() {
        let a = smooth_frame(5, 32, 64);
        assert_eq!(ms_ssim_scales(32, 64), 2);
        assert!((ms_ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let b = smooth_frame(6, 32, 64);
        assert_eq!(ms_ssim(&a, &b, Some(1)).unwrap(), ssim(&a, &b).unwrap());
        assert_eq!(ms_ssim(&a, &b, None).unwrap(), ms_ssim(&b, &a, None).unwrap());
        assert!(ms_ssim(&a, &b, Some(3)).is_err());
    }

    #[test]
    fn ms_ssim_drops_with_noise() {
        let a = smooth_frame(7, 48, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise = Tensor::<f64>::uniform(a.shape(), -1.0, 1.0, &mut rng);
        let noisy = |amp: f64| a.zip_map(&noise, |v, n| (v + amp * n).clamp(0.0, 1.0)).unwrap();
        let s: Vec<f64> = [0.02, 0.08, 0.25]
            .iter()
            .map(|&amp| ms_ssim(&a, &noisy(amp), None).unwrap())
            .collect();
        assert!(s[0] > s[1] && s[1] > s[2], "{s:?}");
    }
}
