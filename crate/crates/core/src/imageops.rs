//! Deterministic pixel-level primitives: color conversion, resampling,
//! unsharp masking, PSNR.
//!
//! Conventions fixed here for reproducibility:
//! - YCbCr uses the full-range BT.601 matrix (`KR = 0.299`, `KG = 0.587`,
//!   `KB = 0.114`, chroma offset `0.5` in normalized units).
//! - Resampling is separable with per-output-pixel weight normalization
//!   (unit DC gain) and symmetric-reflect boundary handling. Kernels are
//!   scaled by `max(1, 1/scale)` so downscaling is antialiased.
//! - Output dims are `round(dim * scale)` with round-half-away-from-zero.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::{Colorspace, ImagePlane, ImageStack};

pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;

/// PSNR value reported when the mean squared error is exactly zero.
pub const PSNR_CAP_DB: f64 = f64::INFINITY;

/// Convert a 3-plane RGB stack to full-range BT.601 YCbCr.
pub fn rgb_to_ycbcr(img: &ImageStack) -> Result<ImageStack> {
    if img.channels() != 3 || img.colorspace() != Colorspace::Rgb {
        return Err(Error::invalid("rgb_to_ycbcr expects a 3-plane RGB stack"));
    }
    let (h, w) = (img.height(), img.width());
    let (r, g, b) = (img.plane(0).data(), img.plane(1).data(), img.plane(2).data());
    let mut y = Array2::zeros((h, w));
    let mut cb = Array2::zeros((h, w));
    let mut cr = Array2::zeros((h, w));
    for iy in 0..h {
        for ix in 0..w {
            let (rv, gv, bv) = (r[[iy, ix]], g[[iy, ix]], b[[iy, ix]]);
            let yv = KR * rv + KG * gv + KB * bv;
            y[[iy, ix]] = yv;
            cb[[iy, ix]] = 0.5 + 0.5 * (bv - yv) / (1.0 - KB);
            cr[[iy, ix]] = 0.5 + 0.5 * (rv - yv) / (1.0 - KR);
        }
    }
    Ok(ImageStack::new(
        vec![
            ImagePlane::new(y)?,
            ImagePlane::new(cb)?,
            ImagePlane::new(cr)?,
        ],
        Colorspace::Ycbcr,
    )?)
}

/// Inverse of [`rgb_to_ycbcr`]; round-trips within 1e-6 per sample.
pub fn ycbcr_to_rgb(img: &ImageStack) -> Result<ImageStack> {
    if img.channels() != 3 || img.colorspace() != Colorspace::Ycbcr {
        return Err(Error::invalid("ycbcr_to_rgb expects a 3-plane YCbCr stack"));
    }
    let (h, w) = (img.height(), img.width());
    let (y, cb, cr) = (img.plane(0).data(), img.plane(1).data(), img.plane(2).data());
    let mut r = Array2::zeros((h, w));
    let mut g = Array2::zeros((h, w));
    let mut b = Array2::zeros((h, w));
    for iy in 0..h {
        for ix in 0..w {
            let yv = y[[iy, ix]];
            let cbv = cb[[iy, ix]] - 0.5;
            let crv = cr[[iy, ix]] - 0.5;
            let rv = yv + 2.0 * (1.0 - KR) * crv;
            let bv = yv + 2.0 * (1.0 - KB) * cbv;
            let gv = (yv - KR * rv - KB * bv) / KG;
            r[[iy, ix]] = rv;
            g[[iy, ix]] = gv;
            b[[iy, ix]] = bv;
        }
    }
    Ok(ImageStack::new(
        vec![
            ImagePlane::new(r)?,
            ImagePlane::new(g)?,
            ImagePlane::new(b)?,
        ],
        Colorspace::Rgb,
    )?)
}

/// Resampling kernel selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeKernel {
    Bicubic,
    Bilinear,
    Area,
    Lanczos,
}

impl ResizeKernel {
    fn support(self) -> f64 {
        match self {
            ResizeKernel::Bicubic => 2.0,
            ResizeKernel::Bilinear => 1.0,
            ResizeKernel::Area => 0.5,
            ResizeKernel::Lanczos => 3.0,
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            ResizeKernel::Bicubic => bicubic_kernel(x),
            ResizeKernel::Bilinear => {
                let a = x.abs();
                if a < 1.0 {
                    1.0 - a
                } else {
                    0.0
                }
            }
            ResizeKernel::Area => {
                if (-0.5..0.5).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            ResizeKernel::Lanczos => lanczos_kernel(x, 3.0),
        }
    }
}

// Catmull-Rom cubic (a = -0.5), the common "bicubic".
fn bicubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn lanczos_kernel(x: f64, a: f64) -> f64 {
    if x.abs() < a {
        sinc(x) * sinc(x / a)
    } else {
        0.0
    }
}

/// Map an out-of-range index back inside `[0, n)` by symmetric reflection
/// (edge sample repeated: ..., x1, x0 | x0, x1, ...).
pub(crate) fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n >= 1);
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

struct AxisTap {
    start: isize,
    weights: Vec<f64>,
}

fn build_axis_taps(n_in: usize, n_out: usize, kernel: ResizeKernel) -> Vec<AxisTap> {
    let scale = n_out as f64 / n_in as f64;
    // Widen the kernel when shrinking so it acts as an antialias filter.
    let fscale = (1.0 / scale).max(1.0);
    let support = kernel.support() * fscale;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let start = (center - support).ceil() as isize;
            let end = (center + support).floor() as isize;
            let mut weights: Vec<f64> = (start..=end)
                .map(|i| kernel.eval((i as f64 - center) / fscale))
                .collect();
            let sum: f64 = weights.iter().sum();
            debug_assert!(sum > 0.0, "kernel taps sum to zero");
            for w in &mut weights {
                *w /= sum;
            }
            AxisTap { start, weights }
        })
        .collect()
}

fn resample_plane(plane: &Array2<f64>, out_h: usize, out_w: usize, kernel: ResizeKernel) -> Array2<f64> {
    let (h, w) = plane.dim();
    let row_taps = build_axis_taps(w, out_w, kernel);
    let col_taps = build_axis_taps(h, out_h, kernel);

    // Horizontal pass, then vertical.
    let mut mid = Array2::zeros((h, out_w));
    for y in 0..h {
        for (ox, tap) in row_taps.iter().enumerate() {
            let mut acc = 0.0;
            for (k, &wt) in tap.weights.iter().enumerate() {
                let ix = reflect_index(tap.start + k as isize, w);
                acc += wt * plane[[y, ix]];
            }
            mid[[y, ox]] = acc;
        }
    }
    let mut out = Array2::zeros((out_h, out_w));
    for (oy, tap) in col_taps.iter().enumerate() {
        for ox in 0..out_w {
            let mut acc = 0.0;
            for (k, &wt) in tap.weights.iter().enumerate() {
                let iy = reflect_index(tap.start + k as isize, h);
                acc += wt * mid[[iy, ox]];
            }
            out[[oy, ox]] = acc;
        }
    }
    out
}

/// Resize to an exact target size, clamped to `[0, 1]`.
pub fn resize_to(img: &ImageStack, out_h: usize, out_w: usize, kernel: ResizeKernel) -> Result<ImageStack> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let planes = img
        .planes()
        .iter()
        .map(|p| {
            let mut r = resample_plane(p.data(), out_h, out_w, kernel);
            r.mapv_inplace(|v| v.clamp(0.0, 1.0));
            ImagePlane::new(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageStack::new(planes, img.colorspace())?)
}

/// Resize by a positive scale factor; output dims are `round(dim * scale)`.
pub fn resize(img: &ImageStack, scale: f64, kernel: ResizeKernel) -> Result<ImageStack> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("resize scale must be positive, got {scale}")));
    }
    let out_h = (img.height() as f64 * scale).round() as usize;
    let out_w = (img.width() as f64 * scale).round() as usize;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "resize by {scale} of {}x{} degenerates to {}x{}",
            img.height(),
            img.width(),
            out_h,
            out_w
        )));
    }
    resize_to(img, out_h, out_w, kernel)
}

/// Normalized 1-d Gaussian taps with radius `max(1, ceil(3 sigma))`.
pub(crate) fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut taps: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

fn gaussian_blur_plane(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let taps = gaussian_taps(sigma);
    let radius = taps.len() / 2;
    let (h, w) = plane.dim();
    let mut mid = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let ix = reflect_index(x as isize + k as isize - radius as isize, w);
                acc += t * plane[[y, ix]];
            }
            mid[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let iy = reflect_index(y as isize + k as isize - radius as isize, h);
                acc += t * mid[[iy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with reflect boundaries.
pub fn gaussian_blur(img: &ImageStack, sigma: f64) -> Result<ImageStack> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("blur sigma must be positive"));
    }
    let planes = img
        .planes()
        .iter()
        .map(|p| ImagePlane::new(gaussian_blur_plane(p.data(), sigma)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageStack::new(planes, img.colorspace())?)
}

/// Unsharp masking: `img + weight * mask` where `mask = img - blur(img)`,
/// applied only where `|mask| > threshold`, then clamped to `[0, 1]`.
pub fn unsharp_mask(img: &ImageStack, sigma: f64, weight: f64, threshold: f64) -> Result<ImageStack> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("usm sigma must be positive"));
    }
    if weight < 0.0 || threshold < 0.0 {
        return Err(Error::invalid("usm weight and threshold must be nonnegative"));
    }
    let blurred = gaussian_blur(img, sigma)?;
    let planes = img
        .planes()
        .iter()
        .zip(blurred.planes())
        .map(|(p, bp)| {
            let mut out = p.data().clone();
            ndarray::Zip::from(&mut out).and(bp.data()).for_each(|v, &b| {
                let mask = *v - b;
                if mask.abs() > threshold {
                    *v = (*v + weight * mask).clamp(0.0, 1.0);
                }
            });
            ImagePlane::new(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageStack::new(planes, img.colorspace())?)
}

/// Channel selection for PSNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsnrMode {
    /// Mean squared error over all supplied planes (default).
    #[default]
    Rgb,
    /// Convert both stacks to YCbCr and score the Y plane only.
    Luma,
}

/// PSNR = `10 log10(peak^2 / MSE)` in dB over all planes.
/// Identical images return [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageStack, b: &ImageStack, peak: f64) -> Result<f64> {
    psnr_with_mode(a, b, peak, PsnrMode::Rgb)
}

pub fn psnr_with_mode(a: &ImageStack, b: &ImageStack, peak: f64, mode: PsnrMode) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr peak must be positive"));
    }
    if a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width() {
        return Err(Error::invalid(format!(
            "psnr dims mismatch: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    let (xa, xb);
    let (pa, pb): (&ImageStack, &ImageStack) = match mode {
        PsnrMode::Rgb => (a, b),
        PsnrMode::Luma => {
            xa = rgb_to_ycbcr(a)?;
            xb = rgb_to_ycbcr(b)?;
            (&xa, &xb)
        }
    };
    let plane_range = match mode {
        PsnrMode::Rgb => 0..pa.channels(),
        PsnrMode::Luma => 0..1,
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in plane_range {
        let (da, db) = (pa.plane(c).data(), pb.plane(c).data());
        for (va, vb) in da.iter().zip(db.iter()) {
            let d = va - vb;
            sum += d * d;
        }
        count += da.len();
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rgb(r: f64, g: f64, b: f64, h: usize, w: usize) -> ImageStack {
        ImageStack::new(
            vec![
                ImagePlane::constant(h, w, r),
                ImagePlane::constant(h, w, g),
                ImagePlane::constant(h, w, b),
            ],
            Colorspace::Rgb,
        )
        .unwrap()
    }

    fn random_rgb(h: usize, w: usize, seed: u64) -> ImageStack {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageStack::new(
            (0..3)
                .map(|_| ImagePlane::from_fn(h, w, |_, _| rng.random_range(0.0..1.0)))
                .collect(),
            Colorspace::Rgb,
        )
        .unwrap()
    }

    #[test]
    fn ycbcr_black_white_gray() {
        for (v, name) in [(0.0, "black"), (1.0, "white"), (0.37, "gray")] {
            let out = rgb_to_ycbcr(&rgb(v, v, v, 2, 2)).unwrap();
            for (c, expect) in [(0usize, v), (1, 0.5), (2, 0.5)] {
                for s in out.plane(c).data().iter() {
                    assert_abs_diff_eq!(*s, expect, epsilon = 1e-12);
                }
            }
            let _ = name;
        }
    }

    #[test]
    fn ycbcr_round_trip() {
        let img = random_rgb(9, 7, 3);
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img).unwrap()).unwrap();
        for c in 0..3 {
            for (a, b) in img.plane(c).data().iter().zip(back.plane(c).data().iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ycbcr_rejects_wrong_plane_count() {
        let one = ImageStack::new(vec![ImagePlane::constant(2, 2, 0.5)], Colorspace::Rgb).unwrap();
        assert!(rgb_to_ycbcr(&one).is_err());
    }

    #[test]
    fn resize_preserves_constants() {
        let img = rgb(0.42, 0.42, 0.42, 10, 14);
        for k in [
            ResizeKernel::Bicubic,
            ResizeKernel::Bilinear,
            ResizeKernel::Area,
            ResizeKernel::Lanczos,
        ] {
            for scale in [0.25, 0.5, 1.3, 2.0] {
                let out = resize(&img, scale, k).unwrap();
                for s in out.plane(0).data().iter() {
                    assert_abs_diff_eq!(*s, 0.42, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn resize_identity_at_scale_one() {
        let img = random_rgb(11, 9, 5);
        for k in [
            ResizeKernel::Bicubic,
            ResizeKernel::Bilinear,
            ResizeKernel::Area,
            ResizeKernel::Lanczos,
        ] {
            let out = resize(&img, 1.0, k).unwrap();
            for c in 0..3 {
                for (a, b) in img.plane(c).data().iter().zip(out.plane(c).data().iter()) {
                    assert!((a - b).abs() < 1e-6, "kernel {k:?}");
                }
            }
        }
    }

    #[test]
    fn area_downscale_of_checkerboard_is_mean() {
        let p = ImagePlane::from_fn(2, 2, |y, x| ((y + x) % 2) as f64);
        let img = ImageStack::new(vec![p.clone(), p.clone(), p], Colorspace::Rgb).unwrap();
        let out = resize(&img, 0.5, ResizeKernel::Area).unwrap();
        assert_eq!((out.height(), out.width()), (1, 1));
        assert_abs_diff_eq!(out.plane(0).data()[[0, 0]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn resize_rejects_degenerate_output() {
        let img = rgb(0.5, 0.5, 0.5, 4, 4);
        assert!(resize(&img, 0.01, ResizeKernel::Bilinear).is_err());
    }

    #[test]
    fn usm_constant_and_zero_weight_are_noops() {
        let img = rgb(0.3, 0.3, 0.3, 8, 8);
        let out = unsharp_mask(&img, 1.5, 1.0, 0.0).unwrap();
        for (a, b) in img.plane(0).data().iter().zip(out.plane(0).data().iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        let textured = random_rgb(8, 8, 7);
        let out = unsharp_mask(&textured, 1.5, 0.0, 0.0).unwrap();
        assert_eq!(textured, out);
    }

    #[test]
    fn usm_sharpens_a_delta() {
        // Single bright pixel on black: the masked residual at the center is
        // value * (1 - w0) where w0 is the center weight of the separable
        // Gaussian, so the output there strictly increases.
        let sigma = 2.0;
        let value = 0.6;
        let weight = 0.5;
        let mut plane = Array2::zeros((17, 17));
        plane[[8, 8]] = value;
        let img = ImageStack::new(
            vec![
                ImagePlane::new(plane.clone()).unwrap(),
                ImagePlane::new(plane.clone()).unwrap(),
                ImagePlane::new(plane).unwrap(),
            ],
            Colorspace::Rgb,
        )
        .unwrap();
        let taps = gaussian_taps(sigma);
        let w0 = taps[taps.len() / 2];
        let expected = value + weight * (value - value * w0 * w0);
        let out = unsharp_mask(&img, sigma, weight, 0.0).unwrap();
        let got = out.plane(0).data()[[8, 8]];
        assert!(got > value);
        assert_abs_diff_eq!(got, expected, epsilon = 1e-9);
    }

    #[test]
    fn usm_threshold_gates_small_residuals() {
        let img = random_rgb(12, 12, 11);
        let out = unsharp_mask(&img, 1.0, 1.0, 10.0).unwrap();
        // Threshold larger than any residual: untouched everywhere.
        assert_eq!(img, out);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = rgb(0.5, 0.5, 0.5, 6, 6);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);

        let b = rgb(0.5 + 1.0 / 255.0, 0.5 + 1.0 / 255.0, 0.5 + 1.0 / 255.0, 6, 6);
        assert_abs_diff_eq!(psnr(&a, &b, 1.0).unwrap(), 20.0 * 255f64.log10(), epsilon = 1e-9);

        let zero = rgb(0.0, 0.0, 0.0, 6, 6);
        let one = rgb(1.0, 1.0, 1.0, 6, 6);
        assert_abs_diff_eq!(psnr(&zero, &one, 1.0).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn psnr_symmetry_and_monotonicity() {
        let a = random_rgb(8, 8, 13);
        let b = random_rgb(8, 8, 14);
        assert_abs_diff_eq!(
            psnr(&a, &b, 1.0).unwrap(),
            psnr(&b, &a, 1.0).unwrap(),
            epsilon = 1e-12
        );
        let base = rgb(0.4, 0.4, 0.4, 6, 6);
        let mut last = f64::INFINITY;
        for delta in [0.01, 0.05, 0.2, 0.5] {
            let shifted = rgb(0.4 + delta, 0.4 + delta, 0.4 + delta, 6, 6);
            let v = psnr(&base, &shifted, 1.0).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn psnr_rejects_dim_mismatch() {
        let a = rgb(0.1, 0.1, 0.1, 4, 4);
        let b = rgb(0.1, 0.1, 0.1, 4, 5);
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn luma_psnr_ignores_chroma_only_differences() {
        let a = rgb(0.25, 0.5, 0.75, 4, 4);
        let ya = rgb_to_ycbcr(&a).unwrap();
        // Perturb chroma only, convert back: Y identical.
        let mut planes = ya.into_planes();
        planes[1] = planes[1].map(|v| (v + 0.05).clamp(0.0, 1.0));
        let yb = ImageStack::new(planes, Colorspace::Ycbcr).unwrap();
        let b = ycbcr_to_rgb(&yb).unwrap();
        assert_eq!(psnr_with_mode(&a, &b, 1.0, PsnrMode::Luma).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&a, &b, 1.0).unwrap() < PSNR_CAP_DB);
    }
}
