//! Adaptive multi-level degradation synthesis.
//!
//! The degradation space is split into three levels: D1 and D2 are
//! first-order (one blur -> resize -> noise -> JPEG round) with small and
//! large parameter ranges, D3 is second-order (two rounds with independently
//! sampled parameters). One level is drawn per sample from a categorical
//! distribution, every realized parameter is recorded in a replayable
//! [`PipelineDraw`], and a final exact resize lands the chain at 1/4 of the
//! source size. Images are clamped to `[0, 1]` after every stage.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use ndarray::Array2;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::image::{ImagePlane, ImageStack};
use crate::imageops::{self, ResizeKernel};

/// Degradation level tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Level {
    D1,
    D2,
    D3,
}

impl Level {
    pub fn index(self) -> usize {
        match self {
            Level::D1 => 0,
            Level::D2 => 1,
            Level::D3 => 2,
        }
    }
}

/// Blur kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlurKind {
    IsoGaussian,
    AnisoGaussian,
    Sinc,
}

/// Additive noise family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Poisson,
}

/// Parameter ranges for one degradation level. All closed intervals; noise
/// sigmas are in normalized `[0, 1]` pixel units.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DegradationLevelSpec {
    pub level: Level,
    /// Number of blur->resize->noise->JPEG rounds (1 for D1/D2, 2 for D3).
    pub order: usize,
    pub blur_sigma_range: (f64, f64),
    /// Weights over (iso-gaussian, aniso-gaussian, sinc).
    pub blur_kernel_weights: [f64; 3],
    /// Cutoff range (radians) for the sinc kernel.
    pub sinc_cutoff_range: (f64, f64),
    /// Odd blur kernel size in pixels.
    pub kernel_size: usize,
    /// Intermediate resize factor range, relative to the current size.
    pub resize_scale_range: (f64, f64),
    /// Weights over (bicubic, bilinear, area).
    pub resize_kernel_weights: [f64; 3],
    pub gaussian_noise_sigma_range: (f64, f64),
    pub poisson_noise_scale_range: (f64, f64),
    /// Probability of Gaussian (vs. Poisson) noise for a round.
    pub gaussian_noise_prob: f64,
    /// Probability that the noise plane is shared across channels.
    pub gray_noise_prob: f64,
    pub jpeg_quality_range: (u8, u8),
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(Error::config(format!(
            "{name}: range [{lo}, {hi}] must satisfy lo <= hi"
        )));
    }
    Ok(())
}

fn check_weights(name: &str, ws: &[f64]) -> Result<()> {
    if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config(format!("{name}: weights must be nonnegative")));
    }
    let sum: f64 = ws.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "{name}: weights must sum to 1 within 1e-9, got {sum}"
        )));
    }
    Ok(())
}

fn contains(inner: (f64, f64), outer: (f64, f64)) -> bool {
    inner.0 >= outer.0 && inner.1 <= outer.1
}

impl DegradationLevelSpec {
    pub fn validate(&self) -> Result<()> {
        let expected_order = if self.level == Level::D3 { 2 } else { 1 };
        if self.order != expected_order {
            return Err(Error::config(format!(
                "degradation.{:?}.order: must be {expected_order}, got {}",
                self.level, self.order
            )));
        }
        check_range("blur_sigma_range", self.blur_sigma_range)?;
        if self.blur_sigma_range.0 <= 0.0 {
            return Err(Error::config("blur_sigma_range: lo must be > 0".to_string()));
        }
        check_weights("blur_kernel_weights", &self.blur_kernel_weights)?;
        check_range("sinc_cutoff_range", self.sinc_cutoff_range)?;
        if self.sinc_cutoff_range.0 <= 0.0 || self.sinc_cutoff_range.1 > std::f64::consts::PI {
            return Err(Error::config(
                "sinc_cutoff_range: must lie in (0, pi]".to_string(),
            ));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size < 3 {
            return Err(Error::config(format!(
                "kernel_size: must be odd and >= 3, got {}",
                self.kernel_size
            )));
        }
        check_range("resize_scale_range", self.resize_scale_range)?;
        if self.resize_scale_range.0 <= 0.0 {
            return Err(Error::config("resize_scale_range: lo must be > 0".to_string()));
        }
        check_weights("resize_kernel_weights", &self.resize_kernel_weights)?;
        check_range("gaussian_noise_sigma_range", self.gaussian_noise_sigma_range)?;
        check_range("poisson_noise_scale_range", self.poisson_noise_scale_range)?;
        if self.gaussian_noise_sigma_range.0 < 0.0 || self.poisson_noise_scale_range.0 < 0.0 {
            return Err(Error::config("noise ranges must be nonnegative".to_string()));
        }
        for (name, p) in [
            ("gaussian_noise_prob", self.gaussian_noise_prob),
            ("gray_noise_prob", self.gray_noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name}: must lie in [0, 1], got {p}")));
            }
        }
        let (qlo, qhi) = self.jpeg_quality_range;
        if qlo < 1 || qhi > 100 || qlo > qhi {
            return Err(Error::config(format!(
                "jpeg_quality_range: must satisfy 1 <= lo <= hi <= 100, got [{qlo}, {qhi}]"
            )));
        }
        Ok(())
    }
}

/// The three level specs plus the level-selection distribution.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdaptiveDegradationSpec {
    /// Selection probabilities for (D1, D2, D3).
    pub probs: [f64; 3],
    pub d1: DegradationLevelSpec,
    pub d2: DegradationLevelSpec,
    pub d3: DegradationLevelSpec,
}

impl AdaptiveDegradationSpec {
    pub fn level_spec(&self, level: Level) -> &DegradationLevelSpec {
        match level {
            Level::D1 => &self.d1,
            Level::D2 => &self.d2,
            Level::D3 => &self.d3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_weights("degradation.probs", &self.probs)?;
        for (spec, want) in [(&self.d1, Level::D1), (&self.d2, Level::D2), (&self.d3, Level::D3)] {
            if spec.level != want {
                return Err(Error::config(format!(
                    "degradation level tag mismatch: expected {want:?}, got {:?}",
                    spec.level
                )));
            }
            spec.validate()?;
        }
        // Weak ranges sit inside the standard ones.
        let (a, b) = (&self.d1, &self.d2);
        for (name, ia, ib) in [
            ("blur_sigma_range", a.blur_sigma_range, b.blur_sigma_range),
            ("resize_scale_range", a.resize_scale_range, b.resize_scale_range),
            (
                "gaussian_noise_sigma_range",
                a.gaussian_noise_sigma_range,
                b.gaussian_noise_sigma_range,
            ),
            (
                "poisson_noise_scale_range",
                a.poisson_noise_scale_range,
                b.poisson_noise_scale_range,
            ),
        ] {
            if !contains(ia, ib) {
                return Err(Error::config(format!(
                    "degradation.d1.{name}: {ia:?} must be contained in d2's {ib:?}"
                )));
            }
        }
        if !(a.jpeg_quality_range.0 >= b.jpeg_quality_range.0
            && a.jpeg_quality_range.1 <= b.jpeg_quality_range.1)
        {
            return Err(Error::config(
                "degradation.d1.jpeg_quality_range: must be contained in d2's".to_string(),
            ));
        }
        Ok(())
    }
}

impl Default for AdaptiveDegradationSpec {
    fn default() -> Self {
        let base = |level, order| DegradationLevelSpec {
            level,
            order,
            blur_sigma_range: (0.2, 0.8),
            blur_kernel_weights: [0.65, 0.25, 0.10],
            sinc_cutoff_range: (std::f64::consts::PI / 3.0, std::f64::consts::PI),
            kernel_size: 21,
            resize_scale_range: (0.85, 1.2),
            resize_kernel_weights: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            gaussian_noise_sigma_range: (1.0 / 255.0, 10.0 / 255.0),
            poisson_noise_scale_range: (0.05, 0.5),
            gaussian_noise_prob: 0.5,
            gray_noise_prob: 0.4,
            jpeg_quality_range: (90, 95),
        };
        let d1 = base(Level::D1, 1);
        let mut d2 = base(Level::D2, 1);
        d2.blur_sigma_range = (0.2, 1.5);
        d2.resize_scale_range = (0.5, 1.2);
        d2.gaussian_noise_sigma_range = (1.0 / 255.0, 20.0 / 255.0);
        d2.poisson_noise_scale_range = (0.05, 1.5);
        d2.jpeg_quality_range = (50, 95);
        let mut d3 = base(Level::D3, 2);
        d3.blur_sigma_range = (0.2, 3.0);
        d3.resize_scale_range = (0.3, 1.5);
        d3.gaussian_noise_sigma_range = (1.0 / 255.0, 25.0 / 255.0);
        d3.poisson_noise_scale_range = (0.05, 2.5);
        d3.jpeg_quality_range = (30, 95);
        Self {
            probs: [0.3, 0.3, 0.4],
            d1,
            d2,
            d3,
        }
    }
}

/// A degradation spec whose every stage is (near-)identity: delta blur
/// kernel, unit resize, zero noise, JPEG quality 100. Used for smoke tests.
pub fn benign_spec() -> AdaptiveDegradationSpec {
    let mut spec = AdaptiveDegradationSpec::default();
    spec.probs = [1.0, 0.0, 0.0];
    for s in [&mut spec.d1, &mut spec.d2] {
        s.blur_sigma_range = (0.05, 0.05);
        s.blur_kernel_weights = [1.0, 0.0, 0.0];
        s.kernel_size = 3;
        s.resize_scale_range = (1.0, 1.0);
        s.resize_kernel_weights = [0.0, 0.0, 1.0];
        s.gaussian_noise_sigma_range = (0.0, 0.0);
        s.poisson_noise_scale_range = (0.0, 0.0);
        s.gaussian_noise_prob = 1.0;
        s.gray_noise_prob = 0.0;
        s.jpeg_quality_range = (100, 100);
    }
    spec.d3.blur_sigma_range = (0.05, 3.0);
    spec
}

// ---- realized draws ----

/// Realized blur parameters for one round.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum BlurDraw {
    Iso { sigma: f64 },
    Aniso { sigma_x: f64, sigma_y: f64, theta: f64 },
    Sinc { cutoff: f64 },
}

/// Realized noise parameters for one round.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseDraw {
    pub kind: NoiseKind,
    pub strength: f64,
    pub gray: bool,
}

/// Realized parameters for one blur -> resize -> noise -> JPEG round.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoundDraw {
    pub blur: BlurDraw,
    pub resize_scale: f64,
    pub resize_kernel: ResizeKernel,
    pub noise: NoiseDraw,
    pub jpeg_quality: u8,
}

/// Everything needed to replay one degradation bit-exactly on the same input.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PipelineDraw {
    pub level: Level,
    pub rounds: Vec<RoundDraw>,
    /// Kernel of the final exact landing resize to 1/4 size.
    pub final_resize_kernel: ResizeKernel,
    /// Seed of the dedicated RNG stream that realizes the noise fields.
    pub noise_seed: u64,
}

// ---- sampling ----

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + rng.random::<f64>() * (hi - lo)
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Draw a degradation level from a 3-way categorical distribution.
pub fn sample_level(rng: &mut ChaCha8Rng, probs: &[f64; 3]) -> Result<Level> {
    check_weights("probs", probs)?;
    Ok(match pick_weighted(rng, probs) {
        0 => Level::D1,
        1 => Level::D2,
        _ => Level::D3,
    })
}

const RESIZE_KERNELS: [ResizeKernel; 3] =
    [ResizeKernel::Bicubic, ResizeKernel::Bilinear, ResizeKernel::Area];

fn sample_round(spec: &DegradationLevelSpec, rng: &mut ChaCha8Rng) -> RoundDraw {
    let blur = match pick_weighted(rng, &spec.blur_kernel_weights) {
        0 => BlurDraw::Iso {
            sigma: uniform(rng, spec.blur_sigma_range),
        },
        1 => BlurDraw::Aniso {
            sigma_x: uniform(rng, spec.blur_sigma_range),
            sigma_y: uniform(rng, spec.blur_sigma_range),
            theta: rng.random::<f64>() * std::f64::consts::PI,
        },
        _ => BlurDraw::Sinc {
            cutoff: uniform(rng, spec.sinc_cutoff_range),
        },
    };
    let resize_scale = uniform(rng, spec.resize_scale_range);
    let resize_kernel = RESIZE_KERNELS[pick_weighted(rng, &spec.resize_kernel_weights)];
    let noise = if rng.random::<f64>() < spec.gaussian_noise_prob {
        NoiseDraw {
            kind: NoiseKind::Gaussian,
            strength: uniform(rng, spec.gaussian_noise_sigma_range),
            gray: rng.random::<f64>() < spec.gray_noise_prob,
        }
    } else {
        NoiseDraw {
            kind: NoiseKind::Poisson,
            strength: uniform(rng, spec.poisson_noise_scale_range),
            gray: rng.random::<f64>() < spec.gray_noise_prob,
        }
    };
    let (qlo, qhi) = spec.jpeg_quality_range;
    let jpeg_quality = rng.random_range(qlo..=qhi);
    RoundDraw {
        blur,
        resize_scale,
        resize_kernel,
        noise,
        jpeg_quality,
    }
}

/// Realize a full pipeline draw: level, per-round parameters, noise seed.
pub fn sample_draw(spec: &AdaptiveDegradationSpec, rng: &mut ChaCha8Rng) -> Result<PipelineDraw> {
    let level = sample_level(rng, &spec.probs)?;
    let ls = spec.level_spec(level);
    let rounds = (0..ls.order).map(|_| sample_round(ls, rng)).collect();
    let final_resize_kernel = RESIZE_KERNELS[pick_weighted(rng, &ls.resize_kernel_weights)];
    Ok(PipelineDraw {
        level,
        rounds,
        final_resize_kernel,
        noise_seed: rng.random(),
    })
}

// ---- blur kernels ----

// Bessel J1 via the Abramowitz-Stegun 9.4 polynomial fits.
fn bessel_j1(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 3.0 {
        let t = (x / 3.0) * (x / 3.0);
        x * (0.5 - 0.56249985 * t + 0.21093573 * t.powi(2) - 0.03954289 * t.powi(3)
            + 0.00443319 * t.powi(4)
            - 0.00031761 * t.powi(5)
            + 0.00001109 * t.powi(6))
    } else {
        let t = 3.0 / ax;
        let f1 = 0.79788456 + 0.00000156 * t + 0.01659667 * t.powi(2) + 0.00017105 * t.powi(3)
            - 0.00249511 * t.powi(4)
            + 0.00113653 * t.powi(5)
            - 0.00020033 * t.powi(6);
        let theta = ax - 2.35619449 + 0.12499612 * t + 0.00005650 * t.powi(2)
            - 0.00637879 * t.powi(3)
            + 0.00074348 * t.powi(4)
            + 0.00079824 * t.powi(5)
            - 0.00029166 * t.powi(6);
        let v = f1 * theta.cos() / ax.sqrt();
        if x < 0.0 {
            -v
        } else {
            v
        }
    }
}

/// Build a normalized blur kernel of odd `size`.
///
/// For `Sinc`, `sigma_x` carries the cutoff frequency in radians and the
/// other parameters are ignored; the circular-lowpass kernel is tapered by a
/// radial Hann window before renormalization.
pub fn make_blur_kernel(
    kind: BlurKind,
    sigma_x: f64,
    sigma_y: f64,
    theta: f64,
    size: usize,
) -> Result<Array2<f64>> {
    if size % 2 == 0 || size < 3 {
        return Err(Error::invalid(format!("kernel size must be odd >= 3, got {size}")));
    }
    if kind != BlurKind::Sinc && (sigma_x <= 0.0 || sigma_y <= 0.0) {
        return Err(Error::invalid("blur sigmas must be positive"));
    }
    let half = (size / 2) as f64;
    let mut k = Array2::zeros((size, size));
    match kind {
        BlurKind::IsoGaussian | BlurKind::AnisoGaussian => {
            let (sx, sy, th) = if kind == BlurKind::IsoGaussian {
                (sigma_x, sigma_x, 0.0)
            } else {
                (sigma_x, sigma_y, theta)
            };
            let (c, s) = (th.cos(), th.sin());
            for i in 0..size {
                for j in 0..size {
                    let dy = i as f64 - half;
                    let dx = j as f64 - half;
                    // Rotate into the kernel's principal axes.
                    let u = c * dx + s * dy;
                    let v = -s * dx + c * dy;
                    k[[i, j]] = (-0.5 * ((u / sx).powi(2) + (v / sy).powi(2))).exp();
                }
            }
        }
        BlurKind::Sinc => {
            let cutoff = sigma_x;
            if !(0.0..=std::f64::consts::PI).contains(&cutoff) || cutoff == 0.0 {
                return Err(Error::invalid(format!(
                    "sinc cutoff must lie in (0, pi], got {cutoff}"
                )));
            }
            let rmax = half * std::f64::consts::SQRT_2 + 1e-12;
            for i in 0..size {
                for j in 0..size {
                    let dy = i as f64 - half;
                    let dx = j as f64 - half;
                    let r = (dx * dx + dy * dy).sqrt();
                    let base = if r == 0.0 {
                        cutoff * cutoff / (4.0 * std::f64::consts::PI)
                    } else {
                        cutoff * bessel_j1(cutoff * r) / (2.0 * std::f64::consts::PI * r)
                    };
                    let window = 0.5 * (1.0 + (std::f64::consts::PI * r / rmax).cos());
                    k[[i, j]] = base * window;
                }
            }
        }
    }
    let sum = k.sum();
    if sum.abs() < 1e-12 {
        return Err(Error::invalid("degenerate blur kernel (zero sum)"));
    }
    k.mapv_inplace(|v| v / sum);
    Ok(k)
}

fn kernel_for(blur: &BlurDraw, size: usize) -> Result<Array2<f64>> {
    match *blur {
        BlurDraw::Iso { sigma } => make_blur_kernel(BlurKind::IsoGaussian, sigma, sigma, 0.0, size),
        BlurDraw::Aniso {
            sigma_x,
            sigma_y,
            theta,
        } => make_blur_kernel(BlurKind::AnisoGaussian, sigma_x, sigma_y, theta, size),
        BlurDraw::Sinc { cutoff } => make_blur_kernel(BlurKind::Sinc, cutoff, 0.0, 0.0, size),
    }
}

/// Dense 2-d correlation with reflect boundaries, clamped to `[0, 1]`.
pub fn convolve(img: &ImageStack, kernel: &Array2<f64>) -> Result<ImageStack> {
    let (kh, kw) = kernel.dim();
    let (rh, rw) = (kh / 2, kw / 2);
    let (h, w) = (img.height(), img.width());
    let planes = img
        .planes()
        .iter()
        .map(|p| {
            let src = p.data();
            let mut out = Array2::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for i in 0..kh {
                        let sy = imageops::reflect_index(y as isize + i as isize - rh as isize, h);
                        for j in 0..kw {
                            let sx =
                                imageops::reflect_index(x as isize + j as isize - rw as isize, w);
                            acc += kernel[[i, j]] * src[[sy, sx]];
                        }
                    }
                    out[[y, x]] = acc.clamp(0.0, 1.0);
                }
            }
            ImagePlane::new(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageStack::new(planes, img.colorspace())?)
}

// ---- noise ----

fn luma_plane(img: &ImageStack) -> Array2<f64> {
    if img.channels() == 3 {
        let (r, g, b) = (img.plane(0).data(), img.plane(1).data(), img.plane(2).data());
        let mut out = Array2::zeros(r.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(r)
            .and(g)
            .and(b)
            .for_each(|o, &r, &g, &b| {
                *o = imageops::KR * r + imageops::KG * g + imageops::KB * b;
            });
        out
    } else {
        img.plane(0).data().clone()
    }
}

fn poisson_noise_plane(base: &Array2<f64>, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // Shot-noise model against an 8-bit photon budget:
    // noise = (Poisson(x * 255) / 255 - x) * scale.
    const VALS: f64 = 255.0;
    let mut out = Array2::zeros(base.raw_dim());
    ndarray::Zip::from(&mut out).and(base).for_each(|o, &x| {
        let lam = (x * VALS).max(0.0);
        let sample = if lam == 0.0 {
            0.0
        } else {
            Poisson::new(lam).expect("positive lambda").sample(rng)
        };
        *o = (sample / VALS - x) * scale;
    });
    out
}

/// Add Gaussian or Poisson noise, clamped to `[0, 1]`.
/// `gray = true` adds one shared noise plane to every channel.
pub fn add_noise(
    img: &ImageStack,
    kind: NoiseKind,
    strength: f64,
    gray: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ImageStack> {
    if strength < 0.0 {
        return Err(Error::invalid("noise strength must be nonnegative"));
    }
    if strength == 0.0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let noise_planes: Vec<Array2<f64>> = match (kind, gray) {
        (NoiseKind::Gaussian, true) => {
            let normal = Normal::new(0.0, strength).expect("valid sigma");
            vec![Array2::from_shape_simple_fn((h, w), || normal.sample(rng)); 1]
        }
        (NoiseKind::Gaussian, false) => {
            let normal = Normal::new(0.0, strength).expect("valid sigma");
            (0..img.channels())
                .map(|_| Array2::from_shape_simple_fn((h, w), || normal.sample(rng)))
                .collect()
        }
        (NoiseKind::Poisson, true) => vec![poisson_noise_plane(&luma_plane(img), strength, rng)],
        (NoiseKind::Poisson, false) => img
            .planes()
            .iter()
            .map(|p| poisson_noise_plane(p.data(), strength, rng))
            .collect(),
    };
    let planes = img
        .planes()
        .iter()
        .enumerate()
        .map(|(c, p)| {
            let n = if gray { &noise_planes[0] } else { &noise_planes[c] };
            let mut out = p.data().clone();
            ndarray::Zip::from(&mut out).and(n).for_each(|v, &nv| {
                *v = (*v + nv).clamp(0.0, 1.0);
            });
            ImagePlane::new(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageStack::new(planes, img.colorspace())?)
}

// ---- JPEG ----

/// Encode and decode through a real JPEG codec at the given quality.
pub fn jpeg_round_trip(img: &ImageStack, quality: u8) -> Result<ImageStack> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!(
            "jpeg quality must lie in 1..=100, got {quality}"
        )));
    }
    let bytes = crate::image::to_rgb8(img)?;
    let (h, w) = (img.height() as u32, img.width() as u32);
    let mut encoded = Vec::new();
    let mut encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, quality);
    encoder
        .encode(&bytes, w, h, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Codec(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&encoded, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(format!("jpeg decode: {e}")))?
        .to_rgb8();
    crate::image::from_rgb8(decoded.as_raw(), h as usize, w as usize)
}

// ---- the pipeline ----

/// Apply a recorded draw to an HR image. Pure in (hr, draw): replays
/// bit-exactly.
pub fn apply_draw(
    hr: &ImageStack,
    spec: &AdaptiveDegradationSpec,
    draw: &PipelineDraw,
) -> Result<ImageStack> {
    if hr.height() % 4 != 0 || hr.width() % 4 != 0 {
        return Err(Error::invalid(format!(
            "degrade input dims {}x{} must be divisible by 4",
            hr.height(),
            hr.width()
        )));
    }
    let ls = spec.level_spec(draw.level);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(draw.noise_seed);
    let mut img = hr.clone();
    for round in &draw.rounds {
        let kernel = kernel_for(&round.blur, ls.kernel_size)?;
        img = convolve(&img, &kernel)?;
        img = imageops::resize(&img, round.resize_scale, round.resize_kernel)?;
        img = add_noise(
            &img,
            round.noise.kind,
            round.noise.strength,
            round.noise.gray,
            &mut noise_rng,
        )?;
        img = jpeg_round_trip(&img, round.jpeg_quality)?;
    }
    imageops::resize_to(&img, hr.height() / 4, hr.width() / 4, draw.final_resize_kernel)
}

/// Sample a degradation level and parameters, then synthesize the LR image.
pub fn degrade(
    hr: &ImageStack,
    spec: &AdaptiveDegradationSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageStack, PipelineDraw)> {
    spec.validate()?;
    let draw = sample_draw(spec, rng)?;
    let lr = apply_draw(hr, spec, &draw)?;
    Ok((lr, draw))
}

/// Chi-square statistic of observed counts against expected probabilities.
pub fn chi_square_statistic(counts: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = total as f64 * p;
            (o as f64 - e) * (o as f64 - e) / e
        })
        .sum()
}

/// Upper critical value of chi-square with 2 degrees of freedom at alpha = 0.01.
pub const CHI2_DF2_CRIT_001: f64 = 9.21034037197618;

/// Check that every realized parameter of `draw` lies inside its level's
/// declared ranges.
pub fn draw_in_range(spec: &AdaptiveDegradationSpec, draw: &PipelineDraw) -> bool {
    let ls = spec.level_spec(draw.level);
    let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
    if draw.rounds.len() != ls.order {
        return false;
    }
    draw.rounds.iter().all(|r| {
        let blur_ok = match r.blur {
            BlurDraw::Iso { sigma } => within(sigma, ls.blur_sigma_range),
            BlurDraw::Aniso {
                sigma_x,
                sigma_y,
                theta,
            } => {
                within(sigma_x, ls.blur_sigma_range)
                    && within(sigma_y, ls.blur_sigma_range)
                    && (0.0..=std::f64::consts::PI).contains(&theta)
            }
            BlurDraw::Sinc { cutoff } => within(cutoff, ls.sinc_cutoff_range),
        };
        let noise_ok = match r.noise.kind {
            NoiseKind::Gaussian => within(r.noise.strength, ls.gaussian_noise_sigma_range),
            NoiseKind::Poisson => within(r.noise.strength, ls.poisson_noise_scale_range),
        };
        blur_ok
            && noise_ok
            && within(r.resize_scale, ls.resize_scale_range)
            && r.jpeg_quality >= ls.jpeg_quality_range.0
            && r.jpeg_quality <= ls.jpeg_quality_range.1
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Colorspace;

    fn smooth_image(h: usize, w: usize) -> ImageStack {
        ImageStack::new(
            (0..3)
                .map(|c| {
                    ImagePlane::from_fn(h, w, |y, x| {
                        0.15 + 0.7 * ((y as f64 / h as f64) * 0.5 + (x as f64 / w as f64) * 0.5)
                            * (1.0 + 0.1 * c as f64)
                            / 1.2
                    })
                })
                .collect(),
            Colorspace::Rgb,
        )
        .unwrap()
    }

    fn textured_image(h: usize, w: usize, seed: u64) -> ImageStack {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = smooth_image(h, w);
        let planes = base
            .planes()
            .iter()
            .map(|p| {
                p.map(|v| (v + 0.0).clamp(0.0, 1.0))
                    .data()
                    .mapv(|v| (v + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0))
            })
            .map(|d| ImagePlane::new(d).unwrap())
            .collect();
        ImageStack::new(planes, Colorspace::Rgb).unwrap()
    }

    #[test]
    fn default_spec_validates() {
        AdaptiveDegradationSpec::default().validate().unwrap();
        benign_spec().validate().unwrap();
    }

    #[test]
    fn sample_level_degenerate_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_level(&mut rng, &[1.0, 0.0, 0.0]).unwrap(), Level::D1);
        }
        let draws1: Vec<Level> = {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            (0..50).map(|_| sample_level(&mut r, &[0.3, 0.3, 0.4]).unwrap()).collect()
        };
        let draws2: Vec<Level> = {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            (0..50).map(|_| sample_level(&mut r, &[0.3, 0.3, 0.4]).unwrap()).collect()
        };
        assert_eq!(draws1, draws2);
    }

    #[test]
    fn sample_level_rejects_bad_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_level(&mut rng, &[0.5, 0.3, 0.1]).is_err());
        assert!(sample_level(&mut rng, &[-0.1, 0.6, 0.5]).is_err());
    }

    #[test]
    fn level_frequencies_track_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0u64; 3];
        let n = 20_000;
        for _ in 0..n {
            counts[sample_level(&mut rng, &[0.3, 0.3, 0.4]).unwrap().index()] += 1;
        }
        for (c, p) in counts.iter().zip([0.3, 0.3, 0.4]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.015);
        }
    }

    #[test]
    fn blur_kernels_are_normalized_and_symmetric() {
        for (kind, sx, sy, th) in [
            (BlurKind::IsoGaussian, 1.2, 1.2, 0.0),
            (BlurKind::AnisoGaussian, 1.5, 0.4, 0.7),
            (BlurKind::Sinc, 2.0, 0.0, 0.0),
        ] {
            let k = make_blur_kernel(kind, sx, sy, th, 21).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-8, "{kind:?} sum {}", k.sum());
        }
        // Iso kernel: 4-fold symmetry.
        let k = make_blur_kernel(BlurKind::IsoGaussian, 0.9, 0.9, 0.0, 9).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert!((k[[i, j]] - k[[j, i]]).abs() < 1e-12);
                assert!((k[[i, j]] - k[[8 - i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_sigma_concentrates_weight() {
        let k = make_blur_kernel(BlurKind::IsoGaussian, 0.1, 0.1, 0.0, 21).unwrap();
        assert!(k[[10, 10]] > 0.99);
    }

    #[test]
    fn even_kernel_size_rejected() {
        assert!(make_blur_kernel(BlurKind::IsoGaussian, 1.0, 1.0, 0.0, 8).is_err());
    }

    #[test]
    fn noise_zero_strength_is_identity() {
        let img = smooth_image(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = add_noise(&img, NoiseKind::Gaussian, 0.0, false, &mut rng).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn gray_noise_preserves_channel_differences() {
        let img = smooth_image(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Mid-range image, mild noise: no clamping in play.
        let out = add_noise(&img, NoiseKind::Gaussian, 0.01, true, &mut rng).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let before = img.plane(0).data()[[y, x]] - img.plane(2).data()[[y, x]];
                let after = out.plane(0).data()[[y, x]] - out.plane(2).data()[[y, x]];
                assert!((before - after).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_noise_std_is_calibrated() {
        let img = ImageStack::constant(3, 256, 256, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = add_noise(&img, NoiseKind::Gaussian, 0.05, false, &mut rng).unwrap();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut n = 0.0;
        for c in 0..3 {
            for v in out.plane(c).data() {
                let d = v - 0.5;
                sum += d;
                sum2 += d * d;
                n += 1.0;
            }
        }
        let std = (sum2 / n - (sum / n).powi(2)).sqrt();
        assert!((0.045..=0.055).contains(&std), "std = {std}");
    }

    #[test]
    fn jpeg_behaviour() {
        let smooth = smooth_image(64, 64);
        let q100 = jpeg_round_trip(&smooth, 100).unwrap();
        assert!(imageops::psnr(&smooth, &q100, 1.0).unwrap() > 40.0);

        let constant = ImageStack::constant(3, 64, 64, 0.5);
        for q in [10, 55, 95] {
            let out = jpeg_round_trip(&constant, q).unwrap();
            assert!(imageops::psnr(&constant, &out, 1.0).unwrap() > 50.0, "q={q}");
        }

        let natural = textured_image(64, 64, 9);
        let p10 = imageops::psnr(&natural, &jpeg_round_trip(&natural, 10).unwrap(), 1.0).unwrap();
        let p90 = imageops::psnr(&natural, &jpeg_round_trip(&natural, 90).unwrap(), 1.0).unwrap();
        assert!(p10 < p90, "q10 {p10} should be worse than q90 {p90}");

        assert!(jpeg_round_trip(&constant, 0).is_err());
        assert!(jpeg_round_trip(&constant, 101).is_err());
    }

    #[test]
    fn degrade_shape_and_replay() {
        let spec = AdaptiveDegradationSpec::default();
        let hr = textured_image(64, 64, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (lr, draw) = degrade(&hr, &spec, &mut rng).unwrap();
        assert_eq!((lr.height(), lr.width()), (16, 16));
        let replay = apply_draw(&hr, &spec, &draw).unwrap();
        assert_eq!(lr, replay);
    }

    #[test]
    fn degrade_rejects_nondivisible_dims() {
        let spec = AdaptiveDegradationSpec::default();
        let hr = smooth_image(63, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(degrade(&hr, &spec, &mut rng).is_err());
    }

    #[test]
    fn benign_pipeline_on_constant_is_near_identity() {
        let spec = benign_spec();
        let hr = ImageStack::constant(3, 32, 32, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (lr, draw) = degrade(&hr, &spec, &mut rng).unwrap();
        assert_eq!(draw.rounds.len(), 1);
        for v in lr.plane(0).data() {
            assert!((v - 0.4).abs() <= 1.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn order_matches_level_and_params_in_range() {
        let spec = AdaptiveDegradationSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..500 {
            let draw = sample_draw(&spec, &mut rng).unwrap();
            let want = if draw.level == Level::D3 { 2 } else { 1 };
            assert_eq!(draw.rounds.len(), want);
            assert!(draw_in_range(&spec, &draw));
        }
    }
}
