//! Single-level 2-d stationary (undecimated) wavelet transform of the luma
//! channel, and the subband L1 loss built on it.
//!
//! Filtering convention, fixed for reproducibility: correlation with the
//! filter after symmetric-reflect padding of `len - 1` samples on the
//! leading side of the filtered axis, so every subband keeps the input's
//! spatial size. The lowpass filter is normalized to unit sum and the
//! highpass to zero sum, which makes a constant plane decompose into
//! `ll = c`, `lh = hl = hh = 0` exactly.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::image::{ImagePlane, ImageStack};
use crate::imageops::{KB, KG, KR};
use crate::tensor::Tensor;

/// Wavelet family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletKind {
    #[default]
    Haar,
    Db2,
}

impl WaveletKind {
    /// (lowpass, highpass) decomposition taps; lowpass sums to 1, highpass to 0.
    pub fn filters(self) -> (Vec<f64>, Vec<f64>) {
        match self {
            WaveletKind::Haar => (vec![0.5, 0.5], vec![0.5, -0.5]),
            WaveletKind::Db2 => {
                let s3 = 3f64.sqrt();
                let lo = vec![
                    (1.0 + s3) / 8.0,
                    (3.0 + s3) / 8.0,
                    (3.0 - s3) / 8.0,
                    (1.0 - s3) / 8.0,
                ];
                // Quadrature mirror: g[k] = (-1)^k lo[len-1-k].
                let n = lo.len();
                let hi = (0..n)
                    .map(|k| if k % 2 == 0 { lo[n - 1 - k] } else { -lo[n - 1 - k] })
                    .collect();
                (lo, hi)
            }
        }
    }

    pub fn filter_len(self) -> usize {
        match self {
            WaveletKind::Haar => 2,
            WaveletKind::Db2 => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "haar" => Ok(WaveletKind::Haar),
            "db2" => Ok(WaveletKind::Db2),
            other => Err(Error::config(format!(
                "wavelet: unknown family {other:?} (expected \"haar\" or \"db2\")"
            ))),
        }
    }
}

/// Subband weights for the wavelet loss.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WaveletLossConfig {
    /// (lambda_ll, lambda_lh, lambda_hl, lambda_hh), all nonnegative.
    pub lambdas: [f64; 4],
    pub wavelet: WaveletKind,
}

impl Default for WaveletLossConfig {
    // Default lambdas are this artifact's choice, not a published setting.
    fn default() -> Self {
        Self {
            lambdas: [0.05, 0.10, 0.10, 0.15],
            wavelet: WaveletKind::Haar,
        }
    }
}

impl WaveletLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::config(format!(
                "wavelet.lambdas: must be nonnegative, got {:?}",
                self.lambdas
            )));
        }
        Ok(())
    }
}

/// The four full-resolution subbands of a single-level SWT.
#[derive(Debug, Clone)]
pub struct SwtSubbands {
    pub ll: ImagePlane,
    pub lh: ImagePlane,
    pub hl: ImagePlane,
    pub hh: ImagePlane,
    pub wavelet: WaveletKind,
    pub level: usize,
}

/// Reflect-pad `pad` samples on the leading side of the row axis of each
/// `h x w` grid held in the last axis of `x` (flattened `h*w`).
fn reflect_pad_rows(x: &Tensor, h: usize, w: usize, pad: usize) -> Tensor {
    let mut idx = Vec::with_capacity((h + pad) * w);
    for y in 0..h + pad {
        let sy = if y < pad {
            // reflect: pad-1-y maps to row (pad-1-y) mirrored -> row (pad-1-y)
            (pad - 1 - y).min(h - 1)
        } else {
            y - pad
        };
        for x_ in 0..w {
            idx.push((sy * w + x_) as i64);
        }
    }
    x.gather_last(&Rc::new(idx))
}

fn reflect_pad_cols(x: &Tensor, h: usize, w: usize, pad: usize) -> Tensor {
    let mut idx = Vec::with_capacity(h * (w + pad));
    for y in 0..h {
        for x_ in 0..w + pad {
            let sx = if x_ < pad { (pad - 1 - x_).min(w - 1) } else { x_ - pad };
            idx.push((y * w + sx) as i64);
        }
    }
    x.gather_last(&Rc::new(idx))
}

/// Correlate along the row (vertical) axis: `out[y] = sum_k f[k] pad(x)[y+k]`.
fn filter_rows(x: &Tensor, h: usize, w: usize, taps: &[f64]) -> Tensor {
    let pad = taps.len() - 1;
    let shape = x.shape().to_vec();
    let lead: Vec<usize> = shape[..shape.len() - 1].to_vec();
    let padded = reflect_pad_rows(x, h, w, pad);
    let to4 = |t: &Tensor, hh: usize| {
        let mut s = lead.clone();
        s.push(hh);
        s.push(w);
        t.reshape(&s)
    };
    let padded4 = to4(&padded, h + pad);
    let nd = padded4.shape().len();
    let mut acc: Option<Tensor> = None;
    for (k, &t) in taps.iter().enumerate() {
        let sl = padded4.narrow(nd - 2, k, h).scale(t);
        acc = Some(match acc {
            None => sl,
            Some(a) => a.add(&sl),
        });
    }
    let mut flat = lead;
    flat.push(h * w);
    acc.unwrap().reshape(&flat)
}

fn filter_cols(x: &Tensor, h: usize, w: usize, taps: &[f64]) -> Tensor {
    let pad = taps.len() - 1;
    let shape = x.shape().to_vec();
    let lead: Vec<usize> = shape[..shape.len() - 1].to_vec();
    let padded = reflect_pad_cols(x, h, w, pad);
    let mut s = lead.clone();
    s.push(h);
    s.push(w + pad);
    let padded4 = padded.reshape(&s);
    let nd = padded4.shape().len();
    let mut acc: Option<Tensor> = None;
    for (k, &t) in taps.iter().enumerate() {
        let sl = padded4.narrow(nd - 1, k, w).scale(t);
        acc = Some(match acc {
            None => sl,
            Some(a) => a.add(&sl),
        });
    }
    let mut flat = lead;
    flat.push(h * w);
    acc.unwrap().reshape(&flat)
}

/// Single-level SWT of planes packed as `[..., h*w]` in the last axis.
/// Returns `(ll, lh, hl, hh)`, each `[..., h*w]`.
///
/// Naming: the first letter is the row-axis (vertical) filter, the second
/// the column-axis (horizontal) one, so `lh` responds to horizontal edges.
pub fn swt2_flat(
    y: &Tensor,
    h: usize,
    w: usize,
    wavelet: WaveletKind,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let flen = wavelet.filter_len();
    if h < flen || w < flen {
        return Err(Error::invalid(format!(
            "swt2 input {h}x{w} smaller than the {flen}-tap filter"
        )));
    }
    let (lo, hi) = wavelet.filters();
    let rl = filter_rows(y, h, w, &lo);
    let rh = filter_rows(y, h, w, &hi);
    let ll = filter_cols(&rl, h, w, &lo);
    let lh = filter_cols(&rh, h, w, &lo); // high rows, low cols
    let hl = filter_cols(&rl, h, w, &hi); // low rows, high cols
    let hh = filter_cols(&rh, h, w, &hi);
    Ok((ll, lh, hl, hh))
}

/// Single-level SWT of one plane.
pub fn swt2(plane: &ImagePlane, wavelet: WaveletKind) -> Result<SwtSubbands> {
    let (h, w) = (plane.height(), plane.width());
    let t = Tensor::constant(
        plane
            .data()
            .clone()
            .into_dyn()
            .into_shape_with_order(ndarray::IxDyn(&[1, h * w]))
            .unwrap(),
    );
    let (ll, lh, hl, hh) = swt2_flat(&t, h, w, wavelet)?;
    let unpack = |t: Tensor| -> Result<ImagePlane> {
        ImagePlane::new(
            t.value()
                .clone()
                .into_shape_with_order(ndarray::IxDyn(&[h, w]))
                .unwrap()
                .into_dimensionality()
                .unwrap(),
        )
    };
    Ok(SwtSubbands {
        ll: unpack(ll)?,
        lh: unpack(lh)?,
        hl: unpack(hl)?,
        hh: unpack(hh)?,
        wavelet,
        level: 1,
    })
}

/// Luma plane of an RGB batch `[n, 3, h, w]` -> `[n, 1, h, w]`.
pub fn luma(rgb: &Tensor) -> Tensor {
    let r = rgb.narrow(1, 0, 1).scale(KR);
    let g = rgb.narrow(1, 1, 1).scale(KG);
    let b = rgb.narrow(1, 2, 1).scale(KB);
    r.add(&g).add(&b)
}

/// Wavelet loss between RGB batches `[n, 3, h, w]`:
/// `sum_j lambda_j * mean|SWT(luma(sr))_j - SWT(luma(gt))_j|`.
///
/// Differentiable w.r.t. `sr`. Per-subband means (not sums) keep the value
/// resolution-independent.
pub fn wavelet_loss(sr: &Tensor, gt: &Tensor, cfg: &WaveletLossConfig) -> Result<Tensor> {
    cfg.validate()?;
    if sr.shape() != gt.shape() {
        return Err(Error::invalid(format!(
            "wavelet_loss dims mismatch: {:?} vs {:?}",
            sr.shape(),
            gt.shape()
        )));
    }
    let s = sr.shape().to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::invalid("wavelet_loss expects [n, 3, h, w] batches"));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let ys = luma(sr).reshape(&[n, 1, h * w]);
    let yg = luma(gt).reshape(&[n, 1, h * w]);
    let bs = swt2_flat(&ys, h, w, cfg.wavelet)?;
    let bg = swt2_flat(&yg, h, w, cfg.wavelet)?;
    let pairs = [(&bs.0, &bg.0), (&bs.1, &bg.1), (&bs.2, &bg.2), (&bs.3, &bg.3)];
    let mut acc = Tensor::scalar(0.0);
    for (lambda, (a, b)) in cfg.lambdas.iter().zip(pairs) {
        if *lambda == 0.0 {
            continue;
        }
        acc = acc.add(&a.sub(b).abs_t().mean_all().scale(*lambda));
    }
    Ok(acc)
}

/// Convenience wrapper over image stacks (not differentiable).
pub fn wavelet_loss_stacks(sr: &ImageStack, gt: &ImageStack, cfg: &WaveletLossConfig) -> Result<f64> {
    let a = Tensor::constant(crate::image::stack_batch(std::slice::from_ref(sr))?);
    let b = Tensor::constant(crate::image::stack_batch(std::slice::from_ref(gt))?);
    Ok(wavelet_loss(&a, &b, cfg)?.item())
}
