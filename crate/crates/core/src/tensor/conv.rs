//! Fused 2-d convolutions with hand-written backward passes.
//!
//! The generic path is im2col + GEMM, processed in bounded row chunks so the
//! column buffer stays small; the backward pass recomputes the columns
//! instead of retaining them.

use ndarray::{Array2, ArrayD, IxDyn};

use super::Tensor;

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4-d tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

// Column buffer budget per chunk, in elements (~8 MB of f64).
const COL_ELEMS_BUDGET: usize = 1 << 20;

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn out_extent(n_in: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        n_in + 2 * pad >= k,
        "conv input {n_in} smaller than kernel {k} with pad {pad}"
    );
    (n_in + 2 * pad - k) / stride + 1
}

impl ConvGeom {
    /// Fill `col[(c*kh+i)*kw+j, l]` for output rows `oy0..oy1`.
    fn im2col(&self, src: &[f64], oy0: usize, oy1: usize, col: &mut Array2<f64>) {
        col.fill(0.0);
        for c in 0..self.cin {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let mut l = 0;
                    for oy in oy0..oy1 {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            l += self.wo;
                            continue;
                        }
                        let line = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x >= 0 && x < self.w as isize {
                                col[[row, l]] = line[x as usize];
                            }
                            l += 1;
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add columns onto the image.
    fn col2im_add(&self, col: &Array2<f64>, oy0: usize, oy1: usize, dst: &mut [f64]) {
        for c in 0..self.cin {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let mut l = 0;
                    for oy in oy0..oy1 {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            l += self.wo;
                            continue;
                        }
                        let line = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x >= 0 && x < self.w as isize {
                                line[x as usize] += col[[row, l]];
                            }
                            l += 1;
                        }
                    }
                }
            }
        }
    }

    fn row_chunk(&self) -> usize {
        let k = self.cin * self.kh * self.kw;
        (COL_ELEMS_BUDGET / (k * self.wo).max(1)).clamp(1, self.ho.max(1))
    }
}

/// 2-d convolution (cross-correlation) with zero padding.
///
/// `x`: `[n, cin, h, w]`, `weight`: `[cout, cin, kh, kw]` -> `[n, cout, ho, wo]`.
/// Bias is intentionally separate; add it with a broadcast `add`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, w) = dims4(x.shape());
    let (cout, cin_w, kh, kw) = dims4(weight.shape());
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    assert!(stride >= 1);
    let geom = ConvGeom {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho: out_extent(h, kh, stride, pad),
        wo: out_extent(w, kw, stride, pad),
    };
    let (ho, wo) = (geom.ho, geom.wo);
    let k = cin * kh * kw;
    let chunk = geom.row_chunk();

    let xs = x.value().as_slice().unwrap();
    let wmat = weight
        .value()
        .view()
        .into_shape_with_order((cout, k))
        .unwrap();

    let mut out = vec![0.0; n * cout * ho * wo];
    for img in 0..n {
        let src = &xs[img * cin * h * w..(img + 1) * cin * h * w];
        let dst = &mut out[img * cout * ho * wo..(img + 1) * cout * ho * wo];
        let mut oy0 = 0;
        while oy0 < ho {
            let oy1 = (oy0 + chunk).min(ho);
            let lc = (oy1 - oy0) * wo;
            let mut col = Array2::zeros((k, lc));
            geom.im2col(src, oy0, oy1, &mut col);
            let prod = wmat.dot(&col); // [cout, lc]
            for co in 0..cout {
                dst[co * ho * wo + oy0 * wo..co * ho * wo + oy1 * wo]
                    .copy_from_slice(prod.row(co).to_slice().unwrap());
            }
            oy0 = oy1;
        }
    }

    let value = ArrayD::from_shape_vec(IxDyn(&[n, cout, ho, wo]), out).unwrap();
    Tensor::op(
        value,
        vec![x.clone(), weight.clone()],
        Box::new(move |g, node| {
            let xv = node.parents[0].value();
            let wv = node.parents[1].value();
            let xs = xv.as_slice().unwrap();
            let wmat = wv.view().into_shape_with_order((cout, k)).unwrap();
            let gs = g.as_slice().unwrap();

            let mut gx = vec![0.0; xs.len()];
            let mut gw = Array2::<f64>::zeros((cout, k));
            for img in 0..n {
                let src = &xs[img * cin * h * w..(img + 1) * cin * h * w];
                let gdst = &gs[img * cout * ho * wo..(img + 1) * cout * ho * wo];
                let mut oy0 = 0;
                while oy0 < ho {
                    let oy1 = (oy0 + chunk).min(ho);
                    let lc = (oy1 - oy0) * wo;
                    let mut col = Array2::zeros((k, lc));
                    geom.im2col(src, oy0, oy1, &mut col);
                    let mut gmat = Array2::zeros((cout, lc));
                    for co in 0..cout {
                        gmat.row_mut(co).assign(&ndarray::ArrayView1::from(
                            &gdst[co * ho * wo + oy0 * wo..co * ho * wo + oy1 * wo],
                        ));
                    }
                    gw += &gmat.dot(&col.t());
                    let gcol = wmat.t().dot(&gmat); // [k, lc]
                    geom.col2im_add(
                        &gcol,
                        oy0,
                        oy1,
                        &mut gx[img * cin * h * w..(img + 1) * cin * h * w],
                    );
                    oy0 = oy1;
                }
            }
            vec![
                Some(ArrayD::from_shape_vec(xv.raw_dim(), gx).unwrap()),
                Some(gw.into_dyn().into_shape_with_order(wv.raw_dim()).unwrap()),
            ]
        }),
    )
}

/// Depthwise 2-d convolution (stride 1, zero padding).
///
/// `x`: `[n, c, h, w]`, `weight`: `[c, kh, kw]` -> `[n, c, ho, wo]`.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, pad: usize) -> Tensor {
    let (n, c, h, w) = dims4(x.shape());
    let ws = weight.shape().to_vec();
    assert_eq!(ws.len(), 3, "depthwise weight is [c, kh, kw]");
    assert_eq!(ws[0], c, "depthwise channel mismatch");
    let (kh, kw) = (ws[1], ws[2]);
    let ho = out_extent(h, kh, 1, pad);
    let wo = out_extent(w, kw, 1, pad);

    let xs = x.value().as_slice().unwrap();
    let wv = weight.value().as_slice().unwrap();
    let mut out = vec![0.0; n * c * ho * wo];
    for img in 0..n {
        for ch in 0..c {
            let plane = &xs[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
            let ker = &wv[ch * kh * kw..(ch + 1) * kh * kw];
            let dst = &mut out[(img * c + ch) * ho * wo..(img * c + ch + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..kh {
                        let y = (oy + i) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let xx = (ox + j) as isize - pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += ker[i * kw + j] * plane[y as usize * w + xx as usize];
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
    }

    let value = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap();
    Tensor::op(
        value,
        vec![x.clone(), weight.clone()],
        Box::new(move |g, node| {
            let xv = node.parents[0].value();
            let wvv = node.parents[1].value();
            let xs = xv.as_slice().unwrap();
            let wv = wvv.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut gx = vec![0.0; xs.len()];
            let mut gw = vec![0.0; wv.len()];
            for img in 0..n {
                for ch in 0..c {
                    let plane = &xs[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                    let ker = &wv[ch * kh * kw..(ch + 1) * kh * kw];
                    let gker = &mut gw[ch * kh * kw..(ch + 1) * kh * kw];
                    let gout = &gs[(img * c + ch) * ho * wo..(img * c + ch + 1) * ho * wo];
                    let gplane_base = (img * c + ch) * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gout[oy * wo + ox];
                            for i in 0..kh {
                                let y = (oy + i) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for j in 0..kw {
                                    let xx = (ox + j) as isize - pad as isize;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    let pidx = y as usize * w + xx as usize;
                                    gker[i * kw + j] += gv * plane[pidx];
                                    gx[gplane_base + pidx] += gv * ker[i * kw + j];
                                }
                            }
                        }
                    }
                }
            }
            vec![
                Some(ArrayD::from_shape_vec(xv.raw_dim(), gx).unwrap()),
                Some(ArrayD::from_shape_vec(wvv.raw_dim(), gw).unwrap()),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::constant(randn(&[1, 1, 5, 5], 1));
        let mut w = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
        w[[0, 0, 1, 1]] = 1.0;
        let y = conv2d(&x, &Tensor::constant(w), 1, 1);
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        for (a, b) in x.value().iter().zip(y.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_naive() {
        let x = randn(&[2, 3, 6, 7], 2);
        let w = randn(&[4, 3, 3, 3], 3);
        let y = conv2d(&Tensor::constant(x.clone()), &Tensor::constant(w.clone()), 2, 1);
        let (ho, wo) = (3, 4);
        assert_eq!(y.shape(), &[2, 4, ho, wo]);
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..3 {
                            for i in 0..3 {
                                for j in 0..3 {
                                    let yy = (oy * 2 + i) as isize - 1;
                                    let xx = (ox * 2 + j) as isize - 1;
                                    if yy >= 0 && yy < 6 && xx >= 0 && xx < 7 {
                                        acc += w[[co, ci, i, j]]
                                            * x[[n, ci, yy as usize, xx as usize]];
                                    }
                                }
                            }
                        }
                        assert!((y.value()[[n, co, oy, ox]] - acc).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_matches_conv_with_diagonal_weight() {
        let x = randn(&[1, 2, 5, 5], 4);
        let wd = randn(&[2, 3, 3], 5);
        let yd = depthwise_conv2d(&Tensor::constant(x.clone()), &Tensor::constant(wd.clone()), 1);
        let mut wfull = ArrayD::zeros(IxDyn(&[2, 2, 3, 3]));
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    wfull[[c, c, i, j]] = wd[[c, i, j]];
                }
            }
        }
        let yf = conv2d(&Tensor::constant(x), &Tensor::constant(wfull), 1, 1);
        for (a, b) in yd.value().iter().zip(yf.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
