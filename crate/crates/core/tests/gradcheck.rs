//! Central finite-difference checks for every autodiff op.
//!
//! Each op's analytic gradient is compared against (f(x+h) - f(x-h)) / 2h
//! element by element, in double precision.

use std::rc::Rc;

use blindsr_core::tensor::{bilinear_resize, concat, conv2d, depthwise_conv2d, pixel_shuffle, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// Check d(loss)/d(inputs[i]) for every input and every element.
fn gradcheck(inputs: &[ArrayD<f64>], f: impl Fn(&[Tensor]) -> Tensor, tol: f64, label: &str) {
    let vars: Vec<Tensor> = inputs.iter().map(|a| Tensor::var(a.clone())).collect();
    let loss = f(&vars);
    assert_eq!(loss.numel(), 1, "{label}: loss must be scalar");
    let grads = loss.backward();

    let h = 1e-6;
    for (vi, base) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&vars[vi])
            .unwrap_or_else(|| panic!("{label}: missing grad for input {vi}"))
            .clone();
        let flat_len = base.len();
        for e in 0..flat_len {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[vi].as_slice_mut().unwrap()[e] += h;
            minus[vi].as_slice_mut().unwrap()[e] -= h;
            let lp = f(&plus.iter().cloned().map(Tensor::constant).collect::<Vec<_>>()).item();
            let lm = f(&minus.iter().cloned().map(Tensor::constant).collect::<Vec<_>>()).item();
            let numeric = (lp - lm) / (2.0 * h);
            let got = analytic.as_slice().unwrap()[e];
            let denom = numeric.abs().max(got.abs()).max(1e-3);
            assert!(
                (numeric - got).abs() / denom <= tol,
                "{label}: input {vi} elem {e}: numeric {numeric} vs analytic {got}"
            );
        }
    }
}

#[test]
fn elementwise_binary_ops() {
    let a = randn(&[2, 3], 1);
    let b = randn(&[2, 3], 2);
    gradcheck(&[a.clone(), b.clone()], |v| v[0].add(&v[1]).mul(&v[0]).sum_all(), 1e-6, "add/mul");
    gradcheck(&[a.clone(), b.clone()], |v| v[0].sub(&v[1]).mul(&v[1]).sum_all(), 1e-6, "sub");
    // Broadcasting across both operands' unit axes.
    let c = randn(&[2, 1, 4], 3);
    let d = randn(&[1, 3, 1], 4);
    gradcheck(&[c, d], |v| v[0].mul(&v[1]).sum_all(), 1e-6, "mul broadcast");
}

#[test]
fn elementwise_unary_ops() {
    let x = randn(&[3, 4], 5);
    let positive = x.mapv(|v| v.abs() + 0.5);
    gradcheck(&[x.clone()], |v| v[0].scale(1.7).shift(0.3).sum_all(), 1e-6, "scale/shift");
    gradcheck(&[positive.clone()], |v| v[0].recip().sum_all(), 1e-6, "recip");
    gradcheck(&[positive.clone()], |v| v[0].sqrt_t().sum_all(), 1e-6, "sqrt");
    gradcheck(&[x.clone()], |v| v[0].exp_t().sum_all(), 1e-6, "exp");
    gradcheck(&[x.clone()], |v| v[0].sigmoid().sum_all(), 1e-6, "sigmoid");
    gradcheck(&[x.clone()], |v| v[0].tanh_t().sum_all(), 1e-6, "tanh");
    gradcheck(&[x.clone()], |v| v[0].softplus().sum_all(), 1e-6, "softplus");
    gradcheck(&[x.clone()], |v| v[0].gelu().sum_all(), 1e-5, "gelu");
    gradcheck(&[x.clone()], |v| v[0].leaky_relu(0.2).sum_all(), 1e-6, "leaky_relu");
    // abs away from zero (kink excluded by construction).
    let off_zero = x.mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    gradcheck(&[off_zero], |v| v[0].abs_t().sum_all(), 1e-6, "abs");
}

#[test]
fn reductions_and_softmax() {
    let x = randn(&[2, 3, 4], 6);
    gradcheck(&[x.clone()], |v| v[0].mean_all(), 1e-6, "mean_all");
    gradcheck(
        &[x.clone()],
        |v| v[0].sum_axis_keep(1).mul(&v[0].mean_axis_keep(2)).sum_all(),
        1e-6,
        "axis reductions",
    );
    let w = randn(&[2, 3, 4], 7);
    gradcheck(
        &[x, w],
        |v| v[0].softmax_last().mul(&v[1]).sum_all(),
        1e-5,
        "softmax",
    );
}

#[test]
fn shape_ops() {
    let x = randn(&[2, 3, 4], 8);
    let w = randn(&[4, 3, 2], 9);
    gradcheck(
        &[x.clone(), w],
        |v| v[0].permute(&[2, 1, 0]).mul(&v[1]).sum_all(),
        1e-6,
        "permute",
    );
    let m = randn(&[24], 10);
    gradcheck(
        &[x.clone(), m],
        |v| v[0].reshape(&[24]).mul(&v[1]).sum_all(),
        1e-6,
        "reshape",
    );
    gradcheck(
        &[x.clone()],
        |v| v[0].narrow(1, 1, 2).mul(&v[0].narrow(1, 0, 2)).sum_all(),
        1e-6,
        "narrow",
    );
    let a = randn(&[2, 2, 4], 11);
    let b = randn(&[2, 1, 4], 12);
    gradcheck(
        &[a, b],
        |v| {
            let c = concat(&[&v[0], &v[1]], 1);
            c.mul(&c).sum_all()
        },
        1e-6,
        "concat",
    );
}

#[test]
fn gather_and_place() {
    let x = randn(&[2, 2, 6], 13);
    let idx: Rc<Vec<i64>> = Rc::new(vec![5, -1, 0, 0, 3, 2, -1, 4]);
    let w = randn(&[2, 2, 8], 14);
    gradcheck(
        &[x.clone(), w],
        |v| v[0].gather_last(&idx).mul(&v[1]).sum_all(),
        1e-6,
        "gather_last",
    );
    let idx2: Rc<Vec<i64>> = Rc::new(vec![2, 0, -1, 5, 5, 1]);
    let w2 = randn(&[2, 2, 7], 15);
    gradcheck(
        &[x.clone(), w2],
        |v| v[0].place_last(&idx2, 7).mul(&v[1]).sum_all(),
        1e-6,
        "place_last",
    );
}

#[test]
fn matmul_all_ranks() {
    let a = randn(&[3, 4], 16);
    let b = randn(&[4, 2], 17);
    gradcheck(&[a, b], |v| v[0].matmul(&v[1]).sum_all(), 1e-6, "matmul 2x2");
    let ab = randn(&[2, 3, 4], 18);
    let bb = randn(&[2, 4, 2], 19);
    gradcheck(&[ab.clone(), bb], |v| v[0].matmul(&v[1]).sum_all(), 1e-6, "matmul 3x3");
    let shared = randn(&[4, 2], 20);
    gradcheck(&[ab, shared], |v| v[0].matmul(&v[1]).sum_all(), 1e-6, "matmul 3x2");
}

#[test]
fn conv_ops() {
    let x = randn(&[2, 3, 5, 6], 21);
    let w = randn(&[4, 3, 3, 3], 22);
    gradcheck(
        &[x.clone(), w],
        |v| {
            let y = conv2d(&v[0], &v[1], 1, 1);
            y.mul(&y).mean_all()
        },
        1e-5,
        "conv2d s1",
    );
    let w2 = randn(&[2, 3, 3, 3], 23);
    gradcheck(
        &[x.clone(), w2],
        |v| conv2d(&v[0], &v[1], 2, 1).sum_all(),
        1e-5,
        "conv2d s2",
    );
    let wd = randn(&[3, 3, 3], 24);
    gradcheck(
        &[x, wd],
        |v| {
            let y = depthwise_conv2d(&v[0], &v[1], 1);
            y.mul(&y).mean_all()
        },
        1e-5,
        "depthwise",
    );
}

#[test]
fn composite_resampling_ops() {
    let x = randn(&[1, 4, 3, 3], 25);
    let w = randn(&[1, 1, 6, 6], 26);
    gradcheck(
        &[x, w],
        |v| pixel_shuffle(&v[0], 2).mul(&v[1]).sum_all(),
        1e-6,
        "pixel_shuffle",
    );
    let y = randn(&[1, 2, 4, 5], 27);
    let wy = randn(&[1, 2, 7, 9], 28);
    gradcheck(
        &[y.clone(), wy],
        |v| bilinear_resize(&v[0], 7, 9).mul(&v[1]).sum_all(),
        1e-5,
        "bilinear up",
    );
    let wd = randn(&[1, 2, 2, 3], 29);
    gradcheck(
        &[y, wd],
        |v| bilinear_resize(&v[0], 2, 3).mul(&v[1]).sum_all(),
        1e-5,
        "bilinear down",
    );
}
