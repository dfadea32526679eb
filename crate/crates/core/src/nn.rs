//! Named parameter store, initializers, Adam, spectral normalization, and
//! the small layer vocabulary shared by the generator and discriminator.

use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, Gradients, Tensor};

/// A named `f64` array with a trainability flag.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub array: ArrayD<f64>,
    pub trainable: bool,
}

/// Ordered name -> array map holding every learnable (and frozen) array of a
/// network. Iteration order is insertion order, which keeps checkpoints and
/// optimizer traversal deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: IndexMap<String, ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.entries
                .insert(name.clone(), ParamEntry { array, trainable: true })
                .is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name).map(|e| &e.array)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.entries.get_mut(name).map(|e| &mut e.array)
    }

    pub fn set(&mut self, name: &str, array: ArrayD<f64>) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(e) => {
                if e.array.shape() != array.shape() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {name}: {:?} vs {:?}",
                        e.array.shape(),
                        array.shape()
                    )));
                }
                e.array = array;
                Ok(())
            }
            None => Err(Error::Checkpoint(format!("unknown parameter {name}"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.array.len()).sum()
    }
}

/// Leaf tensors materialized from a [`Params`] for one forward/backward pass.
pub struct ParamTensors {
    map: HashMap<String, Tensor>,
}

impl ParamTensors {
    /// Trainable entries become gradient-tracked vars.
    pub fn trainable(params: &Params) -> Self {
        Self {
            map: params
                .iter()
                .map(|(k, e)| {
                    let t = if e.trainable {
                        Tensor::var(e.array.clone())
                    } else {
                        Tensor::constant(e.array.clone())
                    };
                    (k.to_string(), t)
                })
                .collect(),
        }
    }

    /// Everything as constants (evaluation, or the non-updated network of a
    /// GAN step).
    pub fn frozen(params: &Params) -> Self {
        Self {
            map: params
                .iter()
                .map(|(k, e)| (k.to_string(), Tensor::constant(e.array.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name}"))
    }

    pub fn leaf_id(&self, name: &str) -> u64 {
        self.get(name).id()
    }
}

// ---- initializers ----

/// He/Kaiming-style scaled normal init.
pub fn kaiming_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

/// Register a conv layer's weight (`[cout, cin, k, k]`) and bias (`[cout]`).
pub fn init_conv(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize) {
    params.insert(
        format!("{name}.weight"),
        kaiming_normal(rng, &[cout, cin, k, k], cin * k * k),
    );
    params.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
}

/// Register a depthwise conv layer's weight (`[c, k, k]`) and bias (`[c]`).
pub fn init_depthwise(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, c: usize, k: usize) {
    params.insert(
        format!("{name}.weight"),
        kaiming_normal(rng, &[c, k, k], k * k),
    );
    params.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c])));
}

/// Register a linear layer's weight (`[cin, cout]`) and bias (`[cout]`).
pub fn init_linear(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) {
    params.insert(
        format!("{name}.weight"),
        kaiming_normal(rng, &[cin, cout], cin),
    );
    params.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
}

/// Register layer-norm gain/offset over the last (channel) axis.
pub fn init_layer_norm(params: &mut Params, name: &str, c: usize) {
    params.insert(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[c]), 1.0));
    params.insert(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])));
}

// ---- layers ----

/// Conv + bias. `x`: `[n, cin, h, w]`.
pub fn conv_layer(p: &ParamTensors, name: &str, x: &Tensor, stride: usize, pad: usize) -> Tensor {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    let cout = w.shape()[0];
    conv2d(x, w, stride, pad).add(&b.reshape(&[1, cout, 1, 1]))
}

/// Conv + bias with the weight spectrally normalized first.
pub fn sn_conv_layer(p: &ParamTensors, name: &str, x: &Tensor, stride: usize, pad: usize) -> Tensor {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    let cout = w.shape()[0];
    let wsn = spectral_normalize(w, name);
    conv2d(x, &wsn, stride, pad).add(&b.reshape(&[1, cout, 1, 1]))
}

/// Linear + bias on the last axis of `[b, t, cin]` or `[t, cin]`.
pub fn linear_layer(p: &ParamTensors, name: &str, x: &Tensor) -> Tensor {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    let cout = w.shape()[1];
    let y = x.matmul(w);
    let bshape: Vec<usize> = std::iter::repeat(1)
        .take(y.shape().len() - 1)
        .chain([cout])
        .collect();
    y.add(&b.reshape(&bshape))
}

/// Layer norm over the last axis with learned gain/offset.
pub fn layer_norm(p: &ParamTensors, name: &str, x: &Tensor) -> Tensor {
    const EPS: f64 = 1e-6;
    let nd = x.shape().len();
    let c = *x.shape().last().unwrap();
    let mu = x.mean_axis_keep(nd - 1);
    let xc = x.sub(&mu);
    let var = xc.mul(&xc).mean_axis_keep(nd - 1);
    let inv = var.shift(EPS).sqrt_t().recip();
    let normed = xc.mul(&inv);
    let bshape: Vec<usize> = std::iter::repeat(1).take(nd - 1).chain([c]).collect();
    let gamma = p.get(&format!("{name}.gamma")).reshape(&bshape);
    let beta = p.get(&format!("{name}.beta")).reshape(&bshape);
    normed.mul(&gamma).add(&beta)
}

// ---- spectral normalization ----

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Estimate the largest singular value of `w` (viewed as `[rows, numel/rows]`)
/// by power iteration run to convergence, then divide the weight by it.
///
/// The singular vectors are treated as constants; the gradient flows through
/// both the weight and the `u^T W v` estimate, matching the usual GAN recipe.
pub fn spectral_normalize(w: &Tensor, label: &str) -> Tensor {
    let shape = w.shape().to_vec();
    let m = shape[0];
    let k: usize = shape[1..].iter().product();
    let wm = w
        .value()
        .view()
        .into_shape_with_order((m, k))
        .expect("standard layout weight");

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0x5eed ^ fnv1a(label));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut u: ndarray::Array1<f64> =
        ndarray::Array1::from_shape_simple_fn(m, || normal.sample(&mut rng));
    let norm = u.dot(&u).sqrt();
    u.mapv_inplace(|x| x / norm);

    let mut v = ndarray::Array1::<f64>::zeros(k);
    let mut sigma_prev = 0.0;
    for _ in 0..200 {
        v = wm.t().dot(&u);
        let nv = v.dot(&v).sqrt().max(1e-30);
        v.mapv_inplace(|x| x / nv);
        let wv = wm.dot(&v);
        let sigma = wv.dot(&wv).sqrt().max(1e-30);
        u = wv.mapv(|x| x / sigma);
        if (sigma - sigma_prev).abs() <= 1e-12 * sigma.max(1.0) {
            sigma_prev = sigma;
            break;
        }
        sigma_prev = sigma;
    }
    let _ = sigma_prev;

    let u_t = Tensor::constant(u.insert_axis(ndarray::Axis(0)).into_dyn()); // [1, m]
    let v_t = Tensor::constant(v.insert_axis(ndarray::Axis(1)).into_dyn()); // [k, 1]
    let w2 = w.reshape(&[m, k]);
    let sigma = u_t.matmul(&w2).matmul(&v_t); // [1, 1], = u^T W v
    let ones: Vec<usize> = std::iter::repeat(1).take(shape.len()).collect();
    w.mul(&sigma.recip().reshape(&ones))
}

// ---- optimizer ----

/// Plain Adam over the trainable entries of a [`Params`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. Parameters without a gradient in `grads` are skipped.
    pub fn step(&mut self, params: &mut Params, tensors: &ParamTensors, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.to_string())
            .collect();
        for name in names {
            let Some(g) = grads.get_by_id(tensors.leaf_id(&name)) else {
                continue;
            };
            let entry = params.get_mut(&name).unwrap();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(entry.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(entry.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            ndarray::Zip::from(entry)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    /// Flatten optimizer state into named arrays for checkpointing.
    pub fn export_arrays(&self, prefix: &str) -> Vec<(String, ArrayD<f64>)> {
        let mut out = vec![(
            format!("{prefix}.t"),
            ArrayD::from_elem(IxDyn(&[1]), self.t as f64),
        )];
        for (k, a) in &self.m {
            out.push((format!("{prefix}.m.{k}"), a.clone()));
        }
        for (k, a) in &self.v {
            out.push((format!("{prefix}.v.{k}"), a.clone()));
        }
        out
    }

    /// Restore state exported by [`Adam::export_arrays`].
    pub fn import_arrays<'a>(
        &mut self,
        prefix: &str,
        arrays: impl Iterator<Item = (&'a str, &'a ArrayD<f64>)>,
    ) -> Result<()> {
        let tkey = format!("{prefix}.t");
        let mpre = format!("{prefix}.m.");
        let vpre = format!("{prefix}.v.");
        self.m.clear();
        self.v.clear();
        let mut saw_t = false;
        for (name, a) in arrays {
            if name == tkey {
                self.t = a[[0]] as u64;
                saw_t = true;
            } else if let Some(k) = name.strip_prefix(&mpre) {
                self.m.insert(k.to_string(), a.clone());
            } else if let Some(k) = name.strip_prefix(&vpre) {
                self.v.insert(k.to_string(), a.clone());
            }
        }
        if !saw_t {
            return Err(Error::Checkpoint(format!("missing {tkey} in checkpoint")));
        }
        Ok(())
    }
}
