//! Network building blocks: parameter storage, layers, initializers and the
//! Adam optimizer.
//!
//! Layer structs are plain descriptions (parameter names + hyperparameters);
//! the actual arrays live in a [`ParamStore`]. Each forward pass turns the
//! store into graph leaves once ([`ParamStore::leaves`]) and the layers look
//! their tensors up by name, which keeps frozen networks trivially shareable
//! across threads and makes checkpointing a byte-level dump of the store.

use crate::error::{Error, Result};
use crate::tensor::{grad, Tensor};
use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Named parameter arrays in insertion order.
#[derive(Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, arr: ArrayD<f64>) {
        let prev = self.map.insert(name.to_string(), arr);
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Turns every parameter into a graph leaf. `trainable` decides whether
    /// the leaves can receive gradients.
    pub fn leaves(&self, trainable: bool) -> ParamTensors {
        let map = self
            .map
            .iter()
            .map(|(k, v)| {
                let t = if trainable {
                    Tensor::var(v.clone())
                } else {
                    Tensor::leaf(v.clone())
                };
                (k.clone(), t)
            })
            .collect();
        ParamTensors { map }
    }

    /// SHA-256 over names, shapes and raw little-endian values, in insertion
    /// order. Used by the frozen-network guarantee.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, arr) in &self.map {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in arr.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in arr.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Checks that `self` and `other` hold exactly the same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                self.map.len(),
                other.map.len()
            )));
        }
        for (name, arr) in &self.map {
            let Some(other_arr) = other.map.get(name) else {
                return Err(Error::Checkpoint(format!("missing parameter: {name}")));
            };
            if arr.shape() != other_arr.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    arr.shape(),
                    other_arr.shape()
                )));
            }
        }
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Graph leaves for one forward pass.
pub struct ParamTensors {
    map: IndexMap<String, Tensor>,
}

impl ParamTensors {
    pub fn get(&self, name: &str) -> Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter leaf: {name}"))
            .clone()
    }

    /// Gradients of `loss` for every parameter, in store order.
    pub fn grads(&self, loss: &Tensor) -> Vec<(String, ArrayD<f64>)> {
        let wrt: Vec<&Tensor> = self.map.values().collect();
        let gs = grad(loss, &wrt, false);
        self.map
            .keys()
            .cloned()
            .zip(gs.into_iter().map(|t| t.data().clone()))
            .collect()
    }
}

// ---- initialization ----

pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("he_normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let dist = Normal::new(0.0, 1.0).expect("standard_normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

// ---- layers ----

/// 2-D convolution, square kernel, zero padding. Weight layout
/// `(out, in, k, k)`, bias `(out,)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        path: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = format!("{path}.w");
        let b = format!("{path}.b");
        store.insert(&w, he_normal(&[cout, cin, k, k], cin * k * k, rng));
        store.insert(&b, ArrayD::zeros(IxDyn(&[cout])));
        Self { w, b, cin, cout, k, stride, pad }
    }

    pub fn forward(&self, p: &ParamTensors, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 4, "conv2d: expects (N,C,H,W)");
        assert_eq!(shape[1], self.cin, "conv2d: input channel mismatch");
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        let cols = x.im2col(self.k, self.stride, self.pad);
        let wm = p.get(&self.w).reshape(&[self.cout, self.cin * self.k * self.k]);
        let out = wm
            .matmul(&cols)
            .reshape(&[self.cout, n, oh, ow])
            .permute(&[1, 0, 2, 3]);
        let bias = p
            .get(&self.b)
            .reshape(&[1, self.cout, 1, 1])
            .broadcast_to(out.shape());
        out.add(&bias)
    }
}

/// Fully connected layer. Weight layout `(out, in)`, bias `(out,)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        path: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        let w = format!("{path}.w");
        let b = format!("{path}.b");
        store.insert(&w, he_normal(&[fout, fin], fin, rng));
        store.insert(&b, ArrayD::zeros(IxDyn(&[fout])));
        Self { w, b, fin, fout }
    }

    pub fn forward(&self, p: &ParamTensors, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 2, "linear: expects (N,F)");
        assert_eq!(shape[1], self.fin, "linear: input feature mismatch");
        let n = shape[0];
        let out = x.matmul_bt(&p.get(&self.w));
        let bias = p.get(&self.b).reshape(&[1, self.fout]).broadcast_to(&[n, self.fout]);
        out.add(&bias)
    }
}

/// Two 3×3 convolutions with a skip connection; leaky ReLU activations.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl ResBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, path: &str, channels: usize) -> Self {
        let conv1 = Conv2d::new(store, rng, &format!("{path}.c1"), channels, channels, 3, 1, 1);
        let conv2 = Conv2d::new(store, rng, &format!("{path}.c2"), channels, channels, 3, 1, 1);
        Self { conv1, conv2 }
    }

    pub fn forward(&self, p: &ParamTensors, x: &Tensor) -> Tensor {
        let h = self.conv1.forward(p, x).leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(p, &h);
        x.add(&h).leaky_relu(LEAKY_SLOPE)
    }
}

// ---- depth-to-space ----

/// Depth-to-space on a batched tensor `(N, C·r², H, W) -> (N, C, rH, rW)`
/// with `out(c, r·h+dy, r·w+dx) = in(c·r² + dy·r + dx, h, w)`.
pub fn pixel_shuffle_t(x: &Tensor, r: usize) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "pixel_shuffle: expects (N,C,H,W)");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(c % (r * r), 0, "pixel_shuffle: channels not divisible by r^2");
    let cout = c / (r * r);
    x.reshape(&[n, cout, r, r, h, w])
        .permute(&[0, 1, 4, 2, 5, 3])
        .reshape(&[n, cout, h * r, w * r])
}

/// Space-to-depth; exact inverse of [`pixel_shuffle_t`].
pub fn pixel_unshuffle_t(x: &Tensor, r: usize) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "pixel_unshuffle: expects (N,C,H,W)");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % r == 0 && w % r == 0, "pixel_unshuffle: size not divisible by r");
    x.reshape(&[n, c, h / r, r, w / r, r])
        .permute(&[0, 1, 3, 5, 2, 4])
        .reshape(&[n, c * r * r, h / r, w / r])
}

// ---- bilinear resampling ----

/// Interpolation matrix `(out_len, in_len)` for 1-D linear resampling with
/// half-pixel centers (corner alignment off). Rows sum to 1.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let i0 = src.floor();
        let lam = src - i0;
        let i0c = (i0 as isize).clamp(0, in_len as isize - 1) as usize;
        let i1c = (i0 as isize + 1).clamp(0, in_len as isize - 1) as usize;
        m[(o, i0c)] += 1.0 - lam;
        m[(o, i1c)] += lam;
    }
    m
}

/// Bilinear upsampling of `(N, C, H, W)` by an integer factor, differentiable.
pub fn upsample_bilinear_t(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "upsample_bilinear: expects (N,C,H,W)");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h * factor, w * factor);
    let bw = Tensor::leaf(bilinear_matrix(w, ow).into_dyn());
    let bh = Tensor::leaf(bilinear_matrix(h, oh).into_dyn());
    // width axis
    let y = x
        .reshape(&[n * c * h, w])
        .matmul_bt(&bw)
        .reshape(&[n, c, h, ow]);
    // height axis
    y.permute(&[0, 1, 3, 2])
        .reshape(&[n * c * ow, h])
        .matmul_bt(&bh)
        .reshape(&[n, c, ow, oh])
        .permute(&[0, 1, 3, 2])
}

// ---- optimizer ----

/// Adam hyperparameters. The defaults follow the common
/// step 1e-3, decays (0.9, 0.999), epsilon 1e-8 setting.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment state for one array.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: ArrayD::zeros(IxDyn(shape)),
            v: ArrayD::zeros(IxDyn(shape)),
            t: 0,
        }
    }

    pub fn step(&mut self, hp: &AdamParams, x: &mut ArrayD<f64>, g: &ArrayD<f64>) {
        assert_eq!(x.shape(), g.shape(), "adam: gradient shape mismatch");
        self.t += 1;
        let b1t = 1.0 - hp.beta1.powi(self.t as i32);
        let b2t = 1.0 - hp.beta2.powi(self.t as i32);
        ndarray::Zip::from(x)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(g)
            .for_each(|x, m, v, &g| {
                *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
                *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
                let mhat = *m / b1t;
                let vhat = *v / b2t;
                *x -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
            });
    }
}

/// Adam over a whole [`ParamStore`].
pub struct Adam {
    hp: AdamParams,
    states: IndexMap<String, AdamState>,
}

impl Adam {
    pub fn new(hp: AdamParams) -> Self {
        Self { hp, states: IndexMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, ArrayD<f64>)]) {
        for (name, g) in grads {
            let x = store.get_mut(name);
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(g.shape()));
            state.step(&self.hp, x, g);
        }
    }
}
