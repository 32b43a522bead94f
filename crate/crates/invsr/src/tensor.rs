//! Reverse-mode automatic differentiation over `ndarray` (f64).
//!
//! Every backward pass is itself written in terms of differentiable tensor
//! ops, so gradients can be differentiated again. The discriminator's
//! gradient penalty relies on this: it takes the gradient of the score with
//! respect to the input and then backpropagates a function of that gradient
//! into the weights.
//!
//! Graphs are thread-local (`Rc`); shared state such as parameter stores
//! lives outside the graph and is turned into leaves per forward pass.

use ndarray::{concatenate, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn, Slice};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Computes gradients for the parents of a node.
///
/// Arguments: gradient w.r.t. the node's output, the parent tensors, and a
/// mask saying which parents actually need a gradient (the rest may be
/// skipped and returned as `None`).
type BackwardFn = Box<dyn Fn(&Tensor, &[Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Inner {
    id: u64,
    data: ArrayD<f64>,
    /// True when a `requires_grad` leaf is reachable through `parents`.
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the computation graph. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("needs_grad", &self.inner.needs_grad)
            .finish()
    }
}

impl Tensor {
    /// Constant leaf: participates in forward math, never receives a gradient.
    pub fn leaf(data: ArrayD<f64>) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data,
                needs_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Differentiable leaf (a variable).
    pub fn var(data: ArrayD<f64>) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data,
                needs_grad: true,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(ArrayD::zeros(IxDyn(shape)))
    }

    fn node(data: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data,
                needs_grad,
                parents,
                backward: if needs_grad { Some(backward) } else { None },
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.inner.data
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.data.shape()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "scalar_value on non-scalar tensor");
        *self.inner.data.iter().next().expect("empty tensor")
    }

    /// Copy of the data as a fresh constant leaf (cuts the graph).
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.data.clone())
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        Tensor::node(
            &self.inner.data + &other.inner.data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _p, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.clone()),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        Tensor::node(
            &self.inner.data - &other.inner.data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _p, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.neg()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        Tensor::node(
            &self.inner.data * &other.inner.data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, need| {
                vec![
                    need[0].then(|| g.mul(&p[1])),
                    need[1].then(|| g.mul(&p[0])),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        Tensor::node(
            self.inner.data.mapv(|v| -v),
            vec![self.clone()],
            Box::new(|g, _p, need| vec![need[0].then(|| g.neg())]),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::node(
            self.inner.data.mapv(|v| v * c),
            vec![self.clone()],
            Box::new(move |g, _p, need| vec![need[0].then(|| g.scale(c))]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::node(
            self.inner.data.mapv(|v| v + c),
            vec![self.clone()],
            Box::new(|g, _p, need| vec![need[0].then(|| g.clone())]),
        )
    }

    pub fn relu(&self) -> Tensor {
        Tensor::node(
            self.inner.data.mapv(|v| v.max(0.0)),
            vec![self.clone()],
            Box::new(|g, p, need| {
                vec![need[0].then(|| {
                    let mask = Tensor::leaf(p[0].data().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                    g.mul(&mask)
                })]
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        Tensor::node(
            self.inner.data.mapv(|v| if v > 0.0 { v } else { v * slope }),
            vec![self.clone()],
            Box::new(move |g, p, need| {
                vec![need[0].then(|| {
                    let mask =
                        Tensor::leaf(p[0].data().mapv(|v| if v > 0.0 { 1.0 } else { slope }));
                    g.mul(&mask)
                })]
            }),
        )
    }

    pub fn abs(&self) -> Tensor {
        Tensor::node(
            self.inner.data.mapv(f64::abs),
            vec![self.clone()],
            Box::new(|g, p, need| {
                vec![need[0].then(|| {
                    let sign = Tensor::leaf(p[0].data().mapv(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }));
                    g.mul(&sign)
                })]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::node(
            self.inner.data.mapv(f64::tanh),
            vec![self.clone()],
            Box::new(|g, p, need| {
                vec![need[0].then(|| {
                    // recompute: keeps the derivative itself differentiable
                    let y = p[0].tanh();
                    let one_minus_y2 = y.mul(&y).neg().add_scalar(1.0);
                    g.mul(&one_minus_y2)
                })]
            }),
        )
    }

    /// Elementwise power. The caller is responsible for the domain
    /// (non-integer exponents require non-negative bases).
    pub fn powf(&self, p: f64) -> Tensor {
        Tensor::node(
            self.inner.data.mapv(|v| v.powf(p)),
            vec![self.clone()],
            Box::new(move |g, par, need| {
                vec![need[0].then(|| g.mul(&par[0].powf(p - 1.0).scale(p)))]
            }),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(self.len(), n, "reshape: element count mismatch");
        let in_shape: Vec<usize> = self.shape().to_vec();
        let data = ArrayD::from_shape_vec(IxDyn(shape), self.inner.data.iter().cloned().collect())
            .expect("reshape");
        Tensor::node(
            data,
            vec![self.clone()],
            Box::new(move |g, _p, need| vec![need[0].then(|| g.reshape(&in_shape))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.shape().len(), "permute: rank mismatch");
        let mut inv = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        let data = self
            .inner
            .data
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        Tensor::node(
            data,
            vec![self.clone()],
            Box::new(move |g, _p, need| vec![need[0].then(|| g.permute(&inv))]),
        )
    }

    /// 2-D transpose.
    pub fn t2(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "t2: expects a 2-D tensor");
        self.permute(&[1, 0])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        let in_shape: Vec<usize> = self.shape().to_vec();
        let data = self
            .inner
            .data
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast_to: {:?} -> {:?}", in_shape, shape))
            .to_owned();
        Tensor::node(
            data,
            vec![self.clone()],
            Box::new(move |g, _p, need| {
                vec![need[0].then(|| {
                    if in_shape.is_empty() {
                        return g.sum_all();
                    }
                    let axes: Vec<usize> = (0..g.shape().len())
                        .filter(|&i| in_shape[i] == 1 && g.shape()[i] != 1)
                        .collect();
                    let summed = if axes.is_empty() { g.clone() } else { g.sum_axes(&axes) };
                    summed.reshape(&in_shape)
                })]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let in_shape: Vec<usize> = self.shape().to_vec();
        Tensor::node(
            ArrayD::from_elem(IxDyn(&[]), self.inner.data.sum()),
            vec![self.clone()],
            Box::new(move |g, _p, need| vec![need[0].then(|| g.broadcast_to(&in_shape))]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over the given axes (removed from the output shape).
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor {
        assert!(!axes.is_empty(), "sum_axes: empty axis list");
        let in_shape: Vec<usize> = self.shape().to_vec();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut data = self.inner.data.clone();
        for &a in sorted.iter().rev() {
            data = data.sum_axis(Axis(a));
        }
        let keep_shape: Vec<usize> = {
            let mut s = in_shape.clone();
            for &a in &sorted {
                s[a] = 1;
            }
            s
        };
        Tensor::node(
            data,
            vec![self.clone()],
            Box::new(move |g, _p, need| {
                vec![need[0].then(|| g.reshape(&keep_shape).broadcast_to(&in_shape))]
            }),
        )
    }

    // ---- linear algebra ----

    fn view2(&self, what: &str) -> ndarray::ArrayView2<'_, f64> {
        self.inner
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("{what}: tensor not 2-D"))
    }

    /// 2-D matrix product `a·b`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self.view2("matmul lhs");
        let b = other.view2("matmul rhs");
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimension mismatch");
        let out: Array2<f64> = a.dot(&b);
        Tensor::node(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(|g, p, need| {
                vec![
                    need[0].then(|| g.matmul_bt(&p[1])),
                    need[1].then(|| p[0].matmul_ta(g)),
                ]
            }),
        )
    }

    /// `self·otherᵀ` without materializing the transpose (GEMM takes the
    /// strided view directly).
    pub fn matmul_bt(&self, other: &Tensor) -> Tensor {
        let a = self.view2("matmul_bt lhs");
        let b = other.view2("matmul_bt rhs");
        assert_eq!(a.ncols(), b.ncols(), "matmul_bt: inner dimension mismatch");
        let out: Array2<f64> = a.dot(&b.t());
        Tensor::node(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(|g, p, need| {
                vec![
                    need[0].then(|| g.matmul(&p[1])),
                    need[1].then(|| g.matmul_ta(&p[0])),
                ]
            }),
        )
    }

    /// `selfᵀ·other` without materializing the transpose.
    pub fn matmul_ta(&self, other: &Tensor) -> Tensor {
        let a = self.view2("matmul_ta lhs");
        let b = other.view2("matmul_ta rhs");
        assert_eq!(a.nrows(), b.nrows(), "matmul_ta: inner dimension mismatch");
        let out: Array2<f64> = a.t().dot(&b);
        Tensor::node(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(|g, p, need| {
                vec![
                    need[0].then(|| p[1].matmul_bt(g)),
                    need[1].then(|| p[0].matmul(g)),
                ]
            }),
        )
    }

    // ---- slicing / joining ----

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let full = self.shape()[axis];
        assert!(start + len <= full, "narrow: out of range");
        let data = self
            .inner
            .data
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Tensor::node(
            data,
            vec![self.clone()],
            Box::new(move |g, _p, need| vec![need[0].then(|| g.embed(axis, start, full))]),
        )
    }

    /// Embeds into a zero tensor whose `axis` has length `out_len`,
    /// placing this tensor at offset `start`. Adjoint of [`Tensor::narrow`].
    pub fn embed(&self, axis: usize, start: usize, out_len: usize) -> Tensor {
        let in_len = self.shape()[axis];
        assert!(start + in_len <= out_len, "embed: out of range");
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape[axis] = out_len;
        let mut data = ArrayD::zeros(IxDyn(&shape));
        data.slice_axis_mut(Axis(axis), Slice::from(start..start + in_len))
            .assign(&self.inner.data);
        Tensor::node(
            data,
            vec![self.clone()],
            Box::new(move |g, _p, need| vec![need[0].then(|| g.narrow(axis, start, in_len))]),
        )
    }

    // ---- image-specific primitives (N, C, H, W) ----

    /// Unfolds sliding k×k windows into columns of shape
    /// `(C·k·k, N·OH·OW)`; column index is `n`-major.
    pub fn im2col(&self, k: usize, stride: usize, pad: usize) -> Tensor {
        let in_shape: Vec<usize> = self.shape().to_vec();
        assert_eq!(in_shape.len(), 4, "im2col: expects (N,C,H,W)");
        let data = im2col_data(&self.inner.data, k, stride, pad);
        Tensor::node(
            data.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, _p, need| {
                vec![need[0].then(|| g.col2im(k, stride, pad, &in_shape))]
            }),
        )
    }

    /// Adjoint of [`Tensor::im2col`]: scatter-adds columns back into an image.
    pub fn col2im(&self, k: usize, stride: usize, pad: usize, out_shape: &[usize]) -> Tensor {
        assert_eq!(out_shape.len(), 4, "col2im: expects target (N,C,H,W)");
        let data = col2im_data(&self.inner.data, k, stride, pad, out_shape);
        Tensor::node(
            data.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, _p, need| vec![need[0].then(|| g.im2col(k, stride, pad))]),
        )
    }

    /// 2×2 average pooling, stride 2.
    pub fn avg_pool2(&self) -> Tensor {
        let data = avg_pool2_data(&self.inner.data);
        Tensor::node(
            data,
            vec![self.clone()],
            Box::new(|g, _p, need| vec![need[0].then(|| g.upsample_nearest2().scale(0.25))]),
        )
    }

    /// 2× nearest-neighbor upsampling.
    pub fn upsample_nearest2(&self) -> Tensor {
        let data = upsample_nearest2_data(&self.inner.data);
        Tensor::node(
            data,
            vec![self.clone()],
            Box::new(|g, _p, need| vec![need[0].then(|| g.avg_pool2().scale(4.0))]),
        )
    }

    /// 2×2 max pooling, stride 2. Ties resolve to the first element in scan
    /// order so the backward mask is deterministic.
    pub fn max_pool2(&self) -> Tensor {
        let data = max_pool2_data(&self.inner.data);
        Tensor::node(
            data,
            vec![self.clone()],
            Box::new(|g, p, need| {
                vec![need[0].then(|| {
                    let mask = Tensor::leaf(max_pool2_mask(p[0].data()));
                    g.upsample_nearest2().mul(&mask)
                })]
            }),
        )
    }
}

/// Concatenates along `axis`.
pub fn concat(axis: usize, parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat: no inputs");
    let views: Vec<_> = parts.iter().map(|t| t.data().view()).collect();
    let data = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
    let lens: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
    let parents: Vec<Tensor> = parts.iter().map(|&t| t.clone()).collect();
    Tensor::node(
        data,
        parents,
        Box::new(move |g, _p, need| {
            let mut out = Vec::with_capacity(lens.len());
            let mut start = 0usize;
            for (i, &len) in lens.iter().enumerate() {
                out.push(need[i].then(|| g.narrow(axis, start, len)));
                start += len;
            }
            out
        }),
    )
}

// ---- raw data kernels ----

fn dims4(x: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Valid output range for one kernel offset: `xo` such that
/// `0 <= xo·stride + d − pad < limit`, clipped to `[0, out_len)`.
fn valid_span(out_len: usize, limit: usize, stride: usize, d: usize, pad: usize) -> (usize, usize) {
    let start = if d >= pad { 0 } else { (pad - d).div_ceil(stride) };
    let max_from_limit = if limit + pad > d {
        (limit + pad - d - 1) / stride + 1
    } else {
        0
    };
    (start.min(out_len), max_from_limit.min(out_len))
}

fn contiguous(x: &ArrayD<f64>) -> std::borrow::Cow<'_, [f64]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().cloned().collect()),
    }
}

fn im2col_data(x: &ArrayD<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = dims4(x);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let l = oh * ow;
    let ncols = n * l;
    let xs = contiguous(x);
    let xs: &[f64] = &xs;
    let mut out = vec![0.0f64; c * k * k * ncols];
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                let dst_row = &mut out[row * ncols..(row + 1) * ncols];
                let (xo_start, xo_end) = valid_span(ow, w, stride, dj, pad);
                for ni in 0..n {
                    let img = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for y in 0..oh {
                        let iy = (y * stride + di) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &img[iy as usize * w..(iy as usize + 1) * w];
                        let dst_base = ni * l + y * ow;
                        if xo_start >= xo_end {
                            continue;
                        }
                        let ix_start = xo_start * stride + dj - pad;
                        if stride == 1 {
                            let len = xo_end - xo_start;
                            dst_row[dst_base + xo_start..dst_base + xo_start + len]
                                .copy_from_slice(&line[ix_start..ix_start + len]);
                        } else {
                            let mut ix = ix_start;
                            for xo in xo_start..xo_end {
                                dst_row[dst_base + xo] = line[ix];
                                ix += stride;
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ncols), out).expect("im2col: shape")
}

fn col2im_data(
    cols: &ArrayD<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Array4<f64> {
    let (n, c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let l = oh * ow;
    let ncols = n * l;
    assert_eq!(cols.shape(), &[c * k * k, ncols], "col2im: column matrix shape");
    let cs = contiguous(cols);
    let cs: &[f64] = &cs;
    let mut out = vec![0.0f64; n * c * h * w];
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                let src_row = &cs[row * ncols..(row + 1) * ncols];
                let (xo_start, xo_end) = valid_span(ow, w, stride, dj, pad);
                for ni in 0..n {
                    let img = &mut out[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for y in 0..oh {
                        let iy = (y * stride + di) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut img[iy as usize * w..(iy as usize + 1) * w];
                        let src_base = ni * l + y * ow;
                        if xo_start >= xo_end {
                            continue;
                        }
                        let ix_start = xo_start * stride + dj - pad;
                        if stride == 1 {
                            let len = xo_end - xo_start;
                            for (d, s) in line[ix_start..ix_start + len]
                                .iter_mut()
                                .zip(&src_row[src_base + xo_start..src_base + xo_start + len])
                            {
                                *d += *s;
                            }
                        } else {
                            let mut ix = ix_start;
                            for xo in xo_start..xo_end {
                                line[ix] += src_row[src_base + xo];
                                ix += stride;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("col2im: shape")
}

fn avg_pool2_data(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size");
    let x4 = x.view().into_dimensionality::<Ix4>().expect("rank");
    let mut out = Array4::<f64>::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h / 2 {
                for xo in 0..w / 2 {
                    out[(ni, ci, y, xo)] = 0.25
                        * (x4[(ni, ci, 2 * y, 2 * xo)]
                            + x4[(ni, ci, 2 * y, 2 * xo + 1)]
                            + x4[(ni, ci, 2 * y + 1, 2 * xo)]
                            + x4[(ni, ci, 2 * y + 1, 2 * xo + 1)]);
                }
            }
        }
    }
    out.into_dyn()
}

fn upsample_nearest2_data(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = dims4(x);
    let x4 = x.view().into_dimensionality::<Ix4>().expect("rank");
    let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xo in 0..w {
                    let v = x4[(ni, ci, y, xo)];
                    out[(ni, ci, 2 * y, 2 * xo)] = v;
                    out[(ni, ci, 2 * y, 2 * xo + 1)] = v;
                    out[(ni, ci, 2 * y + 1, 2 * xo)] = v;
                    out[(ni, ci, 2 * y + 1, 2 * xo + 1)] = v;
                }
            }
        }
    }
    out.into_dyn()
}

fn max_pool2_data(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: odd spatial size");
    let x4 = x.view().into_dimensionality::<Ix4>().expect("rank");
    let mut out = Array4::<f64>::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h / 2 {
                for xo in 0..w / 2 {
                    let mut best = x4[(ni, ci, 2 * y, 2 * xo)];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x4[(ni, ci, 2 * y + dy, 2 * xo + dx)];
                        if v > best {
                            best = v;
                        }
                    }
                    out[(ni, ci, y, xo)] = best;
                }
            }
        }
    }
    out.into_dyn()
}

fn max_pool2_mask(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = dims4(x);
    let x4 = x.view().into_dimensionality::<Ix4>().expect("rank");
    let mut mask = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h / 2 {
                for xo in 0..w / 2 {
                    let mut best = (0usize, 0usize);
                    let mut best_v = x4[(ni, ci, 2 * y, 2 * xo)];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x4[(ni, ci, 2 * y + dy, 2 * xo + dx)];
                        if v > best_v {
                            best_v = v;
                            best = (dy, dx);
                        }
                    }
                    mask[(ni, ci, 2 * y + best.0, 2 * xo + best.1)] = 1.0;
                }
            }
        }
    }
    mask.into_dyn()
}

// ---- backward pass ----

/// Gradients of a scalar `root` with respect to `wrt`.
///
/// With `create_graph` the returned tensors stay connected to the graph and
/// can be differentiated again; otherwise they are detached leaves.
/// Tensors in `wrt` that the root does not depend on get a zero gradient.
pub fn grad(root: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(root.len(), 1, "grad: root must be a scalar");

    // Topological order (inputs before consumers) over nodes that can
    // carry gradient.
    let mut topo: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((node, mut next)) = stack.pop() {
        if next == 0 && !seen.insert(node.id()) {
            continue;
        }
        let parents = &node.inner.parents;
        let mut descended = false;
        while next < parents.len() {
            let p = &parents[next];
            next += 1;
            if p.inner.needs_grad && !seen.contains(&p.id()) {
                stack.push((node.clone(), next));
                stack.push((p.clone(), 0));
                descended = true;
                break;
            }
        }
        if !descended {
            topo.push(node);
        }
    }

    // Active set: nodes from which some wrt tensor is reachable.
    let wrt_ids: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let mut active: HashSet<u64> = HashSet::new();
    for node in &topo {
        if wrt_ids.contains(&node.id())
            || node.inner.parents.iter().any(|p| active.contains(&p.id()))
        {
            active.insert(node.id());
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(
        root.id(),
        Tensor::leaf(ArrayD::from_elem(IxDyn(root.shape()), 1.0)),
    );

    for node in topo.iter().rev() {
        if !active.contains(&node.id()) {
            continue;
        }
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        let Some(back) = &node.inner.backward else {
            continue;
        };
        let parents = &node.inner.parents;
        let need: Vec<bool> = parents
            .iter()
            .map(|p| p.inner.needs_grad && active.contains(&p.id()))
            .collect();
        let pgrads = back(&g, parents, &need);
        debug_assert_eq!(pgrads.len(), parents.len(), "backward arity mismatch");
        for (parent, pg) in parents.iter().zip(pgrads) {
            let Some(pg) = pg else { continue };
            debug_assert_eq!(
                pg.shape(),
                parent.shape(),
                "backward produced wrong gradient shape"
            );
            match grads.remove(&parent.id()) {
                Some(existing) => {
                    grads.insert(parent.id(), existing.add(&pg));
                }
                None => {
                    grads.insert(parent.id(), pg);
                }
            }
        }
    }

    wrt.iter()
        .map(|t| {
            let g = grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            if create_graph {
                g
            } else {
                g.detach()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Dimension, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar-valued function.
    fn numeric_grad<F>(f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
    where
        F: Fn(&ArrayD<f64>) -> f64,
    {
        let mut g = ArrayD::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check_grad<F>(f: F, x: &ArrayD<f64>, tol: f64)
    where
        F: Fn(&Tensor) -> Tensor,
    {
        let xt = Tensor::var(x.clone());
        let y = f(&xt);
        let analytic = grad(&y, &[&xt], false)[0].data().clone();
        let numeric = numeric_grad(
            |arr| f(&Tensor::leaf(arr.clone())).scalar_value(),
            x,
            1e-6,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = 1.0_f64.max(n.abs());
            assert!(
                (a - n).abs() / denom < tol,
                "gradient mismatch: analytic {a} numeric {n}"
            );
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[3, 4], &mut rng);
        check_grad(|t| t.mul(t).sum_all(), &x, 1e-6);
        check_grad(|t| t.add(&t.scale(2.0)).sum_all(), &x, 1e-6);
        check_grad(|t| t.tanh().sum_all(), &x, 1e-5);
        check_grad(|t| t.leaky_relu(0.2).sum_all(), &x, 1e-5);
        check_grad(|t| t.abs().sum_all(), &x, 1e-5);
        check_grad(|t| t.square().mul(&t.square()).sum_all(), &x, 1e-5);
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&[3, 5], &mut rng);
        let b = randn(&[5, 2], &mut rng);
        let bt = Tensor::leaf(b.clone());
        check_grad(|t| t.matmul(&bt).square().sum_all(), &a, 1e-5);
        let at = Tensor::leaf(a);
        check_grad(|t| at.matmul(t).square().sum_all(), &b, 1e-5);
    }

    #[test]
    fn shape_op_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[2, 3, 4], &mut rng);
        check_grad(|t| t.reshape(&[4, 6]).square().sum_all(), &x, 1e-6);
        check_grad(|t| t.permute(&[2, 0, 1]).square().sum_all(), &x, 1e-6);
        check_grad(|t| t.sum_axes(&[1]).square().sum_all(), &x, 1e-6);
        check_grad(|t| t.narrow(2, 1, 2).square().sum_all(), &x, 1e-6);
        check_grad(|t| t.embed(1, 2, 7).square().sum_all(), &x, 1e-6);
        check_grad(
            |t| t.reshape(&[1, 2, 3, 4]).broadcast_to(&[5, 2, 3, 4]).square().sum_all(),
            &x,
            1e-6,
        );
    }

    #[test]
    fn image_op_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&[2, 3, 4, 4], &mut rng);
        check_grad(|t| t.im2col(3, 1, 1).square().sum_all(), &x, 1e-6);
        check_grad(|t| t.im2col(3, 2, 1).square().sum_all(), &x, 1e-6);
        check_grad(|t| t.avg_pool2().square().sum_all(), &x, 1e-6);
        check_grad(|t| t.max_pool2().square().sum_all(), &x, 1e-5);
        check_grad(|t| t.upsample_nearest2().square().sum_all(), &x, 1e-6);
        let y = randn(&[2, 2, 4, 4], &mut rng);
        let yt = Tensor::leaf(y);
        check_grad(
            |t| concat(1, &[t, &yt]).square().sum_all(),
            &x,
            1e-6,
        );
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[2, 3, 6, 6], &mut rng);
        let cols_shape = im2col_data(&x, 3, 2, 1).raw_dim();
        let c = ArrayD::from_shape_simple_fn(cols_shape.into_dyn(), || rng.gen_range(-1.0..1.0));
        let lhs = (&im2col_data(&x, 3, 2, 1).into_dyn() * &c).sum();
        let rhs = (&col2im_data(&c, 3, 2, 1, &[2, 3, 6, 6]).into_dyn() * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint identity violated");
    }

    #[test]
    fn double_backward_cubic() {
        // f = sum(x^3); h = sum((df/dx)^2) = 9*sum(x^4); dh/dx = 36 x^3
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&[5], &mut rng);
        let xt = Tensor::var(x.clone());
        let f = xt.mul(&xt).mul(&xt).sum_all();
        let gx = grad(&f, &[&xt], true).remove(0);
        let h = gx.square().sum_all();
        let ggx = grad(&h, &[&xt], false).remove(0);
        for (v, g) in x.iter().zip(ggx.data().iter()) {
            let expected = 36.0 * v.powi(3);
            assert!((g - expected).abs() < 1e-9, "got {g}, expected {expected}");
        }
    }

    #[test]
    fn double_backward_gradient_norm_penalty() {
        // s = w·x, penalty p = (||∇_x s|| − 1)^2 = (||w|| − 1)^2
        // dp/dw = 2(||w|| − 1) w / ||w||
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = randn(&[6], &mut rng);
        let x = randn(&[6], &mut rng);
        let wt = Tensor::var(w.clone());
        let xt = Tensor::var(x);
        let s = wt.mul(&xt).sum_all();
        let gx = grad(&s, &[&xt], true).remove(0);
        let p = gx.square().sum_all().sqrt().add_scalar(-1.0).square();
        let gw = grad(&p, &[&wt], false).remove(0);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (wi, gi) in w.iter().zip(gw.data().iter()) {
            let expected = 2.0 * (norm - 1.0) * wi / norm;
            assert!(
                (gi - expected).abs() < 1e-9,
                "got {gi}, expected {expected}"
            );
        }
    }

    #[test]
    fn grad_is_zero_for_unreachable_wrt() {
        let a = Tensor::var(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let b = Tensor::var(ArrayD::from_elem(IxDyn(&[3]), 4.0));
        let y = a.square().sum_all();
        let gs = grad(&y, &[&a, &b], false);
        assert!(gs[0].data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
        assert!(gs[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = sum(x*x) + sum(x*x) has gradient 4x
        let x = Tensor::var(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let sq = x.square();
        let y = sq.sum_all().add(&sq.sum_all());
        let g = grad(&y, &[&x], false).remove(0);
        assert!(g.data().iter().all(|&v| (v - 12.0).abs() < 1e-12));
    }
}
