//! A small reverse-mode autodiff tape over `f64` ndarrays.
//!
//! Only the operations the model needs are provided. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! `backward` is a single reverse sweep. Gradients are only propagated into
//! nodes that (transitively) depend on a leaf created with
//! `requires_grad = true`; frozen sub-graphs are skipped entirely.
//!
//! Everything is single-threaded and reductions run in a fixed order, so the
//! same inputs always produce bit-identical values and gradients.

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, IxDyn};

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    ToTokens(Var),
    FromTokens(Var),
    ConcatTokens(Var, Var),
    SliceTokens {
        x: Var,
        start: usize,
    },
    PoolToken(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn std_layout(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn slice(t: &Tensor) -> &[f64] {
    t.as_slice().expect("tape tensors are kept in standard layout")
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length agree")
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a rank-3 tensor, got shape {s:?}");
    (s[0], s[1], s[2])
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source indices and weights for one output coordinate of a bilinear
/// resize with half-pixel centres (`align_corners = false`).
#[derive(Debug, Clone, Copy)]
pub struct InterpTap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub fn interp_taps(len_in: usize, len_out: usize) -> Vec<InterpTap> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            let w1 = src - i0 as f64;
            InterpTap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Bilinear resize of one `h_in x w_in` plane into `out`.
pub fn resize_plane(
    src: &[f64],
    (h_in, w_in): (usize, usize),
    out: &mut [f64],
    (h_out, w_out): (usize, usize),
) {
    let ty = interp_taps(h_in, h_out);
    let tx = interp_taps(w_in, w_out);
    for (oy, y) in ty.iter().enumerate() {
        let r0 = &src[y.i0 * w_in..(y.i0 + 1) * w_in];
        let r1 = &src[y.i1 * w_in..(y.i1 + 1) * w_in];
        for (ox, x) in tx.iter().enumerate() {
            let top = x.w0 * r0[x.i0] + x.w1 * r0[x.i1];
            let bot = x.w0 * r1[x.i0] + x.w1 * r1[x.i1];
            out[oy * w_out + ox] = y.w0 * top + y.w1 * bot;
        }
    }
}

fn resize_plane_adjoint(
    grad_out: &[f64],
    (h_out, w_out): (usize, usize),
    grad_in: &mut [f64],
    (h_in, w_in): (usize, usize),
) {
    let ty = interp_taps(h_in, h_out);
    let tx = interp_taps(w_in, w_out);
    for (oy, y) in ty.iter().enumerate() {
        for (ox, x) in tx.iter().enumerate() {
            let g = grad_out[oy * w_out + ox];
            grad_in[y.i0 * w_in + x.i0] += y.w0 * x.w0 * g;
            grad_in[y.i0 * w_in + x.i1] += y.w0 * x.w1 * g;
            grad_in[y.i1 * w_in + x.i0] += y.w1 * x.w0 * g;
            grad_in[y.i1 * w_in + x.i1] += y.w1 * x.w1 * g;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds `x` into a `[C*k*k, N*Ho*Wo]` matrix.
/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad`
/// falls inside the image, and the input column of `lo`.
fn valid_span(len_out: usize, len_in: usize, stride: usize, kj: usize, pad: usize) -> (usize, usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    let hi = (len_in + pad).saturating_sub(kj).div_ceil(stride).min(len_out);
    let lo = lo.min(hi);
    (lo, hi, (lo * stride + kj).saturating_sub(pad))
}

fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0.0; rows * cols];
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let (lo, hi, ix0) = valid_span(g.wo, g.w, g.stride, kj, g.pad);
                if lo == hi {
                    continue;
                }
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w + ix0..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * g.wo + lo..oy * g.wo + hi];
                        if g.stride == 1 {
                            dst_row.copy_from_slice(&src_row[..hi - lo]);
                        } else {
                            for (d, s) in dst_row.iter_mut().zip(src_row.iter().step_by(g.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), out).expect("im2col shape")
}

fn col2im(cols_m: &Array2<f64>, g: &ConvGeom) -> Vec<f64> {
    let cols = g.cols();
    let data = cols_m.as_slice().expect("col2im input is contiguous");
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let (lo, hi, ix0) = valid_span(g.wo, g.w, g.stride, kj, g.pad);
                if lo == hi {
                    continue;
                }
                let src_row = &data[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w + ix0..(iy as usize + 1) * g.w];
                        let src_row = &src[oy * g.wo + lo..oy * g.wo + hi];
                        for (d, s) in dst_row.iter_mut().step_by(g.stride).zip(src_row) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Convolutions with at most this many output channels skip im2col and
/// accumulate shifted rows directly; for a single output map the unfolded
/// matrix costs far more than the arithmetic.
const DIRECT_MAX_OUT: usize = 4;

/// Calls `f(n, oc, c, ki, kj, x_row_start, y_row_start, len)` for every
/// overlapping row segment of input and output planes (stride 1 only).
fn for_each_tap(g: &ConvGeom, o: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize)) {
    for n in 0..g.n {
        for oc in 0..o {
            for c in 0..g.c {
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let (lo, hi, ix0) = valid_span(g.wo, g.w, 1, kj, g.pad);
                        if lo == hi {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let iy = (oy + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let xs = ((n * g.c + c) * g.h + iy as usize) * g.w + ix0;
                            let ys = ((n * o + oc) * g.ho + oy) * g.wo + lo;
                            f(n, oc, c, ki, kj, xs, ys, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

fn direct_conv(x: &[f64], w: &[f64], g: &ConvGeom, o: usize) -> Vec<f64> {
    let mut y = vec![0.0; g.n * o * g.ho * g.wo];
    for_each_tap(g, o, |_, oc, c, ki, kj, xs, ys, len| {
        let wv = w[((oc * g.c + c) * g.k + ki) * g.k + kj];
        for (d, s) in y[ys..ys + len].iter_mut().zip(&x[xs..xs + len]) {
            *d += wv * s;
        }
    });
    y
}

fn direct_conv_grad_w(x: &[f64], gy: &[f64], g: &ConvGeom, o: usize) -> Vec<f64> {
    let mut gw = vec![0.0; o * g.c * g.k * g.k];
    for_each_tap(g, o, |_, oc, c, ki, kj, xs, ys, len| {
        let dot: f64 = gy[ys..ys + len].iter().zip(&x[xs..xs + len]).map(|(a, b)| a * b).sum();
        gw[((oc * g.c + c) * g.k + ki) * g.k + kj] += dot;
    });
    gw
}

fn direct_conv_grad_x(w: &[f64], gy: &[f64], g: &ConvGeom, o: usize) -> Vec<f64> {
    let mut gx = vec![0.0; g.n * g.c * g.h * g.w];
    for_each_tap(g, o, |_, oc, c, ki, kj, xs, ys, len| {
        let wv = w[((oc * g.c + c) * g.k + ki) * g.k + kj];
        for (d, s) in gx[xs..xs + len].iter_mut().zip(&gy[ys..ys + len]) {
            *d += wv * s;
        }
    });
    gx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(std_layout(value), Op::Leaf, false)
    }

    /// A leaf that receives a gradient when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(std_layout(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `x + b` where `b` has the shape of `x` without its leading axis.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Var {
        assert_eq!(
            &self.shape(x)[1..],
            self.shape(b),
            "add_broadcast: trailing shape mismatch"
        );
        let value = self.value(x) + self.value(b);
        let rg = self.rg(x) || self.rg(b);
        self.push(std_layout(value), Op::AddBroadcast(x, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x) * s;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> ConvGeom {
        let (n, c, h, wd) = dims4(self.value(x));
        let (o, ci, k, k2) = dims4(self.value(w));
        assert_eq!(ci, c, "conv2d: weight expects {ci} input channels, got {c}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let _ = o;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// 2-D convolution, `x: [N,C,H,W]`, `w: [O,C,k,k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let g = self.conv_geom(x, w, stride, pad);
        let o = self.shape(w)[0];
        let bias = b.map(|b| slice(self.value(b)).to_vec());
        if stride == 1 && o <= DIRECT_MAX_OUT {
            let mut out = direct_conv(slice(self.value(x)), slice(self.value(w)), &g, o);
            if let Some(bias) = &bias {
                for (i, v) in out.iter_mut().enumerate() {
                    *v += bias[(i / (g.ho * g.wo)) % o];
                }
            }
            let value = from_vec(&[g.n, o, g.ho, g.wo], out);
            let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
            return self.push(
                value,
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                },
                rg,
            );
        }
        let cols = im2col(slice(self.value(x)), &g);
        let wm = self
            .value(w)
            .view()
            .into_shape_with_order((o, g.rows()))
            .expect("conv weight reshape");
        let y = wm.dot(&cols);
        let plane = g.ho * g.wo;
        let ys = y.as_slice().expect("matmul output is contiguous");
        let mut out = vec![0.0; g.n * o * plane];
        for n in 0..g.n {
            for oc in 0..o {
                let dst = &mut out[(n * o + oc) * plane..(n * o + oc + 1) * plane];
                let src = &ys[oc * g.cols() + n * plane..oc * g.cols() + (n + 1) * plane];
                let bv = bias.as_ref().map_or(0.0, |b| b[oc]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let value = from_vec(&[g.n, o, g.ho, g.wo], out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// `x @ w + b` over the last axis; `w: [D, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("linear: rank >= 1");
        let (wd, o) = {
            let s = self.shape(w);
            (s[0], s[1])
        };
        assert_eq!(d, wd, "linear: input width {d} vs weight rows {wd}");
        let m = xs.iter().product::<usize>() / d;
        let xm = self
            .value(x)
            .view()
            .into_shape_with_order((m, d))
            .expect("linear reshape");
        let wm = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear weight rank");
        let mut y = xm.dot(&wm);
        if let Some(b) = b {
            let bv = self
                .value(b)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("linear bias rank");
            y += &bv;
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = o;
        let value = from_vec(&shape, y.into_raw_vec_and_offset().0);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        let m = xs.iter().product::<usize>() / d;
        let xv = slice(self.value(x));
        let gv = slice(self.value(gamma));
        let bv = slice(self.value(beta));
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let value = from_vec(&xs, out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv: [N, T, 3D]` holds the query, key and value projections side by
    /// side; the result is `[N, T, D]` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let (n, t, d3) = dims3(self.value(qkv));
        assert_eq!(d3 % 3, 0, "attention: qkv width must be 3*D");
        let d = d3 / 3;
        assert_eq!(d % heads, 0, "attention: width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = slice(self.value(qkv));
        let mut out = vec![0.0; n * t * d];
        let mut probs = Vec::with_capacity(n * heads);
        for b in 0..n {
            for h in 0..heads {
                let (q, k, v) = split_head(src, b, h, t, d, dh);
                let mut p = q.dot(&k.t()) * scale;
                softmax_rows(&mut p);
                let o = p.dot(&v);
                for i in 0..t {
                    for j in 0..dh {
                        out[(b * t + i) * d + h * dh + j] = o[[i, j]];
                    }
                }
                probs.push(p);
            }
        }
        let value = from_vec(&[n, t, d], out);
        let rg = self.rg(qkv);
        self.push(value, Op::Attention { qkv, heads, probs }, rg)
    }

    /// `[N, C, H, W] -> [N, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let value = self
            .value(x)
            .view()
            .into_shape_with_order((n, c, h * w))
            .unwrap()
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        let rg = self.rg(x);
        self.push(value, Op::ToTokens(x), rg)
    }

    /// `[N, h*w, C] -> [N, C, h, w]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, t, c) = dims3(self.value(x));
        assert_eq!(t, h * w, "from_tokens: {t} tokens cannot fill {h}x{w}");
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(&[0, 2, 1]))
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[n, c, h, w]))
            .unwrap();
        let rg = self.rg(x);
        self.push(value, Op::FromTokens(x), rg)
    }

    /// Concatenates two token sequences along the token axis.
    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Var {
        let (n, ta, d) = dims3(self.value(a));
        let (nb, tb, db) = dims3(self.value(b));
        assert_eq!((n, d), (nb, db), "concat_tokens: batch/width mismatch");
        let (av, bv) = (slice(self.value(a)), slice(self.value(b)));
        let mut out = Vec::with_capacity(n * (ta + tb) * d);
        for i in 0..n {
            out.extend_from_slice(&av[i * ta * d..(i + 1) * ta * d]);
            out.extend_from_slice(&bv[i * tb * d..(i + 1) * tb * d]);
        }
        let value = from_vec(&[n, ta + tb, d], out);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatTokens(a, b), rg)
    }

    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, t, d) = dims3(self.value(x));
        assert!(start + len <= t, "slice_tokens: out of range");
        let xv = slice(self.value(x));
        let mut out = Vec::with_capacity(n * len * d);
        for i in 0..n {
            out.extend_from_slice(&xv[(i * t + start) * d..(i * t + start + len) * d]);
        }
        let value = from_vec(&[n, len, d], out);
        let rg = self.rg(x);
        self.push(value, Op::SliceTokens { x, start }, rg)
    }

    /// Spatial mean pooling into a single token: `[N,C,H,W] -> [N,1,C]`.
    pub fn pool_token(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let xv = slice(self.value(x));
        let hw = h * w;
        let out = (0..n * c)
            .map(|i| xv[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let value = from_vec(&[n, 1, c], out);
        let rg = self.rg(x);
        self.push(value, Op::PoolToken(x), rg)
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let (ho, wo) = (h * factor, w * factor);
        let xv = slice(self.value(x));
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            resize_plane(
                &xv[p * h * w..(p + 1) * h * w],
                (h, w),
                &mut out[p * ho * wo..(p + 1) * ho * wo],
                (ho, wo),
            );
        }
        let value = from_vec(&[n, c, ho, wo], out);
        let rg = self.rg(x);
        self.push(value, Op::Upsample { x, factor }, rg)
    }

    /// Reverse sweep from `root`, seeded with `seed` (same shape as root).
    pub fn backward(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(
            self.shape(root),
            seed.shape(),
            "backward: seed shape must match root"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(std_layout(seed));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], gy.clone());
                    }
                }
            }
            Op::AddBroadcast(x, b) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], gy.clone());
                }
                if self.rg(*b) {
                    let gb = gy.sum_axis(ndarray::Axis(0));
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], gy * self.value(*b));
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], gy * self.value(*a));
                }
            }
            Op::Scale(x, s) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], gy * *s);
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let mut g = gy.clone();
                    g.zip_mut_with(&node.value, |g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let mut g = gy.clone();
                    g.zip_mut_with(self.value(*x), |g, &v| {
                        if v <= 0.0 {
                            *g = 0.0
                        }
                    });
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let mut g = gy.clone();
                    g.zip_mut_with(self.value(*x), |g, &v| *g *= gelu_grad(v));
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(*x, *w, *b, *stride, *pad, gy, grads),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let d = *xs.last().unwrap();
                let m = xs.iter().product::<usize>() / d;
                let o = self.shape(*w)[1];
                let gm = gy.view().into_shape_with_order((m, o)).unwrap();
                if self.rg(*x) {
                    let wm = self.value(*w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let gx = gm.dot(&wm.t());
                    accumulate(
                        &mut grads[x.0],
                        from_vec(xs, gx.into_raw_vec_and_offset().0),
                    );
                }
                if self.rg(*w) {
                    let xm = self.value(*x).view().into_shape_with_order((m, d)).unwrap();
                    let gw = xm.t().dot(&gm);
                    accumulate(&mut grads[w.0], gw.into_dyn());
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], gm.sum_axis(ndarray::Axis(0)).into_dyn());
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let d = *xs.last().unwrap();
                let m = xs.iter().product::<usize>() / d;
                let g = slice(gy);
                let gv = slice(self.value(*gamma));
                if self.rg(*x) {
                    let mut gx = vec![0.0; m * d];
                    for r in 0..m {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[r * d + j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            gx[r * d + j] =
                                k * (d as f64 * dxh - sum_dxh - xhat[r * d + j] * sum_dxh_xh);
                        }
                    }
                    accumulate(&mut grads[x.0], from_vec(xs, gx));
                }
                if self.rg(*gamma) {
                    let mut gg = vec![0.0; d];
                    for r in 0..m {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate(&mut grads[gamma.0], from_vec(&[d], gg));
                }
                if self.rg(*beta) {
                    let mut gb = vec![0.0; d];
                    for r in 0..m {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    accumulate(&mut grads[beta.0], from_vec(&[d], gb));
                }
            }
            Op::Attention { qkv, heads, probs } => {
                if !self.rg(*qkv) {
                    return;
                }
                let (n, t, d3) = dims3(self.value(*qkv));
                let d = d3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let src = slice(self.value(*qkv));
                let g = slice(gy);
                let mut gqkv = vec![0.0; n * t * d3];
                for b in 0..n {
                    for h in 0..*heads {
                        let (q, k, v) = split_head(src, b, h, t, d, dh);
                        let p = &probs[b * heads + h];
                        let mut go = Array2::<f64>::zeros((t, dh));
                        for i in 0..t {
                            for j in 0..dh {
                                go[[i, j]] = g[(b * t + i) * d + h * dh + j];
                            }
                        }
                        let gv = p.t().dot(&go);
                        let gp = go.dot(&v.t());
                        let mut gs = Array2::<f64>::zeros((t, t));
                        for i in 0..t {
                            let dot: f64 = (0..t).map(|j| gp[[i, j]] * p[[i, j]]).sum();
                            for j in 0..t {
                                gs[[i, j]] = p[[i, j]] * (gp[[i, j]] - dot) * scale;
                            }
                        }
                        let gq = gs.dot(&k);
                        let gk = gs.t().dot(&q);
                        for i in 0..t {
                            let base = (b * t + i) * d3 + h * dh;
                            for j in 0..dh {
                                gqkv[base + j] += gq[[i, j]];
                                gqkv[base + d + j] += gk[[i, j]];
                                gqkv[base + 2 * d + j] += gv[[i, j]];
                            }
                        }
                    }
                }
                accumulate(&mut grads[qkv.0], from_vec(&[n, t, d3], gqkv));
            }
            Op::ToTokens(x) => {
                if self.rg(*x) {
                    let (n, c, h, w) = dims4(self.value(*x));
                    let g = gy
                        .view()
                        .permuted_axes(IxDyn(&[0, 2, 1]))
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&[n, c, h, w]))
                        .unwrap();
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::FromTokens(x) => {
                if self.rg(*x) {
                    let (n, c, h, w) = dims4(gy);
                    let g = gy
                        .view()
                        .into_shape_with_order((n, c, h * w))
                        .unwrap()
                        .permuted_axes([0, 2, 1])
                        .as_standard_layout()
                        .into_owned()
                        .into_dyn();
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::ConcatTokens(a, b) => {
                let (n, ta, d) = dims3(self.value(*a));
                let tb = self.shape(*b)[1];
                let g = slice(gy);
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(n * ta * d);
                    for i in 0..n {
                        let base = i * (ta + tb) * d;
                        ga.extend_from_slice(&g[base..base + ta * d]);
                    }
                    accumulate(&mut grads[a.0], from_vec(&[n, ta, d], ga));
                }
                if self.rg(*b) {
                    let mut gb = Vec::with_capacity(n * tb * d);
                    for i in 0..n {
                        let base = i * (ta + tb) * d + ta * d;
                        gb.extend_from_slice(&g[base..base + tb * d]);
                    }
                    accumulate(&mut grads[b.0], from_vec(&[n, tb, d], gb));
                }
            }
            Op::SliceTokens { x, start } => {
                if self.rg(*x) {
                    let (n, t, d) = dims3(self.value(*x));
                    let len = gy.shape()[1];
                    let g = slice(gy);
                    let mut gx = vec![0.0; n * t * d];
                    for i in 0..n {
                        gx[(i * t + start) * d..(i * t + start + len) * d]
                            .copy_from_slice(&g[i * len * d..(i + 1) * len * d]);
                    }
                    accumulate(&mut grads[x.0], from_vec(&[n, t, d], gx));
                }
            }
            Op::PoolToken(x) => {
                if self.rg(*x) {
                    let (n, c, h, w) = dims4(self.value(*x));
                    let hw = h * w;
                    let g = slice(gy);
                    let mut gx = vec![0.0; n * c * hw];
                    for i in 0..n * c {
                        let v = g[i] / hw as f64;
                        gx[i * hw..(i + 1) * hw].iter_mut().for_each(|e| *e = v);
                    }
                    accumulate(&mut grads[x.0], from_vec(&[n, c, h, w], gx));
                }
            }
            Op::Upsample { x, factor } => {
                if self.rg(*x) {
                    let (n, c, h, w) = dims4(self.value(*x));
                    let (ho, wo) = (h * factor, w * factor);
                    let g = slice(gy);
                    let mut gx = vec![0.0; n * c * h * w];
                    for p in 0..n * c {
                        resize_plane_adjoint(
                            &g[p * ho * wo..(p + 1) * ho * wo],
                            (ho, wo),
                            &mut gx[p * h * w..(p + 1) * h * w],
                            (h, w),
                        );
                    }
                    accumulate(&mut grads[x.0], from_vec(&[n, c, h, w], gx));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let g = self.conv_geom(x, w, stride, pad);
        let o = self.shape(w)[0];
        let plane = g.ho * g.wo;
        // [N,O,Ho,Wo] -> [O, N*Ho*Wo] to line up with the im2col columns
        let gys = slice(gy);
        let mut gm = vec![0.0; o * g.cols()];
        for n in 0..g.n {
            for oc in 0..o {
                gm[oc * g.cols() + n * plane..oc * g.cols() + (n + 1) * plane]
                    .copy_from_slice(&gys[(n * o + oc) * plane..(n * o + oc + 1) * plane]);
            }
        }
        let gm = Array2::from_shape_vec((o, g.cols()), gm).unwrap();
        if stride == 1 && o <= DIRECT_MAX_OUT {
            if let Some(b) = b {
                if self.rg(b) {
                    accumulate(&mut grads[b.0], gm.sum_axis(ndarray::Axis(1)).into_dyn());
                }
            }
            if self.rg(w) {
                let gw = direct_conv_grad_w(slice(self.value(x)), gys, &g, o);
                accumulate(&mut grads[w.0], from_vec(self.shape(w), gw));
            }
            if self.rg(x) {
                let gx = direct_conv_grad_x(slice(self.value(w)), gys, &g, o);
                accumulate(&mut grads[x.0], from_vec(&[g.n, g.c, g.h, g.w], gx));
            }
            return;
        }
        if let Some(b) = b {
            if self.rg(b) {
                accumulate(&mut grads[b.0], gm.sum_axis(ndarray::Axis(1)).into_dyn());
            }
        }
        if self.rg(w) {
            let cols = im2col(slice(self.value(x)), &g);
            let mut gw = Array2::<f64>::zeros((o, g.rows()));
            general_mat_mul(1.0, &gm, &cols.t(), 0.0, &mut gw);
            let gw = gw
                .into_shape_with_order(IxDyn(self.shape(w)))
                .expect("conv weight grad reshape");
            accumulate(&mut grads[w.0], gw);
        }
        if self.rg(x) {
            let wm: ArrayView2<f64> = self
                .value(w)
                .view()
                .into_shape_with_order((o, g.rows()))
                .unwrap();
            let gcols = wm.t().dot(&gm);
            let gcols = gcols.as_standard_layout().into_owned();
            let gx = col2im(&gcols, &g);
            accumulate(&mut grads[x.0], from_vec(&[g.n, g.c, g.h, g.w], gx));
        }
    }
}

fn split_head(
    src: &[f64],
    b: usize,
    h: usize,
    t: usize,
    d: usize,
    dh: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d3 = 3 * d;
    let mut q = Array2::<f64>::zeros((t, dh));
    let mut k = Array2::<f64>::zeros((t, dh));
    let mut v = Array2::<f64>::zeros((t, dh));
    for i in 0..t {
        let base = (b * t + i) * d3 + h * dh;
        for j in 0..dh {
            q[[i, j]] = src[base + j];
            k[[i, j]] = src[base + d + j];
            v[[i, j]] = src[base + 2 * d + j];
        }
    }
    (q, k, v)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}
