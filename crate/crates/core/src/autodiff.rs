//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value to a [`Tape`].
//! [`Tape::backward`] walks the tape in reverse and returns a fresh
//! [`Grads`] table, so several losses can be differentiated on one tape.
//!
//! Shape mismatches inside operations are programming errors and panic;
//! the network modules validate their inputs before building graphs.

use std::cell::{Ref, RefCell};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{gemm, Real, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize) -> Self {
        Self {
            stride: (1, 1),
            pad: (1, 1),
            groups: channels,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddConst(usize),
    MatMulW(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(usize),
    LeakyRelu(usize, T),
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: Conv2dSpec,
    },
    Upsample {
        x: usize,
        sh: usize,
        sw: usize,
    },
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    /// Scalar-valued node whose local gradients were computed in the forward pass.
    Custom {
        parents: Vec<usize>,
        grads: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    dropout_rng: RefCell<Option<ChaCha8Rng>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like it when nothing flowed there.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            dropout_rng: RefCell::new(None),
        }
    }

    /// Enables dropout masks drawn from a seeded generator. Without this,
    /// [`Var::dropout`] is the identity.
    pub fn with_dropout_seed(self, seed: u64) -> Self {
        *self.dropout_rng.borrow_mut() = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// A leaf that gradients flow into.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<T>, trainable: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, trainable)
    }

    /// Backpropagate from a scalar root with seed 1.
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let seed = Tensor::full(&root.shape(), T::ONE);
        self.backward_seeded(&[(root, seed)])
    }

    /// Backpropagate from arbitrary nodes with explicit upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var<'_, T>, Tensor<T>)]) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(
                nodes[v.id].value.shape(),
                g.shape(),
                "seed gradient shape mismatch"
            );
            accumulate(&mut grads, v.id, g.clone());
            top = top.max(v.id + 1);
        }
        for id in (0..top).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_with<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    id: usize,
    f: impl FnOnce() -> Tensor<T>,
) {
    if nodes[id].needs_grad {
        accumulate(grads, id, f());
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map shape")
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_with(grads, nodes, *a, || g.clone());
            accumulate_with(grads, nodes, *b, || g.clone());
        }
        Op::AddBias(a, b) => {
            accumulate_with(grads, nodes, *a, || g.clone());
            accumulate_with(grads, nodes, *b, || {
                let bn = val(*b).numel();
                let mut gb = Tensor::zeros(val(*b).shape());
                for row in g.data().chunks(bn) {
                    for (o, &x) in gb.data_mut().iter_mut().zip(row) {
                        *o += x;
                    }
                }
                gb
            });
        }
        Op::Sub(a, b) => {
            accumulate_with(grads, nodes, *a, || g.clone());
            accumulate_with(grads, nodes, *b, || g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            accumulate_with(grads, nodes, *a, || zip_map(g, val(*b), |x, y| x * y));
            accumulate_with(grads, nodes, *b, || zip_map(g, val(*a), |x, y| x * y));
        }
        Op::Scale(a, s) => accumulate_with(grads, nodes, *a, || g.scale(*s)),
        Op::AddConst(a) => accumulate_with(grads, nodes, *a, || g.clone()),
        Op::MatMulW(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let (k, n) = (wv.dim(0), wv.dim(1));
            let m = xv.numel() / k;
            accumulate_with(grads, nodes, *x, || {
                let mut gx = Tensor::zeros(xv.shape());
                gemm(g.data(), false, wv.data(), true, gx.data_mut(), m, n, k, false);
                gx
            });
            accumulate_with(grads, nodes, *w, || {
                let mut gw = Tensor::zeros(wv.shape());
                gemm(xv.data(), true, g.data(), false, gw.data_mut(), k, m, n, false);
                gw
            });
        }
        Op::Bmm { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let batch = av.dim(0);
            let (m, k) = if *ta {
                (av.dim(2), av.dim(1))
            } else {
                (av.dim(1), av.dim(2))
            };
            let n = if *tb { bv.dim(1) } else { bv.dim(2) };
            let (sa, sb, sc) = (m * k, k * n, m * n);
            accumulate_with(grads, nodes, *a, || {
                let mut ga = Tensor::zeros(av.shape());
                for i in 0..batch {
                    let gc = &g.data()[i * sc..(i + 1) * sc];
                    let bb = &bv.data()[i * sb..(i + 1) * sb];
                    let out = &mut ga.data_mut()[i * sa..(i + 1) * sa];
                    if *ta {
                        gemm(bb, *tb, gc, true, out, k, n, m, false);
                    } else {
                        gemm(gc, false, bb, !*tb, out, m, n, k, false);
                    }
                }
                ga
            });
            accumulate_with(grads, nodes, *b, || {
                let mut gb = Tensor::zeros(bv.shape());
                for i in 0..batch {
                    let gc = &g.data()[i * sc..(i + 1) * sc];
                    let aa = &av.data()[i * sa..(i + 1) * sa];
                    let out = &mut gb.data_mut()[i * sb..(i + 1) * sb];
                    if *tb {
                        gemm(gc, true, aa, *ta, out, n, m, k, false);
                    } else {
                        gemm(aa, !*ta, gc, false, out, k, m, n, false);
                    }
                }
                gb
            });
        }
        Op::Softmax(x) => accumulate_with(grads, nodes, *x, || {
            let y = &nodes[id].value;
            let d = *y.shape().last().unwrap();
            let mut gx = Tensor::zeros(y.shape());
            for ((gr, yr), out) in g
                .data()
                .chunks(d)
                .zip(y.data().chunks(d))
                .zip(gx.data_mut().chunks_mut(d))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            gx
        }),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let d = gv.numel();
            accumulate_with(grads, nodes, *gamma, || {
                let mut out = Tensor::zeros(gv.shape());
                for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                    for ((o, &a), &b) in out.data_mut().iter_mut().zip(gr).zip(xr) {
                        *o += a * b;
                    }
                }
                out
            });
            accumulate_with(grads, nodes, *beta, || {
                let mut out = Tensor::zeros(gv.shape());
                for gr in g.data().chunks(d) {
                    for (o, &a) in out.data_mut().iter_mut().zip(gr) {
                        *o += a;
                    }
                }
                out
            });
            accumulate_with(grads, nodes, *x, || {
                let mut gx = Tensor::zeros(val(*x).shape());
                let inv_d = T::from_f64(1.0 / d as f64);
                for (r, ((gr, xr), out)) in g
                    .data()
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.data_mut().chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_dxh = T::ZERO;
                    let mut mean_dxh_xh = T::ZERO;
                    for j in 0..d {
                        let dxh = gr[j] * gv.data()[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xr[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for j in 0..d {
                        let dxh = gr[j] * gv.data()[j];
                        out[j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                gx
            });
        }
        Op::Relu(x) => accumulate_with(grads, nodes, *x, || {
            zip_map(g, val(*x), |gi, xi| if xi > T::ZERO { gi } else { T::ZERO })
        }),
        Op::LeakyRelu(x, slope) => accumulate_with(grads, nodes, *x, || {
            zip_map(g, val(*x), |gi, xi| if xi > T::ZERO { gi } else { gi * *slope })
        }),
        Op::Gelu(x) => accumulate_with(grads, nodes, *x, || {
            let c = T::from_f64(GELU_C);
            let k = T::from_f64(0.044715);
            let half = T::from_f64(0.5);
            let three = T::from_f64(3.0);
            zip_map(g, val(*x), |gi, xi| {
                let t = (c * (xi + k * xi * xi * xi)).tanh();
                let dt = c * (T::ONE + three * k * xi * xi);
                gi * (half * (T::ONE + t) + half * xi * (T::ONE - t * t) * dt)
            })
        }),
        Op::Tanh(x) => accumulate_with(grads, nodes, *x, || {
            zip_map(g, &nodes[id].value, |gi, yi| gi * (T::ONE - yi * yi))
        }),
        Op::Sigmoid(x) => accumulate_with(grads, nodes, *x, || {
            zip_map(g, &nodes[id].value, |gi, yi| gi * yi * (T::ONE - yi))
        }),
        Op::Reshape(x) => accumulate_with(grads, nodes, *x, || {
            g.clone().reshape(val(*x).shape()).expect("reshape grad")
        }),
        Op::Permute(x, perm) => accumulate_with(grads, nodes, *x, || {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            permute_tensor(g, &inv)
        }),
        Op::Concat(parts, axis) => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let chunk = pv.dim(*axis) * inner;
                accumulate_with(grads, nodes, p, || {
                    let mut out = Vec::with_capacity(pv.numel());
                    for o in 0..outer {
                        let base = o * total + offset;
                        out.extend_from_slice(&g.data()[base..base + chunk]);
                    }
                    Tensor::from_vec(pv.shape(), out).unwrap()
                });
                offset += chunk;
            }
        }
        Op::Slice { x, axis, start } => accumulate_with(grads, nodes, *x, || {
            let xv = val(*x);
            let mut gx = Tensor::zeros(xv.shape());
            let outer: usize = xv.shape()[..*axis].iter().product();
            let inner: usize = xv.shape()[axis + 1..].iter().product();
            let len = g.dim(*axis);
            let src_chunk = len * inner;
            let dst_chunk = xv.dim(*axis) * inner;
            for o in 0..outer {
                let dst = o * dst_chunk + start * inner;
                gx.data_mut()[dst..dst + src_chunk]
                    .copy_from_slice(&g.data()[o * src_chunk..(o + 1) * src_chunk]);
            }
            gx
        }),
        Op::Conv2d { x, w, b, spec } => {
            let (xv, wv) = (val(*x), val(*w));
            if let Some(b) = b {
                accumulate_with(grads, nodes, *b, || {
                    let (n, o) = (g.dim(0), g.dim(1));
                    let p = g.dim(2) * g.dim(3);
                    let mut gb = Tensor::zeros(&[o]);
                    for ni in 0..n {
                        for oi in 0..o {
                            let base = (ni * o + oi) * p;
                            let s: T = g.data()[base..base + p].iter().copied().sum();
                            gb.data_mut()[oi] += s;
                        }
                    }
                    gb
                });
            }
            let need_x = nodes[*x].needs_grad;
            let need_w = nodes[*w].needs_grad;
            if need_x || need_w {
                let (gx, gw) = conv2d_backward(xv, wv, g, spec, need_x, need_w);
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
            }
        }
        Op::Upsample { x, sh, sw } => accumulate_with(grads, nodes, *x, || {
            let xv = val(*x);
            let r = xv.rank();
            let (h, w) = (xv.dim(r - 2), xv.dim(r - 1));
            let planes = xv.numel() / (h * w);
            let (oh, ow) = (h * sh, w * sw);
            let mut gx = Tensor::zeros(xv.shape());
            for p in 0..planes {
                for i in 0..oh {
                    for j in 0..ow {
                        gx.data_mut()[p * h * w + (i / sh) * w + j / sw] +=
                            g.data()[p * oh * ow + i * ow + j];
                    }
                }
            }
            gx
        }),
        Op::Sum(x) => accumulate_with(grads, nodes, *x, || {
            Tensor::full(val(*x).shape(), g.data()[0])
        }),
        Op::Mean(x) => accumulate_with(grads, nodes, *x, || {
            let n = val(*x).numel();
            Tensor::full(val(*x).shape(), g.data()[0] / T::from_f64(n as f64))
        }),
        Op::SumAxis(x, axis) => accumulate_with(grads, nodes, *x, || {
            let xv = val(*x);
            let outer: usize = xv.shape()[..*axis].iter().product();
            let inner: usize = xv.shape()[axis + 1..].iter().product();
            let len = xv.dim(*axis);
            let mut gx = Tensor::zeros(xv.shape());
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gx.data_mut()[(o * len + l) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            gx
        }),
        Op::Custom { parents, grads: local } => {
            let up = g.data()[0];
            for (&p, lg) in parents.iter().zip(local) {
                accumulate_with(grads, nodes, p, || lg.scale(up));
            }
        }
    }
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    assert_eq!(perm.len(), rank, "permutation rank mismatch");
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let src = x.data();
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(a, b)| a * b).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out).unwrap()
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "conv kernel larger than padded input");
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let p = ho * wo;
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = (ci * kh + a) * kw + b;
                let dst = &mut col[row * p..(row + 1) * p];
                for i in 0..ho {
                    let y = (i * sh + a) as isize - ph as isize;
                    if y < 0 || y >= h as isize {
                        dst[i * wo..(i + 1) * wo].fill(T::ZERO);
                        continue;
                    }
                    let src = &x[(ci * h + y as usize) * w..(ci * h + y as usize + 1) * w];
                    for j in 0..wo {
                        let xx = (j * sw + b) as isize - pw as isize;
                        dst[i * wo + j] = if xx < 0 || xx >= w as isize {
                            T::ZERO
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let p = ho * wo;
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = (ci * kh + a) * kw + b;
                let src = &col[row * p..(row + 1) * p];
                for i in 0..ho {
                    let y = (i * sh + a) as isize - ph as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let base = (ci * h + y as usize) * w;
                    for j in 0..wo {
                        let xx = (j * sw + b) as isize - pw as isize;
                        if xx >= 0 && xx < w as isize {
                            x[base + xx as usize] += src[i * wo + j];
                        }
                    }
                }
            }
        }
    }
}

fn is_depthwise(spec: &Conv2dSpec, cin: usize, cout: usize) -> bool {
    spec.groups > 1 && spec.groups == cin && spec.groups == cout
}

fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Tensor<T> {
    assert_eq!(x.rank(), 4, "conv2d input must be NCHW");
    assert_eq!(w.rank(), 4, "conv2d weight must be OIHW");
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, cg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let g = spec.groups;
    assert!(
        c % g == 0 && o % g == 0 && cg == c / g,
        "conv2d channel mismatch: input {c}, weight {:?}, groups {g}",
        w.shape()
    );
    let ho = conv_out(h, kh, spec.stride.0, spec.pad.0);
    let wo = conv_out(wd, kw, spec.stride.1, spec.pad.1);
    let p = ho * wo;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    if is_depthwise(spec, c, o) {
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.pad;
        for ni in 0..n {
            for ci in 0..c {
                let xin = &x.data()[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                let ker = &w.data()[ci * kh * kw..(ci + 1) * kh * kw];
                let dst = &mut out.data_mut()[(ni * o + ci) * p..(ni * o + ci + 1) * p];
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = T::ZERO;
                        for a in 0..kh {
                            let y = (i * sh + a) as isize - ph as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for bb in 0..kw {
                                let xx = (j * sw + bb) as isize - pw as isize;
                                if xx >= 0 && xx < wd as isize {
                                    acc += ker[a * kw + bb] * xin[y as usize * wd + xx as usize];
                                }
                            }
                        }
                        dst[i * wo + j] = acc;
                    }
                }
            }
        }
    } else {
        let og = o / g;
        let kk = cg * kh * kw;
        let mut col = vec![T::ZERO; kk * p];
        for ni in 0..n {
            for gi in 0..g {
                let xin = &x.data()[(ni * c + gi * cg) * h * wd..(ni * c + (gi + 1) * cg) * h * wd];
                im2col(xin, cg, h, wd, kh, kw, spec, ho, wo, &mut col);
                let wg = &w.data()[gi * og * kk..(gi + 1) * og * kk];
                let dst = &mut out.data_mut()[(ni * o + gi * og) * p..(ni * o + (gi + 1) * og) * p];
                gemm(wg, false, &col, false, dst, og, kk, p, false);
            }
        }
    }
    if let Some(b) = b {
        assert_eq!(b.numel(), o, "conv2d bias length");
        for ni in 0..n {
            for oi in 0..o {
                let bv = b.data()[oi];
                for v in &mut out.data_mut()[(ni * o + oi) * p..(ni * o + oi + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    out
}

fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    spec: &Conv2dSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, cg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let (ho, wo) = (gout.dim(2), gout.dim(3));
    let p = ho * wo;
    let g = spec.groups;
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    if is_depthwise(spec, c, o) {
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.pad;
        for ni in 0..n {
            for ci in 0..c {
                let xoff = (ni * c + ci) * h * wd;
                let goff = (ni * o + ci) * p;
                for i in 0..ho {
                    for j in 0..wo {
                        let gv = gout.data()[goff + i * wo + j];
                        for a in 0..kh {
                            let y = (i * sh + a) as isize - ph as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for bb in 0..kw {
                                let xx = (j * sw + bb) as isize - pw as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                let xi = xoff + y as usize * wd + xx as usize;
                                let wi = ci * kh * kw + a * kw + bb;
                                if let Some(gw) = gw.as_mut() {
                                    gw.data_mut()[wi] += gv * x.data()[xi];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx.data_mut()[xi] += gv * w.data()[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        return (gx, gw);
    }
    let og = o / g;
    let kk = cg * kh * kw;
    let mut col = vec![T::ZERO; kk * p];
    let mut dcol = vec![T::ZERO; kk * p];
    for ni in 0..n {
        for gi in 0..g {
            let gslice = &gout.data()[(ni * o + gi * og) * p..(ni * o + (gi + 1) * og) * p];
            let xrange = (ni * c + gi * cg) * h * wd..(ni * c + (gi + 1) * cg) * h * wd;
            let wrange = gi * og * kk..(gi + 1) * og * kk;
            if let Some(gw) = gw.as_mut() {
                im2col(&x.data()[xrange.clone()], cg, h, wd, kh, kw, spec, ho, wo, &mut col);
                gemm(gslice, false, &col, true, &mut gw.data_mut()[wrange.clone()], og, p, kk, true);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(&w.data()[wrange], true, gslice, false, &mut dcol, kk, og, p, false);
                col2im(&dcol, cg, h, wd, kh, kw, spec, ho, wo, &mut gx.data_mut()[xrange]);
            }
        }
    }
    (gx, gw)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn node_value(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor<T> {
        self.node_value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node_value().shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.node_value().dim(axis)
    }

    pub fn numel(&self) -> usize {
        self.node_value().numel()
    }

    /// First element; intended for scalar nodes.
    pub fn item(&self) -> T {
        self.node_value().data()[0]
    }

    fn unary(&self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Tensor<T>) -> Var<'t, T> {
        let v = f(&self.node_value());
        let ng = self.tape.needs(&[self.id]);
        self.tape.push(v, op, ng)
    }

    fn binary(
        &self,
        other: Var<'t, T>,
        op: Op<T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Tensor<T>,
    ) -> Var<'t, T> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        let ng = self.tape.needs(&[self.id, other.id]);
        self.tape.push(v, op, ng)
    }

    fn same_shape(&self, other: &Var<'t, T>, what: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch");
    }

    pub fn add(&self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_shape(&other, "add");
        self.binary(other, Op::Add(self.id, other.id), |a, b| {
            zip_map(a, b, |x, y| x + y)
        })
    }

    pub fn sub(&self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_shape(&other, "sub");
        self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            zip_map(a, b, |x, y| x - y)
        })
    }

    pub fn mul(&self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_shape(&other, "mul");
        self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            zip_map(a, b, |x, y| x * y)
        })
    }

    /// Adds `bias` broadcast over the leading axes; `bias` must match the
    /// trailing axes of `self`.
    pub fn add_bias(&self, bias: Var<'t, T>) -> Var<'t, T> {
        let (s, b) = (self.shape(), bias.shape());
        let bn: usize = b.iter().product();
        assert!(
            s.len() >= b.len() && s[s.len() - b.len()..] == b[..],
            "add_bias: {b:?} does not match trailing axes of {s:?}"
        );
        self.binary(bias, Op::AddBias(self.id, bias.id), |a, bv| {
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(bn) {
                for (o, &x) in row.iter_mut().zip(bv.data()) {
                    *o += x;
                }
            }
            out
        })
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::from_f64(s);
        self.unary(Op::Scale(self.id, s), |a| a.scale(s))
    }

    pub fn add_const(&self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        self.unary(Op::AddConst(self.id), |a| a.map(|x| x + c))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    /// `self [..., k] @ w [k, n] -> [..., n]`.
    pub fn matmul(&self, w: Var<'t, T>) -> Var<'t, T> {
        let (xs, ws) = (self.shape(), w.shape());
        assert_eq!(ws.len(), 2, "matmul weight must be 2-D");
        let k = *xs.last().expect("matmul on scalar");
        assert_eq!(k, ws[0], "matmul inner dims: {xs:?} x {ws:?}");
        let n = ws[1];
        self.binary(w, Op::MatMulW(self.id, w.id), |x, wv| {
            let m = x.numel() / k;
            let mut shape = xs.clone();
            *shape.last_mut().unwrap() = n;
            let mut out = Tensor::zeros(&shape);
            gemm(x.data(), false, wv.data(), false, out.data_mut(), m, k, n, false);
            out
        })
    }

    /// Affine map with bias over the last axis.
    pub fn linear(&self, w: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
        self.matmul(w).add_bias(b)
    }

    /// Batched product of 3-D tensors with optional transposes of the two
    /// trailing axes.
    pub fn bmm(&self, other: Var<'t, T>, ta: bool, tb: bool) -> Var<'t, T> {
        let (a, b) = (self.shape(), other.shape());
        assert!(a.len() == 3 && b.len() == 3 && a[0] == b[0], "bmm: {a:?} x {b:?}");
        let (m, k) = if ta { (a[2], a[1]) } else { (a[1], a[2]) };
        let (k2, n) = if tb { (b[2], b[1]) } else { (b[1], b[2]) };
        assert_eq!(k, k2, "bmm inner dims: {a:?} x {b:?}");
        let batch = a[0];
        self.binary(
            other,
            Op::Bmm {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            |av, bv| {
                let mut out = Tensor::zeros(&[batch, m, n]);
                for i in 0..batch {
                    gemm(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        ta,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        tb,
                        &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        false,
                    );
                }
                out
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t, T> {
        self.unary(Op::Softmax(self.id), |x| {
            let d = *x.shape().last().unwrap();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(d) {
                let mx = row.iter().copied().fold(row[0], T::max);
                let mut s = T::ZERO;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            out
        })
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Var<'t, T> {
        let (v, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let gv = &nodes[gamma.id].value;
            let bv = &nodes[beta.id].value;
            let d = *x.shape().last().unwrap();
            assert_eq!(gv.numel(), d, "layer_norm gamma length");
            let rows = x.numel() / d;
            let mut xhat = Vec::with_capacity(x.numel());
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.numel());
            let inv_d = T::from_f64(1.0 / d as f64);
            for row in x.data().chunks(d) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let r = T::ONE / (var + T::from_f64(eps)).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * gv.data()[j] + bv.data()[j]);
                }
            }
            (Tensor::from_vec(x.shape(), out).unwrap(), xhat, rstd)
        };
        let ng = self.tape.needs(&[self.id, gamma.id, beta.id]);
        self.tape.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |x| x.map(|v| v.max(T::ZERO)))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t, T> {
        let s = T::from_f64(slope);
        self.unary(Op::LeakyRelu(self.id, s), |x| {
            x.map(|v| if v > T::ZERO { v } else { v * s })
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(Op::Gelu(self.id), |x| {
            let c = T::from_f64(GELU_C);
            let k = T::from_f64(0.044715);
            let half = T::from_f64(0.5);
            x.map(|v| half * v * (T::ONE + (c * (v + k * v * v * v)).tanh()))
        })
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), |x| x.map(|v| v.tanh()))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), |x| {
            x.map(|v| T::ONE / (T::ONE + (-v).exp()))
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        self.unary(Op::Reshape(self.id), |x| {
            x.clone().reshape(shape).expect("reshape")
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Var<'t, T> {
        self.unary(Op::Permute(self.id, perm.to_vec()), |x| {
            permute_tensor(x, perm)
        })
    }

    /// Swap the two axes of a matrix.
    pub fn t(&self) -> Var<'t, T> {
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        let tape = parts.first().expect("concat of nothing").tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Tensor::concat(&refs, axis).expect("concat")
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = tape.needs(&ids);
        tape.push(v, Op::Concat(ids, axis), ng)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        self.unary(
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            |x| {
                assert!(start + len <= x.dim(axis), "slice out of range");
                let outer: usize = x.shape()[..axis].iter().product();
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let mut shape = x.shape().to_vec();
                shape[axis] = len;
                let chunk = x.dim(axis) * inner;
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * chunk + start * inner;
                    out.extend_from_slice(&x.data()[base..base + len * inner]);
                }
                Tensor::from_vec(&shape, out).unwrap()
            },
        )
    }

    pub fn conv2d(&self, w: Var<'t, T>, b: Option<Var<'t, T>>, spec: Conv2dSpec) -> Var<'t, T> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            conv2d_forward(
                &nodes[self.id].value,
                &nodes[w.id].value,
                b.map(|b| &nodes[b.id].value),
                &spec,
            )
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let ng = self.tape.needs(&ids);
        self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                spec,
            },
            ng,
        )
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample(&self, sh: usize, sw: usize) -> Var<'t, T> {
        self.unary(Op::Upsample { x: self.id, sh, sw }, |x| {
            let r = x.rank();
            let (h, w) = (x.dim(r - 2), x.dim(r - 1));
            let planes = x.numel() / (h * w);
            let (oh, ow) = (h * sh, w * sw);
            let mut shape = x.shape().to_vec();
            shape[r - 2] = oh;
            shape[r - 1] = ow;
            let mut out = Vec::with_capacity(planes * oh * ow);
            for p in 0..planes {
                for i in 0..oh {
                    for j in 0..ow {
                        out.push(x.data()[p * h * w + (i / sh) * w + j / sw]);
                    }
                }
            }
            Tensor::from_vec(&shape, out).unwrap()
        })
    }

    pub fn sum(&self) -> Var<'t, T> {
        self.unary(Op::Sum(self.id), |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(&self) -> Var<'t, T> {
        self.unary(Op::Mean(self.id), |x| Tensor::scalar(x.mean()))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Var<'t, T> {
        self.unary(Op::SumAxis(self.id, axis), |x| {
            let outer: usize = x.shape()[..axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let len = x.dim(axis);
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            let mut out = vec![T::ZERO; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += x.data()[(o * len + l) * inner + i];
                    }
                }
            }
            Tensor::from_vec(&shape, out).unwrap()
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'t, T> {
        let n = self.dim(axis);
        self.sum_axis(axis).scale(1.0 / n as f64)
    }

    /// Inverted dropout when the tape carries a dropout generator.
    pub fn dropout(&self, rate: f64) -> Var<'t, T> {
        if rate <= 0.0 {
            return *self;
        }
        let mask = {
            let mut rng = self.tape.dropout_rng.borrow_mut();
            let Some(rng) = rng.as_mut() else {
                return *self;
            };
            let keep = 1.0 - rate;
            let scale = T::from_f64(1.0 / keep);
            let shape = self.shape();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| if rng.random::<f64>() < keep { scale } else { T::ZERO })
                .collect();
            Tensor::from_vec(&shape, data).unwrap()
        };
        self.mul(self.tape.constant(mask))
    }

    /// Scalar node with externally computed value and local gradients
    /// `d value / d parent`.
    pub fn custom_scalar(parents: &[Var<'t, T>], value: T, grads: Vec<Tensor<T>>) -> Var<'t, T> {
        let tape = parents.first().expect("custom op needs a parent").tape;
        assert_eq!(parents.len(), grads.len());
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let ng = tape.needs(&ids);
        tape.push(
            Tensor::scalar(value),
            Op::Custom {
                parents: ids,
                grads,
            },
            ng,
        )
    }
}
