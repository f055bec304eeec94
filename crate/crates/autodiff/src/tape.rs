use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::ops;
use std::sync::Arc;

use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Exp(usize),
    Abs(usize),
    Sqr(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    ConvTranspose2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    InstanceNorm { x: usize, inv_std: Vec<f64> },
    AvgPool { x: usize, k: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Concat { parts: Vec<usize>, dim: usize },
    Narrow { x: usize, dim: usize, start: usize },
    Warp { z: usize, index: Arc<[u32]> },
    Gather { x: usize, index: Arc<[usize]> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records a computation so it can be differentiated in reverse.
///
/// A tape is built once per forward pass and dropped afterwards. Variables
/// borrow the tape, so they cannot outlive it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        let id = nodes.len();
        nodes.push(Node { value: Arc::new(value), op, needs_grad, param: None });
        Var { tape: self, id }
    }

    fn leaf(&self, value: Arc<Tensor>, needs_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op: Op::Leaf, needs_grad, param });
        Var { tape: self, id }
    }

    /// Leaf that collects a gradient.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), true, None)
    }

    /// Leaf that never collects a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), false, None)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.leaf(store.shared(id), true, Some(id))
    }

    pub fn frozen_param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.leaf(store.shared(id), false, None)
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenates along `dim`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], dim: usize) -> Var<'t> {
        assert!(!parts.is_empty());
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let mut shape = first.clone();
        shape[dim] = 0;
        for v in &values {
            assert_eq!(v.rank(), first.len());
            for (d, (&a, &b)) in v.shape().iter().zip(&first).enumerate() {
                assert!(d == dim || a == b, "concat shape mismatch {:?} vs {first:?}", v.shape());
            }
            shape[dim] += v.dim(dim);
        }
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let block = v.dim(dim) * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::new(shape, data), Op::Concat { parts: ids.clone(), dim }, &ids)
    }

    /// Writes row `z[b, index[b, p] - 1, :]` into pixel `p` of an `[B, N, H, W]`
    /// image; index 0 writes zeros.
    ///
    /// `z` has shape `[B, R, N]` and `index` has length `B * H * W` with
    /// values in `0..=R`.
    pub fn warp_broadcast<'t>(&'t self, z: Var<'t>, index: Arc<[u32]>, height: usize, width: usize) -> Var<'t> {
        let zv = z.value();
        assert_eq!(zv.rank(), 3, "warp table must be [B, R, N]");
        let (b, r, n) = (zv.dim(0), zv.dim(1), zv.dim(2));
        let hw = height * width;
        assert_eq!(index.len(), b * hw, "warp index length");
        let mut out = vec![0.0; b * n * hw];
        for bi in 0..b {
            let table = zv.slice0(bi);
            let idx = &index[bi * hw..(bi + 1) * hw];
            let dst = &mut out[bi * n * hw..(bi + 1) * n * hw];
            for (p, &k) in idx.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                let k = k as usize;
                assert!(k <= r, "warp index {k} exceeds table rows {r}");
                let row = &table[(k - 1) * n..k * n];
                for (c, &val) in row.iter().enumerate() {
                    dst[c * hw + p] = val;
                }
            }
        }
        self.push(Tensor::new([b, n, height, width], out), Op::Warp { z: z.id, index }, &[z.id])
    }

    /// Per-sample pixel gather from `[B, C, H, W]` into `[B, C, OH, OW]`;
    /// `index[b * OH * OW + q]` is the flat source pixel in `0..H*W`.
    pub fn gather_pixels<'t>(&'t self, x: Var<'t>, index: Arc<[usize]>, out_h: usize, out_w: usize) -> Var<'t> {
        let xv = x.value();
        assert_eq!(xv.rank(), 4);
        let (b, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (hw, ohw) = (h * w, out_h * out_w);
        assert_eq!(index.len(), b * ohw, "gather index length");
        let mut out = vec![0.0; b * c * ohw];
        for bi in 0..b {
            let idx = &index[bi * ohw..(bi + 1) * ohw];
            for ci in 0..c {
                let src = &xv.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                let dst = &mut out[(bi * c + ci) * ohw..(bi * c + ci + 1) * ohw];
                for (d, &s) in dst.iter_mut().zip(idx) {
                    *d = src[s];
                }
            }
        }
        self.push(Tensor::new([b, c, out_h, out_w], out), Op::Gather { x: x.id, index }, &[x.id])
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        }
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(node, &g, &nodes, &mut grads);
        }
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if let (Some(pid), Some(gt)) = (node.param, g.as_ref()) {
                match params.get_mut(&pid) {
                    Some(acc) => acc.add_assign(gt),
                    None => {
                        params.insert(pid, gt.clone());
                    }
                }
            }
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Gradients { nodes: grads, params }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf variable, if it was reached.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.nodes.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, summed over every binding on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// L2 norm over the gradients of the given parameters.
    pub fn norm_of(&self, ids: &[ParamId]) -> f64 {
        ids.iter().filter_map(|id| self.params.get(id)).map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape().to_vec()));
    }
    f(slot.as_mut().unwrap().data_mut());
}

fn elementwise(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    accumulate(grads, nodes, id, |d| {
        for (i, (d, &gi)) in d.iter_mut().zip(g).enumerate() {
            *d += f(i, gi);
        }
    });
}

fn backprop(node: &Node, g: &Tensor, nodes: &[Node], grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    let y = node.value.data();
    let val = |id: usize| nodes[id].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            elementwise(grads, nodes, *a, gd, |_, g| g);
            elementwise(grads, nodes, *b, gd, |_, g| g);
        }
        Op::Sub(a, b) => {
            elementwise(grads, nodes, *a, gd, |_, g| g);
            elementwise(grads, nodes, *b, gd, |_, g| -g);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            elementwise(grads, nodes, *a, gd, |i, g| g * bv[i]);
            elementwise(grads, nodes, *b, gd, |i, g| g * av[i]);
        }
        Op::Scale(a, s) => elementwise(grads, nodes, *a, gd, |_, g| g * s),
        Op::AddScalar(a) | Op::Reshape(a) => elementwise(grads, nodes, *a, gd, |_, g| g),
        Op::Relu(a) => {
            let x = val(*a);
            elementwise(grads, nodes, *a, gd, |i, g| if x[i] > 0.0 { g } else { 0.0 });
        }
        Op::LeakyRelu(a, slope) => {
            let x = val(*a);
            elementwise(grads, nodes, *a, gd, |i, g| if x[i] > 0.0 { g } else { g * slope });
        }
        Op::Tanh(a) => elementwise(grads, nodes, *a, gd, |i, g| g * (1.0 - y[i] * y[i])),
        Op::Exp(a) => elementwise(grads, nodes, *a, gd, |i, g| g * y[i]),
        Op::Abs(a) => {
            let x = val(*a);
            elementwise(grads, nodes, *a, gd, |i, g| {
                if x[i] > 0.0 {
                    g
                } else if x[i] < 0.0 {
                    -g
                } else {
                    0.0
                }
            });
        }
        Op::Sqr(a) => {
            let x = val(*a);
            elementwise(grads, nodes, *a, gd, |i, g| 2.0 * x[i] * g);
        }
        Op::Sum(a) => {
            let g0 = gd[0];
            accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|d| *d += g0));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            let g0 = gd[0] / n;
            accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|d| *d += g0));
        }
        Op::Conv2d { x, w, b, stride, pad } => conv2d_backward(nodes, grads, gd, *x, *w, *b, *stride, *pad),
        Op::ConvTranspose2d { x, w, b, stride, pad } => {
            conv_transpose2d_backward(nodes, grads, g, *x, *w, *b, *stride, *pad)
        }
        Op::InstanceNorm { x, inv_std } => {
            let plane = nodes[*x].value.len() / inv_std.len();
            accumulate(grads, nodes, *x, |d| {
                for (p, &inv) in inv_std.iter().enumerate() {
                    let r = p * plane..(p + 1) * plane;
                    let (gp, yp) = (&gd[r.clone()], &y[r.clone()]);
                    let mean_g = gp.iter().sum::<f64>() / plane as f64;
                    let mean_gy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                    for ((d, &gi), &yi) in d[r].iter_mut().zip(gp).zip(yp) {
                        *d += inv * (gi - mean_g - yi * mean_gy);
                    }
                }
            });
        }
        Op::AvgPool { x, k } => {
            let xs = nodes[*x].value.shape().to_vec();
            let (h, w) = (xs[2], xs[3]);
            let (oh, ow) = (h / k, w / k);
            let planes = xs[0] * xs[1];
            let scale = 1.0 / (k * k) as f64;
            accumulate(grads, nodes, *x, |d| {
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[p * oh * ow + oy * ow + ox] * scale;
                            for dy in 0..*k {
                                let row = p * h * w + (oy * k + dy) * w + ox * k;
                                d[row..row + k].iter_mut().for_each(|v| *v += gv);
                            }
                        }
                    }
                }
            });
        }
        Op::Linear { x, w, b } => {
            let xs = nodes[*x].value.shape().to_vec();
            let ws = nodes[*w].value.shape().to_vec();
            let (bsz, fin, fout) = (xs[0], xs[1], ws[0]);
            let (xv, wv) = (val(*x), val(*w));
            accumulate(grads, nodes, *x, |d| gemm(bsz, fout, fin, gd, false, wv, false, 1.0, d));
            accumulate(grads, nodes, *w, |d| gemm(fout, bsz, fin, gd, true, xv, false, 1.0, d));
            if let Some(b) = b {
                accumulate(grads, nodes, *b, |d| {
                    for row in gd.chunks(fout) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
        }
        Op::Concat { parts, dim } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*dim].iter().product();
            let inner: usize = shape[dim + 1..].iter().product();
            let total = shape[*dim] * inner;
            let mut offset = 0;
            for &p in parts {
                let block = nodes[p].value.dim(*dim) * inner;
                accumulate(grads, nodes, p, |d| {
                    for o in 0..outer {
                        let src = &gd[o * total + offset..o * total + offset + block];
                        d[o * block..(o + 1) * block].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
                offset += block;
            }
        }
        Op::Narrow { x, dim, start } => {
            let xs = nodes[*x].value.shape().to_vec();
            let outer: usize = xs[..*dim].iter().product();
            let inner: usize = xs[dim + 1..].iter().product();
            let len = node.value.dim(*dim);
            accumulate(grads, nodes, *x, |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * xs[*dim] + start) * inner..(o * xs[*dim] + start + len) * inner];
                    let src = &gd[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::Warp { z, index } => {
            let zs = nodes[*z].value.shape().to_vec();
            let (b, r, n) = (zs[0], zs[1], zs[2]);
            let hw = index.len() / b;
            accumulate(grads, nodes, *z, |d| {
                for bi in 0..b {
                    let idx = &index[bi * hw..(bi + 1) * hw];
                    let gb = &gd[bi * n * hw..(bi + 1) * n * hw];
                    let db = &mut d[bi * r * n..(bi + 1) * r * n];
                    for (p, &k) in idx.iter().enumerate() {
                        if k == 0 {
                            continue;
                        }
                        let row = &mut db[(k as usize - 1) * n..k as usize * n];
                        for (c, v) in row.iter_mut().enumerate() {
                            *v += gb[c * hw + p];
                        }
                    }
                }
            });
        }
        Op::Gather { x, index } => {
            let xs = nodes[*x].value.shape().to_vec();
            let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let ohw = index.len() / b;
            accumulate(grads, nodes, *x, |d| {
                for bi in 0..b {
                    let idx = &index[bi * ohw..(bi + 1) * ohw];
                    for ci in 0..c {
                        let dst = &mut d[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        let src = &gd[(bi * c + ci) * ohw..(bi * c + ci + 1) * ohw];
                        for (&s, &gv) in idx.iter().zip(src) {
                            dst[s] += gv;
                        }
                    }
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    gd: &[f64],
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
) {
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;
    let (bsz, c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
    let (o, kh, kw) = (wv.dim(0), wv.dim(2), wv.dim(3));
    let geom = ConvGeom::new(c, h, wd, (kh, kw), stride, pad);
    let (krows, p) = (geom.col_rows(), geom.col_cols());
    let need_x = nodes[x].needs_grad;
    let need_w = nodes[w].needs_grad;
    let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { krows * p }];
    let mut dcols = vec![0.0; if need_x && !geom.is_pointwise() { krows * p } else { 0 }];
    for n in 0..bsz {
        let gn = &gd[n * o * p..(n + 1) * o * p];
        let xn = xv.slice0(n);
        if need_w {
            let cols_n: &[f64] = if geom.is_pointwise() {
                xn
            } else {
                im2col(&geom, xn, &mut cols);
                &cols
            };
            accumulate(grads, nodes, w, |d| gemm(o, p, krows, gn, false, cols_n, true, 1.0, d));
        }
        if need_x {
            let wdata = wv.data();
            accumulate(grads, nodes, x, |d| {
                let dxn = &mut d[n * c * h * wd..(n + 1) * c * h * wd];
                if geom.is_pointwise() {
                    gemm(krows, o, p, wdata, true, gn, false, 1.0, dxn);
                } else {
                    gemm(krows, o, p, wdata, true, gn, false, 0.0, &mut dcols);
                    col2im(&geom, &dcols, dxn);
                }
            });
        }
        if let Some(b) = b {
            accumulate(grads, nodes, b, |d| {
                for (oc, dv) in d.iter_mut().enumerate() {
                    *dv += gn[oc * p..(oc + 1) * p].iter().sum::<f64>();
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_transpose2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
) {
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;
    let (bsz, c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
    let (o, kh, kw) = (wv.dim(1), wv.dim(2), wv.dim(3));
    let (oh, ow) = (g.dim(2), g.dim(3));
    // The adjoint convolution maps [O, OH, OW] onto the [C, H, W] input grid.
    let mut geom = ConvGeom::new(o, oh, ow, (kh, kw), stride, pad);
    geom.out_h = h;
    geom.out_w = wd;
    let (krows, p) = (geom.col_rows(), geom.col_cols());
    let mut cols = vec![0.0; krows * p];
    let gd = g.data();
    for n in 0..bsz {
        let gn = &gd[n * o * oh * ow..(n + 1) * o * oh * ow];
        im2col(&geom, gn, &mut cols);
        let xn = xv.slice0(n);
        accumulate(grads, nodes, x, |d| {
            gemm(c, krows, p, wv.data(), false, &cols, false, 1.0, &mut d[n * c * h * wd..(n + 1) * c * h * wd])
        });
        accumulate(grads, nodes, w, |d| gemm(c, p, krows, xn, false, &cols, true, 1.0, d));
        if let Some(b) = b {
            accumulate(grads, nodes, b, |d| {
                let plane = oh * ow;
                for (oc, dv) in d.iter_mut().enumerate() {
                    *dv += gn[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
                }
            });
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Same value as a gradient-free constant.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf(self.value(), false, None)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op, &[self.id])
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.push(Tensor::new(a.shape().to_vec(), data), op, &[self.id, other.id])
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.id, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn sqr(&self) -> Var<'t> {
        self.unary(Op::Sqr(self.id), |x| x * x)
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = v.sum() / v.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let v = (*self.value()).clone().reshape(shape);
        self.tape.push(v, Op::Reshape(self.id), &[self.id])
    }

    /// 2-D convolution, `self: [B, C, H, W]`, `weight: [O, C, kh, kw]`, zero padding.
    pub fn conv2d(&self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let xv = self.value();
        let wv = weight.value();
        assert_eq!(xv.rank(), 4, "conv2d input must be NCHW");
        let (bsz, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (o, wc, kh, kw) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
        let geom = ConvGeom::new(c, h, w, (kh, kw), stride, pad);
        let (krows, p) = (geom.col_rows(), geom.col_cols());
        let bv = bias.map(|b| b.value());
        let mut out = vec![0.0; bsz * o * p];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { krows * p }];
        for n in 0..bsz {
            let xn = xv.slice0(n);
            let cols_n: &[f64] = if geom.is_pointwise() {
                xn
            } else {
                im2col(&geom, xn, &mut cols);
                &cols
            };
            let on = &mut out[n * o * p..(n + 1) * o * p];
            gemm(o, krows, p, wv.data(), false, cols_n, false, 0.0, on);
            if let Some(bv) = &bv {
                for (oc, plane) in on.chunks_mut(p).enumerate() {
                    let bias = bv.data()[oc];
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.push(
            Tensor::new([bsz, o, geom.out_h, geom.out_w], out),
            Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), stride, pad },
            &parents,
        )
    }

    /// Transposed convolution, `weight: [C, O, kh, kw]`. Output size is
    /// `(H - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var<'t> {
        let xv = self.value();
        let wv = weight.value();
        assert_eq!(xv.rank(), 4);
        let (bsz, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (wc, o, kh, kw) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        assert_eq!(c, wc, "conv_transpose2d channel mismatch");
        assert!(output_pad < stride);
        let oh = (h - 1) * stride + kh + output_pad - 2 * pad;
        let ow = (w - 1) * stride + kw + output_pad - 2 * pad;
        let mut geom = ConvGeom::new(o, oh, ow, (kh, kw), stride, pad);
        geom.out_h = h;
        geom.out_w = w;
        let (krows, p) = (geom.col_rows(), geom.col_cols());
        let bv = bias.map(|b| b.value());
        let mut out = vec![0.0; bsz * o * oh * ow];
        let mut cols = vec![0.0; krows * p];
        for n in 0..bsz {
            gemm(krows, c, p, wv.data(), true, xv.slice0(n), false, 0.0, &mut cols);
            let on = &mut out[n * o * oh * ow..(n + 1) * o * oh * ow];
            col2im(&geom, &cols, on);
            if let Some(bv) = &bv {
                for (oc, plane) in on.chunks_mut(oh * ow).enumerate() {
                    let bias = bv.data()[oc];
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.push(
            Tensor::new([bsz, o, oh, ow], out),
            Op::ConvTranspose2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), stride, pad },
            &parents,
        )
    }

    /// Normalizes each `(sample, channel)` plane to zero mean and unit
    /// (biased) variance. No affine parameters.
    pub fn instance_norm(&self, eps: f64) -> Var<'t> {
        let xv = self.value();
        assert!(xv.rank() >= 3);
        let planes = xv.dim(0) * xv.dim(1);
        let plane = xv.len() / planes;
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(planes);
        for (src, dst) in xv.data().chunks(plane).zip(out.chunks_mut(plane)) {
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.tape.push(Tensor::new(xv.shape().to_vec(), out), Op::InstanceNorm { x: self.id, inv_std }, &[self.id])
    }

    /// Non-overlapping `k x k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&self, k: usize) -> Var<'t> {
        let xv = self.value();
        assert_eq!(xv.rank(), 4);
        let (b, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        assert!(h % k == 0 && w % k == 0, "avg_pool({k}) on {h}x{w}");
        let (oh, ow) = (h / k, w / k);
        let scale = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; b * c * oh * ow];
        for (p, src) in xv.data().chunks(h * w).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        let row = (oy * k + dy) * w + ox * k;
                        s += src[row..row + k].iter().sum::<f64>();
                    }
                    out[p * oh * ow + oy * ow + ox] = s * scale;
                }
            }
        }
        self.tape.push(Tensor::new([b, c, oh, ow], out), Op::AvgPool { x: self.id, k }, &[self.id])
    }

    /// `x: [B, I]`, `weight: [O, I]`, `bias: [O]` → `[B, O]`.
    pub fn linear(&self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        let xv = self.value();
        let wv = weight.value();
        assert_eq!(xv.rank(), 2);
        let (b, fin, fout) = (xv.dim(0), xv.dim(1), wv.dim(0));
        assert_eq!(wv.dim(1), fin, "linear input width mismatch");
        let mut out = vec![0.0; b * fout];
        gemm(b, fin, fout, xv.data(), false, wv.data(), true, 0.0, &mut out);
        if let Some(bias) = bias {
            let bv = bias.value();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
            }
        }
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.push(
            Tensor::new([b, fout], out),
            Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id) },
            &parents,
        )
    }

    /// Slice `start..start + len` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Var<'t> {
        let xv = self.value();
        let xs = xv.shape();
        assert!(start + len <= xs[dim]);
        let outer: usize = xs[..dim].iter().product();
        let inner: usize = xs[dim + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[dim] + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xs.to_vec();
        shape[dim] = len;
        self.tape.push(Tensor::new(shape, data), Op::Narrow { x: self.id, dim, start }, &[self.id])
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
