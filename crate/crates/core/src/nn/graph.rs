//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::scalar::gemm;
use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of an NHWC convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.c
    }
}

enum Op<T> {
    Constant,
    Input,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    AddGroup(Var, Var),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    MeanSpatial(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Permute { x: Var, perm: [usize; 4] },
    MseLoss { x: Var, target: Vec<T> },
    Mean(Var),
    ExternalLoss { x: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf that receives a gradient; used to differentiate w.r.t. inputs.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Binds a stored parameter into the graph. Repeated binds share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Param, entry.trainable);
        self.params.insert(id, v);
        v
    }

    /// `x [.., K] @ w [K, N] + b [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let k = *xs.last().expect("linear input rank");
        assert_eq!(k, ws[0], "linear input width {k} vs weight {ws:?}");
        let n = ws[1];
        let rows = self.value(x).len() / k;
        let mut out = vec![T::zero(); rows * n];
        gemm(&mut out, self.value(x).data(), self.value(w).data(), rows, k, n, false, false, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), n);
            for row in out.chunks_mut(n) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, rg)
    }

    /// Batched matmul over the leading dim: `a [B, M, K] @ b [B, K, N]`,
    /// or `a @ b^T` with `b [B, N, K]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        assert_eq!(k, kb, "bmm inner dims {sa:?} {sb:?}");
        let mut out = vec![T::zero(); bs * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..bs {
            gemm(
                &mut out[i * m * n..(i + 1) * m * n],
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                false,
                trans_b,
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[bs, m, n], out), Op::BatchMatMul { a, b, trans_b }, rg)
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|&x| x * s).collect());
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `a + b` where `b` repeats over the leading dims of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let bl = vb.len();
        assert!(bl > 0 && va.len() % bl == 0, "broadcast {:?} + {:?}", va.shape(), vb.shape());
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(bl) {
            for (o, &x) in chunk.iter_mut().zip(vb.data()) {
                *o += x;
            }
        }
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::AddBroadcast(a, b), rg)
    }

    /// `a [G, R, D] + b [G, D]`, broadcasting `b` over the middle dim.
    pub fn add_group(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let sa = va.shape();
        assert_eq!(sa.len(), 3);
        let (g, r, d) = (sa[0], sa[1], sa[2]);
        assert_eq!(vb.len(), g * d, "add_group {:?} + {:?}", sa, vb.shape());
        let mut data = va.data().to_vec();
        for gi in 0..g {
            let bb = &vb.data()[gi * d..(gi + 1) * d];
            for ri in 0..r {
                let off = (gi * r + ri) * d;
                for (o, &x) in data[off..off + d].iter_mut().zip(bb) {
                    *o += x;
                }
            }
        }
        let t = Tensor::new(sa, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::AddGroup(a, b), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        self.map(
            a,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x / (T::one() + (-x).exp()), Op::Silu(a))
    }

    /// Softmax over the last dim.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = va.last_dim();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last dim with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let rows = vx.len() / d;
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        assert_eq!(g.len(), d);
        assert_eq!(b.len(), d);
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for i in 0..d {
                row[i] = row[i] * g[i] + b[i];
            }
        }
        let t = Tensor::new(vx.shape(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// NHWC convolution, square kernel. `w` is `[k, k, C, O]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 4, "conv input must be NHWC");
        assert_eq!(sw.len(), 4, "conv weight must be [k, k, C, O]");
        assert_eq!(sw[0], sw[1]);
        assert_eq!(sw[2], sx[3], "conv channel mismatch {sx:?} vs {sw:?}");
        let kernel = sw[0];
        let out_h = (sx[1] + 2 * pad - kernel) / stride + 1;
        let out_w = (sx[2] + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            c: sx[3],
            kernel,
            stride,
            pad,
            out_h,
            out_w,
            out_c: sw[3],
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (m, k, o) = (geom.rows(), geom.patch(), geom.out_c);
        let mut out = vec![T::zero(); m * o];
        gemm(&mut out, &cols, self.value(w).data(), m, k, o, false, false, false);
        let bias = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let t = Tensor::new(&[geom.n, out_h, out_w, o], out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(t, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Global average pool: `[N, H, W, C] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 4);
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let inv = T::lit(1.0 / hw as f64);
        let mut out = vec![T::zero(); n * c];
        for ni in 0..n {
            let o = &mut out[ni * c..(ni + 1) * c];
            for p in 0..hw {
                let row = &vx.data()[(ni * hw + p) * c..(ni * hw + p + 1) * c];
                for (a, &v) in o.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in o.iter_mut() {
                *a *= inv;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c], out), Op::MeanSpatial(x), rg)
    }

    /// Concatenate along the last dim; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, out), Op::Concat(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Permute a 4-D tensor: output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: [usize; 4]) -> Var {
        let vx = self.value(x);
        let s: [usize; 4] = vx.shape().try_into().expect("permute needs a 4-D tensor");
        let (data, shape) = permute4(vx.data(), s, perm);
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, data), Op::Permute { x, perm }, rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, x: Var, target: &[T]) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), target.len(), "mse target size");
        let n = T::lit(vx.len() as f64);
        let loss = vx
            .data()
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(loss),
            Op::MseLoss {
                x,
                target: target.to_vec(),
            },
            rg,
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let m = vx.data().iter().copied().sum::<T>() / T::lit(vx.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Scalar loss whose value and gradient w.r.t. `x` were computed by the
    /// caller, for losses with no dedicated op.
    pub fn external_loss(&mut self, x: Var, loss: T, grad: Vec<T>) -> Var {
        assert_eq!(self.value(x).len(), grad.len(), "external loss gradient size");
        let rg = self.rg(x);
        self.push(Tensor::scalar(loss), Op::ExternalLoss { x, grad }, rg)
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one(); self.value(root).len()]);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let k = self.value(*w).shape()[0];
                let n = self.value(*w).shape()[1];
                let rows = dy.len() / n;
                if self.rg(*x) {
                    let dx = acc(grads, *x, rows * k);
                    gemm(dx, dy, self.value(*w).data(), rows, n, k, false, true, true);
                }
                if self.rg(*w) {
                    let dw = acc(grads, *w, k * n);
                    gemm(dw, self.value(*x).data(), dy, k, rows, n, true, false, true);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db = acc(grads, *b, n);
                        for row in dy.chunks(n) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let da = acc(grads, *a, bs * m * k);
                    for i in 0..bs {
                        gemm(
                            &mut da[i * m * k..(i + 1) * m * k],
                            &dy[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            false,
                            !*trans_b,
                            true,
                        );
                    }
                }
                if self.rg(*b) {
                    let db = acc(grads, *b, bs * k * n);
                    for i in 0..bs {
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm(dbi, dyi, ai, n, m, k, true, false, true);
                        } else {
                            gemm(dbi, ai, dyi, k, m, n, true, false, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(acc(grads, v, dy.len()), dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(acc(grads, *a, dy.len()), dy);
                }
                if self.rg(*b) {
                    for (d, &g) in acc(grads, *b, dy.len()).iter_mut().zip(dy) {
                        *d -= g;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    for ((d, &g), &o) in acc(grads, *a, dy.len()).iter_mut().zip(dy).zip(vb) {
                        *d += g * o;
                    }
                }
                if self.rg(*b) {
                    for ((d, &g), &o) in acc(grads, *b, dy.len()).iter_mut().zip(dy).zip(va) {
                        *d += g * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    for (d, &g) in acc(grads, *a, dy.len()).iter_mut().zip(dy) {
                        *d += g * *s;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.rg(*a) {
                    add_into(acc(grads, *a, dy.len()), dy);
                }
                if self.rg(*b) {
                    let bl = self.value(*b).len();
                    let db = acc(grads, *b, bl);
                    for chunk in dy.chunks(bl) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::AddGroup(a, b) => {
                if self.rg(*a) {
                    add_into(acc(grads, *a, dy.len()), dy);
                }
                if self.rg(*b) {
                    let s = self.value(*a).shape();
                    let (g, r, d) = (s[0], s[1], s[2]);
                    let db = acc(grads, *b, g * d);
                    for gi in 0..g {
                        for ri in 0..r {
                            let off = (gi * r + ri) * d;
                            add_into(&mut db[gi * d..(gi + 1) * d], &dy[off..off + d]);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let va = self.value(*a).data();
                    for ((d, &g), &x) in acc(grads, *a, dy.len()).iter_mut().zip(dy).zip(va) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
                    let (half, three) = (T::lit(0.5), T::lit(3.0));
                    let va = self.value(*a).data();
                    for ((d, &g), &x) in acc(grads, *a, dy.len()).iter_mut().zip(dy).zip(va) {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let dudx = c * (T::one() + three * k * x * x);
                        let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * dudx;
                        *d += g * deriv;
                    }
                }
            }
            Op::Silu(a) => {
                if self.rg(*a) {
                    let va = self.value(*a).data();
                    for ((d, &g), &x) in acc(grads, *a, dy.len()).iter_mut().zip(dy).zip(va) {
                        let s = T::one() / (T::one() + (-x).exp());
                        *d += g * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            Op::Softmax(a) => {
                if self.rg(*a) {
                    let y = node.value.data();
                    let dlen = node.value.last_dim();
                    let da = acc(grads, *a, dy.len());
                    for ((dar, yr), gr) in da.chunks_mut(dlen).zip(y.chunks(dlen)).zip(dy.chunks(dlen)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((d, &p), &q) in dar.iter_mut().zip(yr).zip(gr) {
                            *d += p * (q - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let g = self.value(*gain).data();
                if self.rg(*gain) {
                    let dg = acc(grads, *gain, d);
                    for (gr, xr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            dg[i] += gr[i] * xr[i];
                        }
                    }
                }
                if self.rg(*bias) {
                    let db = acc(grads, *bias, d);
                    for gr in dy.chunks(d) {
                        add_into(db, gr);
                    }
                }
                if self.rg(*x) {
                    let dn = T::lit(d as f64);
                    let dx = acc(grads, *x, dy.len());
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((dxr, gr), xr)) in dx
                        .chunks_mut(d)
                        .zip(dy.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        for i in 0..d {
                            dxhat[i] = gr[i] * g[i];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for i in 0..d {
                            dxr[i] += rstd[r] * (dxhat[i] - m1 - xr[i] * m2);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (m, k, o) = (geom.rows(), geom.patch(), geom.out_c);
                if self.rg(*w) {
                    let dw = acc(grads, *w, k * o);
                    gemm(dw, cols, dy, k, m, o, true, false, true);
                }
                if self.rg(*b) {
                    let db = acc(grads, *b, o);
                    for row in dy.chunks(o) {
                        add_into(db, row);
                    }
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); m * k];
                    gemm(&mut dcols, dy, self.value(*w).data(), m, o, k, false, true, false);
                    let dx = acc(grads, *x, geom.n * geom.h * geom.w * geom.c);
                    col2im_add(&dcols, geom, dx);
                }
            }
            Op::MeanSpatial(x) => {
                if self.rg(*x) {
                    let s = self.value(*x).shape();
                    let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                    let inv = T::lit(1.0 / hw as f64);
                    let dx = acc(grads, *x, n * hw * c);
                    for ni in 0..n {
                        let g = &dy[ni * c..(ni + 1) * c];
                        for p in 0..hw {
                            let row = &mut dx[(ni * hw + p) * c..(ni * hw + p + 1) * c];
                            for (d, &gg) in row.iter_mut().zip(g) {
                                *d += gg * inv;
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total;
                let mut off = 0;
                for (&p, &wd) in parts.iter().zip(&widths) {
                    if self.rg(p) {
                        let dp = acc(grads, p, rows * wd);
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * wd..(r + 1) * wd],
                                &dy[r * total + off..r * total + off + wd],
                            );
                        }
                    }
                    off += wd;
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    add_into(acc(grads, *x, dy.len()), dy);
                }
            }
            Op::Permute { x, perm } => {
                if self.rg(*x) {
                    let out_shape: [usize; 4] = node.value.shape().try_into().unwrap();
                    let mut inv = [0usize; 4];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (back, _) = permute4(dy, out_shape, inv);
                    add_into(acc(grads, *x, dy.len()), &back);
                }
            }
            Op::MseLoss { x, target } => {
                if self.rg(*x) {
                    let vx = self.value(*x).data();
                    let scale = dy[0] * T::lit(2.0 / vx.len() as f64);
                    for ((d, &a), &t) in acc(grads, *x, vx.len()).iter_mut().zip(vx).zip(target) {
                        *d += scale * (a - t);
                    }
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    let g = dy[0] / T::lit(n as f64);
                    for d in acc(grads, *x, n).iter_mut() {
                        *d += g;
                    }
                }
            }
            Op::ExternalLoss { x, grad } => {
                if self.rg(*x) {
                    for (d, &g) in acc(grads, *x, grad.len()).iter_mut().zip(grad) {
                        *d += dy[0] * g;
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    debug_assert_eq!(slot.len(), len);
    slot
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let off = (ky * g.kernel + kx) * g.c;
                        dst[off..off + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &dcols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let off = (ky * g.kernel + kx) * g.c;
                        add_into(&mut dx[dst..dst + g.c], &src[off..off + g.c]);
                    }
                }
                row += 1;
            }
        }
    }
}

fn permute4<T: Scalar>(data: &[T], s: [usize; 4], perm: [usize; 4]) -> (Vec<T>, Vec<usize>) {
    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]];
    let in_strides = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let st = [
        in_strides[perm[0]],
        in_strides[perm[1]],
        in_strides[perm[2]],
        in_strides[perm[3]],
    ];
    let mut out = Vec::with_capacity(data.len());
    for a in 0..out_shape[0] {
        for b in 0..out_shape[1] {
            for c in 0..out_shape[2] {
                let base = a * st[0] + b * st[1] + c * st[2];
                for d in 0..out_shape[3] {
                    out.push(data[base + d * st[3]]);
                }
            }
        }
    }
    (out, out_shape.to_vec())
}
