//! Reverse-mode automatic differentiation over channel-major feature maps.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! only for nodes that transitively depend on a leaf created with
//! `requires_grad = true`. Frozen parameters are ordinary leaves without that
//! flag, so no weight gradient is ever computed for them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    ScaleItems(Var, Vec<T>),
    Silu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(T, T)> },
    Concat0(Var, Var),
    Upsample2x(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    PixelUnshuffle { x: Var, r: usize },
    Mse(Var, Var),
    WeightedSum(Var, Tensor<T>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Output spatial size of a square-kernel convolution.
pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfolds `x: [Cin, B, H, W]` into `[Cin*k*k, B*Ho*Wo]`.
fn im2col<T: Real>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Vec<T> {
    let [cin, b, h, w] = x.shape();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let n = b * ho * wo;
    let mut cols = vec![T::zero(); cin * k * k * n];
    let xd = x.data();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let plane = &xd[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut dst[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], shape: [usize; 4], k: usize, stride: usize, pad: usize) -> Tensor<T> {
    let [cin, b, h, w] = shape;
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let n = b * ho * wo;
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let base = (ci * b + bi) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &src[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        let dst_row = &mut od[base + iy as usize * w..base + (iy as usize + 1) * w];
                        for (ox, &v) in in_row.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn scale_items<T: Real>(x: &Tensor<T>, s: &[T], plane: usize) -> Tensor<T> {
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let k = s[i % s.len()];
        chunk.iter_mut().for_each(|v| *v = *v * k);
    }
    out
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

fn broadcast_index(shape: [usize; 4], bshape: [usize; 4]) -> Result<[usize; 4]> {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        if bshape[d] == shape[d] {
            strides[d] = acc;
        } else if bshape[d] == 1 {
            strides[d] = 0;
        } else {
            return Err(Error::Shape(format!("cannot broadcast {bshape:?} to {shape:?}")));
        }
        acc *= bshape[d];
    }
    Ok(strides)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf sharing storage with an existing array (parameters).
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [cin, bsz, h, wd] = self.shape(x);
        let [cout, wcin, k, k2] = self.shape(w);
        if wcin != cin || k != k2 {
            return Err(Error::Shape(format!(
                "conv weight {:?} does not accept input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!("input {h}x{wd} smaller than kernel {k}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout, 1, 1, 1] {
                return Err(Error::Shape(format!("conv bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let n = bsz * ho * wo;
        let mut out = Tensor::zeros([cout, bsz, ho, wo]);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let kk = cin * k * k;
            if is_pointwise(k, stride, pad) {
                matmul(MatRef::new(wv.data(), cout, kk), MatRef::new(xv.data(), kk, n), out.data_mut(), T::zero());
            } else {
                let cols = im2col(xv, k, stride, pad);
                matmul(MatRef::new(wv.data(), cout, kk), MatRef::new(&cols, kk, n), out.data_mut(), T::zero());
            }
            if let Some(b) = b {
                let bv = self.value(b).data().to_vec();
                for (c, row) in out.data_mut().chunks_mut(n).enumerate() {
                    let bc = bv[c];
                    row.iter_mut().for_each(|v| *v = *v + bc);
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `a + b` where each axis of `b` either matches `a` or has size 1.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        let bshape = self.shape(b);
        let st = broadcast_index(shape, bshape)?;
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        let od = out.data_mut();
        let mut i = 0;
        for i0 in 0..shape[0] {
            for i1 in 0..shape[1] {
                for i2 in 0..shape[2] {
                    let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                    for i3 in 0..shape[3] {
                        od[i] = od[i] + bd[base + i3 * st[3]];
                        i += 1;
                    }
                }
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Multiplies batch item `b` of `a: [C, B, H, W]` by the constant `s[b]`,
    /// or, when `s` has `C * B` entries, plane `(c, b)` by `s[c * B + b]`.
    pub fn scale_items(&mut self, a: Var, s: Vec<T>) -> Result<Var> {
        let [c, b, h, w] = self.shape(a);
        if s.len() != b && s.len() != c * b {
            return Err(Error::Shape(format!("{} scales for {c} channels and batch {b}", s.len())));
        }
        let out = scale_items(self.value(a), &s, h * w);
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::ScaleItems(a, s), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.needs(&[a]);
        self.push(out, Op::Silu(a), ng)
    }

    /// Group normalization over `(channels in group, H, W)` per batch item.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let [c, b, h, w] = self.shape(x);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c, 1, 1, 1] || self.shape(beta) != [c, 1, 1, 1] {
            return Err(Error::Shape("group norm affine parameters must be [C,1,1,1]".into()));
        }
        let eps = T::from_f64_lossy(1e-5);
        let cpg = c / groups;
        let plane = h * w;
        let count = T::from_usize(cpg * plane).unwrap();
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let xd = xv.data();
        let mut out = Tensor::zeros([c, b, h, w]);
        let mut stats = Vec::with_capacity(b * groups);
        {
            let od = out.data_mut();
            for bi in 0..b {
                for g in 0..groups {
                    let mut sum = T::zero();
                    for ci in g * cpg..(g + 1) * cpg {
                        let off = (ci * b + bi) * plane;
                        sum = sum + xd[off..off + plane].iter().copied().sum::<T>();
                    }
                    let mean = sum / count;
                    let mut var = T::zero();
                    for ci in g * cpg..(g + 1) * cpg {
                        let off = (ci * b + bi) * plane;
                        var = var + xd[off..off + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                    }
                    let rstd = T::one() / (var / count + eps).sqrt();
                    for ci in g * cpg..(g + 1) * cpg {
                        let off = (ci * b + bi) * plane;
                        let (ga, be) = (gv[ci], bv[ci]);
                        for (o, &v) in od[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                            *o = (v - mean) * rstd * ga + be;
                        }
                    }
                    stats.push((mean, rstd));
                }
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, ng))
    }

    /// Concatenates along the channel axis.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::concat0(&[self.value(a), self.value(b)])?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Concat0(a, b), ng))
    }

    pub fn upsample2x(&mut self, a: Var) -> Var {
        let [c, b, h, w] = self.shape(a);
        let src = self.value(a).data();
        let mut out = Tensor::zeros([c, b, 2 * h, 2 * w]);
        let od = out.data_mut();
        for p in 0..c * b {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut od[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    d[y * 2 * w + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let ng = self.needs(&[a]);
        self.push(out, Op::Upsample2x(a), ng)
    }

    /// Single-head scaled dot-product attention.
    ///
    /// `q: [d, B, H, W]` attends over `k: [d, B, L, 1]`, `v: [dv, B, L, 1]`;
    /// the output is `[dv, B, H, W]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let [d, b, h, w] = self.shape(q);
        let [dk, bk, l, one] = self.shape(k);
        let [dv, bv, lv, one_v] = self.shape(v);
        if dk != d || bk != b || bv != b || lv != l || one != 1 || one_v != 1 {
            return Err(Error::Shape(format!(
                "attention dims mismatch: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        let nq = h * w;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); b * nq * l];
        let mut out = Tensor::<T>::zeros([dv, b, h, w]);
        for bi in 0..b {
            let p = &mut probs[bi * nq * l..(bi + 1) * nq * l];
            // SAFETY: strided views stay within q/k/v/out buffers.
            unsafe {
                // scores[nq, l] = Q_b^T K_b
                T::gemm(
                    nq,
                    d,
                    l,
                    scale,
                    qd.as_ptr().add(bi * nq),
                    1,
                    (b * nq) as isize,
                    kd.as_ptr().add(bi * l),
                    (b * l) as isize,
                    1,
                    T::zero(),
                    p.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            for row in p.chunks_mut(l) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    s = s + *e;
                }
                row.iter_mut().for_each(|e| *e = *e / s);
            }
            unsafe {
                // O_b[dv, nq] = V_b[dv, l] P^T[l, nq]
                T::gemm(
                    dv,
                    l,
                    nq,
                    T::one(),
                    vd.as_ptr().add(bi * l),
                    (b * l) as isize,
                    1,
                    p.as_ptr(),
                    1,
                    l as isize,
                    T::zero(),
                    out.data_mut().as_mut_ptr().add(bi * nq),
                    (b * nq) as isize,
                    1,
                );
            }
        }
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, probs }, ng))
    }

    /// Looks up rows of `table: [V, D, 1, 1]`; `ids` has length `B*L`.
    /// Output `[D, B, L, 1]`.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>, batch: usize) -> Result<Var> {
        let [vocab, dim, _, _] = self.shape(table);
        if batch == 0 || ids.len() % batch != 0 {
            return Err(Error::Shape(format!("{} ids do not split into {batch} sequences", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let len = ids.len() / batch;
        let td = self.value(table).data();
        let mut out = Tensor::zeros([dim, batch, len, 1]);
        let od = out.data_mut();
        for (pos, &id) in ids.iter().enumerate() {
            for d in 0..dim {
                od[d * ids.len() + pos] = td[id * dim + d];
            }
        }
        let ng = self.needs(&[table]);
        Ok(self.push(out, Op::Embedding { table, ids }, ng))
    }

    /// Space-to-depth: `[C, B, H, W] -> [C*r*r, B, H/r, W/r]` with output
    /// channel `c*r*r + i*r + j` taken from input offset `(i, j)`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_unshuffle_cnhw(self.value(x), r)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::PixelUnshuffle { x, r }, ng))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        av.check_same(bv)?;
        let n = T::from_usize(av.len()).unwrap();
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng))
    }

    /// `sum(a * w)` for a constant `w`.
    pub fn weighted_sum(&mut self, a: Var, w: Tensor<T>) -> Result<Var> {
        let av = self.value(a);
        av.check_same(&w)?;
        let s: T = av.data().iter().zip(w.data()).map(|(&x, &y)| x * y).sum();
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, w), ng))
    }

    /// Reverse pass from a scalar node. Gradients are retained for leaves only.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.shape(root) != [1, 1, 1, 1] {
            return Err(Error::Shape("backward requires a scalar root".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let xv = self.value(*x);
                let wv = self.value(*w);
                let [cout, cin, k, _] = wv.shape();
                let [_, _, ho, wo] = g.shape();
                let n = xv.shape()[1] * ho * wo;
                let kk = cin * k * k;
                let gd = g.data();
                if let Some(b) = b {
                    if self.ng(*b) {
                        let db: Vec<T> = gd.chunks(n).map(|r| r.iter().copied().sum()).collect();
                        accumulate(grads, *b, Tensor::from_vec([cout, 1, 1, 1], db).unwrap());
                    }
                }
                let pointwise = is_pointwise(k, stride, pad);
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    if pointwise {
                        matmul(MatRef::new(gd, cout, n), MatRef::new(xv.data(), kk, n).t(), dw.data_mut(), T::zero());
                    } else {
                        let cols = im2col(xv, k, stride, pad);
                        matmul(MatRef::new(gd, cout, n), MatRef::new(&cols, kk, n).t(), dw.data_mut(), T::zero());
                    }
                    accumulate(grads, *w, dw);
                }
                if self.ng(*x) {
                    let mut dcols = vec![T::zero(); kk * n];
                    matmul(MatRef::new(wv.data(), cout, kk).t(), MatRef::new(gd, cout, n), &mut dcols, T::zero());
                    let dx = if pointwise {
                        Tensor::from_vec(xv.shape(), dcols).unwrap()
                    } else {
                        col2im(&dcols, xv.shape(), k, stride, pad)
                    };
                    accumulate(grads, *x, dx);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.ng(*b) {
                    let shape = g.shape();
                    let bshape = self.shape(*b);
                    let st = broadcast_index(shape, bshape).unwrap();
                    let mut db = Tensor::zeros(bshape);
                    let dd = db.data_mut();
                    let gd = g.data();
                    let mut i = 0;
                    for i0 in 0..shape[0] {
                        for i1 in 0..shape[1] {
                            for i2 in 0..shape[2] {
                                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                                for i3 in 0..shape[3] {
                                    let j = base + i3 * st[3];
                                    dd[j] = dd[j] + gd[i];
                                    i += 1;
                                }
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
                if self.ng(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::ScaleItems(a, s) => {
                if self.ng(*a) {
                    let [_, _, h, w] = g.shape();
                    accumulate(grads, *a, scale_items(&g, s, h * w));
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.scale(*s));
                }
            }
            Op::Silu(a) => {
                if self.ng(*a) {
                    let dx = self
                        .value(*a)
                        .zip_map(&g, |x, gy| {
                            let s = sigmoid(x);
                            gy * s * (T::one() + x * (T::one() - s))
                        })
                        .unwrap();
                    accumulate(grads, *a, dx);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xv = self.value(*x);
                let [c, b, h, w] = xv.shape();
                let cpg = c / groups;
                let plane = h * w;
                let count = T::from_usize(cpg * plane).unwrap();
                let xd = xv.data();
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let want_x = self.ng(*x);
                let mut dx = if want_x { Tensor::zeros(xv.shape()) } else { Tensor::zeros([0, 0, 0, 0]) };
                for bi in 0..b {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[bi * groups + gi];
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for ci in gi * cpg..(gi + 1) * cpg {
                            let off = (ci * b + bi) * plane;
                            let mut dgc = T::zero();
                            let mut dbc = T::zero();
                            for (&xv, &gy) in xd[off..off + plane].iter().zip(&gd[off..off + plane]) {
                                let xh = (xv - mean) * rstd;
                                dgc = dgc + gy * xh;
                                dbc = dbc + gy;
                                let dxh = gy * gam[ci];
                                sum_dxh = sum_dxh + dxh;
                                sum_dxh_xh = sum_dxh_xh + dxh * xh;
                            }
                            dgamma[ci] = dgamma[ci] + dgc;
                            dbeta[ci] = dbeta[ci] + dbc;
                        }
                        if want_x {
                            let m1 = sum_dxh / count;
                            let m2 = sum_dxh_xh / count;
                            let dd = dx.data_mut();
                            for ci in gi * cpg..(gi + 1) * cpg {
                                let off = (ci * b + bi) * plane;
                                for j in off..off + plane {
                                    let xh = (xd[j] - mean) * rstd;
                                    let dxh = gd[j] * gam[ci];
                                    dd[j] = rstd * (dxh - m1 - xh * m2);
                                }
                            }
                        }
                    }
                }
                if self.ng(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec([c, 1, 1, 1], dgamma).unwrap());
                }
                if self.ng(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec([c, 1, 1, 1], dbeta).unwrap());
                }
                if want_x {
                    accumulate(grads, *x, dx);
                }
            }
            Op::Concat0(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let na: usize = sa.iter().product();
                let gd = g.data();
                if self.ng(*a) {
                    accumulate(grads, *a, Tensor::from_vec(sa, gd[..na].to_vec()).unwrap());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, Tensor::from_vec(sb, gd[na..].to_vec()).unwrap());
                }
            }
            Op::Upsample2x(a) => {
                if self.ng(*a) {
                    let [c, b, h, w] = self.shape(*a);
                    let mut da = Tensor::zeros([c, b, h, w]);
                    let gd = g.data();
                    let dd = da.data_mut();
                    for p in 0..c * b {
                        let s = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let d = &mut dd[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                let j = (y / 2) * w + x / 2;
                                d[j] = d[j] + s[y * 2 * w + x];
                            }
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::Attention { q, k, v, probs } => {
                let [d, b, h, w] = self.shape(*q);
                let [_, _, l, _] = self.shape(*k);
                let [dv, _, _, _] = self.shape(*v);
                let nq = h * w;
                let scale = T::one() / T::from_usize(d).unwrap().sqrt();
                let qd = self.value(*q).data();
                let kd = self.value(*k).data();
                let vd = self.value(*v).data();
                let gd = g.data();
                let mut dq = Tensor::<T>::zeros([d, b, h, w]);
                let mut dk = Tensor::<T>::zeros([d, b, l, 1]);
                let mut dvt = Tensor::<T>::zeros([dv, b, l, 1]);
                let mut dp = vec![T::zero(); nq * l];
                for bi in 0..b {
                    let p = &probs[bi * nq * l..(bi + 1) * nq * l];
                    unsafe {
                        // dV_b[dv, l] = dO_b[dv, nq] P[nq, l]
                        T::gemm(
                            dv,
                            nq,
                            l,
                            T::one(),
                            gd.as_ptr().add(bi * nq),
                            (b * nq) as isize,
                            1,
                            p.as_ptr(),
                            l as isize,
                            1,
                            T::zero(),
                            dvt.data_mut().as_mut_ptr().add(bi * l),
                            (b * l) as isize,
                            1,
                        );
                        // dP[nq, l] = dO_b^T[nq, dv] V_b[dv, l]
                        T::gemm(
                            nq,
                            dv,
                            l,
                            T::one(),
                            gd.as_ptr().add(bi * nq),
                            1,
                            (b * nq) as isize,
                            vd.as_ptr().add(bi * l),
                            (b * l) as isize,
                            1,
                            T::zero(),
                            dp.as_mut_ptr(),
                            l as isize,
                            1,
                        );
                    }
                    // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
                    for (drow, prow) in dp.chunks_mut(l).zip(p.chunks(l)) {
                        let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (dv_, &pv) in drow.iter_mut().zip(prow) {
                            *dv_ = pv * (*dv_ - dot);
                        }
                    }
                    unsafe {
                        // dQ_b[d, nq] = scale * K_b[d, l] dS^T[l, nq]
                        T::gemm(
                            d,
                            l,
                            nq,
                            scale,
                            kd.as_ptr().add(bi * l),
                            (b * l) as isize,
                            1,
                            dp.as_ptr(),
                            1,
                            l as isize,
                            T::zero(),
                            dq.data_mut().as_mut_ptr().add(bi * nq),
                            (b * nq) as isize,
                            1,
                        );
                        // dK_b[d, l] = scale * Q_b[d, nq] dS[nq, l]
                        T::gemm(
                            d,
                            nq,
                            l,
                            scale,
                            qd.as_ptr().add(bi * nq),
                            (b * nq) as isize,
                            1,
                            dp.as_ptr(),
                            l as isize,
                            1,
                            T::zero(),
                            dk.data_mut().as_mut_ptr().add(bi * l),
                            (b * l) as isize,
                            1,
                        );
                    }
                }
                if self.ng(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.ng(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.ng(*v) {
                    accumulate(grads, *v, dvt);
                }
            }
            Op::Embedding { table, ids } => {
                if self.ng(*table) {
                    let shape = self.shape(*table);
                    let dim = shape[1];
                    let mut dt = Tensor::zeros(shape);
                    let dd = dt.data_mut();
                    let gd = g.data();
                    for (pos, &id) in ids.iter().enumerate() {
                        for dch in 0..dim {
                            dd[id * dim + dch] = dd[id * dim + dch] + gd[dch * ids.len() + pos];
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::PixelUnshuffle { x, r } => {
                if self.ng(*x) {
                    accumulate(grads, *x, pixel_shuffle_cnhw(&g, *r).unwrap());
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = T::from_usize(av.len()).unwrap();
                let c = g.data()[0] * (T::one() + T::one()) / n;
                let diff = av.zip_map(bv, |x, y| (x - y) * c).unwrap();
                if self.ng(*b) {
                    accumulate(grads, *b, diff.scale(-T::one()));
                }
                if self.ng(*a) {
                    accumulate(grads, *a, diff);
                }
            }
            Op::WeightedSum(a, w) => {
                if self.ng(*a) {
                    accumulate(grads, *a, w.scale(g.data()[0]));
                }
            }
        }
    }
}

/// Space-to-depth on a channel-major array.
pub fn pixel_unshuffle_cnhw<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [c, b, h, w] = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("spatial size {h}x{w} not divisible by unshuffle factor {r}")));
    }
    let (ho, wo) = (h / r, w / r);
    let mut out = Tensor::zeros([c * r * r, b, ho, wo]);
    let od = out.data_mut();
    let xd = x.data();
    for ci in 0..c {
        for i in 0..r {
            for j in 0..r {
                let oc = ci * r * r + i * r + j;
                for bi in 0..b {
                    let src = (ci * b + bi) * h * w;
                    let dst = (oc * b + bi) * ho * wo;
                    for y in 0..ho {
                        for xx in 0..wo {
                            od[dst + y * wo + xx] = xd[src + (y * r + i) * w + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depth-to-space, inverse of [`pixel_unshuffle_cnhw`].
pub fn pixel_shuffle_cnhw<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [cr, b, ho, wo] = x.shape();
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::Shape(format!("{cr} channels not divisible by {}", r * r)));
    }
    let c = cr / (r * r);
    let (h, w) = (ho * r, wo * r);
    let mut out = Tensor::zeros([c, b, h, w]);
    let od = out.data_mut();
    let xd = x.data();
    for ci in 0..c {
        for i in 0..r {
            for j in 0..r {
                let ic = ci * r * r + i * r + j;
                for bi in 0..b {
                    let src = (ic * b + bi) * ho * wo;
                    let dst = (ci * b + bi) * h * w;
                    for y in 0..ho {
                        for xx in 0..wo {
                            od[dst + (y * r + i) * w + xx * r + j] = xd[src + y * wo + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
