//! Reverse-mode differentiation tape covering exactly the op set the model
//! and losses use: linear maps, convolutions, layer norm, GELU, row softmax,
//! the two attention contractions, bilinear resize, concatenation and
//! elementwise arithmetic.
//!
//! A [`Tape`] is built per forward pass; `backward` walks the nodes in
//! reverse and accumulates gradients into per-node buffers. Everything is
//! generic over [`Real`] so the identical graph can be instantiated in f64
//! for finite-difference verification.

use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a dense 2-D convolution over a `[H*W, C]` token raster.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Scale(usize, T),
    /// x [N,K] · w [K,M] + b [M]
    Linear { x: usize, w: usize, b: usize },
    /// im2col convolution; weight [cout, cin*k*k], bias [cout]
    Conv2d { x: usize, w: usize, b: usize, spec: Conv2dSpec },
    /// 3x3 depthwise, stride 1, pad 1; weight [C, 9], bias [C]
    DwConv3x3 { x: usize, w: usize, b: usize, h: usize, wd: usize },
    /// per-row normalization over the channel axis; gamma/beta [C]
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: T },
    Gelu(usize),
    /// softmax over the last axis of a [rows, cols] view
    SoftmaxRows(usize),
    /// scores[h*N+i][j] = scale * sum_d q[i, h*dh+d] * k[j, h*dh+d]
    AttnScores { q: usize, k: usize, heads: usize, scale: T },
    /// out[i][h*dh+d] = sum_j a[h*N+i][j] * v[j, h*dh+d]
    AttnApply { a: usize, v: usize, heads: usize },
    /// align_corners = false
    Bilinear { x: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    /// column-wise concatenation of [N, C_i] parts
    ConcatCols(Vec<usize>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape());
        let (n, k) = (xs[0], xs[1]);
        let (wk, m) = (ws[0], ws[1]);
        assert_eq!(k, wk, "linear: x cols {k} vs w rows {wk}");
        assert_eq!(self.nodes[b.0].value.numel(), m, "linear bias length");
        let mut out = vec![T::zero(); n * m];
        matmul_acc(self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), &mut out, n, k, m);
        let bias = self.nodes[b.0].value.data();
        for row in out.chunks_exact_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        self.push(Tensor::new(vec![n, m], out), Op::Linear { x: x.0, w: w.0, b: b.0 })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Var {
        let xs = self.nodes[x.0].value.shape();
        assert_eq!(xs, [spec.in_h * spec.in_w, spec.cin], "conv2d input shape");
        let patch = spec.cin * spec.kernel * spec.kernel;
        assert_eq!(self.nodes[w.0].value.shape(), [spec.cout, patch], "conv2d weight shape");
        assert!(
            spec.in_h + 2 * spec.pad >= spec.kernel && spec.in_w + 2 * spec.pad >= spec.kernel,
            "conv2d input smaller than kernel after padding"
        );
        let cols = im2col(self.nodes[x.0].value.data(), &spec);
        let (n, m) = (spec.out_h() * spec.out_w(), spec.cout);
        let mut out = vec![T::zero(); n * m];
        matmul_bt_acc(&cols, self.nodes[w.0].value.data(), &mut out, n, patch, m);
        let bias = self.nodes[b.0].value.data();
        for row in out.chunks_exact_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        self.push(Tensor::new(vec![n, m], out), Op::Conv2d { x: x.0, w: w.0, b: b.0, spec })
    }

    pub fn dwconv3x3(&mut self, x: Var, w: Var, b: Var, h: usize, wd: usize) -> Var {
        let c = self.nodes[x.0].value.shape()[1];
        assert_eq!(self.nodes[x.0].value.shape()[0], h * wd, "dwconv raster size");
        assert_eq!(self.nodes[w.0].value.shape(), [c, 9], "dwconv weight shape");
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); h * wd * c];
        for y in 0..h {
            for xx in 0..wd {
                let obase = (y * wd + xx) * c;
                for (tap, (dy, dx)) in NEIGH_3X3.iter().enumerate() {
                    let (sy, sx) = (y as isize + dy, xx as isize + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                        continue;
                    }
                    let ibase = (sy as usize * wd + sx as usize) * c;
                    for ch in 0..c {
                        out[obase + ch] = out[obase + ch] + xv[ibase + ch] * wv[ch * 9 + tap];
                    }
                }
                for ch in 0..c {
                    out[obase + ch] = out[obase + ch] + bv[ch];
                }
            }
        }
        self.push(Tensor::new(vec![h * wd, c], out), Op::DwConv3x3 { x: x.0, w: w.0, b: b.0, h, wd })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let c = shape[1];
        assert_eq!(self.nodes[gamma.0].value.numel(), c);
        assert_eq!(self.nodes[beta.0].value.numel(), c);
        let g = self.nodes[gamma.0].value.data();
        let be = self.nodes[beta.0].value.data();
        let mut out = Vec::with_capacity(self.nodes[x.0].value.numel());
        for row in self.nodes[x.0].value.data().chunks_exact(c) {
            let (mean, rstd) = row_moments(row, eps);
            for (i, &v) in row.iter().enumerate() {
                out.push((v - mean) * rstd * g[i] + be[i]);
            }
        }
        self.push(Tensor::new(shape, out), Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(gelu_tanh);
        self.push(out, Op::Gelu(x.0))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let cols = shape[1];
        let mut out = self.nodes[x.0].value.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(Tensor::new(shape, out), Op::SoftmaxRows(x.0))
    }

    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize, scale: T) -> Var {
        let (n, c) = dims2(self.nodes[q.0].value.shape());
        let (nr, ck) = dims2(self.nodes[k.0].value.shape());
        assert_eq!(c, ck, "attn q/k channel mismatch");
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        let dh = c / heads;
        let qv = self.nodes[q.0].value.data();
        let kv = self.nodes[k.0].value.data();
        let mut out = vec![T::zero(); heads * n * nr];
        for hd in 0..heads {
            for i in 0..n {
                let qrow = &qv[i * c + hd * dh..i * c + (hd + 1) * dh];
                let orow = &mut out[(hd * n + i) * nr..(hd * n + i + 1) * nr];
                for (j, o) in orow.iter_mut().enumerate() {
                    let krow = &kv[j * c + hd * dh..j * c + (hd + 1) * dh];
                    let mut acc = T::zero();
                    for (&a, &b) in qrow.iter().zip(krow) {
                        acc = acc + a * b;
                    }
                    *o = acc * scale;
                }
            }
        }
        self.push(Tensor::new(vec![heads * n, nr], out), Op::AttnScores { q: q.0, k: k.0, heads, scale })
    }

    pub fn attn_apply(&mut self, a: Var, v: Var, heads: usize) -> Var {
        let (hn, nr) = dims2(self.nodes[a.0].value.shape());
        let (nrv, c) = dims2(self.nodes[v.0].value.shape());
        assert_eq!(nr, nrv, "attn weights/value token mismatch");
        assert_eq!(hn % heads, 0);
        let n = hn / heads;
        let dh = c / heads;
        let av = self.nodes[a.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut out = vec![T::zero(); n * c];
        for hd in 0..heads {
            for i in 0..n {
                let arow = &av[(hd * n + i) * nr..(hd * n + i + 1) * nr];
                for (j, &aw) in arow.iter().enumerate() {
                    let vrow = &vv[j * c + hd * dh..j * c + (hd + 1) * dh];
                    let orow = &mut out[i * c + hd * dh..i * c + (hd + 1) * dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o = *o + aw * x;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![n, c], out), Op::AttnApply { a: a.0, v: v.0, heads })
    }

    pub fn bilinear_resize(&mut self, x: Var, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Var {
        let (n, c) = dims2(self.nodes[x.0].value.shape());
        assert_eq!(n, in_h * in_w, "bilinear input raster size");
        let ty = axis_taps::<T>(in_h, out_h);
        let tx = axis_taps::<T>(in_w, out_w);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); out_h * out_w * c];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let obase = (oy * out_w + ox) * c;
                let one = T::one();
                let taps = [
                    (y0 * in_w + x0, (one - fy) * (one - fx)),
                    (y0 * in_w + x1, (one - fy) * fx),
                    (y1 * in_w + x0, fy * (one - fx)),
                    (y1 * in_w + x1, fy * fx),
                ];
                for (src, wgt) in taps {
                    if wgt == T::zero() {
                        continue;
                    }
                    let ibase = src * c;
                    for ch in 0..c {
                        out[obase + ch] = out[obase + ch] + xv[ibase + ch] * wgt;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![out_h * out_w, c], out),
            Op::Bilinear { x: x.0, in_h, in_w, out_h, out_w },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.shape()[0];
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.shape()[1]).sum();
        let mut out = vec![T::zero(); n * total];
        let mut offset = 0;
        for p in parts {
            let (pn, pc) = dims2(self.nodes[p.0].value.shape());
            assert_eq!(pn, n, "concat row count mismatch");
            let pv = self.nodes[p.0].value.data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + pc]
                    .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        self.push(Tensor::new(vec![n, total], out), Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Propagate `seed` (d loss / d root) back to every reachable node.
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.nodes[root.0].value.shape(), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].is_none() || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = grads[idx].take().expect("checked above");
            self.backprop_node(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gv = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, self.nodes[*a].value.shape(), |buf| {
                    for (o, &x) in buf.iter_mut().zip(gv) {
                        *o = *o + x;
                    }
                });
                accumulate(grads, *b, self.nodes[*b].value.shape(), |buf| {
                    for (o, &x) in buf.iter_mut().zip(gv) {
                        *o = *o + x;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, self.nodes[*a].value.shape(), |buf| {
                    for (o, &x) in buf.iter_mut().zip(gv) {
                        *o = *o + x * s;
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, k) = dims2(self.nodes[*x].value.shape());
                let m = self.nodes[*w].value.shape()[1];
                let xv = self.nodes[*x].value.data();
                let wv = self.nodes[*w].value.data();
                accumulate(grads, *x, &[n, k], |buf| matmul_bt_acc(gv, wv, buf, n, m, k));
                accumulate(grads, *w, &[k, m], |buf| matmul_at_acc(xv, gv, buf, n, k, m));
                accumulate(grads, *b, &[m], |buf| {
                    for row in gv.chunks_exact(m) {
                        for (o, &x) in buf.iter_mut().zip(row) {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, spec } => {
                let patch = spec.cin * spec.kernel * spec.kernel;
                let n = spec.out_h() * spec.out_w();
                let m = spec.cout;
                let cols = im2col(self.nodes[*x].value.data(), spec);
                let wv = self.nodes[*w].value.data();
                accumulate(grads, *w, &[m, patch], |buf| matmul_at_acc(gv, &cols, buf, n, m, patch));
                accumulate(grads, *b, &[m], |buf| {
                    for row in gv.chunks_exact(m) {
                        for (o, &x) in buf.iter_mut().zip(row) {
                            *o = *o + x;
                        }
                    }
                });
                let mut dcols = vec![T::zero(); n * patch];
                matmul_acc(gv, wv, &mut dcols, n, m, patch);
                accumulate(grads, *x, &[spec.in_h * spec.in_w, spec.cin], |buf| {
                    col2im_acc(&dcols, buf, spec)
                });
            }
            Op::DwConv3x3 { x, w, b, h, wd } => {
                let (h, wd) = (*h, *wd);
                let c = self.nodes[*x].value.shape()[1];
                let xv = self.nodes[*x].value.data();
                let wv = self.nodes[*w].value.data();
                accumulate(grads, *x, &[h * wd, c], |buf| {
                    for y in 0..h {
                        for xx in 0..wd {
                            let obase = (y * wd + xx) * c;
                            for (tap, (dy, dx)) in NEIGH_3X3.iter().enumerate() {
                                let (sy, sx) = (y as isize + dy, xx as isize + dx);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let ibase = (sy as usize * wd + sx as usize) * c;
                                for ch in 0..c {
                                    buf[ibase + ch] =
                                        buf[ibase + ch] + gv[obase + ch] * wv[ch * 9 + tap];
                                }
                            }
                        }
                    }
                });
                accumulate(grads, *w, &[c, 9], |buf| {
                    for y in 0..h {
                        for xx in 0..wd {
                            let obase = (y * wd + xx) * c;
                            for (tap, (dy, dx)) in NEIGH_3X3.iter().enumerate() {
                                let (sy, sx) = (y as isize + dy, xx as isize + dx);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let ibase = (sy as usize * wd + sx as usize) * c;
                                for ch in 0..c {
                                    buf[ch * 9 + tap] =
                                        buf[ch * 9 + tap] + gv[obase + ch] * xv[ibase + ch];
                                }
                            }
                        }
                    }
                });
                accumulate(grads, *b, &[c], |buf| {
                    for row in gv.chunks_exact(c) {
                        for (o, &x) in buf.iter_mut().zip(row) {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let c = self.nodes[*x].value.shape()[1];
                let rows = self.nodes[*x].value.shape()[0];
                let xv = self.nodes[*x].value.data();
                let gam = self.nodes[*gamma].value.data();
                let cn = T::from_f64(c as f64);
                accumulate(grads, *x, &[rows, c], |buf| {
                    for r in 0..rows {
                        let row = &xv[r * c..(r + 1) * c];
                        let grow = &gv[r * c..(r + 1) * c];
                        let (mean, rstd) = row_moments(row, *eps);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for i in 0..c {
                            let xhat = (row[i] - mean) * rstd;
                            let dxhat = grow[i] * gam[i];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        for i in 0..c {
                            let xhat = (row[i] - mean) * rstd;
                            let dxhat = grow[i] * gam[i];
                            buf[r * c + i] = buf[r * c + i]
                                + rstd * (dxhat - sum_dxhat / cn - xhat * sum_dxhat_xhat / cn);
                        }
                    }
                });
                accumulate(grads, *gamma, &[c], |buf| {
                    for r in 0..rows {
                        let row = &xv[r * c..(r + 1) * c];
                        let grow = &gv[r * c..(r + 1) * c];
                        let (mean, rstd) = row_moments(row, *eps);
                        for i in 0..c {
                            buf[i] = buf[i] + grow[i] * (row[i] - mean) * rstd;
                        }
                    }
                });
                accumulate(grads, *beta, &[c], |buf| {
                    for row in gv.chunks_exact(c) {
                        for (o, &x) in buf.iter_mut().zip(row) {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.nodes[*x].value.data();
                accumulate(grads, *x, self.nodes[*x].value.shape(), |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o = *o + gv[i] * gelu_tanh_grad(xv[i]);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let cols = self.nodes[idx].value.shape()[1];
                let yv = self.nodes[idx].value.data();
                accumulate(grads, *x, self.nodes[*x].value.shape(), |buf| {
                    for (r, (yrow, grow)) in yv.chunks_exact(cols).zip(gv.chunks_exact(cols)).enumerate() {
                        let dot: T = yrow.iter().zip(grow).map(|(&y, &d)| y * d).sum();
                        for i in 0..cols {
                            buf[r * cols + i] = buf[r * cols + i] + yrow[i] * (grow[i] - dot);
                        }
                    }
                });
            }
            Op::AttnScores { q, k, heads, scale } => {
                let (n, c) = dims2(self.nodes[*q].value.shape());
                let nr = self.nodes[*k].value.shape()[0];
                let dh = c / heads;
                let qv = self.nodes[*q].value.data();
                let kv = self.nodes[*k].value.data();
                let scale = *scale;
                accumulate(grads, *q, &[n, c], |buf| {
                    for hd in 0..*heads {
                        for i in 0..n {
                            let grow = &gv[(hd * n + i) * nr..(hd * n + i + 1) * nr];
                            for (j, &gval) in grow.iter().enumerate() {
                                if gval == T::zero() {
                                    continue;
                                }
                                let krow = &kv[j * c + hd * dh..j * c + (hd + 1) * dh];
                                let qdst = &mut buf[i * c + hd * dh..i * c + (hd + 1) * dh];
                                for (o, &x) in qdst.iter_mut().zip(krow) {
                                    *o = *o + gval * scale * x;
                                }
                            }
                        }
                    }
                });
                accumulate(grads, *k, &[nr, c], |buf| {
                    for hd in 0..*heads {
                        for i in 0..n {
                            let grow = &gv[(hd * n + i) * nr..(hd * n + i + 1) * nr];
                            let qrow = &qv[i * c + hd * dh..i * c + (hd + 1) * dh];
                            for (j, &gval) in grow.iter().enumerate() {
                                if gval == T::zero() {
                                    continue;
                                }
                                let kdst = &mut buf[j * c + hd * dh..j * c + (hd + 1) * dh];
                                for (o, &x) in kdst.iter_mut().zip(qrow) {
                                    *o = *o + gval * scale * x;
                                }
                            }
                        }
                    }
                });
            }
            Op::AttnApply { a, v, heads } => {
                let (hn, nr) = dims2(self.nodes[*a].value.shape());
                let c = self.nodes[*v].value.shape()[1];
                let n = hn / heads;
                let dh = c / heads;
                let av = self.nodes[*a].value.data();
                let vv = self.nodes[*v].value.data();
                accumulate(grads, *a, &[hn, nr], |buf| {
                    for hd in 0..*heads {
                        for i in 0..n {
                            let grow = &gv[i * c + hd * dh..i * c + (hd + 1) * dh];
                            let adst = &mut buf[(hd * n + i) * nr..(hd * n + i + 1) * nr];
                            for (j, o) in adst.iter_mut().enumerate() {
                                let vrow = &vv[j * c + hd * dh..j * c + (hd + 1) * dh];
                                let mut acc = T::zero();
                                for (&gx, &vx) in grow.iter().zip(vrow) {
                                    acc = acc + gx * vx;
                                }
                                *o = *o + acc;
                            }
                        }
                    }
                });
                accumulate(grads, *v, &[nr, c], |buf| {
                    for hd in 0..*heads {
                        for i in 0..n {
                            let grow = &gv[i * c + hd * dh..i * c + (hd + 1) * dh];
                            let arow = &av[(hd * n + i) * nr..(hd * n + i + 1) * nr];
                            for (j, &aw) in arow.iter().enumerate() {
                                if aw == T::zero() {
                                    continue;
                                }
                                let vdst = &mut buf[j * c + hd * dh..j * c + (hd + 1) * dh];
                                for (o, &gx) in vdst.iter_mut().zip(grow) {
                                    *o = *o + aw * gx;
                                }
                            }
                        }
                    }
                });
            }
            Op::Bilinear { x, in_h, in_w, out_h, out_w } => {
                let c = self.nodes[*x].value.shape()[1];
                let ty = axis_taps::<T>(*in_h, *out_h);
                let tx = axis_taps::<T>(*in_w, *out_w);
                accumulate(grads, *x, &[in_h * in_w, c], |buf| {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let obase = (oy * out_w + ox) * c;
                            let one = T::one();
                            let taps = [
                                (y0 * in_w + x0, (one - fy) * (one - fx)),
                                (y0 * in_w + x1, (one - fy) * fx),
                                (y1 * in_w + x0, fy * (one - fx)),
                                (y1 * in_w + x1, fy * fx),
                            ];
                            for (src, wgt) in taps {
                                if wgt == T::zero() {
                                    continue;
                                }
                                let ibase = src * c;
                                for ch in 0..c {
                                    buf[ibase + ch] = buf[ibase + ch] + gv[obase + ch] * wgt;
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[idx].value.shape()[0];
                let total = self.nodes[idx].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.shape()[1];
                    accumulate(grads, p, &[n, pc], |buf| {
                        for i in 0..n {
                            let src = &gv[i * total + offset..i * total + offset + pc];
                            for (o, &x) in buf[i * pc..(i + 1) * pc].iter_mut().zip(src) {
                                *o = *o + x;
                            }
                        }
                    });
                    offset += pc;
                }
            }
        }
    }
}

const NEIGH_3X3: [(isize, isize); 9] = [
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 0), (0, 1),
    (1, -1), (1, 0), (1, 1),
];

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected 2-D tensor, got {shape:?}");
    (shape[0], shape[1])
}

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    node: usize,
    shape: &[usize],
    f: impl FnOnce(&mut [T]),
) {
    let entry = grads[node].get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(entry.data_mut());
}

fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().cloned().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, (var + eps).sqrt().recip())
}

/// Tanh-form GELU used throughout; the backward pass differentiates this
/// exact expression, not the erf form.
pub fn gelu_tanh<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_tanh_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Per-axis source taps for align-corners=false bilinear sampling:
/// (low index, high index, fraction toward high).
fn axis_taps<T: Real>(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, T)> {
    let ratio = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_dim - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_dim - 1);
            (lo, hi, T::from_f64(src - lo as f64))
        })
        .collect()
}

fn im2col<T: Real>(x: &[T], spec: &Conv2dSpec) -> Vec<T> {
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let patch = spec.cin * spec.kernel * spec.kernel;
    let mut cols = vec![T::zero(); oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * patch;
            for ky in 0..spec.kernel {
                let sy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                if sy < 0 || sy >= spec.in_h as isize {
                    continue;
                }
                for kx in 0..spec.kernel {
                    let sx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if sx < 0 || sx >= spec.in_w as isize {
                        continue;
                    }
                    let src = (sy as usize * spec.in_w + sx as usize) * spec.cin;
                    let dst = base + (ky * spec.kernel + kx) * spec.cin;
                    cols[dst..dst + spec.cin].copy_from_slice(&x[src..src + spec.cin]);
                }
            }
        }
    }
    cols
}

fn col2im_acc<T: Real>(dcols: &[T], dx: &mut [T], spec: &Conv2dSpec) {
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let patch = spec.cin * spec.kernel * spec.kernel;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * patch;
            for ky in 0..spec.kernel {
                let sy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                if sy < 0 || sy >= spec.in_h as isize {
                    continue;
                }
                for kx in 0..spec.kernel {
                    let sx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if sx < 0 || sx >= spec.in_w as isize {
                        continue;
                    }
                    let dst = (sy as usize * spec.in_w + sx as usize) * spec.cin;
                    let src = base + (ky * spec.kernel + kx) * spec.cin;
                    for c in 0..spec.cin {
                        dx[dst + c] = dx[dst + c] + dcols[src + c];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central finite differences of a scalar-valued graph builder with
    /// respect to one leaf tensor; compares against tape gradients.
    fn check_grad(
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        leaves: Vec<Tensor<f64>>,
        tol: f64,
    ) {
        let scalarize = |tape: &Tape<f64>, out: Var| -> f64 {
            // Weighted sum makes the seed non-uniform so asymmetries show up.
            tape.value(out)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (0.3 + 0.1 * i as f64))
                .sum()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let seed_data: Vec<f64> =
            (0..tape.value(out).numel()).map(|i| 0.3 + 0.1 * i as f64).collect();
        let seed = Tensor::new(tape.value(out).shape().to_vec(), seed_data);
        let grads = tape.backward(out, seed);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).expect("leaf should receive gradient");
            for ei in (0..leaf.numel()).step_by(1 + leaf.numel() / 7) {
                let run = |delta: f64| -> f64 {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == li {
                                t.data_mut()[ei] += delta;
                            }
                            tape.leaf(t)
                        })
                        .collect();
                    let out = build(&mut tape, &vars);
                    scalarize(&tape, out)
                };
                let fd = (run(h) - run(-h)) / (2.0 * h);
                let an = analytic.data()[ei];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom <= tol,
                    "leaf {li} elem {ei}: finite-diff {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            randn(&mut rng, vec![5, 4]),
            randn(&mut rng, vec![4, 3]),
            randn(&mut rng, vec![3]),
        ];
        check_grad(|t, v| t.linear(v[0], v[1], v[2]), leaves, 1e-6);
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = Conv2dSpec { in_h: 6, in_w: 5, cin: 2, cout: 3, kernel: 3, stride: 2, pad: 1 };
        let leaves = vec![
            randn(&mut rng, vec![30, 2]),
            randn(&mut rng, vec![3, 18]),
            randn(&mut rng, vec![3]),
        ];
        check_grad(move |t, v| t.conv2d(v[0], v[1], v[2], spec), leaves, 1e-6);
    }

    #[test]
    fn conv2d_shape_arithmetic() {
        // floor((64+6-7)/4)+1 = 16 and floor((16+2-3)/2)+1 = 8
        let s1 = Conv2dSpec { in_h: 64, in_w: 64, cin: 3, cout: 8, kernel: 7, stride: 4, pad: 3 };
        assert_eq!((s1.out_h(), s1.out_w()), (16, 16));
        let s2 = Conv2dSpec { in_h: 16, in_w: 16, cin: 8, cout: 16, kernel: 3, stride: 2, pad: 1 };
        assert_eq!((s2.out_h(), s2.out_w()), (8, 8));
    }

    #[test]
    fn dwconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            randn(&mut rng, vec![12, 2]),
            randn(&mut rng, vec![2, 9]),
            randn(&mut rng, vec![2]),
        ];
        check_grad(|t, v| t.dwconv3x3(v[0], v[1], v[2], 3, 4), leaves, 1e-6);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![
            randn(&mut rng, vec![4, 6]),
            randn(&mut rng, vec![6]),
            randn(&mut rng, vec![6]),
        ];
        check_grad(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6), leaves, 1e-5);
    }

    #[test]
    fn gelu_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![randn(&mut rng, vec![3, 5])];
        check_grad(
            |t, v| {
                let g = t.gelu(v[0]);
                t.softmax_rows(g)
            },
            leaves,
            1e-5,
        );
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let leaves = vec![
            randn(&mut rng, vec![4, 6]), // q: 4 tokens, 2 heads x 3
            randn(&mut rng, vec![3, 6]), // k
            randn(&mut rng, vec![3, 6]), // v
        ];
        check_grad(
            |t, v| {
                let s = t.attn_scores(v[0], v[1], 2, 0.577);
                let a = t.softmax_rows(s);
                t.attn_apply(a, v[2], 2)
            },
            leaves,
            1e-5,
        );
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let q = randn(&mut rng, vec![9, 8]);
        let k = randn(&mut rng, vec![4, 8]);
        let qv = tape.leaf(q);
        let kv = tape.leaf(k);
        let s = tape.attn_scores(qv, kv, 2, 0.5);
        let a = tape.softmax_rows(s);
        for row in tape.value(a).data().chunks_exact(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn bilinear_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let leaves = vec![randn(&mut rng, vec![6, 2]), randn(&mut rng, vec![12, 3])];
        check_grad(
            |t, v| {
                let up = t.bilinear_resize(v[0], 2, 3, 3, 4);
                t.concat_cols(&[up, v[1]])
            },
            leaves,
            1e-6,
        );
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = randn(&mut rng, vec![12, 2]);
        let xv = tape.leaf(x.clone());
        let y = tape.bilinear_resize(xv, 3, 4, 3, 4);
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn add_scale_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let leaves = vec![randn(&mut rng, vec![4, 3]), randn(&mut rng, vec![4, 3])];
        check_grad(
            |t, v| {
                let s = t.scale(v[0], 1.7);
                t.add(s, v[1])
            },
            leaves,
            1e-6,
        );
    }
}
