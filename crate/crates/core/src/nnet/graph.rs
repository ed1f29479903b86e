//! Tape of tensor operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node after all of its consumers. Convolution weights live
//! outside the tape in a parameter slice; [`Graph::backward`] returns their
//! gradients in the same layout.

use super::tensor::{Scalar, Tensor};

pub(crate) type NodeId = usize;

enum Op {
    Input,
    /// `k x k` convolution, stride 1, zero padding `k / 2`.
    Conv {
        x: NodeId,
        w: usize,
        b: usize,
        k: usize,
    },
    Relu(NodeId),
    /// 2x2 max-pool, stride 2; `argmax` holds the flat input index of each
    /// output's winner.
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    /// Nearest-neighbour 2x upsampling.
    Upsample(NodeId),
    /// Channel concatenation.
    Concat(NodeId, NodeId),
    Sigmoid(NodeId),
}

pub(crate) struct Graph<'p, S: Scalar> {
    params: &'p [Tensor<S>],
    nodes: Vec<(Tensor<S>, Op)>,
}

/// Unfolds one `[c, h, w]` item into `[c * k * k, h * w]` patch columns.
fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize, cols: &mut [S]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(S::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // Valid output columns: 0 <= x + dx < w.
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    out[..x0].fill(S::zero());
                    out[x1..].fill(S::zero());
                    for x in x0..x1 {
                        out[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients into `dx`.
fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, k: usize, dx: &mut [S]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let ddx = kx as isize - pad;
                let ddy = ky as isize - pad;
                for y in 0..h {
                    let sy = y as isize + ddy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ddx).max(0) as usize;
                    let x1 = (w as isize - ddx).min(w as isize) as usize;
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in x0..x1 {
                        let t = &mut dst[(x as isize + ddx) as usize];
                        *t = *t + row[y * w + x];
                    }
                }
            }
        }
    }
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p [Tensor<S>]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op) -> NodeId {
        self.nodes.push((value, op));
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].0
    }

    pub fn input(&mut self, x: Tensor<S>) -> NodeId {
        self.push(x, Op::Input)
    }

    pub fn conv(&mut self, x: NodeId, w: usize, b: usize) -> NodeId {
        let [n, c, h, wd] = self.value(x).shape();
        let [co, ci, k, k2] = self.params[w].shape();
        assert!(
            ci == c && k == k2 && k % 2 == 1,
            "conv weight {:?} vs input {:?}",
            self.params[w].shape(),
            [n, c, h, wd]
        );
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = vec![S::zero(); n * co * hw];
        let mut cols = if k == 1 {
            Vec::new()
        } else {
            vec![S::zero(); ckk * hw]
        };
        let weights = self.params[w].data();
        let bias = self.params[b].data();
        for i in 0..n {
            let o = &mut out[i * co * hw..(i + 1) * co * hw];
            for (ch, bv) in bias.iter().enumerate() {
                o[ch * hw..(ch + 1) * hw].fill(*bv);
            }
            let xi = self.value(x).item(i);
            let src: &[S] = if k == 1 {
                xi
            } else {
                im2col(xi, c, h, wd, k, &mut cols);
                &cols
            };
            S::gemm(co, ckk, hw, weights, false, src, false, S::one(), o);
        }
        let t = Tensor::new([n, co, h, wd], out).expect("conv output shape");
        self.push(t, Op::Conv { x, w, b, k })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| if a > S::zero() { a } else { S::zero() })
            .collect();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        self.push(t, Op::Relu(x))
    }

    pub fn maxpool(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = v.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let t = Tensor::new([n, c, oh, ow], out).expect("pool shape");
        self.push(t, Op::MaxPool { x, argmax })
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in v.data().chunks(h * w) {
            for y in 0..oh {
                for x in 0..ow {
                    out.push(plane[(y / 2) * w + x / 2]);
                }
            }
        }
        let t = Tensor::new([n, c, oh, ow], out).expect("upsample shape");
        self.push(t, Op::Upsample(x))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = va.shape();
        let [nb, cb, hb, wb] = vb.shape();
        assert!(
            n == nb && h == hb && w == wb,
            "concat {:?} with {:?}",
            va.shape(),
            vb.shape()
        );
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(va.item(i));
            out.extend_from_slice(vb.item(i));
        }
        let t = Tensor::new([n, ca + cb, h, w], out).expect("concat shape");
        self.push(t, Op::Concat(a, b))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| S::one() / (S::one() + (-a).exp()))
            .collect();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        self.push(t, Op::Sigmoid(x))
    }

    /// Gradients of a scalar objective with respect to every parameter,
    /// given its gradient `dout` with respect to node `out`.
    pub fn backward(&self, out: NodeId, dout: Vec<S>) -> Vec<Tensor<S>> {
        let mut pgrads: Vec<Tensor<S>> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(dout.len(), self.value(out).len());
        grads[out] = Some(dout);
        let zeros = |id: NodeId, nodes: &[(Tensor<S>, Op)]| vec![S::zero(); nodes[id].0.len()];
        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].1 {
                Op::Input => {}
                Op::Relu(x) => {
                    let y = self.value(id).data();
                    let dx = grads[*x].get_or_insert_with(|| zeros(*x, &self.nodes));
                    for ((d, &gi), &yi) in dx.iter_mut().zip(&g).zip(y) {
                        if yi > S::zero() {
                            *d = *d + gi;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = self.value(id).data();
                    let dx = grads[*x].get_or_insert_with(|| zeros(*x, &self.nodes));
                    for ((d, &gi), &yi) in dx.iter_mut().zip(&g).zip(y) {
                        *d = *d + gi * yi * (S::one() - yi);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let dx = grads[*x].get_or_insert_with(|| zeros(*x, &self.nodes));
                    for (&gi, &src) in g.iter().zip(argmax) {
                        dx[src as usize] = dx[src as usize] + gi;
                    }
                }
                Op::Upsample(x) => {
                    let [_, _, h, w] = self.value(*x).shape();
                    let ow = 2 * w;
                    let dx = grads[*x].get_or_insert_with(|| zeros(*x, &self.nodes));
                    for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                        for (oy, row) in gp.chunks(ow).enumerate() {
                            for (ox, &gi) in row.iter().enumerate() {
                                let t = &mut plane[(oy / 2) * w + ox / 2];
                                *t = *t + gi;
                            }
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).item(0).len();
                    let nb = self.value(*b).item(0).len();
                    {
                        let da = grads[*a].get_or_insert_with(|| zeros(*a, &self.nodes));
                        for (i, chunk) in g.chunks(na + nb).enumerate() {
                            for (d, &gi) in da[i * na..(i + 1) * na].iter_mut().zip(&chunk[..na]) {
                                *d = *d + gi;
                            }
                        }
                    }
                    let db = grads[*b].get_or_insert_with(|| zeros(*b, &self.nodes));
                    for (i, chunk) in g.chunks(na + nb).enumerate() {
                        for (d, &gi) in db[i * nb..(i + 1) * nb].iter_mut().zip(&chunk[na..]) {
                            *d = *d + gi;
                        }
                    }
                }
                Op::Conv { x, w, b, k } => {
                    let (x, w, b, k) = (*x, *w, *b, *k);
                    let [n, c, h, wd] = self.value(x).shape();
                    let co = self.params[w].shape()[0];
                    let hw = h * wd;
                    let ckk = c * k * k;
                    let weights = self.params[w].data();
                    let mut cols = if k == 1 {
                        Vec::new()
                    } else {
                        vec![S::zero(); ckk * hw]
                    };
                    let mut dcols = vec![S::zero(); ckk * hw];
                    let dx = grads[x].get_or_insert_with(|| zeros(x, &self.nodes));
                    for i in 0..n {
                        let gi = &g[i * co * hw..(i + 1) * co * hw];
                        {
                            let db = pgrads[b].data_mut();
                            for (ch, d) in db.iter_mut().enumerate() {
                                *d = gi[ch * hw..(ch + 1) * hw]
                                    .iter()
                                    .fold(*d, |acc, &v| acc + v);
                            }
                        }
                        let xi = self.value(x).item(i);
                        let src: &[S] = if k == 1 {
                            xi
                        } else {
                            im2col(xi, c, h, wd, k, &mut cols);
                            &cols
                        };
                        // dW += dOut * cols^T
                        S::gemm(
                            co,
                            hw,
                            ckk,
                            gi,
                            false,
                            src,
                            true,
                            S::one(),
                            pgrads[w].data_mut(),
                        );
                        let dxi = &mut dx[i * c * hw..(i + 1) * c * hw];
                        if k == 1 {
                            // dX += W^T * dOut
                            S::gemm(ckk, co, hw, weights, true, gi, false, S::one(), dxi);
                        } else {
                            S::gemm(ckk, co, hw, weights, true, gi, false, S::zero(), &mut dcols);
                            col2im(&dcols, c, h, wd, k, dxi);
                        }
                    }
                }
            }
        }
        pgrads
    }
}
