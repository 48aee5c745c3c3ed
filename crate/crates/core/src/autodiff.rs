//! Minimal reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse. Only the operations the glyph model needs are
//! provided. Image tensors are `[N, C, H, W]`, matrices are `[rows, cols]`.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use libm::{expf, sqrtf};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Min,
}

const NORM_EPS: f32 = 1e-5;
const BLUR: [f32; 3] = [0.25, 0.5, 0.25];

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv3x3 { x: Var, w: Var, b: Var },
    ConvT2x2 { x: Var, w: Var, b: Var },
    HyperConvT2x2 { x: Var, h: Var, group: Vec<usize>, cout: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    InstanceNorm { x: Var, inv_std: Vec<f32> },
    BlurPool { x: Var },
    SetPool { x: Var, source: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    ConcatTiled { x: Var, v: Var },
    SliceCols { x: Var, start: usize },
    Reshape { x: Var },
    Reparam { mu: Var, logvar: Var, eta: Vec<f32> },
    KlSum { mu: Var, logvar: Var },
    Precomputed { inputs: Vec<(Var, Tensor)> },
    WeightedSum { terms: Vec<(Var, f32)> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Recorded forward pass. Parameters are borrowed, not copied.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

// C (m x n) = A (m x k) * B (k x n) + beta * C, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, rs: usize, cc: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(a.len() > last(m, rsa, k, csa));
        assert!(b.len() > last(k, rsb, n, csb));
    }
    assert!(c.len() > last(m, rsc, n, csc));
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(x: &[f32], c: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, x: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// `x [N, in] -> x W^T + b`, with `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, din) = (xv.dim(0), xv.len() / xv.dim(0));
        let dout = wv.dim(0);
        assert_eq!(wv.len(), dout * din, "linear weight shape");
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm(n, din, dout, xv.data(), din, 1, wv.data(), 1, din, 1.0, &mut out, dout, 1);
        let t = Tensor::from_vec(&[n, dout], out).unwrap();
        self.push(t, Op::Linear { x, w, b })
    }

    /// 3x3 convolution, zero padding 1, stride 1. `w [Cout, Cin, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let s = xv.shape();
        let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let cout = wv.dim(0);
        assert_eq!(wv.len(), cout * cin * 9, "conv weight shape");
        let hw = h * wd;
        let k = cin * 9;
        let mut cols = vec![0.0; k * hw];
        let mut out = vec![0.0; n * cout * hw];
        for i in 0..n {
            im2col(&xv.data()[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, &mut cols);
            let o = &mut out[i * cout * hw..(i + 1) * cout * hw];
            for (co, plane) in o.chunks_mut(hw).enumerate() {
                plane.fill(bv.data()[co]);
            }
            gemm(cout, k, hw, wv.data(), k, 1, &cols, hw, 1, 1.0, o, hw, 1);
        }
        let t = Tensor::from_vec(&[n, cout, h, wd], out).unwrap();
        self.push(t, Op::Conv3x3 { x, w, b })
    }

    /// 2x2 stride-2 transposed convolution. `w [Cin, Cout, 2, 2]`.
    pub fn conv_t2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let cout = self.value(b).len();
        let n = self.value(x).dim(0);
        let t = {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            let weights: Vec<&[f32]> = (0..n).map(|_| wv.data()).collect();
            let biases: Vec<&[f32]> = (0..n).map(|_| bv.data()).collect();
            conv_t_forward(xv, &weights, &biases, cout)
        };
        self.push(t, Op::ConvT2x2 { x, w, b })
    }

    /// Transposed 2x2 convolution whose kernel and bias come from row
    /// `group[i]` of `h`, laid out as `[Cin * Cout * 4 kernel | Cout bias]`.
    pub fn hyper_conv_t2x2(&mut self, x: Var, h: Var, group: Vec<usize>, cout: usize) -> Var {
        let t = {
            let (xv, hv) = (self.value(x), self.value(h));
            let cin = xv.dim(1);
            let kernel = cin * cout * 4;
            assert_eq!(hv.len() / hv.dim(0), kernel + cout, "hyper output width");
            assert_eq!(group.len(), xv.dim(0));
            let weights: Vec<&[f32]> = group.iter().map(|&g| &hv.row(g)[..kernel]).collect();
            let biases: Vec<&[f32]> = group.iter().map(|&g| &hv.row(g)[kernel..]).collect();
            conv_t_forward(xv, &weights, &biases, cout)
        };
        self.push(t, Op::HyperConvT2x2 { x, h, group, cout })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            *v = v.max(0.0);
        }
        self.push(t, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            *v = if *v >= 0.0 {
                1.0 / (1.0 + expf(-*v))
            } else {
                let e = expf(*v);
                e / (1.0 + e)
            };
        }
        self.push(t, Op::Sigmoid { x })
    }

    /// Per-sample, per-channel normalisation over the spatial extent.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let s = t.shape().to_vec();
        let hw = s[2] * s[3];
        let mut inv_std = Vec::with_capacity(s[0] * s[1]);
        for plane in t.data_mut().chunks_mut(hw) {
            let mean = plane.iter().sum::<f32>() / hw as f32;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / hw as f32;
            let inv = 1.0 / sqrtf(var + NORM_EPS);
            for v in plane.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(t, Op::InstanceNorm { x, inv_std })
    }

    /// Binomial `[1, 2, 1] / 4` blur in both axes followed by stride-2
    /// subsampling, reflect padding.
    pub fn blur_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for (plane, o) in xv.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for (a, wa) in BLUR.iter().enumerate() {
                        let r = reflect(2 * i as isize + a as isize - 1, h);
                        for (b, wb) in BLUR.iter().enumerate() {
                            let cc = reflect(2 * j as isize + b as isize - 1, w);
                            acc += wa * wb * plane[r * w + cc];
                        }
                    }
                    o[i * ow + j] = acc;
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, oh, ow], out).unwrap();
        self.push(t, Op::BlurPool { x })
    }

    /// Pools rows of `x [N, D]` over each member set, giving `[G, D]`.
    /// Ties resolve to the lowest row index, so the result does not depend
    /// on member order.
    pub fn set_pool(&mut self, x: Var, groups: &[Vec<usize>], mode: PoolMode) -> Var {
        let xv = self.value(x);
        let d = xv.len() / xv.dim(0);
        let mut out = vec![0.0; groups.len() * d];
        let mut source = vec![0usize; groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "empty pooling group");
            for j in 0..d {
                let mut best = members[0];
                for &m in &members[1..] {
                    let (cand, cur) = (xv.row(m)[j], xv.row(best)[j]);
                    let better = match mode {
                        PoolMode::Max => cand > cur,
                        PoolMode::Min => cand < cur,
                    };
                    if better || (cand == cur && m < best) {
                        best = m;
                    }
                }
                out[g * d + j] = xv.row(best)[j];
                source[g * d + j] = best;
            }
        }
        let t = Tensor::from_vec(&[groups.len(), d], out).unwrap();
        self.push(t, Op::SetPool { x, source })
    }

    /// Selects rows of `x` (first axis) by index.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let mut out = Vec::with_capacity(idx.len() * xv.len() / xv.dim(0));
        for &i in &idx {
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::from_vec(&shape, out).unwrap();
        self.push(t, Op::Gather { x, idx })
    }

    /// Appends `v [N, K]` to `x [N, C, H, W]` as K spatially constant channels.
    pub fn concat_tiled(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        let s = xv.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let k = vv.len() / n;
        let mut out = Vec::with_capacity(n * (c + k) * hw);
        for i in 0..n {
            out.extend_from_slice(&xv.data()[i * c * hw..(i + 1) * c * hw]);
            for &val in vv.row(i) {
                out.extend(core::iter::repeat_n(val, hw));
            }
        }
        let t = Tensor::from_vec(&[n, c + k, s[2], s[3]], out).unwrap();
        self.push(t, Op::ConcatTiled { x, v })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let n = xv.dim(0);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let t = Tensor::from_vec(&[n, len], out).unwrap();
        self.push(t, Op::SliceCols { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        self.push(t, Op::Reshape { x })
    }

    /// `mu + exp(logvar / 2) * eta`.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eta: Vec<f32>) -> Var {
        let (m, lv) = (self.value(mu), self.value(logvar));
        assert_eq!(eta.len(), m.len());
        let out: Vec<f32> = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(&eta)
            .map(|((&m, &l), &e)| m + expf(0.5 * l) * e)
            .collect();
        let t = Tensor::from_vec(m.shape(), out).unwrap();
        self.push(t, Op::Reparam { mu, logvar, eta })
    }

    /// Summed KL divergence of diagonal Gaussians to the standard normal.
    pub fn kl_to_prior(&mut self, mu: Var, logvar: Var) -> Var {
        let (m, lv) = (self.value(mu), self.value(logvar));
        let kl: f64 = m
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| 0.5 * ((m * m) as f64 + (expf(l) as f64) - 1.0 - l as f64))
            .sum();
        self.push(Tensor::scalar(kl as f32), Op::KlSum { mu, logvar })
    }

    /// A scalar computed outside the tape, together with its gradient with
    /// respect to each listed input.
    pub fn precomputed(&mut self, value: f32, inputs: Vec<(Var, Tensor)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).len(), g.len(), "precomputed gradient shape");
        }
        self.push(Tensor::scalar(value), Op::Precomputed { inputs })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f32)>) -> Var {
        let s: f32 = terms.iter().map(|&(v, w)| w * self.value(v).data()[0]).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { terms })
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = (xv.dim(0), xv.len() / xv.dim(0));
                let dout = wv.dim(0);
                let mut dx = vec![0.0; n * din];
                gemm(n, dout, din, g.data(), dout, 1, wv.data(), din, 1, 0.0, &mut dx, din, 1);
                let mut dw = vec![0.0; dout * din];
                gemm(dout, n, din, g.data(), 1, dout, xv.data(), din, 1, 0.0, &mut dw, din, 1);
                let mut db = vec![0.0; dout];
                for r in g.data().chunks(dout) {
                    for (d, v) in db.iter_mut().zip(r) {
                        *d += v;
                    }
                }
                add_into(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx).unwrap());
                add_into(&mut grads[w.0], Tensor::from_vec(wv.shape(), dw).unwrap());
                add_into(&mut grads[b.0], Tensor::from_vec(&[dout], db).unwrap());
            }
            Op::Conv3x3 { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let s = xv.shape();
                let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
                let cout = wv.dim(0);
                let (hw, k) = (h * wd, cin * 9);
                let mut cols = vec![0.0; k * hw];
                let mut dcols = vec![0.0; k * hw];
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; cout];
                for i in 0..n {
                    let gi = &g.data()[i * cout * hw..(i + 1) * cout * hw];
                    im2col(&xv.data()[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, &mut cols);
                    gemm(cout, hw, k, gi, hw, 1, &cols, 1, hw, 1.0, &mut dw, k, 1);
                    gemm(k, cout, hw, wv.data(), 1, k, gi, hw, 1, 0.0, &mut dcols, hw, 1);
                    col2im(&dcols, cin, h, wd, &mut dx[i * cin * hw..(i + 1) * cin * hw]);
                    for (co, plane) in gi.chunks(hw).enumerate() {
                        db[co] += plane.iter().sum::<f32>();
                    }
                }
                add_into(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx).unwrap());
                add_into(&mut grads[w.0], Tensor::from_vec(wv.shape(), dw).unwrap());
                add_into(&mut grads[b.0], Tensor::from_vec(&[cout], db).unwrap());
            }
            Op::ConvT2x2 { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n = xv.dim(0);
                let cout = self.value(*b).len();
                let weights: Vec<&[f32]> = (0..n).map(|_| wv.data()).collect();
                let (dx, dws, dbs) = conv_t_backward(xv, &weights, cout, g);
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; cout];
                for (a, bb) in dws.iter().zip(&dbs) {
                    for (d, v) in dw.iter_mut().zip(a) {
                        *d += v;
                    }
                    for (d, v) in db.iter_mut().zip(bb) {
                        *d += v;
                    }
                }
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[w.0], Tensor::from_vec(wv.shape(), dw).unwrap());
                add_into(&mut grads[b.0], Tensor::from_vec(&[cout], db).unwrap());
            }
            Op::HyperConvT2x2 { x, h, group, cout } => {
                let (xv, hv) = (self.value(*x), self.value(*h));
                let kernel = xv.dim(1) * cout * 4;
                let weights: Vec<&[f32]> = group.iter().map(|&gi| &hv.row(gi)[..kernel]).collect();
                let (dx, dws, dbs) = conv_t_backward(xv, &weights, *cout, g);
                let width = kernel + cout;
                let mut dh = vec![0.0; hv.len()];
                for (i, &gi) in group.iter().enumerate() {
                    let row = &mut dh[gi * width..(gi + 1) * width];
                    for (d, v) in row[..kernel].iter_mut().zip(&dws[i]) {
                        *d += v;
                    }
                    for (d, v) in row[kernel..].iter_mut().zip(&dbs[i]) {
                        *d += v;
                    }
                }
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[h.0], Tensor::from_vec(hv.shape(), dh).unwrap());
            }
            Op::Relu { x } => {
                let mut d = g.clone();
                for (dv, &o) in d.data_mut().iter_mut().zip(out.data()) {
                    if o <= 0.0 {
                        *dv = 0.0;
                    }
                }
                add_into(&mut grads[x.0], d);
            }
            Op::Sigmoid { x } => {
                let mut d = g.clone();
                for (dv, &o) in d.data_mut().iter_mut().zip(out.data()) {
                    *dv *= o * (1.0 - o);
                }
                add_into(&mut grads[x.0], d);
            }
            Op::InstanceNorm { x, inv_std } => {
                let s = out.shape();
                let hw = s[2] * s[3];
                let mut d = g.clone();
                for ((dp, yp), &inv) in d.data_mut().chunks_mut(hw).zip(out.data().chunks(hw)).zip(inv_std) {
                    let mean_g = dp.iter().sum::<f32>() / hw as f32;
                    let mean_gy = dp.iter().zip(yp).map(|(a, b)| a * b).sum::<f32>() / hw as f32;
                    for (dv, &y) in dp.iter_mut().zip(yp) {
                        *dv = inv * (*dv - mean_g - y * mean_gy);
                    }
                }
                add_into(&mut grads[x.0], d);
            }
            Op::BlurPool { x } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; xv.len()];
                for (dp, gp) in dx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = gp[i * ow + j];
                            for (a, wa) in BLUR.iter().enumerate() {
                                let r = reflect(2 * i as isize + a as isize - 1, h);
                                for (b, wb) in BLUR.iter().enumerate() {
                                    let cc = reflect(2 * j as isize + b as isize - 1, w);
                                    dp[r * w + cc] += wa * wb * gv;
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], Tensor::from_vec(s, dx).unwrap());
            }
            Op::SetPool { x, source } => {
                let xv = self.value(*x);
                let d = xv.len() / xv.dim(0);
                let mut dx = vec![0.0; xv.len()];
                for (pos, (&src, &gv)) in source.iter().zip(g.data()).enumerate() {
                    dx[src * d + pos % d] += gv;
                }
                add_into(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let w = xv.len() / xv.dim(0);
                let mut dx = vec![0.0; xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, v) in dx[i * w..(i + 1) * w].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                add_into(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::ConcatTiled { x, v } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let s = xv.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let k = vv.len() / n;
                let mut dx = Vec::with_capacity(xv.len());
                let mut dv = Vec::with_capacity(vv.len());
                for i in 0..n {
                    let block = &g.data()[i * (c + k) * hw..(i + 1) * (c + k) * hw];
                    dx.extend_from_slice(&block[..c * hw]);
                    for plane in block[c * hw..].chunks(hw) {
                        dv.push(plane.iter().sum::<f32>());
                    }
                }
                add_into(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx).unwrap());
                add_into(&mut grads[v.0], Tensor::from_vec(vv.shape(), dv).unwrap());
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let w = xv.len() / xv.dim(0);
                let len = g.len() / g.dim(0);
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.dim(0) {
                    dx[r * w + start..r * w + start + len].copy_from_slice(g.row(r));
                }
                add_into(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                add_into(&mut grads[x.0], g.clone().reshaped(&shape));
            }
            Op::Reparam { mu, logvar, eta } => {
                let lv = self.value(*logvar);
                let dmu = g.clone();
                let dlv: Vec<f32> = g
                    .data()
                    .iter()
                    .zip(lv.data())
                    .zip(eta)
                    .map(|((&gv, &l), &e)| gv * 0.5 * expf(0.5 * l) * e)
                    .collect();
                add_into(&mut grads[mu.0], dmu);
                add_into(&mut grads[logvar.0], Tensor::from_vec(lv.shape(), dlv).unwrap());
            }
            Op::KlSum { mu, logvar } => {
                let gs = g.data()[0];
                let (m, lv) = (self.value(*mu), self.value(*logvar));
                let dmu: Vec<f32> = m.data().iter().map(|&v| gs * v).collect();
                let dlv: Vec<f32> = lv.data().iter().map(|&l| gs * 0.5 * (expf(l) - 1.0)).collect();
                add_into(&mut grads[mu.0], Tensor::from_vec(m.shape(), dmu).unwrap());
                add_into(&mut grads[logvar.0], Tensor::from_vec(lv.shape(), dlv).unwrap());
            }
            Op::Precomputed { inputs } => {
                let gs = g.data()[0];
                for (v, local) in inputs {
                    let mut d = local.clone();
                    for x in d.data_mut() {
                        *x *= gs;
                    }
                    add_into(&mut grads[v.0], d);
                }
            }
            Op::WeightedSum { terms } => {
                let gs = g.data()[0];
                for &(v, w) in terms {
                    add_into(&mut grads[v.0], Tensor::scalar(gs * w));
                }
            }
        }
    }
}

fn conv_t_forward(x: &Tensor, weights: &[&[f32]], biases: &[&[f32]], cout: usize) -> Tensor {
    let s = x.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let m = cout * 4;
    let mut y = vec![0.0; m * hw];
    let mut out = vec![0.0; n * cout * oh * ow];
    for i in 0..n {
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        // y[(co, dy, dx), p] = sum_ci W[ci, (co, dy, dx)] * x[ci, p]
        gemm(m, cin, hw, weights[i], 1, m, xi, hw, 1, 0.0, &mut y, hw, 1);
        let o = &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        for co in 0..cout {
            let bias = biases[i][co];
            for tap in 0..4 {
                let (dy, dx) = (tap / 2, tap % 2);
                let row = &y[(co * 4 + tap) * hw..][..hw];
                for r in 0..h {
                    for c in 0..w {
                        o[co * oh * ow + (2 * r + dy) * ow + 2 * c + dx] = row[r * w + c] + bias;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out).unwrap()
}

type ConvTGrads = (Tensor, Vec<Vec<f32>>, Vec<Vec<f32>>);

fn conv_t_backward(x: &Tensor, weights: &[&[f32]], cout: usize, g: &Tensor) -> ConvTGrads {
    let s = x.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let m = cout * 4;
    let mut dy = vec![0.0; m * hw];
    let mut dx = vec![0.0; x.len()];
    let mut dws = Vec::with_capacity(n);
    let mut dbs = Vec::with_capacity(n);
    for i in 0..n {
        let gi = &g.data()[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        let mut db = vec![0.0; cout];
        for co in 0..cout {
            for tap in 0..4 {
                let (ty, tx) = (tap / 2, tap % 2);
                let row = &mut dy[(co * 4 + tap) * hw..][..hw];
                for r in 0..h {
                    for c in 0..w {
                        row[r * w + c] = gi[co * oh * ow + (2 * r + ty) * ow + 2 * c + tx];
                    }
                }
            }
            db[co] = gi[co * oh * ow..(co + 1) * oh * ow].iter().sum();
        }
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        // dx[ci, p] = sum_m W[ci, m] dy[m, p]
        gemm(cin, m, hw, weights[i], m, 1, &dy, hw, 1, 0.0, &mut dx[i * cin * hw..(i + 1) * cin * hw], hw, 1);
        // dW[ci, m] = sum_p x[ci, p] dy[m, p]
        let mut dw = vec![0.0; cin * m];
        gemm(cin, hw, m, xi, hw, 1, &dy, 1, hw, 0.0, &mut dw, m, 1);
        dws.push(dw);
        dbs.push(db);
    }
    (Tensor::from_vec(s, dx).unwrap(), dws, dbs)
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}
