//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Nodes are
//! appended in evaluation order, so the tape order is already topological and
//! the reverse pass is a single backwards sweep.
//!
//! Image tensors use the `[batch, channels, height, width]` layout.

use crate::error::{invalid, Result};

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        stride: usize,
        group: usize,
        /// im2col matrices `[in·k·k, group·pixels]` per item group; empty
        /// when not recording.
        cols: Vec<Vec<f64>>,
    },
    Relu(Var),
    Add(Var, Var),
    Affine {
        x: Var,
        scale: Var,
        bias: Var,
    },
    Gap(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Target GEMM width when batching small feature maps.
const COLS_PER_GEMM: usize = 2048;

fn conv_out(n: usize, stride: usize) -> usize {
    // kernel k with padding k/2, k odd
    (n - 1) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape for forward evaluation only. [`Tape::backward`] is rejected.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        if shape.is_empty() || shape.len() > 4 {
            return invalid(format!("tensor rank must be 1..=4, got {}", shape.len()));
        }
        if numel(shape) != values.len() {
            return invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                values.len()
            ));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Accumulated gradient; zeros if the reverse pass never reached `v`.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let node = &self.nodes[v.0];
        if node.grad.is_empty() {
            vec![0.0; node.value.len()]
        } else {
            node.grad.clone()
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn image_shape(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [b, c, h, w] => Ok([b, c, h, w]),
            ref s => invalid(format!("{what} expects a [B,C,H,W] tensor, got {s:?}")),
        }
    }

    /// 2-D convolution with a square odd kernel `[out, in, k, k]`, zero
    /// padding `k/2` and the given stride.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let [b, ic, h, w] = self.image_shape(x, "conv2d input")?;
        let [oc, kic, kh, kw] = self.image_shape(kernel, "conv2d kernel")?;
        if kic != ic || kh != kw || kh % 2 == 0 {
            return invalid(format!(
                "kernel {:?} incompatible with input {:?}",
                self.shape(kernel),
                self.shape(x)
            ));
        }
        if !(stride == 1 || stride == 2) {
            return invalid(format!("conv2d stride must be 1 or 2, got {stride}"));
        }
        let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
        let kdim = ic * kh * kh;
        let p = oh * ow;
        // items are grouped so each GEMM sees about COLS_PER_GEMM columns
        let group = (COLS_PER_GEMM / p).clamp(1, b);
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[kernel.0].value;
        let mut out = vec![0.0; b * oc * p];
        let mut saved = Vec::new();
        for first in (0..b).step_by(group) {
            let g = group.min(b - first);
            let ncols = g * p;
            let mut cols = vec![0.0; kdim * ncols];
            for j in 0..g {
                let item = first + j;
                im2col(
                    &xv[item * ic * h * w..(item + 1) * ic * h * w],
                    [ic, h, w],
                    kh,
                    stride,
                    &mut cols,
                    (ncols, j * p),
                );
            }
            let dst = &mut out[first * oc * p..(first + g) * oc * p];
            if g == 1 {
                gemm((oc, kdim, ncols), (kv, false), (&cols, false), dst, false);
            } else {
                let mut prod = vec![0.0; oc * ncols];
                gemm((oc, kdim, ncols), (kv, false), (&cols, false), &mut prod, false);
                batch_major(&prod, oc, g, p, dst);
            }
            if self.record {
                saved.push(cols);
            }
        }
        Ok(self.push(
            vec![b, oc, oh, ow],
            out,
            Op::Conv {
                x,
                w: kernel,
                stride,
                group,
                cols: saved,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), value, Op::Relu(x))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        if self.shape(x) != self.shape(y) {
            return invalid(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(x),
                self.shape(y)
            ));
        }
        let value = self
            .value(x)
            .iter()
            .zip(self.value(y))
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::Add(x, y)))
    }

    /// `y[b,c,..] = x[b,c,..]·scale[c] + bias[c]`.
    pub fn affine_channel(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let [b, c, h, w] = self.image_shape(x, "affine_channel")?;
        if self.shape(scale) != [c] || self.shape(bias) != [c] {
            return invalid(format!(
                "affine parameters must have shape [{c}], got {:?} and {:?}",
                self.shape(scale),
                self.shape(bias)
            ));
        }
        let hw = h * w;
        let (s, t) = (self.value(scale), self.value(bias));
        let mut value = self.value(x).to_vec();
        for (i, plane) in value.chunks_exact_mut(hw).enumerate() {
            let ch = i % c;
            for v in plane {
                *v = *v * s[ch] + t[ch];
            }
        }
        debug_assert_eq!(value.len(), b * c * hw);
        Ok(self.push(vec![b, c, h, w], value, Op::Affine { x, scale, bias }))
    }

    /// Mean over the spatial dimensions, giving `[B, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.image_shape(x, "global_avg_pool")?;
        let hw = (h * w) as f64;
        let value = self
            .value(x)
            .chunks_exact(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        Ok(self.push(vec![b, c, 1, 1], value, Op::Gap(x)))
    }

    /// Fully connected layer. All non-batch dimensions of `x` are flattened;
    /// `w` is `[out, in]`, `b` is `[out]`, and the result is `[B, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let batch = xs[0];
        let fan_in = numel(&xs[1..]);
        let (out, win) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return invalid(format!("dense weight must be [out, in], got {s:?}")),
        };
        if win != fan_in || self.shape(b) != [out] {
            return invalid(format!(
                "dense weight {:?} / bias {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(b),
                self.shape(x)
            ));
        }
        let mut value: Vec<f64> = (0..batch)
            .flat_map(|_| self.value(b).iter().copied())
            .collect();
        // out[B, O] += x[B, I] · wᵀ[I, O]
        gemm(
            (batch, fan_in, out),
            (self.value(x), false),
            (self.value(w), true),
            &mut value,
            true,
        );
        Ok(self.push(vec![batch, out], value, Op::Dense { x, w, b }))
    }

    /// Reverse pass from `output`, seeded with `seed` (same length as the
    /// output). Gradients accumulate into every reachable node. Returns the
    /// number of nodes visited.
    pub fn backward(&mut self, output: Var, seed: &[f64]) -> Result<usize> {
        if !self.record {
            return invalid("backward on an inference tape");
        }
        if seed.len() != self.nodes[output.0].value.len() {
            return invalid(format!(
                "seed length {} does not match output size {}",
                seed.len(),
                self.nodes[output.0].value.len()
            ));
        }
        let mut live = vec![false; output.0 + 1];
        live[output.0] = true;
        for i in (0..=output.0).rev() {
            if !live[i] {
                continue;
            }
            for p in self.parents(i) {
                live[p.0] = true;
            }
        }
        for (i, node) in self.nodes.iter_mut().enumerate().take(output.0 + 1) {
            if live[i] && node.grad.is_empty() {
                node.grad = vec![0.0; node.value.len()];
            }
        }
        for (g, s) in self.nodes[output.0].grad.iter_mut().zip(seed) {
            *g += s;
        }
        let mut visited = 0;
        for i in (0..=output.0).rev() {
            if live[i] {
                visited += 1;
                self.backward_node(i);
            }
        }
        Ok(visited)
    }

    fn parents(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::Relu(x) | Op::Gap(x) => vec![*x],
            Op::Add(x, y) => vec![*x, *y],
            Op::Affine { x, scale, bias } => vec![*x, *scale, *bias],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
        }
    }

    fn backward_node(&mut self, i: usize) {
        // Parents always precede `i`, so splitting there gives disjoint borrows.
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let gy = &node.grad;
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let px = &mut before[x.0];
                for ((g, &y), &v) in px.grad.iter_mut().zip(gy).zip(&node.value) {
                    if v > 0.0 {
                        *g += y;
                    }
                }
            }
            Op::Add(x, y) => {
                for (g, &d) in before[x.0].grad.iter_mut().zip(gy) {
                    *g += d;
                }
                for (g, &d) in before[y.0].grad.iter_mut().zip(gy) {
                    *g += d;
                }
            }
            Op::Affine { x, scale, bias } => {
                let c = node.shape[1];
                let hw = node.shape[2] * node.shape[3];
                let s = before[scale.0].value.clone();
                let mut ds = vec![0.0; c];
                let mut db = vec![0.0; c];
                let xv = &before[x.0].value;
                for (k, (gp, xp)) in gy.chunks_exact(hw).zip(xv.chunks_exact(hw)).enumerate() {
                    let ch = k % c;
                    for (&g, &xx) in gp.iter().zip(xp) {
                        ds[ch] += g * xx;
                        db[ch] += g;
                    }
                }
                for (k, (dx, gp)) in before[x.0]
                    .grad
                    .chunks_exact_mut(hw)
                    .zip(gy.chunks_exact(hw))
                    .enumerate()
                {
                    let sc = s[k % c];
                    for (d, &g) in dx.iter_mut().zip(gp) {
                        *d += g * sc;
                    }
                }
                add_into(&mut before[scale.0].grad, &ds);
                add_into(&mut before[bias.0].grad, &db);
            }
            Op::Gap(x) => {
                let px = &mut before[x.0];
                let hw = px.shape[2] * px.shape[3];
                let inv = 1.0 / hw as f64;
                for (plane, &g) in px.grad.chunks_exact_mut(hw).zip(gy) {
                    for d in plane {
                        *d += g * inv;
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let batch = node.shape[0];
                let out = node.shape[1];
                let fan_in = before[x.0].value.len() / batch;
                let mut db = vec![0.0; out];
                for row in gy.chunks_exact(out) {
                    add_into(&mut db, row);
                }
                add_into(&mut before[b.0].grad, &db);
                // dW[O, I] += gyᵀ[O, B] · x[B, I]
                let xv = before[x.0].value.clone();
                gemm(
                    (out, batch, fan_in),
                    (gy, true),
                    (&xv, false),
                    &mut before[w.0].grad,
                    true,
                );
                // dx[B, I] += gy[B, O] · W[O, I]
                let wv = before[w.0].value.clone();
                gemm(
                    (batch, out, fan_in),
                    (gy, false),
                    (&wv, false),
                    &mut before[x.0].grad,
                    true,
                );
            }
            Op::Conv {
                x,
                w,
                stride,
                group,
                cols,
            } => {
                let [_, ic, h, wd] = [
                    before[x.0].shape[0],
                    before[x.0].shape[1],
                    before[x.0].shape[2],
                    before[x.0].shape[3],
                ];
                let oc = node.shape[1];
                let p = node.shape[2] * node.shape[3];
                let k = before[w.0].shape[2];
                let kdim = ic * k * k;
                let kv = before[w.0].value.clone();
                let plane = ic * h * wd;
                for (gi, cols) in cols.iter().enumerate() {
                    let first = gi * group;
                    let g = cols.len() / (kdim * p);
                    let ncols = g * p;
                    let gyg = &gy[first * oc * p..(first + g) * oc * p];
                    let gy_cols = if g == 1 {
                        gyg.to_vec()
                    } else {
                        channel_major(gyg, g, oc, p)
                    };
                    // dW[OC, K] += gy[OC, GP] · colsᵀ[GP, K]
                    gemm(
                        (oc, ncols, kdim),
                        (&gy_cols, false),
                        (cols, true),
                        &mut before[w.0].grad,
                        true,
                    );
                    // dcols[K, GP] = Wᵀ[K, OC] · gy[OC, GP]
                    let mut dcols = vec![0.0; kdim * ncols];
                    gemm((kdim, oc, ncols), (&kv, true), (&gy_cols, false), &mut dcols, false);
                    for j in 0..g {
                        let item = first + j;
                        col2im_add(
                            &dcols,
                            (ncols, j * p),
                            [ic, h, wd],
                            k,
                            *stride,
                            &mut before[x.0].grad[item * plane..(item + 1) * plane],
                        );
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c = a·b` (or `c += a·b`) for row-major operands; `(m, k, n)` are the
/// dimensions of the product after the optional transposes.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, a_t): (&[f64], bool),
    (b, b_t): (&[f64], bool),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the length assertion above bounds every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[C, P]` blocks of a `[C, B·P]` matrix, regrouped as `[B, C, P]`.
fn batch_major(m: &[f64], c: usize, b: usize, p: usize, out: &mut [f64]) {
    for ch in 0..c {
        for item in 0..b {
            let src = &m[ch * b * p + item * p..ch * b * p + (item + 1) * p];
            out[(item * c + ch) * p..(item * c + ch + 1) * p].copy_from_slice(src);
        }
    }
}

/// Inverse of [`batch_major`].
fn channel_major(t: &[f64], b: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for item in 0..b {
        for ch in 0..c {
            let src = &t[(item * c + ch) * p..(item * c + ch + 1) * p];
            out[ch * b * p + item * p..ch * b * p + (item + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// Writes the patches of one image into columns `offset..offset + P` of a
/// matrix whose rows are `row_len` long.
fn im2col(
    x: &[f64],
    [c, h, w]: [usize; 3],
    k: usize,
    stride: usize,
    cols: &mut [f64],
    (row_len, offset): (usize, usize),
) {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let pad = (k / 2) as isize;
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * row_len + offset..row * row_len + offset + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(
    cols: &[f64],
    (row_len, offset): (usize, usize),
    [c, h, w]: [usize; 3],
    k: usize,
    stride: usize,
    dx: &mut [f64],
) {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let pad = (k / 2) as isize;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * row_len + offset..row * row_len + offset + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
