//! Operation kernels and their backward rules.

use super::{BackwardRule, Elem, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// gemm wrappers
// ---------------------------------------------------------------------------

/// C[m x n] += alpha * A[m x k] * B[k x n]; all row-major contiguous.
pub(crate) fn gemm_nn<E: Elem>(m: usize, k: usize, n: usize, alpha: E, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    if m == 1 {
        // axpy over rows of B: streams B contiguously, vectorizes well.
        scale_slice(&mut c[..n], beta);
        for p in 0..k {
            let s = alpha * a[p];
            if s != E::ZERO {
                axpy(s, &b[p * n..p * n + n], &mut c[..n]);
            }
        }
        return;
    }
    E::gemm(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c);
}

/// C[m x n] += alpha * A[m x k] * B^T, where B is stored row-major [n x k].
pub(crate) fn gemm_nt<E: Elem>(m: usize, k: usize, n: usize, alpha: E, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    if m == 1 {
        scale_slice(&mut c[..n], beta);
        for j in 0..n {
            c[j] += alpha * dot(&a[..k], &b[j * k..j * k + k]);
        }
        return;
    }
    if k * n > 1 << 15 {
        // Packing a column-strided B is several times slower than an explicit
        // blocked transpose followed by the contiguous kernel.
        let bt = transpose_copy(b, n, k);
        E::gemm(m, k, n, alpha, a, k as isize, 1, &bt, n as isize, 1, beta, c);
        return;
    }
    E::gemm(m, k, n, alpha, a, k as isize, 1, b, 1, k as isize, beta, c);
}

/// Blocked out-of-place transpose of a row-major [rows x cols] matrix.
fn transpose_copy<E: Elem>(src: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut dst = vec![E::ZERO; rows * cols];
    const TILE: usize = 32;
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
    dst
}

/// C[m x n] += alpha * A^T * B, where A is stored row-major [k x m].
pub(crate) fn gemm_tn<E: Elem>(m: usize, k: usize, n: usize, alpha: E, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    if m == 1 {
        scale_slice(&mut c[..n], beta);
        for p in 0..k {
            let s = alpha * a[p];
            if s != E::ZERO {
                axpy(s, &b[p * n..p * n + n], &mut c[..n]);
            }
        }
        return;
    }
    if k == 1 {
        // outer product: gradients of weights in single-row products, which
        // packed kernels handle poorly
        scale_slice(&mut c[..m * n], beta);
        for i in 0..m {
            let s = alpha * a[i];
            if s != E::ZERO {
                axpy(s, &b[..n], &mut c[i * n..(i + 1) * n]);
            }
        }
        return;
    }
    E::gemm(m, k, n, alpha, a, 1, m as isize, b, n as isize, 1, beta, c);
}

fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = E::ZERO;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

fn axpy<E: Elem>(s: E, x: &[E], y: &mut [E]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += s * x[i];
    }
}

fn scale_slice<E: Elem>(c: &mut [E], beta: E) {
    if beta == E::ZERO {
        c.fill(E::ZERO);
    } else if beta != E::ONE {
        for v in c {
            *v = *v * beta;
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

struct Binary<E: Elem> {
    kind: BinKind,
    a: Tensor<E>,
    b: Tensor<E>,
}

/// Gradient of a broadcast operand is the sum of the elementwise gradient.
fn accumulate_maybe_scalar<E: Elem>(t: &Tensor<E>, g: Vec<E>) {
    if t.numel() == 1 && g.len() != 1 {
        let mut s = E::ZERO;
        for v in &g {
            s += *v;
        }
        t.accumulate_grad(&[s]);
    } else {
        t.accumulate_grad_owned(g);
    }
}

impl<E: Elem> BackwardRule<E> for Binary<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        let (a, b) = (&self.a, &self.b);
        match self.kind {
            BinKind::Add => {
                if a.requires_grad() {
                    accumulate_maybe_scalar(a, grad.to_vec());
                }
                if b.requires_grad() {
                    accumulate_maybe_scalar(b, grad.to_vec());
                }
            }
            BinKind::Sub => {
                if a.requires_grad() {
                    accumulate_maybe_scalar(a, grad.to_vec());
                }
                if b.requires_grad() {
                    accumulate_maybe_scalar(b, grad.iter().map(|&g| -g).collect());
                }
            }
            BinKind::Mul => {
                let ad = a.data();
                let bd = b.data();
                if a.requires_grad() {
                    let g: Vec<E> = if b.numel() == 1 {
                        grad.iter().map(|&g| g * bd[0]).collect()
                    } else if a.numel() == 1 {
                        grad.iter().zip(bd).map(|(&g, &bv)| g * bv).collect()
                    } else {
                        grad.iter().zip(bd).map(|(&g, &bv)| g * bv).collect()
                    };
                    accumulate_maybe_scalar(a, g);
                }
                if b.requires_grad() {
                    let g: Vec<E> = if a.numel() == 1 {
                        grad.iter().map(|&g| g * ad[0]).collect()
                    } else {
                        grad.iter().zip(ad).map(|(&g, &av)| g * av).collect()
                    };
                    accumulate_maybe_scalar(b, g);
                }
            }
        }
    }
}

fn binary<E: Elem>(kind: BinKind, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (an, bn) = (a.numel(), b.numel());
    if a.shape() != b.shape() && an != 1 && bn != 1 {
        return Err(Error::InvalidShape(format!(
            "elementwise shapes {:?} vs {:?} (only exact match or scalar broadcast)",
            a.shape(),
            b.shape()
        )));
    }
    let out_shape = if an == 1 && bn != 1 { b.shape().to_vec() } else { a.shape().to_vec() };
    let n = out_shape.iter().product::<usize>();
    let ad = a.data();
    let bd = b.data();
    let mut data = Vec::with_capacity(n);
    let fetch_a = |i: usize| if an == 1 { ad[0] } else { ad[i] };
    let fetch_b = |i: usize| if bn == 1 { bd[0] } else { bd[i] };
    match kind {
        BinKind::Add => {
            for i in 0..n {
                data.push(fetch_a(i) + fetch_b(i));
            }
        }
        BinKind::Sub => {
            for i in 0..n {
                data.push(fetch_a(i) - fetch_b(i));
            }
        }
        BinKind::Mul => {
            for i in 0..n {
                data.push(fetch_a(i) * fetch_b(i));
            }
        }
    }
    Ok(Tensor::from_op(out_shape, data, Box::new(Binary { kind, a: a.clone(), b: b.clone() })))
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Debug)]
enum UnKind {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Neg,
    Abs,
    /// y = a*x + b
    Affine(f64, f64),
    /// y = max(x, c); gradient passes where x >= c
    ClampMin(f64),
}

struct Unary<E: Elem> {
    kind: UnKind,
    x: Tensor<E>,
}

impl<E: Elem> BackwardRule<E> for Unary<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let xd = self.x.data();
        let yd = out.data();
        let g: Vec<E> = match self.kind {
            UnKind::Relu => grad.iter().zip(xd).map(|(&g, &x)| if x > E::ZERO { g } else { E::ZERO }).collect(),
            UnKind::Tanh => grad.iter().zip(yd).map(|(&g, &y)| g * (E::ONE - y * y)).collect(),
            UnKind::Sigmoid => grad.iter().zip(yd).map(|(&g, &y)| g * y * (E::ONE - y)).collect(),
            UnKind::Exp => grad.iter().zip(yd).map(|(&g, &y)| g * y).collect(),
            UnKind::Log => grad.iter().zip(xd).map(|(&g, &x)| g / x).collect(),
            UnKind::Neg => grad.iter().map(|&g| -g).collect(),
            UnKind::Abs => grad.iter().zip(xd).map(|(&g, &x)| if x >= E::ZERO { g } else { -g }).collect(),
            UnKind::Affine(a, _) => {
                let a = E::from_f64(a);
                grad.iter().map(|&g| g * a).collect()
            }
            UnKind::ClampMin(c) => {
                let c = E::from_f64(c);
                grad.iter().zip(xd).map(|(&g, &x)| if x >= c { g } else { E::ZERO }).collect()
            }
        };
        self.x.accumulate_grad_owned(g);
    }
}

fn unary<E: Elem>(kind: UnKind, x: &Tensor<E>) -> Result<Tensor<E>> {
    let xd = x.data();
    let data: Vec<E> = match kind {
        UnKind::Relu => xd.iter().map(|&v| v.maximum(E::ZERO)).collect(),
        UnKind::Tanh => xd.iter().map(|&v| v.tanh()).collect(),
        UnKind::Sigmoid => xd.iter().map(|&v| E::ONE / (E::ONE + (-v).exp())).collect(),
        UnKind::Exp => xd.iter().map(|&v| v.exp()).collect(),
        UnKind::Log => {
            if let Some(bad) = xd.iter().find(|v| **v <= E::ZERO) {
                return Err(Error::Domain(format!("log of non-positive entry {:?}", bad)));
            }
            xd.iter().map(|&v| v.ln()).collect()
        }
        UnKind::Neg => xd.iter().map(|&v| -v).collect(),
        UnKind::Abs => xd.iter().map(|&v| v.abs()).collect(),
        UnKind::Affine(a, b) => {
            let (a, b) = (E::from_f64(a), E::from_f64(b));
            xd.iter().map(|&v| a * v + b).collect()
        }
        UnKind::ClampMin(c) => {
            let c = E::from_f64(c);
            xd.iter().map(|&v| v.maximum(c)).collect()
        }
    };
    Ok(Tensor::from_op(x.shape().to_vec(), data, Box::new(Unary { kind, x: x.clone() })))
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

struct MatMul<E: Elem> {
    a: Tensor<E>,
    b: Tensor<E>,
}

impl<E: Elem> BackwardRule<E> for MatMul<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        let (m, k) = (self.a.shape()[0], self.a.shape()[1]);
        let n = self.b.shape()[1];
        // dA = G * B^T ; dB = A^T * G
        if self.a.requires_grad() {
            let mut da = vec![E::ZERO; m * k];
            gemm_nt(m, n, k, E::ONE, grad, self.b.data(), E::ZERO, &mut da);
            self.a.accumulate_grad_owned(da);
        }
        if self.b.requires_grad() {
            let mut db = vec![E::ZERO; k * n];
            gemm_tn(k, m, n, E::ONE, self.a.data(), grad, E::ZERO, &mut db);
            self.b.accumulate_grad_owned(db);
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct Conv2d<E: Elem> {
    x: Tensor<E>,
    w: Tensor<E>,
    bias: Option<Tensor<E>>,
    stride: usize,
    padding: usize,
    out_hw: (usize, usize),
    /// fused relu applied to the output
    relu: bool,
    /// im2col matrix saved from the forward pass, [C*KH*KW x OH*OW].
    col: Vec<E>,
}

/// Valid output-column range [lo, hi) for kernel column kj: positions where
/// the tap oj*stride + kj - pad lands inside [0, w).
fn valid_ojs(w: usize, kj: usize, stride: usize, pad: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    let max_x = (w + pad) as isize - 1 - kj as isize;
    if max_x < 0 {
        return (0, 0);
    }
    let hi = ((max_x as usize) / stride + 1).min(ow);
    (lo.min(hi), hi)
}

fn im2col<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut col = vec![E::ZERO; c * kh * kw * oh * ow];
    let ocols = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (oi_lo, oi_hi) = valid_ojs(h, ki, stride, pad, oh);
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ocols;
                let (oj_lo, oj_hi) = valid_ojs(w, kj, stride, pad, ow);
                if oj_lo >= oj_hi {
                    continue;
                }
                for oi in oi_lo..oi_hi {
                    let yy = oi * stride + ki - pad;
                    let xrow = &xc[yy * w..(yy + 1) * w];
                    let out = &mut col[row + oi * ow + oj_lo..row + oi * ow + oj_hi];
                    let x0 = oj_lo * stride + kj - pad;
                    if stride == 1 {
                        out.copy_from_slice(&xrow[x0..x0 + (oj_hi - oj_lo)]);
                    } else {
                        for (t, o) in out.iter_mut().enumerate() {
                            *o = xrow[x0 + t * stride];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<E: Elem>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut x = vec![E::ZERO; c * h * w];
    let ocols = oh * ow;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (oi_lo, oi_hi) = valid_ojs(h, ki, stride, pad, oh);
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ocols;
                let (oj_lo, oj_hi) = valid_ojs(w, kj, stride, pad, ow);
                if oj_lo >= oj_hi {
                    continue;
                }
                for oi in oi_lo..oi_hi {
                    let yy = oi * stride + ki - pad;
                    let src = &col[row + oi * ow + oj_lo..row + oi * ow + oj_hi];
                    let dst = &mut xc[yy * w..(yy + 1) * w];
                    let x0 = oj_lo * stride + kj - pad;
                    if stride == 1 {
                        for (t, &s) in src.iter().enumerate() {
                            dst[x0 + t] += s;
                        }
                    } else {
                        for (t, &s) in src.iter().enumerate() {
                            dst[x0 + t * stride] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

impl<E: Elem> BackwardRule<E> for Conv2d<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        let mut v = vec![self.x.clone(), self.w.clone()];
        if let Some(b) = &self.bias {
            v.push(b.clone());
        }
        v
    }
    fn backward(&self, out: &Tensor<E>, grad: &[E]) {
        let xs = self.x.shape();
        let ws = self.w.shape();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = self.out_hw;
        let ckk = c * kh * kw;
        let ocols = oh * ow;
        let masked: Vec<E>;
        let grad: &[E] = if self.relu {
            let od = out.data();
            masked = grad.iter().zip(od).map(|(&g, &y)| if y > E::ZERO { g } else { E::ZERO }).collect();
            &masked
        } else {
            grad
        };
        if self.w.requires_grad() {
            let mut dw = vec![E::ZERO; oc * ckk];
            gemm_nt(oc, ocols, ckk, E::ONE, grad, &self.col, E::ZERO, &mut dw);
            self.w.accumulate_grad_owned(dw);
        }
        if self.x.requires_grad() {
            let mut dcol = vec![E::ZERO; ckk * ocols];
            gemm_tn(ckk, oc, ocols, E::ONE, self.w.data(), grad, E::ZERO, &mut dcol);
            let dx = col2im(&dcol, c, h, w, kh, kw, self.stride, self.padding, oh, ow);
            self.x.accumulate_grad_owned(dx);
        }
        if let Some(b) = &self.bias {
            if b.requires_grad() {
                let mut db = vec![E::ZERO; oc];
                for o in 0..oc {
                    let mut s = E::ZERO;
                    for v in &grad[o * ocols..(o + 1) * ocols] {
                        s += *v;
                    }
                    db[o] = s;
                }
                b.accumulate_grad_owned(db);
            }
        }
    }
}

pub fn conv2d<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    conv2d_act(x, w, bias, stride, padding, false)
}

/// conv2d with an optionally fused relu on the output.
pub fn conv2d_act<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
    relu: bool,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 || ws.len() != 4 {
        return Err(Error::InvalidShape(format!("conv2d expects x[C,H,W], w[OC,C,KH,KW]; got {:?} and {:?}", xs, ws)));
    }
    if stride < 1 {
        return Err(Error::InvalidShape("conv2d stride must be >= 1".into()));
    }
    let (c, h, wd) = (xs[0], xs[1], xs[2]);
    let (oc, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wc != c {
        return Err(Error::InvalidShape(format!("conv2d channel mismatch: input {c}, kernel {wc}")));
    }
    if kh > h + 2 * padding || kw > wd + 2 * padding {
        return Err(Error::InvalidShape(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            wd + 2 * padding
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [oc] {
            return Err(Error::InvalidShape(format!("conv2d bias shape {:?}, expected [{oc}]", b.shape())));
        }
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let ckk = c * kh * kw;
    let ocols = oh * ow;
    let col = im2col(x.data(), c, h, wd, kh, kw, stride, padding, oh, ow);
    let mut y = vec![E::ZERO; oc * ocols];
    gemm_nn(oc, ckk, ocols, E::ONE, w.data(), &col, E::ZERO, &mut y);
    if let Some(b) = bias {
        let bd = b.data();
        for o in 0..oc {
            let bv = bd[o];
            for v in &mut y[o * ocols..(o + 1) * ocols] {
                *v += bv;
            }
        }
    }
    if relu {
        for v in &mut y {
            *v = v.maximum(E::ZERO);
        }
    }
    Ok(Tensor::from_op(
        vec![oc, oh, ow],
        y,
        Box::new(Conv2d {
            x: x.clone(),
            w: w.clone(),
            bias: bias.cloned(),
            stride,
            padding,
            out_hw: (oh, ow),
            relu,
            col,
        }),
    ))
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

struct Reduction<E: Elem> {
    x: Tensor<E>,
    kind: Reduce,
    /// map from input flat index to output flat index
    out_index: Arc<Vec<u32>>,
    /// elements reduced per output slot
    count: usize,
    /// argmax input index per output slot (Max only)
    argmax: Vec<u32>,
}

impl<E: Elem> BackwardRule<E> for Reduction<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let n = self.x.numel();
        let mut dx = vec![E::ZERO; n];
        match self.kind {
            Reduce::Sum => {
                for i in 0..n {
                    dx[i] = grad[self.out_index[i] as usize];
                }
            }
            Reduce::Mean => {
                let inv = E::from_f64(1.0 / self.count as f64);
                for i in 0..n {
                    dx[i] = grad[self.out_index[i] as usize] * inv;
                }
            }
            Reduce::Max => {
                for (o, &amax) in self.argmax.iter().enumerate() {
                    dx[amax as usize] += grad[o];
                }
            }
        }
        self.x.accumulate_grad_owned(dx);
    }
}

pub fn reduce<E: Elem>(x: &Tensor<E>, kind: Reduce, axes: &[usize]) -> Result<Tensor<E>> {
    let shape = x.shape();
    let rank = shape.len();
    if axes.is_empty() {
        return Err(Error::InvalidShape("reduce requires at least one axis".into()));
    }
    let mut ax: Vec<usize> = axes.to_vec();
    ax.sort_unstable();
    ax.dedup();
    if ax.len() != axes.len() || ax.iter().any(|&a| a >= rank) {
        return Err(Error::InvalidShape(format!("invalid reduce axes {:?} for shape {:?}", axes, shape)));
    }
    let reduced: Vec<bool> = (0..rank).map(|d| ax.contains(&d)).collect();
    let out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| shape[d]).collect();
    let out_numel: usize = out_shape.iter().product();
    let count: usize = ax.iter().map(|&d| shape[d]).product();

    // Per-input-element output slot, computed from mixed-radix digits.
    let n = x.numel();
    let mut out_index = vec![0u32; n];
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out_strides = Vec::with_capacity(rank);
    {
        let mut acc = out_numel;
        for d in 0..rank {
            if reduced[d] {
                out_strides.push(0);
            } else {
                acc /= shape[d];
                out_strides.push(acc);
            }
        }
    }
    for (i, oi) in out_index.iter_mut().enumerate() {
        let mut rem = i;
        let mut o = 0usize;
        for d in 0..rank {
            let digit = rem / in_strides[d];
            rem %= in_strides[d];
            o += digit * out_strides[d];
        }
        *oi = o as u32;
    }

    let xd = x.data();
    let mut data;
    let mut argmax = Vec::new();
    match kind {
        Reduce::Sum | Reduce::Mean => {
            let mut acc = vec![0.0f64; out_numel];
            for i in 0..n {
                acc[out_index[i] as usize] += xd[i].to_f64();
            }
            let scale = if kind == Reduce::Mean { 1.0 / count as f64 } else { 1.0 };
            data = acc.into_iter().map(|v| E::from_f64(v * scale)).collect();
        }
        Reduce::Max => {
            data = vec![E::NEG_INFINITY; out_numel];
            argmax = vec![0u32; out_numel];
            for i in 0..n {
                let o = out_index[i] as usize;
                if xd[i] > data[o] {
                    data[o] = xd[i];
                    argmax[o] = i as u32;
                }
            }
        }
    }
    let out_index = Arc::new(out_index);
    Ok(Tensor::from_op(out_shape, data, Box::new(Reduction { x: x.clone(), kind, out_index, count, argmax })))
}

struct SumAll<E: Elem> {
    x: Tensor<E>,
    mean: bool,
}

impl<E: Elem> BackwardRule<E> for SumAll<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let g = if self.mean { grad[0] * E::from_f64(1.0 / self.x.numel() as f64) } else { grad[0] };
        self.x.accumulate_grad_owned(vec![g; self.x.numel()]);
    }
}

// ---------------------------------------------------------------------------
// softmax / log_softmax along one axis
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum SoftKind {
    Softmax,
    LogSoftmax,
}

struct Softmax<E: Elem> {
    x: Tensor<E>,
    kind: SoftKind,
    axis: usize,
}

fn rows_of(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<E: Elem> BackwardRule<E> for Softmax<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let (outer, len, inner) = rows_of(self.x.shape(), self.axis);
        let yd = out.data();
        let mut dx = vec![E::ZERO; self.x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                match self.kind {
                    SoftKind::Softmax => {
                        let mut s = E::ZERO;
                        for j in 0..len {
                            let ix = base + j * inner;
                            s += grad[ix] * yd[ix];
                        }
                        for j in 0..len {
                            let ix = base + j * inner;
                            dx[ix] = yd[ix] * (grad[ix] - s);
                        }
                    }
                    SoftKind::LogSoftmax => {
                        let mut s = E::ZERO;
                        for j in 0..len {
                            s += grad[base + j * inner];
                        }
                        for j in 0..len {
                            let ix = base + j * inner;
                            dx[ix] = grad[ix] - yd[ix].exp() * s;
                        }
                    }
                }
            }
        }
        self.x.accumulate_grad_owned(dx);
    }
}

fn softmax_impl<E: Elem>(x: &Tensor<E>, axis: usize, kind: SoftKind) -> Result<Tensor<E>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidShape(format!("softmax axis {axis} out of range for {:?}", shape)));
    }
    if shape[axis] == 0 {
        return Err(Error::InvalidShape("softmax over an empty axis".into()));
    }
    let (outer, len, inner) = rows_of(shape, axis);
    let xd = x.data();
    let mut data = vec![E::ZERO; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = E::NEG_INFINITY;
            for j in 0..len {
                m = m.maximum(xd[base + j * inner]);
            }
            let mut z = 0.0f64;
            for j in 0..len {
                z += (xd[base + j * inner] - m).exp().to_f64();
            }
            match kind {
                SoftKind::Softmax => {
                    let inv = E::from_f64(1.0 / z);
                    for j in 0..len {
                        let ix = base + j * inner;
                        data[ix] = (xd[ix] - m).exp() * inv;
                    }
                }
                SoftKind::LogSoftmax => {
                    let lz = E::from_f64(z.ln());
                    for j in 0..len {
                        let ix = base + j * inner;
                        data[ix] = xd[ix] - m - lz;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(shape.to_vec(), data, Box::new(Softmax { x: x.clone(), kind, axis })))
}

// ---------------------------------------------------------------------------
// bilinear sampling (resize and box crop)
// ---------------------------------------------------------------------------

struct BilinearSample<E: Elem> {
    x: Tensor<E>,
    ys: Arc<Vec<(usize, usize, f64)>>,
    xs: Arc<Vec<(usize, usize, f64)>>,
}

/// Half-pixel-center sample positions across `[lo, hi)` of a length-`n` axis:
/// src = lo + (i + 0.5) * (hi - lo) / out - 0.5, clamped into [0, n-1].
fn sample_axis(n: usize, lo: f64, hi: f64, out: usize) -> Vec<(usize, usize, f64)> {
    let mut v = Vec::with_capacity(out);
    let span = hi - lo;
    for i in 0..out {
        let s = (lo + (i as f64 + 0.5) * span / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        v.push((i0, i1, s - i0 as f64));
    }
    v
}

impl<E: Elem> BackwardRule<E> for BilinearSample<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let xs = self.x.shape();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let os = out.shape();
        let (oh, ow) = (os[1], os[2]);
        let mut dx = vec![E::ZERO; self.x.numel()];
        for ci in 0..c {
            let xplane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for i in 0..oh {
                let (y0, y1, fy) = self.ys[i];
                for j in 0..ow {
                    let (x0, x1, fx) = self.xs[j];
                    let g = grad[(ci * oh + i) * ow + j];
                    let (fy, fx) = (E::from_f64(fy), E::from_f64(fx));
                    let one = E::ONE;
                    xplane[y0 * w + x0] += g * (one - fy) * (one - fx);
                    xplane[y0 * w + x1] += g * (one - fy) * fx;
                    xplane[y1 * w + x0] += g * fy * (one - fx);
                    xplane[y1 * w + x1] += g * fy * fx;
                }
            }
        }
        self.x.accumulate_grad_owned(dx);
    }
}

fn bilinear_sample<E: Elem>(
    x: &Tensor<E>,
    box_yxyx: (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::InvalidShape(format!("bilinear sampling expects [C,H,W], got {:?}", xs)));
    }
    if out_h < 1 || out_w < 1 {
        return Err(Error::InvalidShape("output extents must be >= 1".into()));
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let (y0, x0, y1, x1) = box_yxyx;
    if !(y1 > y0 && x1 > x0) {
        return Err(Error::InvalidShape(format!("degenerate sample box {:?}", box_yxyx)));
    }
    let ys = Arc::new(sample_axis(h, y0, y1, out_h));
    let xsamp = Arc::new(sample_axis(w, x0, x1, out_w));
    let xd = x.data();
    let mut data = vec![E::ZERO; c * out_h * out_w];
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        for i in 0..out_h {
            let (ry0, ry1, fy) = ys[i];
            for j in 0..out_w {
                let (rx0, rx1, fx) = xsamp[j];
                let v00 = plane[ry0 * w + rx0].to_f64();
                let v01 = plane[ry0 * w + rx1].to_f64();
                let v10 = plane[ry1 * w + rx0].to_f64();
                let v11 = plane[ry1 * w + rx1].to_f64();
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                data[(ci * out_h + i) * out_w + j] = E::from_f64(top + fy * (bot - top));
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, out_h, out_w],
        data,
        Box::new(BilinearSample { x: x.clone(), ys, xs: xsamp }),
    ))
}

// ---------------------------------------------------------------------------
// fused recurrent scan and attention energies
// ---------------------------------------------------------------------------

struct LstmScan<E: Elem> {
    xproj: Tensor<E>,
    w_hh: Tensor<E>,
    bias: Tensor<E>,
    h0: Option<Tensor<E>>,
    c0: Option<Tensor<E>>,
    reverse: bool,
    /// post-activation gates (i,f,g,o) per position, input order
    acts: Vec<E>,
    /// cell states per position, input order
    cells: Vec<E>,
}

impl<E: Elem> LstmScan<E> {
    fn scan_t(&self, n: usize, step: usize) -> usize {
        if self.reverse {
            n - 1 - step
        } else {
            step
        }
    }
}

impl<E: Elem> BackwardRule<E> for LstmScan<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        let mut v = vec![self.xproj.clone(), self.w_hh.clone(), self.bias.clone()];
        if let Some(h0) = &self.h0 {
            v.push(h0.clone());
        }
        if let Some(c0) = &self.c0 {
            v.push(c0.clone());
        }
        v
    }

    fn backward(&self, out: &Tensor<E>, grad: &[E]) {
        let n = self.xproj.shape()[0];
        let h = self.w_hh.shape()[0];
        let h4 = 4 * h;
        let outd = out.data(); // [N, 2H]: h rows | c rows
        let whh = self.w_hh.data();

        let mut dgates_all = vec![E::ZERO; n * h4];
        let mut dh_next = vec![E::ZERO; h];
        let mut dc_next = vec![E::ZERO; h];
        for step in (0..n).rev() {
            let t = self.scan_t(n, step);
            let (hprev, cprev): (&[E], &[E]) = if step == 0 {
                (self.h0.as_ref().map(|t| t.data()).unwrap_or(&[]), self.c0.as_ref().map(|t| t.data()).unwrap_or(&[]))
            } else {
                let tp = self.scan_t(n, step - 1);
                (&outd[tp * 2 * h..tp * 2 * h + h], &self.cells[tp * h..(tp + 1) * h])
            };
            let acts = &self.acts[t * h4..(t + 1) * h4];
            let dg = &mut dgates_all[t * h4..(t + 1) * h4];
            for j in 0..h {
                let dh = grad[t * 2 * h + j] + dh_next[j];
                let c = self.cells[t * h + j];
                let tc = c.tanh();
                let i = acts[j];
                let f = acts[h + j];
                let gg = acts[2 * h + j];
                let o = acts[3 * h + j];
                let dc = dc_next[j] + grad[t * 2 * h + h + j] + dh * o * (E::ONE - tc * tc);
                let cp = if cprev.is_empty() { E::ZERO } else { cprev[j] };
                let d_o = dh * tc;
                let d_i = dc * gg;
                let d_g = dc * i;
                let d_f = dc * cp;
                dg[j] = d_i * i * (E::ONE - i);
                dg[h + j] = d_f * f * (E::ONE - f);
                dg[2 * h + j] = d_g * (E::ONE - gg * gg);
                dg[3 * h + j] = d_o * o * (E::ONE - o);
                dc_next[j] = dc * f;
            }
            // dh_prev = dgates_t . w_hh^T
            let _ = hprev;
            let mut dh_prev = vec![E::ZERO; h];
            gemm_nt(1, h4, h, E::ONE, dg, whh, E::ZERO, &mut dh_prev);
            dh_next = dh_prev;
        }

        if self.xproj.requires_grad() {
            self.xproj.accumulate_grad(&dgates_all);
        }
        if self.bias.requires_grad() {
            let mut db = vec![E::ZERO; h4];
            for t in 0..n {
                for j in 0..h4 {
                    db[j] += dgates_all[t * h4 + j];
                }
            }
            self.bias.accumulate_grad_owned(db);
        }
        if self.w_hh.requires_grad() {
            // pair each scan step's previous hidden state with its dgates
            let mut hp = vec![E::ZERO; n * h];
            for step in 1..n {
                let t = self.scan_t(n, step);
                let tp = self.scan_t(n, step - 1);
                hp[t * h..(t + 1) * h].copy_from_slice(&outd[tp * 2 * h..tp * 2 * h + h]);
            }
            if let Some(h0) = &self.h0 {
                let t0 = self.scan_t(n, 0);
                hp[t0 * h..(t0 + 1) * h].copy_from_slice(h0.data());
            }
            let mut dwhh = vec![E::ZERO; h * h4];
            gemm_tn(h, n, h4, E::ONE, &hp, &dgates_all, E::ZERO, &mut dwhh);
            self.w_hh.accumulate_grad_owned(dwhh);
        }
        if let Some(h0) = &self.h0 {
            if h0.requires_grad() {
                h0.accumulate_grad(&dh_next);
            }
        }
        if let Some(c0) = &self.c0 {
            if c0.requires_grad() {
                c0.accumulate_grad(&dc_next);
            }
        }
    }
}

/// Run a whole LSTM scan as one recorded operation. `xproj` carries the
/// already-projected inputs [N, 4H] (gate order i, f, g, o); the result is
/// [N, 2H] with hidden states in columns 0..H and cell states in H..2H,
/// both in input position order. `reverse` scans right to left. Initial
/// state defaults to zeros.
pub fn lstm_scan<E: Elem>(
    xproj: &Tensor<E>,
    w_hh: &Tensor<E>,
    bias: &Tensor<E>,
    init: Option<(&Tensor<E>, &Tensor<E>)>,
    reverse: bool,
) -> Result<Tensor<E>> {
    let (xs, ws) = (xproj.shape(), w_hh.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || ws[1] != 4 * ws[0] || bias.shape() != [ws[1]] {
        return Err(Error::InvalidShape(format!(
            "lstm_scan xproj {:?}, w_hh {:?}, bias {:?}",
            xs,
            ws,
            bias.shape()
        )));
    }
    let (n, h) = (xs[0], ws[0]);
    let h4 = 4 * h;
    if let Some((h0, c0)) = init {
        if h0.shape() != [1, h] || c0.shape() != [1, h] {
            return Err(Error::InvalidShape(format!("lstm_scan init {:?}/{:?}", h0.shape(), c0.shape())));
        }
    }
    let xp = xproj.data();
    let whh = w_hh.data();
    let bd = bias.data();
    let mut acts = vec![E::ZERO; n * h4];
    let mut cells = vec![E::ZERO; n * h];
    let mut states = vec![E::ZERO; n * 2 * h];
    let mut hprev: Vec<E> = init.map(|(h0, _)| h0.data().to_vec()).unwrap_or_else(|| vec![E::ZERO; h]);
    let mut cprev: Vec<E> = init.map(|(_, c0)| c0.data().to_vec()).unwrap_or_else(|| vec![E::ZERO; h]);
    let mut gates = vec![E::ZERO; h4];
    for step in 0..n {
        let t = if reverse { n - 1 - step } else { step };
        gates.copy_from_slice(&xp[t * h4..(t + 1) * h4]);
        for j in 0..h4 {
            gates[j] += bd[j];
        }
        gemm_nn(1, h, h4, E::ONE, &hprev, whh, E::ONE, &mut gates);
        let a = &mut acts[t * h4..(t + 1) * h4];
        for j in 0..h {
            let i = E::ONE / (E::ONE + (-gates[j]).exp());
            let f = E::ONE / (E::ONE + (-gates[h + j]).exp());
            let g = gates[2 * h + j].tanh();
            let o = E::ONE / (E::ONE + (-gates[3 * h + j]).exp());
            let c = f * cprev[j] + i * g;
            let hn = o * c.tanh();
            a[j] = i;
            a[h + j] = f;
            a[2 * h + j] = g;
            a[3 * h + j] = o;
            cells[t * h + j] = c;
            states[t * 2 * h + j] = hn;
            states[t * 2 * h + h + j] = c;
        }
        hprev.copy_from_slice(&states[t * 2 * h..t * 2 * h + h]);
        cprev.copy_from_slice(&cells[t * h..(t + 1) * h]);
    }
    Ok(Tensor::from_op(
        vec![n, 2 * h],
        states,
        Box::new(LstmScan {
            xproj: xproj.clone(),
            w_hh: w_hh.clone(),
            bias: bias.clone(),
            h0: init.map(|(h0, _)| h0.clone()),
            c0: init.map(|(_, c0)| c0.clone()),
            reverse,
            acts,
            cells,
        }),
    ))
}

struct AttnEnergies<E: Elem> {
    ctx_proj: Tensor<E>,
    query: Tensor<E>,
    v: Tensor<E>,
    /// tanh(ctx_proj + query) saved from the forward pass, [N, D]
    tanhs: Vec<E>,
}

impl<E: Elem> BackwardRule<E> for AttnEnergies<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.ctx_proj.clone(), self.query.clone(), self.v.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        let (n, d) = (self.ctx_proj.shape()[0], self.ctx_proj.shape()[1]);
        let vd = self.v.data();
        let need_cp = self.ctx_proj.requires_grad();
        let need_q = self.query.requires_grad();
        let need_v = self.v.requires_grad();
        let mut dcp = if need_cp { vec![E::ZERO; n * d] } else { Vec::new() };
        let mut dq = if need_q { vec![E::ZERO; d] } else { Vec::new() };
        let mut dv = if need_v { vec![E::ZERO; d] } else { Vec::new() };
        for i in 0..n {
            let g = grad[i];
            let trow = &self.tanhs[i * d..(i + 1) * d];
            for j in 0..d {
                let t = trow[j];
                let slope = g * vd[j] * (E::ONE - t * t);
                if need_cp {
                    dcp[i * d + j] = slope;
                }
                if need_q {
                    dq[j] += slope;
                }
                if need_v {
                    dv[j] += g * t;
                }
            }
        }
        if need_cp {
            self.ctx_proj.accumulate_grad_owned(dcp);
        }
        if need_q {
            self.query.accumulate_grad_owned(dq);
        }
        if need_v {
            self.v.accumulate_grad_owned(dv);
        }
    }
}

/// Additive attention energies e_i = v . tanh(ctx_proj[i] + query), fused
/// into one operation.
pub fn attn_energies<E: Elem>(ctx_proj: &Tensor<E>, query: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
    let s = ctx_proj.shape();
    if s.len() != 2 || query.shape() != [s[1]] || v.shape() != [s[1]] {
        return Err(Error::InvalidShape(format!(
            "attn_energies ctx {:?}, query {:?}, v {:?}",
            s,
            query.shape(),
            v.shape()
        )));
    }
    let (n, d) = (s[0], s[1]);
    let cp = ctx_proj.data();
    let qd = query.data();
    let vd = v.data();
    let mut tanhs = vec![E::ZERO; n * d];
    let mut data = vec![E::ZERO; n];
    for i in 0..n {
        let row = &cp[i * d..(i + 1) * d];
        let trow = &mut tanhs[i * d..(i + 1) * d];
        let mut e = E::ZERO;
        for j in 0..d {
            let t = (row[j] + qd[j]).tanh();
            trow[j] = t;
            e += vd[j] * t;
        }
        data[i] = e;
    }
    Ok(Tensor::from_op(
        vec![n],
        data,
        Box::new(AttnEnergies { ctx_proj: ctx_proj.clone(), query: query.clone(), v: v.clone(), tanhs }),
    ))
}

// ---------------------------------------------------------------------------
// bias adds
// ---------------------------------------------------------------------------

struct BiasChw<E: Elem> {
    x: Tensor<E>,
    b: Tensor<E>,
}

impl<E: Elem> BackwardRule<E> for BiasChw<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone(), self.b.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        if self.x.requires_grad() {
            self.x.accumulate_grad(grad);
        }
        if self.b.requires_grad() {
            let c = self.b.numel();
            let hw = self.x.numel() / c;
            let mut db = vec![E::ZERO; c];
            for ci in 0..c {
                let mut s = E::ZERO;
                for v in &grad[ci * hw..(ci + 1) * hw] {
                    s += *v;
                }
                db[ci] = s;
            }
            self.b.accumulate_grad_owned(db);
        }
    }
}

struct BiasRows<E: Elem> {
    x: Tensor<E>,
    b: Tensor<E>,
}

impl<E: Elem> BackwardRule<E> for BiasRows<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone(), self.b.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        if self.x.requires_grad() {
            self.x.accumulate_grad(grad);
        }
        if self.b.requires_grad() {
            let f = self.b.numel();
            let rows = self.x.numel() / f;
            let mut db = vec![E::ZERO; f];
            for r in 0..rows {
                for j in 0..f {
                    db[j] += grad[r * f + j];
                }
            }
            self.b.accumulate_grad_owned(db);
        }
    }
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

struct Reshape<E: Elem> {
    x: Tensor<E>,
}

impl<E: Elem> BackwardRule<E> for Reshape<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        if self.x.requires_grad() {
            self.x.accumulate_grad(grad);
        }
    }
}

struct Transpose2d<E: Elem> {
    x: Tensor<E>,
}

impl<E: Elem> BackwardRule<E> for Transpose2d<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let (n, m) = (out.shape()[0], out.shape()[1]); // out is [N x M], x is [M x N]
        let mut dx = vec![E::ZERO; self.x.numel()];
        for i in 0..n {
            for j in 0..m {
                dx[j * n + i] = grad[i * m + j];
            }
        }
        self.x.accumulate_grad_owned(dx);
    }
}

struct StackRows<E: Elem> {
    rows: Vec<Tensor<E>>,
    width: usize,
}

impl<E: Elem> BackwardRule<E> for StackRows<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        self.rows.clone()
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        for (r, t) in self.rows.iter().enumerate() {
            if t.requires_grad() {
                t.accumulate_grad(&grad[r * self.width..(r + 1) * self.width]);
            }
        }
    }
}

struct ConcatCols<E: Elem> {
    a: Tensor<E>,
    b: Tensor<E>,
}

impl<E: Elem> BackwardRule<E> for ConcatCols<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, out: &Tensor<E>, grad: &[E]) {
        let n = out.shape()[0];
        let fa = self.a.shape()[1];
        let fb = self.b.shape()[1];
        if self.a.requires_grad() {
            let mut da = vec![E::ZERO; n * fa];
            for r in 0..n {
                da[r * fa..(r + 1) * fa].copy_from_slice(&grad[r * (fa + fb)..r * (fa + fb) + fa]);
            }
            self.a.accumulate_grad_owned(da);
        }
        if self.b.requires_grad() {
            let mut db = vec![E::ZERO; n * fb];
            for r in 0..n {
                db[r * fb..(r + 1) * fb].copy_from_slice(&grad[r * (fa + fb) + fa..(r + 1) * (fa + fb)]);
            }
            self.b.accumulate_grad_owned(db);
        }
    }
}

struct SliceCols<E: Elem> {
    x: Tensor<E>,
    from: usize,
    to: usize,
}

impl<E: Elem> BackwardRule<E> for SliceCols<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let (n, f) = (self.x.shape()[0], self.x.shape()[1]);
        let width = self.to - self.from;
        let mut dx = vec![E::ZERO; n * f];
        for r in 0..n {
            dx[r * f + self.from..r * f + self.to].copy_from_slice(&grad[r * width..(r + 1) * width]);
        }
        self.x.accumulate_grad_owned(dx);
    }
}

struct SliceRows<E: Elem> {
    x: Tensor<E>,
    from: usize,
    to: usize,
}

impl<E: Elem> BackwardRule<E> for SliceRows<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let f = self.x.shape()[1];
        let mut dx = vec![E::ZERO; self.x.numel()];
        dx[self.from * f..self.to * f].copy_from_slice(grad);
        self.x.accumulate_grad_owned(dx);
    }
}

struct RowSelect<E: Elem> {
    x: Tensor<E>,
    row: usize,
}

impl<E: Elem> BackwardRule<E> for RowSelect<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let f = self.x.shape()[1];
        let mut dx = vec![E::ZERO; self.x.numel()];
        dx[self.row * f..(self.row + 1) * f].copy_from_slice(grad);
        self.x.accumulate_grad_owned(dx);
    }
}

struct GetIndex<E: Elem> {
    x: Tensor<E>,
    index: usize,
}

impl<E: Elem> BackwardRule<E> for GetIndex<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let mut dx = vec![E::ZERO; self.x.numel()];
        dx[self.index] = grad[0];
        self.x.accumulate_grad_owned(dx);
    }
}

struct GatherRows<E: Elem> {
    x: Tensor<E>,
    ids: Vec<usize>,
}

impl<E: Elem> BackwardRule<E> for GatherRows<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn backward(&self, _out: &Tensor<E>, grad: &[E]) {
        if !self.x.requires_grad() {
            return;
        }
        let v = self.x.shape()[1];
        let mut dx = vec![E::ZERO; self.x.numel()];
        for (r, &id) in self.ids.iter().enumerate() {
            dx[r * v + id] += grad[r];
        }
        self.x.accumulate_grad_owned(dx);
    }
}

// ---------------------------------------------------------------------------
// public tensor methods
// ---------------------------------------------------------------------------

impl<E: Elem> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary(BinKind::Add, self, other)
    }
    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary(BinKind::Sub, self, other)
    }
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary(BinKind::Mul, self, other)
    }
    pub fn relu(&self) -> Tensor<E> {
        unary(UnKind::Relu, self).expect("relu is total")
    }
    pub fn tanh(&self) -> Tensor<E> {
        unary(UnKind::Tanh, self).expect("tanh is total")
    }
    pub fn sigmoid(&self) -> Tensor<E> {
        unary(UnKind::Sigmoid, self).expect("sigmoid is total")
    }
    pub fn exp(&self) -> Tensor<E> {
        unary(UnKind::Exp, self).expect("exp is total")
    }
    pub fn log(&self) -> Result<Tensor<E>> {
        unary(UnKind::Log, self)
    }
    pub fn neg(&self) -> Tensor<E> {
        unary(UnKind::Neg, self).expect("neg is total")
    }
    pub fn abs(&self) -> Tensor<E> {
        unary(UnKind::Abs, self).expect("abs is total")
    }
    /// x * a (compile-time constant factor).
    pub fn scale(&self, a: f64) -> Tensor<E> {
        unary(UnKind::Affine(a, 0.0), self).expect("affine is total")
    }
    pub fn add_scalar(&self, b: f64) -> Tensor<E> {
        unary(UnKind::Affine(1.0, b), self).expect("affine is total")
    }
    pub fn clamp_min(&self, c: f64) -> Tensor<E> {
        unary(UnKind::ClampMin(c), self).expect("clamp is total")
    }

    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::InvalidShape(format!("matmul {:?} x {:?}", a, b)));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut data = vec![E::ZERO; m * n];
        gemm_nn(m, k, n, E::ONE, self.data(), other.data(), E::ZERO, &mut data);
        Ok(Tensor::from_op(vec![m, n], data, Box::new(MatMul { a: self.clone(), b: other.clone() })))
    }

    pub fn reduce(&self, kind: Reduce, axes: &[usize]) -> Result<Tensor<E>> {
        reduce(self, kind, axes)
    }

    /// Reductions accumulate in f64 and cast the result back to storage
    /// precision, so loss values stay within 1e-6 of an exact scalar loop.
    pub fn sum_all(&self) -> Tensor<E> {
        let mut s = 0.0f64;
        for v in self.data() {
            s += v.to_f64();
        }
        Tensor::from_op(vec![], vec![E::from_f64(s)], Box::new(SumAll { x: self.clone(), mean: false }))
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let mut s = 0.0f64;
        for v in self.data() {
            s += v.to_f64();
        }
        let m = E::from_f64(s / self.numel() as f64);
        Tensor::from_op(vec![], vec![m], Box::new(SumAll { x: self.clone(), mean: true }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        softmax_impl(self, axis, SoftKind::Softmax)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<E>> {
        softmax_impl(self, axis, SoftKind::LogSoftmax)
    }

    /// Resample [C,H,W] to [C,out_h,out_w] with bilinear interpolation under
    /// the half-pixel-center convention.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::InvalidShape(format!("bilinear_resize expects [C,H,W], got {:?}", s)));
        }
        bilinear_sample(self, (0.0, 0.0, s[1] as f64, s[2] as f64), out_h, out_w)
    }

    /// Bilinear crop of a fractional box (y0,x0,y1,x1 in source pixel units)
    /// resized to [C,out_h,out_w]. Same convention as `bilinear_resize`,
    /// to which it reduces when the box covers the whole map.
    pub fn crop_resize(&self, box_yxyx: (f64, f64, f64, f64), out_h: usize, out_w: usize) -> Result<Tensor<E>> {
        bilinear_sample(self, box_yxyx, out_h, out_w)
    }

    pub fn conv2d(&self, w: &Tensor<E>, bias: Option<&Tensor<E>>, stride: usize, padding: usize) -> Result<Tensor<E>> {
        conv2d(self, w, bias, stride, padding)
    }

    /// conv2d with the relu fused into the same operation.
    pub fn conv2d_relu(&self, w: &Tensor<E>, bias: Option<&Tensor<E>>, stride: usize, padding: usize) -> Result<Tensor<E>> {
        conv2d_act(self, w, bias, stride, padding, true)
    }

    /// Add per-channel bias to a [C,H,W] map.
    pub fn add_bias_chw(&self, b: &Tensor<E>) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 3 || b.shape() != [s[0]] {
            return Err(Error::InvalidShape(format!("bias {:?} for map {:?}", b.shape(), s)));
        }
        let hw = s[1] * s[2];
        let xd = self.data();
        let bd = b.data();
        let mut data = xd.to_vec();
        for c in 0..s[0] {
            let bv = bd[c];
            for v in &mut data[c * hw..(c + 1) * hw] {
                *v += bv;
            }
        }
        Ok(Tensor::from_op(s.to_vec(), data, Box::new(BiasChw { x: self.clone(), b: b.clone() })))
    }

    /// Add a bias row to every row of a [N,F] matrix.
    pub fn add_bias_rows(&self, b: &Tensor<E>) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 || b.shape() != [s[1]] {
            return Err(Error::InvalidShape(format!("row bias {:?} for matrix {:?}", b.shape(), s)));
        }
        let xd = self.data();
        let bd = b.data();
        let mut data = xd.to_vec();
        for r in 0..s[0] {
            for j in 0..s[1] {
                data[r * s[1] + j] += bd[j];
            }
        }
        Ok(Tensor::from_op(s.to_vec(), data, Box::new(BiasRows { x: self.clone(), b: b.clone() })))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::InvalidShape(format!("reshape {:?} -> {:?}", self.shape(), shape)));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.data().to_vec(), Box::new(Reshape { x: self.clone() })))
    }

    pub fn transpose2d(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape(format!("transpose2d expects a matrix, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let xd = self.data();
        let mut data = vec![E::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        Ok(Tensor::from_op(vec![n, m], data, Box::new(Transpose2d { x: self.clone() })))
    }

    /// Row `i` of a [N,F] matrix as a [F] vector.
    pub fn row(&self, i: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 || i >= s[0] {
            return Err(Error::InvalidShape(format!("row {i} of {:?}", s)));
        }
        let f = s[1];
        let data = self.data()[i * f..(i + 1) * f].to_vec();
        Ok(Tensor::from_op(vec![f], data, Box::new(RowSelect { x: self.clone(), row: i })))
    }

    /// One element of a rank-1 tensor as a scalar tensor.
    pub fn get(&self, i: usize) -> Result<Tensor<E>> {
        if self.shape().len() != 1 || i >= self.numel() {
            return Err(Error::InvalidShape(format!("get {i} of {:?}", self.shape())));
        }
        Ok(Tensor::from_op(vec![], vec![self.data()[i]], Box::new(GetIndex { x: self.clone(), index: i })))
    }

    /// Rows [from, to) of a [N,F] matrix.
    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 || from >= to || to > s[0] {
            return Err(Error::InvalidShape(format!("slice_rows {from}..{to} of {:?}", s)));
        }
        let f = s[1];
        let data = self.data()[from * f..to * f].to_vec();
        Ok(Tensor::from_op(vec![to - from, f], data, Box::new(SliceRows { x: self.clone(), from, to })))
    }

    /// Columns [from, to) of a [N,F] matrix.
    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 || from >= to || to > s[1] {
            return Err(Error::InvalidShape(format!("slice_cols {from}..{to} of {:?}", s)));
        }
        let (n, f) = (s[0], s[1]);
        let w = to - from;
        let xd = self.data();
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&xd[r * f + from..r * f + to]);
        }
        Ok(Tensor::from_op(vec![n, w], data, Box::new(SliceCols { x: self.clone(), from, to })))
    }

    /// x[r, ids[r]] for each row r of a [N,V] matrix -> [N].
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 || ids.len() != s[0] {
            return Err(Error::InvalidShape(format!("gather_rows of {:?} with {} ids", s, ids.len())));
        }
        let v = s[1];
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!("gather index {bad} out of vocabulary {v}")));
        }
        let xd = self.data();
        let data: Vec<E> = ids.iter().enumerate().map(|(r, &id)| xd[r * v + id]).collect();
        Ok(Tensor::from_op(vec![ids.len()], data, Box::new(GatherRows { x: self.clone(), ids: ids.to_vec() })))
    }
}

/// Stack [F] vectors into a [N,F] matrix.
pub fn stack_rows<E: Elem>(rows: &[Tensor<E>]) -> Result<Tensor<E>> {
    if rows.is_empty() {
        return Err(Error::InvalidShape("stack_rows of nothing".into()));
    }
    let f = rows[0].numel();
    if rows.iter().any(|r| r.shape().len() != 1 || r.numel() != f) {
        return Err(Error::InvalidShape("stack_rows requires equal-length vectors".into()));
    }
    let mut data = Vec::with_capacity(rows.len() * f);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Ok(Tensor::from_op(vec![rows.len(), f], data, Box::new(StackRows { rows: rows.to_vec(), width: f })))
}

/// Concatenate two matrices with equal row counts along columns.
pub fn concat_cols<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::InvalidShape(format!("concat_cols {:?} with {:?}", sa, sb)));
    }
    let (n, fa, fb) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(n * (fa + fb));
    for r in 0..n {
        data.extend_from_slice(&ad[r * fa..(r + 1) * fa]);
        data.extend_from_slice(&bd[r * fb..(r + 1) * fb]);
    }
    Ok(Tensor::from_op(vec![n, fa + fb], data, Box::new(ConcatCols { a: a.clone(), b: b.clone() })))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f32>, s: &[usize]) -> Tensor<f32> {
        Tensor::from_vec(v, s).unwrap()
    }

    #[test]
    fn relu_definition() {
        let x = t(vec![-1.0, 0.0, 2.0], &[3]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_bitwise_identity() {
        let x = t(vec![0.125, 3.5, -2.75, 1e-20], &[4]);
        let z = Tensor::scalar(0.0f32);
        let y = x.add(&z).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn mul_gradients_swap_operands() {
        let x = t(vec![2.0], &[1]).with_grad();
        let y = t(vec![3.0], &[1]).with_grad();
        let loss = x.mul(&y).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
        assert_eq!(y.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = t(vec![1.0, 2.0], &[2]);
        let y = t(vec![1.0, 2.0, 3.0], &[3]);
        assert!(matches!(x.add(&y), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn log_rejects_non_positive() {
        let x = t(vec![1.0, 0.0], &[2]);
        assert!(matches!(x.log(), Err(Error::Domain(_))));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = t(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let x = t(vec![5.0, -1.0, 2.0, 0.5], &[2, 2]);
        assert_eq!(eye.matmul(&x).unwrap().data(), x.data());
        let a = t(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(vec![1.0, 1.0], &[2, 1]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        assert!(a.matmul(&t(vec![1.0; 3], &[3, 1])).is_err());
    }

    #[test]
    fn conv2d_identity_kernel_and_all_ones() {
        let x = t((1..=9).map(|v| v as f32).collect(), &[1, 3, 3]);
        let w = t(vec![1.0], &[1, 1, 1, 1]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
        let ones = t(vec![1.0; 9], &[1, 3, 3]);
        let k = t(vec![1.0; 9], &[1, 1, 3, 3]);
        let y = ones.conv2d(&k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv2d_rejects_oversize_kernel() {
        let x = t(vec![1.0; 4], &[1, 2, 2]);
        let w = t(vec![1.0; 9], &[1, 1, 3, 3]);
        assert!(matches!(x.conv2d(&w, None, 1, 0), Err(Error::InvalidShape(_))));
        assert!(x.conv2d(&w, None, 1, 1).is_ok());
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let x = t(vec![0.0, 0.0], &[2]);
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-7 && (y.data()[1] - 0.5).abs() < 1e-7);

        let x1 = t(vec![0.3, -1.0, 2.0], &[3]);
        let x2 = x1.add_scalar(7.25);
        let (y1, y2) = (x1.softmax(0).unwrap(), x2.softmax(0).unwrap());
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let sum: f32 = y1.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reduce_axes_and_errors() {
        let x = t((1..=6).map(|v| v as f32).collect(), &[2, 3]);
        let s = x.reduce(Reduce::Sum, &[1]).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[6.0, 15.0]);
        let m = x.reduce(Reduce::Mean, &[0]).unwrap();
        assert_eq!(m.data(), &[2.5, 3.5, 4.5]);
        let mx = x.reduce(Reduce::Max, &[0, 1]).unwrap();
        assert_eq!(mx.shape(), &[] as &[usize]);
        assert_eq!(mx.item(), 6.0);
        assert!(matches!(x.reduce(Reduce::Sum, &[]), Err(Error::InvalidShape(_))));
        assert!(matches!(x.reduce(Reduce::Sum, &[2]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn bilinear_resize_identity_and_constancy() {
        let x = t((0..12).map(|v| v as f32).collect(), &[1, 3, 4]);
        let y = x.bilinear_resize(3, 4).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let c = t(vec![0.7; 16], &[1, 4, 4]);
        let y = c.bilinear_resize(2, 3).unwrap();
        for v in y.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_resize_of_full_box_equals_resize() {
        let x = t((0..16).map(|v| (v as f32).sin()).collect(), &[1, 4, 4]);
        let a = x.bilinear_resize(2, 3).unwrap();
        let b = x.crop_resize((0.0, 0.0, 4.0, 4.0), 2, 3).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn stack_and_concat_and_slice_roundtrip() {
        let a = t(vec![1.0, 2.0], &[2]);
        let b = t(vec![3.0, 4.0], &[2]);
        let m = stack_rows(&[a, b]).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        let n = t(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let cc = concat_cols(&m, &n).unwrap();
        assert_eq!(cc.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let back = cc.slice_cols(0, 2).unwrap();
        assert_eq!(back.data(), m.data());
    }

    #[test]
    fn gather_rows_checks_vocabulary() {
        let x = t(vec![0.1, 0.9, 0.8, 0.2], &[2, 2]);
        let g = x.gather_rows(&[1, 0]).unwrap();
        assert_eq!(g.data(), &[0.9, 0.8]);
        assert!(matches!(x.gather_rows(&[2, 0]), Err(Error::Contract(_))));
    }
}
