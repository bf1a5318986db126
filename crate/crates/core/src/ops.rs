//! Primitive kernels: forward evaluation and vector-Jacobian products.
//!
//! Every primitive works on dense row-major [`Array`]s. Reductions take a
//! contiguous run of axes and keep them as size-1 dimensions so that the
//! result broadcasts straight back against the input.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::par;

/// The closed set of differentiable primitives.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// 3x3 kernel, stride 1, zero same-padding. Inputs: `x [B,Ci,H,W]`,
    /// `w [Co,Ci,3,3]` and optionally `bias [Co]`.
    Conv2d,
    Relu,
    /// 2x2 average pool, stride 2.
    AvgPool2d,
    MeanOverAxes(Vec<usize>),
    /// Population variance (divides by the reduced count).
    VarOverAxes(Vec<usize>),
    SumOverAxes(Vec<usize>),
    Sqrt,
    /// Same-rank broadcast: every input extent is 1 or equal to the target.
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    Concat(usize),
    Scale(f64),
    Exp,
    Log,
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    /// Elementwise multiply by a fixed mask (already scaled by `1/(1-p)`).
    Dropout(Vec<f64>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d => "conv2d",
            Primitive::Relu => "relu",
            Primitive::AvgPool2d => "avgpool2d",
            Primitive::MeanOverAxes(_) => "mean_over_axes",
            Primitive::VarOverAxes(_) => "var_over_axes",
            Primitive::SumOverAxes(_) => "sum_over_axes",
            Primitive::Sqrt => "sqrt",
            Primitive::Broadcast(_) => "broadcast",
            Primitive::Reshape(_) => "reshape",
            Primitive::Concat(_) => "concat",
            Primitive::Scale(_) => "scale",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Dropout(_) => "dropout",
        }
    }
}

fn mismatch(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

fn arity(p: &Primitive, inputs: &[&Array], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(mismatch(format!("{} takes {:?} inputs, got {}", p.name(), allowed, inputs.len())))
    }
}

fn same_shape(a: &Array, b: &Array) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Split `shape` around a contiguous run of axes into `(outer, reduced, inner)`.
fn split_axes(shape: &[usize], axes: &[usize]) -> Result<(usize, usize, usize)> {
    if axes.is_empty() {
        return Err(mismatch("empty reduction axes"));
    }
    let first = axes[0];
    for (i, &a) in axes.iter().enumerate() {
        if a != first + i || a >= shape.len() {
            return Err(mismatch(format!("axes {axes:?} must be contiguous and < rank {}", shape.len())));
        }
    }
    let last = first + axes.len();
    let outer = shape[..first].iter().product();
    let red = shape[first..last].iter().product();
    let inner = shape[last..].iter().product();
    Ok((outer, red, inner))
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect()
}

fn sum_axes(x: &Array, axes: &[usize]) -> Result<Array> {
    let (o, r, n) = split_axes(x.shape(), axes)?;
    let d = x.data();
    let mut out = vec![0.0; o * n];
    for oi in 0..o {
        for ri in 0..r {
            let base = (oi * r + ri) * n;
            let row = &mut out[oi * n..(oi + 1) * n];
            for (acc, v) in row.iter_mut().zip(&d[base..base + n]) {
                *acc += v;
            }
        }
    }
    Array::new(reduced_shape(x.shape(), axes), out)
}

/// Repeat a reduced `[o, 1, n]` array back to `[o, r, n]`.
fn expand_axes(g: &Array, like: &[usize], axes: &[usize], scale: f64) -> Result<Array> {
    let (o, r, n) = split_axes(like, axes)?;
    let gd = g.data();
    let mut out = vec![0.0; o * r * n];
    for oi in 0..o {
        for ri in 0..r {
            let base = (oi * r + ri) * n;
            for (dst, &s) in out[base..base + n].iter_mut().zip(&gd[oi * n..(oi + 1) * n]) {
                *dst = s * scale;
            }
        }
    }
    Array::new(like.to_vec(), out)
}

fn check_broadcast(from: &[usize], to: &[usize]) -> Result<()> {
    if from.len() != to.len() || from.iter().zip(to).any(|(&f, &t)| f != 1 && f != t) {
        return Err(mismatch(format!("cannot broadcast {from:?} to {to:?}")));
    }
    Ok(())
}

fn broadcast(x: &Array, to: &[usize]) -> Result<Array> {
    let from = x.shape();
    check_broadcast(from, to)?;
    let rank = to.len();
    let total: usize = to.iter().product();
    let in_strides = crate::array::strides(from);
    let last = to[rank - 1];
    let last_bcast = from[rank - 1] == 1;
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let rows = total / last;
    let xd = x.data();
    for _ in 0..rows {
        let mut base = 0;
        for (d, &i) in idx.iter().enumerate() {
            if from[d] != 1 {
                base += i * in_strides[d];
            }
        }
        if last_bcast {
            out.extend(std::iter::repeat_n(xd[base], last));
        } else {
            out.extend_from_slice(&xd[base..base + last]);
        }
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Array::new(to.to_vec(), out)
}

/// Sum `g` (shaped like the broadcast target) back down to `from`.
fn unbroadcast(g: &Array, from: &[usize]) -> Result<Array> {
    let to = g.shape();
    let rank = to.len();
    let out_strides = crate::array::strides(from);
    let last = to[rank - 1];
    let last_bcast = from[rank - 1] == 1;
    let mut out = vec![0.0; from.iter().product()];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let gd = g.data();
    for row in 0..g.len() / last {
        let mut base = 0;
        for (d, &i) in idx.iter().enumerate() {
            if from[d] != 1 {
                base += i * out_strides[d];
            }
        }
        let src = &gd[row * last..(row + 1) * last];
        if last_bcast {
            out[base] += src.iter().sum::<f64>();
        } else {
            for (o, s) in out[base..base + last].iter_mut().zip(src) {
                *o += s;
            }
        }
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Array::new(from.to_vec(), out)
}

fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(mismatch(format!("matmul {sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Array::new(vec![m, n], out)
}

/// `a^T b` for `a [k, m]`, `b [k, n]`.
fn matmul_tn(a: &Array, b: &Array) -> Array {
    let (k, m, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Array::new(vec![m, n], out).expect("matmul_tn shape")
}

/// `a b^T` for `a [m, k]`, `b [n, k]`.
fn matmul_nt(a: &Array, b: &Array) -> Array {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
        }
    }
    Array::new(vec![m, n], out).expect("matmul_nt shape")
}

struct ConvDims {
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
}

fn conv_dims(x: &Array, w: &Array, bias: Option<&Array>) -> Result<ConvDims> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != sx[1] {
        return Err(mismatch(format!("conv2d input {sx:?} with kernel {sw:?}")));
    }
    if let Some(b) = bias {
        if b.shape() != [sw[0]] {
            return Err(mismatch(format!("conv2d bias {:?} for {} filters", b.shape(), sw[0])));
        }
    }
    Ok(ConvDims { b: sx[0], ci: sx[1], co: sw[0], h: sx[2], w: sx[3] })
}

/// Samples per grad-weight partial sum. Fixed, so the reduction order never
/// depends on the thread count.
const CONV_GROUP: usize = 8;
/// Output channels per register block.
const MR: usize = 8;

/// Dot product with eight independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Copy `[n, c, h, w]` into a zero border of one pixel, `[n, c, h+2, w+2]`.
fn pad1(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; planes * ph * pw];
    for p in 0..planes {
        for y in 0..h {
            let src = &x[(p * h + y) * w..(p * h + y + 1) * w];
            out[(p * ph + y + 1) * pw + 1..(p * ph + y + 1) * pw + 1 + w].copy_from_slice(src);
        }
    }
    out
}

/// Kernel `[co, ci, 3, 3]` regrouped as `[co/MR, ci, 9, MR]`, zero-padded in `co`.
fn pack_kernel(k: &[f64], co: usize, ci: usize) -> Vec<f64> {
    let blocks = co.div_ceil(MR);
    let mut out = vec![0.0; blocks * ci * 9 * MR];
    for o in 0..co {
        let (blk, r) = (o / MR, o % MR);
        for c in 0..ci {
            for t in 0..9 {
                out[((blk * ci + c) * 9 + t) * MR + r] = k[(o * ci + c) * 9 + t];
            }
        }
    }
    out
}

/// Same-padded 3x3 correlation of one padded sample `xp [ci, h+2, w+2]` with a
/// packed kernel into `out [co, h, w]`. Pixels are processed `NR` at a time.
fn conv_sample<const NR: usize>(
    xp: &[f64],
    kp: &[f64],
    bias: Option<&[f64]>,
    (ci, co, h, w): (usize, usize, usize, usize),
    out: &mut [f64],
) {
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    for blk in 0..co.div_ceil(MR) {
        let kb = &kp[blk * ci * 9 * MR..(blk + 1) * ci * 9 * MR];
        let rows = MR.min(co - blk * MR);
        for y in 0..h {
            for x0 in (0..w).step_by(NR) {
                let mut acc = [[0.0f64; NR]; MR];
                for c in 0..ci {
                    for ky in 0..3 {
                        let base = c * pplane + (y + ky) * pw + x0;
                        for kx in 0..3 {
                            let xv: &[f64; NR] = xp[base + kx..base + kx + NR].try_into().expect("strip");
                            let wv: &[f64; MR] = kb[(c * 9 + ky * 3 + kx) * MR..(c * 9 + ky * 3 + kx + 1) * MR].try_into().expect("block");
                            for r in 0..MR {
                                for l in 0..NR {
                                    acc[r][l] += wv[r] * xv[l];
                                }
                            }
                        }
                    }
                }
                for (r, acc_r) in acc.iter().enumerate().take(rows) {
                    let o = blk * MR + r;
                    let b0 = bias.map_or(0.0, |b| b[o]);
                    let dst = &mut out[(o * h + y) * w + x0..(o * h + y) * w + x0 + NR];
                    for (d, v) in dst.iter_mut().zip(acc_r) {
                        *d = v + b0;
                    }
                }
            }
        }
    }
}

fn strip_width(w: usize) -> usize {
    if w.is_multiple_of(8) {
        8
    } else if w.is_multiple_of(4) {
        4
    } else {
        1
    }
}

/// Batched same-padded correlation; `k` is `[co, ci, 3, 3]`.
fn conv_batch(x: &[f64], k: &[f64], bias: Option<&[f64]>, (b, ci, co, h, w): (usize, usize, usize, usize, usize)) -> Vec<f64> {
    let xp = pad1(x, b * ci, h, w);
    let kp = pack_kernel(k, co, ci);
    let per_in = ci * (h + 2) * (w + 2);
    let mut out = vec![0.0; b * co * h * w];
    let dims = (ci, co, h, w);
    par::for_each_chunk(&mut out, co * h * w, |bi, chunk| {
        let xs = &xp[bi * per_in..(bi + 1) * per_in];
        match strip_width(w) {
            8 => conv_sample::<8>(xs, &kp, bias, dims, chunk),
            4 => conv_sample::<4>(xs, &kp, bias, dims, chunk),
            _ => conv_sample::<1>(xs, &kp, bias, dims, chunk),
        }
    });
    out
}

fn conv2d(x: &Array, w: &Array, bias: Option<&Array>) -> Result<Array> {
    let ConvDims { b, ci, co, h, w: wd } = conv_dims(x, w, bias)?;
    let out = conv_batch(x.data(), w.data(), bias.map(|a| a.data()), (b, ci, co, h, wd));
    Array::new(vec![b, co, h, wd], out)
}

fn conv2d_grad_input(g: &Array, w: &Array, dims: &ConvDims) -> Array {
    let &ConvDims { b, ci, co, h, w: wd } = dims;
    // dx = g correlated with the kernel transposed in channels and flipped in space
    let mut flipped = vec![0.0; ci * co * 9];
    for o in 0..co {
        for c in 0..ci {
            for t in 0..9 {
                flipped[(c * co + o) * 9 + (8 - t)] = w.data()[(o * ci + c) * 9 + t];
            }
        }
    }
    let out = conv_batch(g.data(), &flipped, None, (b, co, ci, h, wd));
    Array::new(vec![b, ci, h, wd], out).expect("conv grad shape")
}

/// `dW[o, c, t] += sum_pixels g[o] * shifted xp[c]` for one sample, two output
/// channels at a time with one vector accumulator per tap.
fn grad_weight_sample<const NR: usize>(g: &[f64], xp: &[f64], (ci, co, h, w): (usize, usize, usize, usize), dw: &mut [f64]) {
    const MO: usize = 2;
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let plane = h * w;
    for o0 in (0..co).step_by(MO) {
        let mo = MO.min(co - o0);
        for c in 0..ci {
            let mut acc = [[[0.0f64; NR]; 9]; MO];
            for y in 0..h {
                for x0 in (0..w).step_by(NR) {
                    let gv: [[f64; NR]; MO] = std::array::from_fn(|r| {
                        if r < mo {
                            let o = o0 + r;
                            g[o * plane + y * w + x0..o * plane + y * w + x0 + NR].try_into().expect("strip")
                        } else {
                            [0.0; NR]
                        }
                    });
                    for ky in 0..3 {
                        let base = c * pplane + (y + ky) * pw + x0;
                        for kx in 0..3 {
                            let xv: &[f64; NR] = xp[base + kx..base + kx + NR].try_into().expect("strip");
                            for r in 0..MO {
                                for l in 0..NR {
                                    acc[r][ky * 3 + kx][l] += gv[r][l] * xv[l];
                                }
                            }
                        }
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate().take(mo) {
                for (t, lanes) in acc_r.iter().enumerate() {
                    dw[((o0 + r) * ci + c) * 9 + t] += lanes.iter().sum::<f64>();
                }
            }
        }
    }
}

fn conv2d_grad_weight(g: &Array, x: &Array, dims: &ConvDims) -> Array {
    let &ConvDims { b, ci, co, h, w: wd } = dims;
    let per_in = ci * (h + 2) * (wd + 2);
    let per_out = co * h * wd;
    let (gd, xd) = (g.data(), x.data());
    let sdims = (ci, co, h, wd);
    let partials = par::map_range(b.div_ceil(CONV_GROUP), |gi| {
        let g0 = gi * CONV_GROUP;
        let gn = CONV_GROUP.min(b - g0);
        let xp = pad1(&xd[g0 * ci * h * wd..(g0 + gn) * ci * h * wd], gn * ci, h, wd);
        let mut part = vec![0.0; co * ci * 9];
        for s in 0..gn {
            let gs = &gd[(g0 + s) * per_out..(g0 + s + 1) * per_out];
            let xs = &xp[s * per_in..(s + 1) * per_in];
            match strip_width(wd) {
                8 => grad_weight_sample::<8>(gs, xs, sdims, &mut part),
                4 => grad_weight_sample::<4>(gs, xs, sdims, &mut part),
                _ => grad_weight_sample::<1>(gs, xs, sdims, &mut part),
            }
        }
        part
    });
    let mut out = vec![0.0; co * ci * 9];
    for p in partials {
        out.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    Array::new(vec![co, ci, 3, 3], out).expect("conv weight grad shape")
}

fn avgpool(x: &Array) -> Result<Array> {
    let s = x.shape();
    if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return Err(mismatch(format!("avgpool2d needs [B,C,even H,even W], got {s:?}")));
    }
    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; bc * oh * ow];
    for p in 0..bc {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Array::new(vec![s[0], s[1], oh, ow], out)
}

fn avgpool_grad(g: &Array, like: &[usize]) -> Array {
    let (bc, h, w) = (like[0] * like[1], like[2], like[3]);
    let (oh, ow) = (h / 2, w / 2);
    let gd = g.data();
    let mut out = vec![0.0; bc * h * w];
    for p in 0..bc {
        for y in 0..h {
            for xx in 0..w {
                out[p * h * w + y * w + xx] = 0.25 * gd[p * oh * ow + (y / 2) * ow + xx / 2];
            }
        }
    }
    Array::new(like.to_vec(), out).expect("avgpool grad shape")
}

fn softmax_rows(x: &Array, log: bool) -> Array {
    let n = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        if log {
            let lz = m + z.ln();
            row.iter_mut().for_each(|v| *v -= lz);
        } else {
            row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
        }
    }
    Array::new(x.shape().to_vec(), out).expect("softmax shape")
}

fn concat(inputs: &[&Array], axis: usize) -> Result<Array> {
    let first = inputs[0].shape();
    if axis >= first.len() {
        return Err(mismatch(format!("concat axis {axis} out of range for {first:?}")));
    }
    for a in inputs {
        let s = a.shape();
        if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
            return Err(mismatch(format!("concat {first:?} with {s:?} on axis {axis}")));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total_axis: usize = inputs.iter().map(|a| a.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for a in inputs {
            let block = a.shape()[axis] * inner;
            out.extend_from_slice(&a.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total_axis;
    Array::new(shape, out)
}

fn concat_grad(g: &Array, inputs: &[&Array], axis: usize) -> Vec<Array> {
    let first = inputs[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total_axis = g.shape()[axis];
    let gd = g.data();
    let mut offset = 0;
    inputs
        .iter()
        .map(|a| {
            let block = a.shape()[axis] * inner;
            let mut out = Vec::with_capacity(a.len());
            for o in 0..outer {
                let start = o * total_axis * inner + offset;
                out.extend_from_slice(&gd[start..start + block]);
            }
            offset += block;
            Array::new(a.shape().to_vec(), out).expect("concat grad shape")
        })
        .collect()
}

/// Evaluate a primitive on concrete inputs.
pub fn apply_primitive(p: &Primitive, inputs: &[&Array]) -> Result<Array> {
    let out = match p {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            arity(p, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(a, b)?;
            match p {
                Primitive::Add => a.zip_map(b, |x, y| x + y)?,
                Primitive::Sub => a.zip_map(b, |x, y| x - y)?,
                Primitive::Mul => a.zip_map(b, |x, y| x * y)?,
                _ => a.zip_map(b, |x, y| x / y)?,
            }
        }
        Primitive::MatMul => {
            arity(p, inputs, &[2])?;
            matmul(inputs[0], inputs[1])?
        }
        Primitive::Conv2d => {
            arity(p, inputs, &[2, 3])?;
            conv2d(inputs[0], inputs[1], inputs.get(2).copied())?
        }
        Primitive::Relu => {
            arity(p, inputs, &[1])?;
            inputs[0].map(|v| v.max(0.0))
        }
        Primitive::AvgPool2d => {
            arity(p, inputs, &[1])?;
            avgpool(inputs[0])?
        }
        Primitive::MeanOverAxes(axes) => {
            arity(p, inputs, &[1])?;
            let (_, r, _) = split_axes(inputs[0].shape(), axes)?;
            sum_axes(inputs[0], axes)?.map(|v| v / r as f64)
        }
        Primitive::VarOverAxes(axes) => {
            arity(p, inputs, &[1])?;
            let x = inputs[0];
            let (o, r, n) = split_axes(x.shape(), axes)?;
            let mean = sum_axes(x, axes)?.map(|v| v / r as f64);
            let (xd, md) = (x.data(), mean.data());
            let mut out = vec![0.0; o * n];
            for oi in 0..o {
                for ri in 0..r {
                    let base = (oi * r + ri) * n;
                    for ni in 0..n {
                        let d = xd[base + ni] - md[oi * n + ni];
                        out[oi * n + ni] += d * d;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= r as f64);
            Array::new(reduced_shape(x.shape(), axes), out)?
        }
        Primitive::SumOverAxes(axes) => {
            arity(p, inputs, &[1])?;
            sum_axes(inputs[0], axes)?
        }
        Primitive::Sqrt => {
            arity(p, inputs, &[1])?;
            inputs[0].map(f64::sqrt)
        }
        Primitive::Broadcast(to) => {
            arity(p, inputs, &[1])?;
            broadcast(inputs[0], to)?
        }
        Primitive::Reshape(to) => {
            arity(p, inputs, &[1])?;
            inputs[0].clone().reshaped(to)?
        }
        Primitive::Concat(axis) => {
            if inputs.is_empty() {
                return Err(mismatch("concat of nothing"));
            }
            concat(inputs, *axis)?
        }
        Primitive::Scale(c) => {
            arity(p, inputs, &[1])?;
            inputs[0].map(|v| v * c)
        }
        Primitive::Exp => {
            arity(p, inputs, &[1])?;
            inputs[0].map(f64::exp)
        }
        Primitive::Log => {
            arity(p, inputs, &[1])?;
            inputs[0].map(f64::ln)
        }
        Primitive::Softmax | Primitive::LogSoftmax => {
            arity(p, inputs, &[1])?;
            softmax_rows(inputs[0], matches!(p, Primitive::LogSoftmax))
        }
        Primitive::Dropout(mask) => {
            arity(p, inputs, &[1])?;
            if mask.len() != inputs[0].len() {
                return Err(mismatch(format!("dropout mask of {} for {} values", mask.len(), inputs[0].len())));
            }
            let d = inputs[0].data().iter().zip(mask).map(|(x, m)| x * m).collect();
            Array::new(inputs[0].shape().to_vec(), d)?
        }
    };
    if !out.is_finite() {
        return Err(Error::NonFinite(p.name().into()));
    }
    Ok(out)
}

/// Gradients with respect to each input, given the output gradient `g`.
/// Entries for inputs with `needs[i] == false` are `None`.
pub fn vjp(p: &Primitive, inputs: &[&Array], out: &Array, g: &Array, needs: &[bool]) -> Result<Vec<Option<Array>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let grads: Vec<Option<Array>> = match p {
        Primitive::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Primitive::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))],
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                if want(0) { Some(g.zip_map(b, |x, y| x * y)?) } else { None },
                if want(1) { Some(g.zip_map(a, |x, y| x * y)?) } else { None },
            ]
        }
        Primitive::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                if want(0) { Some(g.zip_map(b, |x, y| x / y)?) } else { None },
                if want(1) {
                    let ab = a.zip_map(b, |x, y| -x / (y * y))?;
                    Some(g.zip_map(&ab, |x, y| x * y)?)
                } else {
                    None
                },
            ]
        }
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![want(0).then(|| matmul_nt(g, b)), want(1).then(|| matmul_tn(a, g))]
        }
        Primitive::Conv2d => {
            let bias = inputs.get(2).copied();
            let dims = conv_dims(inputs[0], inputs[1], bias)?;
            let mut v =
                vec![want(0).then(|| conv2d_grad_input(g, inputs[1], &dims)), want(1).then(|| conv2d_grad_weight(g, inputs[0], &dims))];
            if bias.is_some() {
                v.push(if want(2) {
                    let s = sum_axes(g, &[2, 3])?;
                    let s = sum_axes(&s, &[0])?;
                    Some(s.reshaped(&[dims.co])?)
                } else {
                    None
                });
            }
            v
        }
        Primitive::Relu => vec![Some(g.zip_map(inputs[0], |gv, x| if x > 0.0 { gv } else { 0.0 })?)],
        Primitive::AvgPool2d => vec![Some(avgpool_grad(g, inputs[0].shape()))],
        Primitive::MeanOverAxes(axes) => {
            let (_, r, _) = split_axes(inputs[0].shape(), axes)?;
            vec![Some(expand_axes(g, inputs[0].shape(), axes, 1.0 / r as f64)?)]
        }
        Primitive::SumOverAxes(axes) => vec![Some(expand_axes(g, inputs[0].shape(), axes, 1.0)?)],
        Primitive::VarOverAxes(axes) => {
            let x = inputs[0];
            let (o, r, n) = split_axes(x.shape(), axes)?;
            let mean = sum_axes(x, axes)?.map(|v| v / r as f64);
            let (xd, md, gd) = (x.data(), mean.data(), g.data());
            let mut dx = vec![0.0; x.len()];
            for oi in 0..o {
                for ri in 0..r {
                    let base = (oi * r + ri) * n;
                    for ni in 0..n {
                        let k = oi * n + ni;
                        dx[base + ni] = 2.0 * (xd[base + ni] - md[k]) / r as f64 * gd[k];
                    }
                }
            }
            vec![Some(Array::new(x.shape().to_vec(), dx)?)]
        }
        Primitive::Sqrt => vec![Some(g.zip_map(out, |gv, y| gv * 0.5 / y)?)],
        Primitive::Broadcast(_) => vec![Some(unbroadcast(g, inputs[0].shape())?)],
        Primitive::Reshape(_) => vec![Some(g.clone().reshaped(inputs[0].shape())?)],
        Primitive::Concat(axis) => concat_grad(g, inputs, *axis).into_iter().enumerate().map(|(i, a)| want(i).then_some(a)).collect(),
        Primitive::Scale(c) => vec![Some(g.map(|v| v * c))],
        Primitive::Exp => vec![Some(g.zip_map(out, |gv, y| gv * y)?)],
        Primitive::Log => vec![Some(g.zip_map(inputs[0], |gv, x| gv / x)?)],
        Primitive::Softmax => {
            let n = *out.shape().last().unwrap();
            let mut dx = vec![0.0; out.len()];
            for ((d, y), gr) in dx.chunks_mut(n).zip(out.data().chunks(n)).zip(g.data().chunks(n)) {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    d[j] = y[j] * (gr[j] - dot);
                }
            }
            vec![Some(Array::new(out.shape().to_vec(), dx)?)]
        }
        Primitive::LogSoftmax => {
            let n = *out.shape().last().unwrap();
            let mut dx = vec![0.0; out.len()];
            for ((d, y), gr) in dx.chunks_mut(n).zip(out.data().chunks(n)).zip(g.data().chunks(n)) {
                let gs: f64 = gr.iter().sum();
                for j in 0..n {
                    d[j] = gr[j] - y[j].exp() * gs;
                }
            }
            vec![Some(Array::new(out.shape().to_vec(), dx)?)]
        }
        Primitive::Dropout(mask) => {
            let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
            vec![Some(Array::new(g.shape().to_vec(), d)?)]
        }
    };
    for a in grads.iter().flatten() {
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("backward of {}", p.name())));
        }
    }
    Ok(grads)
}
