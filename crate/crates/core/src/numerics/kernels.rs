//! Forward kernels on plain tensors. The tape in [`super::graph`] records
//! these and supplies the matching adjoints.

use crate::error::{Error, Result};

use super::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat position of `out_shape`, the flat offset into a tensor of
/// `in_shape` broadcast to it.
pub fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[i + pad] = acc;
        }
        acc *= in_shape[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    if numel == 0 {
        return offsets;
    }
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            off += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    offsets
}

/// How an operand maps onto a broadcast output.
pub enum Layout {
    Same,
    /// Operand repeats with period `len` (it matches the trailing dims).
    Cycle(usize),
    Offsets(Vec<usize>),
}

pub fn layout(out_shape: &[usize], in_shape: &[usize]) -> Layout {
    if out_shape == in_shape {
        return Layout::Same;
    }
    let n = in_shape.len();
    if n <= out_shape.len() && out_shape[out_shape.len() - n..] == *in_shape {
        return Layout::Cycle(in_shape.iter().product());
    }
    Layout::Offsets(broadcast_offsets(out_shape, in_shape))
}

impl Layout {
    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Layout::Same => i,
            Layout::Cycle(len) => i % len,
            Layout::Offsets(o) => o[i],
        }
    }

    /// Sum a gradient of the broadcast shape back into the operand shape.
    pub fn reduce<T: Real>(&self, grad: &[T], in_numel: usize) -> Vec<T> {
        match self {
            Layout::Same => grad.to_vec(),
            Layout::Cycle(len) => {
                let mut out = vec![T::zero(); *len];
                for chunk in grad.chunks_exact(*len) {
                    for (o, &g) in out.iter_mut().zip(chunk) {
                        *o += g;
                    }
                }
                out
            }
            Layout::Offsets(offsets) => {
                let mut out = vec![T::zero(); in_numel];
                for (&o, &g) in offsets.iter().zip(grad) {
                    out[o] += g;
                }
                out
            }
        }
    }
}

pub fn binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let la = layout(&out_shape, a.shape());
    let lb = layout(&out_shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let numel: usize = out_shape.iter().product();
    let data = match (&la, &lb) {
        (Layout::Same, Layout::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (Layout::Same, Layout::Cycle(len)) => ad
            .chunks_exact(*len)
            .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect(),
        _ => (0..numel)
            .map(|i| f(ad[la.index(i)], bd[lb.index(i)]))
            .collect(),
    };
    Tensor::new(out_shape, data)
}

/// Matrix product. Supports `[m,k]@[k,n]`, `[..,m,k]@[k,n]` (leading dims
/// folded into rows) and batched `[b,m,k]@[b,k,n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::Shape {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(mismatch());
    }
    let k = sa[sa.len() - 1];
    if sb[sb.len() - 2] != k {
        return Err(mismatch());
    }
    let n = sb[sb.len() - 1];
    if sb.len() == 2 {
        let m: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m, k, n, T::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(),
            &mut out, n as isize, 1,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        return Tensor::new(shape, out);
    }
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(mismatch());
    }
    let (batch, m) = (sa[0], sa[1]);
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[bi * m * k..(bi + 1) * m * k],
            k as isize,
            1,
            &b.data()[bi * k * n..(bi + 1) * k * n],
            n as isize,
            1,
            T::zero(),
            &mut out[bi * m * n..(bi + 1) * m * n],
            n as isize,
            1,
        );
    }
    Tensor::new(vec![batch, m, n], out)
}

/// Swap the last two axes.
pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let s = a.shape();
    if s.len() < 2 {
        return Err(Error::Shape {
            op: "transpose",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = a.numel() / (r * c).max(1);
    let mut out = vec![T::zero(); a.numel()];
    let d = a.data();
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = d[base + i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let len = shape.len();
    shape.swap(len - 2, len - 1);
    Tensor::new(shape, out)
}

pub fn permute<T: Real>(a: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let s = a.shape();
    let rank = s.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Shape {
            op: "permute",
            lhs: s.to_vec(),
            rhs: perm.to_vec(),
        });
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = a.numel();
    let mut out = Vec::with_capacity(numel);
    if numel > 0 {
        let d = a.data();
        // Copy contiguous runs when the last axis stays in place.
        let (run, outer_rank) = if rank > 0 && perm[rank - 1] == rank - 1 {
            (out_shape[rank - 1], rank - 1)
        } else {
            (1, rank)
        };
        let mut index = vec![0usize; outer_rank];
        let mut off = 0usize;
        for _ in 0..numel / run {
            if run == 1 {
                out.push(d[off]);
            } else {
                out.extend_from_slice(&d[off..off + run]);
            }
            for ax in (0..outer_rank).rev() {
                index[ax] += 1;
                off += src_strides[ax];
                if index[ax] < out_shape[ax] {
                    break;
                }
                off -= src_strides[ax] * out_shape[ax];
                index[ax] = 0;
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn sum_axis<T: Real>(a: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(a.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    let d = a.data();
    for o in 0..outer {
        for l in 0..len {
            let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += x;
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out).expect("sum_axis shape")
}

/// Max along `axis`; also returns the winning position along the axis for
/// every output element (first occurrence on ties).
pub fn max_axis<T: Real>(a: &Tensor<T>, axis: usize) -> (Tensor<T>, Vec<usize>) {
    let (outer, len, inner) = split_axis(a.shape(), axis);
    let d = a.data();
    let mut out = Vec::with_capacity(outer * inner);
    let mut arg = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&d[base..base + inner]);
        arg.extend(std::iter::repeat(0).take(inner));
        let (ov, oa) = (
            &mut out[o * inner..(o + 1) * inner],
            &mut arg[o * inner..(o + 1) * inner],
        );
        for l in 1..len {
            let row = &d[base + l * inner..base + (l + 1) * inner];
            for i in 0..inner {
                if row[i] > ov[i] {
                    ov[i] = row[i];
                    oa[i] = l;
                }
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    (Tensor::new(shape, out).expect("max_axis shape"), arg)
}

pub fn softmax<T: Real>(a: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(a.shape(), axis);
    let d = a.data();
    let mut out = vec![T::zero(); a.numel()];
    if inner == 1 {
        for (src, dst) in d.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = (x - max).exp();
                total += *o;
            }
            let inv = T::one() / total;
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
    } else {
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| d[at(l)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for l in 0..len {
                    let e = (d[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
    }
    Tensor::new(a.shape().to_vec(), out).expect("softmax shape")
}

/// Layer norm over the last axis. Returns output, normalized input and the
/// per-row reciprocal standard deviation.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &[T],
    bias: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let dim = *x.shape().last().expect("layer_norm needs rank >= 1");
    let eps = T::of(LAYER_NORM_EPS);
    let inv_dim = T::one() / T::of(dim as f64);
    let rows = x.numel() / dim.max(1);
    let mut out = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(rows);
    for ((src, dst), nrm) in x
        .data()
        .chunks_exact(dim)
        .zip(out.chunks_exact_mut(dim))
        .zip(xhat.chunks_exact_mut(dim))
    {
        let mean = src.iter().copied().sum::<T>() * inv_dim;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_dim;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for j in 0..dim {
            let h = (src[j] - mean) * r;
            nrm[j] = h;
            dst[j] = h * gain[j] + bias[j];
        }
    }
    (
        Tensor::new(x.shape().to_vec(), out).expect("layer_norm shape"),
        xhat,
        rstd,
    )
}

pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat of zero tensors"))?
        .shape();
    if axis >= first.len() {
        return Err(Error::arg(format!("concat axis {axis} out of range for {first:?}")));
    }
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        let ok = s.len() == first.len()
            && s.iter().zip(first).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.to_vec(),
                rhs: s.to_vec(),
            });
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(first, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

pub fn narrow<T: Real>(a: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = a.shape();
    if axis >= s.len() || start + len > s[axis] {
        return Err(Error::arg(format!(
            "narrow [{start}, {}) out of range on axis {axis} of {s:?}",
            start + len
        )));
    }
    let (outer, full, inner) = split_axis(s, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    let mut shape = s.to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
