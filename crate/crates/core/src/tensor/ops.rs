//! Raw kernels shared by forward and backward rules.

use super::Scalar;

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Dot product with eight independent accumulators, which the compiler can
/// keep in vector registers.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

/// `out[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n < 16 && k >= 8 {
        // narrow outputs: row-times-column dot products over a transposed b
        let bt = transpose2(b, k, n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        return out;
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose2<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `out[m,k] = a[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    // transposing b turns the short dot products into contiguous row updates
    matmul_nn(a, &transpose2(b, k, n), m, n, k)
}

/// `out[k,n] += a[m,k]ᵀ · c[m,n]`
pub(crate) fn matmul_tn_acc<T: Scalar>(
    out: &mut [T],
    a: &[T],
    c: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    if n >= k {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &c[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &cv) in orow.iter_mut().zip(crow) {
                    *o += av * cv;
                }
            }
        }
    } else {
        // accumulate outᵀ[n,k] so the inner loop runs over the longer axis
        let mut t = vec![T::zero(); n * k];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &c[i * n..(i + 1) * n];
            for (q, &cv) in crow.iter().enumerate() {
                let trow = &mut t[q * k..(q + 1) * k];
                for (o, &av) in trow.iter_mut().zip(arow) {
                    *o += av * cv;
                }
            }
        }
        for p in 0..k {
            for q in 0..n {
                out[p * n + q] += t[q * k + p];
            }
        }
    }
}

/// Copies `data` laid out as `shape` into the axis order given by `perm`.
pub(crate) fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if run_stride == 1 {
            out.extend_from_slice(&data[base..base + run]);
        } else {
            out.extend((0..run).map(|r| data[base + r * run_stride]));
        }
        // advance the counter over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// `tanh(√(2/π)·(x + 0.044715·x³))`, the inner term of the tanh GELU.
///
/// Goes through one `exp`, which is markedly cheaper than libm's `tanh`.
pub(crate) fn gelu_inner<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    let e = (u + u).exp();
    T::one() - T::of(2.0) / (e + T::one())
}

pub(crate) fn gelu_from<T: Scalar>(x: T, t: T) -> T {
    T::of(0.5) * x * (T::one() + t)
}

/// Derivative of the GELU at `x` given `t = gelu_inner(x)`.
pub(crate) fn gelu_grad_from<T: Scalar>(x: T, t: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}
