use super::ops::{self, split_axis};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Trailing,
}

enum Op<T> {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Gelu(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    SumAxis(Var, usize),
    AvgPool2(Var),
    Upsample(Var, usize),
    Pool3(Var),
    Gather(Var, Vec<usize>),
    Narrow(Var, usize, usize),
    Concat(Vec<Var>, usize),
    Exp(Var),
    Log(Var),
    Clamp(Var, T, T),
    Map(Var, fn(T) -> T),
    NormalizeRows(Var, T, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so creation order is a valid
/// topological order and `backward` simply walks the record in reverse.
/// Leaf gradients persist across `backward` calls and accumulate.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Bcast::Trailing)
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Sums a full-size gradient down to a trailing-broadcast operand.
fn reduce_trailing<T: Scalar>(g: &[T], blen: usize, out: &mut [T]) {
    for chunk in g.chunks_exact(blen) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Tracked leaf; receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (or of the loss passed to `backward`).
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: impl FnOnce(Var, Var, Bcast) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let mode = bcast(name, va.shape(), vb.shape())?;
        let data: Vec<T> = match mode {
            Bcast::Same => va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Bcast::Trailing => {
                let mut data = Vec::with_capacity(va.len());
                for chunk in va.data.chunks_exact(vb.len().max(1)) {
                    data.extend(chunk.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)));
                }
                data
            }
        };
        let out = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, mk(a, b, mode), rg))
    }

    /// Elementwise sum; `b` may broadcast over the trailing dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// `[..., k] · [k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let data = ops::matmul_nn(&self.value(a).data, &self.value(b).data, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::MatMul(a, b), rg))
    }

    /// `[b, m, k] · [b, k, n] -> [b, m, n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            data.extend(ops::matmul_nn(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![batch, m, n],
                data,
            },
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = ops::permute(&self.value(x).data, shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Permute(x, perm.to_vec()),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::op(
                "transpose",
                format!("needs rank >= 2, got {:?}", self.shape(x)),
            ));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let inner: Vec<T> = v.data.iter().map(|&a| ops::gelu_inner(a)).collect();
        let data = v
            .data
            .iter()
            .zip(&inner)
            .map(|(&a, &t)| ops::gelu_from(a, t))
            .collect();
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x, inner), rg)
    }

    /// Layer normalization over the last (channel) axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x);
        let c = *sx
            .last()
            .ok_or_else(|| Error::op("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", sx, self.shape(gamma)));
        }
        let xv = &self.value(x).data;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = xv.len() / c.max(1);
        let cn = T::of(c as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let shape = sx.to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::op(
                op,
                format!("axis {axis} out of range for {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let out = softmax_along(self.value(x), axis, false);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let out = softmax_along(self.value(x), axis, true);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x, axis), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = &self.value(x).data;
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::SumAxis(x, axis),
            rg,
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let n = self.shape(x)[axis].max(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::of(n as f64)))
    }

    fn spatial(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [b, h, w, c] => Ok((b, h, w, c)),
            ref s => Err(Error::op(op, format!("expected [B,H,W,C], got {s:?}"))),
        }
    }

    /// 2×2 mean pooling with stride 2 over `[B,H,W,C]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = self.spatial("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::op(
                "avg_pool2",
                format!("odd spatial extent {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let d = &self.value(x).data;
        let quarter = T::of(0.25);
        let mut data = vec![T::zero(); b * oh * ow * c];
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let src = ((n * h + i) * w + j) * c;
                    let dst = ((n * oh + i / 2) * ow + j / 2) * c;
                    for k in 0..c {
                        data[dst + k] += d[src + k] * quarter;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![b, oh, ow, c],
                data,
            },
            Op::AvgPool2(x),
            rg,
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor over `[B,H,W,C]`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, h, w, c) = self.spatial("upsample", x)?;
        if factor == 0 {
            return Err(Error::op("upsample", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let d = &self.value(x).data;
        let mut data = Vec::with_capacity(b * oh * ow * c);
        for n in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let src = ((n * h + i / factor) * w + j / factor) * c;
                    data.extend_from_slice(&d[src..src + c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![b, oh, ow, c],
                data,
            },
            Op::Upsample(x, factor),
            rg,
        ))
    }

    /// 3×3 stride-1 mean pooling over `[B,H,W,C]`; padding is excluded from the count.
    pub fn pool3(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = self.spatial("pool3", x)?;
        let d = &self.value(x).data;
        let mut data = vec![T::zero(); d.len()];
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let (i0, i1) = (i.saturating_sub(1), (i + 1).min(h - 1));
                    let (j0, j1) = (j.saturating_sub(1), (j + 1).min(w - 1));
                    let inv = T::one() / T::of(((i1 - i0 + 1) * (j1 - j0 + 1)) as f64);
                    let dst = ((n * h + i) * w + j) * c;
                    for si in i0..=i1 {
                        for sj in j0..=j1 {
                            let src = ((n * h + si) * w + sj) * c;
                            for k in 0..c {
                                data[dst + k] += d[src + k] * inv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![b, h, w, c],
                data,
            },
            Op::Pool3(x),
            rg,
        ))
    }

    /// Selects rows along axis 0.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| Error::op("gather", "scalar input"))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::op(
                "gather",
                format!("index {bad} out of range for {shape:?}"),
            ));
        }
        let width = numel(&shape[1..]);
        let d = &self.value(x).data;
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            data.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Gather(x, index.to_vec()),
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(Error::op(
                "narrow",
                format!(
                    "range {start}..{} exceeds axis {axis} of {shape:?}",
                    start + len
                ),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let d = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Narrow(x, axis, start),
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::op("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = &self.value(v).data;
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor { shape, data }, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        let rg = self.rg(&[x]);
        self.push(out, Op::Log(x), rg)
    }

    /// Clamps values into `[lo, hi]`; the gradient is zero wherever clamping is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), rg)
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(T) -> T, df: fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, Op::Map(x, df), rg)
    }

    /// Divides each row (last axis) by `max(‖row‖, eps)`; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::op("normalize_rows", "scalar input"))?;
        let d = &self.value(x).data;
        let mut norms = Vec::with_capacity(d.len() / n.max(1));
        let mut data = Vec::with_capacity(d.len());
        for row in d.chunks_exact(n.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::NormalizeRows(x, eps, norms), rg))
    }

    /// Reverse pass from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::op(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        // returns the gradient buffer of `v`, allocating on first touch
        fn slot<'a, T: Scalar>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> Option<&'a mut Vec<T>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) || i == loss.0 {
                let store = self.grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                for (s, &v) in store.iter_mut().zip(&g) {
                    *s += v;
                }
            }
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let sign = if neg { -T::one() } else { T::one() };
                        match mode {
                            Bcast::Same => gb.iter_mut().zip(&g).for_each(|(x, &y)| *x += sign * y),
                            Bcast::Trailing => {
                                let mut tmp = vec![T::zero(); gb.len()];
                                reduce_trailing(&g, gb.len().max(1), &mut tmp);
                                gb.iter_mut().zip(tmp).for_each(|(x, y)| *x += sign * y);
                            }
                        }
                    }
                }
                Op::Mul(a, b, mode) => {
                    let (va, vb) = (&val(*a).data, &val(*b).data);
                    let blen = vb.len().max(1);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (gac, gc) in ga.chunks_exact_mut(blen).zip(g.chunks_exact(blen)) {
                            for ((x, &gv), &bv) in gac.iter_mut().zip(gc).zip(vb) {
                                *x += gv * bv;
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        match mode {
                            Bcast::Same => {
                                for ((x, &gv), &av) in gb.iter_mut().zip(&g).zip(va) {
                                    *x += gv * av;
                                }
                            }
                            Bcast::Trailing => {
                                for (gc, ac) in g.chunks_exact(blen).zip(va.chunks_exact(blen)) {
                                    for ((x, &gv), &av) in gb.iter_mut().zip(gc).zip(ac) {
                                        *x += gv * av;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Div(a, b, mode) => {
                    let (va, vb) = (&val(*a).data, &val(*b).data);
                    let blen = vb.len().max(1);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (k, x) in ga.iter_mut().enumerate() {
                            *x += g[k] / vb[k % blen];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let same = *mode == Bcast::Same;
                        for (k, (&gv, &av)) in g.iter().zip(va).enumerate() {
                            let bv = vb[k % blen];
                            let d = -gv * av / (bv * bv);
                            if same {
                                gb[k] += d;
                            } else {
                                gb[k % blen] += d;
                            }
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(a, &b)| *a += b * *c);
                    }
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (k, n) = (vb.shape[0], vb.shape[1]);
                    let m = va.len() / k.max(1);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let d = ops::matmul_nt(&g, &vb.data, m, n, k);
                        ga.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        ops::matmul_tn_acc(gb, &va.data, &g, m, k, n);
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (batch, m, k, n) = (va.shape[0], va.shape[1], va.shape[2], vb.shape[2]);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..batch {
                            let d = ops::matmul_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb.data[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                            );
                            ga[i * m * k..(i + 1) * m * k]
                                .iter_mut()
                                .zip(d)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for i in 0..batch {
                            ops::matmul_tn_acc(
                                &mut gb[i * k * n..(i + 1) * k * n],
                                &va.data[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
                Op::Permute(x, perm) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let d = ops::permute(&g, &node.value.shape, &ops::inverse_perm(perm));
                        gx.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Gelu(x, inner) => {
                    let vx = &val(*x).data;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (k, a) in gx.iter_mut().enumerate() {
                            *a += g[k] * ops::gelu_grad_from(vx[k], inner[k]);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = &val(*gamma).data;
                    let c = gv.len();
                    if let Some(gg) = slot(&mut grads, nodes, *gamma) {
                        for (gc, hc) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ((x, &dy), &h) in gg.iter_mut().zip(gc).zip(hc) {
                                *x += dy * h;
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *beta) {
                        reduce_trailing(&g, c, gb);
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let cn = T::of(c as f64);
                        for (r, &rs) in rstd.iter().enumerate() {
                            let span = r * c..(r + 1) * c;
                            let (dy, h) = (&g[span.clone()], &xhat[span.clone()]);
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..c {
                                let dh = dy[j] * gv[j];
                                m1 += dh;
                                m2 += dh * h[j];
                            }
                            m1 /= cn;
                            m2 /= cn;
                            for j in 0..c {
                                let dh = dy[j] * gv[j];
                                gx[r * c + j] += rs * (dh - m1 - h[j] * m2);
                            }
                        }
                    }
                }
                Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                    let log = matches!(node.op, Op::LogSoftmax(..));
                    let y = &node.value.data;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let (outer, len, inner) = split_axis(&node.value.shape, *axis);
                        for o in 0..outer {
                            for q in 0..inner {
                                let at = |l: usize| (o * len + l) * inner + q;
                                if log {
                                    let gs: T = (0..len).map(|l| g[at(l)]).sum();
                                    for l in 0..len {
                                        gx[at(l)] += g[at(l)] - y[at(l)].exp() * gs;
                                    }
                                } else {
                                    let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                                    for l in 0..len {
                                        gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|a| *a += g[0]);
                    }
                }
                Op::SumAxis(x, axis) => {
                    let shape = &val(*x).shape;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let (outer, len, inner) = split_axis(shape, *axis);
                        for o in 0..outer {
                            for l in 0..len {
                                let dst = (o * len + l) * inner;
                                for q in 0..inner {
                                    gx[dst + q] += g[o * inner + q];
                                }
                            }
                        }
                    }
                }
                Op::AvgPool2(x) => {
                    let s = &val(*x).shape;
                    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let quarter = T::of(0.25);
                        for n in 0..b {
                            for i in 0..h {
                                for j in 0..w {
                                    let dst = ((n * h + i) * w + j) * c;
                                    let src = ((n * oh + i / 2) * ow + j / 2) * c;
                                    for k in 0..c {
                                        gx[dst + k] += g[src + k] * quarter;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Upsample(x, f) => {
                    let s = &val(*x).shape;
                    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h * f, w * f);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for n in 0..b {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let src = ((n * oh + i) * ow + j) * c;
                                    let dst = ((n * h + i / f) * w + j / f) * c;
                                    for k in 0..c {
                                        gx[dst + k] += g[src + k];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Pool3(x) => {
                    let s = &val(*x).shape;
                    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for n in 0..b {
                            for i in 0..h {
                                for j in 0..w {
                                    let (i0, i1) = (i.saturating_sub(1), (i + 1).min(h - 1));
                                    let (j0, j1) = (j.saturating_sub(1), (j + 1).min(w - 1));
                                    let inv =
                                        T::one() / T::of(((i1 - i0 + 1) * (j1 - j0 + 1)) as f64);
                                    let src = ((n * h + i) * w + j) * c;
                                    for si in i0..=i1 {
                                        for sj in j0..=j1 {
                                            let dst = ((n * h + si) * w + sj) * c;
                                            for k in 0..c {
                                                gx[dst + k] += g[src + k] * inv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Gather(x, index) => {
                    let width = numel(&val(*x).shape[1..]);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, &i) in index.iter().enumerate() {
                            for q in 0..width {
                                gx[i * width + q] += g[r * width + q];
                            }
                        }
                    }
                }
                Op::Narrow(x, axis, start) => {
                    let shape = &val(*x).shape;
                    let len = node.value.shape[*axis];
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let (outer, full, inner) = split_axis(shape, *axis);
                        for o in 0..outer {
                            let dst = (o * full + start) * inner;
                            let src = o * len * inner;
                            for q in 0..len * inner {
                                gx[dst + q] += g[src + q];
                            }
                        }
                    }
                }
                Op::Concat(xs, axis) => {
                    let (outer, total, inner) = split_axis(&node.value.shape, *axis);
                    let mut offset = 0;
                    for &v in xs {
                        let len = val(v).shape[*axis];
                        if let Some(gv) = slot(&mut grads, nodes, v) {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                for q in 0..len * inner {
                                    gv[o * len * inner + q] += g[src + q];
                                }
                            }
                        }
                        offset += len;
                    }
                }
                Op::Exp(x) => {
                    let y = &node.value.data;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (k, a) in gx.iter_mut().enumerate() {
                            *a += g[k] * y[k];
                        }
                    }
                }
                Op::Log(x) => {
                    let vx = &val(*x).data;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (k, a) in gx.iter_mut().enumerate() {
                            *a += g[k] / vx[k];
                        }
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    let vx = &val(*x).data;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (k, a) in gx.iter_mut().enumerate() {
                            if vx[k] >= *lo && vx[k] <= *hi {
                                *a += g[k];
                            }
                        }
                    }
                }
                Op::Map(x, df) => {
                    let vx = &val(*x).data;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (k, a) in gx.iter_mut().enumerate() {
                            *a += g[k] * df(vx[k]);
                        }
                    }
                }
                Op::NormalizeRows(x, eps, norms) => {
                    let y = &node.value.data;
                    let n = *node.value.shape.last().unwrap();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, &norm) in norms.iter().enumerate() {
                            let span = r * n..(r + 1) * n;
                            let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                            if norm > *eps {
                                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                                for j in 0..n {
                                    gx[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                                }
                            } else {
                                for j in 0..n {
                                    gx[r * n + j] += gr[j] / norm;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn softmax_along<T: Scalar>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let d = &x.data;
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for q in 0..inner {
            let at = |l: usize| (o * len + l) * inner + q;
            let max = (0..len).map(|l| d[at(l)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for l in 0..len {
                let e = (d[at(l)] - max).exp();
                out[at(l)] = e;
                z += e;
            }
            if log {
                let lz = z.ln();
                for l in 0..len {
                    out[at(l)] = d[at(l)] - max - lz;
                }
            } else {
                let inv = T::one() / z;
                for l in 0..len {
                    out[at(l)] *= inv;
                }
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}
