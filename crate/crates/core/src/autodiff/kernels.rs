//! Forward and backward numeric kernels used by the graph.

use crate::tensor::strides;

/// Visits every offset of a broadcast output together with the matching
/// offsets of both operands.
pub(crate) fn broadcast_for_each(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        let mut d = nd - 1;
        loop {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
            if d == 0 {
                break;
            }
            d -= 1;
        }
    }
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..len {
                m = m.max(x[base + k * inner]);
            }
            let mut s = 0.0;
            for k in 0..len {
                let e = (x[base + k * inner] - m).exp();
                y[base + k * inner] = e;
                s += e;
            }
            for k in 0..len {
                y[base + k * inner] /= s;
            }
        }
    }
    y
}

pub(crate) fn log_softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..len {
                m = m.max(x[base + k * inner]);
            }
            let s: f64 = (0..len).map(|k| (x[base + k * inner] - m).exp()).sum();
            let lse = m + s.ln();
            for k in 0..len {
                y[base + k * inner] = x[base + k * inner] - lse;
            }
        }
    }
    y
}

/// `ga = y * (g - sum_axis(g * y))`
pub(crate) fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut ga = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|k| g[base + k * inner] * y[base + k * inner])
                .sum();
            for k in 0..len {
                let p = base + k * inner;
                ga[p] = y[p] * (g[p] - dot);
            }
        }
    }
    ga
}

/// `ga = g - softmax * sum_axis(g)`, with the softmax recovered from `y = log p`.
pub(crate) fn log_softmax_backward(
    y: &[f64],
    g: &[f64],
    shape: &[usize],
    axis: usize,
) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut ga = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let s: f64 = (0..len).map(|k| g[base + k * inner]).sum();
            for k in 0..len {
                let p = base + k * inner;
                ga[p] = g[p] - y[p].exp() * s;
            }
        }
    }
    ga
}

pub(crate) fn sum_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

pub(crate) fn sum_axis_backward(g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut ga = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for k in 0..len {
            ga[(o * len + k) * inner..(o * len + k + 1) * inner]
                .copy_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    ga
}

/// Geometry of a (possibly batch-broadcast) matrix product.
#[derive(Clone, Debug)]
pub(crate) struct MatmulDims {
    pub batch: Vec<usize>,
    pub a_batch_strides: Vec<usize>,
    pub b_batch_strides: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub p: usize,
}

impl MatmulDims {
    /// Calls `f(out_matrix_index, a_offset, b_offset)` for each batch entry.
    pub fn for_each_batch(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (mk, kp) = (self.m * self.k, self.k * self.p);
        broadcast_for_each(
            &self.batch,
            &self.a_batch_strides,
            &self.b_batch_strides,
            |o, a, b| f(o, a * mk, b * kp),
        );
    }
}

/// `c[m,p] += a[m,k] * b[k,p]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `ga[m,k] += g[m,p] * b[k,p]^T`
pub(crate) fn gemm_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            ga[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb[k,p] += a[m,k]^T * g[m,p]`
pub(crate) fn gemm_grad_b(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let gbrow = &mut gb[kk * p..(kk + 1) * p];
            for (gv, x) in gbrow.iter_mut().zip(grow) {
                *gv += aik * x;
            }
        }
    }
}

/// Offsets into the input for every output element of a permutation.
pub(crate) fn permute_offsets(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut offs = Vec::with_capacity(in_shape.iter().product());
    broadcast_for_each(&out_shape, &src_strides, &zeros, |_, a, _| offs.push(a));
    offs
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub len: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_len: usize,
}

impl ConvDims {
    /// Input position for output step `t` and tap `j`, if inside the unpadded input.
    #[inline]
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        let pos = t * self.stride + j;
        if pos < self.padding || pos - self.padding >= self.len {
            None
        } else {
            Some(pos - self.padding)
        }
    }
}

pub(crate) fn conv1d(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.cout * d.out_len];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let orow = &mut out[(b * d.cout + co) * d.out_len..(b * d.cout + co + 1) * d.out_len];
            if let Some(bias) = bias {
                orow.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..d.cin {
                let xrow = &x[(b * d.cin + ci) * d.len..(b * d.cin + ci + 1) * d.len];
                let wrow = &w[(co * d.cin + ci) * d.kernel..(co * d.cin + ci + 1) * d.kernel];
                for (t, ov) in orow.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, wv) in wrow.iter().enumerate() {
                        if let Some(s) = d.src(t, j) {
                            acc += wv * xrow[s];
                        }
                    }
                    *ov += acc;
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gbias = vec![0.0; d.cout];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let grow = &g[(b * d.cout + co) * d.out_len..(b * d.cout + co + 1) * d.out_len];
            gbias[co] += grow.iter().sum::<f64>();
            for ci in 0..d.cin {
                let xoff = (b * d.cin + ci) * d.len;
                let woff = (co * d.cin + ci) * d.kernel;
                for (t, &gv) in grow.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    for j in 0..d.kernel {
                        if let Some(s) = d.src(t, j) {
                            gw[woff + j] += gv * x[xoff + s];
                            gx[xoff + s] += gv * w[woff + j];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gbias)
}

/// Max pooling over the last axis of a `[rows, len]` view. Padded
/// positions never win. Returns values and the winning input offsets.
pub(crate) fn max_pool1d(
    x: &[f64],
    rows: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        for t in 0..out_len {
            let start = t * stride;
            let mut best = f64::NEG_INFINITY;
            let mut best_at = usize::MAX;
            for j in 0..kernel {
                let pos = start + j;
                if pos < padding || pos - padding >= len {
                    continue;
                }
                let off = r * len + pos - padding;
                if best_at == usize::MAX || x[off] > best {
                    best = x[off];
                    best_at = off;
                }
            }
            out.push(best);
            arg.push(best_at);
        }
    }
    (out, arg)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_inner(x).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let t = gelu_inner(x).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
fn gelu_inner(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    C * (x + 0.044715 * x * x * x)
}
