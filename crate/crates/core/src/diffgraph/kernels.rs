//! Numeric kernels behind the graph primitives. All images are NCHW.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected NCHW, got {s:?}"))),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
        (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
    };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = match *a.shape() {
        [m, n] => (m, n),
        ref s => return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}"))),
    };
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Output extent of a strided convolution; `None` when the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution: `(in - 1)·stride - 2·pad + kernel + out_pad`.
pub fn deconv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<usize> {
    ((input - 1) * stride + kernel + out_pad).checked_sub(2 * pad).filter(|&e| e > 0)
}

/// Geometry of a square-kernel convolution `[n, c, h, w] -> [n, ·, ho, wo]`.
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    /// Output positions `o` whose tap `o·stride + t − pad` lands inside `0..limit`.
    fn span(&self, t: usize, limit: usize, count: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = self.pad.saturating_sub(t).div_ceil(s);
        let hi = if limit + self.pad > t { (limit + self.pad - t - 1) / s + 1 } else { 0 };
        let hi = hi.min(count);
        lo.min(hi)..hi
    }
}

/// Unfolds `x` into `[c·k·k, n·ho·wo]` patch columns (zero outside the image).
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (k, s) = (g.k, g.stride);
    let plane = g.ho * g.wo;
    let width = g.n * plane;
    let mut cols = vec![0.0; g.c * k * k * width];
    for ci in 0..g.c {
        for ky in 0..k {
            let ys = g.span(ky, g.h, g.ho);
            for kx in 0..k {
                let xs = g.span(kx, g.w, g.wo);
                let row = &mut cols[((ci * k + ky) * k + kx) * width..][..width];
                for b in 0..g.n {
                    let src = &x[(b * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in ys.clone() {
                        let iy = oy * s + ky - g.pad;
                        let dst = &mut row[b * plane + oy * g.wo..][..g.wo];
                        let srow = &src[iy * g.w..][..g.w];
                        for ox in xs.clone() {
                            dst[ox] = srow[ox * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into `[n, c, h, w]`.
fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (k, s) = (g.k, g.stride);
    let plane = g.ho * g.wo;
    let width = g.n * plane;
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..k {
            let ys = g.span(ky, g.h, g.ho);
            for kx in 0..k {
                let xs = g.span(kx, g.w, g.wo);
                let row = &cols[((ci * k + ky) * k + kx) * width..][..width];
                for b in 0..g.n {
                    let dst = &mut x[(b * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in ys.clone() {
                        let iy = oy * s + ky - g.pad;
                        let src = &row[b * plane + oy * g.wo..][..g.wo];
                        let drow = &mut dst[iy * g.w..][..g.w];
                        for ox in xs.clone() {
                            drow[ox * s + kx - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[c, n·p]` (channel-major) to `[n, c, p]`.
fn channels_to_batch(m: &[f64], c: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * n * p];
    for ci in 0..c {
        for b in 0..n {
            out[(b * c + ci) * p..][..p].copy_from_slice(&m[(ci * n + b) * p..][..p]);
        }
    }
    out
}

/// `[n, c, p]` to `[c, n·p]`.
fn batch_to_channels(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * n * p];
    for b in 0..n {
        for ci in 0..c {
            out[(ci * n + b) * p..][..p].copy_from_slice(&x[(b * c + ci) * p..][..p]);
        }
    }
    out
}

/// `a[m, k] · b[k, n]`
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[k, m]ᵀ · b[k, n]`
fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m, k] · b[n, k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `x: [N, C, H, W]`, `w: [O, C, K, K]` -> `[N, O, H', W']`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, wd] = dims4("conv2d", x)?;
    let [o, c2, kh, kw] = dims4("conv2d", w)?;
    if c != c2 || kh != kw {
        return Err(Error::shape("conv2d", format!("input {:?} vs kernel {:?}", x.shape(), w.shape())));
    }
    let (ho, wo) = match (conv_out_extent(h, kh, stride, pad), conv_out_extent(wd, kw, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{wd} with pad {pad}"),
            ))
        }
    };
    let geo = ConvGeometry { n, c, h, w: wd, k: kh, stride, pad, ho, wo };
    let cols = im2col(x.data(), &geo);
    let out = gemm(w.data(), &cols, o, c * kh * kw, n * ho * wo);
    Ok(Tensor::from_parts(vec![n, o, ho, wo], channels_to_batch(&out, o, n, ho * wo)))
}


/// Adjoint of [`conv2d`] with respect to its input.
///
/// `x: [N, I, h, w]`, `w: [I, O, K, K]` -> `[N, O, H, W]` with
/// `H = (h - 1)·stride - 2·pad + K + out_pad`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor> {
    let [n, i, h, wd] = dims4("conv_transpose2d", x)?;
    let [i2, o, kh, kw] = dims4("conv_transpose2d", w)?;
    if i != i2 || kh != kw {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input {:?} vs kernel {:?}", x.shape(), w.shape()),
        ));
    }
    if stride == 0 || out_pad >= stride {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("out_pad {out_pad} must be below stride {stride}"),
        ));
    }
    let (ho, wo) = match (
        deconv_out_extent(h, kh, stride, pad, out_pad),
        deconv_out_extent(wd, kw, stride, pad, out_pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shape("conv_transpose2d", "empty output")),
    };
    // the forward conv of this adjoint maps [N, O, ho, wo] to [N, I, h, w]
    let geo = ConvGeometry { n, c: o, h: ho, w: wo, k: kh, stride, pad, ho: h, wo: wd };
    let xm = batch_to_channels(x.data(), n, i, h * wd);
    let cols = gemm_tn(w.data(), &xm, i, o * kh * kw, n * h * wd);
    Ok(Tensor::from_parts(vec![n, o, ho, wo], col2im(&cols, &geo)))
}


/// Gradient of `conv2d(x, w)` with respect to `w`, given the output gradient `g`.
///
/// `x: [N, C, H, W]`, `g: [N, O, H', W']` -> `[O, C, K, K]`.
pub fn conv_weight_grad(
    x: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    kernel: usize,
) -> Result<Tensor> {
    let [n, c, h, wd] = dims4("conv_weight_grad", x)?;
    let [n2, o, ho, wo] = dims4("conv_weight_grad", g)?;
    if n != n2 {
        return Err(Error::shape("conv_weight_grad", format!("batch {n} vs {n2}")));
    }
    if conv_out_extent(h, kernel, stride, pad) != Some(ho) || conv_out_extent(wd, kernel, stride, pad) != Some(wo) {
        return Err(Error::shape(
            "conv_weight_grad",
            format!("gradient {:?} does not match input {:?}", g.shape(), x.shape()),
        ));
    }
    let geo = ConvGeometry { n, c, h, w: wd, k: kernel, stride, pad, ho, wo };
    let cols = im2col(x.data(), &geo);
    let gm = batch_to_channels(g.data(), n, o, ho * wo);
    let out = gemm_nt(&gm, &cols, o, n * ho * wo, c * kernel * kernel);
    Ok(Tensor::from_parts(vec![o, c, kernel, kernel], out))
}


/// Block average over the last two axes.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || factor == 0 {
        return Err(Error::shape("avg_pool", format!("rank {r}, factor {factor}")));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avg_pool",
            format!("{h}x{w} is not divisible by {factor}"),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let planes = x.len() / (h * w);
    let inv = 1.0 / (factor * factor) as f64;
    let xd = x.data();
    let mut out = vec![0.0; planes * ho * wo];
    let mut block = Vec::with_capacity(factor * factor);
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                block.clear();
                for dy in 0..factor {
                    let row = (oy * factor + dy) * w + ox * factor;
                    block.extend_from_slice(&src[row..row + factor]);
                }
                dst[oy * wo + ox] = pairwise_sum(&block) * inv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Ok(Tensor::from_parts(shape, out))
}

/// Tree summation; exact for a run of equal values whose count is a power of two.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Nearest-neighbour replication over the last two axes.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || factor == 0 {
        return Err(Error::shape("upsample_nearest", format!("rank {r}, factor {factor}")));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let (ho, wo) = (h * factor, w * factor);
    let planes = x.len() / (h * w);
    let xd = x.data();
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = src[(oy / factor) * w + ox / factor];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Ok(Tensor::from_parts(shape, out))
}

/// `[N, ...] -> [N]`, summing each leading-axis row.
pub fn sum_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::shape("sum_rows", "scalar input"));
    }
    let n = x.shape()[0];
    let r = x.row_len();
    let out = x.data().chunks(r).map(|c| c.iter().sum()).collect();
    Ok(Tensor::from_parts(vec![n], out))
}

/// `[N] -> shape`, repeating value `i` across row `i` of `shape`.
pub fn broadcast_rows(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if x.rank() != 1 || shape.first() != Some(&x.shape()[0]) {
        return Err(Error::shape(
            "broadcast_rows",
            format!("{:?} -> {shape:?}", x.shape()),
        ));
    }
    let r: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(x.len() * r);
    for &v in x.data() {
        out.extend(std::iter::repeat_n(v, r));
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need [N, C, ...], got {shape:?}")));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

/// `[N, C, ...] -> [C]`, summing over every axis except the channel axis.
pub fn sum_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, inner) = channel_layout("sum_channels", x.shape())?;
    let xd = x.data();
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (b * c + ch) * inner;
            *o += xd[base..base + inner].iter().sum::<f64>();
        }
    }
    Ok(Tensor::from_parts(vec![c], out))
}

/// `[C] -> [N, C, ...]`.
pub fn broadcast_channels(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let (n, c, inner) = channel_layout("broadcast_channels", shape)?;
    if x.shape() != [c] {
        return Err(Error::shape(
            "broadcast_channels",
            format!("{:?} -> {shape:?}", x.shape()),
        ));
    }
    let mut out = Vec::with_capacity(n * c * inner);
    for _ in 0..n {
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, inner));
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Euclidean norm of each leading-axis row.
pub fn l2_norm_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::shape("l2_norm_rows", "scalar input"));
    }
    let out = x
        .data()
        .chunks(x.row_len())
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(Tensor::from_parts(vec![x.shape()[0]], out))
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(Error::shape("concat", format!("axis {axis} out of range")));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} on axis {axis}", first.shape(), p.shape()),
            ));
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, inner) = outer_inner(first.shape(), axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let span = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * span..(o + 1) * span]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Zero padding along one axis.
pub fn pad_axis(x: &Tensor, axis: usize, before: usize, after: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape("pad", format!("axis {axis} out of range")));
    }
    let (outer, inner) = outer_inner(x.shape(), axis);
    let len = x.shape()[axis];
    let new_len = len + before + after;
    let mut out = vec![0.0; outer * new_len * inner];
    for o in 0..outer {
        let src = &x.data()[o * len * inner..(o + 1) * len * inner];
        let dst = o * new_len * inner + before * inner;
        out[dst..dst + len * inner].copy_from_slice(src);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = new_len;
    Ok(Tensor::from_parts(shape, out))
}

pub fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::shape(
            "slice",
            format!("[{start}, {}) of axis {axis} in {:?}", start + len, x.shape()),
        ));
    }
    let (outer, inner) = outer_inner(x.shape(), axis);
    let full = x.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid_range(count: usize, stride: usize, off: isize, limit: usize) -> (usize, usize) {
        let ok: Vec<usize> = (0..count)
            .filter(|&i| {
                let p = (i * stride) as isize + off;
                p >= 0 && p < limit as isize
            })
            .collect();
        match (ok.first(), ok.last()) {
            (Some(&a), Some(&b)) => (a, b + 1),
            _ => (0, 0),
        }
    }

fn direct_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, wd] = dims4("conv2d", x)?;
    let [o, c2, kh, kw] = dims4("conv2d", w)?;
    if c != c2 {
        return Err(Error::shape("conv2d", format!("input channels {c} vs kernel {c2}")));
    }
    let (ho, wo) = match (conv_out_extent(h, kh, stride, pad), conv_out_extent(wd, kw, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{wd} with pad {pad}"),
            ))
        }
    };
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            let plane = &mut out[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
            for ic in 0..c {
                let xin = &xd[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[((oc * c + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            let off = kx as isize - pad as isize;
                            let (lo, hi) = valid_range(wo, stride, off, wd);
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[(ox * stride).wrapping_add_signed(off)];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, ho, wo], out))
}

fn direct_conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor> {
    let [n, i, h, wd] = dims4("conv_transpose2d", x)?;
    let [i2, o, kh, kw] = dims4("conv_transpose2d", w)?;
    if i != i2 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input channels {i} vs kernel {i2}"),
        ));
    }
    if stride == 0 || out_pad >= stride {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("out_pad {out_pad} must be below stride {stride}"),
        ));
    }
    let (ho, wo) = match (
        deconv_out_extent(h, kh, stride, pad, out_pad),
        deconv_out_extent(wd, kw, stride, pad, out_pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shape("conv_transpose2d", "empty output")),
    };
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for ic in 0..i {
            let xin = &xd[(b * i + ic) * h * wd..(b * i + ic + 1) * h * wd];
            for oc in 0..o {
                let plane = &mut out[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[((ic * o + oc) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let oy = (y * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            let xrow = &xin[y * wd..(y + 1) * wd];
                            let orow = &mut plane[oy as usize * wo..(oy as usize + 1) * wo];
                            let off = kx as isize - pad as isize;
                            let (lo, hi) = valid_range(wd, stride, off, wo);
                            for xx in lo..hi {
                                orow[(xx * stride).wrapping_add_signed(off)] += wv * xrow[xx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, ho, wo], out))
}

fn direct_conv_weight_grad(
    x: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    kernel: usize,
) -> Result<Tensor> {
    let [n, c, h, wd] = dims4("conv_weight_grad", x)?;
    let [n2, o, ho, wo] = dims4("conv_weight_grad", g)?;
    if n != n2 {
        return Err(Error::shape("conv_weight_grad", format!("batch {n} vs {n2}")));
    }
    let (xd, gd) = (x.data(), g.data());
    let k = kernel;
    let mut out = vec![0.0; o * c * k * k];
    for b in 0..n {
        for oc in 0..o {
            let gplane = &gd[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
            for ic in 0..c {
                let xin = &xd[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let off = kx as isize - pad as isize;
                            let (lo, hi) = valid_range(wo, stride, off, wd);
                            for ox in lo..hi {
                                acc += grow[ox] * xrow[(ox * stride).wrapping_add_signed(off)];
                            }
                        }
                        out[((oc * c + ic) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![o, c, k, k], out))
}


    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(f).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    fn close(a: &Tensor, b: &Tensor) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gemm_convs_match_direct_loops() {
        for &(h, k, stride, pad) in &[(7, 5, 2, 2), (8, 5, 2, 2), (6, 3, 1, 1), (5, 3, 1, 0), (9, 4, 3, 1)] {
            let x = t(&[2, 3, h, h + 1], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
            let w = t(&[4, 3, k, k], |i| ((i * 13 % 17) as f64 - 8.0) / 9.0);
            let y = conv2d(&x, &w, stride, pad).unwrap();
            close(&y, &direct_conv2d(&x, &w, stride, pad).unwrap());
            let g = t(y.shape(), |i| ((i * 7 % 5) as f64 - 2.0) / 3.0);
            close(
                &conv_weight_grad(&x, &g, stride, pad, k).unwrap(),
                &direct_conv_weight_grad(&x, &g, stride, pad, k).unwrap(),
            );
            let wt = t(&[3, 4, k, k], |i| ((i * 5 % 13) as f64 - 6.0) / 8.0);
            for out_pad in 0..stride {
                close(
                    &conv_transpose2d(&x, &wt, stride, pad, out_pad).unwrap(),
                    &direct_conv_transpose2d(&x, &wt, stride, pad, out_pad).unwrap(),
                );
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let v = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(matmul(&Tensor::eye(3), &v).unwrap(), v);
        assert!(matmul(&Tensor::eye(3), &Tensor::eye(2)).is_err());
    }

    #[test]
    fn conv_identity_kernel_preserves_constant() {
        let x = Tensor::full(&[1, 1, 8, 8], 5.0);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn deconv_single_tap_spreads() {
        let x = Tensor::full(&[1, 1, 1, 1], 5.0);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv_transpose2d(&x, &w, 2, 0, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x, w), y> == <x, convT(y, w)>
        let x = t(&[2, 3, 7, 7], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
        let w = t(&[4, 3, 5, 5], |i| ((i * 13 % 17) as f64 - 8.0) / 9.0);
        let y0 = conv2d(&x, &w, 2, 2).unwrap();
        let y = t(y0.shape(), |i| ((i * 7 % 5) as f64 - 2.0) / 3.0);
        let out_pad = 7 - kernels_deconv_base(y.shape()[2], 5, 2, 2);
        let xt = conv_transpose2d(&y, &w, 2, 2, out_pad).unwrap();
        assert_eq!(xt.shape(), x.shape());
        assert!((dot(&y0, &y) - dot(&x, &xt)).abs() < 1e-10);

        let gw = conv_weight_grad(&x, &y, 2, 2, 5).unwrap();
        assert_eq!(gw.shape(), w.shape());
        assert!((dot(&gw, &w) - dot(&y0, &y)).abs() < 1e-10);
    }

    fn kernels_deconv_base(h: usize, k: usize, s: usize, p: usize) -> usize {
        deconv_out_extent(h, k, s, p, 0).unwrap()
    }

    #[test]
    fn shape_rules() {
        assert_eq!(conv_out_extent(64, 5, 2, 2), Some(32));
        assert_eq!(deconv_out_extent(16, 5, 2, 2, 1), Some(32));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
    }

    #[test]
    fn avg_pool_block_mean() {
        let x = t(&[1, 1, 4, 4], |i| i as f64);
        assert_eq!(avg_pool(&x, 4).unwrap().data(), &[7.5]);
        let up = upsample_nearest(&x, 4).unwrap();
        assert_eq!(avg_pool(&up, 4).unwrap(), x);
        assert!(avg_pool(&Tensor::zeros(&[1, 1, 6, 6]), 4).is_err());
    }

    #[test]
    fn concat_slice_pad() {
        let a = t(&[2, 2, 3], |i| i as f64);
        let b = t(&[2, 1, 3], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(slice_axis(&c, 1, 0, 2).unwrap(), a);
        assert_eq!(slice_axis(&c, 1, 2, 1).unwrap(), b);
        let p = pad_axis(&b, 1, 2, 0).unwrap();
        assert_eq!(p.shape(), &[2, 3, 3]);
        assert_eq!(slice_axis(&p, 1, 2, 1).unwrap(), b);
        assert_eq!(slice_axis(&p, 1, 0, 2).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn channel_reductions() {
        let x = t(&[2, 3, 2], |i| i as f64);
        let s = sum_channels(&x).unwrap();
        assert_eq!(s.data(), &[0.0 + 1.0 + 6.0 + 7.0, 2.0 + 3.0 + 8.0 + 9.0, 4.0 + 5.0 + 10.0 + 11.0]);
        let b = broadcast_channels(&Tensor::vector(&[1.0, 2.0, 3.0]), &[2, 3, 2]).unwrap();
        assert_eq!(b.data(), &[1., 1., 2., 2., 3., 3., 1., 1., 2., 2., 3., 3.]);
    }
}
