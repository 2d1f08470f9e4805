//! Forward and backward kernels for the closed operation set.
//!
//! These are plain functions over [`Tensor`]; the [`Tape`](super::Tape)
//! records which kernel produced each value and calls the matching
//! backward kernel.

use super::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Divisors below this magnitude are rejected by `divide_by_scalar`.
pub const SCALE_TOLERANCE: f64 = 1e-12;

/// Variance floor inside `batch_norm_rep`.
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvAttrs {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvAttrs {
    fn default() -> Self {
        ConvAttrs {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolAttrs {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

/// `floor((size + 2 * padding - k) / stride) + 1`, or `None` when the window
/// does not fit.
pub fn out_size(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

fn window_out(op: &'static str, h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Result<(usize, usize)> {
    match (out_size(h, kh, stride, padding), out_size(w, kw, stride, padding)) {
        (Some(ho), Some(wo)) => Ok((ho, wo)),
        _ => Err(Error::shape(
            op,
            format!("window {kh}x{kw} stride {stride} padding {padding} does not fit {h}x{w}"),
        )),
    }
}

// ---------------------------------------------------------------- conv2d

pub fn conv2d(x: &Tensor, w: &Tensor, attrs: ConvAttrs) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (o, cg, kh, kw) = w.dims4("conv2d")?;
    let g = attrs.groups;
    if g == 0 || c % g != 0 || o % g != 0 || c / g != cg {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} incompatible with weight {:?} for groups={}", x.shape(), w.shape(), g),
        ));
    }
    let (ho, wo) = window_out("conv2d", h, wd, kh, kw, attrs.stride, attrs.padding)?;
    let og = o / g;
    let (s, p) = (attrs.stride as isize, attrs.padding as isize);
    let xd = x.data();
    let wdat = w.data();
    let plane = ho * wo;
    let mut out = vec![0.0; n * o * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (b, oc) = (idx / o, idx % o);
        let grp = oc / og;
        for ci in 0..cg {
            let ch = grp * cg + ci;
            let xin = &xd[(b * c + ch) * h * wd..(b * c + ch + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[((oc * cg + ci) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < wd as isize {
                                *d += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![n, o, ho, wo], out)
}

/// Returns `(dx, dw)` for the upstream gradient `g` of `conv2d(x, w)`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, attrs: ConvAttrs) -> (Tensor, Tensor) {
    let (n, c, h, wd) = x.dims4("conv2d").expect("validated in forward");
    let (o, cg, kh, kw) = w.dims4("conv2d").expect("validated in forward");
    let (_, _, ho, wo) = g.dims4("conv2d").expect("validated in forward");
    let og = o / attrs.groups;
    let (s, p) = (attrs.stride as isize, attrs.padding as isize);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());

    // dw: each output channel's filter is independent.
    let filt = cg * kh * kw;
    let mut dw = vec![0.0; o * filt];
    dw.par_chunks_mut(filt).enumerate().for_each(|(oc, dst)| {
        let grp = oc / og;
        for b in 0..n {
            let gp = &gd[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
            for ci in 0..cg {
                let ch = grp * cg + ci;
                let xin = &xd[(b * c + ch) * h * wd..(b * c + ch + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < wd as isize {
                                    acc += gp[oy * wo + ox] * xin[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                        dst[(ci * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });

    // dx: each batch item is independent.
    let item = c * h * wd;
    let mut dx = vec![0.0; n * item];
    dx.par_chunks_mut(item).enumerate().for_each(|(b, dst)| {
        for oc in 0..o {
            let grp = oc / og;
            let gp = &gd[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
            for ci in 0..cg {
                let ch = grp * cg + ci;
                let dplane = &mut dst[ch * h * wd..(ch + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[((oc * cg + ci) * kh + ky) * kw + kx];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < wd as isize {
                                    dplane[iy as usize * wd + ix as usize] += wv * gp[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
    )
}

// ---------------------------------------------------------------- pooling

/// Max pooling; padded cells never win. Returns the output and the flat
/// input index of each window's maximum (first index on ties).
pub fn maxpool2d(x: &Tensor, a: PoolAttrs) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool2d")?;
    if a.padding * 2 > a.k {
        return Err(Error::shape("maxpool2d", "padding must be at most half the window"));
    }
    let (ho, wo) = window_out("maxpool2d", h, w, a.k, a.k, a.stride, a.padding)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..a.k {
                    let iy = (oy * a.stride + ky) as isize - a.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..a.k {
                        let ix = (ox * a.stride + kx) as isize - a.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xd[i] > best || best_i == usize::MAX {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn maxpool2d_backward(x: &Tensor, argmax: &[usize], g: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x.shape());
    let d = dx.data_mut();
    for (&i, &gv) in argmax.iter().zip(g.data()) {
        d[i] += gv;
    }
    dx
}

/// Average pooling; padded cells are excluded from the divisor.
pub fn avgpool2d(x: &Tensor, a: PoolAttrs) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("avgpool2d")?;
    let (ho, wo) = window_out("avgpool2d", h, w, a.k, a.k, a.stride, a.padding)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let (mut acc, mut cnt) = (0.0, 0usize);
                for_window(oy, ox, a, h, w, |iy, ix| {
                    acc += xd[base + iy * w + ix];
                    cnt += 1;
                });
                out.push(if cnt > 0 { acc / cnt as f64 } else { 0.0 });
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn avgpool2d_backward(x: &Tensor, g: &Tensor, a: PoolAttrs) -> Tensor {
    let (n, c, h, w) = x.dims4("avgpool2d").expect("validated");
    let (_, _, ho, wo) = g.dims4("avgpool2d").expect("validated");
    let mut dx = Tensor::zeros(x.shape());
    let d = dx.data_mut();
    let gd = g.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut cnt = 0usize;
                for_window(oy, ox, a, h, w, |_, _| cnt += 1);
                if cnt == 0 {
                    continue;
                }
                let gv = gd[(plane * ho + oy) * wo + ox] / cnt as f64;
                for_window(oy, ox, a, h, w, |iy, ix| d[base + iy * w + ix] += gv);
            }
        }
    }
    dx
}

fn for_window(oy: usize, ox: usize, a: PoolAttrs, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..a.k {
        let iy = (oy * a.stride + ky) as isize - a.padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..a.k {
            let ix = (ox * a.stride + kx) as isize - a.padding as isize;
            if ix >= 0 && ix < w as isize {
                f(iy as usize, ix as usize);
            }
        }
    }
}

/// `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let hw = h * w;
    let out = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let (_, _, h, w) = x.dims4("global_avg_pool").expect("validated");
    let hw = h * w;
    let mut data = Vec::with_capacity(x.len());
    for &gv in g.data() {
        data.extend(std::iter::repeat(gv / hw as f64).take(hw));
    }
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

// ---------------------------------------------------------------- dense

/// `(m, k) x (k, n) -> (m, n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (r, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *r += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose2(a: &Tensor) -> Tensor {
    let (m, n) = a.dims2("transpose").expect("rank 2");
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("shape")
}

/// `x (N, in)`, `w (out, in)`, optional `b (out)` -> `(N, out)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, fin) = x.dims2("linear")?;
    let (fout, fin2) = w.dims2("linear")?;
    if fin != fin2 {
        return Err(Error::shape("linear", format!("input {:?} vs weight {:?}", x.shape(), w.shape())));
    }
    if let Some(b) = b {
        if b.shape() != [fout] {
            return Err(Error::shape("linear", format!("bias {:?} vs {} outputs", b.shape(), fout)));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(n * fout);
    for i in 0..n {
        let xr = &xd[i * fin..(i + 1) * fin];
        for j in 0..fout {
            let wr = &wd[j * fin..(j + 1) * fin];
            let mut acc: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            if let Some(b) = b {
                acc += b.data()[j];
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![n, fout], out)
}

/// `(A, B, rest..) -> (B, A, rest..)`.
pub fn transpose_batch_channel(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("transpose_batch_channel", format!("rank {} input", s.len())));
    }
    let (a, b) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * inner;
            let dst = (j * a + i) * inner;
            out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape.swap(0, 1);
    Tensor::new(shape, out)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let s0 = first.shape();
    if s0.len() < 2 {
        return Err(Error::shape("concat", format!("rank {} input", s0.len())));
    }
    for x in xs {
        let s = x.shape();
        if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", s0, s)));
        }
    }
    let n = s0[0];
    let inner: usize = s0[2..].iter().product();
    let total_c: usize = xs.iter().map(|x| x.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * total_c * inner);
    for b in 0..n {
        for x in xs {
            let c = x.shape()[1];
            out.extend_from_slice(&x.data()[b * c * inner..(b + 1) * c * inner]);
        }
    }
    let mut shape = s0.to_vec();
    shape[1] = total_c;
    Tensor::new(shape, out)
}

pub fn concat_channels_backward(shapes: &[Vec<usize>], g: &Tensor) -> Vec<Tensor> {
    let n = g.shape()[0];
    let inner: usize = g.shape()[2..].iter().product();
    let total_c = g.shape()[1];
    let mut outs: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let gd = g.data();
    for b in 0..n {
        let mut off = 0;
        for (s, o) in shapes.iter().zip(outs.iter_mut()) {
            let c = s[1];
            let start = (b * total_c + off) * inner;
            o.extend_from_slice(&gd[start..start + c * inner]);
            off += c;
        }
    }
    shapes
        .iter()
        .zip(outs)
        .map(|(s, d)| Tensor::new(s.clone(), d).expect("shape"))
        .collect()
}

// ---------------------------------------------------------------- elementwise

pub fn symlog(x: f64) -> f64 {
    x.signum() * (x.abs() + 1.0).ln()
}

pub fn symlog_grad(x: f64) -> f64 {
    1.0 / (x.abs() + 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------- normalization

/// Normalizes every feature position across the leading (batch) axis and
/// prepends a unit batch axis that is folded back into the batch.
/// Returns the output together with the per-position `1/sqrt(var + eps)`.
pub fn batch_norm_rep(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("batch_norm_rep", format!("rank {} input", s.len())));
    }
    let n = s[0];
    let inner = x.len() / n;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    let mut inv = vec![0.0; inner];
    for j in 0..inner {
        let mean = (0..n).map(|b| d[b * inner + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|b| (d[b * inner + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + BATCH_NORM_EPS).sqrt();
        inv[j] = is;
        for b in 0..n {
            out[b * inner + j] = (d[b * inner + j] - mean) * is;
        }
    }
    // (N, ..) -> (1, N, ..) -> (1 * N, ..): the extra batch axis is folded.
    Ok((Tensor::new(s.to_vec(), out)?, inv))
}

pub fn batch_norm_rep_backward(y: &Tensor, inv: &[f64], g: &Tensor) -> Tensor {
    let n = y.shape()[0];
    let inner = y.len() / n;
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![0.0; yd.len()];
    for j in 0..inner {
        let sg: f64 = (0..n).map(|b| gd[b * inner + j]).sum();
        let sgy: f64 = (0..n).map(|b| gd[b * inner + j] * yd[b * inner + j]).sum();
        for b in 0..n {
            let i = b * inner + j;
            dx[i] = inv[j] / n as f64 * (n as f64 * gd[i] - sg - yd[i] * sgy);
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, ConvAttrs::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_output_arithmetic() {
        let x = Tensor::zeros(&[2, 4, 7, 9]);
        let w = Tensor::zeros(&[6, 2, 3, 5]);
        let a = ConvAttrs { stride: 2, padding: 1, groups: 2 };
        let y = conv2d(&x, &w, a).unwrap();
        assert_eq!(y.shape(), &[2, 6, 4, 4]);
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let x = Tensor::zeros(&[1, 4, 3, 3]);
        let w = Tensor::zeros(&[3, 2, 1, 1]);
        let a = ConvAttrs { groups: 2, ..Default::default() };
        assert!(matches!(conv2d(&x, &w, a), Err(Error::Shape { op: "conv2d", .. })));
    }

    #[test]
    fn avgpool_example() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = avgpool2d(&x, PoolAttrs { k: 2, stride: 2, padding: 0 }).unwrap();
        assert_eq!(y.item(), 2.5);
    }

    #[test]
    fn maxpool_ties_take_first_index() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap();
        let (y, arg) = maxpool2d(&x, PoolAttrs { k: 2, stride: 2, padding: 0 }).unwrap();
        assert_eq!(y.item(), 5.0);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn symlog_values() {
        let e1 = std::f64::consts::E - 1.0;
        assert_eq!(symlog(0.0), 0.0);
        assert!((symlog(e1) - 1.0).abs() < 1e-15);
        assert!((symlog(-e1) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn transpose_batch_channel_swaps_leading_axes() {
        let x = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let y = transpose_batch_channel(&x).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn batch_norm_rep_normalizes_across_batch() {
        let x = Tensor::new(vec![4, 1, 1, 2], vec![1.0, 0.0, 2.0, 10.0, 3.0, 20.0, 4.0, 30.0]).unwrap();
        let (y, _) = batch_norm_rep(&x).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..4).map(|b| y.data()[b * 2 + j]).collect();
            let m = col.iter().sum::<f64>() / 4.0;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
