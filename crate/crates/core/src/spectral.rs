//! Convolution weights synthesized from one shared frequency tensor.
//!
//! A kernel of any shape `(c_out, c_in, kh, kw)` is produced by resizing the
//! stored `(C_f, C_f, k_max, k_max)` tensor with orthonormal DFTs: first the
//! two spatial axes, then the input-channel axis, then the output-channel
//! axis. Each resize zero-pads (target longer) or keeps the leading
//! coefficients (target shorter). Padding shrinks the coefficient variance
//! by `N/K`, so padded results are divided by `sqrt(N/K)`. The complex result
//! is kept across all three resizes and its magnitude is taken once at the
//! end.
//!
//! Both cases collapse into one `K x N` matrix,
//! `R[k][n] = exp(-2πi·k·n / max(N, K)) / sqrt(N)`, which is unitary when
//! `N == K`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

/// Channel width of the stored frequency tensor.
pub const FREQ_CHANNELS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyKernel {
    freq: Tensor,
}

impl FrequencyKernel {
    pub fn new(freq: Tensor) -> Result<Self> {
        match freq.shape() {
            [a, b, h, w] if a == b && h == w && *a > 0 && *h > 0 => Ok(FrequencyKernel { freq }),
            s => Err(Error::shape(
                "frequency_kernel",
                format!("expected (C, C, k, k), got {s:?}"),
            )),
        }
    }

    /// Standard-normal entries.
    pub fn random<R: Rng + ?Sized>(channels: usize, k_max: usize, rng: &mut R) -> Self {
        FrequencyKernel {
            freq: Tensor::randn(&[channels, channels, k_max, k_max], 1.0, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.freq.shape()[0]
    }

    pub fn k_max(&self) -> usize {
        self.freq.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.freq
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.freq
    }

    pub fn into_tensor(self) -> Tensor {
        self.freq
    }
}

/// The `K x N` resize matrix, row-major.
pub fn resize_matrix(n: usize, k: usize) -> Vec<Complex64> {
    let period = n.max(k) as f64;
    let scale = 1.0 / (n as f64).sqrt();
    let mut m = Vec::with_capacity(n * k);
    for row in 0..k {
        for col in 0..n {
            // Reduce the index product first so the angle stays small.
            let idx = (row * col) % n.max(k);
            let theta = -2.0 * std::f64::consts::PI * idx as f64 / period;
            m.push(Complex64::from_polar(scale, theta));
        }
    }
    m
}

fn adjoint(m: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c].conj();
        }
    }
    out
}

/// Resize a real sequence of length `N` to `K` DFT coefficients.
pub fn dft_resize_1d(x: &[f64], k: usize) -> Vec<Complex64> {
    let z: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft_resize_1d_complex(&z, k)
}

pub fn dft_resize_1d_complex(x: &[Complex64], k: usize) -> Vec<Complex64> {
    let n = x.len();
    let m = resize_matrix(n, k);
    (0..k)
        .map(|r| m[r * n..(r + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Separable resize of a `kh0 x kw0` real map to `kh x kw`, row-major.
pub fn dft_resize_2d(map: &[f64], kh0: usize, kw0: usize, kh: usize, kw: usize) -> Vec<Complex64> {
    debug_assert_eq!(map.len(), kh0 * kw0);
    let data: Vec<Complex64> = map.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let (d, s) = apply_axis(&data, [1, 1, kh0, kw0], 2, &resize_matrix(kh0, kh), kh);
    let (d, _) = apply_axis(&d, s, 3, &resize_matrix(kw0, kw), kw);
    d
}

/// Multiply a complex `rows x shape[axis]` matrix into one axis of a rank-4
/// complex array.
fn apply_axis(
    data: &[Complex64],
    shape: [usize; 4],
    axis: usize,
    mat: &[Complex64],
    rows: usize,
) -> (Vec<Complex64>, [usize; 4]) {
    let cols = shape[axis];
    debug_assert_eq!(mat.len(), rows * cols);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![Complex64::new(0.0, 0.0); outer * rows * inner];
    out.par_chunks_mut(inner).enumerate().for_each(|(idx, dst)| {
        let (o, r) = (idx / rows, idx % rows);
        let mrow = &mat[r * cols..(r + 1) * cols];
        for (c, &mv) in mrow.iter().enumerate() {
            let src = &data[(o * cols + c) * inner..(o * cols + c + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += mv * s;
            }
        }
    });
    let mut new_shape = shape;
    new_shape[axis] = rows;
    (out, new_shape)
}

/// Target kernel shape `(c_out, c_in, kh, kw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KernelShape {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
}

impl KernelShape {
    pub fn new(c_in: usize, c_out: usize, kh: usize, kw: usize) -> Self {
        KernelShape { c_out, c_in, kh, kw }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }
}

/// Complex coefficients before the final magnitude, laid out as
/// `(c_out, c_in, kh, kw)`.
pub fn materialize_complex(freq: &Tensor, target: KernelShape) -> Vec<Complex64> {
    let s = freq.shape();
    let (cf_o, cf_i, k0h, k0w) = (s[0], s[1], s[2], s[3]);
    let data: Vec<Complex64> = freq.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let shape = [cf_o, cf_i, k0h, k0w];
    let (d, shape) = apply_axis(&data, shape, 2, &resize_matrix(k0h, target.kh), target.kh);
    let (d, shape) = apply_axis(&d, shape, 3, &resize_matrix(k0w, target.kw), target.kw);
    let (d, shape) = apply_axis(&d, shape, 1, &resize_matrix(cf_i, target.c_in), target.c_in);
    let (d, _) = apply_axis(&d, shape, 0, &resize_matrix(cf_o, target.c_out), target.c_out);
    d
}

/// Materialize a `(c_out, c_in, kh, kw)` weight tensor from `fk`.
pub fn materialize(fk: &FrequencyKernel, c_in: usize, c_out: usize, kh: usize, kw: usize) -> Result<Tensor> {
    if c_in == 0 || c_out == 0 || kh == 0 || kw == 0 {
        return Err(Error::shape("materialize", "all target sizes must be positive"));
    }
    let target = KernelShape::new(c_in, c_out, kh, kw);
    let z = materialize_complex(fk.tensor(), target);
    Tensor::new(target.dims().to_vec(), z.iter().map(|c| c.norm()).collect())
}

/// Gradient with respect to the frequency tensor, given the complex
/// coefficients `z` from the forward pass and the upstream gradient `g` on
/// their magnitudes. Zero-magnitude entries contribute nothing.
pub fn materialize_backward(freq_shape: &[usize], target: KernelShape, z: &[Complex64], g: &Tensor) -> Tensor {
    let (cf_o, cf_i, k0h, k0w) = (freq_shape[0], freq_shape[1], freq_shape[2], freq_shape[3]);
    let u: Vec<Complex64> = z
        .iter()
        .zip(g.data())
        .map(|(zv, &gv)| {
            let m = zv.norm();
            if m == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                zv * (gv / m)
            }
        })
        .collect();
    let shape = target.dims();
    let adj = |n: usize, k: usize| adjoint(&resize_matrix(n, k), k, n);
    let (d, shape) = apply_axis(&u, shape, 0, &adj(cf_o, target.c_out), cf_o);
    let (d, shape) = apply_axis(&d, shape, 1, &adj(cf_i, target.c_in), cf_i);
    let (d, shape) = apply_axis(&d, shape, 3, &adj(k0w, target.kw), k0w);
    let (d, _) = apply_axis(&d, shape, 2, &adj(k0h, target.kh), k0h);
    Tensor::new(freq_shape.to_vec(), d.iter().map(|c| c.re).collect()).expect("shape")
}
