//! Same-padded stride-1 convolution on `[C, H, W]` planes, plus the small
//! structural ops the U-Net needs between levels.
//!
//! Convolutions unfold the input into columns and hand the products to a
//! blocked matrix multiply.

use crate::tensor::{pool_plane, pool_plane_backward, PoolKind};

/// Geometry of one convolution; weights are `[out, in, k, k]`, row-major.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    /// Output row range and column range valid for tap offset `(dy, dx)`.
    #[inline]
    fn valid(&self, dy: isize, dx: isize) -> (usize, usize, usize, usize) {
        let (h, w) = (self.h as isize, self.w as isize);
        let y0 = (-dy).max(0) as usize;
        let y1 = (h - dy).min(h).max(0) as usize;
        let x0 = (-dx).max(0) as usize;
        let x1 = (w - dx).min(w).max(0) as usize;
        (y0, y1, x0, x1)
    }
}

/// Unfolds `input` into `[in_c * k * k, h * w]` columns with zero padding.
fn im2col(s: ConvShape, input: &[f64], cols: &mut [f64]) {
    let plane = s.h * s.w;
    let pad = s.pad();
    cols.fill(0.0);
    for c in 0..s.in_c {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (c * s.k + ky) * s.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let (y0, y1, x0, x1) = s.valid(dy, dx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * s.w + x0..y * s.w + x1]
                        .copy_from_slice(&src[sy * s.w + sx0..sy * s.w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(s: ConvShape, cols: &[f64], dinput: &mut [f64]) {
    let plane = s.h * s.w;
    let pad = s.pad();
    for c in 0..s.in_c {
        let dst = &mut dinput[c * plane..(c + 1) * plane];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (c * s.k + ky) * s.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let (y0, y1, x0, x1) = s.valid(dy, dx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let d = &mut dst[sy * s.w + sx0..sy * s.w + sx0 + (x1 - x0)];
                    for (a, &b) in d.iter_mut().zip(&src[y * s.w + x0..y * s.w + x1]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape
/// `m x k` and `op(b)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // row-major blocks whose lengths were just checked.
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

pub(crate) fn conv_forward(
    s: ConvShape,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let plane = s.h * s.w;
    let rows = s.in_c * s.k * s.k;
    for (o, dst) in out[..s.out_c * plane].chunks_exact_mut(plane).enumerate() {
        dst.fill(bias[o]);
    }
    if s.k == 1 {
        gemm(s.out_c, rows, plane, weight, false, input, false, 1.0, out);
        return;
    }
    let mut cols = vec![0.0; rows * plane];
    im2col(s, input, &mut cols);
    gemm(s.out_c, rows, plane, weight, false, &cols, false, 1.0, out);
}

/// Accumulates weight and bias gradients, and the input gradient when
/// `dinput` is given.
pub(crate) fn conv_backward(
    s: ConvShape,
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let plane = s.h * s.w;
    let rows = s.in_c * s.k * s.k;
    for (o, g) in dout[..s.out_c * plane].chunks_exact(plane).enumerate() {
        dbias[o] += g.iter().sum::<f64>();
    }
    if s.k == 1 {
        gemm(s.out_c, plane, rows, dout, false, input, true, 1.0, dweight);
        if let Some(din) = dinput {
            gemm(rows, s.out_c, plane, weight, true, dout, false, 1.0, din);
        }
        return;
    }
    let mut cols = vec![0.0; rows * plane];
    im2col(s, input, &mut cols);
    // dW[o, r] += sum_p dout[o, p] * cols[r, p]
    gemm(s.out_c, plane, rows, dout, false, &cols, true, 1.0, dweight);
    if let Some(din) = dinput {
        // dcols[r, p] = sum_o W[o, r] * dout[o, p]
        gemm(
            rows, s.out_c, plane, weight, true, dout, false, 0.0, &mut cols,
        );
        col2im(s, &cols, din);
    }
}

pub(crate) fn relu_inplace(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Masks `grad` in place by the positive entries of a ReLU output.
pub(crate) fn relu_backward_inplace(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub(crate) fn pool_channels(src: &[f64], c: usize, h: usize, w: usize, kind: PoolKind) -> Vec<f64> {
    let (plane, out_plane) = (h * w, (h / 2) * (w / 2));
    let mut out = vec![0.0; c * out_plane];
    for ch in 0..c {
        pool_plane(
            &src[ch * plane..(ch + 1) * plane],
            h,
            w,
            kind,
            &mut out[ch * out_plane..(ch + 1) * out_plane],
        );
    }
    out
}

pub(crate) fn pool_channels_backward(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kind: PoolKind,
    upstream: &[f64],
    dsrc: &mut [f64],
) {
    let (plane, out_plane) = (h * w, (h / 2) * (w / 2));
    for ch in 0..c {
        pool_plane_backward(
            &src[ch * plane..(ch + 1) * plane],
            h,
            w,
            kind,
            &upstream[ch * out_plane..(ch + 1) * out_plane],
            &mut dsrc[ch * plane..(ch + 1) * plane],
        );
    }
}

/// Nearest-neighbour ×2 upsampling of `[c, h, w]` into `[c, 2h, 2w]`.
pub(crate) fn upsample2(src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let s = &src[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            let d = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            for (x, v) in d.iter_mut().enumerate() {
                *v = s[x / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample2`]; `dup` is `[c, 2h, 2w]`.
pub(crate) fn upsample2_backward(dup: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            let g = &dup[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            let d = &mut out[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            for (x, &v) in g.iter().enumerate() {
                d[x / 2] += v;
            }
        }
    }
    out
}
