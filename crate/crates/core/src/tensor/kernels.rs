//! Convolution kernels on raw NCHW buffers (im2col + GEMM).

use super::Float;
use crate::error::{Error, Result};

/// Spatial geometry shared by a convolution and its transpose. `h`, `w` are
/// the extents of the "large" side (conv input / transposed-conv output) and
/// `oh`, `ow` the extents of the window grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

pub fn conv2d_output_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose_output_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    if stride == 0 || size == 0 {
        return None;
    }
    let full = (size - 1) * stride + kernel;
    if full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

/// Unfolds one image `[c, h, w]` into columns `[c*kh*kw, oh*ow]`.
fn im2col<T: Float>(input: &[T], c: usize, g: &Geometry, cols: &mut [T]) {
    let p = g.positions();
    for ch in 0..c {
        let plane = &input[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `[c, h, w]`.
fn col2im<T: Float>(cols: &[T], c: usize, g: &Geometry, out: &mut [T]) {
    let p = g.positions();
    for ch in 0..c {
        let plane = &mut out[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    /// Channels on the large (conv input) side.
    pub c_big: usize,
    /// Channels on the window-grid (conv output) side.
    pub c_small: usize,
    pub g: Geometry,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.c_big * self.g.kh * self.g.kw
    }

    pub fn big_len(&self) -> usize {
        self.c_big * self.g.h * self.g.w
    }

    pub fn small_len(&self) -> usize {
        self.c_small * self.g.positions()
    }
}

/// Validates shapes for `conv2d(input [N,Cin,H,W], weight [Cout,Cin,kh,kw])`.
pub(crate) fn conv2d_dims(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if input.len() != 4 || weight.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    if input[1] != weight[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d (input channels vs weight)",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    if bias.iter().product::<usize>() != weight[0] {
        return Err(Error::ShapeMismatch {
            op: "conv2d (bias vs output channels)",
            lhs: bias.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
    let oh = conv2d_output_extent(h, kh, stride, pad);
    let ow = conv2d_output_extent(w, kw, stride, pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: format!(
                "kernel {kh}x{kw} with stride {stride} does not fit input {h}x{w} padded by {pad}"
            ),
        });
    };
    Ok(ConvDims {
        n: input[0],
        c_big: input[1],
        c_small: weight[0],
        g: Geometry { h, w, kh, kw, stride, pad, oh, ow },
    })
}

/// Validates shapes for `conv_transpose(input [N,Cin,H,W], weight [Cin,Cout,kh,kw])`.
pub(crate) fn conv_transpose_dims(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if input.len() != 4 || weight.len() != 4 || input[1] != weight[0] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transpose (input channels vs weight)",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    if bias.iter().product::<usize>() != weight[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transpose (bias vs output channels)",
            lhs: bias.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    let (ih, iw, kh, kw) = (input[2], input[3], weight[2], weight[3]);
    let h = conv_transpose_output_extent(ih, kh, stride, pad);
    let w = conv_transpose_output_extent(iw, kw, stride, pad);
    let (Some(h), Some(w)) = (h, w) else {
        return Err(Error::InvalidShape {
            op: "conv2d_transpose",
            reason: format!(
                "non-positive output extent for input {ih}x{iw}, kernel {kh}x{kw}, stride {stride}, padding {pad}"
            ),
        });
    };
    Ok(ConvDims {
        n: input[0],
        c_big: weight[1],
        c_small: input[1],
        g: Geometry { h, w, kh, kw, stride, pad, oh: ih, ow: iw },
    })
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Float>(dy: &[T], channels: usize, plane: usize, db: &mut [T]) {
    for (i, chunk) in dy.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
}

/// Forward cross-correlation. Output is `[n, c_small, oh, ow]`.
pub(crate) fn conv2d_forward<T: Float>(d: &ConvDims, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (k, p) = (d.k(), d.g.positions());
    let mut out = vec![T::zero(); d.n * d.small_len()];
    let mut cols = if d.g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for i in 0..d.n {
        let xi = &x[i * d.big_len()..(i + 1) * d.big_len()];
        let oi = &mut out[i * d.small_len()..(i + 1) * d.small_len()];
        let cols_ref: &[T] = if d.g.is_pointwise() {
            xi
        } else {
            im2col(xi, d.c_big, &d.g, &mut cols);
            &cols
        };
        T::gemm(d.c_small, k, p, w, false, cols_ref, false, oi, false);
    }
    add_bias(&mut out, b, p);
    out
}

/// Gradients of [`conv2d_forward`]. Each output slot is accumulated into when present.
pub(crate) fn conv2d_backward<T: Float>(
    d: &ConvDims,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (k, p) = (d.k(), d.g.positions());
    if let Some(db) = db {
        bias_grad(dy, d.c_small, p, db);
    }
    let mut dx = dx;
    let mut dw = dw;
    let mut cols = vec![T::zero(); k * p];
    for i in 0..d.n {
        let dyi = &dy[i * d.small_len()..(i + 1) * d.small_len()];
        if let Some(dw) = dw.as_deref_mut() {
            let xi = &x[i * d.big_len()..(i + 1) * d.big_len()];
            let cols_ref: &[T] = if d.g.is_pointwise() {
                xi
            } else {
                im2col(xi, d.c_big, &d.g, &mut cols);
                &cols
            };
            T::gemm(d.c_small, p, k, dyi, false, cols_ref, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx[i * d.big_len()..(i + 1) * d.big_len()];
            if d.g.is_pointwise() {
                T::gemm(k, d.c_small, p, w, true, dyi, false, dxi, true);
            } else {
                T::gemm(k, d.c_small, p, w, true, dyi, false, &mut cols, false);
                col2im(&cols, d.c_big, &d.g, dxi);
            }
        }
    }
}

/// Forward transposed convolution. Output is `[n, c_big, h, w]`.
pub(crate) fn conv_transpose_forward<T: Float>(d: &ConvDims, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (k, p) = (d.k(), d.g.positions());
    let mut out = vec![T::zero(); d.n * d.big_len()];
    let mut cols = vec![T::zero(); k * p];
    for i in 0..d.n {
        let xi = &x[i * d.small_len()..(i + 1) * d.small_len()];
        let oi = &mut out[i * d.big_len()..(i + 1) * d.big_len()];
        if d.g.is_pointwise() {
            T::gemm(k, d.c_small, p, w, true, xi, false, oi, false);
        } else {
            T::gemm(k, d.c_small, p, w, true, xi, false, &mut cols, false);
            col2im(&cols, d.c_big, &d.g, oi);
        }
    }
    add_bias(&mut out, b, d.g.h * d.g.w);
    out
}

pub(crate) fn conv_transpose_backward<T: Float>(
    d: &ConvDims,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (k, p) = (d.k(), d.g.positions());
    if let Some(db) = db {
        bias_grad(dy, d.c_big, d.g.h * d.g.w, db);
    }
    let mut dx = dx;
    let mut dw = dw;
    let mut cols = vec![T::zero(); k * p];
    for i in 0..d.n {
        let dyi = &dy[i * d.big_len()..(i + 1) * d.big_len()];
        let cols_ref: &[T] = if d.g.is_pointwise() {
            dyi
        } else {
            im2col(dyi, d.c_big, &d.g, &mut cols);
            &cols
        };
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx[i * d.small_len()..(i + 1) * d.small_len()];
            T::gemm(d.c_small, k, p, w, false, cols_ref, false, dxi, true);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xi = &x[i * d.small_len()..(i + 1) * d.small_len()];
            T::gemm(d.c_small, p, k, xi, false, cols_ref, true, dw, true);
        }
    }
}
