//! Dense compute kernels: blocked matrix multiply and im2col-based 2-D
//! convolution (forward, input gradient, weight gradient).
//!
//! Parallel loops split work by output row so every output element is written
//! by exactly one thread with a fixed sequential reduction order; results are
//! bitwise deterministic regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Work size above which matmul rows are distributed across threads.
const PAR_THRESHOLD: usize = 1 << 16;

/// `out[m,n] = a[m,k] · b[k,n]`. `out` must be zeroed by the caller unless it
/// accumulates. Rows are processed four at a time so each loaded `b` row
/// feeds four independent accumulator rows.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let block = |a_rows: &[T], c_rows: &mut [T]| {
        let rows = a_rows.len() / k;
        let mut r = 0;
        while r + 4 <= rows {
            let (c01, c23) = c_rows[r * n..(r + 4) * n].split_at_mut(2 * n);
            let (c0, c1) = c01.split_at_mut(n);
            let (c2, c3) = c23.split_at_mut(n);
            for p in 0..k {
                let a0 = a_rows[r * k + p];
                let a1 = a_rows[(r + 1) * k + p];
                let a2 = a_rows[(r + 2) * k + p];
                let a3 = a_rows[(r + 3) * k + p];
                let b_row = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    let bv = b_row[j];
                    c0[j] = c0[j] + a0 * bv;
                    c1[j] = c1[j] + a1 * bv;
                    c2[j] = c2[j] + a2 * bv;
                    c3[j] = c3[j] + a3 * bv;
                }
            }
            r += 4;
        }
        while r < rows {
            let c_row = &mut c_rows[r * n..(r + 1) * n];
            for p in 0..k {
                let av = a_rows[r * k + p];
                if av == T::zero() {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (c, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                    *c = *c + av * bv;
                }
            }
            r += 1;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m >= 8 {
        // Split by groups of rows; each output row is written by one thread.
        let threads = rayon::current_num_threads().max(1);
        let rows_per = m.div_ceil(threads).div_ceil(4) * 4;
        out.par_chunks_mut(rows_per * n)
            .zip(a.par_chunks(rows_per * k))
            .for_each(|(c_rows, a_rows)| block(a_rows, c_rows));
    } else {
        block(a, out);
    }
}

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

pub(crate) fn transpose2<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved geometry of one convolution. `same` pads with zeros, splitting
/// any odd padding with the extra pixel on the bottom/right.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

pub(crate) fn conv_geometry(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(Error::invalid(
            "conv2d",
            format!("expected 4-D input and weight, got {x_shape:?} / {w_shape:?}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, wcin, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if cin != wcin {
        return Err(Error::ShapeMismatch {
            op: "conv2d (input channels)",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    let (ho, wo, pad_top, pad_left) = match padding {
        Padding::Same => {
            let ho = h.div_ceil(stride);
            let wo = w.div_ceil(stride);
            let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
            (ho, wo, pad_h / 2, pad_w / 2)
        }
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::invalid(
                    "conv2d",
                    format!("zero-sized spatial output: input {h}x{w}, kernel {kh}x{kw}"),
                ));
            }
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
        }
    };
    if ho == 0 || wo == 0 {
        return Err(Error::invalid("conv2d", "zero-sized spatial output"));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad_top,
        pad_left,
        ho,
        wo,
    })
}

/// One sample of `x` unrolled to a `[cin*kh*kw, ho*wo]` column matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let howo = g.ho * g.wo;
    debug_assert_eq!(col.len(), g.ckk() * howo);
    let mut row = 0usize;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dkh in 0..g.kh {
            for dkw in 0..g.kw {
                let dst = &mut col[row * howo..(row + 1) * howo];
                row += 1;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + dkh) as isize - g.pad_top as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, out_v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + dkw) as isize - g.pad_left as isize;
                        *out_v = if iw >= 0 && iw < g.w as isize {
                            src_row[iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into one sample.
fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let howo = g.ho * g.wo;
    let mut row = 0usize;
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dkh in 0..g.kh {
            for dkw in 0..g.kw {
                let src = &col[row * howo..(row + 1) * howo];
                row += 1;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + dkh) as isize - g.pad_top as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let src_row = &src[oh * g.wo..(oh + 1) * g.wo];
                    for (ow, &v) in src_row.iter().enumerate() {
                        let iw = (ow * g.stride + dkw) as isize - g.pad_left as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst_row[iw as usize] = dst_row[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `bias` has one entry per output channel.
pub(crate) fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &[T], g: &ConvGeom) -> Tensor<T> {
    let howo = g.ho * g.wo;
    let ckk = g.ckk();
    let mut out = vec![T::zero(); g.n * g.cout * howo];
    let mut col = vec![T::zero(); ckk * howo];
    for s in 0..g.n {
        let x_s = &x.data()[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
        im2col(x_s, g, &mut col);
        let y_s = &mut out[s * g.cout * howo..(s + 1) * g.cout * howo];
        matmul_acc(w.data(), &col, g.cout, ckk, howo, y_s);
        for c in 0..g.cout {
            let b = bias[c];
            if b != T::zero() {
                for v in &mut y_s[c * howo..(c + 1) * howo] {
                    *v = *v + b;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)
}

/// Gradient of [`conv2d`] with respect to its input; also the forward pass of
/// the transposed convolution (exact adjoint by construction).
pub(crate) fn conv2d_input_grad<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let howo = g.ho * g.wo;
    let ckk = g.ckk();
    let wt = transpose2(w.data(), g.cout, ckk);
    let mut gx = vec![T::zero(); g.n * g.cin * g.h * g.w];
    let mut colg = vec![T::zero(); ckk * howo];
    for s in 0..g.n {
        let gy_s = &gy.data()[s * g.cout * howo..(s + 1) * g.cout * howo];
        colg.fill(T::zero());
        matmul_acc(&wt, gy_s, ckk, g.cout, howo, &mut colg);
        let gx_s = &mut gx[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
        col2im_add(&colg, g, gx_s);
    }
    Tensor::new(vec![g.n, g.cin, g.h, g.w], gx)
}

/// Gradient of [`conv2d`] with respect to the weight.
pub(crate) fn conv2d_weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let howo = g.ho * g.wo;
    let ckk = g.ckk();
    let mut gw = vec![T::zero(); g.cout * ckk];
    let mut col = vec![T::zero(); ckk * howo];
    for s in 0..g.n {
        let x_s = &x.data()[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
        im2col(x_s, g, &mut col);
        let col_t = transpose2(&col, ckk, howo);
        let gy_s = &gy.data()[s * g.cout * howo..(s + 1) * g.cout * howo];
        matmul_acc(gy_s, &col_t, g.cout, howo, ckk, &mut gw);
    }
    Tensor::new(vec![g.cout, g.cin, g.kh, g.kw], gw)
}

/// Gradient of [`conv2d`] with respect to the bias: per-channel sum.
pub(crate) fn conv2d_bias_grad<T: Scalar>(gy: &Tensor<T>, g: &ConvGeom) -> Vec<T> {
    let howo = g.ho * g.wo;
    let mut gb = vec![T::zero(); g.cout];
    for s in 0..g.n {
        for c in 0..g.cout {
            let plane = &gy.data()[(s * g.cout + c) * howo..(s * g.cout + c + 1) * howo];
            gb[c] = gb[c] + plane.iter().copied().sum();
        }
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let eye = vec![1.0f64, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &eye, 2, 2, 2), a);
    }

    #[test]
    fn same_padding_prefers_bottom_right() {
        // 5x5 input, kernel 4, stride 2 -> out 3, total pad = (3-1)*2+4-5 = 3.
        let g = conv_geometry(&[1, 1, 5, 5], &[1, 1, 4, 4], 2, Padding::Same).unwrap();
        assert_eq!((g.ho, g.wo), (3, 3));
        assert_eq!(g.pad_top, 1); // 3/2 = 1 on top, 2 on the bottom
    }

    #[test]
    fn valid_too_small_errors() {
        assert!(conv_geometry(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, Padding::Valid).is_err());
    }
}
