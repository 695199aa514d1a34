//! CPU kernels behind the graph operations.
//!
//! Convolution goes through im2col plus a blocked GEMM. Batch-parallel
//! work is split into fixed-size image chunks so that every reduction has
//! a schedule-independent order: results are bitwise reproducible for a
//! given build regardless of thread timing.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use rayon::prelude::*;

/// Images per parallel work unit. Fixed (not derived from thread count) so
/// cross-chunk reductions always combine the same partials in the same
/// order.
const IMAGE_CHUNK: usize = 8;

pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!(
            "conv window {k} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Gather one image's receptive fields into a `[C*kh*kw, out_h*out_w]`
/// row-major matrix. Out-of-bounds taps contribute zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    let out_hw = out_h * out_w;
    debug_assert_eq!(cols.len(), c * k * k * out_hw);
    let mut row = 0usize;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * out_hw..(row + 1) * out_hw];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        for v in dst_row.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`] back onto an image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    img_grad: &mut [T],
) {
    let out_hw = out_h * out_w;
    let mut row = 0usize;
    for ch in 0..c {
        let plane = &mut img_grad[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * out_hw..(row + 1) * out_hw];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * out_w..(oy + 1) * out_w];
                    for (ox, g) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += *g;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv2d_dims<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let (n, c_in, h, w) = input.dims4()?;
    let (c_out, kc, kh, kw) = kernel.dims4()?;
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::Config(format!(
            "conv kernel must be square 1x1 or 3x3, got {kh}x{kw}"
        )));
    }
    if kc != c_in {
        return Err(Error::Config(format!(
            "conv channel mismatch: input has {c_in}, kernel expects {kc}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv stride must be positive".into()));
    }
    let out_h = conv_out_extent(h, kh, stride, pad)?;
    let out_w = conv_out_extent(w, kw, stride, pad)?;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        out_h,
        out_w,
    })
}

pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = conv2d_dims(input, kernel, stride, pad)?;
    let out_hw = d.out_h * d.out_w;
    let ckk = d.c_in * d.k * d.k;
    let mut out = Tensor::zeros(&[d.n, d.c_out, d.out_h, d.out_w]);
    let in_stride = d.c_in * d.h * d.w;
    let out_stride = d.c_out * out_hw;
    let kdata = kernel.data();
    let idata = input.data();

    out.data_mut()
        .par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(i, out_img)| {
            let img = &idata[i * in_stride..(i + 1) * in_stride];
            let mut cols = vec![T::zero(); ckk * out_hw];
            im2col(img, d.c_in, d.h, d.w, d.k, stride, pad, d.out_h, d.out_w, &mut cols);
            // out[c_out, out_hw] = kernel[c_out, ckk] * cols[ckk, out_hw]
            unsafe {
                T::gemm(
                    d.c_out,
                    ckk,
                    out_hw,
                    T::one(),
                    kdata.as_ptr(),
                    ckk as isize,
                    1,
                    cols.as_ptr(),
                    out_hw as isize,
                    1,
                    T::zero(),
                    out_img.as_mut_ptr(),
                    out_hw as isize,
                    1,
                );
            }
        });
    Ok(out)
}

/// Adjoints of [`conv2d_forward`]: returns `(grad_input, grad_kernel)`.
/// `grad_input` is skipped when the input does not require it.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let d = conv2d_dims(input, kernel, stride, pad)?;
    let out_hw = d.out_h * d.out_w;
    let ckk = d.c_in * d.k * d.k;
    let in_stride = d.c_in * d.h * d.w;
    let out_stride = d.c_out * out_hw;
    let idata = input.data();
    let kdata = kernel.data();
    let gdata = grad_out.data();

    // Kernel gradient: per-chunk partials accumulated sequentially within a
    // chunk, then combined in chunk order.
    let chunk_grads: Vec<Vec<T>> = (0..d.n)
        .collect::<Vec<_>>()
        .par_chunks(IMAGE_CHUNK)
        .map(|chunk| {
            let mut gk = vec![T::zero(); d.c_out * ckk];
            let mut cols = vec![T::zero(); ckk * out_hw];
            for &i in chunk {
                let img = &idata[i * in_stride..(i + 1) * in_stride];
                let gout = &gdata[i * out_stride..(i + 1) * out_stride];
                im2col(img, d.c_in, d.h, d.w, d.k, stride, pad, d.out_h, d.out_w, &mut cols);
                // gk[c_out, ckk] += gout[c_out, out_hw] * cols^T[out_hw, ckk]
                unsafe {
                    T::gemm(
                        d.c_out,
                        out_hw,
                        ckk,
                        T::one(),
                        gout.as_ptr(),
                        out_hw as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        out_hw as isize,
                        T::one(),
                        gk.as_mut_ptr(),
                        ckk as isize,
                        1,
                    );
                }
            }
            gk
        })
        .collect();

    let mut grad_kernel = Tensor::zeros(kernel.shape());
    for gk in &chunk_grads {
        for (acc, v) in grad_kernel.data_mut().iter_mut().zip(gk.iter()) {
            *acc += *v;
        }
    }

    let grad_input = if need_input_grad {
        let mut gin = Tensor::zeros(input.shape());
        gin.data_mut()
            .par_chunks_mut(in_stride)
            .enumerate()
            .for_each(|(i, gimg)| {
                let gout = &gdata[i * out_stride..(i + 1) * out_stride];
                let mut gcols = vec![T::zero(); ckk * out_hw];
                // gcols[ckk, out_hw] = kernel^T[ckk, c_out] * gout[c_out, out_hw]
                unsafe {
                    T::gemm(
                        ckk,
                        d.c_out,
                        out_hw,
                        T::one(),
                        kdata.as_ptr(),
                        1,
                        ckk as isize,
                        gout.as_ptr(),
                        out_hw as isize,
                        1,
                        T::zero(),
                        gcols.as_mut_ptr(),
                        out_hw as isize,
                        1,
                    );
                }
                col2im_add(
                    &gcols, d.c_in, d.h, d.w, d.k, stride, pad, d.out_h, d.out_w, gimg,
                );
            });
        Some(gin)
    } else {
        None
    };

    Ok((grad_input, grad_kernel))
}

pub fn avgpool2d_forward<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::Config("pool window and stride must be positive".into()));
    }
    if window > h || window > w {
        return Err(Error::Config(format!(
            "pool window {window} exceeds spatial extent {h}x{w}"
        )));
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let norm = T::from_f64(1.0 / (window * window) as f64);
    let odata = out.data_mut();
    let idata = input.data();
    for img in 0..n {
        for ch in 0..c {
            let plane = &idata[(img * c + ch) * h * w..];
            let oplane = &mut odata[(img * c + ch) * out_h * out_w..(img * c + ch + 1) * out_h * out_w];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = T::zero();
                    for ky in 0..window {
                        for kx in 0..window {
                            acc += plane[(oy * stride + ky) * w + (ox * stride + kx)];
                        }
                    }
                    oplane[oy * out_w + ox] = acc * norm;
                }
            }
        }
    }
    Ok(out)
}

pub fn avgpool2d_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let mut gin = Tensor::zeros(input_shape);
    let (n, c, h, w) = gin.dims4()?;
    let (gn, gc, out_h, out_w) = grad_out.dims4()?;
    debug_assert_eq!((n, c), (gn, gc));
    let norm = T::from_f64(1.0 / (window * window) as f64);
    let gdata = grad_out.data();
    let idata = gin.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let gplane = &gdata[(img * c + ch) * out_h * out_w..];
            let plane = &mut idata[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let g = gplane[oy * out_w + ox] * norm;
                    for ky in 0..window {
                        for kx in 0..window {
                            plane[(oy * stride + ky) * w + (ox * stride + kx)] += g;
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Translate image content by `(dy, dx)`; vacated border is zero-filled.
pub fn pixel_shift<T: Element>(input: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let mut out = Tensor::zeros(input.shape());
    let idata = input.data();
    let odata = out.data_mut();
    for plane_idx in 0..n * c {
        let src = &idata[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut odata[plane_idx * h * w..(plane_idx + 1) * h * w];
        for y in 0..h as isize {
            let sy = y - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w as isize {
                let sx = x - dx;
                if sx >= 0 && sx < w as isize {
                    dst[(y * w as isize + x) as usize] = src[(sy * w as isize + sx) as usize];
                }
            }
        }
    }
    Ok(out)
}

/// `out[N, Ca+Cb, H, W]` from two tensors agreeing on N, H, W.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Config(format!(
            "concat: batch/spatial mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[na, ca + cb, ha, wa]);
    let hw = ha * wa;
    let odata = out.data_mut();
    for img in 0..na {
        let dst = &mut odata[img * (ca + cb) * hw..(img + 1) * (ca + cb) * hw];
        dst[..ca * hw].copy_from_slice(&a.data()[img * ca * hw..(img + 1) * ca * hw]);
        dst[ca * hw..].copy_from_slice(&b.data()[img * cb * hw..(img + 1) * cb * hw]);
    }
    Ok(out)
}

/// Split a channel-concatenated gradient back into the two parts.
pub fn split_channels<T: Element>(
    grad: &Tensor<T>,
    ca: usize,
    cb: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad.dims4()?;
    debug_assert_eq!(c, ca + cb);
    let hw = h * w;
    let mut ga = Tensor::zeros(&[n, ca, h, w]);
    let mut gb = Tensor::zeros(&[n, cb, h, w]);
    for img in 0..n {
        let src = &grad.data()[img * c * hw..(img + 1) * c * hw];
        ga.data_mut()[img * ca * hw..(img + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
        gb.data_mut()[img * cb * hw..(img + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
    }
    Ok((ga, gb))
}

/// `out[N, K] = x[N, D] * weight[K, D]^T + bias[K]`
pub fn linear_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d) = input.dims2()?;
    let (k, dw) = weight.dims2()?;
    if d != dw {
        return Err(Error::Config(format!(
            "linear: input dim {d} vs weight dim {dw}"
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::Config(format!(
            "linear: bias shape {:?}, expected [{k}]",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, k]);
    unsafe {
        T::gemm(
            n,
            d,
            k,
            T::one(),
            input.data().as_ptr(),
            d as isize,
            1,
            weight.data().as_ptr(),
            1,
            d as isize,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            k as isize,
            1,
        );
    }
    let odata = out.data_mut();
    for row in 0..n {
        for (j, b) in bias.data().iter().enumerate() {
            odata[row * k + j] += *b;
        }
    }
    Ok(out)
}

/// Adjoints of [`linear_forward`]: `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, d) = input.dims2()?;
    let (k, _) = weight.dims2()?;
    let grad_input = if need_input_grad {
        let mut gx = Tensor::zeros(&[n, d]);
        unsafe {
            T::gemm(
                n,
                k,
                d,
                T::one(),
                grad_out.data().as_ptr(),
                k as isize,
                1,
                weight.data().as_ptr(),
                d as isize,
                1,
                T::zero(),
                gx.data_mut().as_mut_ptr(),
                d as isize,
                1,
            );
        }
        Some(gx)
    } else {
        None
    };

    let mut gw = Tensor::zeros(&[k, d]);
    unsafe {
        T::gemm(
            k,
            n,
            d,
            T::one(),
            grad_out.data().as_ptr(),
            1,
            k as isize,
            input.data().as_ptr(),
            d as isize,
            1,
            T::zero(),
            gw.data_mut().as_mut_ptr(),
            d as isize,
            1,
        );
    }

    let mut gb = Tensor::zeros(&[k]);
    for row in 0..n {
        for j in 0..k {
            gb.data_mut()[j] += grad_out.data()[row * k + j];
        }
    }
    Ok((grad_input, gw, gb))
}

/// Per-channel mean and biased variance over (N, H, W), accumulated at
/// double precision regardless of the element type.
pub fn channel_stats<T: Element>(input: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = input.dims4()?;
    let m = (n * h * w) as f64;
    let hw = h * w;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let idata = input.data();
    for img in 0..n {
        for ch in 0..c {
            let plane = &idata[(img * c + ch) * hw..(img * c + ch + 1) * hw];
            let mut s = 0.0f64;
            for v in plane {
                s += v.as_f64();
            }
            mean[ch] += s;
        }
    }
    for mc in &mut mean {
        *mc /= m;
    }
    for img in 0..n {
        for ch in 0..c {
            let plane = &idata[(img * c + ch) * hw..(img * c + ch + 1) * hw];
            let mu = mean[ch];
            let mut s = 0.0f64;
            for v in plane {
                let d = v.as_f64() - mu;
                s += d * d;
            }
            var[ch] += s;
        }
    }
    for vc in &mut var {
        *vc /= m;
    }
    Ok((mean, var))
}
