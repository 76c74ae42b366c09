//! Direct convolutions: full, depthwise (multiplier 1) and separable.
//!
//! Kernels are HWIO (`[kh, kw, in, out]`), activations NHWC. Every output
//! element is accumulated from zero over `(kh, kw, cin)` in ascending order;
//! taps that fall into padding are skipped, which is bit-identical to adding
//! a zero product. Bias, when present, is added after the accumulation.
//!
//! Parallel work is split per image (forward, input gradient) or per kernel
//! tap (weight gradient). The accumulation order of each element is the same
//! for every split.

use rayon::prelude::*;

use super::Padding;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Output size and leading padding along one spatial axis, or `None` when
/// a valid window does not fit.
///
/// valid: `floor((in - k) / stride) + 1`; same: `ceil(in / stride)` with
/// total padding `max((out - 1) * stride + k - in, 0)`, the odd cell going
/// to the bottom/right.
pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        x_dims: &[usize],
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [batch, in_h, in_w, in_c] = *x_dims else {
            return Err(Error::InvalidArgument(format!(
                "expected NHWC input, got dims {x_dims:?}"
            )));
        };
        if stride == 0 || k_h == 0 || k_w == 0 {
            return Err(Error::InvalidArgument("kernel and stride must be >= 1".into()));
        }
        let too_small = || {
            Error::InvalidArgument(format!(
                "input {in_h}x{in_w} is smaller than the {k_h}x{k_w} window"
            ))
        };
        let (out_h, pad_top) = conv_output_size(in_h, k_h, stride, padding).ok_or_else(too_small)?;
        let (out_w, pad_left) = conv_output_size(in_w, k_w, stride, padding).ok_or_else(too_small)?;
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            k_h,
            k_w,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Input row for output row `o` and tap `k`, if inside the image.
    #[inline]
    fn in_row(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.pad_top)
            .filter(|&i| i < self.in_h)
    }

    #[inline]
    fn in_col(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.pad_left)
            .filter(|&i| i < self.in_w)
    }

    fn in_image(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }
}

fn check_kernel<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [k_h, k_w, k_in, k_out] = *kernel.dims() else {
        return Err(Error::InvalidArgument(format!(
            "conv kernel must be [kh, kw, in, out], got {}",
            kernel.shape()
        )));
    };
    let in_c = x.dims().last().copied().unwrap_or(0);
    if k_in != in_c {
        return Err(Error::ChannelMismatch {
            input: in_c,
            expected: k_in,
        });
    }
    Ok((k_h, k_w, k_out))
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (k_h, k_w, c_out) = check_kernel(x, kernel)?;
    let g = ConvGeometry::new(x.dims(), k_h, k_w, stride, padding)?;
    if let Some(b) = bias {
        if b.dims() != [c_out] {
            return Err(Error::InvalidArgument(format!(
                "bias shape {} does not match {c_out} filters",
                b.shape()
            )));
        }
    }
    let xd = x.data();
    let kd = kernel.data();
    let c_in = g.in_c;
    let out_image = g.out_h * g.out_w * c_out;
    let mut out = vec![T::ZERO; g.batch * out_image];
    out.par_chunks_mut(out_image).enumerate().for_each(|(n, y)| {
        let x_img = &xd[n * g.in_image()..(n + 1) * g.in_image()];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let acc = &mut y[(oh * g.out_w + ow) * c_out..][..c_out];
                for kh in 0..k_h {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    for kw in 0..k_w {
                        let Some(iw) = g.in_col(ow, kw) else { continue };
                        let x_px = &x_img[(ih * g.in_w + iw) * c_in..][..c_in];
                        let k_tap = &kd[(kh * k_w + kw) * c_in * c_out..][..c_in * c_out];
                        for (ci, &xv) in x_px.iter().enumerate() {
                            let w_row = &k_tap[ci * c_out..][..c_out];
                            for (a, &w) in acc.iter_mut().zip(w_row) {
                                *a += xv * w;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    for (a, &bv) in acc.iter_mut().zip(b.data()) {
                        *a += bv;
                    }
                }
            }
        }
    });
    Tensor::new([g.batch, g.out_h, g.out_w, c_out], out)
}

pub struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d_forward`].
///
/// Input gradient element `(ih, iw, ci)` sums `dy * w` over
/// `(oh, ow, kh, kw, cout)` ascending; kernel gradient element sums
/// `x * dy` over `(n, oh, ow)` ascending; bias gradient sums `dy` over
/// `(n, oh, ow)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
    has_bias: bool,
    want_input: bool,
    want_params: bool,
) -> Result<ConvGrads<T>> {
    let (k_h, k_w, c_out) = check_kernel(x, kernel)?;
    let g = ConvGeometry::new(x.dims(), k_h, k_w, stride, padding)?;
    let expected = [g.batch, g.out_h, g.out_w, c_out];
    if dy.dims() != expected {
        return Err(Error::InvalidArgument(format!(
            "upstream gradient {} does not match conv output {expected:?}",
            dy.shape()
        )));
    }
    let c_in = g.in_c;
    let xd = x.data();
    let dyd = dy.data();
    let out_image = g.out_h * g.out_w * c_out;

    let input = if want_input {
        // kernel transposed to [kh, kw, out, in] so the inner loop runs over cin
        let kd = kernel.data();
        let mut kt = vec![T::ZERO; kd.len()];
        for tap in 0..k_h * k_w {
            for ci in 0..c_in {
                for co in 0..c_out {
                    kt[(tap * c_out + co) * c_in + ci] = kd[(tap * c_in + ci) * c_out + co];
                }
            }
        }
        let mut dx = vec![T::ZERO; xd.len()];
        dx.par_chunks_mut(g.in_image()).enumerate().for_each(|(n, dx_img)| {
            let dy_img = &dyd[n * out_image..(n + 1) * out_image];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let dy_px = &dy_img[(oh * g.out_w + ow) * c_out..][..c_out];
                    for kh in 0..k_h {
                        let Some(ih) = g.in_row(oh, kh) else { continue };
                        for kw in 0..k_w {
                            let Some(iw) = g.in_col(ow, kw) else { continue };
                            let dx_px = &mut dx_img[(ih * g.in_w + iw) * c_in..][..c_in];
                            let kt_tap = &kt[(kh * k_w + kw) * c_out * c_in..][..c_out * c_in];
                            for (co, &gv) in dy_px.iter().enumerate() {
                                if gv == T::ZERO {
                                    continue;
                                }
                                let w_row = &kt_tap[co * c_in..][..c_in];
                                for (d, &w) in dx_px.iter_mut().zip(w_row) {
                                    *d += gv * w;
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::new(x.dims().to_vec(), dx)?)
    } else {
        None
    };

    let (kernel_grad, bias_grad) = if want_params {
        let mut dk = vec![T::ZERO; kernel.len()];
        dk.par_chunks_mut(c_in * c_out)
            .enumerate()
            .for_each(|(tap, dk_tap)| {
                let (kh, kw) = (tap / k_w, tap % k_w);
                for n in 0..g.batch {
                    let x_img = &xd[n * g.in_image()..(n + 1) * g.in_image()];
                    let dy_img = &dyd[n * out_image..(n + 1) * out_image];
                    for oh in 0..g.out_h {
                        let Some(ih) = g.in_row(oh, kh) else { continue };
                        for ow in 0..g.out_w {
                            let Some(iw) = g.in_col(ow, kw) else { continue };
                            let x_px = &x_img[(ih * g.in_w + iw) * c_in..][..c_in];
                            let dy_px = &dy_img[(oh * g.out_w + ow) * c_out..][..c_out];
                            for (ci, &xv) in x_px.iter().enumerate() {
                                if xv == T::ZERO {
                                    continue;
                                }
                                let row = &mut dk_tap[ci * c_out..][..c_out];
                                for (d, &gv) in row.iter_mut().zip(dy_px) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            });
        let bias_grad = if has_bias {
            let mut db = vec![T::ZERO; c_out];
            for px in dyd.chunks_exact(c_out) {
                for (d, &gv) in db.iter_mut().zip(px) {
                    *d += gv;
                }
            }
            Some(Tensor::new([c_out], db)?)
        } else {
            None
        };
        (Some(Tensor::new(kernel.dims().to_vec(), dk)?), bias_grad)
    } else {
        (None, None)
    };
    Ok(ConvGrads {
        input,
        kernel: kernel_grad,
        bias: bias_grad,
    })
}

fn check_depthwise<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize)> {
    let [k_h, k_w, k_c, 1] = *kernel.dims() else {
        return Err(Error::InvalidArgument(format!(
            "depthwise kernel must be [kh, kw, channels, 1], got {}",
            kernel.shape()
        )));
    };
    let in_c = x.dims().last().copied().unwrap_or(0);
    if k_c != in_c {
        return Err(Error::ChannelMismatch {
            input: in_c,
            expected: k_c,
        });
    }
    Ok((k_h, k_w))
}

/// Per-channel spatial convolution, stride 1, depth multiplier 1.
pub fn depthwise_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (k_h, k_w) = check_depthwise(x, kernel)?;
    let g = ConvGeometry::new(x.dims(), k_h, k_w, 1, padding)?;
    let c = g.in_c;
    let xd = x.data();
    let kd = kernel.data();
    let out_image = g.out_h * g.out_w * c;
    let mut out = vec![T::ZERO; g.batch * out_image];
    out.par_chunks_mut(out_image).enumerate().for_each(|(n, y)| {
        let x_img = &xd[n * g.in_image()..(n + 1) * g.in_image()];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let acc = &mut y[(oh * g.out_w + ow) * c..][..c];
                for kh in 0..k_h {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    for kw in 0..k_w {
                        let Some(iw) = g.in_col(ow, kw) else { continue };
                        let x_px = &x_img[(ih * g.in_w + iw) * c..][..c];
                        let k_tap = &kd[(kh * k_w + kw) * c..][..c];
                        for ((a, &xv), &w) in acc.iter_mut().zip(x_px).zip(k_tap) {
                            *a += xv * w;
                        }
                    }
                }
            }
        }
    });
    Tensor::new([g.batch, g.out_h, g.out_w, c], out)
}

pub fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    padding: Padding,
    want_input: bool,
    want_params: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (k_h, k_w) = check_depthwise(x, kernel)?;
    let g = ConvGeometry::new(x.dims(), k_h, k_w, 1, padding)?;
    let c = g.in_c;
    if dy.dims() != [g.batch, g.out_h, g.out_w, c] {
        return Err(Error::InvalidArgument(format!(
            "upstream gradient {} does not match depthwise output",
            dy.shape()
        )));
    }
    let xd = x.data();
    let kd = kernel.data();
    let dyd = dy.data();
    let out_image = g.out_h * g.out_w * c;
    let dx = if want_input {
        let mut dx = vec![T::ZERO; xd.len()];
        dx.par_chunks_mut(g.in_image()).enumerate().for_each(|(n, dx_img)| {
            let dy_img = &dyd[n * out_image..(n + 1) * out_image];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let dy_px = &dy_img[(oh * g.out_w + ow) * c..][..c];
                    for kh in 0..k_h {
                        let Some(ih) = g.in_row(oh, kh) else { continue };
                        for kw in 0..k_w {
                            let Some(iw) = g.in_col(ow, kw) else { continue };
                            let dx_px = &mut dx_img[(ih * g.in_w + iw) * c..][..c];
                            let k_tap = &kd[(kh * k_w + kw) * c..][..c];
                            for ((d, &gv), &w) in dx_px.iter_mut().zip(dy_px).zip(k_tap) {
                                *d += gv * w;
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::new(x.dims().to_vec(), dx)?)
    } else {
        None
    };
    let dk = if want_params {
        let mut dk = vec![T::ZERO; kd.len()];
        dk.par_chunks_mut(c).enumerate().for_each(|(tap, dk_tap)| {
            let (kh, kw) = (tap / k_w, tap % k_w);
            for n in 0..g.batch {
                let x_img = &xd[n * g.in_image()..(n + 1) * g.in_image()];
                let dy_img = &dyd[n * out_image..(n + 1) * out_image];
                for oh in 0..g.out_h {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    for ow in 0..g.out_w {
                        let Some(iw) = g.in_col(ow, kw) else { continue };
                        let x_px = &x_img[(ih * g.in_w + iw) * c..][..c];
                        let dy_px = &dy_img[(oh * g.out_w + ow) * c..][..c];
                        for ((d, &xv), &gv) in dk_tap.iter_mut().zip(x_px).zip(dy_px) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        });
        Some(Tensor::new(kernel.dims().to_vec(), dk)?)
    } else {
        None
    };
    Ok((dx, dk))
}

/// Depthwise convolution followed by a 1x1 pointwise convolution.
/// Returns `(output, depthwise_output)`; the latter is kept for backward.
pub fn separable_conv2d_forward<T: Real>(
    x: &Tensor<T>,
    depthwise: &Tensor<T>,
    pointwise: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if pointwise.dims().len() != 4 || pointwise.dims()[..2] != [1, 1] {
        return Err(Error::InvalidArgument(format!(
            "pointwise kernel must be [1, 1, in, out], got {}",
            pointwise.shape()
        )));
    }
    let mid = depthwise_forward(x, depthwise, padding)?;
    let out = conv2d_forward(&mid, pointwise, bias, 1, Padding::Valid)?;
    Ok((out, mid))
}
