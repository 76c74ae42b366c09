use rayon::prelude::*;

use super::conv::ConvGeometry;
use super::Padding;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Max pooling. Returns the output and, per output element, the flat input
/// index that won. Windows are scanned row-major and only a strictly larger
/// value replaces the current maximum, so ties go to the first cell. Padded
/// cells never win.
pub fn maxpool2d_forward<T: Real>(
    x: &Tensor<T>,
    pool: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let g = ConvGeometry::new(x.dims(), pool, pool, stride, padding)?;
    let c = g.in_c;
    let xd = x.data();
    let in_image = g.in_h * g.in_w * c;
    let out_image = g.out_h * g.out_w * c;
    let mut out = vec![T::ZERO; g.batch * out_image];
    let mut arg = vec![0usize; g.batch * out_image];
    out.par_chunks_mut(out_image)
        .zip(arg.par_chunks_mut(out_image))
        .enumerate()
        .for_each(|(n, (y, a))| {
            let base = n * in_image;
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let o = (oh * g.out_w + ow) * c;
                    let y_px = &mut y[o..o + c];
                    let a_px = &mut a[o..o + c];
                    y_px.fill(T::NEG_INFINITY);
                    a_px.fill(usize::MAX);
                    for kh in 0..pool {
                        let Some(ih) = (oh * stride + kh)
                            .checked_sub(g.pad_top)
                            .filter(|&i| i < g.in_h)
                        else {
                            continue;
                        };
                        for kw in 0..pool {
                            let Some(iw) = (ow * stride + kw)
                                .checked_sub(g.pad_left)
                                .filter(|&i| i < g.in_w)
                            else {
                                continue;
                            };
                            let src = base + (ih * g.in_w + iw) * c;
                            for ch in 0..c {
                                let v = xd[src + ch];
                                if a_px[ch] == usize::MAX || v > y_px[ch] {
                                    y_px[ch] = v;
                                    a_px[ch] = src + ch;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok((Tensor::new([g.batch, g.out_h, g.out_w, c], out)?, arg))
}

/// Routes each upstream gradient to its stored argmax; overlapping windows
/// accumulate in output order.
pub fn maxpool2d_backward<T: Real>(
    x_dims: &[usize],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != dy.len() {
        return Err(Error::InvalidArgument(
            "maxpool argmax does not match upstream gradient".into(),
        ));
    }
    let batch = x_dims[0];
    let in_image: usize = x_dims[1..].iter().product();
    let out_image = dy.len() / batch;
    let mut dx = vec![T::ZERO; batch * in_image];
    dx.par_chunks_mut(in_image).enumerate().for_each(|(n, dx_img)| {
        let base = n * in_image;
        let range = n * out_image..(n + 1) * out_image;
        for (&src, &gv) in argmax[range.clone()].iter().zip(&dy.data()[range]) {
            dx_img[src - base] += gv;
        }
    });
    Tensor::new(x_dims.to_vec(), dx)
}

/// Mean over the spatial axes: `[N, H, W, C] -> [N, C]`.
pub fn global_avg_pool_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = *x.dims() else {
        return Err(Error::InvalidArgument(format!(
            "global average pooling expects NHWC, got {}",
            x.shape()
        )));
    };
    let count = T::from_usize(h * w);
    let mut out = vec![T::ZERO; n * c];
    for (img, acc) in x.data().chunks_exact(h * w * c).zip(out.chunks_exact_mut(c)) {
        for px in img.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a / count;
        }
    }
    Tensor::new([n, c], out)
}

pub fn global_avg_pool_backward<T: Real>(x_dims: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = *x_dims else {
        return Err(Error::InvalidArgument("global average pooling expects NHWC".into()));
    };
    if dy.dims() != [n, c] {
        return Err(Error::InvalidArgument(format!(
            "upstream gradient {} does not match [{n}, {c}]",
            dy.shape()
        )));
    }
    let count = T::from_usize(h * w);
    let mut dx = Vec::with_capacity(n * h * w * c);
    for g in dy.data().chunks_exact(c) {
        let scaled: Vec<T> = g.iter().map(|&v| v / count).collect();
        for _ in 0..h * w {
            dx.extend_from_slice(&scaled);
        }
    }
    Tensor::new(x_dims.to_vec(), dx)
}
