//! Training-time image augmentation: horizontal flip and affine warps
//! (rotation, zoom) by inverse-mapped bilinear sampling with edge
//! replication. Warps are linear in the input, so the backward pass
//! scatters the upstream gradient through the same bilinear weights.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::{sin_cos_f64, Real};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Linear part of an inverse warp about the image centre: output pixel at
/// offset `(dx, dy)` from the centre samples the source at
/// `(cx + m00*dx + m01*dy, cy + m10*dx + m11*dy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpParams {
    pub m00: f64,
    pub m01: f64,
    pub m10: f64,
    pub m11: f64,
}

impl WarpParams {
    pub const IDENTITY: WarpParams = WarpParams {
        m00: 1.0,
        m01: 0.0,
        m10: 0.0,
        m11: 1.0,
    };

    /// Content rotated by `angle` radians (counter-clockwise on screen).
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = sin_cos_f64(angle);
        WarpParams {
            m00: c,
            m01: s,
            m10: -s,
            m11: c,
        }
    }

    /// Source sampled at `scale` times the centre offset; `scale > 1`
    /// shows more of the image (zoom out).
    pub fn zoom(scale: f64) -> Self {
        WarpParams {
            m00: scale,
            m01: 0.0,
            m10: 0.0,
            m11: scale,
        }
    }

    /// Rotation angle for a uniform draw `u` and a factor given as a
    /// fraction of a full turn: uniform in `[-factor * 2pi, factor * 2pi)`.
    pub fn rotation_angle(u: f32, factor: f32) -> f64 {
        (2.0 * u as f64 - 1.0) * factor as f64 * 2.0 * PI
    }

    /// Zoom scale uniform in `[1 - factor, 1 + factor)`, shared by both axes.
    pub fn zoom_scale(u: f32, factor: f32) -> f64 {
        1.0 + (2.0 * u as f64 - 1.0) * factor as f64
    }
}

/// Source corners `(y0, y1, x0, x1)` and fractions `(fy, fx)` sampled by
/// output pixel `(i, j)`.
struct Sample {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: f64,
    fx: f64,
}

fn clamp_coord(v: f64, size: usize) -> (usize, usize, f64) {
    let v = v.clamp(0.0, (size - 1) as f64);
    let lo = v.floor() as usize;
    (lo, (lo + 1).min(size - 1), v - lo as f64)
}

fn sample(p: &WarpParams, h: usize, w: usize, i: usize, j: usize) -> Sample {
    let cy = (h as f64 - 1.0) * 0.5;
    let cx = (w as f64 - 1.0) * 0.5;
    let dy = i as f64 - cy;
    let dx = j as f64 - cx;
    let sx = p.m00 * dx + p.m01 * dy + cx;
    let sy = p.m10 * dx + p.m11 * dy + cy;
    let (y0, y1, fy) = clamp_coord(sy, h);
    let (x0, x1, fx) = clamp_coord(sx, w);
    Sample {
        y0,
        y1,
        x0,
        x1,
        fy,
        fx,
    }
}

/// Warp one `[H, W, C]` image: `(1-fy)*((1-fx)*a + fx*b) + fy*((1-fx)*c + fx*d)`.
pub fn warp_image<T: Real>(img: &[T], h: usize, w: usize, c: usize, p: &WarpParams) -> Vec<T> {
    let mut out = vec![T::ZERO; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let s = sample(p, h, w, i, j);
            let (fy, fx) = (T::from_f64(s.fy), T::from_f64(s.fx));
            let (gy, gx) = (T::ONE - fy, T::ONE - fx);
            for ch in 0..c {
                let a = img[(s.y0 * w + s.x0) * c + ch];
                let b = img[(s.y0 * w + s.x1) * c + ch];
                let cc = img[(s.y1 * w + s.x0) * c + ch];
                let d = img[(s.y1 * w + s.x1) * c + ch];
                out[(i * w + j) * c + ch] = gy * (gx * a + fx * b) + fy * (gx * cc + fx * d);
            }
        }
    }
    out
}

/// Adjoint of [`warp_image`]: scatter `dy` to the four source taps in
/// output order, with weights `(1-fy)(1-fx)`, `(1-fy)fx`, `fy(1-fx)`, `fy fx`.
pub fn warp_image_backward<T: Real>(
    dy: &[T],
    h: usize,
    w: usize,
    c: usize,
    p: &WarpParams,
) -> Vec<T> {
    let mut dx = vec![T::ZERO; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let s = sample(p, h, w, i, j);
            let (fy, fx) = (T::from_f64(s.fy), T::from_f64(s.fx));
            let (gy, gx) = (T::ONE - fy, T::ONE - fx);
            let taps = [
                (s.y0 * w + s.x0, gy * gx),
                (s.y0 * w + s.x1, gy * fx),
                (s.y1 * w + s.x0, fy * gx),
                (s.y1 * w + s.x1, fy * fx),
            ];
            for ch in 0..c {
                let g = dy[(i * w + j) * c + ch];
                for &(idx, wt) in &taps {
                    dx[idx * c + ch] += wt * g;
                }
            }
        }
    }
    dx
}

pub fn flip_image<T: Real>(img: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(img.len());
    for i in 0..h {
        for j in (0..w).rev() {
            out.extend_from_slice(&img[(i * w + j) * c..(i * w + j + 1) * c]);
        }
    }
    out
}

fn image_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.dims() {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::InvalidArgument(format!(
            "augmentation expects NHWC, got {}",
            x.shape()
        ))),
    }
}

/// Apply a per-image transform to every image of a batch.
fn per_image<T: Real, P: Sync>(
    x: &Tensor<T>,
    params: &[P],
    f: impl Fn(&[T], &P) -> Vec<T> + Sync,
) -> Result<Tensor<T>> {
    let (n, h, w, c) = image_dims(x)?;
    let size = h * w * c;
    let mut out = vec![T::ZERO; n * size];
    out.par_chunks_mut(size)
        .zip(x.data().par_chunks(size))
        .zip(params.par_iter())
        .for_each(|((o, img), p)| o.copy_from_slice(&f(img, p)));
    Tensor::new(x.dims().to_vec(), out)
}

pub fn flip_batch<T: Real>(x: &Tensor<T>, flips: &[bool]) -> Result<Tensor<T>> {
    let (_, h, w, c) = image_dims(x)?;
    per_image(x, flips, |img, &f| {
        if f {
            flip_image(img, h, w, c)
        } else {
            img.to_vec()
        }
    })
}

pub fn warp_batch<T: Real>(x: &Tensor<T>, params: &[WarpParams]) -> Result<Tensor<T>> {
    let (_, h, w, c) = image_dims(x)?;
    per_image(x, params, |img, p| warp_image(img, h, w, c, p))
}

pub fn warp_batch_backward<T: Real>(dy: &Tensor<T>, params: &[WarpParams]) -> Result<Tensor<T>> {
    let (_, h, w, c) = image_dims(dy)?;
    per_image(dy, params, |g, p| warp_image_backward(g, h, w, c, p))
}

/// Stream for image `index` of a batch; one stream per image so draws do
/// not depend on batch composition elsewhere.
pub fn image_stream(global_seed: u64, kind: &str, layer_seed: u64, node: &str, epoch: usize, batch: usize, index: usize) -> DetRng {
    DetRng::new(
        global_seed,
        format!("{kind}/{layer_seed}/{node}/e{epoch}/b{batch}/i{index}"),
    )
}
