//! Batch normalization over the last (channel) axis.
//!
//! Statistics are taken over every other axis, accumulated per channel in
//! ascending element order. Variance is the biased (population) variance of
//! the batch, computed in two passes.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BatchNormSaved<T: Real> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics when run in training mode.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

fn channels<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>) -> Result<usize> {
    let c = x.shape().last();
    if gamma.dims() != [c] {
        return Err(Error::ChannelMismatch {
            input: c,
            expected: gamma.len(),
        });
    }
    Ok(c)
}

/// Per-channel mean and biased variance.
pub fn channel_moments<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = x.shape().last();
    let count = T::from_usize(x.len() / c);
    let mut mean = vec![T::ZERO; c];
    for px in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m = *m / count;
    }
    let mut var = vec![T::ZERO; c];
    for px in x.data().chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s = *s / count;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` with `inv_std = 1 / sqrt(var + eps)`.
///
/// Training mode uses the batch moments; inference mode the moving ones.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    moving_mean: &Tensor<T>,
    moving_var: &Tensor<T>,
    epsilon: T,
    train: bool,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let c = channels(x, gamma)?;
    let (mean, var, batch_stats) = if train {
        let (m, v) = channel_moments(x);
        (m.clone(), v.clone(), Some((m, v)))
    } else {
        (moving_mean.data().to_vec(), moving_var.data().to_vec(), None)
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + epsilon).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for px in x.data().chunks_exact(c) {
        for ch in 0..c {
            let h = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma.data()[ch] * h + beta.data()[ch]);
        }
    }
    let dims = x.dims().to_vec();
    Ok((
        Tensor::new(dims.clone(), y)?,
        BatchNormSaved {
            xhat: Tensor::new(dims, xhat)?,
            inv_std,
            batch_stats,
        },
    ))
}

pub struct BatchNormGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Training mode differentiates through the batch statistics:
/// `dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))`.
/// Inference mode treats the moving statistics as constants.
pub fn batchnorm_backward<T: Real>(
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
    dy: &Tensor<T>,
    want_input: bool,
) -> Result<BatchNormGrads<T>> {
    let c = channels(dy, gamma)?;
    if dy.shape() != saved.xhat.shape() {
        return Err(Error::ShapeMismatch {
            left: dy.shape().clone(),
            right: saved.xhat.shape().clone(),
        });
    }
    let g = gamma.data();
    let xh = saved.xhat.data();
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for (dy_px, xh_px) in dy.data().chunks_exact(c).zip(xh.chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += dy_px[ch] * xh_px[ch];
            dbeta[ch] += dy_px[ch];
        }
    }
    let input = if !want_input {
        None
    } else if saved.batch_stats.is_some() {
        let m = T::from_usize(dy.len() / c);
        // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
        let s1: Vec<T> = (0..c).map(|ch| g[ch] * dbeta[ch]).collect();
        let s2: Vec<T> = (0..c).map(|ch| g[ch] * dgamma[ch]).collect();
        let mut dx = Vec::with_capacity(dy.len());
        for (dy_px, xh_px) in dy.data().chunks_exact(c).zip(xh.chunks_exact(c)) {
            for ch in 0..c {
                let dxhat = dy_px[ch] * g[ch];
                dx.push(saved.inv_std[ch] / m * (m * dxhat - s1[ch] - xh_px[ch] * s2[ch]));
            }
        }
        Some(Tensor::new(dy.dims().to_vec(), dx)?)
    } else {
        let mut dx = Vec::with_capacity(dy.len());
        for dy_px in dy.data().chunks_exact(c) {
            for ch in 0..c {
                dx.push(dy_px[ch] * g[ch] * saved.inv_std[ch]);
            }
        }
        Some(Tensor::new(dy.dims().to_vec(), dx)?)
    };
    Ok(BatchNormGrads {
        input,
        gamma: Tensor::new([c], dgamma)?,
        beta: Tensor::new([c], dbeta)?,
    })
}

/// `moving = momentum * moving + (1 - momentum) * batch`.
pub fn update_moving<T: Real>(moving: &Tensor<T>, batch: &[T], momentum: T) -> Result<Tensor<T>> {
    if moving.len() != batch.len() {
        return Err(Error::InvalidArgument("moving statistic length mismatch".into()));
    }
    let data = moving
        .data()
        .iter()
        .zip(batch)
        .map(|(&m, &b)| momentum * m + (T::ONE - momentum) * b)
        .collect();
    Tensor::new(moving.dims().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{uniform, DetRng};

    fn ch(v: f32) -> Tensor {
        Tensor::new([2], vec![v; 2]).unwrap()
    }

    #[test]
    fn inference_with_unit_stats_is_near_identity() {
        let x = Tensor::new([1, 2, 2, 2], (0..8).map(|v| v as f32 - 3.0).collect()).unwrap();
        let (y, _) = batchnorm_forward(&x, &ch(1.0), &ch(0.0), &ch(0.0), &ch(1.0), 1e-3, false).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= b.abs() * 6e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_batch_gives_beta() {
        let x = Tensor::new([3, 2, 2, 2], vec![4.25; 24]).unwrap();
        let (y, _) = batchnorm_forward(&x, &ch(2.0), &ch(0.75), &ch(0.0), &ch(1.0), 1e-3, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn train_moments_follow_affine_terms() {
        let mut rng = DetRng::new(3, "bn");
        let x = uniform(&mut rng, 4 * 5 * 5 * 2).unwrap().reshape([4, 5, 5, 2]).unwrap();
        let x = x.map(|v| v * 10.0 - 2.0);
        let gamma = Tensor::new([2], vec![1.5f32, 0.5]).unwrap();
        let beta = Tensor::new([2], vec![-1.0f32, 2.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &gamma, &beta, &ch(0.0), &ch(1.0), 1e-3, true).unwrap();
        let (mean, var) = channel_moments(&y);
        for c in 0..2 {
            assert!((mean[c] - beta.data()[c]).abs() < 1e-3);
            let g2 = gamma.data()[c] * gamma.data()[c];
            assert!((var[c] - g2).abs() < 1e-3 * g2.max(1.0), "{} vs {g2}", var[c]);
        }
    }

    #[test]
    fn moving_update() {
        let m = update_moving(&ch(1.0), &[3.0, 3.0], 0.75).unwrap();
        assert_eq!(m.data(), &[1.5, 1.5]);
    }
}
