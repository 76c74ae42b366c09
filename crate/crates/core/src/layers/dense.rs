use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn check<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [n, inputs] = *x.dims() else {
        return Err(Error::InvalidArgument(format!(
            "dense expects [N, features], got {}",
            x.shape()
        )));
    };
    let [k_in, units] = *kernel.dims() else {
        return Err(Error::InvalidArgument(format!(
            "dense kernel must be [in, out], got {}",
            kernel.shape()
        )));
    };
    if k_in != inputs {
        return Err(Error::ChannelMismatch {
            input: inputs,
            expected: k_in,
        });
    }
    Ok((n, inputs, units))
}

/// `y[n, :] = sum_i x[n, i] * W[i, :]` (i ascending), then `+ b`.
pub fn dense_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, inputs, units) = check(x, kernel)?;
    let kd = kernel.data();
    let mut out = vec![T::ZERO; n * units];
    for (x_row, acc) in x.data().chunks_exact(inputs).zip(out.chunks_exact_mut(units)) {
        for (i, &xv) in x_row.iter().enumerate() {
            for (a, &w) in acc.iter_mut().zip(&kd[i * units..(i + 1) * units]) {
                *a += xv * w;
            }
        }
        if let Some(b) = bias {
            for (a, &bv) in acc.iter_mut().zip(b.data()) {
                *a += bv;
            }
        }
    }
    Tensor::new([n, units], out)
}

pub struct DenseGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    has_bias: bool,
    want_input: bool,
) -> Result<DenseGrads<T>> {
    let (n, inputs, units) = check(x, kernel)?;
    if dy.dims() != [n, units] {
        return Err(Error::InvalidArgument(format!(
            "upstream gradient {} does not match [{n}, {units}]",
            dy.shape()
        )));
    }
    let kd = kernel.data();
    let input = if want_input {
        let mut dx = vec![T::ZERO; n * inputs];
        for (g_row, dx_row) in dy.data().chunks_exact(units).zip(dx.chunks_exact_mut(inputs)) {
            for (i, d) in dx_row.iter_mut().enumerate() {
                let w_row = &kd[i * units..(i + 1) * units];
                for (&gv, &w) in g_row.iter().zip(w_row) {
                    *d += gv * w;
                }
            }
        }
        Some(Tensor::new([n, inputs], dx)?)
    } else {
        None
    };
    let mut dk = vec![T::ZERO; inputs * units];
    for (x_row, g_row) in x.data().chunks_exact(inputs).zip(dy.data().chunks_exact(units)) {
        for (i, &xv) in x_row.iter().enumerate() {
            for (d, &gv) in dk[i * units..(i + 1) * units].iter_mut().zip(g_row) {
                *d += xv * gv;
            }
        }
    }
    let bias = if has_bias {
        let mut db = vec![T::ZERO; units];
        for g_row in dy.data().chunks_exact(units) {
            for (d, &gv) in db.iter_mut().zip(g_row) {
                *d += gv;
            }
        }
        Some(Tensor::new([units], db)?)
    } else {
        None
    };
    Ok(DenseGrads {
        input,
        kernel: Tensor::new([inputs, units], dk)?,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_product_plus_bias() {
        let x = Tensor::new([2, 3], vec![1.0f32, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let k = Tensor::new([3, 2], vec![1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new([2], vec![0.5f32, -0.5]).unwrap();
        let y = dense_forward(&x, &k, Some(&b)).unwrap();
        assert_eq!(y.data(), &[4.5, 4.5, 0.5, 0.5]);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let x = Tensor::new([1, 4], vec![9.0f32; 4]).unwrap();
        let k = Tensor::zeros([4, 1]).unwrap();
        let y = dense_forward(&x, &k, Some(&Tensor::new([1], vec![0.0f32]).unwrap())).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }
}
