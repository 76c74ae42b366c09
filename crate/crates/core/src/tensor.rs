//! Dense row-major tensors and the deterministic ops over them.
//!
//! Every reduction accumulates sequentially in ascending index order. When a
//! reduction runs on several threads, work is split over *output* elements,
//! so each output is still produced by exactly one sequential loop and the
//! result does not depend on the thread count.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Tensor dimensions, outermost first. Image tensors are NHWC.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub const MAX_RANK: usize = 4;

    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Shape> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > Self::MAX_RANK || dims.contains(&0) {
            return Err(Error::InvalidShape { dims });
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape { dims: dims.clone() })?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("shape has rank >= 1")
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Dense tensor with contiguous row-major storage (last dimension fastest).
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor<{}>{} {:?}", T::DTYPE, self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "...")?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape(shape, data)
    }

    pub fn from_shape(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::ZERO)
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![T::ZERO; other.data.len()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data, new dimensions; element count must match.
    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Flat offset of a full coordinate.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.rank());
        let mut off = 0;
        for (i, d) in index.iter().zip(self.shape.dims()) {
            debug_assert!(i < d);
            off = off * d + i;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    /// Element type conversion through f64.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        check_same_shape(&self.shape, &other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Slice `[start, start + count)` along the leading axis.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Self> {
        let outer = self.dims()[0];
        if count == 0 || start + count > outer {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of range for leading dimension {outer}",
                start + count
            )));
        }
        let inner = self.data.len() / outer;
        let mut dims = self.dims().to_vec();
        dims[0] = count;
        Tensor::new(
            dims,
            self.data[start * inner..(start + count) * inner].to_vec(),
        )
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            check_same_shape(&first.shape, &t.shape)?;
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        Tensor::new(dims, data)
    }
}

pub(crate) fn check_same_shape(a: &Shape, b: &Shape) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            left: a.clone(),
            right: b.clone(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul)
    }
}

#[inline]
pub fn relu<T: Real>(v: T) -> T {
    if v > T::ZERO {
        v
    } else {
        T::ZERO
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    T::ONE / (T::ONE + (-v).det_exp())
}

/// Pure elementwise op, evaluated in index order.
///
/// Binary ops take `b` with the same shape as `a`, or a rank-1 `b` whose
/// length equals `a`'s last dimension (bias-style broadcast).
pub fn elementwise<T: Real>(
    op: ElementwiseOp,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if op.is_binary() {
        let b = b.ok_or_else(|| Error::InvalidArgument(format!("{op:?} needs two operands")))?;
        let f: fn(T, T) -> T = match op {
            ElementwiseOp::Add => |x, y| x + y,
            ElementwiseOp::Sub => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let data = if a.shape == b.shape {
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
        } else if b.shape.rank() == 1 && b.shape.last() == a.shape.last() {
            let c = b.len();
            a.data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data[i % c]))
                .collect()
        } else {
            return Err(Error::ShapeMismatch {
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        };
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.is_some() {
        return Err(Error::InvalidArgument(format!("{op:?} takes one operand")));
    }
    let data = match op {
        ElementwiseOp::Relu => a.data.iter().map(|&v| relu(v)).collect(),
        ElementwiseOp::Sigmoid => a.data.iter().map(|&v| sigmoid(v)).collect(),
        ElementwiseOp::Exp => a.data.iter().map(|v| v.det_exp()).collect(),
        ElementwiseOp::Log | ElementwiseOp::Sqrt => {
            if let Some((index, v)) = a
                .data
                .iter()
                .enumerate()
                .find(|(_, &v)| v < T::ZERO || (op == ElementwiseOp::Log && v == T::ZERO))
            {
                let value = v.to_f64();
                return Err(if op == ElementwiseOp::Log {
                    Error::LogDomain { index, value }
                } else {
                    Error::InvalidArgument(format!("sqrt of negative value {value} at index {index}"))
                });
            }
            if op == ElementwiseOp::Log {
                a.data.iter().map(|v| v.det_ln()).collect()
            } else {
                a.data.iter().map(|v| v.sqrt()).collect()
            }
        }
        _ => unreachable!(),
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Reduce over `axes`; the reduced axes are removed from the result (an
/// all-axes reduction yields shape `[1]`). An empty axis set is a copy.
///
/// Runs on the current rayon pool; output elements are distributed over
/// threads, each accumulated by a single ascending-order loop.
pub fn reduce<T: Real>(op: ReduceOp, t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = t.shape.rank();
    if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
        return Err(Error::InvalidAxis {
            axis,
            shape: t.shape.clone(),
        });
    }
    if axes.is_empty() {
        return Ok(t.clone());
    }
    let dims = t.dims();
    let strides = t.shape.strides();
    let is_reduced: Vec<bool> = (0..rank).map(|a| axes.contains(&a)).collect();
    let kept: Vec<usize> = (0..rank).filter(|&a| !is_reduced[a]).collect();
    let reduced: Vec<usize> = (0..rank).filter(|&a| is_reduced[a]).collect();
    let out_dims: Vec<usize> = if kept.is_empty() {
        vec![1]
    } else {
        kept.iter().map(|&a| dims[a]).collect()
    };
    let out_len: usize = kept.iter().map(|&a| dims[a]).product();
    let count: usize = reduced.iter().map(|&a| dims[a]).product();
    let red_dims: Vec<usize> = reduced.iter().map(|&a| dims[a]).collect();
    let red_strides: Vec<usize> = reduced.iter().map(|&a| strides[a]).collect();

    let base_of = |mut o: usize| -> usize {
        let mut base = 0;
        for &a in kept.iter().rev() {
            base += (o % dims[a]) * strides[a];
            o /= dims[a];
        }
        base
    };
    let src = &t.data;
    let reduce_one = |o: usize| -> T {
        let base = base_of(o);
        let mut counter = vec![0usize; red_dims.len()];
        let mut acc = match op {
            ReduceOp::Max => T::NEG_INFINITY,
            _ => T::ZERO,
        };
        for _ in 0..count {
            let off = base
                + counter
                    .iter()
                    .zip(&red_strides)
                    .map(|(c, s)| c * s)
                    .sum::<usize>();
            let v = src[off];
            match op {
                ReduceOp::Max => acc = acc.max_of(v),
                _ => acc += v,
            }
            for k in (0..counter.len()).rev() {
                counter[k] += 1;
                if counter[k] < red_dims[k] {
                    break;
                }
                counter[k] = 0;
            }
        }
        if op == ReduceOp::Mean {
            acc / T::from_usize(count)
        } else {
            acc
        }
    };
    let mut out = vec![T::ZERO; out_len];
    out.par_iter_mut()
        .with_min_len(64)
        .enumerate()
        .for_each(|(o, slot)| *slot = reduce_one(o));
    Tensor::new(out_dims, out)
}

/// Bilinear resize of an `[H, W, C]` tensor with half-pixel centres.
///
/// Source coordinate of output row `i` is `(i + 0.5) * H / out_h - 0.5`,
/// clamped to `[0, H - 1]`; likewise for columns. Coordinates and weights
/// are computed in f64, blending in `T` as
/// `(1-fy)*((1-fx)*a + fx*b) + fy*((1-fx)*c + fx*d)`.
pub fn bilinear_resize<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if t.shape.rank() != 3 {
        return Err(Error::InvalidArgument(format!(
            "bilinear_resize expects [H, W, C], got {}",
            t.shape
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size must be positive, got {out_h}x{out_w}"
        )));
    }
    let (h, w, c) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let rows = sample_positions(h, out_h);
    let cols = sample_positions(w, out_w);
    let mut out = vec![T::ZERO; out_h * out_w * c];
    out.par_chunks_mut(out_w * c)
        .enumerate()
        .for_each(|(i, row)| {
            let (y0, y1, fy) = rows[i];
            let fy = T::from_f64(fy);
            let gy = T::ONE - fy;
            for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                let fx = T::from_f64(fx);
                let gx = T::ONE - fx;
                for ch in 0..c {
                    let a = t.data[(y0 * w + x0) * c + ch];
                    let b = t.data[(y0 * w + x1) * c + ch];
                    let cc = t.data[(y1 * w + x0) * c + ch];
                    let d = t.data[(y1 * w + x1) * c + ch];
                    row[j * c + ch] = gy * (gx * a + fx * b) + fy * (gx * cc + fx * d);
                }
            }
        });
    Tensor::new([out_h, out_w, c], out)
}

/// `(lower index, upper index, fraction)` for each output position.
pub(crate) fn sample_positions(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_and_rank() {
        assert!(Shape::new(vec![2, 0]).is_err());
        assert!(Shape::new(Vec::<usize>::new()).is_err());
        assert!(Shape::new(vec![1, 1, 1, 1, 1]).is_err());
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().strides(), vec![12, 4, 1]);
    }

    #[test]
    fn sigmoid_zero_is_half() {
        let t = Tensor::<f32>::new([1], vec![0.0]).unwrap();
        let s = elementwise(ElementwiseOp::Sigmoid, &t, None).unwrap();
        assert_eq!(s.data(), &[0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::<f32>::new([2], vec![-1.0, 2.0]).unwrap();
        let r = elementwise(ElementwiseOp::Relu, &t, None).unwrap();
        assert_eq!(r.data(), &[0.0, 2.0]);
    }

    #[test]
    fn binary_shape_errors_name_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]).unwrap();
        let b = Tensor::<f32>::zeros([3, 2]).unwrap();
        let err = elementwise(ElementwiseOp::Add, &a, Some(&b)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn last_axis_broadcast() {
        let a = Tensor::<f32>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::new([2], vec![10.0, 20.0]).unwrap();
        let r = elementwise(ElementwiseOp::Add, &a, Some(&b)).unwrap();
        assert_eq!(r.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn log_of_non_positive_is_error() {
        let a = Tensor::<f32>::new([3], vec![1.0, 0.0, 2.0]).unwrap();
        assert!(matches!(
            elementwise(ElementwiseOp::Log, &a, None),
            Err(Error::LogDomain { index: 1, .. })
        ));
    }

    #[test]
    fn reduce_sum_all() {
        let t = Tensor::<f32>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = reduce(ReduceOp::Sum, &t, &[0, 1]).unwrap();
        assert_eq!(s.dims(), &[1]);
        assert_eq!(s.data(), &[10.0]);
    }

    #[test]
    fn reduce_mean_constant() {
        let t = Tensor::<f32>::full([3, 5, 7], 0.25).unwrap();
        let m = reduce(ReduceOp::Mean, &t, &[0, 1, 2]).unwrap();
        assert_eq!(m.data(), &[0.25]);
        let t = Tensor::<f32>::full([3, 5, 7], 0.3).unwrap();
        let m = reduce(ReduceOp::Mean, &t, &[0, 1, 2]).unwrap();
        assert!((m.data()[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn reduce_axes_and_errors() {
        let t = Tensor::<f32>::new([2, 3], vec![1.0, 5.0, 3.0, 4.0, 2.0, 6.0]).unwrap();
        assert_eq!(reduce(ReduceOp::Sum, &t, &[0]).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(reduce(ReduceOp::Max, &t, &[1]).unwrap().data(), &[5.0, 6.0]);
        assert_eq!(reduce(ReduceOp::Sum, &t, &[]).unwrap(), t);
        assert!(matches!(
            reduce(ReduceOp::Sum, &t, &[2]),
            Err(Error::InvalidAxis { axis: 2, .. })
        ));
    }

    #[test]
    fn resize_single_pixel_is_constant() {
        let t = Tensor::<f32>::new([1, 1, 2], vec![7.0, -3.0]).unwrap();
        let r = bilinear_resize(&t, 4, 4).unwrap();
        for px in r.data().chunks(2) {
            assert_eq!(px, &[7.0, -3.0]);
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let t = Tensor::<f32>::zeros([2, 2, 1]).unwrap();
        assert!(bilinear_resize(&t, 0, 3).is_err());
    }

    #[test]
    fn row_major_offsets() {
        let (n, h, w, c) = (2, 3, 4, 5);
        let mut t = Tensor::<f32>::zeros([n, h, w, c]).unwrap();
        let idx = [1, 2, 3, 4];
        let flat = ((idx[0] * h + idx[1]) * w + idx[2]) * c + idx[3];
        t.data_mut()[flat] = 1.0;
        assert_eq!(t.at(&idx), 1.0);
        assert_eq!(t.data().iter().filter(|&&v| v == 1.0).count(), 1);
    }
}
