//! Elementwise activations, last-dimension softmax, and channel concat.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// dL/dx given the forward input.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.shape(), dy.shape());
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // split on sign to avoid overflow in exp
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// dL/dx given the forward *output* `y = sigmoid(x)`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert_eq!(y.shape(), dy.shape());
    let mut dx = dy.clone();
    for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
        *g = *g * s * (T::one() - s);
    }
    dx
}

/// Numerically stable softmax over a flat row, in place.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given `s = softmax(z)` for one row and upstream `g = dL/ds`, overwrite `g`
/// with `dL/dz = s * (g - <g, s>)`.
pub fn softmax_row_backward<T: Scalar>(s: &[T], g: &mut [T]) {
    debug_assert_eq!(s.len(), g.len());
    let mut dot = T::zero();
    for (&sv, &gv) in s.iter().zip(g.iter()) {
        dot += sv * gv;
    }
    for (gv, &sv) in g.iter_mut().zip(s.iter()) {
        *gv = sv * (*gv - dot);
    }
}

/// Softmax over the last (width) dimension of the tensor.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let w = out.width();
    for row in out.data_mut().chunks_mut(w) {
        softmax_row(row);
    }
    out
}

/// Concatenate along the channel dimension; all other dimensions must agree.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| CoreError::invalid("concat_channels", "no tensors given"))?;
    let [n, _, h, w] = first.shape();
    let mut c_total = 0;
    for t in parts {
        let [tn, tc, th, tw] = t.shape();
        if tn != n || th != h || tw != w {
            return Err(CoreError::shape(
                "concat_channels",
                format!("part {:?} does not match [{n},_,{h},{w}]", t.shape()),
            ));
        }
        c_total += tc;
    }
    let mut out = Tensor::zeros([n, c_total, h, w]);
    let hw = h * w;
    for ni in 0..n {
        let mut co = 0;
        for t in parts {
            for ci in 0..t.channels() {
                out.plane_mut(ni, co).copy_from_slice(t.plane(ni, ci));
                co += 1;
            }
        }
        let _ = hw;
    }
    Ok(out)
}

/// Split a channel-concatenated gradient back into per-part gradients.
pub fn concat_channels_backward<T: Scalar>(dy: &Tensor<T>, channel_splits: &[usize]) -> Vec<Tensor<T>> {
    let [n, c, h, w] = dy.shape();
    assert_eq!(channel_splits.iter().sum::<usize>(), c);
    let mut out: Vec<Tensor<T>> = channel_splits.iter().map(|&pc| Tensor::zeros([n, pc, h, w])).collect();
    for ni in 0..n {
        let mut co = 0;
        for (part, &pc) in out.iter_mut().zip(channel_splits) {
            for ci in 0..pc {
                part.plane_mut(ni, ci).copy_from_slice(dy.plane(ni, co));
                co += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_basics() {
        let x: Tensor<f32> = Tensor::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let z: Tensor<f32> = Tensor::zeros([1, 1, 1, 1]);
        assert_eq!(sigmoid(&z).data(), &[0.5]);
        // outputs strictly inside (0,1) over the representable range
        let big: Tensor<f32> = Tensor::from_vec([1, 1, 1, 2], vec![-15.0, 15.0]).unwrap();
        for &v in sigmoid(&big).data() {
            assert!(v > 0.0 && v < 1.0);
        }
        // and never NaN/Inf even when exp saturates
        let extreme: Tensor<f32> = Tensor::from_vec([1, 1, 1, 2], vec![-500.0, 500.0]).unwrap();
        for &v in sigmoid(&extreme).data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let x: Tensor<f32> = Tensor::filled([1, 1, 1, 4], 3.25);
        let y = softmax_lastdim(&x);
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_under_extreme_inputs() {
        let x: Tensor<f32> = Tensor::from_vec([1, 1, 2, 3], vec![1e4, 0.0, -1e4, 3.0, 3.0, 3.0]).unwrap();
        let y = softmax_lastdim(&x);
        for row in y.data().chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn concat_counts_channels_and_rejects_mismatch() {
        let a: Tensor<f32> = Tensor::filled([1, 2, 2, 2], 1.0);
        let b: Tensor<f32> = Tensor::filled([1, 3, 2, 2], 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), [1, 5, 2, 2]);
        assert_eq!(y.plane(0, 1), &[1.0; 4]);
        assert_eq!(y.plane(0, 2), &[2.0; 4]);

        let bad: Tensor<f32> = Tensor::filled([1, 1, 3, 2], 0.0);
        assert!(concat_channels(&[&a, &bad]).is_err());

        let parts = concat_channels_backward(&y, &[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
