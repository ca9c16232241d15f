//! Central finite-difference checking of analytic backward passes.
//!
//! The harness turns any tensor-valued op into a scalar loss by contracting
//! the output with a fixed random weighting, then compares the analytic
//! gradient of that loss against central differences, element by element.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Forward closure: inputs -> output tensor.
pub type ForwardFn<'a, T> = dyn Fn(&[Tensor<T>]) -> Result<Tensor<T>> + 'a;
/// Backward closure: (inputs, dL/dy) -> dL/dinput for every slot.
pub type BackwardFn<'a, T> = dyn Fn(&[Tensor<T>], &Tensor<T>) -> Result<Vec<Tensor<T>>> + 'a;

/// Relative error of one element: |a - fd| / max(1, |fd|).
#[inline]
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Check the analytic gradient of `op` against central differences over every
/// element of every input. Returns the maximum relative error.
pub fn grad_check<T: Scalar>(
    op: &'static str,
    forward: &ForwardFn<'_, T>,
    backward: &BackwardFn<'_, T>,
    inputs: &[Tensor<T>],
    eps: Option<f64>,
) -> Result<f64> {
    let eps = eps.unwrap_or(T::GRAD_CHECK_EPS);
    let y0 = forward(inputs)?;
    y0.ensure_finite(op)?;

    // fixed contraction weights so the scalar loss is reproducible
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);
    let weights: Tensor<T> = Tensor::rand_uniform(y0.shape(), -1.0, 1.0, &mut rng);

    let analytic = backward(inputs, &weights)?;
    if analytic.len() != inputs.len() {
        return Err(CoreError::invalid(
            op,
            format!("backward returned {} gradients for {} inputs", analytic.len(), inputs.len()),
        ));
    }
    for (slot, g) in analytic.iter().enumerate() {
        if !g.is_finite() {
            return Err(CoreError::non_finite(op, format!("analytic gradient of input {slot}")));
        }
    }

    let loss = |ins: &[Tensor<T>]| -> Result<f64> {
        let y = forward(ins)?;
        Ok(y.data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a.to_fp() * b.to_fp())
            .sum())
    };

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    for slot in 0..inputs.len() {
        for j in 0..inputs[slot].len() {
            let orig = work[slot].data()[j];
            work[slot].data_mut()[j] = orig + T::from_fp(eps);
            let lp = loss(&work)?;
            work[slot].data_mut()[j] = orig - T::from_fp(eps);
            let lm = loss(&work)?;
            work[slot].data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let ga = analytic[slot].data()[j].to_fp();
            if !fd.is_finite() {
                return Err(CoreError::non_finite(op, format!("finite difference at slot {slot} elem {j}")));
            }
            max_rel = max_rel.max(rel_err(ga, fd));
        }
    }
    Ok(max_rel)
}
