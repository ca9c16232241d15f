//! Bilinear upsampling by an integer factor, half-pixel (align-corners=false)
//! sampling with edge clamping.

use crate::error::{CoreError, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-output-index source taps: left index, right index, right weight.
fn axis_taps<T: Scalar>(in_len: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let f = factor as f64;
    (0..in_len * factor)
        .map(|o| {
            let s = (o as f64 + 0.5) / f - 0.5;
            let i0 = s.floor();
            let frac = s - i0;
            let left = (i0.max(0.0) as usize).min(in_len - 1);
            let right = ((i0 + 1.0).max(0.0) as usize).min(in_len - 1);
            (left, right, T::from_fp(frac))
        })
        .collect()
}

pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(CoreError::invalid("bilinear_upsample", "factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let ytaps = axis_taps::<T>(h, factor);
    let xtaps = axis_taps::<T>(w, factor);

    let mut out = Tensor::zeros([n, c, oh, ow]);
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |plane_idx, plane| {
        let (ni, ci) = (plane_idx / c, plane_idx % c);
        let src = x.plane(ni, ci);
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let dst = &mut plane[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let one = T::one();
                let top = r0[x0] * (one - fx) + r0[x1] * fx;
                let bot = r1[x0] * (one - fx) + r1[x1] * fx;
                dst[ox] = top * (one - fy) + bot * fy;
            }
        }
    });
    Ok(out)
}

/// Gradient of `bilinear_upsample`: scatter each output tap back to its
/// source pixels.
pub fn bilinear_upsample_backward<T: Scalar>(x_shape: [usize; 4], dy: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 1 {
        return Ok(dy.clone());
    }
    let [n, c, h, w] = x_shape;
    let [dn, dc, oh, ow] = dy.shape();
    if dn != n || dc != c || oh != h * factor || ow != w * factor {
        return Err(CoreError::shape(
            "bilinear_upsample_backward",
            format!("gradient {:?} does not match input {x_shape:?} x{factor}", dy.shape()),
        ));
    }
    let ytaps = axis_taps::<T>(h, factor);
    let xtaps = axis_taps::<T>(w, factor);

    let mut dx = Tensor::zeros(x_shape);
    par::for_each_chunk_mut(dx.data_mut(), h * w, |plane_idx, dplane| {
        let (ni, ci) = (plane_idx / c, plane_idx % c);
        let g = dy.plane(ni, ci);
        let one = T::one();
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let gv = g[oy * ow + ox];
                dplane[y0 * w + x0] += gv * (one - fy) * (one - fx);
                dplane[y0 * w + x1] += gv * (one - fy) * fx;
                dplane[y1 * w + x0] += gv * fy * (one - fx);
                dplane[y1 * w + x1] += gv * fy * fx;
            }
        }
    });
    Ok(dx)
}
