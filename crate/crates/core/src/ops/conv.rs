//! Convolution kernels: standard, depthwise, and stride-2 transpose.
//!
//! `conv2d` lowers each sample to an im2col buffer and multiplies; the other
//! two use direct loops. Backward passes are analytic and exercised by the
//! finite-difference harness.

use crate::error::{CoreError, Result};
use crate::ops::matmul::{matmul_at_into, matmul_bt_into, matmul_into};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Valid output range `[lo, hi)` along one axis so that
/// `in = out*stride + k - pad` stays inside `[0, limit)`.
#[inline]
fn valid_out_range(out_len: usize, stride: usize, k: usize, pad: usize, limit: usize) -> (usize, usize) {
    // in >= 0  =>  out >= (pad - k) / stride, rounded up
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // in < limit  =>  out < (limit + pad - k) / stride, rounded up
    let hi = if limit + pad > k {
        ((limit + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Lower one `[C,H,W]` sample into a `[C*kh*kw, oh*ow]` patch matrix.
fn im2col<T: Scalar>(
    sample: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    col: &mut [T],
) {
    let p = oh * ow;
    debug_assert_eq!(col.len(), c * kh * kw * p);
    col.fill(T::zero());
    for ci in 0..c {
        let plane = &sample[ci * h * w..(ci + 1) * h * w];
        for rk in 0..kh {
            for ck in 0..kw {
                let row = &mut col[(ci * kh * kw + rk * kw + ck) * p..][..p];
                let (olo, ohi) = valid_out_range(oh, stride, rk, pad, h);
                let (wlo, whi) = valid_out_range(ow, stride, ck, pad, w);
                if wlo >= whi {
                    continue;
                }
                for oy in olo..ohi {
                    let iy = oy * stride + rk - pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let shift = ck.wrapping_sub(pad);
                        // iw = ox + shift, contiguous run
                        dst[wlo..whi].copy_from_slice(&src[wlo.wrapping_add(shift)..whi.wrapping_add(shift)]);
                    } else {
                        for ox in wlo..whi {
                            dst[ox] = src[ox * stride + ck - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter a `[C*kh*kw, oh*ow]` patch-gradient matrix back onto a `[C,H,W]` sample.
fn col2im<T: Scalar>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    sample: &mut [T],
) {
    let p = oh * ow;
    debug_assert_eq!(col.len(), c * kh * kw * p);
    for ci in 0..c {
        let plane = &mut sample[ci * h * w..(ci + 1) * h * w];
        for rk in 0..kh {
            for ck in 0..kw {
                let row = &col[(ci * kh * kw + rk * kw + ck) * p..][..p];
                let (olo, ohi) = valid_out_range(oh, stride, rk, pad, h);
                let (wlo, whi) = valid_out_range(ow, stride, ck, pad, w);
                for oy in olo..ohi {
                    let iy = oy * stride + rk - pad;
                    for ox in wlo..whi {
                        plane[iy * w + ox * stride + ck - pad] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn check_conv_args<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> Result<(usize, usize)> {
    let [_, cin, h, wid] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(CoreError::invalid(op, format!("kernel {kh}x{kw} must be odd")));
    }
    if stride == 0 {
        return Err(CoreError::invalid(op, "stride must be >= 1"));
    }
    if depthwise {
        if wcin != 1 || cout != cin {
            return Err(CoreError::shape(
                op,
                format!("depthwise kernel [{cout},{wcin},..] does not match input channels {cin}"),
            ));
        }
    } else if wcin != cin {
        return Err(CoreError::shape(
            op,
            format!("kernel expects {wcin} input channels, tensor has {cin}"),
        ));
    }
    if b.len() != cout {
        return Err(CoreError::shape(
            op,
            format!("bias length {} does not match {cout} output channels", b.len()),
        ));
    }
    if h + 2 * pad < kh || wid + 2 * pad < kw {
        return Err(CoreError::shape(
            op,
            format!("input {h}x{wid} with pad {pad} smaller than kernel {kh}x{kw}"),
        ));
    }
    Ok((conv_out_len(h, kh, stride, pad), conv_out_len(wid, kw, stride, pad)))
}

/// Standard 2D convolution. Weights `[Cout, Cin, kh, kw]`, bias length `Cout`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv_args("conv2d", x, w, b, stride, pad, false)?;
    let [n, cin, h, wid] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let p = oh * ow;
    let cink = cin * kh * kw;

    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let bias = b.data();
    par::for_each_chunk_mut(out.data_mut(), cout * p, |ni, chunk| {
        let mut col = vec![T::zero(); cink * p];
        im2col(x.sample(ni), (cin, h, wid), (kh, kw), stride, pad, (oh, ow), &mut col);
        matmul_into(w.data(), &col, cout, cink, p, chunk);
        for co in 0..cout {
            let bv = bias[co];
            for v in &mut chunk[co * p..(co + 1) * p] {
                *v += bv;
            }
        }
    });
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input, weights, and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, cin, h, wid] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let [dn, dc, oh, ow] = dy.shape();
    if dn != n || dc != cout {
        return Err(CoreError::shape(
            "conv2d_backward",
            format!("upstream gradient {:?} does not match output [{n},{cout},..]", dy.shape()),
        ));
    }
    let p = oh * ow;
    let cink = cin * kh * kw;

    // Per-sample weight/input gradients computed independently, then reduced
    // in sample order.
    let per_sample: Vec<(Vec<T>, Vec<T>)> = par::map_collect(n, |ni| {
        let mut col = vec![T::zero(); cink * p];
        im2col(x.sample(ni), (cin, h, wid), (kh, kw), stride, pad, (oh, ow), &mut col);
        let dy_s = dy.sample(ni);
        let mut dw = vec![T::zero(); cout * cink];
        matmul_bt_into(dy_s, &col, cout, p, cink, &mut dw);
        let mut dcol = vec![T::zero(); cink * p];
        matmul_at_into(w.data(), dy_s, cink, cout, p, &mut dcol);
        let mut dx = vec![T::zero(); cin * h * wid];
        col2im(&dcol, (cin, h, wid), (kh, kw), stride, pad, (oh, ow), &mut dx);
        (dw, dx)
    });

    let mut dw = Tensor::zeros(w.shape());
    let mut dx = Tensor::zeros(x.shape());
    for (ni, (dw_s, dx_s)) in per_sample.into_iter().enumerate() {
        for (acc, v) in dw.data_mut().iter_mut().zip(dw_s) {
            *acc += v;
        }
        dx.sample_mut(ni).copy_from_slice(&dx_s);
    }

    let mut db = Tensor::zeros([1, cout, 1, 1]);
    for ni in 0..n {
        for co in 0..cout {
            let mut s = T::zero();
            for &v in dy.plane(ni, co) {
                s += v;
            }
            db.data_mut()[co] += s;
        }
    }
    Ok((dx, dw, db))
}

/// Depthwise convolution: weights `[C, 1, kh, kw]`, one filter per channel.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv_args("depthwise_conv2d", x, w, b, stride, pad, true)?;
    let [n, c, h, wid] = x.shape();
    let [_, _, kh, kw] = w.shape();

    let mut out = Tensor::zeros([n, c, oh, ow]);
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |plane_idx, plane| {
        let (ni, ci) = (plane_idx / c, plane_idx % c);
        let xp = x.plane(ni, ci);
        plane.fill(b.data()[ci]);
        for rk in 0..kh {
            for ck in 0..kw {
                let wv = w.at(ci, 0, rk, ck);
                let (olo, ohi) = valid_out_range(oh, stride, rk, pad, h);
                let (wlo, whi) = valid_out_range(ow, stride, ck, pad, wid);
                for oy in olo..ohi {
                    let iy = oy * stride + rk - pad;
                    for ox in wlo..whi {
                        plane[oy * ow + ox] += wv * xp[iy * wid + ox * stride + ck - pad];
                    }
                }
            }
        }
    });
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, wid] = x.shape();
    let [_, _, kh, kw] = w.shape();
    let [_, _, oh, ow] = dy.shape();
    if dy.batch() != n || dy.channels() != c {
        return Err(CoreError::shape(
            "depthwise_conv2d_backward",
            format!("upstream gradient {:?} vs input {:?}", dy.shape(), x.shape()),
        ));
    }

    let mut dx = Tensor::zeros(x.shape());
    par::for_each_chunk_mut(dx.data_mut(), h * wid, |plane_idx, dplane| {
        let (ni, ci) = (plane_idx / c, plane_idx % c);
        let dyp = dy.plane(ni, ci);
        for rk in 0..kh {
            for ck in 0..kw {
                let wv = w.at(ci, 0, rk, ck);
                let (olo, ohi) = valid_out_range(oh, stride, rk, pad, h);
                let (wlo, whi) = valid_out_range(ow, stride, ck, pad, wid);
                for oy in olo..ohi {
                    let iy = oy * stride + rk - pad;
                    for ox in wlo..whi {
                        dplane[iy * wid + ox * stride + ck - pad] += wv * dyp[oy * ow + ox];
                    }
                }
            }
        }
    });

    // One (channel, tap) gradient per task; samples reduced inside in order.
    let kk = kh * kw;
    let dw_flat: Vec<T> = par::map_collect(c * kk, |idx| {
        let (ci, tap) = (idx / kk, idx % kk);
        let (rk, ck) = (tap / kw, tap % kw);
        let (olo, ohi) = valid_out_range(oh, stride, rk, pad, h);
        let (wlo, whi) = valid_out_range(ow, stride, ck, pad, wid);
        let mut acc = T::zero();
        for ni in 0..n {
            let xp = x.plane(ni, ci);
            let dyp = dy.plane(ni, ci);
            for oy in olo..ohi {
                let iy = oy * stride + rk - pad;
                for ox in wlo..whi {
                    acc += dyp[oy * ow + ox] * xp[iy * wid + ox * stride + ck - pad];
                }
            }
        }
        acc
    });
    let dw = Tensor::from_vec(w.shape(), dw_flat)?;

    let mut db = Tensor::zeros([1, c, 1, 1]);
    for ni in 0..n {
        for ci in 0..c {
            let mut s = T::zero();
            for &v in dy.plane(ni, ci) {
                s += v;
            }
            db.data_mut()[ci] += s;
        }
    }
    Ok((dx, dw, db))
}

fn check_tconv_args<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize) -> Result<usize> {
    let [_, cin, _, _] = x.shape();
    let [wcin, cout, kh, kw] = w.shape();
    if stride != 2 {
        return Err(CoreError::invalid("transpose_conv2d", "only stride 2 is supported"));
    }
    if kh != kw || (kh != 2 && kh != 4) {
        return Err(CoreError::invalid(
            "transpose_conv2d",
            format!("kernel {kh}x{kw} must be 2x2 or 4x4"),
        ));
    }
    if wcin != cin {
        return Err(CoreError::shape(
            "transpose_conv2d",
            format!("kernel expects {wcin} input channels, tensor has {cin}"),
        ));
    }
    if b.len() != cout {
        return Err(CoreError::shape(
            "transpose_conv2d",
            format!("bias length {} does not match {cout} output channels", b.len()),
        ));
    }
    // pad chosen so the output is exactly 2x the input
    Ok((kh - 2) / 2)
}

/// Stride-2 transpose convolution that doubles spatial size.
/// Weights `[Cin, Cout, k, k]` with k in {2, 4}.
pub fn transpose_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let pad = check_tconv_args(x, w, b, stride)?;
    let [n, cin, h, wid] = x.shape();
    let [_, cout, k, _] = w.shape();
    let (oh, ow) = (2 * h, 2 * wid);
    let chw = cin * h * wid;

    let mut out = Tensor::zeros([n, cout, oh, ow]);
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |plane_idx, plane| {
        let (ni, co) = (plane_idx / cout, plane_idx % cout);
        let xs = x.sample(ni);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[co];
                for rk in 0..k {
                    let ty = oy + pad;
                    if ty < rk || (ty - rk) % 2 != 0 {
                        continue;
                    }
                    let iy = (ty - rk) / 2;
                    if iy >= h {
                        continue;
                    }
                    for ck in 0..k {
                        let tx = ox + pad;
                        if tx < ck || (tx - ck) % 2 != 0 {
                            continue;
                        }
                        let ix = (tx - ck) / 2;
                        if ix >= wid {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += xs[ci * h * wid + iy * wid + ix] * w.at(ci, co, rk, ck);
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
        let _ = chw;
    });
    Ok(out)
}

pub fn transpose_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, cin, h, wid] = x.shape();
    let [_, cout, k, _] = w.shape();
    let [_, _, oh, ow] = dy.shape();
    if stride != 2 || dy.batch() != n || dy.channels() != cout || oh != 2 * h || ow != 2 * wid {
        return Err(CoreError::shape(
            "transpose_conv2d_backward",
            format!("upstream gradient {:?} vs expected [{n},{cout},{},{}]", dy.shape(), 2 * h, 2 * wid),
        ));
    }
    let pad = (k - 2) / 2;

    let mut dx = Tensor::zeros(x.shape());
    par::for_each_chunk_mut(dx.data_mut(), h * wid, |plane_idx, dplane| {
        let (ni, ci) = (plane_idx / cin, plane_idx % cin);
        for iy in 0..h {
            for ix in 0..wid {
                let mut acc = T::zero();
                for co in 0..cout {
                    let dyp = dy.plane(ni, co);
                    for rk in 0..k {
                        let oy = 2 * iy + rk;
                        if oy < pad || oy - pad >= oh {
                            continue;
                        }
                        for ck in 0..k {
                            let ox = 2 * ix + ck;
                            if ox < pad || ox - pad >= ow {
                                continue;
                            }
                            acc += dyp[(oy - pad) * ow + (ox - pad)] * w.at(ci, co, rk, ck);
                        }
                    }
                }
                dplane[iy * wid + ix] = acc;
            }
        }
    });

    let kk = k * k;
    let dw_flat: Vec<T> = par::map_collect(cin * cout * kk, |idx| {
        let ci = idx / (cout * kk);
        let co = (idx / kk) % cout;
        let (rk, ck) = ((idx % kk) / k, idx % k);
        let mut acc = T::zero();
        for ni in 0..n {
            let xp = x.plane(ni, ci);
            let dyp = dy.plane(ni, co);
            for iy in 0..h {
                let oy = 2 * iy + rk;
                if oy < pad || oy - pad >= oh {
                    continue;
                }
                for ix in 0..wid {
                    let ox = 2 * ix + ck;
                    if ox < pad || ox - pad >= ow {
                        continue;
                    }
                    acc += xp[iy * wid + ix] * dyp[(oy - pad) * ow + (ox - pad)];
                }
            }
        }
        acc
    });
    let dw = Tensor::from_vec(w.shape(), dw_flat)?;

    let mut db = Tensor::zeros([1, cout, 1, 1]);
    for ni in 0..n {
        for co in 0..cout {
            let mut s = T::zero();
            for &v in dy.plane(ni, co) {
                s += v;
            }
            db.data_mut()[co] += s;
        }
    }
    Ok((dx, dw, db))
}
