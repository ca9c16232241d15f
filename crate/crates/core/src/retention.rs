//! Global retention block: attention-style token mixing whose pairwise
//! weights are damped by gamma raised to the Manhattan distance between grid
//! positions. Two forward paths exist: the deployed softmax+decay form and a
//! raw decay-only form that must match a 1D recurrent scan, which is the
//! correctness oracle for the whole mechanism.

use crate::error::{CoreError, Result};
use crate::ops::matmul::{matmul_at_into, matmul_bt_into, matmul_into};
use crate::ops::pointwise::{softmax_row, softmax_row_backward};
use crate::par;
use crate::params::{GradStore, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Dense pairwise decay matrix over the flattened `h x w` grid. Token `t`
/// sits at row `t / w`, column `t % w`; entry `(a, b)` is
/// `gamma^(|ra-rb| + |ca-cb|)`.
#[derive(Debug, Clone)]
pub struct DecayMask<T: Scalar> {
    pub height: usize,
    pub width: usize,
    pub gamma: f64,
    data: Vec<T>,
}

impl<T: Scalar> DecayMask<T> {
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize) -> T {
        self.data[a * self.height * self.width + b]
    }
}

pub fn decay_mask_2d<T: Scalar>(height: usize, width: usize, gamma: f64) -> Result<DecayMask<T>> {
    if height < 1 || width < 1 {
        return Err(CoreError::invalid("decay_mask_2d", "grid sides must be >= 1"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CoreError::invalid("decay_mask_2d", format!("gamma {gamma} outside (0, 1]")));
    }
    let p = height * width;
    let max_dist = height + width - 1;
    let mut powers = Vec::with_capacity(max_dist);
    let mut acc = 1.0f64;
    for _ in 0..max_dist {
        powers.push(T::from_fp(acc));
        acc *= gamma;
    }

    let mut data = vec![T::zero(); p * p];
    par::for_each_chunk_mut(&mut data, p, |a, row| {
        let (ra, ca) = (a / width, a % width);
        for (b, v) in row.iter_mut().enumerate() {
            let (rb, cb) = (b / width, b % width);
            let dist = ra.abs_diff(rb) + ca.abs_diff(cb);
            *v = powers[dist];
        }
    });
    Ok(DecayMask { height, width, gamma, data })
}

/// Rotation direction: `Forward` is the position phase, `Inverse` its
/// conjugate. Applying one after the other at the same positions is the
/// identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationSign {
    Forward,
    Inverse,
}

impl RotationSign {
    fn factor(self) -> f64 {
        match self {
            RotationSign::Forward => 1.0,
            RotationSign::Inverse => -1.0,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            RotationSign::Forward => RotationSign::Inverse,
            RotationSign::Inverse => RotationSign::Forward,
        }
    }
}

/// Per-pair angular frequencies for one axis: `theta_base^(-2j / (d/2))` with
/// `j` indexing the `d/4` channel pairs of that axis.
fn axis_frequencies(dim: usize, theta_base: f64) -> Vec<f64> {
    let pairs = dim / 4;
    (0..pairs)
        .map(|j| theta_base.powf(-2.0 * j as f64 / (dim / 2) as f64))
        .collect()
}

/// Rotate token features by position-dependent phases, axially split: the
/// first `dim/2` channels turn with the row index, the second half with the
/// column index. Pairs of adjacent channels form the rotation planes, so each
/// pair's L2 norm is preserved exactly.
pub fn axial_rotation<T: Scalar>(
    tokens: &[T],
    dim: usize,
    height: usize,
    width: usize,
    sign: RotationSign,
    theta_base: f64,
) -> Result<Vec<T>> {
    if dim % 4 != 0 {
        return Err(CoreError::invalid(
            "axial_rotation",
            format!("feature dim {dim} must be divisible by 4"),
        ));
    }
    if theta_base <= 1.0 {
        return Err(CoreError::invalid("axial_rotation", "theta_base must be > 1"));
    }
    let p = height * width;
    if tokens.len() != p * dim {
        return Err(CoreError::shape(
            "axial_rotation",
            format!("expected {p} tokens x {dim} dims, got {} values", tokens.len()),
        ));
    }
    let freqs = axis_frequencies(dim, theta_base);
    let s = sign.factor();
    let half = dim / 2;

    let mut out = tokens.to_vec();
    par::for_each_chunk_mut(&mut out, dim, |t, tok| {
        let (row, col) = (t / width, t % width);
        for (j, &f) in freqs.iter().enumerate() {
            for (base, pos) in [(2 * j, row), (half + 2 * j, col)] {
                let angle = s * f * pos as f64;
                let (sin, cos) = (T::from_fp(angle.sin()), T::from_fp(angle.cos()));
                let (u, v) = (tok[base], tok[base + 1]);
                tok[base] = u * cos - v * sin;
                tok[base + 1] = u * sin + v * cos;
            }
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    Causal,
    Bidirectional,
}

/// Reference O(n * dk * dv) recurrent scan over a 1D token sequence with
/// pre-projected, pre-rotated inputs: state `S_t = gamma * S_(t-1) + k_t^T v_t`,
/// output `o_t = q_t S_t`. The bidirectional form adds the reversed scan and
/// subtracts the doubly counted self term.
pub fn retention_recurrent_1d<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    len: usize,
    dk: usize,
    dv: usize,
    gamma: f64,
    direction: ScanDirection,
) -> Result<Vec<T>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CoreError::invalid(
            "retention_recurrent_1d",
            format!("gamma {gamma} outside (0, 1]"),
        ));
    }
    if q.len() != len * dk || k.len() != len * dk || v.len() != len * dv {
        return Err(CoreError::shape(
            "retention_recurrent_1d",
            format!("expected q/k [{len}x{dk}] and v [{len}x{dv}]"),
        ));
    }
    let g = T::from_fp(gamma);

    let scan = |order: &mut dyn Iterator<Item = usize>, out: &mut [T]| {
        let mut state = vec![T::zero(); dk * dv];
        for t in order {
            let (qt, kt, vt) = (&q[t * dk..(t + 1) * dk], &k[t * dk..(t + 1) * dk], &v[t * dv..(t + 1) * dv]);
            for i in 0..dk {
                let ki = kt[i];
                let row = &mut state[i * dv..(i + 1) * dv];
                for (sv, &vv) in row.iter_mut().zip(vt.iter()) {
                    *sv = g * *sv + ki * vv;
                }
            }
            let ot = &mut out[t * dv..(t + 1) * dv];
            for (j, o) in ot.iter_mut().enumerate() {
                let mut acc = T::zero();
                for i in 0..dk {
                    acc += qt[i] * state[i * dv + j];
                }
                *o = acc;
            }
        }
    };

    let mut out = vec![T::zero(); len * dv];
    scan(&mut (0..len), &mut out);

    if direction == ScanDirection::Bidirectional {
        let mut rev = vec![T::zero(); len * dv];
        scan(&mut (0..len).rev(), &mut rev);
        for t in 0..len {
            let (qt, kt, vt) = (&q[t * dk..(t + 1) * dk], &k[t * dk..(t + 1) * dk], &v[t * dv..(t + 1) * dv]);
            let mut qk = T::zero();
            for i in 0..dk {
                qk += qt[i] * kt[i];
            }
            let ot = &mut out[t * dv..(t + 1) * dv];
            for j in 0..dv {
                ot[j] = ot[j] + rev[t * dv + j] - qk * vt[j];
            }
        }
    }
    Ok(out)
}

/// Which attention matrix the parallel form builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetentionMode {
    /// `softmax(QK^T / sqrt(d)) * D`, the deployed path.
    SoftmaxDecay,
    /// Raw `(QK^T) * D` with no softmax and no scaling; matches the
    /// recurrent scan and exists as its oracle counterpart.
    DecayOnly,
}

/// Multi-head retention configuration plus the parameter-store keys of its
/// projection weights.
#[derive(Debug, Clone)]
pub struct RetentionParams {
    pub heads: usize,
    pub head_dim: usize,
    /// Per-head decay rate in (0, 1].
    pub gamma: Vec<f64>,
    pub theta_base: f64,
    /// Renormalize attention rows after the decay product (off by default;
    /// the plain product is the deployed form).
    pub renormalize: bool,
    wq: String,
    wk: String,
    wv: String,
    wo: String,
}

/// Decay schedule `1 - 2^-(5+h)`: later heads keep longer-range context.
pub fn default_gamma_schedule(heads: usize) -> Vec<f64> {
    (0..heads).map(|h| 1.0 - (2.0f64).powi(-(5 + h as i32))).collect()
}

impl RetentionParams {
    /// Register projection weights under `prefix` and validate the head
    /// geometry: `heads * head_dim` must equal `channels` and `head_dim`
    /// must be divisible by 4 for the axial split.
    pub fn init<T: Scalar, R: Rng>(
        prefix: &str,
        channels: usize,
        heads: usize,
        gamma: Vec<f64>,
        theta_base: f64,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(CoreError::invalid(
                "retention",
                format!("{heads} heads do not divide {channels} channels"),
            ));
        }
        let head_dim = channels / heads;
        if head_dim % 4 != 0 {
            return Err(CoreError::invalid(
                "retention",
                format!("head_dim {head_dim} must be divisible by 4"),
            ));
        }
        if gamma.len() != heads {
            return Err(CoreError::invalid(
                "retention",
                format!("{} gamma values for {heads} heads", gamma.len()),
            ));
        }
        if gamma.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
            return Err(CoreError::invalid("retention", format!("gamma {gamma:?} outside (0, 1]")));
        }
        if theta_base <= 1.0 {
            return Err(CoreError::invalid("retention", "theta_base must be > 1"));
        }
        let std = 1.0 / (channels as f64).sqrt();
        let names = ["wq", "wk", "wv", "wo"].map(|s| format!("{prefix}.{s}"));
        for name in &names {
            store.register(name.clone(), Tensor::randn([1, 1, channels, channels], std, rng), true)?;
        }
        let [wq, wk, wv, wo] = names;
        Ok(RetentionParams {
            heads,
            head_dim,
            gamma,
            theta_base,
            renormalize: false,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn weight_names(&self) -> [&str; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}

/// Copy sample `n` of `[N,C,H,W]` into token-major `[P, C]`.
pub fn tokens_from_tensor<T: Scalar>(x: &Tensor<T>, n: usize) -> Vec<T> {
    let [_, c, h, w] = x.shape();
    let p = h * w;
    let mut out = vec![T::zero(); p * c];
    for ci in 0..c {
        let plane = x.plane(n, ci);
        for (t, &v) in plane.iter().enumerate() {
            out[t * c + ci] = v;
        }
    }
    out
}

fn tokens_to_plane<T: Scalar>(tokens: &[T], c: usize, out: &mut Tensor<T>, n: usize) {
    let [_, _, h, w] = out.shape();
    let p = h * w;
    for ci in 0..c {
        let plane = out.plane_mut(n, ci);
        for (t, dst) in plane.iter_mut().enumerate().take(p) {
            *dst = tokens[t * c + ci];
        }
    }
}

/// Projection + rotation stage for one head of one sample: returns
/// `(q_rotated, k_rotated, v)`, each `[P, head_dim]`. Both q and k use the
/// forward phase; the real-valued dot product in the score conjugates one
/// side implicitly, giving scores that depend on relative position only.
pub fn retention_head_qkv<T: Scalar>(
    x: &Tensor<T>,
    ps: &ParamStore<T>,
    p: &RetentionParams,
    sample: usize,
    head: usize,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let [_, c, h, w] = x.shape();
    let xtok = tokens_from_tensor(x, sample);
    let tokens = h * w;
    let d = p.head_dim;
    let mut q_all = vec![T::zero(); tokens * c];
    let mut k_all = vec![T::zero(); tokens * c];
    let mut v_all = vec![T::zero(); tokens * c];
    matmul_into(&xtok, ps.get(&p.wq)?.data(), tokens, c, c, &mut q_all);
    matmul_into(&xtok, ps.get(&p.wk)?.data(), tokens, c, c, &mut k_all);
    matmul_into(&xtok, ps.get(&p.wv)?.data(), tokens, c, c, &mut v_all);
    let slice_head = |all: &[T]| -> Vec<T> {
        let mut hsl = vec![T::zero(); tokens * d];
        for t in 0..tokens {
            hsl[t * d..(t + 1) * d].copy_from_slice(&all[t * c + head * d..t * c + (head + 1) * d]);
        }
        hsl
    };
    let qr = axial_rotation(&slice_head(&q_all), d, h, w, RotationSign::Forward, p.theta_base)?;
    let kr = axial_rotation(&slice_head(&k_all), d, h, w, RotationSign::Forward, p.theta_base)?;
    Ok((qr, kr, slice_head(&v_all)))
}

struct HeadCache<T: Scalar> {
    qr: Vec<T>,
    kr: Vec<T>,
    v: Vec<T>,
    /// Softmax output before the decay product (SoftmaxDecay mode only).
    a0: Option<Vec<T>>,
}

struct SampleCache<T: Scalar> {
    xtok: Vec<T>,
    /// Concatenated per-head attention outputs `[P, C]`, input of the output
    /// projection.
    o: Vec<T>,
    heads: Vec<HeadCache<T>>,
}

pub struct RetentionCache<T: Scalar> {
    samples: Vec<SampleCache<T>>,
    mode: RetentionMode,
}

fn ensure_slice_finite<T: Scalar>(vals: &[T], head: usize, stage: &str) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::non_finite(
            "retention_parallel",
            format!("head {head}, stage {stage}"),
        ))
    }
}

/// Multi-head retention over the flattened spatial grid, parallel form.
/// Outputs `[N, C, H, W]` like the input. With `want_cache` the returned
/// cache carries what the backward pass needs.
pub fn retention_parallel<T: Scalar>(
    x: &Tensor<T>,
    ps: &ParamStore<T>,
    p: &RetentionParams,
    mode: RetentionMode,
    want_cache: bool,
) -> Result<(Tensor<T>, Option<RetentionCache<T>>)> {
    let [n, c, h, w] = x.shape();
    if c != p.channels() {
        return Err(CoreError::shape(
            "retention_parallel",
            format!("input has {c} channels, params expect {}", p.channels()),
        ));
    }
    let tokens = h * w;
    let d = p.head_dim;
    let scale = T::from_fp(1.0 / (d as f64).sqrt());
    let wq = ps.get(&p.wq)?.data();
    let wk = ps.get(&p.wk)?.data();
    let wv = ps.get(&p.wv)?.data();
    let wo = ps.get(&p.wo)?.data();
    let masks: Vec<DecayMask<T>> = p
        .gamma
        .iter()
        .map(|&g| decay_mask_2d::<T>(h, w, g))
        .collect::<Result<_>>()?;

    let mut out = Tensor::zeros([n, c, h, w]);
    let results: Vec<Result<(Vec<T>, SampleCache<T>)>> = par::map_collect(n, |ni| {
        let xtok = tokens_from_tensor(x, ni);
        let mut q_all = vec![T::zero(); tokens * c];
        let mut k_all = vec![T::zero(); tokens * c];
        let mut v_all = vec![T::zero(); tokens * c];
        matmul_into(&xtok, wq, tokens, c, c, &mut q_all);
        matmul_into(&xtok, wk, tokens, c, c, &mut k_all);
        matmul_into(&xtok, wv, tokens, c, c, &mut v_all);

        let mut o = vec![T::zero(); tokens * c];
        let mut head_caches = Vec::new();
        for head in 0..p.heads {
            let slice_head = |all: &[T]| -> Vec<T> {
                let mut hsl = vec![T::zero(); tokens * d];
                for t in 0..tokens {
                    hsl[t * d..(t + 1) * d].copy_from_slice(&all[t * c + head * d..t * c + (head + 1) * d]);
                }
                hsl
            };
            let qr = axial_rotation(&slice_head(&q_all), d, h, w, RotationSign::Forward, p.theta_base)?;
            let kr = axial_rotation(&slice_head(&k_all), d, h, w, RotationSign::Forward, p.theta_base)?;
            let v = slice_head(&v_all);

            let mut scores = vec![T::zero(); tokens * tokens];
            matmul_bt_into(&qr, &kr, tokens, d, tokens, &mut scores);

            let mask = &masks[head];
            let mut a0 = None;
            match mode {
                RetentionMode::SoftmaxDecay => {
                    for sv in scores.iter_mut() {
                        *sv *= scale;
                    }
                    for row in scores.chunks_mut(tokens) {
                        softmax_row(row);
                    }
                    if want_cache {
                        a0 = Some(scores.clone());
                    }
                    for (sv, &mv) in scores.iter_mut().zip(mask.data()) {
                        *sv *= mv;
                    }
                    if p.renormalize {
                        for row in scores.chunks_mut(tokens) {
                            let mut s = T::zero();
                            for &rv in row.iter() {
                                s += rv;
                            }
                            for rv in row.iter_mut() {
                                *rv /= s;
                            }
                        }
                    }
                }
                RetentionMode::DecayOnly => {
                    for (sv, &mv) in scores.iter_mut().zip(mask.data()) {
                        *sv *= mv;
                    }
                }
            }
            ensure_slice_finite(&scores, head, "attention weights")?;

            let mut oh = vec![T::zero(); tokens * d];
            matmul_into(&scores, &v, tokens, tokens, d, &mut oh);
            for t in 0..tokens {
                o[t * c + head * d..t * c + (head + 1) * d].copy_from_slice(&oh[t * d..(t + 1) * d]);
            }
            head_caches.push(HeadCache {
                qr: if want_cache { qr } else { Vec::new() },
                kr: if want_cache { kr } else { Vec::new() },
                v: if want_cache { v } else { Vec::new() },
                a0,
            });
        }

        let mut y = vec![T::zero(); tokens * c];
        matmul_into(&o, wo, tokens, c, c, &mut y);
        ensure_slice_finite(&y, p.heads, "output projection")?;
        Ok((
            y,
            SampleCache {
                xtok: if want_cache { xtok } else { Vec::new() },
                o: if want_cache { o } else { Vec::new() },
                heads: head_caches,
            },
        ))
    });

    let mut samples = Vec::with_capacity(n);
    for (ni, res) in results.into_iter().enumerate() {
        let (y, cache) = res?;
        tokens_to_plane(&y, c, &mut out, ni);
        samples.push(cache);
    }
    Ok((out, want_cache.then_some(RetentionCache { samples, mode })))
}

/// Backward pass of `retention_parallel`. Returns the input gradient and
/// accumulates projection-weight gradients.
pub fn retention_parallel_backward<T: Scalar>(
    x: &Tensor<T>,
    ps: &ParamStore<T>,
    p: &RetentionParams,
    cache: &RetentionCache<T>,
    dy: &Tensor<T>,
    grads: &mut GradStore<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let tokens = h * w;
    let d = p.head_dim;
    let scale = T::from_fp(1.0 / (d as f64).sqrt());
    let wq = ps.get(&p.wq)?.data();
    let wk = ps.get(&p.wk)?.data();
    let wv = ps.get(&p.wv)?.data();
    let wo = ps.get(&p.wo)?.data();
    let masks: Vec<DecayMask<T>> = p
        .gamma
        .iter()
        .map(|&g| decay_mask_2d::<T>(h, w, g))
        .collect::<Result<_>>()?;

    struct SampleGrads<T> {
        dx_tok: Vec<T>,
        dwq: Vec<T>,
        dwk: Vec<T>,
        dwv: Vec<T>,
        dwo: Vec<T>,
    }

    let per_sample: Vec<Result<SampleGrads<T>>> = par::map_collect(n, |ni| {
        let sc = &cache.samples[ni];
        let dy_tok = tokens_from_tensor(dy, ni);

        // output projection
        let mut dwo = vec![T::zero(); c * c];
        matmul_at_into(&sc.o, &dy_tok, c, tokens, c, &mut dwo);
        let mut d_o = vec![T::zero(); tokens * c];
        matmul_bt_into(&dy_tok, wo, tokens, c, c, &mut d_o);

        let mut dq_all = vec![T::zero(); tokens * c];
        let mut dk_all = vec![T::zero(); tokens * c];
        let mut dv_all = vec![T::zero(); tokens * c];

        for head in 0..p.heads {
            let hc = &sc.heads[head];
            let mask = &masks[head];
            let mut doh = vec![T::zero(); tokens * d];
            for t in 0..tokens {
                doh[t * d..(t + 1) * d].copy_from_slice(&d_o[t * c + head * d..t * c + (head + 1) * d]);
            }

            // rebuild the final attention matrix from the cached pieces
            let mut attn: Vec<T>;
            let mut row_sums = vec![T::one(); tokens];
            match cache.mode {
                RetentionMode::SoftmaxDecay => {
                    let a0 = hc.a0.as_ref().expect("cache built without softmax state");
                    attn = a0.clone();
                    for (av, &mv) in attn.iter_mut().zip(mask.data()) {
                        *av *= mv;
                    }
                    if p.renormalize {
                        for (ri, row) in attn.chunks_mut(tokens).enumerate() {
                            let mut s = T::zero();
                            for &rv in row.iter() {
                                s += rv;
                            }
                            row_sums[ri] = s;
                            for rv in row.iter_mut() {
                                *rv /= s;
                            }
                        }
                    }
                }
                RetentionMode::DecayOnly => {
                    attn = vec![T::zero(); tokens * tokens];
                    matmul_bt_into(&hc.qr, &hc.kr, tokens, d, tokens, &mut attn);
                    for (av, &mv) in attn.iter_mut().zip(mask.data()) {
                        *av *= mv;
                    }
                }
            }

            // dV = A^T * dOh, dA = dOh * V^T
            let mut dv = vec![T::zero(); tokens * d];
            matmul_at_into(&attn, &doh, tokens, tokens, d, &mut dv);

            let mut da = vec![T::zero(); tokens * tokens];
            matmul_bt_into(&doh, &hc.v, tokens, d, tokens, &mut da);

            // through renormalize / decay / softmax down to raw scores
            let mut dscores = match cache.mode {
                RetentionMode::SoftmaxDecay => {
                    let a0 = hc.a0.as_ref().expect("cache built without softmax state");
                    let mut da_pre = da;
                    if p.renormalize {
                        // attn rows are already normalized; invert through a/r
                        for (ri, row) in da_pre.chunks_mut(tokens).enumerate() {
                            let arow = &attn[ri * tokens..(ri + 1) * tokens];
                            let mut dot = T::zero();
                            for (&gv, &av) in row.iter().zip(arow.iter()) {
                                dot += gv * av;
                            }
                            for gv in row.iter_mut() {
                                *gv = (*gv - dot) / row_sums[ri];
                            }
                        }
                    }
                    for (gv, &mv) in da_pre.iter_mut().zip(mask.data()) {
                        *gv *= mv;
                    }
                    for (ri, grow) in da_pre.chunks_mut(tokens).enumerate() {
                        softmax_row_backward(&a0[ri * tokens..(ri + 1) * tokens], grow);
                    }
                    for gv in da_pre.iter_mut() {
                        *gv *= scale;
                    }
                    da_pre
                }
                RetentionMode::DecayOnly => {
                    let mut ds = da;
                    for (gv, &mv) in ds.iter_mut().zip(mask.data()) {
                        *gv *= mv;
                    }
                    ds
                }
            };

            // dQr = dS * Kr, dKr = dS^T * Qr
            let mut dqr = vec![T::zero(); tokens * d];
            matmul_into(&dscores, &hc.kr, tokens, tokens, d, &mut dqr);
            let mut dkr = vec![T::zero(); tokens * d];
            matmul_at_into(&dscores, &hc.qr, tokens, tokens, d, &mut dkr);
            dscores.clear();

            let dq = axial_rotation(&dqr, d, h, w, RotationSign::Inverse, p.theta_base)?;
            let dk = axial_rotation(&dkr, d, h, w, RotationSign::Inverse, p.theta_base)?;

            for t in 0..tokens {
                dq_all[t * c + head * d..t * c + (head + 1) * d].copy_from_slice(&dq[t * d..(t + 1) * d]);
                dk_all[t * c + head * d..t * c + (head + 1) * d].copy_from_slice(&dk[t * d..(t + 1) * d]);
                dv_all[t * c + head * d..t * c + (head + 1) * d].copy_from_slice(&dv[t * d..(t + 1) * d]);
            }
        }

        // back through the three projections
        let mut dwq = vec![T::zero(); c * c];
        matmul_at_into(&sc.xtok, &dq_all, c, tokens, c, &mut dwq);
        let mut dwk = vec![T::zero(); c * c];
        matmul_at_into(&sc.xtok, &dk_all, c, tokens, c, &mut dwk);
        let mut dwv = vec![T::zero(); c * c];
        matmul_at_into(&sc.xtok, &dv_all, c, tokens, c, &mut dwv);

        let mut dx_tok = vec![T::zero(); tokens * c];
        let mut tmp = vec![T::zero(); tokens * c];
        matmul_bt_into(&dq_all, wq, tokens, c, c, &mut dx_tok);
        matmul_bt_into(&dk_all, wk, tokens, c, c, &mut tmp);
        for (a, &b) in dx_tok.iter_mut().zip(tmp.iter()) {
            *a += b;
        }
        matmul_bt_into(&dv_all, wv, tokens, c, c, &mut tmp);
        for (a, &b) in dx_tok.iter_mut().zip(tmp.iter()) {
            *a += b;
        }

        Ok(SampleGrads { dx_tok, dwq, dwk, dwv, dwo })
    });

    let mut dx = Tensor::zeros(x.shape());
    let mut dwq = Tensor::zeros([1, 1, c, c]);
    let mut dwk = Tensor::zeros([1, 1, c, c]);
    let mut dwv = Tensor::zeros([1, 1, c, c]);
    let mut dwo = Tensor::zeros([1, 1, c, c]);
    for (ni, res) in per_sample.into_iter().enumerate() {
        let sg = res?;
        tokens_to_plane(&sg.dx_tok, c, &mut dx, ni);
        for (acc, v) in dwq.data_mut().iter_mut().zip(sg.dwq) {
            *acc += v;
        }
        for (acc, v) in dwk.data_mut().iter_mut().zip(sg.dwk) {
            *acc += v;
        }
        for (acc, v) in dwv.data_mut().iter_mut().zip(sg.dwv) {
            *acc += v;
        }
        for (acc, v) in dwo.data_mut().iter_mut().zip(sg.dwo) {
            *acc += v;
        }
    }
    grads.accumulate(&p.wq, dwq)?;
    grads.accumulate(&p.wk, dwk)?;
    grads.accumulate(&p.wv, dwv)?;
    grads.accumulate(&p.wo, dwo)?;
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decay_mask_unit_diagonal_any_gamma() {
        for gamma in [0.25, 0.5, 0.9375, 1.0] {
            let m: DecayMask<f64> = decay_mask_2d(3, 4, gamma).unwrap();
            for t in 0..12 {
                assert_eq!(m.at(t, t), 1.0);
            }
        }
    }

    #[test]
    fn decay_mask_gamma_one_is_all_ones() {
        let m: DecayMask<f32> = decay_mask_2d(2, 5, 1.0).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn decay_mask_2x2_matches_formula_on_all_pairs() {
        let m: DecayMask<f64> = decay_mask_2d(2, 2, 0.5).unwrap();
        // brute-force double loop over the 16 token pairs
        for a in 0..4usize {
            for b in 0..4usize {
                let (ra, ca) = (a / 2, a % 2);
                let (rb, cb) = (b / 2, b % 2);
                let dist = (ra.abs_diff(rb) + ca.abs_diff(cb)) as i32;
                assert!((m.at(a, b) - 0.5f64.powi(dist)).abs() < 1e-15);
            }
        }
        // spot values from the spec of the mechanism: (0,0)->(1,1) dist 2, (0,0)->(0,1) dist 1
        assert_eq!(m.at(0, 3), 0.25);
        assert_eq!(m.at(0, 1), 0.5);
    }

    #[test]
    fn decay_mask_rejects_bad_gamma() {
        assert!(decay_mask_2d::<f32>(2, 2, 0.0).is_err());
        assert!(decay_mask_2d::<f32>(2, 2, 1.5).is_err());
        assert!(decay_mask_2d::<f32>(2, 2, -0.3).is_err());
    }

    #[test]
    fn rotation_zero_position_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 8;
        let tokens: Vec<f64> = (0..d).map(|_| f64::sample_normal(&mut rng)).collect();
        // single token grid: position (0,0), all angles zero
        let out = axial_rotation(&tokens, d, 1, 1, RotationSign::Forward, 10_000.0).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn rotation_forward_then_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w, d) = (3, 5, 12);
        let tokens: Vec<f64> = (0..h * w * d).map(|_| f64::sample_normal(&mut rng)).collect();
        let fwd = axial_rotation(&tokens, d, h, w, RotationSign::Forward, 10_000.0).unwrap();
        let back = axial_rotation(&fwd, d, h, w, RotationSign::Inverse, 10_000.0).unwrap();
        for (a, b) in back.iter().zip(&tokens) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_pair_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, d) = (4, 4, 8);
        let tokens: Vec<f32> = (0..h * w * d).map(|_| f32::sample_normal(&mut rng)).collect();
        let out = axial_rotation(&tokens, d, h, w, RotationSign::Forward, 10_000.0).unwrap();
        for t in 0..h * w {
            for pair in 0..d / 2 {
                let i = t * d + 2 * pair;
                let before = (tokens[i].powi(2) + tokens[i + 1].powi(2)).sqrt();
                let after = (out[i].powi(2) + out[i + 1].powi(2)).sqrt();
                assert!((before - after).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotation_rejects_dim_not_divisible_by_4() {
        let tokens = vec![0.0f32; 6];
        assert!(axial_rotation(&tokens, 6, 1, 1, RotationSign::Forward, 10_000.0).is_err());
    }

    #[test]
    fn recurrent_single_step() {
        let q = [2.0f64, 1.0];
        let k = [0.5, -1.0];
        let v = [3.0, 4.0];
        let out = retention_recurrent_1d(&q, &k, &v, 1, 2, 2, 0.5, ScanDirection::Causal).unwrap();
        let qk = 2.0 * 0.5 + 1.0 * (-1.0); // 0
        assert_eq!(out, vec![qk * 3.0, qk * 4.0]);
    }

    #[test]
    fn recurrent_full_decay_keeps_only_self_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d) = (5, 3);
        let q: Vec<f64> = (0..n * d).map(|_| f64::sample_normal(&mut rng)).collect();
        let k: Vec<f64> = (0..n * d).map(|_| f64::sample_normal(&mut rng)).collect();
        let v: Vec<f64> = (0..n * d).map(|_| f64::sample_normal(&mut rng)).collect();
        let out = retention_recurrent_1d(&q, &k, &v, n, d, d, 1e-12, ScanDirection::Bidirectional).unwrap();
        for t in 0..n {
            let mut qk = 0.0;
            for i in 0..d {
                qk += q[t * d + i] * k[t * d + i];
            }
            for j in 0..d {
                assert!((out[t * d + j] - qk * v[t * d + j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn recurrent_matches_explicit_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d, gamma) = (4, 2, 0.5);
        let q: Vec<f64> = (0..n * d).map(|_| f64::sample_normal(&mut rng)).collect();
        let k: Vec<f64> = (0..n * d).map(|_| f64::sample_normal(&mut rng)).collect();
        let v: Vec<f64> = (0..n * d).map(|_| f64::sample_normal(&mut rng)).collect();

        for dir in [ScanDirection::Causal, ScanDirection::Bidirectional] {
            let got = retention_recurrent_1d(&q, &k, &v, n, d, d, gamma, dir).unwrap();
            for t in 0..n {
                for j in 0..d {
                    let mut want = 0.0;
                    for m in 0..n {
                        if dir == ScanDirection::Causal && m > t {
                            continue;
                        }
                        let mut qk = 0.0;
                        for i in 0..d {
                            qk += q[t * d + i] * k[m * d + i];
                        }
                        want += gamma.powi((t as i32 - m as i32).abs()) * qk * v[m * d + j];
                    }
                    assert!((got[t * d + j] - want).abs() < 1e-6, "dir {dir:?} t {t} j {j}");
                }
            }
        }
    }

    #[test]
    fn recurrent_rejects_bad_gamma() {
        let z = [0.0f32; 2];
        assert!(retention_recurrent_1d(&z, &z, &z, 1, 2, 2, 0.0, ScanDirection::Causal).is_err());
        assert!(retention_recurrent_1d(&z, &z, &z, 1, 2, 2, 1.25, ScanDirection::Causal).is_err());
    }

    fn tiny_params(channels: usize, heads: usize, gamma: Vec<f64>, seed: u64) -> (ParamStore<f64>, RetentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let p = RetentionParams::init("grb", channels, heads, gamma, 10_000.0, &mut ps, &mut rng).unwrap();
        (ps, p)
    }

    #[test]
    fn decay_only_on_line_grid_matches_bidirectional_scan() {
        let (c, heads, len) = (8, 2, 6);
        let (ps, p) = tiny_params(c, heads, vec![0.5, 0.9], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Tensor<f64> = Tensor::randn([1, c, 1, len], 1.0, &mut rng);

        let (got, _) = retention_parallel(&x, &ps, &p, RetentionMode::DecayOnly, false).unwrap();

        // oracle: per-head recurrent scan on the projected/rotated tokens,
        // heads concatenated, output projection applied
        let d = p.head_dim;
        let mut o = vec![0.0f64; len * c];
        for head in 0..heads {
            let (qr, kr, v) = retention_head_qkv(&x, &ps, &p, 0, head).unwrap();
            let oh = retention_recurrent_1d(&qr, &kr, &v, len, d, d, p.gamma[head], ScanDirection::Bidirectional)
                .unwrap();
            for t in 0..len {
                o[t * c + head * d..t * c + (head + 1) * d].copy_from_slice(&oh[t * d..(t + 1) * d]);
            }
        }
        let y = crate::ops::matmul(&o, ps.get("grb.wo").unwrap().data(), len, c, c);
        for t in 0..len {
            for ch in 0..c {
                let want = y[t * c + ch];
                let have = got.at(0, ch, 0, t);
                assert!((want - have).abs() < 1e-5, "token {t} ch {ch}: {want} vs {have}");
            }
        }
    }

    #[test]
    fn single_token_softmax_mode_is_value_projection() {
        let (c, heads) = (8, 2);
        let (ps, p) = tiny_params(c, heads, vec![0.9, 0.8], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Tensor<f64> = Tensor::randn([1, c, 1, 1], 1.0, &mut rng);
        let (got, _) = retention_parallel(&x, &ps, &p, RetentionMode::SoftmaxDecay, false).unwrap();

        let xtok = tokens_from_tensor(&x, 0);
        let v = crate::ops::matmul(&xtok, ps.get("grb.wv").unwrap().data(), 1, c, c);
        let y = crate::ops::matmul(&v, ps.get("grb.wo").unwrap().data(), 1, c, c);
        for ch in 0..c {
            assert!((got.at(0, ch, 0, 0) - y[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_gradients_match_finite_differences() {
        let (c, heads) = (4, 1);
        let (ps, mut p) = tiny_params(c, heads, vec![0.75], 10);
        p.renormalize = false;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f64> = Tensor::randn([1, c, 2, 3], 1.0, &mut rng);

        for mode in [RetentionMode::SoftmaxDecay, RetentionMode::DecayOnly] {
            let fwd = |ins: &[Tensor<f64>]| {
                retention_parallel(&ins[0], &ps, &p, mode, false).map(|(y, _)| y)
            };
            let bwd = |ins: &[Tensor<f64>], dy: &Tensor<f64>| {
                let (_, cache) = retention_parallel(&ins[0], &ps, &p, mode, true)?;
                let mut gs = GradStore::new();
                retention_parallel_backward(&ins[0], &ps, &p, &cache.unwrap(), dy, &mut gs).map(|dx| vec![dx])
            };
            let err = crate::gradcheck::grad_check("retention_parallel", &fwd, &bwd, &[x.clone()], None).unwrap();
            assert!(err < 1e-6, "mode {mode:?} input grad err {err}");
        }
    }

    #[test]
    fn renormalized_rows_sum_to_one_and_backward_checks() {
        let (c, heads) = (4, 1);
        let (ps, mut p) = tiny_params(c, heads, vec![0.5], 12);
        p.renormalize = true;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Tensor<f64> = Tensor::randn([1, c, 2, 2], 1.0, &mut rng);
        let fwd = |ins: &[Tensor<f64>]| {
            retention_parallel(&ins[0], &ps, &p, RetentionMode::SoftmaxDecay, false).map(|(y, _)| y)
        };
        let bwd = |ins: &[Tensor<f64>], dy: &Tensor<f64>| {
            let (_, cache) = retention_parallel(&ins[0], &ps, &p, RetentionMode::SoftmaxDecay, true)?;
            let mut gs = GradStore::new();
            retention_parallel_backward(&ins[0], &ps, &p, &cache.unwrap(), dy, &mut gs).map(|dx| vec![dx])
        };
        let err = crate::gradcheck::grad_check("retention_renorm", &fwd, &bwd, &[x], None).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn default_schedule_is_in_range_and_distinct() {
        let g = default_gamma_schedule(4);
        assert_eq!(g.len(), 4);
        for win in g.windows(2) {
            assert!(win[0] < win[1]);
        }
        assert!(g.iter().all(|&v| v > 0.9 && v < 1.0));
        assert!((g[0] - (1.0 - 1.0 / 32.0)).abs() < 1e-12);
    }
}
