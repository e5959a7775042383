//! Numeric kernels: softmax, GeLU, linear maps, RMS norm and the attention
//! primitive, each paired with a hand-derived backward.
//!
//! Every kernel loops per position with a fixed accumulation order, so batched
//! and incremental execution produce bit-identical results. Backward kernels
//! accumulate (`+=`) into caller-provided buffers.

use crate::error::{Error, Result};
use crate::nncore::tensor::Scalar;

/// Numerically stable softmax. Errors on non-finite input.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax with max subtraction; input assumed finite.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let mut max = v[0];
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in v.iter_mut() {
        *x = *x * inv;
    }
}

/// log(sum(exp(v))) with max subtraction.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let mut max = v[0];
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for &x in v.iter() {
        sum = sum + (x - max).exp();
    }
    max + sum.ln()
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_first<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    let mut score = v[0];
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > score {
            score = x;
            best = i;
        }
    }
    best
}

/// Exact GeLU: `0.5 x (1 + erf(x / sqrt(2)))`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

/// d/dx GeLU = Phi(x) + x phi(x).
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let phi_cum = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = T::from_f64((2.0 * std::f64::consts::PI).sqrt().recip()) * (-(x * x) * half).exp();
    phi_cum + x * pdf
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for i in 0..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] = y[i] + alpha * x[i];
    }
}

/// `y[r] = W x[r] + b` with `W` stored row-major `[d_out, d_in]`.
pub fn linear_rows<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * d_in);
    debug_assert_eq!(w.len(), d_out * d_in);
    let mut y = vec![T::zero(); rows * d_out];
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let yr = &mut y[r * d_out..(r + 1) * d_out];
        for o in 0..d_out {
            let mut acc = dot(xr, &w[o * d_in..(o + 1) * d_in]);
            if let Some(b) = b {
                acc = acc + b[o];
            }
            yr[o] = acc;
        }
    }
    y
}

/// Backward of [`linear_rows`]; accumulates into `dx`, `dw`, `db`.
pub fn linear_rows_bwd<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * d_out..(r + 1) * d_out];
            let dxr = &mut dx[r * d_in..(r + 1) * d_in];
            for o in 0..d_out {
                axpy(dyr[o], &w[o * d_in..(o + 1) * d_in], dxr);
            }
        }
    }
    for r in 0..rows {
        let dyr = &dy[r * d_out..(r + 1) * d_out];
        let xr = &x[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            axpy(dyr[o], xr, &mut dw[o * d_in..(o + 1) * d_in]);
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            let dyr = &dy[r * d_out..(r + 1) * d_out];
            for o in 0..d_out {
                db[o] = db[o] + dyr[o];
            }
        }
    }
}

/// RMS norm rows: `y = g * x / sqrt(mean(x^2) + eps)`. Returns `(y, inv_rms)`.
pub fn rmsnorm_rows<T: Scalar>(x: &[T], g: &[T], rows: usize, d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); rows * d];
    let mut inv = vec![T::zero(); rows];
    let nd = T::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = dot(xr, xr) / nd + eps;
        let ir = ms.sqrt().recip();
        inv[r] = ir;
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            yr[i] = g[i] * xr[i] * ir;
        }
    }
    (y, inv)
}

/// Backward of [`rmsnorm_rows`]; accumulates into `dx` and `dg`.
pub fn rmsnorm_rows_bwd<T: Scalar>(
    dy: &[T],
    x: &[T],
    g: &[T],
    inv_rms: &[T],
    rows: usize,
    d: usize,
    dx: &mut [T],
    dg: &mut [T],
) {
    let nd = T::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let ir = inv_rms[r];
        let mut inner = T::zero();
        for i in 0..d {
            inner = inner + dyr[i] * g[i] * xr[i];
        }
        let scale = inner * ir * ir * ir / nd;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] = dxr[i] + g[i] * dyr[i] * ir - xr[i] * scale;
            dg[i] = dg[i] + dyr[i] * xr[i] * ir;
        }
    }
}

/// Allowed keys for one query: the prefix `[0, prefix)` plus an optional
/// extra index at or beyond the prefix. Keys with index `< local_start` (or
/// flagged protected) read from the projected source; the rest read from the
/// query stream's own source.
#[derive(Debug, Clone, Copy)]
pub struct KeySpan {
    pub prefix: usize,
    pub extra: Option<usize>,
    pub local_start: usize,
}

impl KeySpan {
    /// Plain causal span for query at `pos`, single source.
    pub fn causal(pos: usize) -> Self {
        KeySpan {
            prefix: pos + 1,
            extra: None,
            local_start: 0,
        }
    }

    pub fn key_count(&self) -> usize {
        self.prefix + usize::from(self.extra.is_some())
    }
}

/// Multi-head scaled dot-product attention over per-query key spans with up
/// to two key/value sources. `k_hat`/`v_hat` back keys below `local_start`
/// (or protected positions); `k_own`/`v_own` back the rest. Pass the same
/// slices for both to run single-source.
///
/// Disallowed keys are never touched, so they carry exactly zero weight.
#[allow(clippy::too_many_arguments)]
pub fn attention_rows<T: Scalar>(
    q: &[T],
    k_hat: &[T],
    v_hat: &[T],
    k_own: &[T],
    v_own: &[T],
    spans: &[KeySpan],
    protected: Option<&[bool]>,
    n_heads: usize,
    d: usize,
) -> Result<Vec<T>> {
    let nq = spans.len();
    debug_assert_eq!(q.len(), nq * d);
    if d % n_heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "head count {n_heads} does not divide model dim {d}"
        )));
    }
    let dh = d / n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let nk = k_own.len() / d;
    let mut out = vec![T::zero(); nq * d];
    let mut scores: Vec<T> = Vec::new();
    let mut keys: Vec<usize> = Vec::new();

    for (i, span) in spans.iter().enumerate() {
        if span.key_count() == 0 {
            return Err(Error::EmptyAttentionSet { query: i });
        }
        keys.clear();
        keys.extend(0..span.prefix);
        if let Some(e) = span.extra {
            debug_assert!(e >= span.prefix);
            keys.push(e);
        }
        if *keys.last().unwrap() >= nk {
            return Err(Error::shape(
                format!("key index < {nk}"),
                format!("{}", keys.last().unwrap()),
                "attention_rows",
            ));
        }
        for h in 0..n_heads {
            let hoff = h * dh;
            let qh = &q[i * d + hoff..i * d + hoff + dh];
            scores.clear();
            for &p in &keys {
                let hat = p < span.local_start || protected.is_some_and(|f| f[p]);
                let ks = if hat { k_hat } else { k_own };
                scores.push(dot(qh, &ks[p * d + hoff..p * d + hoff + dh]) * scale);
            }
            softmax_in_place(&mut scores);
            let oh = &mut out[i * d + hoff..i * d + hoff + dh];
            for (idx, &p) in keys.iter().enumerate() {
                let hat = p < span.local_start || protected.is_some_and(|f| f[p]);
                let vs = if hat { v_hat } else { v_own };
                axpy(scores[idx], &vs[p * d + hoff..p * d + hoff + dh], oh);
            }
        }
    }
    Ok(out)
}

/// Backward of [`attention_rows`]. Recomputes the attention weights, then
/// accumulates gradients into `dq` and the per-source key/value buffers.
/// Hat-source buffers may be `None` when no query resolves to that source.
#[allow(clippy::too_many_arguments)]
pub fn attention_rows_bwd<T: Scalar>(
    dout: &[T],
    q: &[T],
    k_hat: &[T],
    v_hat: &[T],
    k_own: &[T],
    v_own: &[T],
    spans: &[KeySpan],
    protected: Option<&[bool]>,
    n_heads: usize,
    d: usize,
    dq: &mut [T],
    mut dk_hat: Option<&mut [T]>,
    mut dv_hat: Option<&mut [T]>,
    dk_own: &mut [T],
    dv_own: &mut [T],
) {
    let dh = d / n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut scores: Vec<T> = Vec::new();
    let mut dscores: Vec<T> = Vec::new();
    let mut keys: Vec<usize> = Vec::new();

    for (i, span) in spans.iter().enumerate() {
        keys.clear();
        keys.extend(0..span.prefix);
        if let Some(e) = span.extra {
            keys.push(e);
        }
        for h in 0..n_heads {
            let hoff = h * dh;
            let qh = &q[i * d + hoff..i * d + hoff + dh];
            let doh = &dout[i * d + hoff..i * d + hoff + dh];
            scores.clear();
            for &p in &keys {
                let hat = p < span.local_start || protected.is_some_and(|f| f[p]);
                let ks = if hat { k_hat } else { k_own };
                scores.push(dot(qh, &ks[p * d + hoff..p * d + hoff + dh]) * scale);
            }
            softmax_in_place(&mut scores);

            // dv and dw
            dscores.clear();
            let mut common = T::zero();
            for (idx, &p) in keys.iter().enumerate() {
                let hat = p < span.local_start || protected.is_some_and(|f| f[p]);
                let vs = if hat { v_hat } else { v_own };
                let dw = dot(doh, &vs[p * d + hoff..p * d + hoff + dh]);
                dscores.push(dw);
                common = common + scores[idx] * dw;
                let dvs: &mut [T] = if hat {
                    dv_hat.as_deref_mut().expect("hat grads required")
                } else {
                    &mut *dv_own
                };
                axpy(scores[idx], doh, &mut dvs[p * d + hoff..p * d + hoff + dh]);
            }
            // softmax backward, then q/k grads
            let dqh_base = i * d + hoff;
            for (idx, &p) in keys.iter().enumerate() {
                let ds = scores[idx] * (dscores[idx] - common) * scale;
                let hat = p < span.local_start || protected.is_some_and(|f| f[p]);
                let ks = if hat { k_hat } else { k_own };
                axpy(ds, &ks[p * d + hoff..p * d + hoff + dh], &mut dq[dqh_base..dqh_base + dh]);
                let dks: &mut [T] = if hat {
                    dk_hat.as_deref_mut().expect("hat grads required")
                } else {
                    &mut *dk_own
                };
                axpy(ds, qh, &mut dks[p * d + hoff..p * d + hoff + dh]);
            }
        }
    }
}

/// Spec-level masked attention entry point: validates shapes and the allowed
/// sets, then runs the single-source kernel.
pub fn masked_attention<T: Scalar>(
    queries: &[T],
    keys: &[T],
    values: &[T],
    spans: &[KeySpan],
    n_heads: usize,
    d: usize,
) -> Result<Vec<T>> {
    if keys.len() != values.len() {
        return Err(Error::shape(
            format!("{}", keys.len()),
            format!("{}", values.len()),
            "key/value counts differ",
        ));
    }
    if keys.len() % d != 0 || queries.len() % d != 0 {
        return Err(Error::shape(
            format!("multiple of {d}"),
            format!("q={} k={}", queries.len(), keys.len()),
            "masked_attention",
        ));
    }
    attention_rows(queries, keys, values, keys, values, spans, None, n_heads, d)
}
