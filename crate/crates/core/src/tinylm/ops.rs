//! Dense kernels on row-major slices.

use super::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// `out[n, m] = a[n, k] * b[k, m]` (overwrites `out`).
pub fn matmul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    let (k_, m_) = (k as isize, m as isize);
    F::gemm(n, k, m, F::one(), a, (k_, 1), b, (m_, 1), F::zero(), out, m_);
}

/// `db[k, m] += a[n, k]^T * dout[n, m]`.
pub fn matmul_at_acc<F: Scalar>(a: &[F], dout: &[F], db: &mut [F], n: usize, k: usize, m: usize) {
    let (k_, m_) = (k as isize, m as isize);
    F::gemm(k, n, m, F::one(), a, (1, k_), dout, (m_, 1), F::one(), db, m_);
}

/// `da[n, k] = dout[n, m] * b[k, m]^T` (overwrites `da`).
pub fn matmul_bt<F: Scalar>(dout: &[F], b: &[F], da: &mut [F], n: usize, k: usize, m: usize) {
    let (k_, m_) = (k as isize, m as isize);
    F::gemm(n, m, k, F::one(), dout, (m_, 1), b, (1, m_), F::zero(), da, k_);
}

/// Row-wise layer norm. Fills `xhat` and `rstd` for the backward pass.
pub fn layernorm<F: Scalar>(
    x: &[F],
    g: &[F],
    b: &[F],
    out: &mut [F],
    xhat: &mut [F],
    rstd: &mut [F],
    d: usize,
) {
    let eps = F::of(LN_EPS);
    let inv_d = F::one() / F::of(d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * g[c] + b[c];
        }
    }
}

/// Layer norm backward; writes `dx` and accumulates `dg`, `db` when given.
pub fn layernorm_backward<F: Scalar>(
    dout: &[F],
    xhat: &[F],
    rstd: &[F],
    g: &[F],
    dx: &mut [F],
    mut dg: Option<&mut [F]>,
    mut db: Option<&mut [F]>,
    d: usize,
) {
    let inv_d = F::one() / F::of(d as f64);
    for r in 0..rstd.len() {
        let dy = &dout[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxh = F::zero();
        let mut mean_dxh_xh = F::zero();
        for c in 0..d {
            let dxh = dy[c] * g[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        for c in 0..d {
            let dxh = dy[c] * g[c];
            dx[r * d + c] = rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
        if let Some(dg) = dg.as_deref_mut() {
            for c in 0..d {
                dg[c] += dy[c] * xh[c];
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for c in 0..d {
                db[c] += dy[c];
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::of(3.0) * c * x * x)
}

/// Numerically stable log-sum-exp of a row.
pub fn logsumexp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

/// In-place softmax of a row.
pub fn softmax_inplace<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Causal multi-head attention over `t` rows. `probs` receives
/// `[heads, t, t]` attention weights (zero above the diagonal) and `out`
/// the concatenated head outputs `[t, d]`.
#[allow(clippy::too_many_arguments)]
pub fn attention<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &mut [F],
    out: &mut [F],
    t: usize,
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let (d_, t_) = (d as isize, t as isize);
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        // Full score matrix; the causal mask is applied row by row below.
        F::gemm(t, dh, t, scale, &q[off..], (d_, 1), &k[off..], (1, d_), F::zero(), p, t_);
        for i in 0..t {
            let row = &mut p[i * t..(i + 1) * t];
            softmax_inplace(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|x| *x = F::zero());
        }
        F::gemm(t, t, dh, F::one(), p, (t_, 1), &v[off..], (d_, 1), F::zero(), &mut out[off..], d_);
    }
}

/// Backward of [`attention`]; writes `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    dout: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
    t: usize,
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let (d_, t_) = (d as isize, t as isize);
    let mut ds = vec![F::zero(); t * t];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * t * t..(h + 1) * t * t];
        // dV = P^T dO
        F::gemm(t, t, dh, F::one(), p, (1, t_), &dout[off..], (d_, 1), F::zero(), &mut dv[off..], d_);
        // dP = dO V^T, then the softmax Jacobian row by row.
        F::gemm(t, dh, t, F::one(), &dout[off..], (d_, 1), &v[off..], (1, d_), F::zero(), &mut ds, t_);
        for i in 0..t {
            let pr = &p[i * t..i * t + i + 1];
            let dr = &mut ds[i * t..(i + 1) * t];
            let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (g, &pj) in dr[..=i].iter_mut().zip(pr) {
                *g = pj * (*g - dot) * scale;
            }
            dr[i + 1..].iter_mut().for_each(|x| *x = F::zero());
        }
        // dQ = dS K, dK = dS^T Q
        F::gemm(t, t, dh, F::one(), &ds, (t_, 1), &k[off..], (d_, 1), F::zero(), &mut dq[off..], d_);
        F::gemm(t, t, dh, F::one(), &ds, (1, t_), &q[off..], (d_, 1), F::zero(), &mut dk[off..], d_);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        let mut da = [0.0; 4];
        matmul_bt(&out, &b, &mut da, 2, 2, 2);
        assert_eq!(da, [19.0 * 5.0 + 22.0 * 6.0, 19.0 * 7.0 + 22.0 * 8.0, 43.0 * 5.0 + 50.0 * 6.0, 43.0 * 7.0 + 50.0 * 8.0]);
        let mut db = [0.0; 4];
        matmul_at_acc(&a, &out, &mut db, 2, 2, 2);
        assert_eq!(db, [1.0 * 19.0 + 3.0 * 43.0, 1.0 * 22.0 + 3.0 * 50.0, 2.0 * 19.0 + 4.0 * 43.0, 2.0 * 22.0 + 4.0 * 50.0]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn logsumexp_is_stable() {
        let row = [1000.0f64, 1000.0];
        assert!((logsumexp(&row) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        let mut s = [1.0f32, 2.0, 3.0];
        softmax_inplace(&mut s);
        assert!((s.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
