//! Forward and backward kernels over flat row-major buffers.
//!
//! Weight matrices are stored `[out, in]` so both passes walk contiguous rows.

use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += a * x`
#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// `out[t, o] = b[o] + inp[t, :] · w[o, :]`
pub fn matmul_forward<T: Scalar>(out: &mut [T], inp: &[T], w: &[T], b: &[T], n: usize, c: usize, oc: usize) {
    for t in 0..n {
        let x = &inp[t * c..(t + 1) * c];
        let row = &mut out[t * oc..(t + 1) * oc];
        for (o, r) in row.iter_mut().enumerate() {
            *r = b[o] + dot(x, &w[o * c..(o + 1) * c]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    dinp: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    dout: &[T],
    inp: &[T],
    w: &[T],
    n: usize,
    c: usize,
    oc: usize,
) {
    for t in 0..n {
        let d = &dout[t * oc..(t + 1) * oc];
        let x = &inp[t * c..(t + 1) * c];
        let dx = &mut dinp[t * c..(t + 1) * c];
        for (o, &g) in d.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            axpy(dx, g, &w[o * c..(o + 1) * c]);
            axpy(&mut dw[o * c..(o + 1) * c], g, x);
            db[o] += g;
        }
    }
}

/// Normalizes each row; writes the mean and reciprocal std for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_forward<T: Scalar>(
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
    inp: &[T],
    g: &[T],
    b: &[T],
    n: usize,
    c: usize,
) {
    let cf = T::lit(c as f64);
    for t in 0..n {
        let x = &inp[t * c..(t + 1) * c];
        let m = x.iter().copied().sum::<T>() / cf;
        let var = x.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / cf;
        let r = T::one() / (var + T::lit(LN_EPS)).sqrt();
        let o = &mut out[t * c..(t + 1) * c];
        for i in 0..c {
            o[i] = (x[i] - m) * r * g[i] + b[i];
        }
        mean[t] = m;
        rstd[t] = r;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Scalar>(
    dinp: &mut [T],
    dg: &mut [T],
    db: &mut [T],
    dout: &[T],
    inp: &[T],
    g: &[T],
    mean: &[T],
    rstd: &[T],
    n: usize,
    c: usize,
) {
    let cf = T::lit(c as f64);
    for t in 0..n {
        let x = &inp[t * c..(t + 1) * c];
        let d = &dout[t * c..(t + 1) * c];
        let (m, r) = (mean[t], rstd[t]);
        let mut dnorm_mean = T::zero();
        let mut dnorm_xhat_mean = T::zero();
        for i in 0..c {
            let xhat = (x[i] - m) * r;
            let dn = g[i] * d[i];
            dnorm_mean += dn;
            dnorm_xhat_mean += dn * xhat;
        }
        dnorm_mean /= cf;
        dnorm_xhat_mean /= cf;
        let dx = &mut dinp[t * c..(t + 1) * c];
        for i in 0..c {
            let xhat = (x[i] - m) * r;
            db[i] += d[i];
            dg[i] += xhat * d[i];
            dx[i] += r * (g[i] * d[i] - dnorm_mean - xhat * dnorm_xhat_mean);
        }
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = s * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * s * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

pub fn gelu_forward<T: Scalar>(out: &mut [T], inp: &[T]) {
    for (o, &x) in out.iter_mut().zip(inp) {
        *o = gelu_parts(x).0;
    }
}

pub fn gelu_backward<T: Scalar>(dinp: &mut [T], inp: &[T], dout: &[T]) {
    for ((di, &x), &d) in dinp.iter_mut().zip(inp).zip(dout) {
        *di += gelu_parts(x).1 * d;
    }
}

/// Causal multi-head attention over a packed `[n, 3c]` q/k/v buffer.
/// `att` receives the `[nh, n, n]` softmax weights (upper triangle zero).
pub fn attention_forward<T: Scalar>(out: &mut [T], att: &mut [T], qkv: &[T], n: usize, c: usize, nh: usize) {
    let hs = c / nh;
    let scale = T::one() / T::lit(hs as f64).sqrt();
    let c3 = 3 * c;
    for h in 0..nh {
        for t in 0..n {
            let q = &qkv[t * c3 + h * hs..t * c3 + (h + 1) * hs];
            let row = &mut att[(h * n + t) * n..(h * n + t + 1) * n];
            let mut max = T::neg_infinity();
            for t2 in 0..=t {
                let k = &qkv[t2 * c3 + c + h * hs..t2 * c3 + c + (h + 1) * hs];
                let v = dot(q, k) * scale;
                row[t2] = v;
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for r in row.iter_mut().take(t + 1) {
                *r = (*r - max).exp();
                sum += *r;
            }
            let inv = T::one() / sum;
            for r in row.iter_mut().take(t + 1) {
                *r *= inv;
            }
            for r in row.iter_mut().skip(t + 1) {
                *r = T::zero();
            }
            let o = &mut out[t * c + h * hs..t * c + (h + 1) * hs];
            o.iter_mut().for_each(|x| *x = T::zero());
            for t2 in 0..=t {
                let v = &qkv[t2 * c3 + 2 * c + h * hs..t2 * c3 + 2 * c + (h + 1) * hs];
                axpy(o, row[t2], v);
            }
        }
    }
}

pub fn attention_backward<T: Scalar>(
    dqkv: &mut [T],
    dout: &[T],
    qkv: &[T],
    att: &[T],
    n: usize,
    c: usize,
    nh: usize,
) {
    let hs = c / nh;
    let scale = T::one() / T::lit(hs as f64).sqrt();
    let c3 = 3 * c;
    let mut datt = vec![T::zero(); n];
    let mut dq = vec![T::zero(); hs];
    for h in 0..nh {
        for t in 0..n {
            let row = &att[(h * n + t) * n..(h * n + t + 1) * n];
            let d = &dout[t * c + h * hs..t * c + (h + 1) * hs];
            let mut weighted = T::zero();
            for t2 in 0..=t {
                let voff = t2 * c3 + 2 * c + h * hs;
                datt[t2] = dot(d, &qkv[voff..voff + hs]);
                weighted += row[t2] * datt[t2];
                axpy(&mut dqkv[voff..voff + hs], row[t2], d);
            }
            let qoff = t * c3 + h * hs;
            dq.iter_mut().for_each(|x| *x = T::zero());
            for t2 in 0..=t {
                let dpre = row[t2] * (datt[t2] - weighted) * scale;
                if dpre == T::zero() {
                    continue;
                }
                let koff = t2 * c3 + c + h * hs;
                axpy(&mut dq, dpre, &qkv[koff..koff + hs]);
                axpy(&mut dqkv[koff..koff + hs], dpre, &qkv[qoff..qoff + hs]);
            }
            axpy(&mut dqkv[qoff..qoff + hs], T::one(), &dq);
        }
    }
}

/// Log-softmax of one row, in place.
pub fn log_softmax<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter_mut().for_each(|x| *x -= lse);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let num = (gelu_parts(x + h).0 - gelu_parts(x - h).0) / (2.0 * h);
            assert!((num - gelu_parts(x).1).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut r = vec![1000.0f64, 1001.0, 999.0];
        log_softmax(&mut r);
        let s: f64 = r.iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
