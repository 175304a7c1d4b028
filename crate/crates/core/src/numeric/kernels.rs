//! Dense loops behind the tape ops. Row `i` of every row-wise kernel reads
//! only row `i` of its row-indexed inputs, which keeps causal masking exact.

use crate::numeric::float::cast;
use crate::numeric::Float;

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `g[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_grad_a<T: Float>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = dot(grow, brow);
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_grad_b<T: Float>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Max-subtracted softmax of one row.
pub fn softmax<T: Float>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// `(log Σ exp(row), softmax(row))`.
pub fn log_sum_exp_and_softmax<T: Float>(row: &[T]) -> (T, Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v /= z);
    (max + z.ln(), out)
}

/// Log-softmax of one row.
pub fn log_softmax<T: Float>(row: &[T]) -> Vec<T> {
    let (lse, _) = log_sum_exp_and_softmax(row);
    row.iter().map(|&v| v - lse).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let c: T = cast(GELU_C);
    let a: T = cast(GELU_A);
    let half: T = cast(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let c: T = cast(GELU_C);
    let a: T = cast(GELU_A);
    let half: T = cast(0.5);
    let three: T = cast(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Returns `(out[n×d], probs[heads×n×n])`; masked entries of `probs` are zero.
pub fn causal_attention<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale: T = cast(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * n];
    let mut scores = vec![T::zero(); n];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..n {
            let qi = &q[i * d + c0..i * d + c0 + dh];
            let mut max = T::neg_infinity();
            for j in 0..=i {
                let s = dot(qi, &k[j * d + c0..j * d + c0 + dh]) * scale;
                scores[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut z = T::zero();
            for s in scores.iter_mut().take(i + 1) {
                *s = (*s - max).exp();
                z += *s;
            }
            let prow = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let orow = &mut out[i * d + c0..i * d + c0 + dh];
            for j in 0..=i {
                let p = scores[j] / z;
                prow[j] = p;
                let vj = &v[j * d + c0..j * d + c0 + dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn causal_attention_grad<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale: T = cast(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..n {
            let gi = &g[i * d + c0..i * d + c0 + dh];
            let prow = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let mut weighted = T::zero();
            for j in 0..=i {
                let vj = &v[j * d + c0..j * d + c0 + dh];
                dp[j] = dot(gi, vj);
                weighted += prow[j] * dp[j];
                let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                for (o, &gv) in dvj.iter_mut().zip(gi) {
                    *o += prow[j] * gv;
                }
            }
            let qi = &q[i * d + c0..i * d + c0 + dh];
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - weighted) * scale;
                let kj = &k[j * d + c0..j * d + c0 + dh];
                let dqi = &mut dq[i * d + c0..i * d + c0 + dh];
                for (o, &kv) in dqi.iter_mut().zip(kj) {
                    *o += ds * kv;
                }
                let dkj = &mut dk[j * d + c0..j * d + c0 + dh];
                for (o, &qv) in dkj.iter_mut().zip(qi) {
                    *o += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}
