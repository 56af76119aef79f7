//! Slice-level numeric kernels shared by the autodiff tape and the
//! cache-based incremental decoder.

use super::{gemm, Float, MatView, MatViewMut};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact-erf GELU.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::of(FRAC_1_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// In-place numerically stable softmax of one contiguous slice.
pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// log-softmax of one row into `out`.
pub fn log_softmax<T: Float>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Row-wise layer norm over the last dimension. Writes normalized+affine
/// output, and per-row mean and reciprocal standard deviation.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm<T: Float>(
    x: &[T],
    cols: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    let n = T::of(cols as f64);
    for (r, (xr, or)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let mu = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        for c in 0..cols {
            or[c] = (xr[c] - mu) * rs * gamma[c] + beta[c];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

/// Index into a per-head relative-bias row for query `i` and key `j <= i`.
#[inline]
pub fn rel_bucket(i: usize, j: usize, clip: usize) -> usize {
    (i - j).min(clip)
}

/// Geometry of a fused multi-head causal attention call over a packed
/// `[batch*seq, 3*d]` q|k|v buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub d_model: usize,
    pub heads: usize,
    pub clip: usize,
}

impl AttnLayout {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
    pub fn buckets(&self) -> usize {
        self.clip + 1
    }
}

/// Full causal attention forward. `probs` receives `[batch, heads, seq, seq]`
/// attention weights (zeros above the diagonal).
pub fn causal_attention<T: Float>(qkv: &[T], bias: &[T], lay: AttnLayout, out: &mut [T], probs: &mut [T]) {
    let (l, d, dh) = (lay.seq, lay.d_model, lay.d_head());
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let stride = 3 * d;
    for b in 0..lay.batch {
        let rows = &qkv[b * l * stride..(b + 1) * l * stride];
        let orows = &mut out[b * l * d..(b + 1) * l * d];
        for h in 0..lay.heads {
            let p = &mut probs[(b * lay.heads + h) * l * l..(b * lay.heads + h + 1) * l * l];
            let q = MatView::new(&rows[h * dh..], l, dh, stride, 1);
            let k = MatView::new(&rows[d + h * dh..], l, dh, stride, 1);
            let v = MatView::new(&rows[2 * d + h * dh..], l, dh, stride, 1);
            gemm(scale, q, k.t(), T::zero(), MatViewMut::dense(p, l, l));
            let hb = &bias[h * lay.buckets()..(h + 1) * lay.buckets()];
            for i in 0..l {
                let row = &mut p[i * l..(i + 1) * l];
                for (j, s) in row[..=i].iter_mut().enumerate() {
                    *s += hb[rel_bucket(i, j, lay.clip)];
                }
                softmax_in_place(&mut row[..=i]);
                for s in &mut row[i + 1..] {
                    *s = T::zero();
                }
            }
            let o = MatViewMut::new(&mut orows[h * dh..], l, dh, d, 1);
            gemm(T::one(), MatView::dense(p, l, l), v, T::zero(), o);
        }
    }
}

/// Backward of [`causal_attention`]. Accumulates into `dqkv` and `dbias`.
pub fn causal_attention_backward<T: Float>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    lay: AttnLayout,
    dqkv: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let (l, d, dh) = (lay.seq, lay.d_model, lay.d_head());
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let stride = 3 * d;
    let mut dp = vec![T::zero(); l * l];
    let mut dqkv = dqkv;
    let mut dbias = dbias;
    for b in 0..lay.batch {
        let rows = &qkv[b * l * stride..(b + 1) * l * stride];
        let drows = &dout[b * l * d..(b + 1) * l * d];
        for h in 0..lay.heads {
            let p = &probs[(b * lay.heads + h) * l * l..(b * lay.heads + h + 1) * l * l];
            let q = MatView::new(&rows[h * dh..], l, dh, stride, 1);
            let k = MatView::new(&rows[d + h * dh..], l, dh, stride, 1);
            let v = MatView::new(&rows[2 * d + h * dh..], l, dh, stride, 1);
            let dout_h = MatView::new(&drows[h * dh..], l, dh, d, 1);
            // dP = dO·Vᵀ
            gemm(T::one(), dout_h, v.t(), T::zero(), MatViewMut::dense(&mut dp, l, l));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for i in 0..l {
                let pr = &p[i * l..(i + 1) * l];
                let dr = &mut dp[i * l..(i + 1) * l];
                let dot: T = (0..=i).map(|j| pr[j] * dr[j]).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
                for x in &mut dr[i + 1..] {
                    *x = T::zero();
                }
            }
            if let Some(db) = dbias.as_deref_mut() {
                let hb = &mut db[h * lay.buckets()..(h + 1) * lay.buckets()];
                for i in 0..l {
                    for j in 0..=i {
                        hb[rel_bucket(i, j, lay.clip)] += dp[i * l + j];
                    }
                }
            }
            if let Some(dq) = dqkv.as_deref_mut() {
                let dq_rows = &mut dq[b * l * stride..(b + 1) * l * stride];
                // dV = Pᵀ·dO
                {
                    let dv = MatViewMut::new(&mut dq_rows[2 * d + h * dh..], l, dh, stride, 1);
                    gemm(T::one(), MatView::dense(p, l, l).t(), dout_h, T::one(), dv);
                }
                let ds = MatView::dense(&dp, l, l);
                // dQ = scale·dS·K
                {
                    let dqv = MatViewMut::new(&mut dq_rows[h * dh..], l, dh, stride, 1);
                    gemm(scale, ds, k, T::one(), dqv);
                }
                // dK = scale·dSᵀ·Q
                {
                    let dk = MatViewMut::new(&mut dq_rows[d + h * dh..], l, dh, stride, 1);
                    gemm(scale, ds.t(), q, T::one(), dk);
                }
            }
        }
    }
}

/// Single-query attention against cached keys/values (incremental decoding).
///
/// `q` is `[d]`, `keys`/`values` are `[n, d]` rows for positions `0..n`, and
/// the query sits at position `n - 1`.
pub fn attend_cached<T: Float>(
    q: &[T],
    keys: &[T],
    values: &[T],
    n: usize,
    bias: &[T],
    lay: AttnLayout,
    out: &mut [T],
) {
    let (d, dh) = (lay.d_model, lay.d_head());
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let i = n - 1;
    let mut scores = vec![T::zero(); n];
    for h in 0..lay.heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let hb = &bias[h * lay.buckets()..(h + 1) * lay.buckets()];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            let dot: T = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum();
            *s = dot * scale + hb[rel_bucket(i, j, lay.clip)];
        }
        softmax_in_place(&mut scores);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.iter_mut().for_each(|o| *o = T::zero());
        for (j, &w) in scores.iter().enumerate() {
            let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += w * v;
            }
        }
    }
}
