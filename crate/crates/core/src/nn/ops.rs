//! Forward kernels on plain tensors. The autodiff graph records these and
//! supplies the matching backward rules.

use super::tensor::{gemm, same_shape, Float, Operand, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch<F: Float>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rank2<F: Float>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch {
            op,
            left: s.to_vec(),
            right: vec![],
        }),
    }
}

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = rank2("matmul", a)?;
    let (k2, n) = rank2("matmul", b)?;
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        Operand::plain(a.data(), m, k),
        Operand::plain(b.data(), k, n),
        out.data_mut(),
        F::zero(),
    );
    Ok(out)
}

/// `[m, k] x [n, k]^T -> [m, n]`
pub fn matmul_bt<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = rank2("matmul_bt", a)?;
    let (n, k2) = rank2("matmul_bt", b)?;
    if k != k2 {
        return Err(mismatch("matmul_bt", a, b));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        Operand::plain(a.data(), m, k),
        Operand::t(b.data(), n, k),
        out.data_mut(),
        F::zero(),
    );
    Ok(out)
}

pub fn add<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| *x + *y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| *x * *y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds a `[n]` bias to every row of `[m, n]`.
pub fn add_bias<F: Float>(x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, n) = rank2("add_bias", x)?;
    if bias.shape() != [n] {
        return Err(mismatch("add_bias", x, bias));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        row.iter_mut().zip(bias.data()).for_each(|(a, b)| *a += *b);
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    half * x * (F::one() + inner.tanh_act())
}

#[inline]
pub(crate) fn gelu_grad_scalar<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let th = inner.tanh_act();
    let sech2 = F::one() - th * th;
    let dinner = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    half * (F::one() + th) + half * x * sech2 * dinner
}

pub fn gelu<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same numel")
}

/// Row-wise softmax over the last dimension.
pub fn softmax_rows<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, n) = x.dims2()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Fused row-wise log-softmax. A `banned` column is excluded from the
/// normalizer and comes out as exactly `-inf`.
pub fn log_softmax_rows<F: Float>(x: &Tensor<F>, banned: Option<usize>) -> Result<Tensor<F>> {
    let (_, n) = x.dims2()?;
    if let Some(b) = banned {
        if b >= n {
            return Err(Error::invalid(format!("banned column {b} out of {n}")));
        }
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        log_softmax_in_place(row, banned);
    }
    Ok(out)
}

pub(crate) fn log_softmax_in_place<F: Float>(row: &mut [F], banned: Option<usize>) {
    let mut max = F::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if Some(j) != banned && v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for (j, &v) in row.iter().enumerate() {
        if Some(j) != banned {
            sum += (v - max).exp();
        }
    }
    let lse = max + sum.ln();
    for (j, v) in row.iter_mut().enumerate() {
        *v = if Some(j) == banned {
            F::neg_infinity()
        } else {
            *v - lse
        };
    }
}

/// Layer normalization over the last dimension. Also returns the normalized
/// input and per-row reciprocal standard deviations for the backward pass.
pub(crate) fn layer_norm_saved<F: Float>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    let (m, n) = rank2("layer_norm", x)?;
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(mismatch("layer_norm", x, gamma));
    }
    let nf = F::of(n as f64);
    let eps = F::of(LAYER_NORM_EPS);
    let mut out = Tensor::zeros(&[m, n]);
    let mut xhat = vec![F::zero(); m * n];
    let mut rstd = vec![F::zero(); m];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mean = row.iter().copied().sum::<F>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        let o = &mut out.data_mut()[i * n..(i + 1) * n];
        for j in 0..n {
            let h = (row[j] - mean) * r;
            xhat[i * n + j] = h;
            o[j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((out, xhat, rstd))
}

pub fn layer_norm<F: Float>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Result<Tensor<F>> {
    layer_norm_saved(x, gamma, beta).map(|(o, _, _)| o)
}

/// Rows of `table` selected by `ids`.
pub fn embedding<F: Float>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    let (v, d) = rank2("embedding", table)?;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::invalid(format!("embedding index {id} out of {v}")));
        }
        data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::new(vec![ids.len(), d], data)
}

pub fn gather_rows<F: Float>(x: &Tensor<F>, rows: &[usize]) -> Result<Tensor<F>> {
    embedding(x, rows)
}

/// Mean over each `(start, len)` row segment: `[m, d] -> [segments, d]`.
pub fn mean_pool<F: Float>(x: &Tensor<F>, segments: &[(usize, usize)]) -> Result<Tensor<F>> {
    let (m, d) = rank2("mean_pool", x)?;
    let mut out = Tensor::zeros(&[segments.len(), d]);
    for (s, &(start, len)) in segments.iter().enumerate() {
        if len == 0 || start + len > m {
            return Err(Error::invalid(format!(
                "pool segment ({start}, {len}) out of {m} rows"
            )));
        }
        let inv = F::one() / F::of(len as f64);
        let o = &mut out.data_mut()[s * d..(s + 1) * d];
        for r in start..start + len {
            let row = &x.data()[r * d..(r + 1) * d];
            o.iter_mut().zip(row).for_each(|(a, b)| *a += *b * inv);
        }
    }
    Ok(out)
}

/// Packed-sequence layout for self-attention: each `(start, len)` segment
/// attends only within itself, and keys with `key_valid == false` (padding)
/// are never attended to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<(usize, usize)>,
    pub key_valid: Vec<bool>,
}

impl AttnLayout {
    /// One segment per sequence length, all keys valid.
    pub fn packed(lengths: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            segments.push((start, len));
            start += len;
        }
        Self {
            segments,
            key_valid: vec![true; start],
        }
    }

    pub fn rows(&self) -> usize {
        self.key_valid.len()
    }

    pub(crate) fn prob_offsets(&self, heads: usize) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.segments.len());
        let mut total = 0;
        for &(_, len) in &self.segments {
            offsets.push(total);
            total += heads * len * len;
        }
        (offsets, total)
    }
}

/// Bidirectional multi-head scaled dot-product attention over packed rows.
/// Returns the output and the attention probabilities (saved for backward).
pub(crate) fn attention_saved<F: Float>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    layout: &AttnLayout,
) -> Result<(Tensor<F>, Vec<F>)> {
    let (m, d) = rank2("attention", q)?;
    if k.shape() != q.shape() {
        return Err(mismatch("attention", q, k));
    }
    if v.shape() != q.shape() {
        return Err(mismatch("attention", q, v));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    if layout.rows() != m {
        return Err(Error::invalid(format!(
            "layout covers {} rows, input has {m}",
            layout.rows()
        )));
    }
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let (offsets, total) = layout.prob_offsets(heads);
    let mut probs = vec![F::zero(); total];
    let mut out = Tensor::zeros(&[m, d]);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for (s, &(start, len)) in layout.segments.iter().enumerate() {
        let valid = &layout.key_valid[start..start + len];
        if !valid.iter().any(|&b| b) {
            continue;
        }
        for h in 0..heads {
            let c0 = h * dh;
            let base = offsets[s] + h * len * len;
            for i in 0..len {
                let qi = &qd[(start + i) * d + c0..(start + i) * d + c0 + dh];
                let p = &mut probs[base + i * len..base + (i + 1) * len];
                let mut max = F::neg_infinity();
                for j in 0..len {
                    if !valid[j] {
                        continue;
                    }
                    let kj = &kd[(start + j) * d + c0..(start + j) * d + c0 + dh];
                    let dot = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<F>() * scale;
                    p[j] = dot;
                    if dot > max {
                        max = dot;
                    }
                }
                let mut sum = F::zero();
                for j in 0..len {
                    if valid[j] {
                        p[j] = (p[j] - max).exp();
                        sum += p[j];
                    } else {
                        p[j] = F::zero();
                    }
                }
                p.iter_mut().for_each(|x| *x /= sum);
                let o = &mut out.data_mut()[(start + i) * d + c0..(start + i) * d + c0 + dh];
                for j in 0..len {
                    if p[j] == F::zero() {
                        continue;
                    }
                    let vj = &vd[(start + j) * d + c0..(start + j) * d + c0 + dh];
                    let pj = p[j];
                    o.iter_mut().zip(vj).for_each(|(a, b)| *a += pj * *b);
                }
            }
        }
    }
    Ok((out, probs))
}

pub fn attention<F: Float>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    layout: &AttnLayout,
) -> Result<Tensor<F>> {
    attention_saved(q, k, v, heads, layout).map(|(o, _)| o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::<f64>::zeros(&[2, 4]);
        let y = softmax_rows(&x).unwrap();
        assert!(y.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[&[1.0, -3.0, 40.0], &[-100.0, 0.5, 2.0]]);
        let y = softmax_rows(&x).unwrap();
        for r in 0..2 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn log_softmax_banned_column() {
        let x = t(&[&[1.0, 2.0, 3.0]]);
        let y = log_softmax_rows(&x, Some(1)).unwrap();
        assert_eq!(y.data()[1], f64::NEG_INFINITY);
        let s: f64 = [0, 2].iter().map(|&j| y.data()[j].exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(y.data().iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn mean_pool_single_position_is_identity() {
        let x = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let y = mean_pool(&x, &[(1, 1)]).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let y = matmul(&a, &Tensor::identity(3)).unwrap();
        assert_eq!(y, a);
        let y = matmul_bt(&a, &Tensor::identity(3)).unwrap();
        assert_eq!(y, a);
    }

    #[test]
    fn matmul_shape_error_reports_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = t(&[&[1.0, 2.0, 3.0, 4.0]]);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &g, &b).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn attention_ignores_invalid_keys() {
        let q = t(&[&[1.0, 0.0], &[0.0, 1.0], &[5.0, 5.0]]);
        let v = t(&[&[1.0, 2.0], &[3.0, 4.0], &[100.0, 100.0]]);
        let mut layout = AttnLayout::packed(&[3]);
        layout.key_valid[2] = false;
        let out = attention(&q, &q, &v, 1, &layout).unwrap();
        // row 0 mixes only rows 0 and 1
        let r = out.row(0);
        assert!(r[0] >= 1.0 && r[0] <= 3.0);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
