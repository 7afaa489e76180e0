//! Multi-head scaled dot-product attention kernel.
//!
//! The kernel works on already-projected `q`, `k`, `v` matrices whose
//! columns are split evenly between heads. An optional boolean mask of
//! shape `[Lq, Lk]` (shared by every head) blocks positions with an
//! additive `-inf` before the softmax, so blocked weights are exactly zero.

use crate::tensor::gemm;

/// Result of a forward pass: the attended values and the per-head
/// attention weights, laid out `[heads, Lq, Lk]`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Vec<f64>,
    pub probs: Vec<f64>,
}

fn head_columns(x: &[f64], rows: usize, cols: usize, head: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        let start = r * cols + head * dh;
        out.extend_from_slice(&x[start..start + dh]);
    }
    out
}

fn add_head_columns(dst: &mut [f64], src: &[f64], rows: usize, cols: usize, head: usize, dh: usize) {
    for r in 0..rows {
        let start = r * cols + head * dh;
        for (d, s) in dst[start..start + dh].iter_mut().zip(&src[r * dh..(r + 1) * dh]) {
            *d += s;
        }
    }
}

/// Row-wise softmax in place. Entries equal to `-inf` receive weight 0.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    channels: usize,
    heads: usize,
    mask: Option<&[bool]>,
) -> AttentionOutput {
    assert!(heads > 0 && channels.is_multiple_of(heads));
    assert_eq!(q.len(), lq * channels);
    assert_eq!(k.len(), lk * channels);
    assert_eq!(v.len(), lk * channels);
    if let Some(m) = mask {
        assert_eq!(m.len(), lq * lk);
    }
    let dh = channels / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut output = vec![0.0; lq * channels];
    let mut probs = vec![0.0; heads * lq * lk];
    let mut out_h = vec![0.0; lq * dh];
    for h in 0..heads {
        let qh = head_columns(q, lq, channels, h, dh);
        let kh = head_columns(k, lk, channels, h, dh);
        let vh = head_columns(v, lk, channels, h, dh);
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        gemm(lq, dh, lk, &qh, false, &kh, true, p, false);
        for s in p.iter_mut() {
            *s *= scale;
        }
        if let Some(m) = mask {
            for (s, &blocked) in p.iter_mut().zip(m) {
                if blocked {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows(p, lk);
        gemm(lq, lk, dh, p, false, &vh, false, &mut out_h, false);
        add_head_columns(&mut output, &out_h, lq, channels, h, dh);
    }
    AttentionOutput { output, probs }
}

/// Same output as [`forward`] without keeping the `[heads, Lq, Lk]`
/// weights: queries are processed in row blocks of at most
/// `block_entries / Lk` rows, so peak memory stays `O(block_entries)`.
#[allow(clippy::too_many_arguments)]
pub fn forward_blocked(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    channels: usize,
    heads: usize,
    mask: Option<&[bool]>,
    block_entries: usize,
) -> Vec<f64> {
    assert!(heads > 0 && channels.is_multiple_of(heads));
    assert_eq!(q.len(), lq * channels);
    assert_eq!(k.len(), lk * channels);
    assert_eq!(v.len(), lk * channels);
    let dh = channels / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = (block_entries / lk.max(1)).clamp(1, lq.max(1));
    let mut output = vec![0.0; lq * channels];
    let mut scores = vec![0.0; rows * lk];
    let mut out_h = vec![0.0; rows * dh];
    for h in 0..heads {
        let qh = head_columns(q, lq, channels, h, dh);
        let kh = head_columns(k, lk, channels, h, dh);
        let vh = head_columns(v, lk, channels, h, dh);
        for r0 in (0..lq).step_by(rows) {
            let n = rows.min(lq - r0);
            let p = &mut scores[..n * lk];
            gemm(n, dh, lk, &qh[r0 * dh..(r0 + n) * dh], false, &kh, true, p, false);
            for s in p.iter_mut() {
                *s *= scale;
            }
            if let Some(m) = mask {
                for (s, &blocked) in p.iter_mut().zip(&m[r0 * lk..(r0 + n) * lk]) {
                    if blocked {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(p, lk);
            let o = &mut out_h[..n * dh];
            gemm(n, lk, dh, p, false, &vh, false, o, false);
            add_head_columns(&mut output[r0 * channels..(r0 + n) * channels], o, n, channels, h, dh);
        }
    }
    output
}

/// Gradients of the kernel with respect to `q`, `k` and `v` given the
/// upstream gradient of the output and the saved attention weights.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
    lq: usize,
    lk: usize,
    channels: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = channels / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; lq * channels];
    let mut dk = vec![0.0; lk * channels];
    let mut dv = vec![0.0; lk * channels];
    let mut dp = vec![0.0; lq * lk];
    let mut tmp_q = vec![0.0; lq * dh];
    let mut tmp_k = vec![0.0; lk * dh];
    for h in 0..heads {
        let qh = head_columns(q, lq, channels, h, dh);
        let kh = head_columns(k, lk, channels, h, dh);
        let vh = head_columns(v, lk, channels, h, dh);
        let doh = head_columns(grad_out, lq, channels, h, dh);
        let p = &probs[h * lq * lk..(h + 1) * lq * lk];

        gemm(lk, lq, dh, p, true, &doh, false, &mut tmp_k, false);
        add_head_columns(&mut dv, &tmp_k, lk, channels, h, dh);

        gemm(lq, dh, lk, &doh, false, &vh, true, &mut dp, false);
        for (dp_row, p_row) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
            let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
            for (d, &pv) in dp_row.iter_mut().zip(p_row) {
                *d = pv * (*d - dot) * scale;
            }
        }

        gemm(lq, lk, dh, &dp, false, &kh, false, &mut tmp_q, false);
        add_head_columns(&mut dq, &tmp_q, lq, channels, h, dh);
        gemm(lk, lq, dh, &dp, true, &qh, false, &mut tmp_k, false);
        add_head_columns(&mut dk, &tmp_k, lk, channels, h, dh);
    }
    (dq, dk, dv)
}
