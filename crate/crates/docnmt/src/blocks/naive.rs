//! Brute-force reference computations on raw slices, used as oracles by
//! tests. Deliberately written element-by-element, independent of the
//! tape kernels.

use super::AttentionParams;
use crate::tensor::Tensor;

pub fn linear(x: &[f64], m: usize, k: usize, w: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = b[j];
            for p in 0..k {
                s += x[i * k + p] * w[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], m: usize, n: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            out[i * n + j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Full multi-head attention: projections, per-head masked softmax
/// attention, concatenation, output projection.
pub fn multi_head_attention(
    q: &[f64],
    lq: usize,
    kv: &[f64],
    lk: usize,
    d: usize,
    heads: usize,
    keep: &[bool],
    p: &AttentionParams<Tensor>,
) -> Vec<f64> {
    let qp = linear(q, lq, d, &p.query.weight.data, d, &p.query.bias.data);
    let kp = linear(kv, lk, d, &p.key.weight.data, d, &p.key.bias.data);
    let vp = linear(kv, lk, d, &p.value.weight.data, d, &p.value.bias.data);
    let dh = d / heads;
    let mut merged = vec![0.0; lq * d];
    for h in 0..heads {
        for i in 0..lq {
            let mut scores = vec![0.0; lk];
            for j in 0..lk {
                let mut dot = 0.0;
                for e in 0..dh {
                    dot += qp[i * d + h * dh + e] * kp[j * d + h * dh + e];
                }
                scores[j] = if keep[i * lk + j] {
                    dot / (dh as f64).sqrt()
                } else {
                    -1e30
                };
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in 0..dh {
                let mut acc = 0.0;
                for j in 0..lk {
                    acc += exps[j] / z * vp[j * d + h * dh + e];
                }
                merged[i * d + h * dh + e] = acc;
            }
        }
    }
    linear(&merged, lq, d, &p.output.weight.data, d, &p.output.bias.data)
}
