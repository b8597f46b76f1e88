//! Differentiable operations: forward recording and adjoint accumulation.

use super::{Tape, Tensor, TensorError, Var};

/// Recorded operation; holds whatever the adjoint replay needs.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[m×n] + [n]` row broadcast (bias add).
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    /// Entries with `keep == false` are replaced by `fill`.
    MaskFill {
        x: Var,
        keep: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Fused log-softmax + NLL, mean over unmasked positions. `eps` is the
    /// label-smoothing mass spread uniformly over the vocabulary (0 = hard
    /// targets).
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
        eps: f64,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    Transpose(Var),
    Sum(Var),
}

fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// `g [m×n] · b [k×n]ᵀ -> [m×k]`
fn matmul_nt(g: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += grow[p] * brow[p];
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// `a [m×k]ᵀ · g [m×n] -> [k×n]`
fn matmul_tn(a: &[f64], m: usize, k: usize, g: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * grow[j];
            }
        }
    }
    c
}

impl Tape {
    fn require_rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let t = self.value(v);
        if t.shape.len() == 2 {
            Ok((t.shape[0], t.shape[1]))
        } else {
            Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: t.shape.clone(),
            })
        }
    }

    fn out_requires(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.value(*v).requires_grad)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> Var {
        let t = Tensor {
            shape,
            data,
            requires_grad: requires,
            grad: None,
        };
        self.push(t, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.require_rank2("matmul", a)?;
        let (k2, n) = self.require_rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let data = matmul_raw(&self.value(a).data, m, k, &self.value(b).data, n);
        let req = self.out_requires(&[a, b]);
        Ok(self.record(vec![m, n], data, req, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        let req = self.out_requires(&[a, b]);
        Ok(self.record(shape, data, req, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(x).dims2();
        let bt = self.value(bias);
        if bt.shape.len() != 1 || bt.shape[0] != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(x).shape.clone(),
                rhs: bt.shape.clone(),
            });
        }
        let mut data = self.value(x).data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.value(bias).data[j];
            }
        }
        let shape = self.value(x).shape.clone();
        let req = self.out_requires(&[x, bias]);
        Ok(self.record(shape, data, req, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        let req = self.out_requires(&[a, b]);
        Ok(self.record(shape, data, req, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data.iter().map(|v| v * c).collect();
        let shape = self.value(x).shape.clone();
        let req = self.value(x).requires_grad;
        self.record(shape, data, req, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape.clone();
        let req = self.value(x).requires_grad;
        self.record(shape, data, req, Op::Relu(x))
    }

    /// Softmax along `axis` with max-subtraction; on rank-1 tensors the
    /// only valid axis is 0.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.value(x).shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (m, n) = self.value(x).dims2();
        let rowwise = shape.len() == 1 || axis == 1;
        let src = &self.value(x).data;
        let mut data = vec![0.0; src.len()];
        let (groups, len, stride, step) = if rowwise {
            (m, n, n, 1) // group g starts at g*n, elements 1 apart
        } else {
            (n, m, 1, n) // column g starts at g, elements n apart
        };
        for g in 0..groups {
            let base = g * stride;
            let mut max = f64::NEG_INFINITY;
            for e in 0..len {
                max = max.max(src[base + e * step]);
            }
            let mut sum = 0.0;
            for e in 0..len {
                let v = (src[base + e * step] - max).exp();
                data[base + e * step] = v;
                sum += v;
            }
            for e in 0..len {
                data[base + e * step] /= sum;
            }
        }
        let req = self.value(x).requires_grad;
        Ok(self.record(shape, data, req, Op::Softmax { x, axis }))
    }

    /// Replaces entries whose `keep` flag is false with `fill`.
    pub fn mask_fill(&mut self, x: Var, keep: &[bool], fill: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        if keep.len() != t.len() {
            return Err(TensorError::BadMask {
                op: "mask_fill",
                mask: keep.len(),
                expected: t.len(),
            });
        }
        let data = t
            .data
            .iter()
            .zip(keep)
            .map(|(v, k)| if *k { *v } else { fill })
            .collect();
        let shape = t.shape.clone();
        let req = t.requires_grad;
        Ok(self.record(
            shape,
            data,
            req,
            Op::MaskFill {
                x,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then
    /// applies the per-column affine `gain`/`bias` (both rank-1 of width n).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (m, n) = self.value(x).dims2();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let t = self.value(v);
            if t.shape.len() != 1 || t.shape[0] != n {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.value(x).shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
        }
        let src = &self.value(x).data;
        let gd = &self.value(gain).data;
        let bd = &self.value(bias).data;
        let mut data = vec![0.0; src.len()];
        let mut mean = vec![0.0; m];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            mean[i] = mu;
            rstd[i] = r;
            for j in 0..n {
                data[i * n + j] = (row[j] - mu) * r * gd[j] + bd[j];
            }
        }
        let shape = self.value(x).shape.clone();
        let req = self.out_requires(&[x, gain, bias]);
        Ok(self.record(
            shape,
            data,
            req,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    /// Mean over unmasked positions of `-log softmax(logits)[target]`.
    ///
    /// `pad_mask[t] == true` marks position `t` as excluded from the loss.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_mask: &[bool],
    ) -> Result<Var, TensorError> {
        self.cross_entropy_smoothed(logits, targets, pad_mask, 0.0)
    }

    /// [`Tape::cross_entropy`] against smoothed targets: probability mass
    /// `1 - eps` on the gold label and `eps` spread uniformly over the
    /// whole vocabulary.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_mask: &[bool],
        eps: f64,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&eps) {
            return Err(TensorError::BadSmoothing(eps));
        }
        let (t_len, vocab) = self.require_rank2("cross_entropy", logits)?;
        if targets.len() != t_len || pad_mask.len() != t_len {
            return Err(TensorError::BadMask {
                op: "cross_entropy",
                mask: pad_mask.len().min(targets.len()),
                expected: t_len,
            });
        }
        for &id in targets {
            if id >= vocab {
                return Err(TensorError::TargetOutOfRange { id, vocab });
            }
        }
        let count = pad_mask.iter().filter(|m| !**m).count();
        if count == 0 {
            return Err(TensorError::EmptyLossSupport);
        }
        let src = &self.value(logits).data;
        let mut probs = vec![0.0; t_len * vocab];
        let mut loss = 0.0;
        for t in 0..t_len {
            if pad_mask[t] {
                continue;
            }
            let row = &src[t * vocab..(t + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mean_logit = row.iter().sum::<f64>() / vocab as f64;
            loss += lse - (1.0 - eps) * row[targets[t]] - eps * mean_logit;
            for j in 0..vocab {
                probs[t * vocab + j] = (row[j] - lse).exp();
            }
        }
        loss /= count as f64;
        let req = self.value(logits).requires_grad;
        Ok(self.record(
            vec![1],
            vec![loss],
            req,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_mask: pad_mask.to_vec(),
                probs,
                count,
                eps,
            },
        ))
    }

    /// Gathers rows of `table` at `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.require_rank2("embedding", table)?;
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::TargetOutOfRange { id, vocab });
            }
        }
        let src = &self.value(table).data;
        let mut data = vec![0.0; ids.len() * d];
        for (l, &id) in ids.iter().enumerate() {
            data[l * d..(l + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let req = self.value(table).requires_grad;
        Ok(self.record(
            vec![ids.len(), d],
            data,
            req,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m1, n1) = self.require_rank2("concat_rows", a)?;
        let (m2, n2) = self.require_rank2("concat_rows", b)?;
        if n1 != n2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        let req = self.out_requires(&[a, b]);
        Ok(self.record(vec![m1 + m2, n1], data, req, Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let (m, _) = self.require_rank2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.require_rank2("concat_cols", p)?;
            if mp != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.value(p).data;
            for i in 0..m {
                data[i * n + offset..i * n + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let req = self.out_requires(parts);
        Ok(self.record(vec![m, n], data, req, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.require_rank2("slice_cols", x)?;
        if start + len > n {
            return Err(TensorError::BadAxis {
                op: "slice_cols",
                axis: start + len,
                shape: self.value(x).shape.clone(),
            });
        }
        let src = &self.value(x).data;
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let req = self.value(x).requires_grad;
        Ok(self.record(vec![m, len], data, req, Op::SliceCols { x, start, len }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.require_rank2("transpose", x)?;
        let src = &self.value(x).data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let req = self.value(x).requires_grad;
        Ok(self.record(vec![n, m], data, req, Op::Transpose(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        let req = self.value(x).requires_grad;
        self.record(vec![1], vec![total], req, Op::Sum(x))
    }
}

/// Adds `delta` into the gradient buffer of `v` if it participates in
/// differentiation (buffers were allocated for every `requires_grad` node).
fn accumulate(tape: &mut Tape, v: Var, delta: &[f64]) {
    if let Some(g) = tape.nodes[v.0].tensor.grad.as_mut() {
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

fn out_grad(tape: &Tape, idx: usize) -> Vec<f64> {
    tape.nodes[idx]
        .tensor
        .grad
        .clone()
        .expect("adjoint replay visits only nodes with gradient buffers")
}

pub(crate) fn accumulate_adjoints(tape: &mut Tape, idx: usize, op: &Op) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let g = out_grad(tape, idx);
            let (m, k) = tape.value(*a).dims2();
            let (_, n) = tape.value(*b).dims2();
            let da = matmul_nt(&g, m, n, &tape.value(*b).data, k);
            let db = matmul_tn(&tape.value(*a).data, m, k, &g, n);
            accumulate(tape, *a, &da);
            accumulate(tape, *b, &db);
        }
        Op::Add(a, b) => {
            let g = out_grad(tape, idx);
            accumulate(tape, *a, &g);
            accumulate(tape, *b, &g);
        }
        Op::AddRow(x, bias) => {
            let g = out_grad(tape, idx);
            let (m, n) = tape.value(*x).dims2();
            accumulate(tape, *x, &g);
            let mut db = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    db[j] += g[i * n + j];
                }
            }
            accumulate(tape, *bias, &db);
        }
        Op::Mul(a, b) => {
            let g = out_grad(tape, idx);
            let da: Vec<f64> = g
                .iter()
                .zip(&tape.value(*b).data)
                .map(|(gi, bi)| gi * bi)
                .collect();
            let db: Vec<f64> = g
                .iter()
                .zip(&tape.value(*a).data)
                .map(|(gi, ai)| gi * ai)
                .collect();
            accumulate(tape, *a, &da);
            accumulate(tape, *b, &db);
        }
        Op::Scale(x, c) => {
            let g = out_grad(tape, idx);
            let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
            accumulate(tape, *x, &dx);
        }
        Op::Relu(x) => {
            let g = out_grad(tape, idx);
            let dx: Vec<f64> = g
                .iter()
                .zip(&tape.value(*x).data)
                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(tape, *x, &dx);
        }
        Op::Softmax { x, axis } => {
            let g = out_grad(tape, idx);
            let y = &tape.nodes[idx].tensor;
            let (m, n) = y.dims2();
            let rowwise = y.shape.len() == 1 || *axis == 1;
            let (groups, len, stride, step) = if rowwise { (m, n, n, 1) } else { (n, m, 1, n) };
            let mut dx = vec![0.0; y.len()];
            for gr in 0..groups {
                let base = gr * stride;
                let mut dot = 0.0;
                for e in 0..len {
                    let p = base + e * step;
                    dot += g[p] * y.data[p];
                }
                for e in 0..len {
                    let p = base + e * step;
                    dx[p] = y.data[p] * (g[p] - dot);
                }
            }
            accumulate(tape, *x, &dx);
        }
        Op::MaskFill { x, keep } => {
            let g = out_grad(tape, idx);
            let dx: Vec<f64> = g
                .iter()
                .zip(keep)
                .map(|(gi, k)| if *k { *gi } else { 0.0 })
                .collect();
            accumulate(tape, *x, &dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let g = out_grad(tape, idx);
            let (m, n) = tape.value(*x).dims2();
            let xd = &tape.value(*x).data;
            let gd = &tape.value(*gain).data;
            let mut dx = vec![0.0; m * n];
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            for i in 0..m {
                let (mu, r) = (mean[i], rstd[i]);
                let mut sum_gh = 0.0;
                let mut sum_ghx = 0.0;
                for j in 0..n {
                    let xhat = (xd[i * n + j] - mu) * r;
                    let gh = g[i * n + j] * gd[j];
                    sum_gh += gh;
                    sum_ghx += gh * xhat;
                    dgain[j] += g[i * n + j] * xhat;
                    dbias[j] += g[i * n + j];
                }
                let inv_n = 1.0 / n as f64;
                for j in 0..n {
                    let xhat = (xd[i * n + j] - mu) * r;
                    let gh = g[i * n + j] * gd[j];
                    dx[i * n + j] = r * (gh - inv_n * sum_gh - xhat * inv_n * sum_ghx);
                }
            }
            accumulate(tape, *x, &dx);
            accumulate(tape, *gain, &dgain);
            accumulate(tape, *bias, &dbias);
        }
        Op::CrossEntropy {
            logits,
            targets,
            pad_mask,
            probs,
            count,
            eps,
        } => {
            let g0 = out_grad(tape, idx)[0];
            let (t_len, vocab) = tape.value(*logits).dims2();
            let scale = g0 / *count as f64;
            let uniform = eps / vocab as f64;
            let mut dl = vec![0.0; t_len * vocab];
            for t in 0..t_len {
                if pad_mask[t] {
                    continue;
                }
                for j in 0..vocab {
                    // smoothed target distribution (1-eps)·onehot + eps/V
                    let hard = if j == targets[t] { 1.0 - eps } else { 0.0 };
                    let q = hard + uniform;
                    dl[t * vocab + j] = scale * (probs[t * vocab + j] - q);
                }
            }
            accumulate(tape, *logits, &dl);
        }
        Op::Embedding { table, ids } => {
            let g = out_grad(tape, idx);
            let (_, d) = tape.value(*table).dims2();
            let table_len = tape.value(*table).len();
            let mut dt = vec![0.0; table_len];
            for (l, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g[l * d + j];
                }
            }
            accumulate(tape, *table, &dt);
        }
        Op::ConcatRows(a, b) => {
            let g = out_grad(tape, idx);
            let a_len = tape.value(*a).len();
            accumulate(tape, *a, &g[..a_len]);
            accumulate(tape, *b, &g[a_len..]);
        }
        Op::ConcatCols(parts) => {
            let g = out_grad(tape, idx);
            let (m, n) = tape.nodes[idx].tensor.dims2();
            let mut offset = 0;
            for &p in parts {
                let (_, w) = tape.value(p).dims2();
                let mut dp = vec![0.0; m * w];
                for i in 0..m {
                    dp[i * w..(i + 1) * w]
                        .copy_from_slice(&g[i * n + offset..i * n + offset + w]);
                }
                accumulate(tape, p, &dp);
                offset += w;
            }
        }
        Op::SliceCols { x, start, len } => {
            let g = out_grad(tape, idx);
            let (m, n) = tape.value(*x).dims2();
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                dx[i * n + start..i * n + start + len]
                    .copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            accumulate(tape, *x, &dx);
        }
        Op::Transpose(x) => {
            let g = out_grad(tape, idx);
            let (m, n) = tape.value(*x).dims2();
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            accumulate(tape, *x, &dx);
        }
        Op::Sum(x) => {
            let g0 = out_grad(tape, idx)[0];
            let dx = vec![g0; tape.value(*x).len()];
            accumulate(tape, *x, &dx);
        }
    }
}
