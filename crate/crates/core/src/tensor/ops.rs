use std::rc::Rc;

use rand::Rng;

use super::gemm::gemm;
use super::{note_zero_norm_row, numel, OpKind, Tensor};
use crate::error::{Error, Result};
use crate::store::Csr;

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn require_2d(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{op}: expected a matrix, got shape {s:?}"))),
    }
}

/// Number of times `b` repeats inside `a` when `b`'s shape is a suffix of `a`'s.
fn broadcast_repeats(op: &str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(mismatch(op, a, b));
    }
    Ok(numel(a) / numel(b).max(1))
}

fn reduce_repeats(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for chunk in g.chunks(inner) {
        out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d("matmul", self)?;
        let (k2, n) = require_2d("matmul", other)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), (k as isize, 1), &other.data(), (n as isize, 1), &mut out, false);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(OpKind::MatMul, vec![m, n], out, &[self, other], move |g| {
            let ga = a.requires_grad().then(|| {
                // G (m x n) * B^T (n x k)
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, (n as isize, 1), &b.data(), (1, n as isize), &mut ga, false);
                ga
            });
            let gb = b.requires_grad().then(|| {
                // A^T (k x m) * G (m x n)
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, &a.data(), (1, k as isize), g, (n as isize, 1), &mut gb, false);
                gb
            });
            vec![ga, gb]
        }))
    }

    fn elementwise(
        &self,
        other: &Tensor,
        kind: OpKind,
        name: &str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let inner = other.numel();
        broadcast_repeats(name, self.shape(), other.shape())?;
        let out: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            a.iter()
                .enumerate()
                .map(|(i, &x)| f(x, b[i % inner]))
                .collect()
        };
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(kind, self.shape().to_vec(), out, &[self, other], move |g| {
            match kind {
                OpKind::Add => vec![
                    a.requires_grad().then(|| g.to_vec()),
                    b.requires_grad().then(|| reduce_repeats(g, inner)),
                ],
                OpKind::Sub => vec![
                    a.requires_grad().then(|| g.to_vec()),
                    b.requires_grad()
                        .then(|| reduce_repeats(g, inner).into_iter().map(|x| -x).collect()),
                ],
                OpKind::Mul => {
                    let (ad, bd) = (a.data(), b.data());
                    let ga = a
                        .requires_grad()
                        .then(|| g.iter().enumerate().map(|(i, gi)| gi * bd[i % inner]).collect());
                    let gb = b.requires_grad().then(|| {
                        let prod: Vec<f64> = g.iter().zip(ad.iter()).map(|(gi, x)| gi * x).collect();
                        reduce_repeats(&prod, inner)
                    });
                    vec![ga, gb]
                }
                _ => unreachable!(),
            }
        }))
    }

    /// Elementwise sum; `other` may broadcast over leading dimensions.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, OpKind::Add, "add", |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, OpKind::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, OpKind::Mul, "mul", |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(OpKind::Scale, self.shape().to_vec(), out, &[self], move |g| {
            vec![Some(g.iter().map(|x| x * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(OpKind::AddScalar, self.shape().to_vec(), out, &[self], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(OpKind::Reshape, shape.to_vec(), self.to_vec(), &[self], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Concatenation of matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let dims = parts
            .iter()
            .map(|t| require_2d("concat", t))
            .collect::<Result<Vec<_>>>()?;
        let owned: Vec<Tensor> = parts.iter().map(|&t| t.clone()).collect();
        match axis {
            0 => {
                let c = dims[0].1;
                if let Some(i) = dims.iter().position(|d| d.1 != c) {
                    return Err(mismatch("concat", parts[0].shape(), parts[i].shape()));
                }
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let mut out = Vec::with_capacity(rows * c);
                for t in parts {
                    out.extend_from_slice(&t.data());
                }
                let sizes: Vec<usize> = owned.iter().map(Tensor::numel).collect();
                Ok(Tensor::from_op(OpKind::Concat, vec![rows, c], out, parts, move |g| {
                    let mut off = 0;
                    sizes
                        .iter()
                        .map(|&s| {
                            let piece = g[off..off + s].to_vec();
                            off += s;
                            Some(piece)
                        })
                        .collect()
                }))
            }
            1 => {
                let r = dims[0].0;
                if let Some(i) = dims.iter().position(|d| d.0 != r) {
                    return Err(mismatch("concat", parts[0].shape(), parts[i].shape()));
                }
                let widths: Vec<usize> = dims.iter().map(|d| d.1).collect();
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(r * total);
                let datas: Vec<_> = parts.iter().map(|t| t.data()).collect();
                for row in 0..r {
                    for (d, &w) in datas.iter().zip(&widths) {
                        out.extend_from_slice(&d[row * w..(row + 1) * w]);
                    }
                }
                drop(datas);
                Ok(Tensor::from_op(OpKind::Concat, vec![r, total], out, parts, move |g| {
                    let mut grads: Vec<Vec<f64>> =
                        widths.iter().map(|&w| Vec::with_capacity(r * w)).collect();
                    for row in 0..r {
                        let mut off = row * total;
                        for (gp, &w) in grads.iter_mut().zip(&widths) {
                            gp.extend_from_slice(&g[off..off + w]);
                            off += w;
                        }
                    }
                    grads.into_iter().map(Some).collect()
                }))
            }
            _ => Err(Error::Shape(format!("concat axis {axis} unsupported for matrices"))),
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = require_2d("slice_rows", self)?;
        if start > end || end > r {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of shape {:?}", self.shape())));
        }
        let out = self.data()[start * c..end * c].to_vec();
        Ok(Tensor::from_op(OpKind::SliceRows, vec![end - start, c], out, &[self], move |g| {
            let mut full = vec![0.0; r * c];
            full[start * c..end * c].copy_from_slice(g);
            vec![Some(full)]
        }))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = require_2d("slice_cols", self)?;
        if start > end || end > c {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of shape {:?}", self.shape())));
        }
        let w = end - start;
        let d = self.data();
        let out = (0..r)
            .flat_map(|i| d[i * c + start..i * c + end].iter().copied())
            .collect();
        drop(d);
        Ok(Tensor::from_op(OpKind::SliceCols, vec![r, w], out, &[self], move |g| {
            let mut full = vec![0.0; r * c];
            for i in 0..r {
                full[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            vec![Some(full)]
        }))
    }

    /// Row gather (`embedding_lookup`); repeated ids scatter-add on the way back.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (r, c) = require_2d("gather_rows", self)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!(
                "gather_rows: index {bad} out of range for shape {:?}",
                self.shape()
            )));
        }
        let d = self.data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        drop(d);
        let ids: Rc<[usize]> = ids.into();
        Ok(Tensor::from_op(OpKind::GatherRows, vec![ids.len(), c], out, &[self], move |g| {
            let mut full = vec![0.0; r * c];
            for (k, &i) in ids.iter().enumerate() {
                full[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(&g[k * c..(k + 1) * c])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(full)]
        }))
    }

    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        self.gather_rows(ids)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = require_2d("transpose", self)?;
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        drop(d);
        Ok(Tensor::from_op(OpKind::Transpose, vec![c, r], out, &[self], move |g| {
            let mut back = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    back[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(back)]
        }))
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = require_2d("softmax_rows", self)?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let probs: Rc<[f64]> = out.clone().into();
        Ok(Tensor::from_op(OpKind::SoftmaxRows, vec![r, c], out, &[self], move |g| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let p = &probs[i * c..(i + 1) * c];
                let gi = &g[i * c..(i + 1) * c];
                let dot: f64 = p.iter().zip(gi).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx[i * c + j] = p[j] * (gi[j] - dot);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain * x + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = require_2d("layer_norm", self)?;
        if gain.numel() != c || bias.numel() != c {
            return Err(mismatch("layer_norm", self.shape(), gain.shape()));
        }
        let x = self.data();
        let (gd, bd) = (gain.data(), bias.data());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = gd[j] * h + bd[j];
            }
        }
        drop((x, gd, bd));
        let gain_c = gain.clone();
        Ok(Tensor::from_op(OpKind::LayerNorm, vec![r, c], out, &[self, gain, bias], move |g| {
            let gd = gain_c.data();
            let mut dx = vec![0.0; r * c];
            let mut dgain = vec![0.0; c];
            let mut dbias = vec![0.0; c];
            for i in 0..r {
                let gi = &g[i * c..(i + 1) * c];
                let hi = &xhat[i * c..(i + 1) * c];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..c {
                    let dh = gi[j] * gd[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hi[j];
                    dgain[j] += gi[j] * hi[j];
                    dbias[j] += gi[j];
                }
                mean_dh /= c as f64;
                mean_dh_h /= c as f64;
                for j in 0..c {
                    let dh = gi[j] * gd[j];
                    dx[i * c + j] = inv_std[i] * (dh - mean_dh - hi[j] * mean_dh_h);
                }
            }
            vec![Some(dx), Some(dgain), Some(dbias)]
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let src: Rc<[f64]> = self.to_vec().into();
        let out = src.iter().map(|&x| gelu_fwd(x)).collect();
        Tensor::from_op(OpKind::Gelu, self.shape().to_vec(), out, &[self], move |g| {
            vec![Some(g.iter().zip(src.iter()).map(|(gi, &x)| gi * gelu_grad(x)).collect())]
        })
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x.max(0.0)).collect();
        let active: Rc<[bool]> = self.data().iter().map(|&x| x > 0.0).collect();
        Tensor::from_op(OpKind::Relu, self.shape().to_vec(), out, &[self], move |g| {
            vec![Some(
                g.iter()
                    .zip(active.iter())
                    .map(|(gi, &a)| if a { *gi } else { 0.0 })
                    .collect(),
            )]
        })
    }

    /// Inverted dropout; survivors are scaled by `1 / (1 - p)`. Identity when
    /// not training or when `p == 0`.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng, training: bool) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Rc<[f64]> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op(OpKind::Dropout, self.shape().to_vec(), out, &[self], move |g| {
            vec![Some(g.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect())]
        }))
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(OpKind::Sum, Vec::new(), vec![s], &[self], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(OpKind::Mean, Vec::new(), vec![s], &[self], move |g| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// Per-row negative log-likelihood `-log softmax(logits)[target]`, shape `[B, 1]`.
    pub fn nll_rows(&self, targets: &[usize]) -> Result<Tensor> {
        let (b, c) = require_2d("nll_rows", self)?;
        if targets.len() != b {
            return Err(Error::Shape(format!(
                "nll_rows: {} targets for {b} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target {t} out of range for {c} classes")));
        }
        let mut probs = self.to_vec();
        let mut out = vec![0.0; b];
        for i in 0..b {
            let row = &mut probs[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out[i] = lse - row[targets[i]];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let targets: Rc<[usize]> = targets.into();
        Ok(Tensor::from_op(OpKind::NllRows, vec![b, 1], out, &[self], move |g| {
            let mut d = probs.clone();
            for i in 0..b {
                d[i * c + targets[i]] -= 1.0;
                d[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= g[i]);
            }
            vec![Some(d)]
        }))
    }

    /// Mean cross-entropy over rows, computed with a stable log-sum-exp.
    pub fn cross_entropy_from_logits(&self, targets: &[usize]) -> Result<Tensor> {
        Ok(self.nll_rows(targets)?.mean())
    }

    /// Row-wise cosine similarity, shape `[m, 1]`. A row pair with a zero
    /// norm has similarity 0 and passes no gradient.
    pub fn cosine_rows(&self, other: &Tensor) -> Result<Tensor> {
        let (m, d) = require_2d("cosine", self)?;
        if self.shape() != other.shape() {
            return Err(mismatch("cosine", self.shape(), other.shape()));
        }
        let (a, b) = (self.to_vec(), other.to_vec());
        let mut out = vec![0.0; m];
        let mut norms = vec![(0.0, 0.0); m];
        for i in 0..m {
            let (ra, rb) = (&a[i * d..(i + 1) * d], &b[i * d..(i + 1) * d]);
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[i] = (na, nb);
            if na == 0.0 || nb == 0.0 {
                note_zero_norm_row();
                continue;
            }
            out[i] = ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        }
        let cos: Rc<[f64]> = out.clone().into();
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(OpKind::Cosine, vec![m, 1], out, &[self, other], move |g| {
            let mut ga = vec![0.0; m * d];
            let mut gb = vec![0.0; m * d];
            for i in 0..m {
                let (na, nb) = norms[i];
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                for j in 0..d {
                    let (x, y) = (a[i * d + j], b[i * d + j]);
                    ga[i * d + j] = g[i] * (y / (na * nb) - cos[i] * x / (na * na));
                    gb[i * d + j] = g[i] * (x / (na * nb) - cos[i] * y / (nb * nb));
                }
            }
            vec![
                ac.requires_grad().then_some(ga),
                bc.requires_grad().then_some(gb),
            ]
        }))
    }

    /// Each row divided by its L2 norm; zero rows stay zero.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let (m, d) = require_2d("normalize_rows", self)?;
        let x = self.to_vec();
        let norms: Vec<f64> = x.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let out: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| if norms[i / d] > 0.0 { v / norms[i / d] } else { 0.0 })
            .collect();
        let y: Rc<[f64]> = out.clone().into();
        Ok(Tensor::from_op(OpKind::NormalizeRows, vec![m, d], out, &[self], move |g| {
            let mut dx = vec![0.0; m * d];
            for i in 0..m {
                if norms[i] == 0.0 {
                    continue;
                }
                let (yi, gi) = (&y[i * d..(i + 1) * d], &g[i * d..(i + 1) * d]);
                let dot: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dx[i * d + j] = (gi[j] - yi[j] * dot) / norms[i];
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Mean over rows of the squared L2 distance between corresponding rows.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(mismatch("mse", self.shape(), other.shape()));
        }
        let rows = self.rows().max(1) as f64;
        let diff: Rc<[f64]> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(x, y)| x - y)
            .collect();
        let v = diff.iter().map(|x| x * x).sum::<f64>() / rows;
        Ok(Tensor::from_op(OpKind::Mse, Vec::new(), vec![v], &[self, other], move |g| {
            let ga: Vec<f64> = diff.iter().map(|x| 2.0 * x * g[0] / rows).collect();
            let gb = ga.iter().map(|x| -x).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    /// `adj * self` for a constant sparse matrix; gradient flows to `self` only.
    pub fn csr_matmul(&self, adj: &Adjacency) -> Result<Tensor> {
        let (n, d) = require_2d("csr_matmul", self)?;
        if n != adj.n_nodes() {
            return Err(Error::Shape(format!(
                "csr_matmul: adjacency over {} nodes, features {:?}",
                adj.n_nodes(),
                self.shape()
            )));
        }
        let x = self.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let dst = &mut out[i * d..(i + 1) * d];
            for k in adj.offsets[i]..adj.offsets[i + 1] {
                let (j, w) = (adj.cols[k], adj.vals[k]);
                dst.iter_mut()
                    .zip(&x[j * d..(j + 1) * d])
                    .for_each(|(o, v)| *o += w * v);
            }
        }
        drop(x);
        let adj = adj.clone();
        Ok(Tensor::from_op(OpKind::CsrMatMul, vec![n, d], out, &[self], move |g| {
            let mut dx = vec![0.0; n * d];
            for i in 0..n {
                for k in adj.offsets[i]..adj.offsets[i + 1] {
                    let (j, w) = (adj.cols[k], adj.vals[k]);
                    dx[j * d..(j + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(o, v)| *o += w * v);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` hold the rows of all sequences back to back; sequence `b`
    /// occupies rows `layout.offsets[b]..layout.offsets[b + 1]` and attends
    /// only within itself, so padding never exists in this representation.
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, layout: &AttentionLayout) -> Result<Tensor> {
        let (t, d) = require_2d("attention", q)?;
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(mismatch("attention", q.shape(), k.shape()));
        }
        if layout.offsets.last() != Some(&t) || layout.n_heads == 0 || d % layout.n_heads != 0 {
            return Err(Error::Shape(format!(
                "attention: layout does not fit shape {:?} with {} heads",
                q.shape(),
                layout.n_heads
            )));
        }
        let probs = attention_probs_packed(&q.data(), &k.data(), d, layout);
        let dh = d / layout.n_heads;
        let vd = v.data();
        let mut out = vec![0.0; t * d];
        let mut p_off = 0;
        for b in 0..layout.offsets.len() - 1 {
            let (o, len) = (layout.offsets[b], layout.offsets[b + 1] - layout.offsets[b]);
            for h in 0..layout.n_heads {
                let p = &probs[p_off..p_off + len * len];
                p_off += len * len;
                for i in 0..len {
                    let dst = &mut out[(o + i) * d + h * dh..(o + i) * d + (h + 1) * dh];
                    for j in 0..len {
                        let w = p[i * len + j];
                        let src = &vd[(o + j) * d + h * dh..(o + j) * d + (h + 1) * dh];
                        dst.iter_mut().zip(src).for_each(|(a, s)| *a += w * s);
                    }
                }
            }
        }
        drop(vd);
        let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
        let layout = layout.clone();
        Ok(Tensor::from_op(OpKind::Attention, vec![t, d], out, &[q, k, v], move |g| {
            let (qd, kd, vd) = (qc.data(), kc.data(), vc.data());
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut p_off = 0;
            let mut dp = Vec::new();
            for b in 0..layout.offsets.len() - 1 {
                let (o, len) = (layout.offsets[b], layout.offsets[b + 1] - layout.offsets[b]);
                for h in 0..layout.n_heads {
                    let p = &probs[p_off..p_off + len * len];
                    p_off += len * len;
                    let col = |row: usize| (o + row) * d + h * dh..(o + row) * d + (h + 1) * dh;
                    dp.clear();
                    dp.resize(len * len, 0.0);
                    for i in 0..len {
                        let gi = &g[col(i)];
                        for j in 0..len {
                            let vj = &vd[col(j)];
                            dp[i * len + j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            let w = p[i * len + j];
                            dv[col(j)].iter_mut().zip(gi).for_each(|(a, b)| *a += w * b);
                        }
                    }
                    for i in 0..len {
                        let row = &p[i * len..(i + 1) * len];
                        let dot: f64 = row.iter().zip(&dp[i * len..(i + 1) * len]).map(|(a, b)| a * b).sum();
                        for j in 0..len {
                            let ds = row[j] * (dp[i * len + j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let (ri, rj) = (col(i), col(j));
                            for c in 0..dh {
                                dq[ri.start + c] += ds * kd[rj.start + c];
                                dk[rj.start + c] += ds * qd[ri.start + c];
                            }
                        }
                    }
                }
            }
            vec![Some(dq), Some(dk), Some(dv)]
        }))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

/// Attention probabilities for every (sequence, head), each a `len x len`
/// block, concatenated in sequence-major order.
pub fn attention_probs(q: &Tensor, k: &Tensor, layout: &AttentionLayout) -> Result<Vec<f64>> {
    let (t, d) = require_2d("attention", q)?;
    if k.shape() != q.shape() || layout.offsets.last() != Some(&t) || d % layout.n_heads.max(1) != 0 {
        return Err(mismatch("attention", q.shape(), k.shape()));
    }
    Ok(attention_probs_packed(&q.data(), &k.data(), d, layout))
}

fn attention_probs_packed(q: &[f64], k: &[f64], d: usize, layout: &AttentionLayout) -> Vec<f64> {
    let dh = d / layout.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let total: usize = layout
        .offsets
        .windows(2)
        .map(|w| (w[1] - w[0]) * (w[1] - w[0]) * layout.n_heads)
        .sum();
    let mut probs = Vec::with_capacity(total);
    for w in layout.offsets.windows(2) {
        let (o, len) = (w[0], w[1] - w[0]);
        for h in 0..layout.n_heads {
            for i in 0..len {
                let qi = &q[(o + i) * d + h * dh..(o + i) * d + (h + 1) * dh];
                let start = probs.len();
                for j in 0..len {
                    let kj = &k[(o + j) * d + h * dh..(o + j) * d + (h + 1) * dh];
                    probs.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
                }
                softmax_in_place(&mut probs[start..]);
            }
        }
    }
    probs
}

/// Sequence boundaries and head count for [`Tensor::attention`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub offsets: Vec<usize>,
    pub n_heads: usize,
}

/// Weighted sparse matrix used by [`Tensor::csr_matmul`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    offsets: Rc<[usize]>,
    cols: Rc<[usize]>,
    vals: Rc<[f64]>,
}

impl Adjacency {
    /// Symmetric GCN normalization `D^{-1/2} (A + I) D^{-1/2}` of a
    /// symmetric adjacency.
    pub fn gcn_normalized(csr: &Csr) -> Adjacency {
        let n = csr.n_nodes();
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|v| 1.0 / ((csr.degree(v) + 1) as f64).sqrt())
            .collect();
        let mut offsets = vec![0];
        let mut cols = Vec::with_capacity(csr.n_slots() + n);
        let mut vals = Vec::with_capacity(csr.n_slots() + n);
        for i in 0..n {
            let mut row: Vec<usize> = csr.neighbors(i).to_vec();
            row.push(i);
            row.sort_unstable();
            for j in row {
                cols.push(j);
                vals.push(inv_sqrt[i] * inv_sqrt[j]);
            }
            offsets.push(cols.len());
        }
        Adjacency {
            offsets: offsets.into(),
            cols: cols.into(),
            vals: vals.into(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_nodes();
        let mut m = vec![vec![0.0; n]; n];
        for (i, row) in m.iter_mut().enumerate() {
            for k in self.offsets[i]..self.offsets[i + 1] {
                row[self.cols[k]] = self.vals[k];
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::gradcheck::{check_gradients, random_tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(eye.matmul(&x).unwrap().to_vec(), x.to_vec());
        let err = x.matmul(&x).unwrap_err().to_string();
        assert!(err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn concat_columns_shape() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 5]);
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap().shape(), &[2, 8]);
        assert!(Tensor::concat(&[&a, &Tensor::zeros(&[3, 1])], 1).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[1, 3], &[0., 0., 0.]).softmax_rows().unwrap().to_vec();
        for p in s {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[1, 3], &[1000., 0., 0.]).softmax_rows().unwrap().to_vec();
        assert!(s.iter().all(|x| x.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-300);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = t(&[1, 4], &[3.0; 4]);
        let y = x
            .layer_norm(&t(&[4], &[1.0; 4]), &t(&[4], &[0.0; 4]), 1e-5)
            .unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_modes() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let mut r = rng::stream(0, &[]);
        assert!(x.dropout(0.0, &mut r, true).unwrap().same_node(&x));
        assert!(x.dropout(0.7, &mut r, false).unwrap().same_node(&x));
        assert!(x.dropout(1.0, &mut r, true).is_err());
        let big = Tensor::from_vec(&[1, 10_000], vec![1.0; 10_000]).unwrap();
        let y = big.dropout(0.2, &mut r, true).unwrap().to_vec();
        assert!(y.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        let mean = y.iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[4, 8]);
        let ce = uniform.cross_entropy_from_logits(&[0, 3, 7, 1]).unwrap().item();
        assert!((ce - 8f64.ln()).abs() < 1e-12);
        let mut v = vec![0.0; 8];
        v[2] = 30.0;
        let peaked = t(&[1, 8], &v);
        assert!(peaked.cross_entropy_from_logits(&[2]).unwrap().item() < 1e-11);
        assert!(peaked.cross_entropy_from_logits(&[8]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = t(&[2, 2], &[1., 2., 1., 0.]);
        let b = t(&[2, 2], &[1., 2., 0., 1.]);
        let c = a.cosine_rows(&b).unwrap().to_vec();
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert_eq!(c[1], 0.0);
        let before = crate::tensor::zero_norm_rows_seen();
        let z = Tensor::parameter(&[1, 2], vec![0.0, 0.0]).unwrap();
        let w = Tensor::parameter(&[1, 2], vec![1.0, 1.0]).unwrap();
        let s = z.cosine_rows(&w).unwrap();
        assert_eq!(s.item(), 0.0);
        s.sum().backward().unwrap();
        assert_eq!(z.grad().unwrap(), vec![0.0, 0.0]);
        assert!(crate::tensor::zero_norm_rows_seen() > before);
    }

    #[test]
    fn mse_examples() {
        let a = t(&[1, 4], &[1., 2., 3., 4.]);
        assert_eq!(a.mse(&a).unwrap().item(), 0.0);
        let b = t(&[1, 4], &[0., 1., 2., 3.]);
        assert_eq!(a.mse(&b).unwrap().item(), 4.0);
        assert!(a.mse(&Tensor::zeros(&[4, 1])).is_err());
    }

    #[test]
    fn gradients_of_every_op_match_finite_differences() {
        let mut r = rng::stream(42, &[]);
        for trial in 0..20 {
            let a = random_tensor(&[4, 5], &mut r);
            let b = random_tensor(&[5, 6], &mut r);
            let c = random_tensor(&[4, 6], &mut r);
            let bias = random_tensor(&[6], &mut r);
            let gain = random_tensor(&[6], &mut r);
            let sq = random_tensor(&[8, 8], &mut r);
            let idx = [3usize, 0, 3, 1];
            let targets = [5usize, 0, 2, 2];
            let worst = check_gradients(&[&a, &b, &c, &bias, &gain, &sq], 1e-5, || {
                let ab = a.matmul(&b)?.add(&bias)?;
                let x = ab.mul(&c)?.sub(&c.scale(0.3))?.add_scalar(0.1);
                let ln = x.layer_norm(&gain, &bias, 1e-5)?.gelu();
                let cat = Tensor::concat(&[&ln, &c], 1)?.slice_cols(2, 11)?;
                let g = cat.gather_rows(&idx)?.transpose()?.transpose()?;
                let sm = sq.softmax_rows()?.slice_rows(0, 4)?.slice_cols(0, 6)?;
                let l1 = g.slice_cols(0, 6)?.mul(&sm)?.relu().sum();
                let l2 = x.cross_entropy_from_logits(&targets)?;
                let l3 = x.cosine_rows(&c)?.mean();
                let l4 = ln.mse(&c)?;
                let l5 = Tensor::concat(&[&x, &c], 0)?.reshape(&[6, 8])?.mean();
                let l6 = x.normalize_rows()?.mul(&c)?.sum();
                Ok(l1.add(&l2)?.add(&l3)?.add(&l4)?.add(&l5)?.add(&l6)?)
            })
            .unwrap();
            assert!(worst < 1e-6, "trial {trial}: relative error {worst}");
        }
    }

    #[test]
    fn softmax_jvp_matches_finite_differences() {
        let mut r = rng::stream(3, &[]);
        for _ in 0..20 {
            let x = random_tensor(&[8, 8], &mut r);
            let w = random_tensor(&[8, 8], &mut r);
            let worst = check_gradients(&[&x], 1e-5, || {
                Ok(x.softmax_rows()?.mul(&w.detach())?.sum())
            })
            .unwrap();
            assert!(worst < 1e-5, "{worst}");
        }
    }

    #[test]
    fn attention_and_sparse_gradients() {
        let mut r = rng::stream(8, &[]);
        let layout = AttentionLayout {
            offsets: vec![0, 3, 4, 9],
            n_heads: 2,
        };
        let csr = Csr::from_edges(9, &[(0, 1), (1, 2), (4, 5), (5, 8), (3, 6)], true).unwrap();
        let adj = Adjacency::gcn_normalized(&csr);
        for _ in 0..20 {
            let q = random_tensor(&[9, 4], &mut r);
            let k = random_tensor(&[9, 4], &mut r);
            let v = random_tensor(&[9, 4], &mut r);
            let w = random_tensor(&[9, 4], &mut r).detach();
            let worst = check_gradients(&[&q, &k, &v], 1e-5, || {
                let o = Tensor::attention(&q, &k, &v, &layout)?;
                Ok(o.csr_matmul(&adj)?.mul(&w)?.sum())
            })
            .unwrap();
            assert!(worst < 1e-6, "{worst}");
        }
    }

    #[test]
    fn attention_stays_within_sequences() {
        let layout = AttentionLayout {
            offsets: vec![0, 2, 5],
            n_heads: 1,
        };
        let mut r = rng::stream(1, &[]);
        let q = random_tensor(&[5, 2], &mut r);
        let k = random_tensor(&[5, 2], &mut r);
        let v1 = random_tensor(&[5, 2], &mut r);
        let mut v2 = v1.to_vec();
        // perturbing the second sequence must not change the first one's output
        for x in &mut v2[4..] {
            *x += 10.0;
        }
        let v2 = Tensor::from_vec(&[5, 2], v2).unwrap();
        let o1 = Tensor::attention(&q, &k, &v1, &layout).unwrap().to_vec();
        let o2 = Tensor::attention(&q, &k, &v2, &layout).unwrap().to_vec();
        assert_eq!(&o1[..4], &o2[..4]);
    }

    #[test]
    fn gelu_gradient() {
        let mut r = rng::stream(5, &[]);
        for _ in 0..20 {
            let x = random_tensor(&[3, 7], &mut r);
            let worst = check_gradients(&[&x], 1e-5, || Ok(x.gelu().sum())).unwrap();
            assert!(worst < 1e-5, "{worst}");
        }
    }

    #[test]
    fn gcn_normalization_on_self_loops_only_is_identity() {
        let adj = Adjacency::gcn_normalized(&Csr::empty(3));
        assert_eq!(adj.dense(), vec![vec![1., 0., 0.], vec![0., 1., 0.], vec![0., 0., 1.]]);
    }
}
