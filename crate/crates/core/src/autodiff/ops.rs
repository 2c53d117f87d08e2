//! Forward constructors. Each method computes its output eagerly and records
//! the backward context on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm_acc, sigmoid, softplus};
use super::{numel, Op, OpTag, Scalar, Tape, Var};
use crate::error::{dim_err, Error, Result};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Elu,
    Sigmoid,
    Tanh,
}

impl Unary {
    pub(crate) fn tag(self) -> OpTag {
        match self {
            Unary::LeakyRelu(_) => OpTag::LeakyRelu,
            Unary::Elu => OpTag::Elu,
            Unary::Sigmoid => OpTag::Sigmoid,
            Unary::Tanh => OpTag::Tanh,
        }
    }

    pub(crate) fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Unary::LeakyRelu(slope) => {
                if x > F::zero() {
                    x
                } else {
                    x * F::of(slope)
                }
            }
            Unary::Elu => {
                if x > F::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<F: Scalar> Tape<F> {
    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let xs = self.value(x);
        let mut out = vec![F::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xs[i * cols + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![cols, rows], out, rg, Op::Transpose { x, rows, cols }))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        let shape = if self.shape(a) == self.shape(b) || lb == 1 {
            self.shape(a).to_vec()
        } else if la == 1 {
            self.shape(b).to_vec()
        } else {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        };
        let n = numel(&shape);
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<F> = (0..n)
            .map(|i| {
                let x = av[if la == 1 { 0 } else { i }];
                let y = bv[if lb == 1 { 0 } else { i }];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let op = match kind {
            Binary::Add => Op::Add { a, b },
            Binary::Sub => Op::Sub { a, b },
            Binary::Mul => Op::Mul { a, b },
        };
        Ok(self.push(shape, out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, rg, Op::Scale { x, c })
    }

    /// x[r×c] + bias[c] broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "add_bias")?;
        if self.value(bias).len() != cols {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            for (o, &b) in out[r * cols..(r + 1) * cols].iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![rows, cols], out, rg, Op::AddBias { x, bias, cols }))
    }

    /// Multiplies row r of x[r×c] by s[r].
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "scale_rows")?;
        if self.value(s).len() != rows {
            return Err(dim_err("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o = *o * sv[r];
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(vec![rows, cols], out, rg, Op::ScaleRows { x, s, cols }))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, rg, Op::Unary { x, kind })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// Inverted dropout. In eval mode (or with `p == 0`) the input handle is
    /// returned unchanged. The mask is a pure function of `seed`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = F::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        Ok(self.push(shape, out, rg, Op::Dropout { x, mask }))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine map. `eps` is added to the variance inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "layer_norm")?;
        if cols == 0 {
            return Err(dim_err("layer_norm", self.shape(x), &[1]));
        }
        if self.value(gamma).len() != cols {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.value(beta).len() != cols {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(beta)));
        }
        let xs = self.value(x);
        let (gs, bs) = (self.value(gamma), self.value(beta));
        let d = F::of(cols as f64);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mu = row.iter().copied().sum::<F>() / d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / d;
            let rs = F::one() / (var + F::of(eps)).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mu) * rs * gs[j] + bs[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            vec![rows, cols],
            out,
            rg,
            Op::LayerNorm { x, gamma, beta, cols, mean, rstd },
        ))
    }

    /// Softmax over groups of entries sharing a segment id, stabilized by
    /// subtracting each segment's max.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.len() != segments.len() {
            return Err(dim_err("segment_softmax", self.shape(x), &[segments.len()]));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(Error::Usage(format!(
                "segment id {bad} out of range for {n_segments} segments"
            )));
        }
        let mut max = vec![F::neg_infinity(); n_segments];
        for (&v, &s) in xs.iter().zip(segments) {
            if v > max[s] {
                max[s] = v;
            }
        }
        let mut out: Vec<F> = xs.iter().zip(segments).map(|(&v, &s)| (v - max[s]).exp()).collect();
        let mut sum = vec![F::zero(); n_segments];
        for (&e, &s) in out.iter().zip(segments) {
            sum[s] += e;
        }
        for (o, &s) in out.iter_mut().zip(segments) {
            *o = *o / sum[s];
        }
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::SegmentSoftmax { x, segments: segments.to_vec(), n_segments },
        ))
    }

    /// Gathers rows: out[i] = x[idx[i]].
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "index_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Usage(format!("row index {bad} out of range for {rows} rows")));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xs[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![idx.len(), cols], out, rg, Op::IndexRows { x, idx: idx.to_vec(), cols }))
    }

    /// Sums rows into `n_out` buckets: out[idx[i]] += x[i].
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "scatter_add_rows")?;
        if idx.len() != rows {
            return Err(dim_err("scatter_add_rows", self.shape(x), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::Usage(format!("target row {bad} out of range for {n_out} rows")));
        }
        let xs = self.value(x);
        let mut out = vec![F::zero(); n_out * cols];
        for (r, &t) in idx.iter().enumerate() {
            for (o, &v) in out[t * cols..(t + 1) * cols].iter_mut().zip(&xs[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![n_out, cols],
            out,
            rg,
            Op::ScatterAddRows { x, idx: idx.to_vec(), cols },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, rg, Op::ConcatCols { parts: widths, rows }))
    }

    /// Columns `start..end` of x.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if start >= end || end > cols {
            return Err(dim_err("slice_cols", self.shape(x), &[start, end]));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&xs[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, end - start], out, rg, Op::SliceCols { x, start, in_cols: cols }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Usage("mean of an empty tensor".into()));
        }
        let s = self.value(x).iter().copied().sum::<F>() / F::of(n as f64);
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![s], rg, Op::Mean { x }))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "l2_normalize_rows")?;
        let xs = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(F::of(1e-12));
            for j in 0..cols {
                out[r * cols + j] = row[j] / n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, cols], out, rg, Op::L2NormalizeRows { x, cols, norms }))
    }

    /// Mean focal loss over binary targets, computed from logits:
    /// α·(1−p_t)^γ·(−ln p_t) with p_t the probability of the true class.
    pub fn focal_loss(&mut self, logits: Var, labels: &[u8], gamma: f64, alpha: f64) -> Result<Var> {
        let zs = self.value(logits);
        if zs.len() != labels.len() || zs.is_empty() {
            return Err(dim_err("focal_loss", self.shape(logits), &[labels.len()]));
        }
        let n = F::of(zs.len() as f64);
        let (g, a) = (F::of(gamma), F::of(alpha));
        let mut total = F::zero();
        let mut local = Vec::with_capacity(zs.len());
        for (&z, &y) in zs.iter().zip(labels) {
            let sign = if y == 1 { F::one() } else { -F::one() };
            let zt = z * sign;
            let nll = softplus(-zt);
            let pt = sigmoid(zt);
            let q = sigmoid(-zt);
            let w = q.powf(g);
            total += a * w * nll;
            let d = a * w * (-(g * pt * nll) - q);
            local.push(d * sign / n);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total / n],
            rg,
            Op::FusedLoss { x: logits, tag: OpTag::FocalLoss, local_grad: local },
        ))
    }

    /// Mean binary cross-entropy from logits.
    pub fn bce_loss(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let zs = self.value(logits);
        if zs.len() != labels.len() || zs.is_empty() {
            return Err(dim_err("bce_loss", self.shape(logits), &[labels.len()]));
        }
        let n = F::of(zs.len() as f64);
        let mut total = F::zero();
        let mut local = Vec::with_capacity(zs.len());
        for (&z, &y) in zs.iter().zip(labels) {
            let y = if y == 1 { F::one() } else { F::zero() };
            total += softplus(z) - y * z;
            local.push((sigmoid(z) - y) / n);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total / n],
            rg,
            Op::FusedLoss { x: logits, tag: OpTag::BceLoss, local_grad: local },
        ))
    }

    /// Supervised contrastive loss from a B×B similarity matrix.
    ///
    /// For every anchor with at least one same-label partner, averages
    /// `−ln(exp(s_ip/τ) / Σ_{j≠i} exp(s_ij/τ))` over its positives; the
    /// result is the mean over such anchors, or 0 if there are none.
    pub fn supcon(&mut self, sim: Var, labels: &[u8], tau: f64) -> Result<Var> {
        let (b, b2) = self.dims2(sim, "supcon")?;
        if b != b2 || labels.len() != b {
            return Err(dim_err("supcon", self.shape(sim), &[labels.len()]));
        }
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let s = self.value(sim);
        let t = F::of(tau);
        let mut local = vec![F::zero(); b * b];
        let mut total = F::zero();
        let mut anchors = 0usize;
        let mut per_anchor: Vec<(usize, Vec<F>, usize)> = Vec::new();
        for i in 0..b {
            let positives = (0..b).filter(|&j| j != i && labels[j] == labels[i]).count();
            if positives == 0 || b < 2 {
                continue;
            }
            let logits: Vec<F> = (0..b).map(|j| s[i * b + j] / t).collect();
            let m = (0..b)
                .filter(|&j| j != i)
                .map(|j| logits[j])
                .fold(F::neg_infinity(), F::max);
            let denom: F = (0..b).filter(|&j| j != i).map(|j| (logits[j] - m).exp()).sum();
            let lse = m + denom.ln();
            let np = F::of(positives as f64);
            let loss_i = (0..b)
                .filter(|&j| j != i && labels[j] == labels[i])
                .map(|j| lse - logits[j])
                .sum::<F>()
                / np;
            total += loss_i;
            anchors += 1;
            let soft: Vec<F> = (0..b)
                .map(|j| if j == i { F::zero() } else { (logits[j] - lse).exp() })
                .collect();
            per_anchor.push((i, soft, positives));
        }
        if anchors > 0 {
            let a = F::of(anchors as f64);
            for (i, soft, positives) in per_anchor {
                let np = F::of(positives as f64);
                for j in 0..b {
                    if j == i {
                        continue;
                    }
                    let pos = if labels[j] == labels[i] { F::one() / np } else { F::zero() };
                    local[i * b + j] = (soft[j] - pos) / (a * t);
                }
            }
            total = total / a;
        }
        let rg = self.rg(sim);
        Ok(self.push(
            vec![1],
            vec![total],
            rg,
            Op::FusedLoss { x: sim, tag: OpTag::SupCon, local_grad: local },
        ))
    }
}
