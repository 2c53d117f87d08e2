//! Vector-Jacobian products for every recorded operation.

use super::kernels::{gemm_nt_acc, gemm_tn_acc};
use super::{accumulate, Op, Scalar, Tape, Unary, Var};

fn wants<F: Scalar>(tape: &Tape<F>, v: Var) -> bool {
    tape.nodes[v.0].requires_grad
}

pub(crate) fn propagate<F: Scalar>(tape: &Tape<F>, idx: usize, upstream: &[F], pass: &mut [Option<Vec<F>>]) {
    let node = &tape.nodes[idx];
    let factor = tape.fault_factor(node.op.tag());
    let scaled;
    let g: &[F] = if factor != F::one() {
        scaled = upstream.iter().map(|&v| v * factor).collect::<Vec<_>>();
        &scaled
    } else {
        upstream
    };
    let len = |v: Var| tape.nodes[v.0].data.len();
    let val = |v: Var| tape.nodes[v.0].data.as_slice();

    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
            if wants(tape, a) {
                accumulate(pass, a, m * k, |buf| gemm_nt_acc(g, val(b), m, k, n, buf));
            }
            if wants(tape, b) {
                accumulate(pass, b, k * n, |buf| gemm_tn_acc(val(a), g, m, k, n, buf));
            }
        }
        Op::Transpose { x, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            accumulate(pass, *x, rows * cols, |buf| {
                for i in 0..rows {
                    for j in 0..cols {
                        buf[i * cols + j] += g[j * rows + i];
                    }
                }
            });
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let neg = matches!(node.op, Op::Sub { .. });
            for (v, sign) in [(*a, F::one()), (*b, if neg { -F::one() } else { F::one() })] {
                if !wants(tape, v) {
                    continue;
                }
                let n = len(v);
                accumulate(pass, v, n, |buf| {
                    if n == 1 && g.len() != 1 {
                        buf[0] += sign * g.iter().copied().sum::<F>();
                    } else {
                        buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += sign * gv);
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            for (v, other) in [(*a, *b), (*b, *a)] {
                if !wants(tape, v) {
                    continue;
                }
                let n = len(v);
                let ov = val(other);
                accumulate(pass, v, n, |buf| {
                    let o_at = |i: usize| ov[if ov.len() == 1 { 0 } else { i }];
                    if n == 1 && g.len() != 1 {
                        buf[0] += g.iter().enumerate().map(|(i, &gv)| gv * o_at(i)).sum::<F>();
                    } else {
                        for (i, o) in buf.iter_mut().enumerate() {
                            *o += g[i] * o_at(i);
                        }
                    }
                });
            }
        }
        Op::Scale { x, c } => {
            let c = *c;
            accumulate(pass, *x, g.len(), |buf| {
                buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv * c)
            });
        }
        Op::AddBias { x, bias, cols } => {
            let cols = *cols;
            if wants(tape, *x) {
                accumulate(pass, *x, g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv)
                });
            }
            if wants(tape, *bias) {
                accumulate(pass, *bias, cols, |buf| {
                    for row in g.chunks(cols) {
                        buf.iter_mut().zip(row).for_each(|(o, &gv)| *o += gv);
                    }
                });
            }
        }
        Op::ScaleRows { x, s, cols } => {
            let cols = *cols;
            let (xs, ss) = (val(*x), val(*s));
            if wants(tape, *x) {
                accumulate(pass, *x, g.len(), |buf| {
                    for (r, (brow, grow)) in buf.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        brow.iter_mut().zip(grow).for_each(|(o, &gv)| *o += gv * ss[r]);
                    }
                });
            }
            if wants(tape, *s) {
                accumulate(pass, *s, ss.len(), |buf| {
                    for (r, (xrow, grow)) in xs.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        buf[r] += xrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<F>();
                    }
                });
            }
        }
        Op::Unary { x, kind } => {
            let (xs, ys) = (val(*x), node.data.as_slice());
            let kind = *kind;
            accumulate(pass, *x, g.len(), |buf| {
                for i in 0..buf.len() {
                    let d = match kind {
                        Unary::LeakyRelu(slope) => {
                            if xs[i] > F::zero() {
                                F::one()
                            } else {
                                F::of(slope)
                            }
                        }
                        Unary::Elu => {
                            if xs[i] > F::zero() {
                                F::one()
                            } else {
                                ys[i] + F::one()
                            }
                        }
                        Unary::Sigmoid => ys[i] * (F::one() - ys[i]),
                        Unary::Tanh => F::one() - ys[i] * ys[i],
                    };
                    buf[i] += g[i] * d;
                }
            });
        }
        Op::Dropout { x, mask } => {
            accumulate(pass, *x, g.len(), |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * mask[i];
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, cols, mean, rstd } => {
            let cols = *cols;
            let xs = val(*x);
            let gs = val(*gamma);
            let d = F::of(cols as f64);
            let xhat = |r: usize, j: usize| (xs[r * cols + j] - mean[r]) * rstd[r];
            if wants(tape, *beta) {
                accumulate(pass, *beta, cols, |buf| {
                    for row in g.chunks(cols) {
                        buf.iter_mut().zip(row).for_each(|(o, &gv)| *o += gv);
                    }
                });
            }
            if wants(tape, *gamma) {
                accumulate(pass, *gamma, cols, |buf| {
                    for (r, row) in g.chunks(cols).enumerate() {
                        for j in 0..cols {
                            buf[j] += row[j] * xhat(r, j);
                        }
                    }
                });
            }
            if wants(tape, *x) {
                accumulate(pass, *x, xs.len(), |buf| {
                    for (r, row) in g.chunks(cols).enumerate() {
                        let dxhat: Vec<F> = (0..cols).map(|j| row[j] * gs[j]).collect();
                        let m1 = dxhat.iter().copied().sum::<F>() / d;
                        let m2 = (0..cols).map(|j| dxhat[j] * xhat(r, j)).sum::<F>() / d;
                        for j in 0..cols {
                            buf[r * cols + j] += rstd[r] * (dxhat[j] - m1 - xhat(r, j) * m2);
                        }
                    }
                });
            }
        }
        Op::SegmentSoftmax { x, segments, n_segments } => {
            let ys = node.data.as_slice();
            let mut dot = vec![F::zero(); *n_segments];
            for ((&y, &gv), &s) in ys.iter().zip(g).zip(segments) {
                dot[s] += y * gv;
            }
            accumulate(pass, *x, ys.len(), |buf| {
                for i in 0..ys.len() {
                    buf[i] += ys[i] * (g[i] - dot[segments[i]]);
                }
            });
        }
        Op::IndexRows { x, idx, cols } => {
            let cols = *cols;
            accumulate(pass, *x, len(*x), |buf| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..cols {
                        buf[src * cols + j] += g[r * cols + j];
                    }
                }
            });
        }
        Op::ScatterAddRows { x, idx, cols } => {
            let cols = *cols;
            accumulate(pass, *x, len(*x), |buf| {
                for (r, &dst) in idx.iter().enumerate() {
                    for j in 0..cols {
                        buf[r * cols + j] += g[dst * cols + j];
                    }
                }
            });
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, c) in parts {
                if wants(tape, p) {
                    accumulate(pass, p, rows * c, |buf| {
                        for r in 0..*rows {
                            for j in 0..c {
                                buf[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    });
                }
                offset += c;
            }
        }
        Op::SliceCols { x, start, in_cols } => {
            let (start, in_cols) = (*start, *in_cols);
            let width = node.shape[1];
            accumulate(pass, *x, len(*x), |buf| {
                for (r, row) in g.chunks(width).enumerate() {
                    for j in 0..width {
                        buf[r * in_cols + start + j] += row[j];
                    }
                }
            });
        }
        Op::Sum { x } => {
            let g0 = g[0];
            accumulate(pass, *x, len(*x), |buf| buf.iter_mut().for_each(|o| *o += g0));
        }
        Op::Mean { x } => {
            let n = len(*x);
            let g0 = g[0] / F::of(n as f64);
            accumulate(pass, *x, n, |buf| buf.iter_mut().for_each(|o| *o += g0));
        }
        Op::L2NormalizeRows { x, cols, norms } => {
            let cols = *cols;
            let ys = node.data.as_slice();
            accumulate(pass, *x, ys.len(), |buf| {
                for (r, n) in norms.iter().enumerate() {
                    let yr = &ys[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..cols {
                        buf[r * cols + j] += (gr[j] - yr[j] * dot) / *n;
                    }
                }
            });
        }
        Op::FusedLoss { x, local_grad, .. } => {
            let g0 = g[0];
            accumulate(pass, *x, local_grad.len(), |buf| {
                buf.iter_mut().zip(local_grad).for_each(|(o, &l)| *o += g0 * l)
            });
        }
    }
}
