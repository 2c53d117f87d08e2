//! Classification and contrastive objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Scalar, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Focal,
    Bce,
}

/// α·(1−p_t)^γ·(−ln p_t) for one logit, via log-sigmoid.
pub fn focal_loss(logit: f64, y: u8, gamma: f64, alpha: f64) -> f64 {
    let zt = if y == 1 { logit } else { -logit };
    alpha * sigmoid(-zt).powf(gamma) * softplus(-zt)
}

pub fn bce_loss(logit: f64, y: u8) -> f64 {
    softplus(logit) - f64::from(y) * logit
}

/// Supervised contrastive loss over L2-normalized rows of `reps` (B×d).
/// With fewer than two rows the loss is a constant zero and the flag is set.
pub fn info_nce<F: Scalar>(tape: &mut Tape<F>, reps: Var, labels: &[u8], tau: f64) -> Result<(Var, bool)> {
    if labels.len() < 2 {
        return Ok((tape.scalar_constant(F::zero()), true));
    }
    let z = tape.l2_normalize_rows(reps)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    Ok((tape.supcon(sim, labels, tau)?, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_values() {
        assert!((focal_loss(0.0, 1, 2.0, 1.0) - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((0.25 * 2f64.ln() - 0.17329).abs() < 1e-5);
        let z = (0.9f64 / 0.1).ln();
        assert!((focal_loss(z, 1, 2.0, 1.0) - 0.01 * -(0.9f64.ln())).abs() < 1e-12);
        assert!((focal_loss(z, 1, 2.0, 1.0) - 0.0010536).abs() < 1e-7);
    }

    #[test]
    fn gamma_zero_is_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let z = rng.random_range(-30.0..30.0);
            let y = rng.random_range(0..=1);
            assert!((focal_loss(z, y, 0.0, 1.0) - bce_loss(z, y)).abs() < 1e-7);
        }
    }

    #[test]
    fn tape_losses_agree_with_scalar_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zs: Vec<f64> = (0..50).map(|_| rng.random_range(-8.0..8.0)).collect();
        let ys: Vec<u8> = (0..50).map(|_| rng.random_range(0..=1)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[50, 1], zs.clone()).unwrap();
        let f = tape.focal_loss(x, &ys, 2.0, 0.75).unwrap();
        let b = tape.bce_loss(x, &ys).unwrap();
        let mean = |g: &dyn Fn(f64, u8) -> f64| zs.iter().zip(&ys).map(|(&z, &y)| g(z, y)).sum::<f64>() / 50.0;
        assert!((tape.scalar(f) - mean(&|z, y| focal_loss(z, y, 2.0, 0.75))).abs() < 1e-12);
        assert!((tape.scalar(b) - mean(&bce_loss)).abs() < 1e-12);
    }

    #[test]
    fn focal_decreases_in_pt() {
        for gamma in [0.0, 0.5, 1.0, 2.0, 5.0] {
            let mut prev = f64::INFINITY;
            for k in -60..=60 {
                let z = k as f64 * 0.25;
                let l = focal_loss(z, 1, gamma, 0.8);
                assert!(l <= prev, "gamma {gamma} at {z}");
                prev = l;
            }
        }
    }

    fn brute_info_nce(v: &[[f64; 3]], labels: &[u8], tau: f64) -> f64 {
        let unit: Vec<Vec<f64>> = v
            .iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        let sim = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..v.len() {
            let pos: Vec<usize> = (0..v.len()).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..v.len()).filter(|&j| j != i).map(|j| sim(i, j).exp()).sum();
            total += pos.iter().map(|&p| -(sim(i, p).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
            anchors += 1;
        }
        if anchors == 0 {
            0.0
        } else {
            total / anchors as f64
        }
    }

    fn run_info_nce(v: &[[f64; 3]], labels: &[u8]) -> (f64, bool) {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&[v.len(), 3], v.iter().flatten().copied().collect()).unwrap();
        let (l, warn) = info_nce(&mut tape, x, labels, 0.2).unwrap();
        (tape.scalar(l), warn)
    }

    #[test]
    fn info_nce_examples() {
        assert_eq!(run_info_nce(&[[1.0, 2.0, 0.5], [1.0, 2.0, 0.5]], &[1, 1]), (0.0, false));
        assert_eq!(run_info_nce(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[0, 1]), (0.0, false));
        assert_eq!(run_info_nce(&[[1.0, 0.0, 0.0]], &[1]), (0.0, true));

        let v = [[1.0, 0.2, -0.3], [0.9, 0.1, 0.0], [-0.5, 1.0, 0.4], [0.2, -0.7, 1.1]];
        let labels = [1, 1, 0, 0];
        let (got, _) = run_info_nce(&v, &labels);
        assert!((got - brute_info_nce(&v, &labels, 0.2)).abs() < 1e-12);
        let labels = [1, 1, 1, 0];
        let (got, _) = run_info_nce(&v, &labels);
        assert!((got - brute_info_nce(&v, &labels, 0.2)).abs() < 1e-12);
    }
}
