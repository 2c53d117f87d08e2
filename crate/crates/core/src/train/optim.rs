//! AdamW, global-norm clipping and the plateau learning-rate schedule.

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::model::Param;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &[Param<F>], weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![F::zero(); p.data.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Decoupled decay `p -= lr·wd·p`, then the bias-corrected Adam update.
    /// A non-finite gradient aborts the whole step before anything changes.
    pub fn step(&mut self, params: &mut [Param<F>], grads: &[Vec<F>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer holds state for {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.data.len() {
                return Err(crate::error::dim_err("adamw", &p.shape, &[g.len()]));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient for parameter {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(t));
        let c2 = F::of(1.0 - self.beta2.powi(t));
        let decay = F::of(1.0 - lr * self.weight_decay);
        let (lr, eps) = (F::of(lr), F::of(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.data[i] = p.data[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm<F: Scalar>(grads: &[Vec<F>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = F::of(max_norm / (norm + 1e-12));
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

/// Multiplies the learning rate by `factor` once the monitored metric has
/// failed to improve for `patience` consecutive evaluations, then restarts
/// the count.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: None,
            bad: 0,
        }
    }

    /// Feeds one evaluation (higher is better); returns whether the rate
    /// was reduced.
    pub fn observe(&mut self, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.lr *= self.factor;
            self.bad = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "w".into(),
            shape: vec![1],
            data: vec![v],
        }]
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = scalar(0.7);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(p[0].data[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[vec![1.0]], 0.1).unwrap();
        // m̂ = 1, v̂ = 1, so the update is lr / (1 + ε).
        assert!((p[0].data[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = scalar(2.0);
        let mut opt = AdamW::new(&p, 0.5);
        opt.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert!((p[0].data[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar(1.0);
        let mut opt = AdamW::new(&p, 0.1);
        let err = opt.step(&mut p, &[vec![f64::NAN]], 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p[0].data[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn matches_reference_over_steps() {
        // Textbook AdamW recurrence, written out independently.
        let (lr, wd, b1, b2, eps) = (0.01, 0.1, 0.9, 0.999, 1e-8);
        let grads = [0.3, -1.2, 0.5, 2.0, -0.1];
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        let mut p = scalar(1.5);
        let mut opt = AdamW::new(&p, wd);
        for (t, &g) in grads.iter().enumerate() {
            x -= lr * wd * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
            opt.step(&mut p, &[vec![g]], lr).unwrap();
            assert!((p[0].data[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn plateau_halves_once_per_trigger() {
        let mut s = Plateau::new(1.0, 0.5, 2);
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.5));
        assert!(s.observe(0.4));
        assert_eq!(s.lr, 0.5);
        assert!(!s.observe(0.45));
        assert!(s.observe(0.3));
        assert_eq!(s.lr, 0.25);
        assert!(!s.observe(0.9));
        assert!(!s.observe(0.8));
        assert_eq!(s.lr, 0.25);
    }

    proptest! {
        #[test]
        fn clipping_bounds_norm(g in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 1..6), 1..5)) {
            let mut grads = g.clone();
            let before = clip_grad_norm(&mut grads, 1.0);
            let after = global_norm(&grads);
            if before > 1.0 {
                prop_assert!(after <= 1.0 + 1e-6);
            } else {
                prop_assert_eq!(grads, g);
            }
        }
    }
}
