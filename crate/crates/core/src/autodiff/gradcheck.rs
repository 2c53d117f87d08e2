//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{OpTag, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per input; `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    pub fault: Option<OpTag>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_input: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// A differentiable scalar function of its inputs, built on a fresh tape.
pub trait Objective: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<T: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> Objective for T {}

fn evaluate(
    f: &impl Objective,
    inputs: &[(Vec<usize>, Vec<f64>)],
    fault: Option<OpTag>,
    with_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    if let Some(tag) = fault {
        tape.inject_fault(tag);
    }
    let vars = inputs
        .iter()
        .map(|(shape, data)| tape.param(shape, data.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar(out);
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, d))| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();
    Ok((value, grads))
}

/// Returns the max over checked coordinates of
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check(
    f: impl Objective,
    inputs: &[(Vec<usize>, Vec<f64>)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (value, analytic) = evaluate(&f, inputs, opts.fault, true)?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("objective is {value} at the base point")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut point: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    for (input, (_, data)) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < data.len() => {
                let mut c = sample(&mut rng, data.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..data.len()).collect(),
        };
        for coord in coords {
            let orig = data[coord];
            point[input].1[coord] = orig + opts.eps;
            let (plus, _) = evaluate(&f, &point, None, false)?;
            point[input].1[coord] = orig - opts.eps;
            let (minus, _) = evaluate(&f, &point, None, false)?;
            point[input].1[coord] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite objective when perturbing input {input} coordinate {coord}"
                )));
            }
            let fd = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[input][coord];
            if !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite analytic gradient at input {input} coordinate {coord}"
                )));
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((input, coord));
                }
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
