//! Finite-difference gradient checks over every differentiable op, the full
//! session model and the causal scorer, run in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckOptions, OpTag, Tape, Unary, Var};
use crate::causal::{CausalInstance, CausalScorer};
use crate::error::Result;
use crate::graph::{peu_edge_attr, SessionGraph};
use crate::model::{forward_batch, Mode, ModelConfig, ModelParams};
use crate::peu::{PeuCategory, PeuVector};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

type Inputs = Vec<(Vec<usize>, Vec<f64>)>;
type Body = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Random instance builder for one op.
pub struct OpCase {
    pub tag: OpTag,
    pub build: fn(&mut ChaCha8Rng) -> (Inputs, Body),
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=8), rng.random_range(1..=8))
}

fn unary_case(rng: &mut ChaCha8Rng, kind: Unary) -> (Inputs, Body) {
    let (m, k) = dims(rng);
    (vec![(vec![m, k], rand_vec(rng, m * k))], Box::new(move |t, v| Ok(t.unary(v[0], kind))))
}

fn binary_case(rng: &mut ChaCha8Rng, which: u8) -> (Inputs, Body) {
    let (m, k) = dims(rng);
    let rhs = if rng.random_bool(0.3) { (vec![1], rand_vec(rng, 1)) } else { (vec![m, k], rand_vec(rng, m * k)) };
    (
        vec![(vec![m, k], rand_vec(rng, m * k)), rhs],
        Box::new(move |t, v| match which {
            0 => t.add(v[0], v[1]),
            1 => t.sub(v[0], v[1]),
            _ => t.mul(v[0], v[1]),
        }),
    )
}

fn loss_labels(rng: &mut ChaCha8Rng) -> (usize, Vec<u8>) {
    let n = rng.random_range(1..=8);
    (n, (0..n).map(|_| rng.random_range(0..2)).collect())
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            tag: OpTag::MatMul,
            build: |rng| {
                let (m, k) = dims(rng);
                let n = rng.random_range(1..=8);
                let inputs = vec![(vec![m, k], rand_vec(rng, m * k)), (vec![k, n], rand_vec(rng, k * n))];
                (inputs, Box::new(|t, v| t.matmul(v[0], v[1])))
            },
        },
        OpCase {
            tag: OpTag::Transpose,
            build: |rng| {
                let (m, k) = dims(rng);
                (vec![(vec![m, k], rand_vec(rng, m * k))], Box::new(|t, v| t.transpose(v[0])))
            },
        },
        OpCase { tag: OpTag::Add, build: |rng| binary_case(rng, 0) },
        OpCase { tag: OpTag::Sub, build: |rng| binary_case(rng, 1) },
        OpCase { tag: OpTag::Mul, build: |rng| binary_case(rng, 2) },
        OpCase {
            tag: OpTag::Scale,
            build: |rng| {
                let (m, k) = dims(rng);
                (vec![(vec![m, k], rand_vec(rng, m * k))], Box::new(|t, v| Ok(t.scale(v[0], -1.7))))
            },
        },
        OpCase {
            tag: OpTag::AddBias,
            build: |rng| {
                let (m, k) = dims(rng);
                let inputs = vec![(vec![m, k], rand_vec(rng, m * k)), (vec![k], rand_vec(rng, k))];
                (inputs, Box::new(|t, v| t.add_bias(v[0], v[1])))
            },
        },
        OpCase {
            tag: OpTag::ScaleRows,
            build: |rng| {
                let (m, k) = dims(rng);
                let inputs = vec![(vec![m, k], rand_vec(rng, m * k)), (vec![m, 1], rand_vec(rng, m))];
                (inputs, Box::new(|t, v| t.scale_rows(v[0], v[1])))
            },
        },
        OpCase { tag: OpTag::LeakyRelu, build: |rng| unary_case(rng, Unary::LeakyRelu(0.2)) },
        OpCase { tag: OpTag::Elu, build: |rng| unary_case(rng, Unary::Elu) },
        OpCase { tag: OpTag::Sigmoid, build: |rng| unary_case(rng, Unary::Sigmoid) },
        OpCase { tag: OpTag::Tanh, build: |rng| unary_case(rng, Unary::Tanh) },
        OpCase {
            tag: OpTag::Dropout,
            build: |rng| {
                let (m, k) = dims(rng);
                let seed = rng.random();
                (vec![(vec![m, k], rand_vec(rng, m * k))], Box::new(move |t, v| t.dropout(v[0], 0.3, seed, true)))
            },
        },
        OpCase {
            tag: OpTag::LayerNorm,
            build: |rng| {
                // Two-column rows normalise to ±γ for any input, leaving only
                // roundoff for the difference quotient to measure.
                let (m, k) = (rng.random_range(1..=8), rng.random_range(3..=8));
                let inputs = vec![
                    (vec![m, k], rand_vec(rng, m * k)),
                    (vec![k], rand_vec(rng, k)),
                    (vec![k], rand_vec(rng, k)),
                ];
                (inputs, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)))
            },
        },
        OpCase {
            tag: OpTag::SegmentSoftmax,
            build: |rng| {
                let n = rng.random_range(1..=8);
                let k = rng.random_range(1..=n);
                let segs: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
                (vec![(vec![n, 1], rand_vec(rng, n))], Box::new(move |t, v| t.segment_softmax(v[0], &segs, k)))
            },
        },
        OpCase {
            tag: OpTag::IndexRows,
            build: |rng| {
                let (m, k) = dims(rng);
                let idx: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..m)).collect();
                (vec![(vec![m, k], rand_vec(rng, m * k))], Box::new(move |t, v| t.index_rows(v[0], &idx)))
            },
        },
        OpCase {
            tag: OpTag::ScatterAddRows,
            build: |rng| {
                let (m, k) = dims(rng);
                let n_out = rng.random_range(1..=8);
                let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..n_out)).collect();
                (vec![(vec![m, k], rand_vec(rng, m * k))], Box::new(move |t, v| t.scatter_add_rows(v[0], &idx, n_out)))
            },
        },
        OpCase {
            tag: OpTag::ConcatCols,
            build: |rng| {
                let (m, k) = dims(rng);
                let k2 = rng.random_range(1..=8);
                let inputs = vec![(vec![m, k], rand_vec(rng, m * k)), (vec![m, k2], rand_vec(rng, m * k2))];
                (inputs, Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[0]])))
            },
        },
        OpCase {
            tag: OpTag::SliceCols,
            build: |rng| {
                let (m, k) = dims(rng);
                let k = k.max(2);
                let start = rng.random_range(0..k - 1);
                let end = rng.random_range(start + 1..=k);
                (vec![(vec![m, k], rand_vec(rng, m * k))], Box::new(move |t, v| t.slice_cols(v[0], start, end)))
            },
        },
        OpCase {
            tag: OpTag::Sum,
            build: |rng| {
                let (m, k) = dims(rng);
                (vec![(vec![m, k], rand_vec(rng, m * k))], Box::new(|t, v| Ok(t.sum(v[0]))))
            },
        },
        OpCase {
            tag: OpTag::Mean,
            build: |rng| {
                let (m, k) = dims(rng);
                (vec![(vec![m, k], rand_vec(rng, m * k))], Box::new(|t, v| t.mean(v[0])))
            },
        },
        OpCase {
            tag: OpTag::L2NormalizeRows,
            build: |rng| {
                let (m, k) = dims(rng);
                (vec![(vec![m, k], rand_vec(rng, m * k))], Box::new(|t, v| t.l2_normalize_rows(v[0])))
            },
        },
        OpCase {
            tag: OpTag::FocalLoss,
            build: |rng| {
                let (n, labels) = loss_labels(rng);
                (vec![(vec![n], rand_vec(rng, n))], Box::new(move |t, v| t.focal_loss(v[0], &labels, 2.0, 0.75)))
            },
        },
        OpCase {
            tag: OpTag::BceLoss,
            build: |rng| {
                let (n, labels) = loss_labels(rng);
                (vec![(vec![n], rand_vec(rng, n))], Box::new(move |t, v| t.bce_loss(v[0], &labels)))
            },
        },
        OpCase {
            tag: OpTag::SupCon,
            build: |rng| {
                let b = rng.random_range(2..=8);
                let labels: Vec<u8> = (0..b).map(|_| rng.random_range(0..2)).collect();
                // cosine similarities live in [-1, 1]
                let sims: Vec<f64> = (0..b * b).map(|_| rng.random_range(-1.0..1.0)).collect();
                (vec![(vec![b, b], sims)], Box::new(move |t, v| t.supcon(v[0], &labels, 0.2)))
            },
        },
    ]
}

/// Weighted sum with fixed random weights, exposing the full Jacobian of `y`.
pub fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let n = t.value(y).len();
    let w = t.constant(&shape, rand_vec(&mut rng, n))?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub checks: Vec<CheckResult>,
}

impl GradcheckSummary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>12} {:>10} {:>7}  result\n", "check", "max rel err", "tolerance", "coords");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<28} {:>12.3e} {:>10.0e} {:>7}  {}\n",
                c.name,
                c.max_rel_error,
                c.tolerance,
                c.coords,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

fn result(name: impl Into<String>, err: f64, tol: f64, coords: usize) -> CheckResult {
    CheckResult { name: name.into(), max_rel_error: err, tolerance: tol, coords, passed: err < tol }
}

/// Four-node chain with mixed PEU activity and random text features.
pub fn four_node_graph(text_dim: usize, seed: u64) -> SessionGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = [[0, 1, 0, 0, 0, 0, 0, 0], [0, 0, 0, 1, 0, 0, 0, 1], [1, 0, 0, 0, 0, 1, 0, -1], [0, 0, 0, 0, 0, 0, 0, 0]];
    let peus: Vec<PeuVector> = rows.iter().map(|r| PeuVector::from_values(*r).unwrap()).collect();
    SessionGraph {
        session_id: "gradcheck".into(),
        persona: 1,
        label: Some(1),
        text_dim,
        node_text: (0..4 * text_dim).map(|_| rng.random_range(-0.2f32..0.2)).collect(),
        node_peu: peus.iter().flat_map(PeuVector::as_f32).collect(),
        edges: vec![(0, 1), (1, 2), (2, 3)],
        edge_attr: peus.windows(2).flat_map(|w| peu_edge_attr(&w[0], &w[1])).collect(),
    }
}

fn model_check(name: &str, cfg: &ModelConfig, mode: Mode, opts: &GradCheckOptions) -> Result<CheckResult> {
    let params = ModelParams::<f64>::init(cfg, 11)?;
    let graph = four_node_graph(cfg.text_dim, 12);
    let inputs: Inputs = params.params.iter().map(|p| (p.shape.clone(), p.data.clone())).collect();
    let shell = params.clone();
    let r = grad_check(
        move |t: &mut Tape<f64>, v: &[Var]| {
            let out = forward_batch(&shell, v, t, &[&graph], &[graph.persona], mode)?;
            t.focal_loss(out.logits, &[1], 2.0, 1.0)
        },
        &inputs,
        opts,
    )?;
    let worst = r.worst.map(|(i, _)| params.params[i].name.as_str()).unwrap_or("-");
    Ok(result(format!("{name} [{worst}]"), r.max_rel_error, MODEL_TOLERANCE, r.coords_checked))
}

fn scorer_check(opts: &GradCheckOptions) -> Result<CheckResult> {
    let scorer = CausalScorer::<f64>::init(6, 3, 8, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let reps: Vec<f32> = (0..8 * 6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let inst = CausalInstance {
        session_id: "gradcheck".into(),
        target: 4,
        category: PeuCategory::SomaticFatigueSleep,
        value: 1,
        candidates: vec![1, 2, 3, 5, 6, 7],
        labels: vec![0, 1, 1, 0, 0, 0],
    };
    let feats = scorer.features(&inst, &reps)?;
    let d = CausalScorer::<f64>::input_dim(6, 3);
    let inputs: Inputs = scorer.params.iter().map(|p| (p.shape.clone(), p.data.clone())).collect();
    let r = grad_check(
        move |t: &mut Tape<f64>, v: &[Var]| {
            let x = t.constant(&[6, d], feats.clone())?;
            let z = scorer.logits(t, v, x)?;
            t.focal_loss(z, &inst.labels, 2.0, 0.75)
        },
        &inputs,
        opts,
    )?;
    Ok(result("causal scorer", r.max_rel_error, MODEL_TOLERANCE, r.coords_checked))
}

/// Runs the whole suite; `fault` corrupts one op's backward rule so the
/// suite can demonstrate that it notices.
pub fn run_suite(fault: Option<OpTag>) -> Result<GradcheckSummary> {
    let mut checks = Vec::new();
    for case in op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9c ^ case.tag as u64);
        let (mut worst, mut coords) = (0.0f64, 0);
        for trial in 0..20 {
            let (inputs, body) = (case.build)(&mut rng);
            let r = grad_check(
                |t: &mut Tape<f64>, v: &[Var]| {
                    let y = body(t, v)?;
                    probe(t, y, trial)
                },
                &inputs,
                &GradCheckOptions { fault, ..GradCheckOptions::default() },
            )?;
            worst = worst.max(r.max_rel_error);
            coords += r.coords_checked;
        }
        checks.push(result(case.tag.name(), worst, OP_TOLERANCE, coords));
    }
    // A wider step keeps roundoff in the difference quotient well below the
    // 1e-8 floor for coordinates whose true gradient is near zero.
    let opts = GradCheckOptions { eps: 1e-4, max_coords_per_input: Some(6), seed: 3, fault };
    let full = ModelConfig::default();
    checks.push(model_check("psygat eval", &full, Mode::EVAL, &opts)?);
    checks.push(model_check("psygat train", &full, Mode::train(9), &opts)?);
    let mean = ModelConfig { readout: crate::model::Readout::Mean, ..ModelConfig::default() };
    checks.push(model_check("psygat mean readout", &mean, Mode::EVAL, &opts)?);
    checks.push(scorer_check(&opts)?);
    Ok(GradcheckSummary { checks })
}
