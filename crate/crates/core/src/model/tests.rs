use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, GradCheckOptions, Tape};
use crate::graph::{peu_edge_attr, SessionGraph};
use crate::peu::PeuVector;

fn random_graph(rng: &mut ChaCha8Rng, t: usize, text_dim: usize) -> SessionGraph {
    let peus: Vec<PeuVector> = (0..t)
        .map(|_| {
            let mut v = [0i8; 8];
            for x in v.iter_mut().take(7) {
                *x = i8::from(rng.random_bool(0.3));
            }
            v[7] = rng.random_range(-1..=1);
            PeuVector::from_values(v).unwrap()
        })
        .collect();
    SessionGraph {
        session_id: format!("r{t}"),
        persona: 0,
        label: Some(1),
        text_dim,
        node_text: (0..t * text_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        node_peu: peus.iter().flat_map(PeuVector::as_f32).collect(),
        edges: (0..t.saturating_sub(1)).map(|k| (k, k + 1)).collect(),
        edge_attr: peus.windows(2).flat_map(|w| peu_edge_attr(&w[0], &w[1])).collect(),
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        text_dim: 24,
        ..ModelConfig::default()
    }
}

fn zero_param(p: &mut ModelParams<f64>, name: &str) {
    p.get_mut(name).unwrap().data.iter_mut().for_each(|x| *x = 0.0);
}

#[test]
fn output_shapes() {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_graph(&mut rng, 5, cfg.text_dim);
    let out = predict(&params, &g, 3).unwrap();
    assert_eq!(out.conditioned_rep.len(), 272);
    assert_eq!(out.session_rep.len(), 256);
    assert_eq!(out.node_reps.len(), 5 * 128);
    assert!(out.prob > 0.0 && out.prob < 1.0);
    assert!(out.node_reps.iter().all(|x| x.is_finite()));
}

#[test]
fn shapes_of_parameters() {
    let p = ModelParams::<f32>::init(&ModelConfig::default(), 0).unwrap();
    assert_eq!(p.get("gat.1.w_src").unwrap().shape, vec![128, 128]);
    assert_eq!(p.get("gat.0.attn").unwrap().shape, vec![2, 64]);
    assert_eq!(p.get("set2set.w_ih").unwrap().shape, vec![256, 512]);
    assert_eq!(p.get("persona").unwrap().shape, vec![4, 16]);
    assert_eq!(p.get("head.0.weight").unwrap().shape, vec![272, 64]);
    let persona = &p.get("persona").unwrap().data;
    let std = (persona.iter().map(|x| x * x).sum::<f32>() / persona.len() as f32).sqrt();
    assert!(std > 0.01 && std < 0.03, "{std}");
}

#[test]
fn rebuild_from_params_checks_architecture() {
    let cfg = small_config();
    let p = ModelParams::<f32>::init(&cfg, 3).unwrap();
    assert_eq!(ModelParams::from_params(&cfg, p.params.clone()).unwrap(), p);
    let wider = ModelConfig { hidden: 64, ..cfg };
    assert!(matches!(ModelParams::from_params(&wider, p.params), Err(Error::Config(_))));
}

#[test]
fn errors() {
    let cfg = small_config();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_graph(&mut rng, 3, cfg.text_dim);
    assert!(matches!(predict(&params, &g, 4), Err(Error::Data(_))));
    let wrong = random_graph(&mut rng, 3, 16);
    assert!(matches!(predict(&params, &wrong, 0), Err(Error::Config(_))));
    assert!(matches!(
        ModelParams::<f32>::init(&ModelConfig { heads: 3, ..cfg }, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_inputs_give_normalized_bias_sum() {
    let cfg = small_config();
    let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["text_proj.bias", "peu_proj.bias"] {
        for x in &mut params.get_mut(name).unwrap().data {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    let mut g = random_graph(&mut rng, 3, cfg.text_dim);
    g.node_text.iter_mut().for_each(|x| *x = 0.0);
    g.node_peu.iter_mut().for_each(|x| *x = 0.0);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape).unwrap();
    let out = project_inputs(&params, &vars, &mut tape, &[&g]).unwrap();
    let rows = tape.value(out);

    let sum: Vec<f64> = params.get("text_proj.bias").unwrap().data.iter()
        .zip(&params.get("peu_proj.bias").unwrap().data)
        .map(|(a, b)| a + b)
        .collect();
    let mu = sum.iter().sum::<f64>() / 128.0;
    let var = sum.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / 128.0;
    let expected: Vec<f64> = sum.iter().map(|x| (x - mu) / (var + 1e-5).sqrt()).collect();
    for r in 0..3 {
        for j in 0..128 {
            assert!((rows[r * 128 + j] - expected[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_gamma_removes_a_stream() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = random_graph(&mut rng, 4, cfg.text_dim);
    for (gamma, field) in [("text_proj.ln.gamma", 0), ("peu_proj.ln.gamma", 1)] {
        let mut params = ModelParams::<f64>::init(&cfg, 6).unwrap();
        zero_param(&mut params, gamma);
        let mut other = random_graph(&mut rng, 4, cfg.text_dim);
        if field == 0 {
            other.node_peu = g.node_peu.clone();
        } else {
            other.node_text = g.node_text.clone();
        }
        let project = |graph: &SessionGraph| {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape).unwrap();
            let out = project_inputs(&params, &vars, &mut tape, &[graph]).unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(project(&g), project(&other));
    }
}

#[test]
fn single_node_attention_is_one_and_readout_copies_node() {
    let cfg = small_config();
    let params = ModelParams::<f64>::init(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random_graph(&mut rng, 1, cfg.text_dim);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape).unwrap();
    let out = forward_batch(&params, &vars, &mut tape, &[&g], &[0], Mode::EVAL).unwrap();
    for layer in &out.attention {
        for &a in layer {
            assert_eq!(tape.value(a), &[1.0]);
        }
    }
    let nodes = tape.value(out.node_reps).to_vec();
    let s = tape.value(out.session_rep);
    assert_eq!(&s[128..], nodes.as_slice());
}

#[test]
fn single_node_layer_is_elu_self_message_plus_input() {
    let cfg = ModelConfig { layers: 1, ..small_config() };
    let params = ModelParams::<f64>::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_graph(&mut rng, 1, cfg.text_dim);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape).unwrap();
    let h = project_inputs(&params, &vars, &mut tape, &[&g]).unwrap();
    let h = tape.value(h).to_vec();
    let out = forward_batch(&params, &vars, &mut tape, &[&g], &[0], Mode::EVAL).unwrap();
    let w = &params.get("gat.0.w_src").unwrap().data;
    let bias = &params.get("gat.0.bias").unwrap().data;
    let got = tape.value(out.node_reps);
    for j in 0..128 {
        let msg: f64 = (0..128).map(|i| h[i] * w[i * 128 + j]).sum::<f64>() + bias[j];
        let elu = if msg > 0.0 { msg } else { msg.exp_m1() };
        assert!((got[j] - (elu + h[j])).abs() < 1e-12);
    }
}

#[test]
fn zero_layer_params_pass_input_through() {
    let cfg = small_config();
    let mut params = ModelParams::<f64>::init(&cfg, 9).unwrap();
    for l in 0..2 {
        for part in ["edge.weight", "edge.bias", "w_src", "w_dst", "attn", "bias"] {
            zero_param(&mut params, &format!("gat.{l}.{part}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = random_graph(&mut rng, 6, cfg.text_dim);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape).unwrap();
    let h = project_inputs(&params, &vars, &mut tape, &[&g]).unwrap();
    let out = forward_batch(&params, &vars, &mut tape, &[&g], &[0], Mode::EVAL).unwrap();
    assert_eq!(tape.value(out.node_reps), tape.value(h));
}

#[test]
fn zero_edge_projection_ignores_edge_attributes() {
    let cfg = small_config();
    let mut params = ModelParams::<f64>::init(&cfg, 10).unwrap();
    for l in 0..2 {
        zero_param(&mut params, &format!("gat.{l}.edge.weight"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = random_graph(&mut rng, 5, cfg.text_dim);
    let mut h = g.clone();
    h.edge_attr.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    assert_eq!(
        predict(&params, &g, 0).unwrap().node_reps,
        predict(&params, &h, 0).unwrap().node_reps
    );
}

#[test]
fn attention_normalizes_per_destination() {
    let cfg = small_config();
    let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let graphs: Vec<SessionGraph> = (0..rng.random_range(1..4))
            .map(|_| {
                let t = rng.random_range(1..10);
                random_graph(&mut rng, t, cfg.text_dim)
            })
            .collect();
        let refs: Vec<&SessionGraph> = graphs.iter().collect();
        let personas = vec![0; refs.len()];
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let out = forward_batch(&params, &vars, &mut tape, &refs, &personas, Mode::EVAL).unwrap();
        let n = *out.node_offsets.last().unwrap();
        for layer in &out.attention {
            for &a in layer {
                let mut sums = vec![0.0; n];
                for (&w, &d) in tape.value(a).iter().zip(&out.attention_dst) {
                    sums[d] += w;
                }
                assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
            }
        }
    }
}

#[test]
fn set2set_is_permutation_invariant() {
    let cfg = small_config();
    let params = ModelParams::<f64>::init(&cfg, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t = 7;
    let nodes: Vec<f64> = (0..t * 128).map(|_| rng.random_range(-1.0..1.0)).collect();
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let permuted: Vec<f64> = perm.iter().flat_map(|&r| nodes[r * 128..(r + 1) * 128].to_vec()).collect();
    let run = |data: Vec<f64>| {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let x = tape.constant(&[t, 128], data).unwrap();
        let out = set2set_readout(&params, &vars, &mut tape, x, &vec![0; t], 1).unwrap();
        tape.value(out).to_vec()
    };
    let (a, b) = (run(nodes), run(permuted));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn batching_matches_single_graph_runs() {
    let cfg = small_config();
    let params = ModelParams::<f64>::init(&cfg, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let graphs: Vec<SessionGraph> = [3, 1, 6].iter().map(|&t| random_graph(&mut rng, t, cfg.text_dim)).collect();
    let refs: Vec<&SessionGraph> = graphs.iter().collect();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape).unwrap();
    let out = forward_batch(&params, &vars, &mut tape, &refs, &[0, 1, 2], Mode::EVAL).unwrap();
    let logits = tape.value(out.logits).to_vec();
    for (i, g) in graphs.iter().enumerate() {
        let single = predict(&params, g, i).unwrap().logit;
        assert!((single - logits[i]).abs() < 1e-12);
    }
}

#[test]
fn persona_only_touches_conditioning() {
    let cfg = small_config();
    let mut params = ModelParams::<f32>::init(&cfg, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = random_graph(&mut rng, 6, cfg.text_dim);
    let a = predict(&params, &g, 0).unwrap();
    let b = predict(&params, &g, 2).unwrap();
    assert_eq!(a.node_reps, b.node_reps);
    assert_eq!(a.session_rep, b.session_rep);
    assert_ne!(a.logit, b.logit);

    let table = params.get_mut("persona").unwrap();
    let row0 = table.data[..16].to_vec();
    table.data[16..32].copy_from_slice(&row0);
    assert_eq!(predict(&params, &g, 0).unwrap().logit, predict(&params, &g, 1).unwrap().logit);

    params.config.persona_mode = PersonaMode::Off;
    let off = predict(&params, &g, 3).unwrap();
    assert!(off.conditioned_rep[256..].iter().all(|&x| x == 0.0));
    assert_eq!(off.logit, predict(&params, &g, 0).unwrap().logit);
}

#[test]
fn eval_is_reproducible_and_train_mode_is_seeded() {
    let cfg = small_config();
    let params = ModelParams::<f32>::init(&cfg, 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let g = random_graph(&mut rng, 8, cfg.text_dim);
    assert_eq!(predict(&params, &g, 1).unwrap(), predict(&params, &g, 1).unwrap());
    let run = |seed| {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let out = forward_batch(&params, &vars, &mut tape, &[&g], &[1], Mode::train(seed)).unwrap();
        tape.scalar(out.logits)
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn mean_readout_shapes() {
    let cfg = ModelConfig { readout: Readout::Mean, ..small_config() };
    let params = ModelParams::<f32>::init(&cfg, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let g = random_graph(&mut rng, 4, cfg.text_dim);
    let out = predict(&params, &g, 0).unwrap();
    assert_eq!(out.session_rep.len(), 128);
    assert_eq!(out.conditioned_rep.len(), 144);
}

fn inputs_of(params: &ModelParams<f64>) -> Vec<(Vec<usize>, Vec<f64>)> {
    params.params.iter().map(|p| (p.shape.clone(), p.data.clone())).collect()
}

#[test]
fn projection_weights_match_finite_differences() {
    let cfg = small_config();
    let params = ModelParams::<f64>::init(&cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g = random_graph(&mut rng, 4, cfg.text_dim);
    let probe: Vec<f64> = (0..4 * 128).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (tw, pw) = (params.layout.text_w, params.layout.peu_w);
    let all = inputs_of(&params);
    let inputs = vec![all[tw].clone(), all[pw].clone()];
    let report = grad_check(
        |tape: &mut Tape<f64>, xs: &[crate::autodiff::Var]| {
            let mut vars = params.bind(tape)?;
            vars[tw] = xs[0];
            vars[pw] = xs[1];
            let h = project_inputs(&params, &vars, tape, &[&g])?;
            let w = tape.constant(&[4, 128], probe.clone())?;
            let y = tape.mul(h, w)?;
            Ok(tape.sum(y))
        },
        &inputs,
        &GradCheckOptions { max_coords_per_input: Some(64), ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}
