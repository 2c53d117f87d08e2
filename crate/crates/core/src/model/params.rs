use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::peu::NUM_CATEGORIES;

/// A named, shaped, row-major parameter buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatLayout {
    pub edge_w: usize,
    pub edge_b: usize,
    pub w_src: usize,
    pub w_dst: usize,
    pub attn: usize,
    pub bias: usize,
}

/// Positions of each parameter inside [`ModelParams::params`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub text_ln_g: usize,
    pub text_ln_b: usize,
    pub text_w: usize,
    pub text_b: usize,
    pub peu_ln_g: usize,
    pub peu_ln_b: usize,
    pub peu_w: usize,
    pub peu_b: usize,
    pub fuse_ln_g: usize,
    pub fuse_ln_b: usize,
    pub gat: Vec<GatLayout>,
    pub lstm_wih: usize,
    pub lstm_whh: usize,
    pub lstm_b: usize,
    pub persona: usize,
    pub head_w1: usize,
    pub head_b1: usize,
    pub head_w2: usize,
    pub head_b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub params: Vec<Param<F>>,
    pub layout: Layout,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push((name.into(), shape.to_vec(), init));
        self.specs.len() - 1
    }
}

fn layout_for(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let h = cfg.hidden;
    let mut b = Builder { specs: Vec::new() };
    let text_ln_g = b.push("text_proj.ln.gamma", &[cfg.text_dim], Init::Ones);
    let text_ln_b = b.push("text_proj.ln.beta", &[cfg.text_dim], Init::Zeros);
    let text_w = b.push("text_proj.weight", &[cfg.text_dim, h], Init::Xavier);
    let text_b = b.push("text_proj.bias", &[h], Init::Zeros);
    let peu_ln_g = b.push("peu_proj.ln.gamma", &[NUM_CATEGORIES], Init::Ones);
    let peu_ln_b = b.push("peu_proj.ln.beta", &[NUM_CATEGORIES], Init::Zeros);
    let peu_w = b.push("peu_proj.weight", &[NUM_CATEGORIES, h], Init::Xavier);
    let peu_b = b.push("peu_proj.bias", &[h], Init::Zeros);
    let fuse_ln_g = b.push("fuse_ln.gamma", &[h], Init::Ones);
    let fuse_ln_b = b.push("fuse_ln.beta", &[h], Init::Zeros);
    let gat = (0..cfg.layers)
        .map(|l| GatLayout {
            edge_w: b.push(format!("gat.{l}.edge.weight"), &[NUM_CATEGORIES, h], Init::Xavier),
            edge_b: b.push(format!("gat.{l}.edge.bias"), &[h], Init::Zeros),
            w_src: b.push(format!("gat.{l}.w_src"), &[h, h], Init::Xavier),
            w_dst: b.push(format!("gat.{l}.w_dst"), &[h, h], Init::Xavier),
            attn: b.push(format!("gat.{l}.attn"), &[cfg.heads, cfg.head_dim()], Init::Xavier),
            bias: b.push(format!("gat.{l}.bias"), &[h], Init::Zeros),
        })
        .collect();
    let lstm_wih = b.push("set2set.w_ih", &[2 * h, 4 * h], Init::Xavier);
    let lstm_whh = b.push("set2set.w_hh", &[h, 4 * h], Init::Xavier);
    let lstm_b = b.push("set2set.bias", &[4 * h], Init::Zeros);
    let persona = b.push("persona", &[cfg.num_personas, cfg.persona_dim], Init::Normal(0.02));
    let head_w1 = b.push("head.0.weight", &[cfg.conditioned_dim(), cfg.mlp_hidden], Init::Xavier);
    let head_b1 = b.push("head.0.bias", &[cfg.mlp_hidden], Init::Zeros);
    let head_w2 = b.push("head.1.weight", &[cfg.mlp_hidden, 1], Init::Xavier);
    let head_b2 = b.push("head.1.bias", &[1], Init::Zeros);
    let layout = Layout {
        text_ln_g,
        text_ln_b,
        text_w,
        text_b,
        peu_ln_g,
        peu_ln_b,
        peu_w,
        peu_b,
        fuse_ln_g,
        fuse_ln_b,
        gat,
        lstm_wih,
        lstm_whh,
        lstm_b,
        persona,
        head_w1,
        head_b1,
        head_w2,
        head_b2,
    };
    (layout, b.specs)
}

impl<F: Scalar> ModelParams<F> {
    /// Xavier-uniform weights, zero biases, unit LN gains and a small normal
    /// persona table, all drawn from one seeded stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout_for(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Xavier => {
                        let (fan_in, fan_out) = (shape[0], shape.get(1).copied().unwrap_or(1));
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                Param {
                    name,
                    shape,
                    data: data.into_iter().map(F::of).collect(),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            layout,
        })
    }

    /// Rebuilds a parameter set from stored buffers, checking every name and
    /// shape against the architecture implied by `config`.
    pub fn from_params(config: &ModelConfig, params: Vec<Param<F>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout_for(config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "architecture expects {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {} {:?}",
                    p.name, p.shape
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
            layout,
        })
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| G::of(v.as_f64())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn same_architecture<G>(&self, other: &ModelParams<G>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
            && self.config.persona_mode == other.config.persona_mode
            && self.config.readout == other.config.readout
    }

    /// Registers every parameter as a trainable leaf, in layout order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.param(&p.shape, p.data.clone())).collect()
    }

    /// Reads the gradients of bound parameters; untouched ones are zero.
    pub fn grads(&self, tape: &Tape<F>, vars: &[Var]) -> Vec<Vec<F>> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| tape.grad(v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); p.data.len()]))
            .collect()
    }
}
