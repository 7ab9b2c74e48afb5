//! Decoder-only transformer language model.
//!
//! Pre-norm blocks (`x + Attn(LN(x))`, `x + FFN(LN(x))`), a final layer
//! norm and an output projection tied to the token embedding. How position
//! enters the network is decided by [`PositionMethod`]:
//!
//! | method       | where                                   | learned |
//! |--------------|-----------------------------------------|---------|
//! | `None`       | nowhere (causal mask only)              | no      |
//! | `Sinusoidal` | added to the embeddings before layer 1  | no      |
//! | `Rotary`     | rotates queries and keys in every layer | no      |
//! | `T5Bias`     | bucketed bias added to attention scores | yes     |
//! | `Alibi`      | linear distance bias fused into mask    | no      |
//!
//! Value vectors never receive position information.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::position::{self, T5_DEFAULT_BUCKETS, T5_DEFAULT_MAX_DISTANCE};
use crate::tensor::{nll_rows, AttentionDims, Tensor};

pub const BYTE_VOCAB: usize = 256;
const INIT_STD: f64 = 0.02;
pub const ROTARY_BASE: f64 = 10000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionMethod {
    None,
    Sinusoidal,
    Rotary {
        base: f64,
    },
    T5Bias {
        num_buckets: usize,
        max_distance: usize,
        /// One table for all layers when true, one per layer otherwise.
        shared: bool,
    },
    Alibi,
}

impl PositionMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PositionMethod::None => "none",
            PositionMethod::Sinusoidal => "sinusoidal",
            PositionMethod::Rotary { .. } => "rotary",
            PositionMethod::T5Bias { .. } => "t5",
            PositionMethod::Alibi => "alibi",
        }
    }

    pub fn rotary() -> Self {
        PositionMethod::Rotary { base: ROTARY_BASE }
    }

    pub fn t5() -> Self {
        PositionMethod::T5Bias {
            num_buckets: T5_DEFAULT_BUCKETS,
            max_distance: T5_DEFAULT_MAX_DISTANCE,
            shared: true,
        }
    }

    pub fn all_defaults() -> [PositionMethod; 5] {
        [
            PositionMethod::None,
            PositionMethod::Sinusoidal,
            PositionMethod::rotary(),
            PositionMethod::t5(),
            PositionMethod::Alibi,
        ]
    }
}

impl fmt::Display for PositionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PositionMethod {
    type Err = Error;

    /// Parses a method name, using default parameters.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(PositionMethod::None),
            "sinusoidal" => Ok(PositionMethod::Sinusoidal),
            "rotary" => Ok(PositionMethod::rotary()),
            "t5" | "t5_bias" => Ok(PositionMethod::t5()),
            "alibi" => Ok(PositionMethod::Alibi),
            other => Err(Error::arg(format!(
                "unknown position method {other:?} (expected none, sinusoidal, rotary, t5, alibi)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub position: PositionMethod,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: BYTE_VOCAB,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 256,
            position: PositionMethod::Alibi,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::arg(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ffn == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        match &self.position {
            PositionMethod::Rotary { base } => {
                if self.head_dim() % 2 != 0 {
                    return bad(format!("rotary needs an even head dim, got {}", self.head_dim()));
                }
                if !(*base > 1.0) {
                    return bad(format!("rotary base must exceed 1, got {base}"));
                }
            }
            PositionMethod::Sinusoidal if self.d_model % 2 != 0 => {
                return bad(format!("sinusoidal needs an even d_model, got {}", self.d_model));
            }
            PositionMethod::T5Bias {
                num_buckets,
                max_distance,
                ..
            } => {
                position::t5_bucket(0, *num_buckets, *max_distance)?;
            }
            _ => {}
        }
        Ok(())
    }
}

/// A named, flat, row-major parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Parameter indices of one block, into `Model::params`.
#[derive(Debug, Clone)]
struct BlockIds {
    ln1_gain: usize,
    ln1_offset: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_gain: usize,
    ln2_offset: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    t5_table: Option<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    blocks: Vec<BlockIds>,
    final_gain: usize,
    final_offset: usize,
}

fn build_layout(config: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = config.d_model;
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push((name, shape, init));
        specs.len() - 1
    };
    let embed = push("embed".into(), vec![config.vocab_size, d], Init::Normal);
    let t5 = match &config.position {
        PositionMethod::T5Bias {
            num_buckets,
            shared,
            ..
        } => Some((*num_buckets, *shared)),
        _ => None,
    };
    let shared_table = match t5 {
        Some((nb, true)) => Some(push("t5.table".into(), vec![nb, config.n_heads], Init::Normal)),
        _ => None,
    };
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let ln1_gain = push(p("ln1.gain"), vec![d], Init::Ones);
        let ln1_offset = push(p("ln1.offset"), vec![d], Init::Zeros);
        let wq = push(p("attn.wq"), vec![d, d], Init::Normal);
        let wk = push(p("attn.wk"), vec![d, d], Init::Normal);
        let wv = push(p("attn.wv"), vec![d, d], Init::Normal);
        let wo = push(p("attn.wo"), vec![d, d], Init::Normal);
        let t5_table = match t5 {
            Some((nb, false)) => Some(push(p("t5.table"), vec![nb, config.n_heads], Init::Normal)),
            _ => shared_table,
        };
        let ln2_gain = push(p("ln2.gain"), vec![d], Init::Ones);
        let ln2_offset = push(p("ln2.offset"), vec![d], Init::Zeros);
        let w1 = push(p("ffn.w1"), vec![d, config.d_ffn], Init::Normal);
        let b1 = push(p("ffn.b1"), vec![config.d_ffn], Init::Zeros);
        let w2 = push(p("ffn.w2"), vec![config.d_ffn, d], Init::Normal);
        let b2 = push(p("ffn.b2"), vec![d], Init::Zeros);
        blocks.push(BlockIds {
            ln1_gain,
            ln1_offset,
            wq,
            wk,
            wv,
            wo,
            ln2_gain,
            ln2_offset,
            w1,
            b1,
            w2,
            b2,
            t5_table,
        });
    }
    let final_gain = push("final_ln.gain".into(), vec![d], Init::Ones);
    let final_offset = push("final_ln.offset".into(), vec![d], Init::Zeros);
    (
        Layout {
            embed,
            blocks,
            final_gain,
            final_offset,
        },
        specs,
    )
}

/// Transformer parameters plus their configuration. Parameters are plain
/// arrays; every forward pass wraps them in fresh graph leaves, so a model
/// can be shared across threads for inference.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

/// Result of a traced forward pass over a batch.
pub struct Forward {
    /// `[batch * T, vocab]`
    pub logits: Tensor,
    /// One leaf per parameter, in declared order.
    pub leaves: Vec<Tensor>,
    /// `[batch, heads, T, T]` attention probabilities per layer, when requested.
    pub attention: Vec<Vec<f64>>,
}

impl Model {
    /// Fresh model initialised from `config.seed`: `N(0, 0.02)` for
    /// embeddings, projections and T5 tables, ones/zeros for layer norms,
    /// zeros for FFN biases.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored parameter arrays, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Model> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if specs.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter arrays, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, name, shape
                )));
            }
        }
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Number of learned scalars; the tied embedding is counted once.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Untraced logits `[T, vocab]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        self.forward_batch(tokens, 1)
    }

    /// Untraced logits `[batch * T, vocab]` for `batch` equal-length sequences
    /// laid out back to back.
    pub fn forward_batch(&self, tokens: &[usize], batch: usize) -> Result<Vec<f64>> {
        let fwd = self.run(tokens, batch, false, false, None)?;
        Ok(fwd.logits.data().to_vec())
    }

    /// Per-token negative log-likelihoods (nats) of `targets` given `inputs`.
    pub fn token_nll(&self, inputs: &[usize], targets: &[usize]) -> Result<Vec<f64>> {
        if targets.len() > inputs.len() {
            return Err(Error::arg("more targets than inputs"));
        }
        let logits = self.forward(inputs)?;
        let v = self.config.vocab_size;
        nll_rows(&logits[..targets.len() * v], v, targets)
    }

    /// Logits plus the attention probabilities of every layer.
    pub fn forward_inspect(&self, tokens: &[usize]) -> Result<Forward> {
        self.run(tokens, 1, false, true, None)
    }

    /// Traced forward pass for training. `dropout_rng` enables dropout
    /// (when the configured rate is non-zero).
    pub fn forward_traced(
        &self,
        tokens: &[usize],
        batch: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        self.run(tokens, batch, true, false, dropout_rng)
    }

    /// Mean next-token cross-entropy of a batch, as a traced scalar.
    pub fn loss(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let fwd = self.forward_traced(inputs, batch, dropout_rng)?;
        let loss = fwd.logits.cross_entropy(targets)?;
        Ok((loss, fwd.leaves))
    }

    fn run(
        &self,
        tokens: &[usize],
        batch: usize,
        trace: bool,
        keep_attention: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::arg(format!(
                "{} tokens cannot form {batch} equal non-empty sequences",
                tokens.len()
            )));
        }
        let t = tokens.len() / batch;
        let d = cfg.d_model;
        let leaves: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| {
                if trace {
                    Tensor::param(p.data.clone(), &p.shape)
                } else {
                    Tensor::new(p.data.clone(), &p.shape)
                }
            })
            .collect::<Result<_>>()?;
        let w = |i: usize| &leaves[i];
        let dropout = match dropout_rng.as_deref_mut() {
            Some(_) if cfg.dropout > 0.0 => cfg.dropout,
            _ => 0.0,
        };

        let mut x = w(self.layout.embed).embedding(tokens)?.scale((d as f64).sqrt());
        if cfg.position == PositionMethod::Sinusoidal {
            let table = position::sinusoidal_table(t, d)?;
            let tiled = Tensor::new(table.repeat(batch), &[batch * t, d])?;
            x = x.add(&tiled)?;
        }

        let constant_bias = match &cfg.position {
            PositionMethod::Alibi => Some(position::alibi_mask(cfg.n_heads, t)?),
            PositionMethod::T5Bias { .. } => None,
            _ => Some(position::causal_bias(cfg.n_heads, t)?),
        }
        .map(|m| Tensor::new(m.values, &[cfg.n_heads, t, t]))
        .transpose()?;
        let t5_index = match &cfg.position {
            PositionMethod::T5Bias {
                num_buckets,
                max_distance,
                ..
            } => Some(position::t5_bucket_index(t, *num_buckets, *max_distance)?),
            _ => None,
        };
        let rotation = match &cfg.position {
            PositionMethod::Rotary { base } => {
                Some(Rc::new(position::rotary_tables(t, cfg.head_dim(), *base)?))
            }
            _ => None,
        };
        let dims = AttentionDims {
            batch,
            seq_len: t,
            heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
        };

        let mut attention = Vec::new();
        let mut shared_t5: Option<(usize, Tensor)> = None;
        for block in &self.layout.blocks {
            let h = x.layer_norm(w(block.ln1_gain), w(block.ln1_offset))?;
            let mut q = h.matmul(w(block.wq))?;
            let mut k = h.matmul(w(block.wk))?;
            let v = h.matmul(w(block.wv))?;
            if let Some(tables) = &rotation {
                q = q.rotate_pairs(tables.clone())?;
                k = k.rotate_pairs(tables.clone())?;
            }
            let bias = match (&constant_bias, block.t5_table, &t5_index) {
                (Some(b), _, _) => b.clone(),
                (None, Some(id), Some(index)) => match &shared_t5 {
                    Some((cached, b)) if *cached == id => b.clone(),
                    _ => {
                        let b = w(id).gather_bias(index, t)?;
                        shared_t5 = Some((id, b.clone()));
                        b
                    }
                },
                _ => unreachable!("every position method yields an attention bias"),
            };
            let a = if keep_attention {
                let (a, probs) = Tensor::attention_with_probs(&q, &k, &v, &bias, dims)?;
                attention.push(probs);
                a
            } else {
                Tensor::attention(&q, &k, &v, &bias, dims)?
            };
            let a = apply_dropout(a.matmul(w(block.wo))?, dropout, dropout_rng.as_deref_mut())?;
            x = x.add(&a)?;

            let h = x.layer_norm(w(block.ln2_gain), w(block.ln2_offset))?;
            let f = h.matmul(w(block.w1))?.add_row(w(block.b1))?.gelu();
            let f = f.matmul(w(block.w2))?.add_row(w(block.b2))?;
            let f = apply_dropout(f, dropout, dropout_rng.as_deref_mut())?;
            x = x.add(&f)?;
        }
        let x = x.layer_norm(w(self.layout.final_gain), w(self.layout.final_offset))?;
        let logits = x.matmul_t(w(self.layout.embed))?;
        Ok(Forward {
            logits,
            leaves,
            attention,
        })
    }
}

fn apply_dropout(x: Tensor, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    x.mul(&Tensor::new(mask, x.shape())?)
}

/// Single-head attention from tensor primitives:
/// `softmax_rows(Q K^T / sqrt(d_head) + bias) V` with `[T, d_head]` inputs
/// and a `[T, T]` bias that already carries the causal mask.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d_head = q.shape().get(1).copied().unwrap_or(0);
    if k.shape() != q.shape() || v.shape().first() != q.shape().first() {
        return Err(Error::Dimension {
            op: "attend",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let scores = q.matmul_t(k)?.scale(1.0 / (d_head as f64).sqrt());
    scores.add(bias)?.softmax_rows()?.matmul(v)
}
