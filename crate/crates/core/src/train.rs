//! Adam with global-norm clipping, warmup schedules, the training loop and
//! the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"ALIBILM\0"
//! version    u32       CHECKPOINT_VERSION
//! header_len u32       length of the JSON header
//! header     bytes     {"config": ModelConfig, "params": [{"name", "shape"}]}
//! count      u64       total number of scalars
//! data       count * f64 (LE), parameters in declared order
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batches, Corpus};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{Model, ModelConfig, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    InverseSqrt,
    Cosine,
    Constant,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse_sqrt" => Ok(Schedule::InverseSqrt),
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::arg(format!(
                "unknown schedule {other:?} (expected inverse_sqrt, cosine, constant)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Training subsequence length `L`.
    pub seq_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Validation perplexity every this many steps; 0 disables it.
    pub eval_every: usize,
    /// Cap on validation tokens used for periodic evaluation; 0 means all.
    pub eval_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seq_len: 64,
            batch_size: 32,
            steps: 2000,
            lr_peak: 3e-4,
            warmup_steps: 100,
            schedule: Schedule::InverseSqrt,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 500,
            eval_tokens: 16_384,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch_size == 0 {
            return Err(Error::arg("seq_len and batch_size must be positive"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::arg(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.lr_peak > 0.0) {
            return Err(Error::arg(format!("lr_peak must be positive, got {}", self.lr_peak)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::arg("adam betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.grad_clip < 0.0 {
            return Err(Error::arg("eps must be positive and grad_clip non-negative"));
        }
        Ok(())
    }
}

/// Learning rate for update number `step` (1-based; step 0 is before any
/// update). Linear warmup from 0 to `lr_peak`, then the chosen decay.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let peak = config.lr_peak;
    let warm = config.warmup_steps;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    match config.schedule {
        Schedule::Constant => peak,
        Schedule::InverseSqrt => {
            if step == 0 {
                peak
            } else {
                peak * (warm.max(1) as f64 / step as f64).sqrt().min(1.0)
            }
        }
        Schedule::Cosine => {
            let span = config.steps.saturating_sub(warm);
            if span == 0 {
                return peak;
            }
            let progress = ((step - warm) as f64 / span as f64).min(1.0);
            0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            grad_clip: c.grad_clip,
        }
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0, |acc, x| acc + x * x)
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// One bias-corrected Adam update after global-norm clipping. Returns the
/// pre-clip gradient norm.
pub fn adam_step(
    params: &mut [Param],
    grads: &mut [Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::arg("parameter, gradient and state counts differ"));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if g.len() != p.numel() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient in {}", p.name)));
        }
    }
    let norm = clip_grad_norm(grads, hyper.grad_clip);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for j in 0..p.data.len() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidRecord {
    pub step: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub valid: Vec<ValidRecord>,
}

impl TrainLog {
    /// `(step, loss, lr)` triples; everything except wall time.
    pub fn trajectory(&self) -> Vec<(usize, f64, f64)> {
        self.steps.iter().map(|s| (s.step, s.loss, s.lr)).collect()
    }

    /// CSV `step,loss,lr,elapsed_s`. Without `wall_time` the elapsed column
    /// is written as 0 so the file is reproducible.
    pub fn write_csv<W: Write>(&self, out: W, wall_time: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "lr", "elapsed_s"])?;
        for s in &self.steps {
            let elapsed = if wall_time { s.elapsed_s } else { 0.0 };
            w.write_record([
                s.step.to_string(),
                s.loss.to_string(),
                s.lr.to_string(),
                format!("{elapsed:.3}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io("train log", e))?;
        Ok(())
    }

    pub fn write_valid_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "ppl"])?;
        for v in &self.valid {
            w.write_record([v.step.to_string(), v.perplexity.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("valid log", e))?;
        Ok(())
    }
}

pub fn train(model: &mut Model, corpus: &Corpus, config: &TrainConfig) -> Result<TrainLog> {
    train_with(model, corpus, config, |_| {})
}

/// Runs exactly `config.steps` Adam updates on shuffled windows of the
/// train split, calling `observe` after each one.
pub fn train_with(
    model: &mut Model,
    corpus: &Corpus,
    config: &TrainConfig,
    mut observe: impl FnMut(&StepRecord),
) -> Result<TrainLog> {
    config.validate()?;
    let mut log = TrainLog::default();
    if config.steps == 0 {
        return Ok(log);
    }
    let mut batches = Batches::new(corpus.train(), config.seq_len, config.batch_size, config.seed)?.repeating();
    let mut state = AdamState::new(model.params());
    let hyper = AdamHyper::from(config);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let valid = match (config.eval_tokens, corpus.valid()) {
        (0, v) => v,
        (n, v) => &v[..n.min(v.len())],
    };
    let start = Instant::now();

    for step in 1..=config.steps {
        let batch = batches.next().expect("repeating iterator never ends");
        let lr = lr_at(step, config);
        let (loss, leaves) = model.loss(&batch.inputs, &batch.targets, batch.batch_size, Some(&mut dropout_rng))?;
        let loss_value = loss.item()?;
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!(
                "loss {loss_value} at step {step} (lr {lr:e}, previous grad norm {:e})",
                log.steps.last().map_or(0.0, |s| s.grad_norm)
            )));
        }
        loss.backward()?;
        let mut grads: Vec<Vec<f64>> = leaves
            .iter()
            .zip(model.params())
            .map(|(leaf, p)| leaf.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        let grad_norm = adam_step(model.params_mut(), &mut grads, &mut state, lr, hyper).map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!("{msg} at step {step} (lr {lr:e})")),
            other => other,
        })?;
        let record = StepRecord {
            step,
            loss: loss_value,
            lr,
            grad_norm,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        observe(&record);
        log.steps.push(record);

        if config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps) && valid.len() >= 2 {
            let rec = eval::ppl_nonoverlapping(&*model, valid, config.seq_len.max(2))?;
            log.valid.push(ValidRecord {
                step,
                perplexity: rec.perplexity,
            });
        }
    }
    Ok(log)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ALIBILM\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    params: Vec<ParamHeader>,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|p| ParamHeader {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header_len =
        u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&header_len.to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    w.write_all(&(model.param_count() as u64).to_le_bytes()).map_err(io)?;
    for p in model.params() {
        for x in &p.data {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}

fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let corrupt = |what: &str| Error::Checkpoint(format!("corrupt checkpoint: {what}"));
    let mut cur = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(corrupt(what));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(take(4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(take(header_len, "header")?).map_err(|e| corrupt(&e.to_string()))?;
    let count = u64::from_le_bytes(take(8, "count")?.try_into().expect("8 bytes")) as usize;
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if count != expected {
        return Err(corrupt("parameter count disagrees with header"));
    }
    let body = take(count.checked_mul(8).ok_or_else(|| corrupt("count overflow"))?, "data")?;
    if !cur.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let params = header
        .params
        .into_iter()
        .map(|h| {
            let n = h.shape.iter().product();
            Param {
                name: h.name,
                shape: h.shape,
                data: values.by_ref().take(n).collect(),
            }
        })
        .collect();
    Model::from_params(header.config, params)
}
