//! Run configuration and the `train` / `eval` / `sweep` / `compare` commands.
//!
//! Configs are flat TOML documents. Every key is optional; the defaults are
//! the desk-scale setup (2 layers, `d_model = 64`, 4 heads, `L = 64`,
//! ALiBi). Unknown keys are rejected.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_corpus, split, Corpus};
use crate::error::{Error, Result};
use crate::eval::{self, EvalMode, EvalRecord, SweepRow};
use crate::model::{Model, ModelConfig, PositionMethod, BYTE_VOCAB};
use crate::position;
use crate::train::{self, Schedule, TrainConfig};

pub const SEED_ENV: &str = "ALIBI_LM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub position_method: String,
    pub rotary_base: f64,
    pub t5_num_buckets: usize,
    pub t5_max_distance: usize,
    pub t5_shared: bool,
    pub dropout: f64,
    // training
    pub seq_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_tokens: usize,
    // data
    pub corpus: PathBuf,
    pub split: [f64; 3],
    /// `valid`, `test` or `all` (the whole file, unsplit).
    pub eval_split: String,
    /// Evaluate on at most this many tokens of the split; 0 means all.
    pub max_eval_tokens: usize,
    // evaluation
    pub lengths: Vec<usize>,
    pub mode: EvalMode,
    /// Sliding-window stride; 0 means `L_valid` (nonoverlapping-equivalent).
    pub stride: usize,
    // compare
    pub methods: Vec<String>,
    // output
    pub out_dir: PathBuf,
    /// Write real timings into CSVs; off keeps reruns byte-identical.
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            vocab_size: BYTE_VOCAB,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ffn: m.d_ffn,
            position_method: "alibi".into(),
            rotary_base: crate::model::ROTARY_BASE,
            t5_num_buckets: position::T5_DEFAULT_BUCKETS,
            t5_max_distance: position::T5_DEFAULT_MAX_DISTANCE,
            t5_shared: true,
            dropout: m.dropout,
            seq_len: t.seq_len,
            batch_size: t.batch_size,
            steps: t.steps,
            lr_peak: t.lr_peak,
            warmup_steps: t.warmup_steps,
            schedule: t.schedule,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            grad_clip: t.grad_clip,
            seed: t.seed,
            eval_every: t.eval_every,
            eval_tokens: t.eval_tokens,
            corpus: PathBuf::from("data/shakespeare.txt"),
            split: [0.9, 0.05, 0.05],
            eval_split: "valid".into(),
            max_eval_tokens: 0,
            lengths: vec![64, 128, 256],
            mode: EvalMode::Nonoverlapping,
            stride: 0,
            methods: vec!["sinusoidal".into(), "alibi".into()],
            out_dir: PathBuf::from("runs/default"),
            record_wall_time: false,
        }
    }
}

/// 1-based line on which `key` is assigned, if it is.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        l.trim_start()
            .strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn flatten(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses a flat TOML config; missing keys take their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(flatten(&e.to_string())))?;
    config.check().map_err(|(key, msg)| {
        let at = line_of(text, key).map_or_else(|| "default".to_string(), |l| format!("line {l}"));
        Error::Config(format!("key `{key}` ({at}): {}", flatten(&msg)))
    })?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

impl RunConfig {
    /// Checks every invariant, naming the offending key.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let method: PositionMethod = self
            .position_method
            .parse()
            .map_err(|e: Error| ("position_method", e.to_string()))?;
        for m in &self.methods {
            m.parse::<PositionMethod>().map_err(|e| ("methods", e.to_string()))?;
        }
        if self.vocab_size != BYTE_VOCAB {
            return Err(("vocab_size", format!("byte-level corpora need vocab_size = {BYTE_VOCAB}")));
        }
        let model = self.model_config_for(&method);
        if let Err(e) = model.validate() {
            let key = match &method {
                _ if model.n_heads == 0 || model.d_model % model.n_heads != 0 => "n_heads",
                PositionMethod::Rotary { .. } if self.rotary_base <= 1.0 => "rotary_base",
                PositionMethod::Rotary { .. } => "n_heads",
                PositionMethod::T5Bias { .. } => "t5_num_buckets",
                _ if !(0.0..1.0).contains(&self.dropout) => "dropout",
                _ => "d_model",
            };
            return Err((key, e.to_string()));
        }
        if let Err(e) = self.train_config().validate() {
            let key = if self.warmup_steps > self.steps {
                "warmup_steps"
            } else if !(self.lr_peak > 0.0) {
                "lr_peak"
            } else if self.seq_len == 0 {
                "seq_len"
            } else if self.batch_size == 0 {
                "batch_size"
            } else {
                "beta1"
            };
            return Err((key, e.to_string()));
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(("split", format!("fractions must be positive and sum to 1, got {:?}", self.split)));
        }
        if !matches!(self.eval_split.as_str(), "valid" | "test" | "all") {
            return Err(("eval_split", format!("expected valid, test or all, got {:?}", self.eval_split)));
        }
        if self.lengths.is_empty() || self.lengths.iter().any(|&l| l < 2) {
            return Err(("lengths", format!("need lengths >= 2, got {:?}", self.lengths)));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(("lengths", format!("must be strictly ascending, got {:?}", self.lengths)));
        }
        if self.mode == EvalMode::Sliding && self.lengths.iter().any(|&l| self.stride > l) {
            return Err(("stride", format!("stride {} exceeds an L_valid in {:?}", self.stride, self.lengths)));
        }
        if self.methods.is_empty() {
            return Err(("methods", "need at least one method".into()));
        }
        Ok(())
    }

    pub fn position(&self) -> Result<PositionMethod> {
        let method: PositionMethod = self.position_method.parse()?;
        Ok(self.with_params(method))
    }

    fn with_params(&self, method: PositionMethod) -> PositionMethod {
        match method {
            PositionMethod::Rotary { .. } => PositionMethod::Rotary {
                base: self.rotary_base,
            },
            PositionMethod::T5Bias { .. } => PositionMethod::T5Bias {
                num_buckets: self.t5_num_buckets,
                max_distance: self.t5_max_distance,
                shared: self.t5_shared,
            },
            other => other,
        }
    }

    fn model_config_for(&self, method: &PositionMethod) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ffn: self.d_ffn,
            position: self.with_params(method.clone()),
            dropout: self.dropout,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(self.model_config_for(&self.position()?))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seq_len: self.seq_len,
            batch_size: self.batch_size,
            steps: self.steps,
            lr_peak: self.lr_peak,
            warmup_steps: self.warmup_steps,
            schedule: self.schedule,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_tokens: self.eval_tokens,
        }
    }

    /// ALiBi slopes this config resolves to, if the method is ALiBi.
    pub fn alibi_slopes(&self) -> Result<Option<Vec<f64>>> {
        Ok(match self.position()? {
            PositionMethod::Alibi => Some(position::alibi_slopes(self.n_heads)?.slopes),
            _ => None,
        })
    }

    /// Referenced input paths that do not exist.
    pub fn missing_paths(&self) -> Vec<PathBuf> {
        [&self.corpus]
            .into_iter()
            .filter(|p| !p.exists())
            .cloned()
            .collect()
    }

    /// Applies an `ALIBI_LM_SEED`-style override.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// TOML with every key present, plus the derived ALiBi slopes as a comment.
    pub fn to_resolved_toml(&self) -> Result<String> {
        let mut text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(slopes) = self.alibi_slopes()? {
            text.push_str(&format!("# alibi slopes: {slopes:?}\n"));
        }
        Ok(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Sweep,
    Compare,
}

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub lengths: Option<Vec<usize>>,
    pub mode: Option<EvalMode>,
    pub stride: Option<usize>,
}

/// Files written by a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub artifacts: Vec<PathBuf>,
    pub records: Vec<SweepRow>,
}

fn corpus_for(config: &RunConfig) -> Result<Corpus> {
    let corpus = load_corpus(&config.corpus)?;
    if config.eval_split == "all" {
        return Ok(corpus);
    }
    split(corpus, config.split)
}

fn eval_tokens<'a>(config: &RunConfig, corpus: &'a Corpus) -> &'a [usize] {
    let tokens = match config.eval_split.as_str() {
        "test" => corpus.test(),
        "all" => &corpus.tokens[..],
        _ => corpus.valid(),
    };
    match config.max_eval_tokens {
        0 => tokens,
        n => &tokens[..n.min(tokens.len())],
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn evaluate(model: &Model, tokens: &[usize], l_valid: usize, mode: EvalMode, stride: usize) -> Result<EvalRecord> {
    match mode {
        EvalMode::Nonoverlapping => eval::ppl_nonoverlapping(model, tokens, l_valid),
        EvalMode::Sliding => {
            let s = if stride == 0 { l_valid } else { stride };
            eval::ppl_sliding(model, tokens, l_valid, s)
        }
    }
}

fn train_one(
    config: &RunConfig,
    method: &PositionMethod,
    corpus: &Corpus,
    out: &Path,
    report: &mut RunReport,
) -> Result<Model> {
    let mut model = Model::new(config.model_config_for(method))?;
    let tc = config.train_config();
    let name = method.name();
    let every = tc.eval_every.max(1);
    let log = train::train_with(&mut model, corpus, &tc, |s| {
        if s.step % every == 0 || s.step == tc.steps {
            eprintln!(
                "[{name}] step {}/{} loss {:.4} lr {:.2e} |g| {:.3} {:.1}s",
                s.step, tc.steps, s.loss, s.lr, s.grad_norm, s.elapsed_s
            );
        }
    })?;
    let ckpt = out.join(format!("{name}.ckpt"));
    train::save_checkpoint(&model, &ckpt)?;
    let log_path = out.join(format!("{name}_train_log.csv"));
    log.write_csv(create(&log_path)?, config.record_wall_time)?;
    let valid_path = out.join(format!("{name}_valid_log.csv"));
    log.write_valid_csv(create(&valid_path)?)?;
    report.artifacts.extend([ckpt, log_path, valid_path]);
    Ok(model)
}

fn sweep_rows(config: &RunConfig, model: &Model, tokens: &[usize]) -> Result<Vec<SweepRow>> {
    let name = model.config().position.name();
    config
        .lengths
        .iter()
        .map(|&l| {
            let rec = evaluate(model, tokens, l, config.mode, config.stride)
                .map_err(|e| Error::arg(format!("L_valid={l}: {e}")))?;
            Ok(SweepRow::new(name, config.seq_len, &rec, config.record_wall_time))
        })
        .collect()
}

fn write_rows(path: PathBuf, rows: &[SweepRow], report: &mut RunReport) -> Result<()> {
    eval::write_sweep_csv(create(&path)?, rows)?;
    report.artifacts.push(path);
    report.records.extend_from_slice(rows);
    Ok(())
}

/// Executes one command. The resolved config is written to
/// `<out>/config.toml` before anything else.
pub fn run(command: Command, mut config: RunConfig, options: &RunOptions) -> Result<RunReport> {
    if let Some(out) = &options.out {
        config.out_dir = out.clone();
    }
    if let Some(lengths) = &options.lengths {
        config.lengths = lengths.clone();
    }
    if let Some(mode) = options.mode {
        config.mode = mode;
    }
    if let Some(stride) = options.stride {
        config.stride = stride;
    }
    if command == Command::Eval && options.lengths.is_none() {
        config.lengths = vec![config.seq_len];
    }
    let resolved = config.to_resolved_toml()?;
    parse_config(&resolved)?;

    let out = config.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut report = RunReport::default();
    let config_path = out.join("config.toml");
    fs::write(&config_path, resolved).map_err(|e| Error::io(&config_path, e))?;
    report.artifacts.push(config_path);

    let corpus = corpus_for(&config)?;
    let checkpoint = || {
        options
            .checkpoint
            .clone()
            .map_or_else(|| config.position().map(|m| out.join(format!("{}.ckpt", m.name()))), Ok)
    };
    match command {
        Command::Train => {
            train_one(&config, &config.position()?, &corpus, &out, &mut report)?;
        }
        Command::Eval => {
            if config.lengths.len() != 1 {
                return Err(Error::arg(format!(
                    "eval takes exactly one L_valid, got {:?}",
                    config.lengths
                )));
            }
            let model = train::load_checkpoint(checkpoint()?)?;
            let rows = sweep_rows(&config, &model, eval_tokens(&config, &corpus))?;
            write_rows(out.join("eval.csv"), &rows, &mut report)?;
        }
        Command::Sweep => {
            let model = train::load_checkpoint(checkpoint()?)?;
            let rows = sweep_rows(&config, &model, eval_tokens(&config, &corpus))?;
            write_rows(out.join("sweep.csv"), &rows, &mut report)?;
        }
        Command::Compare => {
            let mut rows = Vec::new();
            for m in &config.methods {
                let method: PositionMethod = m.parse()?;
                let model = train_one(&config, &method, &corpus, &out, &mut report)?;
                rows.extend(sweep_rows(&config, &model, eval_tokens(&config, &corpus))?);
            }
            write_rows(out.join("compare.csv"), &rows, &mut report)?;
        }
    }
    Ok(report)
}
