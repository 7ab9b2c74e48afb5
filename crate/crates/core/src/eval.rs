//! Perplexity under nonoverlapping and sliding-window inference,
//! extrapolation sweeps over `L_valid`, and per-position loss.
//!
//! A stream of `N` tokens is fed to the model in windows of at most
//! `L_valid` input positions. Position `p` predicts token `p + 1`, so the
//! stream has `N - 1` scorable predictions and the last input position has
//! no target. Both protocols score every prediction exactly once:
//!
//! * nonoverlapping: windows start at `0, L, 2L, ...`; `ceil(N / L)` passes.
//! * sliding (stride `S`): the first window scores all of its predictions,
//!   every later window starts `S` tokens further on and scores only the
//!   positions no earlier window reached; `1 + ceil((N - L) / S)` passes.
//!
//! Per-token NLLs are reduced left to right in stream order, so
//! `ppl_sliding(S = L)` and `ppl_nonoverlapping` agree bit for bit.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

/// Anything that can assign next-token NLLs to a window of tokens.
pub trait Scorer {
    /// NLL (nats) at window positions `0..targets.len()`, where position `p`
    /// sees `inputs[..=p]` and predicts `targets[p]`. The whole window is
    /// encoded even if `targets` is shorter (or empty).
    fn window_nll(&self, inputs: &[usize], targets: &[usize]) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn window_nll(&self, inputs: &[usize], targets: &[usize]) -> Result<Vec<f64>> {
        self.token_nll(inputs, targets)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn window_nll(&self, inputs: &[usize], targets: &[usize]) -> Result<Vec<f64>> {
        (**self).window_nll(inputs, targets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Nonoverlapping,
    Sliding,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Nonoverlapping => "nonoverlapping",
            EvalMode::Sliding => "sliding",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonoverlapping" => Ok(EvalMode::Nonoverlapping),
            "sliding" => Ok(EvalMode::Sliding),
            other => Err(Error::arg(format!(
                "unknown eval mode {other:?} (expected nonoverlapping or sliding)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub l_valid: usize,
    pub mode: EvalMode,
    /// Equal to `l_valid` for nonoverlapping evaluation.
    pub stride: usize,
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens_scored: usize,
    pub passes: usize,
    pub wall_seconds: f64,
}

/// Per-token scores of one protocol run, in stream order.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub nll: Vec<f64>,
    pub passes: usize,
}

fn check_stream(tokens: &[usize], l_valid: usize) -> Result<()> {
    if l_valid < 2 {
        return Err(Error::arg(format!("L_valid must be at least 2, got {l_valid}")));
    }
    if tokens.len() < 2 {
        return Err(Error::arg("need at least two tokens to score a prediction"));
    }
    Ok(())
}

/// Scores the predictions of window `[start, end)` at positions `from..end`.
fn score_window<S: Scorer + ?Sized>(
    scorer: &S,
    tokens: &[usize],
    start: usize,
    end: usize,
    from: usize,
    out: &mut Vec<f64>,
) -> Result<()> {
    let n = tokens.len();
    let target_end = end.min(n - 1);
    let targets = &tokens[start + 1..target_end + 1];
    let nll = scorer.window_nll(&tokens[start..end], targets)?;
    if from < target_end {
        out.extend_from_slice(&nll[from - start..]);
    }
    Ok(())
}

pub fn score_nonoverlapping<S: Scorer + ?Sized>(scorer: &S, tokens: &[usize], l_valid: usize) -> Result<Scored> {
    score_sliding(scorer, tokens, l_valid, l_valid)
}

pub fn score_sliding<S: Scorer + ?Sized>(
    scorer: &S,
    tokens: &[usize],
    l_valid: usize,
    stride: usize,
) -> Result<Scored> {
    check_stream(tokens, l_valid)?;
    if stride == 0 || stride > l_valid {
        return Err(Error::arg(format!(
            "stride must be in [1, {l_valid}], got {stride}"
        )));
    }
    let n = tokens.len();
    let mut nll = Vec::with_capacity(n - 1);
    let mut end = l_valid.min(n);
    score_window(scorer, tokens, 0, end, 0, &mut nll)?;
    let mut passes = 1;
    let mut start = 0;
    while end < n {
        start += stride;
        let next_end = (start + l_valid).min(n);
        score_window(scorer, tokens, start, next_end, end, &mut nll)?;
        end = next_end;
        passes += 1;
    }
    debug_assert_eq!(nll.len(), n - 1);
    Ok(Scored { nll, passes })
}

fn record(scored: Scored, l_valid: usize, mode: EvalMode, stride: usize, started: Instant) -> EvalRecord {
    let total = scored.nll.iter().fold(0.0, |acc, x| acc + x);
    let mean_nll = total / scored.nll.len() as f64;
    EvalRecord {
        l_valid,
        mode,
        stride,
        perplexity: mean_nll.exp(),
        mean_nll,
        tokens_scored: scored.nll.len(),
        passes: scored.passes,
        wall_seconds: started.elapsed().as_secs_f64(),
    }
}

/// Independent `L_valid` windows, each prediction scored once.
pub fn ppl_nonoverlapping<S: Scorer + ?Sized>(scorer: &S, tokens: &[usize], l_valid: usize) -> Result<EvalRecord> {
    let started = Instant::now();
    let scored = score_nonoverlapping(scorer, tokens, l_valid)?;
    Ok(record(scored, l_valid, EvalMode::Nonoverlapping, l_valid, started))
}

/// Window of `L_valid` advanced by `stride` tokens per pass.
pub fn ppl_sliding<S: Scorer + ?Sized>(
    scorer: &S,
    tokens: &[usize],
    l_valid: usize,
    stride: usize,
) -> Result<EvalRecord> {
    let started = Instant::now();
    let scored = score_sliding(scorer, tokens, l_valid, stride)?;
    Ok(record(scored, l_valid, EvalMode::Sliding, stride, started))
}

/// One evaluation per `L_valid` in ascending `lengths` on the same stream.
/// `stride` is required for sliding mode and ignored otherwise.
pub fn extrapolation_sweep<S: Scorer + ?Sized>(
    scorer: &S,
    tokens: &[usize],
    lengths: &[usize],
    mode: EvalMode,
    stride: Option<usize>,
) -> Result<Vec<EvalRecord>> {
    if lengths.is_empty() {
        return Err(Error::arg("sweep needs at least one length"));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg(format!("sweep lengths must be strictly ascending: {lengths:?}")));
    }
    lengths
        .iter()
        .map(|&l| {
            let rec = match mode {
                EvalMode::Nonoverlapping => ppl_nonoverlapping(scorer, tokens, l),
                EvalMode::Sliding => {
                    let s = stride.ok_or_else(|| Error::arg("sliding sweep needs a stride"))?;
                    ppl_sliding(scorer, tokens, l, s)
                }
            };
            rec.map_err(|e| Error::arg(format!("L_valid={l}: {e}")))
        })
        .collect()
}

/// Mean NLL at each window-relative position over all full nonoverlapping
/// windows (`floor((N - 1) / L_valid)` of them).
pub fn loss_by_position<S: Scorer + ?Sized>(scorer: &S, tokens: &[usize], l_valid: usize) -> Result<Vec<f64>> {
    check_stream(tokens, l_valid)?;
    let windows = (tokens.len() - 1) / l_valid;
    if windows == 0 {
        return Err(Error::arg(format!(
            "{} tokens do not fill one window of {l_valid}",
            tokens.len()
        )));
    }
    let mut sums = vec![0.0; l_valid];
    for w in 0..windows {
        let s = w * l_valid;
        let nll = scorer.window_nll(&tokens[s..s + l_valid], &tokens[s + 1..s + l_valid + 1])?;
        sums.iter_mut().zip(&nll).for_each(|(acc, x)| *acc += x);
    }
    Ok(sums.into_iter().map(|s| s / windows as f64).collect())
}

/// One row of the extrapolation CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: String,
    #[serde(rename = "L_train")]
    pub l_train: usize,
    #[serde(rename = "L_valid")]
    pub l_valid: usize,
    pub mode: String,
    pub stride: usize,
    pub ppl: f64,
    pub tokens: usize,
    pub passes: usize,
    pub seconds: String,
}

pub const SWEEP_HEADER: &str = "method,L_train,L_valid,mode,stride,ppl,tokens,passes,seconds";

impl SweepRow {
    /// Without `wall_time` the seconds column is `0` so reruns are
    /// byte-identical.
    pub fn new(method: &str, l_train: usize, rec: &EvalRecord, wall_time: bool) -> Self {
        SweepRow {
            method: method.to_string(),
            l_train,
            l_valid: rec.l_valid,
            mode: rec.mode.to_string(),
            stride: rec.stride,
            ppl: rec.perplexity,
            tokens: rec.tokens_scored,
            passes: rec.passes,
            seconds: if wall_time {
                format!("{:.3}", rec.wall_seconds)
            } else {
                "0".to_string()
            },
        }
    }
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SWEEP_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("sweep csv", e))?;
    Ok(())
}
