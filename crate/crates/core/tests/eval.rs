mod common;

use alibi_lm::eval::{
    extrapolation_sweep, loss_by_position, ppl_nonoverlapping, ppl_sliding, score_nonoverlapping,
    score_sliding, Scorer,
};
use alibi_lm::{EvalMode, Model, PositionMethod, Result};
use common::tiny_config;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stream(seed: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..13)).collect()
}

/// Scores every target at 1 nat and records each window length.
struct Recorder(std::cell::RefCell<Vec<usize>>);

impl Scorer for Recorder {
    fn window_nll(&self, inputs: &[usize], targets: &[usize]) -> Result<Vec<f64>> {
        self.0.borrow_mut().push(inputs.len());
        Ok(vec![1.0; targets.len()])
    }
}

#[test]
fn eight_token_fixture_pass_counts() {
    let tokens: Vec<usize> = (0..8).collect();
    let r = Recorder(Default::default());
    assert_eq!(score_nonoverlapping(&r, &tokens, 4).unwrap().passes, 2);
    assert_eq!(score_sliding(&r, &tokens, 4, 1).unwrap().passes, 5);
}

#[test]
fn stride_equal_to_window_is_nonoverlapping_bitwise() {
    for method in PositionMethod::all_defaults() {
        let model = Model::new(tiny_config(method)).unwrap();
        let tokens = stream(1, 61);
        for l in [4, 7, 16] {
            let a = ppl_nonoverlapping(&model, &tokens, l).unwrap();
            let b = ppl_sliding(&model, &tokens, l, l).unwrap();
            assert_eq!(a.perplexity.to_bits(), b.perplexity.to_bits());
            assert_eq!(a.mean_nll.to_bits(), b.mean_nll.to_bits());
            assert_eq!((a.tokens_scored, a.passes), (b.tokens_scored, b.passes));
        }
    }
}

#[test]
fn sliding_matches_per_token_brute_force() {
    let model = Model::new(tiny_config(PositionMethod::Alibi)).unwrap();
    let tokens = stream(2, 23);
    let n = tokens.len();
    for (l, s) in [(6, 1), (6, 2), (6, 4), (5, 5)] {
        let scored = score_sliding(&model, &tokens, l, s).unwrap();
        assert_eq!(scored.nll.len(), n - 1);
        for p in 0..n - 1 {
            // Window k ends at k*s + l; position p is scored by the first
            // window that reaches past it.
            let start = if p < l { 0 } else { ((p - l) / s + 1) * s };
            let ctx = &tokens[start..=p];
            let nll = model.token_nll(ctx, &tokens[start + 1..=p + 1]).unwrap();
            let expected = *nll.last().unwrap();
            assert!(
                (scored.nll[p] - expected).abs() < 1e-9,
                "L={l} S={s} p={p}: {} vs {expected}",
                scored.nll[p]
            );
        }
    }
}

#[test]
fn position_losses_average_to_nonoverlapping_mean() {
    let model = Model::new(tiny_config(PositionMethod::Sinusoidal)).unwrap();
    let l = 8;
    let tokens = stream(3, 5 * l + 1);
    let by_pos = loss_by_position(&model, &tokens, l).unwrap();
    assert_eq!(by_pos.len(), l);
    let mean = by_pos.iter().sum::<f64>() / l as f64;
    let rec = ppl_nonoverlapping(&model, &tokens, l).unwrap();
    assert!((mean - rec.mean_nll).abs() < 1e-12);
}

#[test]
fn single_length_sweep_equals_direct_call() {
    let model = Model::new(tiny_config(PositionMethod::rotary())).unwrap();
    let tokens = stream(4, 50);
    let sweep = extrapolation_sweep(&model, &tokens, &[9], EvalMode::Nonoverlapping, None).unwrap();
    let direct = ppl_nonoverlapping(&model, &tokens, 9).unwrap();
    assert_eq!(sweep.len(), 1);
    assert_eq!(sweep[0].perplexity.to_bits(), direct.perplexity.to_bits());
    assert_eq!(sweep[0].passes, direct.passes);

    let sliding = extrapolation_sweep(&model, &tokens, &[4, 8], EvalMode::Sliding, Some(2)).unwrap();
    assert_eq!(sliding[1].perplexity, ppl_sliding(&model, &tokens, 8, 2).unwrap().perplexity);
}

#[test]
fn sweep_errors_name_the_length() {
    let model = Model::new(tiny_config(PositionMethod::Alibi)).unwrap();
    let tokens = stream(5, 10);
    assert!(extrapolation_sweep(&model, &tokens, &[8, 4], EvalMode::Nonoverlapping, None).is_err());
    assert!(extrapolation_sweep(&model, &tokens, &[4], EvalMode::Sliding, None).is_err());
    let err = extrapolation_sweep(&model, &tokens, &[4, 8], EvalMode::Sliding, Some(6))
        .unwrap_err()
        .to_string();
    assert!(err.contains("L_valid=4"), "{err}");
}

proptest! {
    #[test]
    fn every_prediction_scored_once(n in 2usize..80, l in 2usize..20, s_frac in 0.0f64..1.0) {
        let s = 1 + ((l - 1) as f64 * s_frac) as usize;
        let r = Recorder(Default::default());
        let tokens = vec![0; n];
        let scored = score_sliding(&r, &tokens, l, s).unwrap();
        prop_assert_eq!(scored.nll.len(), n - 1);
        let expected_passes = if n <= l { 1 } else { 1 + (n - l).div_ceil(s) };
        prop_assert_eq!(scored.passes, expected_passes);
        prop_assert!(r.0.borrow().iter().all(|&len| len <= l));
        let non = score_nonoverlapping(&r, &tokens, l).unwrap();
        prop_assert_eq!(non.passes, n.div_ceil(l));
    }
}
