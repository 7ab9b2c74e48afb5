#![allow(dead_code)]

use alibi_lm::{Model, ModelConfig, PositionMethod};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(position: PositionMethod) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 16,
        position,
        dropout: 0.0,
        seed: 11,
    }
}

/// Largest relative error between backprop and central differences of the
/// mean training loss, over `samples` randomly chosen weights.
pub fn model_gradcheck(position: PositionMethod, samples: usize, seed: u64) -> f64 {
    let mut model = Model::new(tiny_config(position)).unwrap();
    // Move layer norms and biases off their trivial init so every path matters.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        for x in &mut p.data {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let (batch, t) = (2, 6);
    let tokens: Vec<usize> = (0..batch * (t + 1)).map(|_| rng.random_range(0..13)).collect();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for seq in tokens.chunks(t + 1) {
        inputs.extend_from_slice(&seq[..t]);
        targets.extend_from_slice(&seq[1..]);
    }
    let (loss, leaves) = model.loss(&inputs, &targets, batch, None).unwrap();
    loss.backward().unwrap();
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .zip(model.params())
        .map(|(l, p)| l.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let cells: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &(i, j) in cells.choose_multiple(&mut rng, samples) {
        let original = model.params()[i].data[j];
        let mut value_at = |x: f64| {
            model.params_mut()[i].data[j] = x;
            model.loss(&inputs, &targets, batch, None).unwrap().0.item().unwrap()
        };
        let numeric = (value_at(original + h) - value_at(original - h)) / (2.0 * h);
        model.params_mut()[i].data[j] = original;
        let analytic = grads[i][j];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(err);
    }
    worst
}
