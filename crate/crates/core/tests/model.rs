mod common;

use alibi_lm::model::attend;
use alibi_lm::position::{alibi_mask, causal_bias};
use alibi_lm::tensor::AttentionDims;
use alibi_lm::{Model, ModelConfig, PositionMethod, Tensor};
use common::{model_gradcheck, tiny_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn tokens(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Per-query loop over keys, no matrices.
fn brute_attention(q: &[f64], k: &[f64], v: &[f64], bias: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|j| {
                let s: f64 = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum();
                s / (d as f64).sqrt() + bias[i * t + j]
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        for j in 0..t {
            for c in 0..d {
                out[i * d + c] += weights[j] / z * v[j * d + c];
            }
        }
    }
    out
}

#[test]
fn attention_matches_brute_force_and_composite() {
    let (batch, t, heads, d) = (2, 5, 3, 4);
    let width = heads * d;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = random(&mut rng, batch * t * width);
    let k = random(&mut rng, batch * t * width);
    let v = random(&mut rng, batch * t * width);
    let mask = alibi_mask(heads, t).unwrap();
    let dims = AttentionDims {
        batch,
        seq_len: t,
        heads,
        head_dim: d,
    };
    let fused = Tensor::attention(
        &Tensor::new(q.clone(), &[batch * t, width]).unwrap(),
        &Tensor::new(k.clone(), &[batch * t, width]).unwrap(),
        &Tensor::new(v.clone(), &[batch * t, width]).unwrap(),
        &Tensor::new(mask.values.clone(), &[heads, t, t]).unwrap(),
        dims,
    )
    .unwrap();

    let slice = |x: &[f64], b: usize, h: usize| -> Vec<f64> {
        (0..t)
            .flat_map(|r| {
                let base = (b * t + r) * width + h * d;
                x[base..base + d].to_vec()
            })
            .collect()
    };
    for b in 0..batch {
        for h in 0..heads {
            let (qh, kh, vh) = (slice(&q, b, h), slice(&k, b, h), slice(&v, b, h));
            let brute = brute_attention(&qh, &kh, &vh, mask.head(h), t, d);
            let composite = attend(
                &Tensor::new(qh, &[t, d]).unwrap(),
                &Tensor::new(kh, &[t, d]).unwrap(),
                &Tensor::new(vh, &[t, d]).unwrap(),
                &Tensor::new(mask.head(h).to_vec(), &[t, t]).unwrap(),
            )
            .unwrap();
            let got = slice(fused.data(), b, h);
            for ((f, c), e) in got.iter().zip(composite.data()).zip(&brute) {
                assert!((f - e).abs() < 1e-12, "fused {f} vs brute {e}");
                assert!((c - e).abs() < 1e-12, "composite {c} vs brute {e}");
            }
        }
    }
}

#[test]
fn attention_with_zero_queries_is_prefix_mean() {
    let t = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = random(&mut rng, t * 2);
    let bias = causal_bias(1, t).unwrap().values;
    let out = attend(
        &Tensor::new(vec![0.0; t * 2], &[t, 2]).unwrap(),
        &Tensor::new(random(&mut rng, t * 2), &[t, 2]).unwrap(),
        &Tensor::new(v.clone(), &[t, 2]).unwrap(),
        &Tensor::new(bias, &[t, t]).unwrap(),
    )
    .unwrap();
    for i in 0..t {
        for c in 0..2 {
            let mean = (0..=i).map(|j| v[j * 2 + c]).sum::<f64>() / (i + 1) as f64;
            assert!((out.data()[i * 2 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn causal_consistency_for_every_method() {
    for method in PositionMethod::all_defaults() {
        let model = Model::new(tiny_config(method.clone())).unwrap();
        let x = tokens(3, 17, 13);
        let v = 13;
        for k in [1, 5, 12] {
            let short = model.forward(&x[..k]).unwrap();
            let long = model.forward(&x[..k + 5]).unwrap();
            let last = &short[(k - 1) * v..k * v];
            let row = &long[(k - 1) * v..k * v];
            for (a, b) in last.iter().zip(row) {
                assert!((a - b).abs() < 1e-9, "{method} at k={k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn logits_shape_for_short_train_and_long_inputs() {
    for method in PositionMethod::all_defaults() {
        let model = Model::new(tiny_config(method)).unwrap();
        let l = 8;
        for t in [1, l, 2 * l] {
            let logits = model.forward(&tokens(4, t, 13)).unwrap();
            assert_eq!(logits.len(), t * 13);
            assert!(logits.iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn same_seed_same_logits() {
    for method in PositionMethod::all_defaults() {
        let x = tokens(5, 10, 13);
        let a = Model::new(tiny_config(method.clone())).unwrap().forward(&x).unwrap();
        let b = Model::new(tiny_config(method)).unwrap().forward(&x).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn batched_forward_matches_single_sequences() {
    for method in PositionMethod::all_defaults() {
        let model = Model::new(tiny_config(method)).unwrap();
        let x = tokens(6, 21, 13);
        let batched = model.forward_batch(&x, 3).unwrap();
        for (b, seq) in x.chunks(7).enumerate() {
            let single = model.forward(seq).unwrap();
            for (a, e) in batched[b * 7 * 13..(b + 1) * 7 * 13].iter().zip(&single) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn parameter_parity() {
    let base = ModelConfig::default();
    let count = |position: PositionMethod| {
        Model::new(ModelConfig {
            position,
            ..base.clone()
        })
        .unwrap()
        .param_count()
    };
    let alibi = count(PositionMethod::Alibi);
    assert_eq!(count(PositionMethod::None), alibi);
    assert_eq!(count(PositionMethod::Sinusoidal), alibi);
    assert_eq!(count(PositionMethod::rotary()), alibi);
    let t5 = count(PositionMethod::t5());
    let PositionMethod::T5Bias { num_buckets, .. } = PositionMethod::t5() else {
        unreachable!()
    };
    assert_eq!(t5 - alibi, num_buckets * base.n_heads);
}

#[test]
fn parameter_count_is_length_free() {
    let model = Model::new(tiny_config(PositionMethod::Alibi)).unwrap();
    let before = model.param_count();
    model.forward(&tokens(7, 4, 13)).unwrap();
    model.forward(&tokens(7, 40, 13)).unwrap();
    assert_eq!(model.param_count(), before);
}

#[test]
fn attention_rows_sum_to_one_in_every_layer() {
    for method in PositionMethod::all_defaults() {
        let config = ModelConfig {
            n_layers: 2,
            ..tiny_config(method)
        };
        let model = Model::new(config).unwrap();
        let t = 9;
        let fwd = model.forward_inspect(&tokens(8, t, 13)).unwrap();
        assert_eq!(fwd.attention.len(), 2);
        for layer in &fwd.attention {
            assert_eq!(layer.len(), 2 * t * t);
            for (r, row) in layer.chunks(t).enumerate() {
                let i = r % t;
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[i + 1..].iter().all(|&p| p == 0.0));
            }
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for method in PositionMethod::all_defaults() {
        let worst = model_gradcheck(method.clone(), 50, 21);
        assert!(worst < 1e-3, "{method}: worst rel err {worst:e}");
    }
}

#[test]
fn token_out_of_vocab_is_rejected() {
    let model = Model::new(tiny_config(PositionMethod::Alibi)).unwrap();
    assert!(model.forward(&[1, 13]).is_err());
}
