use alibi_lm::position::{
    alibi_mask, alibi_slopes, rotary_rotate_from, t5_bias_matrix, t5_bucket, T5BiasTable,
};
use alibi_lm::tensor::nll_rows;
use alibi_lm::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, rows * cols)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        (rows, cols, data) in (1usize..6, 1usize..9)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), matrix(r, c)))
    ) {
        let p = Tensor::new(data, &[rows, cols]).unwrap().softmax_rows().unwrap();
        for row in p.data().chunks(cols) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn masked_entries_get_exact_zero(
        data in matrix(4, 4),
        mask in prop::collection::vec(any::<bool>(), 16),
    ) {
        let mut data = data;
        for (r, row) in data.chunks_mut(4).enumerate() {
            for (c, x) in row.iter_mut().enumerate() {
                // keep column r finite so no row is fully masked
                if mask[r * 4 + c] && c != r {
                    *x = f64::NEG_INFINITY;
                }
            }
        }
        let p = Tensor::new(data.clone(), &[4, 4]).unwrap().softmax_rows().unwrap();
        for (x, q) in data.iter().zip(p.data()) {
            if *x == f64::NEG_INFINITY {
                prop_assert_eq!(*q, 0.0);
            }
        }
    }

    #[test]
    fn alibi_mask_structure(n in 1usize..17, len in 1usize..40) {
        let mask = alibi_mask(n, len).unwrap();
        let slopes = alibi_slopes(n).unwrap().slopes;
        for (h, m) in slopes.iter().enumerate() {
            for i in 0..len {
                prop_assert_eq!(mask.get(h, i, i), 0.0);
                for j in i + 1..len {
                    prop_assert_eq!(mask.get(h, i, j), f64::NEG_INFINITY);
                }
                for j in 1..=i {
                    let step = mask.get(h, i, j) - mask.get(h, i, j - 1);
                    prop_assert!((step - m).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn slopes_are_geometric(n in 1usize..65) {
        let s = alibi_slopes(n).unwrap();
        prop_assert_eq!(s.slopes.len(), n);
        for w in s.slopes.windows(2) {
            prop_assert!((w[1] / w[0] - s.ratio()).abs() < 1e-12);
        }
        prop_assert!(s.slopes.iter().all(|&m| m > 0.0 && m < 1.0 + 1e-12));
    }

    #[test]
    fn rotary_preserves_row_norm(
        row in prop::collection::vec(-5.0f64..5.0, 8),
        start in 0usize..500,
    ) {
        let rotated = rotary_rotate_from(&row, 8, 10000.0, start).unwrap();
        prop_assert!((dot(&row, &row).sqrt() - dot(&rotated, &rotated).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn t5_buckets_stay_in_range(d in 0i64..100_000, half in 1usize..33, extra in 1usize..300) {
        let nb = 2 * half;
        let md = half + extra;
        let b = t5_bucket(d, nb, md).unwrap();
        prop_assert!(b < nb);
        if (d as usize) < half {
            prop_assert_eq!(b, d as usize);
        }
        if d as usize >= md {
            prop_assert_eq!(b, nb - 1);
        }
    }
}

#[test]
fn rotary_relative_position_property() {
    // q at m and k at n score the same as q at m + t and k at n + t.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let d = 2 * rng.random_range(1..9);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = rng.random_range(0..512);
        let n = rng.random_range(0..512);
        let t = rng.random_range(0..512);
        let score = |pq: usize, pk: usize| {
            let rq = rotary_rotate_from(&q, d, 10000.0, pq).unwrap();
            let rk = rotary_rotate_from(&k, d, 10000.0, pk).unwrap();
            dot(&rq, &rk)
        };
        let (a, b) = (score(m, n), score(m + t, n + t));
        assert!((a - b).abs() < 1e-9, "case {case}: {a} vs {b}");
    }
}

#[test]
fn cross_entropy_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits: Vec<f64> = (0..35).map(|_| rng.random_range(-4.0..4.0)).collect();
    let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
    let mut expected = 0.0;
    for (row, &t) in logits.chunks(7).zip(&targets) {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        expected += -(row[t].exp() / z).ln();
    }
    expected /= 5.0;
    let got = Tensor::new(logits.clone(), &[5, 7])
        .unwrap()
        .cross_entropy(&targets)
        .unwrap()
        .item()
        .unwrap();
    assert!((got - expected).abs() < 1e-10);
    let rows = nll_rows(&logits, 7, &targets).unwrap();
    assert!((rows.iter().sum::<f64>() / 5.0 - expected).abs() < 1e-10);
}

/// Straight transcription of the unidirectional T5 bucketing rule.
fn reference_bucket(distance: usize, num_buckets: usize, max_distance: usize) -> usize {
    let exact = num_buckets / 2;
    if distance < exact {
        return distance;
    }
    let scaled = ((distance as f64 / exact as f64).ln()
        / (max_distance as f64 / exact as f64).ln()
        * (num_buckets - exact) as f64)
        .floor() as usize;
    (exact + scaled).min(num_buckets - 1)
}

#[test]
fn t5_bias_matrix_cell_by_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(nb, md, heads) in &[(4, 8, 3), (32, 128, 2), (6, 5, 1)] {
        let values: Vec<f64> = (0..nb * heads).map(|_| rng.random_range(-1.0..1.0)).collect();
        let table = T5BiasTable::new(nb, md, heads, values.clone()).unwrap();
        let len = 5;
        let bias = t5_bias_matrix(&table, len).unwrap();
        for h in 0..heads {
            for i in 0..len {
                for j in 0..len {
                    let expected = if j > i {
                        f64::NEG_INFINITY
                    } else {
                        values[reference_bucket(i - j, nb, md) * heads + h]
                    };
                    assert_eq!(bias.get(h, i, j), expected, "({h}, {i}, {j})");
                }
            }
        }
    }
}

#[test]
fn t5_reference_agrees_on_long_range() {
    for d in 0..2000 {
        assert_eq!(t5_bucket(d as i64, 32, 128).unwrap(), reference_bucket(d, 32, 128));
    }
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::param(a, &[6, 8]).unwrap();
        let y = x.matmul_t(&x).unwrap().softmax_rows().unwrap().gelu();
        let loss = y.cross_entropy(&[0, 1, 2, 3, 4, 5]).unwrap();
        loss.backward().unwrap();
        (y.data().to_vec(), x.grad().unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        a.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}
