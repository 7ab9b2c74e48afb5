//! Position representations: ALiBi slopes and biases, causal masks,
//! sinusoidal tables, rotary rotations and T5 relative-distance buckets.
//!
//! All functions here are pure. Masks use `f64::NEG_INFINITY` for disallowed
//! (future) keys; the stable softmax turns those into exact zeros.

use crate::error::{Error, Result};
use crate::tensor::RotationTables;

/// Head-specific ALiBi slopes. Fixed before training, never learned.
#[derive(Debug, Clone, PartialEq)]
pub struct AlibiSlopes {
    pub n_heads: usize,
    pub slopes: Vec<f64>,
}

impl AlibiSlopes {
    /// Common ratio of the geometric sequence (equal to its first term).
    pub fn ratio(&self) -> f64 {
        self.slopes[0]
    }
}

/// Geometric slope schedule: with `r = 2^(-2^(3 - log2(n)))`, head `k`
/// (0-based) gets `r^(k + 1)`. For 8 heads this is `1/2, 1/4, ..., 1/256`.
pub fn alibi_slopes(n_heads: usize) -> Result<AlibiSlopes> {
    if n_heads == 0 {
        return Err(Error::arg("alibi_slopes needs at least one head"));
    }
    let step = (3.0 - (n_heads as f64).log2()).exp2();
    let slopes = (1..=n_heads).map(|k| (-(k as f64) * step).exp2()).collect();
    Ok(AlibiSlopes { n_heads, slopes })
}

/// Per-head additive attention mask `[n_heads, L, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMask {
    pub n_heads: usize,
    pub length: usize,
    pub values: Vec<f64>,
}

impl BiasMask {
    pub fn get(&self, head: usize, query: usize, key: usize) -> f64 {
        self.values[(head * self.length + query) * self.length + key]
    }

    pub fn head(&self, head: usize) -> &[f64] {
        let cells = self.length * self.length;
        &self.values[head * cells..(head + 1) * cells]
    }
}

/// ALiBi fused into the causal mask: `(h, i, j) = -m_h * (i - j)` for
/// `j <= i`, `-inf` above the diagonal. The query's own key gets bias 0.
pub fn alibi_mask(n_heads: usize, length: usize) -> Result<BiasMask> {
    if length == 0 {
        return Err(Error::arg("alibi_mask length must be at least 1"));
    }
    let slopes = alibi_slopes(n_heads)?;
    let mut values = Vec::with_capacity(n_heads * length * length);
    for &m in &slopes.slopes {
        for i in 0..length {
            for j in 0..length {
                values.push(if j <= i {
                    -m * (i - j) as f64
                } else {
                    f64::NEG_INFINITY
                });
            }
        }
    }
    Ok(BiasMask {
        n_heads,
        length,
        values,
    })
}

/// `[L, L]` additive causal mask: 0 on and below the diagonal, `-inf` above.
pub fn causal_mask(length: usize) -> Result<Vec<f64>> {
    if length == 0 {
        return Err(Error::arg("causal_mask length must be at least 1"));
    }
    Ok((0..length)
        .flat_map(|i| (0..length).map(move |j| if j <= i { 0.0 } else { f64::NEG_INFINITY }))
        .collect())
}

/// Causal mask repeated for every head.
pub fn causal_bias(n_heads: usize, length: usize) -> Result<BiasMask> {
    let one = causal_mask(length)?;
    Ok(BiasMask {
        n_heads,
        length,
        values: one.repeat(n_heads),
    })
}

/// `[n_positions, d_model]` table; `(p, 2i) = sin(p / 10000^(2i/d))`,
/// `(p, 2i+1) = cos(...)`.
pub fn sinusoidal_table(n_positions: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::arg(format!("sinusoidal d_model must be even, got {d_model}")));
    }
    let mut out = Vec::with_capacity(n_positions * d_model);
    for pos in 0..n_positions {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Ok(out)
}

/// Rotation tables for `seq_len` positions: pair `j` of a head rotates by
/// `p * base^(-2j / head_dim)`.
pub fn rotary_tables(seq_len: usize, head_dim: usize, base: f64) -> Result<RotationTables> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::arg(format!("rotary head dim must be even, got {head_dim}")));
    }
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq_len * half);
    let mut sin = Vec::with_capacity(seq_len * half);
    for p in 0..seq_len {
        for j in 0..half {
            let angle = p as f64 * base.powf(-((2 * j) as f64) / head_dim as f64);
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    Ok(RotationTables {
        seq_len,
        head_dim,
        cos,
        sin,
    })
}

/// Rotates a `[T, d_head]` block of queries or keys, row `p` by position `p`.
pub fn rotary_rotate(x: &[f64], d_head: usize, base: f64) -> Result<Vec<f64>> {
    rotary_rotate_from(x, d_head, base, 0)
}

/// As [`rotary_rotate`] with row `r` placed at position `start + r`.
pub fn rotary_rotate_from(x: &[f64], d_head: usize, base: f64, start: usize) -> Result<Vec<f64>> {
    if d_head == 0 || d_head % 2 != 0 {
        return Err(Error::arg(format!("rotary head dim must be even, got {d_head}")));
    }
    if x.len() % d_head != 0 {
        return Err(Error::Dimension {
            op: "rotary_rotate",
            lhs: vec![x.len()],
            rhs: vec![d_head],
        });
    }
    let rows = x.len() / d_head;
    let tables = rotary_tables(start + rows, d_head, base)?;
    let half = d_head / 2;
    let mut out = x.to_vec();
    for (r, row) in out.chunks_exact_mut(d_head).enumerate() {
        let p = start + r;
        for j in 0..half {
            let (c, s) = (tables.cos[p * half + j], tables.sin[p * half + j]);
            let (x0, x1) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = x0 * c - x1 * s;
            row[2 * j + 1] = x0 * s + x1 * c;
        }
    }
    Ok(out)
}

pub const T5_DEFAULT_BUCKETS: usize = 32;
pub const T5_DEFAULT_MAX_DISTANCE: usize = 128;

/// Unidirectional T5 bucket of a key `relative_distance` tokens to the
/// left of its query. The first half of the buckets are exact distances,
/// the rest are log-spaced up to `max_distance`; anything further shares
/// the last bucket.
pub fn t5_bucket(relative_distance: i64, num_buckets: usize, max_distance: usize) -> Result<usize> {
    if relative_distance < 0 {
        return Err(Error::arg(format!(
            "t5 relative distance must be non-negative, got {relative_distance}"
        )));
    }
    let max_exact = num_buckets / 2;
    if num_buckets < 2 || max_distance <= max_exact {
        return Err(Error::arg(format!(
            "t5 bucketing needs num_buckets >= 2 and max_distance > num_buckets / 2 \
             (got {num_buckets}, {max_distance})"
        )));
    }
    let d = relative_distance as usize;
    if d < max_exact {
        return Ok(d);
    }
    let log_ratio = (d as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (log_ratio * (num_buckets - max_exact) as f64) as usize;
    Ok(large.min(num_buckets - 1))
}

/// Bucket id for every `(query, key)` cell of an `[L, L]` matrix, `None`
/// for future keys.
pub fn t5_bucket_index(
    length: usize,
    num_buckets: usize,
    max_distance: usize,
) -> Result<Vec<Option<usize>>> {
    let mut index = Vec::with_capacity(length * length);
    for i in 0..length {
        for j in 0..length {
            index.push(if j <= i {
                Some(t5_bucket((i - j) as i64, num_buckets, max_distance)?)
            } else {
                None
            });
        }
    }
    Ok(index)
}

/// Learned `[num_buckets, heads]` relative-distance bias.
#[derive(Debug, Clone, PartialEq)]
pub struct T5BiasTable {
    pub num_buckets: usize,
    pub max_distance: usize,
    pub heads: usize,
    pub table: Vec<f64>,
}

impl T5BiasTable {
    pub fn new(num_buckets: usize, max_distance: usize, heads: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != num_buckets * heads {
            return Err(Error::Dimension {
                op: "t5_table",
                lhs: vec![num_buckets, heads],
                rhs: vec![table.len()],
            });
        }
        if table.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("t5 bias table has non-finite entries"));
        }
        Ok(T5BiasTable {
            num_buckets,
            max_distance,
            heads,
            table,
        })
    }

    pub fn get(&self, bucket: usize, head: usize) -> f64 {
        self.table[bucket * self.heads + head]
    }
}

/// `(h, i, j) = table[bucket(i - j), h]` with `-inf` above the diagonal.
pub fn t5_bias_matrix(table: &T5BiasTable, length: usize) -> Result<BiasMask> {
    if length == 0 {
        return Err(Error::arg("t5_bias_matrix length must be at least 1"));
    }
    let index = t5_bucket_index(length, table.num_buckets, table.max_distance)?;
    let mut values = Vec::with_capacity(table.heads * length * length);
    for h in 0..table.heads {
        values.extend(index.iter().map(|cell| match cell {
            Some(b) => table.get(*b, h),
            None => f64::NEG_INFINITY,
        }));
    }
    Ok(BiasMask {
        n_heads: table.heads,
        length,
        values,
    })
}
