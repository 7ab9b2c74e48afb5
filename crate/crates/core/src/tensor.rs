//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every operation on a tensor that (transitively) requires a gradient
//! records its inputs in the result node. [`Tensor::backward`] walks the
//! resulting DAG in reverse topological order, visiting each node once, and
//! accumulates `d loss / d leaf` into every leaf created with
//! [`Tensor::param`]. Leaf gradients accumulate across calls until
//! [`Tensor::zero_grad`].
//!
//! Only the operations a decoder-only transformer needs are provided. The
//! multi-head attention kernel is fused (scores, additive bias, softmax and
//! value mixing in one node) so that the `[batch, heads, T, T]` probability
//! tensor is stored once and reused by the backward pass.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a computation graph. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

enum Op {
    MatMul {
        a: Tensor,
        b: Tensor,
        trans_b: bool,
    },
    Transpose(Tensor),
    Add(Tensor, Tensor),
    AddRow {
        a: Tensor,
        row: Tensor,
    },
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Sum(Tensor),
    Gelu {
        x: Tensor,
        tanh: Vec<f64>,
    },
    SoftmaxRows(Tensor),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        offset: Tensor,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Embedding {
        table: Tensor,
        ids: Vec<usize>,
    },
    GatherBias {
        table: Tensor,
        index: Vec<Option<usize>>,
        heads: usize,
    },
    Rotate {
        x: Tensor,
        tables: Rc<RotationTables>,
    },
    Attention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        bias: Option<Tensor>,
        dims: AttentionDims,
        probs: Vec<f64>,
    },
}

/// Precomputed `cos`/`sin` of the planar rotation applied to each
/// `(2j, 2j + 1)` column pair of a head, one row per position.
#[derive(Debug, Clone)]
pub struct RotationTables {
    pub seq_len: usize,
    pub head_dim: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

/// Layout of a fused attention call: inputs are `[batch * seq_len, heads * head_dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionDims {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddRow { a, row } => vec![a, row],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::SoftmaxRows(a) => vec![a],
            Op::Gelu { x, .. } => vec![x],
            Op::LayerNorm {
                x, gain, offset, ..
            } => vec![x, gain, offset],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Embedding { table, .. } | Op::GatherBias { table, .. } => vec![table],
            Op::Rotate { x, .. } => vec![x],
            Op::Attention { q, k, v, bias, .. } => {
                let mut p = vec![q, k, v];
                if let Some(b) = bias {
                    p.push(b);
                }
                p
            }
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_shape(data: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::arg(format!("shape {shape:?} has a zero extent")));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Dimension {
            op: "new",
            lhs: shape.to_vec(),
            rhs: vec![data.len()],
        });
    }
    Ok(())
}

impl Tensor {
    /// Constant tensor (never receives a gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(&data, shape)?;
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf: gradients accumulate into it on `backward`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(&data, shape)?;
        Ok(Tensor::leaf(data, shape.to_vec(), true))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![1], false)
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op: None,
        }))
    }

    fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op: requires_grad.then_some(op),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Rank {
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::row_major(self.data(), m, k),
            View::row_major(other.data(), k, n),
            0.0,
            &mut out,
            0,
            n,
        );
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
                trans_b: false,
            },
        ))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`; used for the tied output projection.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul_t")?;
        let (n, k2) = other.matrix_dims("matmul_t")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_t",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::row_major(self.data(), m, k),
            View::row_major(other.data(), n, k).t(),
            0.0,
            &mut out,
            0,
            n,
        );
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
                trans_b: true,
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("transpose")?;
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_op(out, vec![c, r], Op::Transpose(self.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let out = zip_map(self.data(), other.data(), |a, b| a + b);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, c) = self.matrix_dims("add_row")?;
        if row.numel() != c {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let r = row.data();
        let out = self
            .data()
            .chunks_exact(c)
            .flat_map(|xs| xs.iter().zip(r).map(|(x, b)| x + b))
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::AddRow {
                a: self.clone(),
                row: row.clone(),
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let out = zip_map(self.data(), other.data(), |a, b| a * b);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * factor).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale(self.clone(), factor))
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().fold(0.0, |acc, x| acc + x);
        Tensor::from_op(vec![total], vec![1], Op::Sum(self.clone()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let tanh: Vec<f64> = self.data().iter().map(|&x| gelu_tanh(x)).collect();
        let out = self
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&x, &t)| 0.5 * x * (1.0 + t))
            .collect();
        let tanh = if self.requires_grad() { tanh } else { Vec::new() };
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Gelu {
                x: self.clone(),
                tanh,
            },
        )
    }

    /// Row-wise softmax of a matrix whose entries may be `-inf`.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, c) = self.matrix_dims("softmax_rows")?;
        let mut out = self.data().to_vec();
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            if !softmax_in_place(row) {
                return Err(Error::DegenerateRow { row: i });
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::SoftmaxRows(self.clone()),
        ))
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gain * x + offset`.
    pub fn layer_norm(&self, gain: &Tensor, offset: &Tensor) -> Result<Tensor> {
        let (rows, c) = self.matrix_dims("layer_norm")?;
        if gain.numel() != c || offset.numel() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let mut normed = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        let (g, b) = (gain.data(), offset.data());
        for (r, xs) in self.data().chunks_exact(c).enumerate() {
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let n = (xs[j] - mean) * is;
                normed[r * c + j] = n;
                out[r * c + j] = n * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                offset: offset.clone(),
                normed,
                inv_std,
            },
        ))
    }

    /// Mean negative log-likelihood (nats) of `targets` under row-wise
    /// softmax of `[T, V]` logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (rows, v) = self.matrix_dims("cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = self.data().to_vec();
        let mut total = 0.0;
        for (i, (row, &t)) in probs.chunks_exact_mut(v).zip(targets).enumerate() {
            if t >= v {
                return Err(Error::Index { index: t, bound: v });
            }
            if !softmax_in_place(row) {
                return Err(Error::DegenerateRow { row: i });
            }
            total += -row[t].ln();
        }
        let loss = total / rows as f64;
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let (vocab, dim) = self.matrix_dims("embedding")?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&self.data()[id * dim..(id + 1) * dim]);
        }
        if ids.is_empty() {
            return Err(Error::arg("embedding lookup with no ids"));
        }
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), dim],
            Op::Embedding {
                table: self.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    /// Builds a `[heads, T, T]` bias from a `[buckets, heads]` table:
    /// entry `(h, cell)` is `table[index[cell], h]`, or `-inf` where the
    /// index is `None`.
    pub fn gather_bias(&self, index: &[Option<usize>], seq_len: usize) -> Result<Tensor> {
        let (buckets, heads) = self.matrix_dims("gather_bias")?;
        if index.len() != seq_len * seq_len {
            return Err(Error::Dimension {
                op: "gather_bias",
                lhs: vec![seq_len, seq_len],
                rhs: vec![index.len()],
            });
        }
        let cells = seq_len * seq_len;
        let mut out = vec![f64::NEG_INFINITY; heads * cells];
        for (cell, slot) in index.iter().enumerate() {
            if let Some(b) = *slot {
                if b >= buckets {
                    return Err(Error::Index {
                        index: b,
                        bound: buckets,
                    });
                }
                for h in 0..heads {
                    out[h * cells + cell] = self.data()[b * heads + h];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![heads, seq_len, seq_len],
            Op::GatherBias {
                table: self.clone(),
                index: index.to_vec(),
                heads,
            },
        ))
    }

    /// Applies per-position planar rotations to every head of a
    /// `[batch * seq_len, heads * head_dim]` matrix. Row `r` is at position
    /// `r % seq_len`.
    pub fn rotate_pairs(&self, tables: Rc<RotationTables>) -> Result<Tensor> {
        let (rows, cols) = self.matrix_dims("rotate_pairs")?;
        if cols % tables.head_dim != 0 || rows % tables.seq_len != 0 {
            return Err(Error::Dimension {
                op: "rotate_pairs",
                lhs: self.shape().to_vec(),
                rhs: vec![tables.seq_len, tables.head_dim],
            });
        }
        let out = apply_rotation(self.data(), cols, &tables, false);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Rotate {
                x: self.clone(),
                tables,
            },
        ))
    }

    /// Fused multi-head causal attention,
    /// `softmax(Q_h K_h^T / sqrt(d_head) + bias_h) V_h` for every batch
    /// element and head. `q`, `k`, `v` are `[batch * T, heads * d_head]`,
    /// `bias` is `[heads, T, T]` and carries the causal `-inf` entries.
    pub fn attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        bias: &Tensor,
        dims: AttentionDims,
    ) -> Result<Tensor> {
        Self::attention_impl(q, k, v, bias, dims, false).map(|(t, _)| t)
    }

    /// Like [`Tensor::attention`], also returning the `[batch, heads, T, T]`
    /// attention probabilities.
    pub fn attention_with_probs(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        bias: &Tensor,
        dims: AttentionDims,
    ) -> Result<(Tensor, Vec<f64>)> {
        Self::attention_impl(q, k, v, bias, dims, true)
    }

    fn attention_impl(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        bias: &Tensor,
        dims: AttentionDims,
        keep_probs: bool,
    ) -> Result<(Tensor, Vec<f64>)> {
        let AttentionDims {
            batch: nb,
            seq_len: t,
            heads: nh,
            head_dim: dh,
        } = dims;
        let width = dims.width();
        let expected = [nb * t, width];
        for x in [q, k, v] {
            if x.shape() != expected {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: x.shape().to_vec(),
                    rhs: expected.to_vec(),
                });
            }
        }
        if bias.shape() != [nh, t, t] {
            return Err(Error::Dimension {
                op: "attention",
                lhs: bias.shape().to_vec(),
                rhs: vec![nh, t, t],
            });
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let tt = t * t;
        let mut probs = vec![0.0; nb * nh * tt];
        let mut out = vec![0.0; nb * t * width];
        for b in 0..nb {
            for h in 0..nh {
                let base = b * t * width + h * dh;
                let p = &mut probs[(b * nh + h) * tt..(b * nh + h + 1) * tt];
                gemm(
                    scale,
                    View::new(q.data(), base, t, dh, width, 1),
                    View::new(k.data(), base, t, dh, width, 1).t(),
                    0.0,
                    p,
                    0,
                    t,
                );
                let bias_h = &bias.data()[h * tt..(h + 1) * tt];
                for (s, bv) in p.iter_mut().zip(bias_h) {
                    *s += bv;
                }
                for (i, row) in p.chunks_exact_mut(t).enumerate() {
                    if !softmax_in_place(row) {
                        return Err(Error::DegenerateRow { row: i });
                    }
                }
                gemm(
                    1.0,
                    View::row_major(p, t, t),
                    View::new(v.data(), base, t, dh, width, 1),
                    0.0,
                    &mut out,
                    base,
                    width,
                );
            }
        }
        let kept = if keep_probs { probs.clone() } else { Vec::new() };
        let tensor = Tensor::from_op(
            out,
            vec![nb * t, width],
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                bias: Some(bias.clone()),
                dims,
                probs,
            },
        );
        Ok((tensor, kept))
    }

    /// Reverse-mode sweep from a scalar. Populates (accumulates into) the
    /// gradient of every reachable leaf that requires one.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Rank {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let index: HashMap<*const Node, usize> = order
            .iter()
            .enumerate()
            .map(|(i, t)| (Rc::as_ptr(&t.0), i))
            .collect();
        let mut store = GradStore {
            index: &index,
            grads: vec![None; order.len()],
        };
        store.grads[order.len() - 1] = Some(vec![1.0]);
        for i in (0..order.len()).rev() {
            let Some(g) = store.grads[i].take() else {
                continue;
            };
            let node = &order[i];
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => backprop(op, node, &g, &mut store),
            }
        }
        Ok(())
    }

    /// Nodes requiring grad reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents().into_iter().rev() {
                    if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

struct GradStore<'a> {
    index: &'a HashMap<*const Node, usize>,
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore<'_> {
    /// Gradient accumulator for `t`, or `None` when `t` is not traced.
    fn slot(&mut self, t: &Tensor) -> Option<&mut [f64]> {
        if !t.requires_grad() {
            return None;
        }
        let i = self.index[&Rc::as_ptr(&t.0)];
        let n = t.numel();
        Some(self.grads[i].get_or_insert_with(|| vec![0.0; n]))
    }
}

fn backprop(op: &Op, out: &Tensor, g: &[f64], store: &mut GradStore<'_>) {
    match op {
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = out.shape()[1];
            let b_view = if *trans_b {
                View::row_major(b.data(), n, k).t()
            } else {
                View::row_major(b.data(), k, n)
            };
            if let Some(ga) = store.slot(a) {
                // dA = dC B^T
                gemm(1.0, View::row_major(g, m, n), b_view.t(), 1.0, ga, 0, k);
            }
            if let Some(gb) = store.slot(b) {
                let a_view = View::row_major(a.data(), m, k);
                if *trans_b {
                    // B is [n, k]: dB = dC^T A
                    gemm(1.0, View::row_major(g, m, n).t(), a_view, 1.0, gb, 0, k);
                } else {
                    gemm(1.0, a_view.t(), View::row_major(g, m, n), 1.0, gb, 0, n);
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            if let Some(ga) = store.slot(a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for t in [a, b] {
                if let Some(gt) = store.slot(t) {
                    add_into(gt, g);
                }
            }
        }
        Op::AddRow { a, row } => {
            if let Some(ga) = store.slot(a) {
                add_into(ga, g);
            }
            let c = row.numel();
            if let Some(gr) = store.slot(row) {
                for gs in g.chunks_exact(c) {
                    add_into(gr, gs);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = store.slot(a) {
                for ((acc, gi), bi) in ga.iter_mut().zip(g).zip(b.data()) {
                    *acc += gi * bi;
                }
            }
            if let Some(gb) = store.slot(b) {
                for ((acc, gi), ai) in gb.iter_mut().zip(g).zip(a.data()) {
                    *acc += gi * ai;
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(ga) = store.slot(a) {
                ga.iter_mut().zip(g).for_each(|(acc, gi)| *acc += gi * f);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = store.slot(a) {
                ga.iter_mut().for_each(|acc| *acc += g[0]);
            }
        }
        Op::Gelu { x, tanh } => {
            if let Some(gx) = store.slot(x) {
                for (((acc, gi), &xv), &t) in gx.iter_mut().zip(g).zip(x.data()).zip(tanh) {
                    *acc += gi * gelu_grad(xv, t);
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let c = a.shape()[1];
            if let Some(ga) = store.slot(a) {
                for ((acc, gs), ys) in ga
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.data().chunks_exact(c))
                {
                    let dot: f64 = gs.iter().zip(ys).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        acc[j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            offset,
            normed,
            inv_std,
        } => {
            let c = gain.numel();
            if let Some(gg) = store.slot(gain) {
                for (gs, ns) in g.chunks_exact(c).zip(normed.chunks_exact(c)) {
                    for j in 0..c {
                        gg[j] += gs[j] * ns[j];
                    }
                }
            }
            if let Some(go) = store.slot(offset) {
                for gs in g.chunks_exact(c) {
                    add_into(go, gs);
                }
            }
            let gain = gain.data();
            if let Some(gx) = store.slot(x) {
                let nf = c as f64;
                let mut dn = vec![0.0; c];
                for (r, ((acc, gs), ns)) in gx
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(normed.chunks_exact(c))
                    .enumerate()
                {
                    let mut sum_dn = 0.0;
                    let mut sum_dn_n = 0.0;
                    for j in 0..c {
                        dn[j] = gs[j] * gain[j];
                        sum_dn += dn[j];
                        sum_dn_n += dn[j] * ns[j];
                    }
                    let is = inv_std[r];
                    for j in 0..c {
                        acc[j] += is / nf * (nf * dn[j] - sum_dn - ns[j] * sum_dn_n);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = logits.shape()[1];
            let scale = g[0] / targets.len() as f64;
            if let Some(gl) = store.slot(logits) {
                for (r, (acc, ps)) in gl.chunks_exact_mut(v).zip(probs.chunks_exact(v)).enumerate() {
                    for j in 0..v {
                        acc[j] += scale * ps[j];
                    }
                    acc[targets[r]] -= scale;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let dim = table.shape()[1];
            if let Some(gt) = store.slot(table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }
        }
        Op::GatherBias {
            table,
            index,
            heads,
        } => {
            let cells = index.len();
            if let Some(gt) = store.slot(table) {
                for (cell, slot) in index.iter().enumerate() {
                    if let Some(b) = *slot {
                        for h in 0..*heads {
                            gt[b * heads + h] += g[h * cells + cell];
                        }
                    }
                }
            }
        }
        Op::Rotate { x, tables } => {
            let cols = x.shape()[1];
            if let Some(gx) = store.slot(x) {
                let back = apply_rotation(g, cols, tables, true);
                add_into(gx, &back);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            bias,
            dims,
            probs,
        } => attention_backward(q, k, v, bias.as_ref(), *dims, probs, g, store),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    dims: AttentionDims,
    probs: &[f64],
    g: &[f64],
    store: &mut GradStore<'_>,
) {
    let AttentionDims {
        batch: nb,
        seq_len: t,
        heads: nh,
        head_dim: dh,
    } = dims;
    let width = dims.width();
    let tt = t * t;
    let scale = 1.0 / (dh as f64).sqrt();

    if let Some(gv) = store.slot(v) {
        for b in 0..nb {
            for h in 0..nh {
                let base = b * t * width + h * dh;
                let p = &probs[(b * nh + h) * tt..(b * nh + h + 1) * tt];
                gemm(
                    1.0,
                    View::row_major(p, t, t).t(),
                    View::new(g, base, t, dh, width, 1),
                    1.0,
                    gv,
                    base,
                    width,
                );
            }
        }
    }

    let needs_scores = [Some(q), Some(k), bias]
        .into_iter()
        .flatten()
        .any(Tensor::requires_grad);
    if !needs_scores {
        return;
    }

    // dS = P o (dP - rowsum(dP o P)), dP = dO V^T
    let mut ds = vec![0.0; nb * nh * tt];
    for b in 0..nb {
        for h in 0..nh {
            let base = b * t * width + h * dh;
            let range = (b * nh + h) * tt..(b * nh + h + 1) * tt;
            let dsh = &mut ds[range.clone()];
            gemm(
                1.0,
                View::new(g, base, t, dh, width, 1),
                View::new(v.data(), base, t, dh, width, 1).t(),
                0.0,
                dsh,
                0,
                t,
            );
            for (drow, prow) in dsh.chunks_exact_mut(t).zip(probs[range].chunks_exact(t)) {
                let dot: f64 = drow.iter().zip(prow).map(|(d, p)| d * p).sum();
                for (d, p) in drow.iter_mut().zip(prow) {
                    *d = p * (*d - dot);
                }
            }
        }
    }

    if let Some(bias) = bias {
        if let Some(gb) = store.slot(bias) {
            for b in 0..nb {
                for h in 0..nh {
                    let src = &ds[(b * nh + h) * tt..(b * nh + h + 1) * tt];
                    add_into(&mut gb[h * tt..(h + 1) * tt], src);
                }
            }
        }
    }
    if let Some(gq) = store.slot(q) {
        for b in 0..nb {
            for h in 0..nh {
                let base = b * t * width + h * dh;
                let dsh = &ds[(b * nh + h) * tt..(b * nh + h + 1) * tt];
                gemm(
                    scale,
                    View::row_major(dsh, t, t),
                    View::new(k.data(), base, t, dh, width, 1),
                    1.0,
                    gq,
                    base,
                    width,
                );
            }
        }
    }
    if let Some(gk) = store.slot(k) {
        for b in 0..nb {
            for h in 0..nh {
                let base = b * t * width + h * dh;
                let dsh = &ds[(b * nh + h) * tt..(b * nh + h + 1) * tt];
                gemm(
                    scale,
                    View::row_major(dsh, t, t).t(),
                    View::new(q.data(), base, t, dh, width, 1),
                    1.0,
                    gk,
                    base,
                    width,
                );
            }
        }
    }
}

fn apply_rotation(x: &[f64], cols: usize, tables: &RotationTables, inverse: bool) -> Vec<f64> {
    let half = tables.head_dim / 2;
    let mut out = x.to_vec();
    for (r, row) in out.chunks_exact_mut(cols).enumerate() {
        let pos = r % tables.seq_len;
        let cos = &tables.cos[pos * half..(pos + 1) * half];
        let sin = &tables.sin[pos * half..(pos + 1) * half];
        for head in row.chunks_exact_mut(tables.head_dim) {
            for j in 0..half {
                let (c, s) = (cos[j], if inverse { -sin[j] } else { sin[j] });
                let (x0, x1) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = x0 * c - x1 * s;
                head[2 * j + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

/// Numerically stable in-place softmax; `false` if every entry is `-inf`.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> bool {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
    true
}

/// Per-row negative log-likelihood of `targets` under softmax of
/// `[rows, vocab]` logits, without tracing.
pub fn nll_rows(logits: &[f64], vocab: usize, targets: &[usize]) -> Result<Vec<f64>> {
    if logits.len() != targets.len() * vocab {
        return Err(Error::Dimension {
            op: "nll_rows",
            lhs: vec![logits.len() / vocab.max(1), vocab],
            rhs: vec![targets.len()],
        });
    }
    logits
        .chunks_exact(vocab)
        .zip(targets)
        .enumerate()
        .map(|(i, (row, &t))| {
            if t >= vocab {
                return Err(Error::Index {
                    index: t,
                    bound: vocab,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            Ok(lse - row[t])
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(sqrt(2/pi) (x + 0.044715 x^3))`, via one `exp`.
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
}

/// Strided read-only matrix view over a flat buffer.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> View<'a> {
    fn new(
        data: &'a [f64],
        offset: usize,
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        View {
            data,
            offset,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }

    fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View::new(data, 0, rows, cols, cols, 1)
    }

    fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `C = alpha * A B + beta * C` where `C` starts at `c_offset` with row
/// stride `c_row_stride` and unit column stride.
fn gemm(
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_offset + (m - 1) * c_row_stride + n <= c.len(), "gemm output bounds");
    if k == 0 {
        for i in 0..m {
            let row = &mut c[c_offset + i * c_row_stride..c_offset + i * c_row_stride + n];
            row.iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    assert!(a.last_index() < a.data.len(), "gemm lhs bounds");
    assert!(b.last_index() < b.data.len(), "gemm rhs bounds");
    // SAFETY: the asserts above keep every strided access of A, B and C
    // inside their slices; C is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            1,
        );
    }
}
