//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is pushed, and [`Graph::backward`] walks the tape in reverse. Parameter
//! leaves are copied in from a [`ParamStore`] and their gradients are
//! accumulated back into it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, View};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys each query row may attend to.
#[derive(Clone, Debug)]
pub enum AttentionMask {
    /// Query row `i` sees key `k` iff `query[i] == key[k]`.
    Groups { query: Vec<u32>, key: Vec<u32> },
    /// Explicit `rows × cols` admissibility matrix.
    Dense {
        rows: usize,
        cols: usize,
        allowed: Vec<bool>,
    },
}

impl AttentionMask {
    pub fn groups(query: Vec<u32>, key: Vec<u32>) -> Self {
        AttentionMask::Groups { query, key }
    }

    pub fn dense(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape {
                op: "attention_mask",
                lhs: vec![rows, cols],
                rhs: vec![allowed.len()],
            });
        }
        Ok(AttentionMask::Dense {
            rows,
            cols,
            allowed,
        })
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            AttentionMask::Groups { query, key } => (query.len(), key.len()),
            AttentionMask::Dense { rows, cols, .. } => (*rows, *cols),
        }
    }

    #[inline]
    pub fn allowed(&self, i: usize, k: usize) -> bool {
        match self {
            AttentionMask::Groups { query, key } => query[i] == key[k],
            AttentionMask::Dense { cols, allowed, .. } => allowed[i * cols + k],
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SoftmaxRows(Var),
    MixRows {
        weights: Var,
        rows: Var,
    },
    NegDistances {
        x: Var,
        cands: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    ListMle {
        scores: Var,
        order: Vec<usize>,
    },
    SumAll(Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn row_major(cols: usize) -> View {
    View::row_major(cols)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            dropout: None,
        }
    }

    /// Graph whose [`Graph::dropout`] calls zero activations with probability `p`.
    pub fn with_dropout(p: f64, seed: u64) -> Self {
        let mut g = Self::new();
        if p > 0.0 {
            g.dropout = Some((p, ChaCha8Rng::seed_from_u64(seed)));
        }
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(t, false, None)
    }

    /// Free leaf that does receive a gradient (not tied to any parameter).
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(t, true, None)
    }

    /// Leaf holding a copy of a stored parameter; reused on repeated calls.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let p = store.get(id);
        let mut t = p.tensor.clone();
        if t.shape().len() == 1 {
            t = Tensor::matrix(1, t.len(), t.into_data())?;
        }
        let v = self.push_leaf(t, !p.frozen, Some(id))?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            row_major(k),
            self.data(b),
            row_major(n),
            0.0,
            &mut out,
            row_major(n),
        );
        self.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMul(a, b),
            &[a, b],
            "matmul",
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.dims(a);
        self.push(Tensor::matrix(r, c, out)?, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.dims(a);
        self.push(Tensor::matrix(r, c, out)?, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a `[1 × n]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.nodes[bias.0].value.len() != c {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x),
                rhs: self.shape(bias),
            });
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::AddBias(x, bias),
            &[x, bias],
            "add_bias",
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = self.data(x).iter().map(|v| v * s).collect();
        self.push(Tensor::matrix(r, c, out)?, Op::Scale(x, s), &[x], "scale")
    }

    /// Inverted dropout; identity unless the graph was built with a rate.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let p = *p;
        let n = self.nodes[x.0].value.len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let (r, c) = self.dims(x);
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::MulConst(x, mask),
            &[x],
            "dropout",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push(Tensor::matrix(r, c, out)?, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = self
            .data(x)
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        self.push(Tensor::matrix(r, c, out)?, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// Row-wise normalisation followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c == 0 {
            return Err(Error::contract("layer_norm over an empty last dimension"));
        }
        if self.nodes[gain.0].value.len() != c || self.nodes[bias.0].value.len() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x),
                rhs: self.shape(gain),
            });
        }
        let xs = self.data(x);
        let gs = self.data(gain);
        let bs = self.data(bias);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = gs[j] * h + bs[j];
            }
        }
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    /// Scaled dot-product attention split over `heads` column blocks.
    ///
    /// `q` is `[nq × d]`, `k` and `v` are `[nk × d]`; the result is `[nq × d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        let (nv, dv) = self.dims(v);
        if d != dk || d != dv || nk != nv {
            return Err(Error::Shape {
                op: "attention",
                lhs: self.shape(q),
                rhs: self.shape(k),
            });
        }
        if nk == 0 {
            return Err(Error::contract("attention over an empty key set"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = mask {
            if m.dims() != (nq, nk) {
                return Err(Error::Shape {
                    op: "attention_mask",
                    lhs: vec![nq, nk],
                    rhs: {
                        let (a, b) = m.dims();
                        vec![a, b]
                    },
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut weights = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            let w = &mut weights[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nq,
                dh,
                nk,
                &qs[h * dh..],
                row_major(d),
                &ks[h * dh..],
                View::transposed(d),
                0.0,
                w,
                row_major(nk),
            );
            for i in 0..nq {
                let row = &mut w[i * nk..(i + 1) * nk];
                let mut max = f64::NEG_INFINITY;
                for (kk, s) in row.iter_mut().enumerate() {
                    if mask.is_none_or(|m| m.allowed(i, kk)) {
                        *s *= scale;
                        max = max.max(*s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::contract(format!(
                        "attention query row {i} has an empty key set"
                    )));
                }
                let mut sum = 0.0;
                for (kk, s) in row.iter_mut().enumerate() {
                    if mask.is_none_or(|m| m.allowed(i, kk)) {
                        *s = (*s - max).exp();
                        sum += *s;
                    } else {
                        *s = 0.0;
                    }
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            gemm(
                nq,
                nk,
                dh,
                w,
                row_major(nk),
                &vs[h * dh..],
                row_major(d),
                0.0,
                &mut out[h * dh..],
                row_major(d),
            );
        }
        self.push(
            Tensor::matrix(nq, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
            &[q, k, v],
            "attention",
        )
    }

    /// Attention weights `[heads][nq][nk]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<(usize, usize, usize, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention {
                q,
                k,
                heads,
                weights,
                ..
            } => Some((*heads, self.dims(*q).0, self.dims(*k).0, weights)),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for {r} rows"
            )));
        }
        let s = self.data(src);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&s[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor::matrix(idx.len(), c, out)?,
            Op::GatherRows(src, idx.to_vec()),
            &[src],
            "gather_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.dims(p).1 != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
            out.extend_from_slice(self.data(p));
            rows += self.dims(p).0;
        }
        self.push(
            Tensor::matrix(rows, c, out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
            "concat_rows",
        )
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = Tensor::matrix(rows, cols, self.data(x).to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: self.shape(x),
            rhs: vec![rows, cols],
        })?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::SoftmaxRows(x),
            &[x],
            "softmax_rows",
        )
    }

    /// Row `j` of the result is `Σ_s weights[j,s] · rows[j·S + s]`.
    pub fn mix_rows(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (j, s) = self.dims(weights);
        let (n, d) = self.dims(rows);
        if n != j * s {
            return Err(Error::Shape {
                op: "mix_rows",
                lhs: self.shape(weights),
                rhs: self.shape(rows),
            });
        }
        let (w, r) = (self.data(weights), self.data(rows));
        let mut out = vec![0.0; j * d];
        for jj in 0..j {
            let o = &mut out[jj * d..(jj + 1) * d];
            for ss in 0..s {
                let wt = w[jj * s + ss];
                let src = &r[(jj * s + ss) * d..(jj * s + ss + 1) * d];
                for (a, b) in o.iter_mut().zip(src) {
                    *a += wt * b;
                }
            }
        }
        self.push(
            Tensor::matrix(j, d, out)?,
            Op::MixRows { weights, rows },
            &[weights, rows],
            "mix_rows",
        )
    }

    /// `[1 × C]` row of `−‖x − cands_c‖₂` for a `[1 × d]` query.
    pub fn neg_distances(&mut self, x: Var, cands: Var) -> Result<Var> {
        let (xr, d) = self.dims(x);
        let (nc, dc) = self.dims(cands);
        if xr != 1 || d != dc {
            return Err(Error::Shape {
                op: "neg_distances",
                lhs: self.shape(x),
                rhs: self.shape(cands),
            });
        }
        if nc == 0 {
            return Err(Error::contract(
                "value distribution over an empty candidate list",
            ));
        }
        let (xs, cs) = (self.data(x), self.data(cands));
        let out = (0..nc)
            .map(|c| {
                let row = &cs[c * d..(c + 1) * d];
                -xs.iter()
                    .zip(row)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        self.push(
            Tensor::matrix(1, nc, out)?,
            Op::NegDistances { x, cands },
            &[x, cands],
            "neg_distances",
        )
    }

    /// Summed negative log-softmax of each row at its target column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            loss += lse - row[targets[i]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Plackett–Luce negative log-likelihood of `order` under `scores`.
    pub fn listmle(&mut self, scores: Var, order: &[usize]) -> Result<Var> {
        let s = self.data(scores);
        validate_permutation(order, s.len())?;
        let x: Vec<f64> = order.iter().map(|&o| s[o]).collect();
        let lse = suffix_log_sum_exp(&x);
        let loss = x.iter().zip(&lse).map(|(xi, l)| l - xi).sum();
        self.push(
            Tensor::scalar(loss),
            Op::ListMle {
                scores,
                order: order.to_vec(),
            },
            &[scores],
            "listmle",
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x], "sum_all")
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            if self.nodes[v.0].value.len() != 1 {
                return Err(Error::contract("weighted_sum expects scalar terms"));
            }
            s += w * self.data(v)[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum(terms.to_vec()),
            &inputs,
            "weighted_sum",
        )
    }

    /// Reverse pass from a scalar `loss`; parameter gradients are added into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].value.check_finite("loss")?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads[i].as_ref()) {
                let p = store.get_mut(id);
                if !p.frozen {
                    for (a, b) in p.grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, local: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(&local) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(local),
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        row_major(n),
                        self.data(*b),
                        View::transposed(n),
                        0.0,
                        &mut da,
                        row_major(k),
                    );
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.data(*a),
                        View::transposed(k),
                        g,
                        row_major(n),
                        0.0,
                        &mut db,
                        row_major(n),
                    );
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.requires_grad(*b) {
                    let c = self.dims(*x).1;
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::MulConst(x, mask) => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect())
            }
            Op::Relu(x) => {
                let xs = self.data(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let ys = node.value.data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(ys).map(|(g, y)| g * y * (1.0 - y)).collect(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.dims(*x);
                let gs = self.data(*gain);
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                let mut dxhat = vec![0.0; c];
                for row in 0..r {
                    let gr = &g[row * c..(row + 1) * c];
                    let hr = &xhat[row * c..(row + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gs[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hr[j];
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    for j in 0..c {
                        dx[row * c + j] = inv_std[row] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => self.attention_backward(*q, *k, *v, *heads, weights, g, grads),
            Op::GatherRows(src, idx) => {
                let (r, c) = self.dims(*src);
                let mut ds = vec![0.0; r * c];
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ds[i * c + j] += g[o * c + j];
                    }
                }
                self.accumulate(grads, *src, ds);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.accumulate(grads, *p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::SoftmaxRows(x) => {
                let c = self.dims(*x).1;
                let ys = node.value.data();
                let mut dx = vec![0.0; ys.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(ys.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MixRows { weights, rows } => {
                let (j, s) = self.dims(*weights);
                let d = self.dims(*rows).1;
                let (w, r) = (self.data(*weights), self.data(*rows));
                let mut dw = vec![0.0; j * s];
                let mut dr = vec![0.0; j * s * d];
                for jj in 0..j {
                    let go = &g[jj * d..(jj + 1) * d];
                    for ss in 0..s {
                        let row = jj * s + ss;
                        let src = &r[row * d..(row + 1) * d];
                        dw[row] = go.iter().zip(src).map(|(a, b)| a * b).sum();
                        let wt = w[row];
                        for (t, gg) in dr[row * d..(row + 1) * d].iter_mut().zip(go) {
                            *t = wt * gg;
                        }
                    }
                }
                self.accumulate(grads, *weights, dw);
                self.accumulate(grads, *rows, dr);
            }
            Op::NegDistances { x, cands } => {
                let d = self.dims(*x).1;
                let (xs, cs) = (self.data(*x), self.data(*cands));
                let nc = self.dims(*cands).0;
                let mut dx = vec![0.0; d];
                let mut dc = vec![0.0; nc * d];
                for c in 0..nc {
                    let norm = -node.value.data()[c];
                    if norm == 0.0 {
                        continue;
                    }
                    let coef = g[c] / norm;
                    for t in 0..d {
                        let diff = xs[t] - cs[c * d + t];
                        dx[t] -= coef * diff;
                        dc[c * d + t] += coef * diff;
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *cands, dc);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.dims(*logits).1;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= g[0];
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::ListMle { scores, order } => {
                let s = self.data(*scores);
                let x: Vec<f64> = order.iter().map(|&o| s[o]).collect();
                let lse = suffix_log_sum_exp(&x);
                let mut ds = vec![0.0; s.len()];
                for (m, &o) in order.iter().enumerate() {
                    let mut acc = -1.0;
                    for l in &lse[..=m] {
                        acc += (x[m] - l).exp();
                    }
                    ds[o] = g[0] * acc;
                }
                self.accumulate(grads, *scores, ds);
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, vec![g[0] * w]);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (nq, d) = self.dims(q);
        let nk = self.dims(k).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut dw = vec![0.0; nq * nk];
        for h in 0..heads {
            let w = &weights[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nq,
                dh,
                nk,
                &g[h * dh..],
                row_major(d),
                &vs[h * dh..],
                View::transposed(d),
                0.0,
                &mut dw,
                row_major(nk),
            );
            gemm(
                nk,
                nq,
                dh,
                w,
                View::transposed(nk),
                &g[h * dh..],
                row_major(d),
                0.0,
                &mut dv[h * dh..],
                row_major(d),
            );
            for i in 0..nq {
                let wr = &w[i * nk..(i + 1) * nk];
                let dr = &mut dw[i * nk..(i + 1) * nk];
                let dot: f64 = wr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dd, ww) in dr.iter_mut().zip(wr) {
                    *dd = ww * (*dd - dot) * scale;
                }
            }
            gemm(
                nq,
                nk,
                dh,
                &dw,
                row_major(nk),
                &ks[h * dh..],
                row_major(d),
                0.0,
                &mut dq[h * dh..],
                row_major(d),
            );
            gemm(
                nk,
                nq,
                dh,
                &dw,
                View::transposed(nk),
                &qs[h * dh..],
                row_major(d),
                0.0,
                &mut dk[h * dh..],
                row_major(d),
            );
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `out[j] = log Σ_{l ≥ j} exp(x_l)`.
fn suffix_log_sum_exp(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut acc = f64::NEG_INFINITY;
    for j in (0..x.len()).rev() {
        let (hi, lo) = if acc > x[j] { (acc, x[j]) } else { (x[j], acc) };
        acc = if lo == f64::NEG_INFINITY {
            hi
        } else {
            hi + (lo - hi).exp().ln_1p()
        };
        out[j] = acc;
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn validate_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::contract(format!(
            "slot order has {} entries for {n} scores",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &o in order {
        if o >= n || seen[o] {
            return Err(Error::contract(format!(
                "slot order {order:?} is not a permutation"
            )));
        }
        seen[o] = true;
    }
    Ok(())
}
