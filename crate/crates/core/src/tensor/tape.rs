use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::contrastive::{self, Direction};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// GRU weights as tape variables, PyTorch gate layout `[reset; update; new]`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    /// `3H × F`
    pub w_ih: Var,
    /// `3H × H`
    pub w_hh: Var,
    /// `3H`
    pub b_ih: Var,
    /// `3H`
    pub b_hh: Var,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool1d {
        x: usize,
        argmax: Vec<usize>,
    },
    MatVec {
        w: usize,
        x: usize,
    },
    MatMulNt {
        a: usize,
        b: usize,
    },
    Transpose(usize),
    Row {
        a: usize,
        row: usize,
    },
    Slice {
        a: usize,
        start: usize,
    },
    Stack(Vec<usize>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    OneMinus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    SumSquares(usize),
    L2Normalize {
        v: usize,
        norm: f64,
        eps: f64,
    },
    InfoNce {
        sims: usize,
        temperature: f64,
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], j: usize) -> &'a mut Vec<f64> {
    let len = nodes[j].value.numel();
    adj[j].get_or_insert_with(|| vec![0.0; len])
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of recorded operations. Nodes are appended in evaluation
/// order, so every node's inputs precede it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf; its gradient buffer is filled by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        &self.nodes[v.index].value
    }

    /// Accumulated gradient of a parameter leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.value(v).grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    fn t(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn expect_rank(&self, op: &'static str, i: usize, rank: usize) -> Result<&[usize]> {
        let shape = self.t(i).shape();
        if shape.len() != rank {
            return Err(Error::invalid(
                op,
                format!("expected rank-{rank} input, got shape {shape:?}"),
            ));
        }
        Ok(shape)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.t(a).shape().to_vec(),
                found: self.t(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Cross-correlation without padding: `x` is `C_in × T`, `w` is
    /// `C_out × C_in × K`, output is `C_out × ((T − K) / stride + 1)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let &[c_in, time] = self.expect_rank("conv1d", xi, 2)? else {
            unreachable!()
        };
        let &[c_out, w_in, kernel] = self.expect_rank("conv1d", wi, 3)? else {
            unreachable!()
        };
        if w_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                expected: vec![c_in, time],
                found: self.t(wi).shape().to_vec(),
            });
        }
        if self.t(bi).shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv1d bias",
                expected: vec![c_out],
                found: self.t(bi).shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d", "stride must be positive"));
        }
        if kernel == 0 || time < kernel {
            return Err(Error::TimeCollapsed {
                layer: "conv1d".into(),
                time,
                needed: kernel.max(1),
            });
        }
        let t_out = (time - kernel) / stride + 1;
        let (xd, wd, bd) = (self.t(xi).data(), self.t(wi).data(), self.t(bi).data());
        let mut out = vec![0.0; c_out * t_out];
        for o in 0..c_out {
            let row = &mut out[o * t_out..(o + 1) * t_out];
            row.iter_mut().for_each(|y| *y = bd[o]);
            for c in 0..c_in {
                let xrow = &xd[c * time..(c + 1) * time];
                let wrow = &wd[(o * c_in + c) * kernel..(o * c_in + c + 1) * kernel];
                for (t, y) in row.iter_mut().enumerate() {
                    let window = &xrow[t * stride..t * stride + kernel];
                    *y += window.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let value = Tensor::new(vec![c_out, t_out], out)?;
        Ok(self.push_op(
            value,
            Op::Conv1d {
                x: xi,
                w: wi,
                b: bi,
                stride,
            },
            &[xi, wi, bi],
        ))
    }

    /// Normalizes each group of `channels / groups` consecutive channels over
    /// all of its (channel, time) entries, then applies a per-channel affine map.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let &[channels, time] = self.expect_rank("group_norm", xi, 2)? else {
            unreachable!()
        };
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(
                "group_norm",
                format!("{channels} channels not divisible into {groups} groups"),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("group_norm", "eps must be positive"));
        }
        for i in [gi, bi] {
            if self.t(i).shape() != [channels] {
                return Err(Error::ShapeMismatch {
                    op: "group_norm affine",
                    expected: vec![channels],
                    found: self.t(i).shape().to_vec(),
                });
            }
        }
        let per_group = channels / groups;
        let span = per_group * time;
        let xd = self.t(xi).data();
        let (gd, bd) = (self.t(gi).data(), self.t(bi).data());
        let mut xhat = vec![0.0; channels * time];
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let block = &xd[g * span..(g + 1) * span];
            let mean = block.iter().sum::<f64>() / span as f64;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / span as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (h, v) in xhat[g * span..(g + 1) * span].iter_mut().zip(block) {
                *h = (v - mean) * inv;
            }
        }
        let out = xhat
            .iter()
            .enumerate()
            .map(|(k, h)| {
                let c = k / time;
                gd[c] * h + bd[c]
            })
            .collect();
        let value = Tensor::new(vec![channels, time], out)?;
        Ok(self.push_op(
            value,
            Op::GroupNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                groups,
                xhat,
                inv_std,
            },
            &[xi, gi, bi],
        ))
    }

    /// Per-channel max over windows; the gradient goes to the first maximal index.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let &[channels, time] = self.expect_rank("max_pool1d", xi, 2)? else {
            unreachable!()
        };
        if stride == 0 {
            return Err(Error::invalid("max_pool1d", "stride must be positive"));
        }
        if kernel == 0 || time < kernel {
            return Err(Error::TimeCollapsed {
                layer: "max_pool1d".into(),
                time,
                needed: kernel.max(1),
            });
        }
        let t_out = (time - kernel) / stride + 1;
        let xd = self.t(xi).data();
        let mut out = Vec::with_capacity(channels * t_out);
        let mut argmax = Vec::with_capacity(channels * t_out);
        for c in 0..channels {
            for t in 0..t_out {
                let start = c * time + t * stride;
                let mut best = start;
                for k in start + 1..start + kernel {
                    if xd[k] > xd[best] {
                        best = k;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![channels, t_out], out)?;
        Ok(self.push_op(value, Op::MaxPool1d { x: xi, argmax }, &[xi]))
    }

    /// `W · x` for `W` of shape `m × n` and `x` of length `n`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wi, xi) = (self.idx(w)?, self.idx(x)?);
        let &[m, n] = self.expect_rank("matvec", wi, 2)? else {
            unreachable!()
        };
        if self.t(xi).shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                expected: vec![n],
                found: self.t(xi).shape().to_vec(),
            });
        }
        let (wd, xd) = (self.t(wi).data(), self.t(xi).data());
        let out = (0..m)
            .map(|i| wd[i * n..(i + 1) * n].iter().zip(xd).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push_op(Tensor::vector(out), Op::MatVec { w: wi, x: xi }, &[wi, xi]))
    }

    /// `W · x + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// `A · Bᵀ` for `A` of shape `m × k` and `B` of shape `n × k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let &[m, k] = self.expect_rank("matmul_nt", ai, 2)? else {
            unreachable!()
        };
        let &[n, k2] = self.expect_rank("matmul_nt", bi, 2)? else {
            unreachable!()
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                expected: vec![m, k],
                found: vec![n, k2],
            });
        }
        let (ad, bd) = (self.t(ai).data(), self.t(bi).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out.push(arow.iter().zip(brow).map(|(x, y)| x * y).sum());
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMulNt { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let &[m, n] = self.expect_rank("transpose", ai, 2)? else {
            unreachable!()
        };
        let ad = self.t(ai).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push_op(value, Op::Transpose(ai), &[ai]))
    }

    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let &[m, _] = self.expect_rank("row", ai, 2)? else {
            unreachable!()
        };
        if row >= m {
            return Err(Error::invalid("row", format!("row {row} out of {m}")));
        }
        let value = Tensor::vector(self.t(ai).row(row).to_vec());
        Ok(self.push_op(value, Op::Row { a: ai, row }, &[ai]))
    }

    /// Contiguous sub-vector `a[start..start + len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let &[n] = self.expect_rank("slice", ai, 1)? else {
            unreachable!()
        };
        if start + len > n {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} out of {n}", start + len),
            ));
        }
        let value = Tensor::vector(self.t(ai).data()[start..start + len].to_vec());
        Ok(self.push_op(value, Op::Slice { a: ai, start }, &[ai]))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::invalid("stack", "no rows"));
        }
        let idx = rows.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let &[n] = self.expect_rank("stack", idx[0], 1)? else {
            unreachable!()
        };
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            if self.t(i).shape() != [n] {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    expected: vec![n],
                    found: self.t(i).shape().to_vec(),
                });
            }
            out.extend_from_slice(self.t(i).data());
        }
        let value = Tensor::new(vec![idx.len(), n], out)?;
        let inputs = idx.clone();
        Ok(self.push_op(value, Op::Stack(idx), &inputs))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(name, ai, bi)?;
        let out = self
            .t(ai)
            .data()
            .iter()
            .zip(self.t(bi).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.t(ai).shape().to_vec(), out)?;
        Ok(self.push_op(value, op(ai, bi), &[ai, bi]))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.t(ai).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.t(ai).shape().to_vec(), out)?;
        Ok(self.push_op(value, op, &[ai]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        self.map_op(a, |x| x * factor, Op::Scale(ai, factor))
    }

    /// `1 − a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        self.map_op(a, |x| 1.0 - x, Op::OneMinus(ai))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        self.map_op(a, sigmoid, Op::Sigmoid(ai))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        self.map_op(a, f64::tanh, Op::Tanh(ai))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        self.map_op(a, |x| x.max(0.0), Op::Relu(ai))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let s = self.t(ai).data().iter().sum();
        Ok(self.push_op(Tensor::scalar(s), Op::Sum(ai), &[ai]))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let s = self.t(ai).data().iter().map(|x| x * x).sum();
        Ok(self.push_op(Tensor::scalar(s), Op::SumSquares(ai), &[ai]))
    }

    /// `v / max(‖v‖₂, eps)`
    pub fn l2_normalize(&mut self, v: Var, eps: f64) -> Result<Var> {
        let vi = self.idx(v)?;
        if !(eps > 0.0) {
            return Err(Error::invalid("l2_normalize", "eps must be positive"));
        }
        let norm = self.t(vi).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        let out = self.t(vi).data().iter().map(|x| x / denom).collect();
        let value = Tensor::new(self.t(vi).shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::L2Normalize { v: vi, norm, eps }, &[vi]))
    }

    /// Contrastive cross-entropy over a square similarity matrix whose
    /// diagonal holds the positive pairs.
    pub fn info_nce(&mut self, sims: Var, temperature: f64, direction: Direction) -> Result<Var> {
        let si = self.idx(sims)?;
        let shape = self.t(si).shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::invalid(
                "info_nce",
                format!("similarity matrix must be square, got {shape:?}"),
            ));
        }
        let b = shape[0];
        let probs = contrastive::softmax_matrix(self.t(si).data(), b, b, temperature, direction)?;
        let log_diag = contrastive::log_diagonal(self.t(si).data(), b, temperature, direction);
        let loss = -log_diag.iter().sum::<f64>() / b as f64;
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::InfoNce {
                sims: si,
                temperature,
                probs,
            },
            &[si],
        ))
    }

    /// Mean softmax cross-entropy of `B × C` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let &[b, c] = self.expect_rank("softmax_cross_entropy", li, 2)? else {
            unreachable!()
        };
        if targets.len() != b {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                expected: vec![b],
                found: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("target {bad} out of {c} classes"),
            ));
        }
        let probs = contrastive::softmax_matrix(
            self.t(li).data(),
            b,
            c,
            1.0,
            Direction::RowToCol,
        )?;
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| probs[i * c + t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / b as f64;
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
            &[li],
        ))
    }

    /// Unidirectional GRU over a `T × F` sequence starting from `h0`.
    /// Returns all hidden states (`T × H`) and the final state.
    ///
    /// r = σ(W_ir x + b_ir + W_hr h + b_hr)
    /// z = σ(W_iz x + b_iz + W_hz h + b_hz)
    /// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
    /// h' = (1 − z) ⊙ n + z ⊙ h
    pub fn gru(&mut self, seq: Var, weights: &GruWeights, h0: Var) -> Result<(Var, Var)> {
        let si = self.idx(seq)?;
        let &[time, features] = self.expect_rank("gru", si, 2)? else {
            unreachable!()
        };
        let wih = self.idx(weights.w_ih)?;
        let &[three_h, f_in] = self.expect_rank("gru", wih, 2)? else {
            unreachable!()
        };
        if f_in != features {
            return Err(Error::ShapeMismatch {
                op: "gru input weights",
                expected: vec![three_h, features],
                found: vec![three_h, f_in],
            });
        }
        if three_h == 0 || three_h % 3 != 0 {
            return Err(Error::invalid("gru", "gate weights must have 3H rows"));
        }
        let hidden = three_h / 3;
        let checks = [
            (weights.w_hh, vec![three_h, hidden]),
            (weights.b_ih, vec![three_h]),
            (weights.b_hh, vec![three_h]),
            (h0, vec![hidden]),
        ];
        for (v, expected) in checks {
            let i = self.idx(v)?;
            if self.t(i).shape() != expected.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "gru",
                    expected,
                    found: self.t(i).shape().to_vec(),
                });
            }
        }
        if time == 0 {
            return Err(Error::TimeCollapsed {
                layer: "gru".into(),
                time,
                needed: 1,
            });
        }

        let input_gates = self.matmul_nt(seq, weights.w_ih)?;
        let mut h = h0;
        let mut states = Vec::with_capacity(time);
        for t in 0..time {
            let gi = self.row(input_gates, t)?;
            let gi = self.add(gi, weights.b_ih)?;
            let gh = self.matvec(weights.w_hh, h)?;
            let gh = self.add(gh, weights.b_hh)?;

            let (ir, hr) = (self.slice(gi, 0, hidden)?, self.slice(gh, 0, hidden)?);
            let r = self.add(ir, hr)?;
            let r = self.sigmoid(r)?;

            let (iz, hz) = (self.slice(gi, hidden, hidden)?, self.slice(gh, hidden, hidden)?);
            let z = self.add(iz, hz)?;
            let z = self.sigmoid(z)?;

            let (i_n, h_n) = (
                self.slice(gi, 2 * hidden, hidden)?,
                self.slice(gh, 2 * hidden, hidden)?,
            );
            let gated = self.mul(r, h_n)?;
            let n = self.add(i_n, gated)?;
            let n = self.tanh(n)?;

            let keep = self.one_minus(z)?;
            let fresh = self.mul(keep, n)?;
            let carried = self.mul(z, h)?;
            h = self.add(fresh, carried)?;
            states.push(h);
        }
        let all = self.stack(&states)?;
        Ok((all, h))
    }

    /// Reverse sweep from a scalar `loss`, adding ∂loss/∂p into the gradient
    /// buffer of every parameter leaf. Calling it again accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.t(li).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.t(li).shape()),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        adj[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[i] = Some(dy);
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }

        for (i, a) in adj.into_iter().enumerate() {
            if let Some(g) = a {
                let node = &mut self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        macro_rules! grad_of {
            ($j:expr) => {
                slot(adj, nodes, $j)
            };
        }
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let (c_in, time) = (nodes[x].value.shape()[0], nodes[x].value.shape()[1]);
                let (c_out, kernel) = (nodes[w].value.shape()[0], nodes[w].value.shape()[2]);
                let t_out = out.shape()[1];
                let (xd, wd) = (nodes[x].value.data(), nodes[w].value.data());
                if wants(b) {
                    let db = grad_of!(b);
                    for o in 0..c_out {
                        db[o] += dy[o * t_out..(o + 1) * t_out].iter().sum::<f64>();
                    }
                }
                if wants(w) {
                    let dw = grad_of!(w);
                    for o in 0..c_out {
                        let dyr = &dy[o * t_out..(o + 1) * t_out];
                        for c in 0..c_in {
                            let xrow = &xd[c * time..(c + 1) * time];
                            for k in 0..kernel {
                                let mut acc = 0.0;
                                for (t, g) in dyr.iter().enumerate() {
                                    acc += g * xrow[t * stride + k];
                                }
                                dw[(o * c_in + c) * kernel + k] += acc;
                            }
                        }
                    }
                }
                if wants(x) {
                    let dx = grad_of!(x);
                    for o in 0..c_out {
                        let dyr = &dy[o * t_out..(o + 1) * t_out];
                        for c in 0..c_in {
                            let wrow = &wd[(o * c_in + c) * kernel..(o * c_in + c + 1) * kernel];
                            let dxrow = &mut dx[c * time..(c + 1) * time];
                            for (t, g) in dyr.iter().enumerate() {
                                for (k, wv) in wrow.iter().enumerate() {
                                    dxrow[t * stride + k] += g * wv;
                                }
                            }
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let (channels, time) = (out.shape()[0], out.shape()[1]);
                let gd = nodes[gamma].value.data();
                if wants(gamma) {
                    let dg = grad_of!(gamma);
                    for c in 0..channels {
                        let r = c * time..(c + 1) * time;
                        dg[c] += dy[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if wants(beta) {
                    let db = grad_of!(beta);
                    for c in 0..channels {
                        db[c] += dy[c * time..(c + 1) * time].iter().sum::<f64>();
                    }
                }
                if wants(x) {
                    let dx = grad_of!(x);
                    let span = channels / groups * time;
                    let m = span as f64;
                    for g in 0..groups {
                        let r = g * span..(g + 1) * span;
                        let dxhat: Vec<f64> =
                            r.clone().map(|k| dy[k] * gd[k / time]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 =
                            dxhat.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
                        for (off, k) in r.enumerate() {
                            dx[k] += inv_std[g] / m * (m * dxhat[off] - sum_d - xhat[k] * sum_dx);
                        }
                    }
                }
            }
            Op::MaxPool1d { x, argmax } => {
                let dx = grad_of!(*x);
                for (g, &k) in dy.iter().zip(argmax) {
                    dx[k] += g;
                }
            }
            Op::MatVec { w, x } => {
                let (w, x) = (*w, *x);
                let n = nodes[x].value.numel();
                let (wd, xd) = (nodes[w].value.data(), nodes[x].value.data());
                if wants(w) {
                    let dw = grad_of!(w);
                    for (r, g) in dy.iter().enumerate() {
                        for (c, xv) in xd.iter().enumerate() {
                            dw[r * n + c] += g * xv;
                        }
                    }
                }
                if wants(x) {
                    let dx = grad_of!(x);
                    for (r, g) in dy.iter().enumerate() {
                        for (c, d) in dx.iter_mut().enumerate() {
                            *d += wd[r * n + c] * g;
                        }
                    }
                }
            }
            Op::MatMulNt { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let n = nodes[b].value.shape()[0];
                let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
                if wants(a) {
                    let da = grad_of!(a);
                    for i in 0..m {
                        for j in 0..n {
                            let g = dy[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                da[i * k + l] += g * bd[j * k + l];
                            }
                        }
                    }
                }
                if wants(b) {
                    let db = grad_of!(b);
                    for i in 0..m {
                        for j in 0..n {
                            let g = dy[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                db[j * k + l] += g * ad[i * k + l];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[1], out.shape()[0]);
                let da = grad_of!(*a);
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += dy[c * m + r];
                    }
                }
            }
            Op::Row { a, row } => {
                let n = out.numel();
                let da = grad_of!(*a);
                for (d, g) in da[row * n..(row + 1) * n].iter_mut().zip(dy) {
                    *d += g;
                }
            }
            Op::Slice { a, start } => {
                let da = grad_of!(*a);
                for (d, g) in da[*start..*start + dy.len()].iter_mut().zip(dy) {
                    *d += g;
                }
            }
            Op::Stack(rows) => {
                let n = out.shape()[1];
                for (r, &j) in rows.iter().enumerate() {
                    if wants(j) {
                        let dj = grad_of!(j);
                        for (d, g) in dj.iter_mut().zip(&dy[r * n..(r + 1) * n]) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    grad_of!(*a).iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
                if wants(*b) {
                    grad_of!(*b).iter_mut().zip(dy).for_each(|(d, g)| *d += sign * g);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    let bd = nodes[b].value.data();
                    grad_of!(a)
                        .iter_mut()
                        .zip(dy.iter().zip(bd))
                        .for_each(|(d, (g, y))| *d += g * y);
                }
                if wants(b) {
                    let ad = nodes[a].value.data();
                    grad_of!(b)
                        .iter_mut()
                        .zip(dy.iter().zip(ad))
                        .for_each(|(d, (g, x))| *d += g * x);
                }
            }
            Op::Scale(a, f) => {
                grad_of!(*a).iter_mut().zip(dy).for_each(|(d, g)| *d += g * f);
            }
            Op::OneMinus(a) => {
                grad_of!(*a).iter_mut().zip(dy).for_each(|(d, g)| *d -= g);
            }
            Op::Sigmoid(a) => {
                grad_of!(*a)
                    .iter_mut()
                    .zip(dy.iter().zip(out.data()))
                    .for_each(|(d, (g, s))| *d += g * s * (1.0 - s));
            }
            Op::Tanh(a) => {
                grad_of!(*a)
                    .iter_mut()
                    .zip(dy.iter().zip(out.data()))
                    .for_each(|(d, (g, t))| *d += g * (1.0 - t * t));
            }
            Op::Relu(a) => {
                let xd = nodes[*a].value.data();
                grad_of!(*a)
                    .iter_mut()
                    .zip(dy.iter().zip(xd))
                    .for_each(|(d, (g, x))| {
                        if *x > 0.0 {
                            *d += g
                        }
                    });
            }
            Op::Sum(a) => {
                grad_of!(*a).iter_mut().for_each(|d| *d += dy[0]);
            }
            Op::SumSquares(a) => {
                let xd = nodes[*a].value.data();
                grad_of!(*a)
                    .iter_mut()
                    .zip(xd)
                    .for_each(|(d, x)| *d += 2.0 * x * dy[0]);
            }
            Op::L2Normalize { v, norm, eps } => {
                let dv = grad_of!(*v);
                if norm > eps {
                    let y = out.data();
                    let proj: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for ((d, g), yv) in dv.iter_mut().zip(dy).zip(y) {
                        *d += (g - yv * proj) / norm;
                    }
                } else {
                    dv.iter_mut().zip(dy).for_each(|(d, g)| *d += g / eps);
                }
            }
            Op::InfoNce {
                sims,
                temperature,
                probs,
            } => {
                let b = nodes[*sims].value.shape()[0];
                let scale = dy[0] / (temperature * b as f64);
                let ds = grad_of!(*sims);
                for r in 0..b {
                    for c in 0..b {
                        let k = r * b + c;
                        let target = if r == c { 1.0 } else { 0.0 };
                        ds[k] += scale * (probs[k] - target);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (b, c) = (nodes[*logits].value.shape()[0], nodes[*logits].value.shape()[1]);
                let scale = dy[0] / b as f64;
                let dl = grad_of!(*logits);
                for (r, &t) in targets.iter().enumerate() {
                    for col in 0..c {
                        let target = if col == t { 1.0 } else { 0.0 };
                        dl[r * c + col] += scale * (probs[r * c + col] - target);
                    }
                }
            }
        }
    }
}
