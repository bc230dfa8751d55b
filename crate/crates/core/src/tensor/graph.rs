use std::collections::HashMap;

use super::kernels::{gemm_nn, gemm_nt, gemm_strided, gemm_tn};
use super::{ParamId, ParamStore, Precision, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// One causal attention block inside a stacked attention call.
///
/// Query rows `q_start..q_start + q_len` attend key rows
/// `k_start..k_start + k_len`; the last `q_len` keys are aligned with the
/// queries, so query `i` sees keys `0..=k_len - q_len + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        reduction: Reduction,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        n_heads: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: Vec<AttnSegment>,
        /// Per segment: `n_heads` row-major `q_len × k_len` probability blocks.
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order, which
/// is a topological order, so backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    grad_enabled: bool,
    bound: HashMap<(u64, ParamId), Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            precision: Precision::F64,
            grad_enabled: true,
            bound: HashMap::new(),
        }
    }

    /// A graph whose leaves never require gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Free variable that receives a gradient (used for probes and checks).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Binds a stored parameter. Repeated binds of the same parameter return
    /// the same leaf so its gradient accumulates over every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(store.uid(), id)) {
            return v;
        }
        let v = self.push_leaf(store.get(id).clone(), store.is_trainable(id));
        self.bound.insert((store.uid(), id), v);
        v
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return dim_err(format!("matmul expects rank-2 operands, got {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return dim_err(format!("matmul inner extents {k} and {} differ", sb[0]));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, 0.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return dim_err("transpose expects a rank-2 tensor");
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x[.., d] + bias[d]`, broadcast over the leading rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        if self.value(bias).numel() != c {
            return dim_err(format!(
                "add_bias: bias of {} elements for rows of {c}",
                self.value(bias).numel()
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (y, bj) in row.iter_mut().zip(&b) {
                *y += bj;
            }
        }
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v += c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        t
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu_fwd);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        self.push(t, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::ln);
        self.push(t, Op::Log(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.rows_cols(x);
        if d == 0 {
            return dim_err("layer_norm over an empty axis");
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return dim_err("layer_norm: gain/bias length differs from row width");
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        if c == 0 {
            return dim_err("softmax over an empty axis");
        }
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        let mut t = self.value(x).clone();
        let mut norms = Vec::new();
        for row in t.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateInput(
                    "l2_normalize of a zero or non-finite row".into(),
                ));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(t, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Cosine similarity of two vectors (or row-aligned matrices, summed).
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape(u, v, "cosine_sim")?;
        let un = self.l2_normalize(u)?;
        let vn = self.l2_normalize(v)?;
        let p = self.mul(un, vn)?;
        Ok(self.sum_all(p))
    }

    /// Cross-entropy of `logits[T×V]` against target indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let (t_len, v) = self.rows_cols(logits);
        if targets.len() != t_len {
            return dim_err(format!(
                "cross_entropy: {} targets for {t_len} rows",
                targets.len()
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {bad} out of range for {v} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &tgt) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[tgt];
            row.iter_mut().for_each(|z| *z = (*z - lse).exp());
        }
        if reduction == Reduction::Mean && t_len > 0 {
            total /= t_len as f64;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                reduction,
            },
            &[logits],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Sum of a rank-2 tensor over `axis` (0: down columns, 1: along rows).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || axis > 1 {
            return dim_err("sum_axis expects a rank-2 tensor and axis 0 or 1");
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let out = if axis == 0 {
            let mut o = vec![0.0; c];
            for row in src.chunks(c) {
                o.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            o
        } else {
            src.chunks(c).map(|row| row.iter().sum()).collect()
        };
        let len = if axis == 0 { c } else { r };
        Ok(self.push(Tensor::new(vec![len], out)?, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let summed = self.sum_axis(x, axis)?;
        let n = s.get(axis).copied().unwrap_or(1).max(1);
        Ok(self.scale(summed, 1.0 / n as f64))
    }

    /// Concatenates rank-2 tensors along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat_rows of nothing");
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return dim_err(format!("concat_rows: widths {c} and {} differ", t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Selects rows by index (duplicates allowed). Embedding lookup is this
    /// op applied to a table; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Mean of each `(start, len)` run of rows; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > r {
                return dim_err(format!("segment ({start}, {len}) invalid for {r} rows"));
            }
            let out = &mut data[s * c..(s + 1) * c];
            for i in start..start + len {
                out.iter_mut()
                    .zip(&src[i * c..(i + 1) * c])
                    .for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= len as f64);
        }
        Ok(self.push(
            Tensor::new(vec![segments.len(), c], data)?,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            &[x],
        ))
    }

    /// Rotary position embedding (rotate-half pairing) applied per head.
    /// `positions[r]` is the absolute position of row `r`.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let (r, d) = self.rows_cols(x);
        if positions.len() != r || n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return dim_err("rope: positions/heads do not match the input");
        }
        let mut t = self.value(x).clone();
        rope_apply(t.data_mut(), d, n_heads, positions, base, false);
        Ok(self.push(
            t,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                n_heads,
                base,
            },
            &[x],
        ))
    }

    /// Multi-head causal attention over stacked sequences.
    ///
    /// `q` is `[Nq × d]`, `k` and `v` are `[Nk × d]`; every segment is an
    /// independent causal block (see [`AttnSegment`]). Scores are scaled by
    /// `1/sqrt(d / n_heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, segments: &[AttnSegment]) -> Result<Var> {
        let (nq, d) = self.rows_cols(q);
        let (nk, dk) = self.rows_cols(k);
        if dk != d || self.rows_cols(v) != (nk, d) || n_heads == 0 || d % n_heads != 0 {
            return dim_err("attention: q/k/v widths or head count inconsistent");
        }
        for s in segments {
            if s.q_len == 0 || s.k_len < s.q_len || s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return dim_err(format!("attention: invalid segment {s:?}"));
            }
        }
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::with_capacity(segments.len());
        for s in segments {
            let block = s.q_len * s.k_len;
            let mut p = vec![0.0; n_heads * block];
            let shift = s.k_len - s.q_len;
            for h in 0..n_heads {
                let ph = &mut p[h * block..(h + 1) * block];
                let qoff = s.q_start * d + h * hd;
                let koff = s.k_start * d + h * hd;
                gemm_strided(
                    s.q_len, hd, s.k_len,
                    &qd[qoff..], (d as isize, 1),
                    &kd[koff..], (1, d as isize),
                    ph, (s.k_len as isize, 1),
                    scale, 0.0,
                );
                for i in 0..s.q_len {
                    let row = &mut ph[i * s.k_len..(i + 1) * s.k_len];
                    let visible = shift + i + 1;
                    softmax_in_place(&mut row[..visible]);
                    row[visible..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm_strided(
                    s.q_len, s.k_len, hd,
                    ph, (s.k_len as isize, 1),
                    &vd[koff..], (d as isize, 1),
                    &mut out[qoff..], (d as isize, 1),
                    1.0, 0.0,
                );
            }
            probs.push(p);
        }
        Ok(self.push(
            Tensor::new(vec![nq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segments: segments.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities of `segment`/`head` for an attention node, as a
    /// row-major `q_len × k_len` block.
    pub fn attention_probs(&self, attn: Var, segment: usize, head: usize) -> Option<(&[f64], AttnSegment)> {
        match &self.nodes[attn.0].op {
            Op::Attention {
                probs, segments, n_heads, ..
            } if segment < segments.len() && head < *n_heads => {
                let s = segments[segment];
                let block = s.q_len * s.k_len;
                Some((&probs[segment][head * block..(head + 1) * block], s))
            }
            _ => None,
        }
    }

    pub fn attention_heads(&self, attn: Var) -> Option<usize> {
        match &self.nodes[attn.0].op {
            Op::Attention { n_heads, .. } => Some(*n_heads),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return dim_err("backward expects a scalar loss");
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
        })
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len_of = |v: Var| nodes[v.0].value.numel();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let ga = buf(grads, *a, m * k);
                    gemm_nt(m, n, k, gy, nodes[b.0].value.data(), ga, 1.0);
                }
                if wants(*b) {
                    let gb = buf(grads, *b, k * n);
                    gemm_tn(k, m, n, nodes[a.0].value.data(), gy, gb, 1.0);
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let s = nodes[x.0].value.shape();
                    let (r, c) = (s[0], s[1]);
                    let gx = buf(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gy[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) | Op::AddScalar(x) => {
                if wants(*x) {
                    axpy(buf(grads, *x, gy.len()), 1.0, gy);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    axpy(buf(grads, *a, gy.len()), 1.0, gy);
                }
                if wants(*b) {
                    axpy(buf(grads, *b, gy.len()), sign, gy);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let ga = buf(grads, *a, gy.len());
                    for ((g, d), o) in ga.iter_mut().zip(gy).zip(bv) {
                        *g += d * o;
                    }
                }
                if wants(*b) {
                    let gb = buf(grads, *b, gy.len());
                    for ((g, d), o) in gb.iter_mut().zip(gy).zip(av) {
                        *g += d * o;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    axpy(buf(grads, *x, gy.len()), 1.0, gy);
                }
                if wants(*bias) {
                    let c = len_of(*bias);
                    let gb = buf(grads, *bias, c);
                    for row in gy.chunks(c) {
                        axpy(gb, 1.0, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    axpy(buf(grads, *x, gy.len()), *c, gy);
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    let gx = buf(grads, *x, gy.len());
                    for ((g, d), &xi) in gx.iter_mut().zip(gy).zip(xv) {
                        *g += d * gelu_grad(xi);
                    }
                }
            }
            Op::Exp(x) => {
                if wants(*x) {
                    let gx = buf(grads, *x, gy.len());
                    for ((g, d), yi) in gx.iter_mut().zip(gy).zip(y) {
                        *g += d * yi;
                    }
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    let gx = buf(grads, *x, gy.len());
                    for ((g, d), xi) in gx.iter_mut().zip(gy).zip(xv) {
                        *g += d / xi;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = len_of(*gain);
                let gv = nodes[gain.0].value.data();
                if wants(*gain) {
                    let gg = buf(grads, *gain, d);
                    for (grow, hrow) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = buf(grads, *bias, d);
                    for grow in gy.chunks(d) {
                        axpy(gb, 1.0, grow);
                    }
                }
                if wants(*x) {
                    let gx = buf(grads, *x, gy.len());
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in gy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let c = nodes[x.0].value.cols();
                    let gx = buf(grads, *x, gy.len());
                    for ((grow, yrow), out) in gy.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if wants(*x) {
                    let c = nodes[x.0].value.cols();
                    let gx = buf(grads, *x, gy.len());
                    for (r, ((grow, yrow), out)) in gy.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] += (grow[j] - yrow[j] * s) / norms[r];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                reduction,
            } => {
                if wants(*logits) {
                    let v = nodes[logits.0].value.cols();
                    let mut g = gy[0];
                    if *reduction == Reduction::Mean && !targets.is_empty() {
                        g /= targets.len() as f64;
                    }
                    let gx = buf(grads, *logits, probs.len());
                    for (t, &tgt) in targets.iter().enumerate() {
                        for j in 0..v {
                            gx[t * v + j] += g * probs[t * v + j];
                        }
                        gx[t * v + tgt] -= g;
                    }
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                if wants(*x) {
                    let n = len_of(*x);
                    let g = if matches!(node.op, Op::MeanAll(_)) {
                        gy[0] / n.max(1) as f64
                    } else {
                        gy[0]
                    };
                    buf(grads, *x, n).iter_mut().for_each(|v| *v += g);
                }
            }
            Op::SumAxis { x, axis } => {
                if wants(*x) {
                    let c = nodes[x.0].value.cols();
                    let n = len_of(*x);
                    let gx = buf(grads, *x, n);
                    for (r, row) in gx.chunks_mut(c).enumerate() {
                        if *axis == 0 {
                            axpy(row, 1.0, gy);
                        } else {
                            row.iter_mut().for_each(|v| *v += gy[r]);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len_of(p);
                    if wants(p) {
                        axpy(buf(grads, p, n), 1.0, &gy[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let c = nodes[x.0].value.cols();
                    let gx = buf(grads, *x, len_of(*x));
                    for (o, &i) in idx.iter().enumerate() {
                        axpy(&mut gx[i * c..(i + 1) * c], 1.0, &gy[o * c..(o + 1) * c]);
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                if wants(*x) {
                    let c = nodes[x.0].value.cols();
                    let gx = buf(grads, *x, len_of(*x));
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let g = &gy[s * c..(s + 1) * c];
                        for i in start..start + len {
                            axpy(&mut gx[i * c..(i + 1) * c], 1.0 / len as f64, g);
                        }
                    }
                }
            }
            Op::Rope {
                x,
                positions,
                n_heads,
                base,
            } => {
                if wants(*x) {
                    let d = nodes[x.0].value.cols();
                    let mut back = gy.to_vec();
                    rope_apply(&mut back, d, *n_heads, positions, *base, true);
                    axpy(buf(grads, *x, gy.len()), 1.0, &back);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segments,
                probs,
            } => {
                let (qt, kt, vt) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let d = qt.cols();
                let hd = d / n_heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                for (s, p) in segments.iter().zip(probs) {
                    let block = s.q_len * s.k_len;
                    let mut dp = vec![0.0; block];
                    for h in 0..*n_heads {
                        let ph = &p[h * block..(h + 1) * block];
                        let qoff = s.q_start * d + h * hd;
                        let koff = s.k_start * d + h * hd;
                        // dV += Pᵀ dO
                        gemm_strided(
                            s.k_len, s.q_len, hd,
                            ph, (1, s.k_len as isize),
                            &gy[qoff..], (d as isize, 1),
                            &mut gv[koff..], (d as isize, 1),
                            1.0, 1.0,
                        );
                        // dP = dO Vᵀ
                        gemm_strided(
                            s.q_len, hd, s.k_len,
                            &gy[qoff..], (d as isize, 1),
                            &vd[koff..], (1, d as isize),
                            &mut dp, (s.k_len as isize, 1),
                            1.0, 0.0,
                        );
                        for i in 0..s.q_len {
                            let prow = &ph[i * s.k_len..(i + 1) * s.k_len];
                            let drow = &mut dp[i * s.k_len..(i + 1) * s.k_len];
                            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (dv, pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        // dQ += scale·dS K, dK += scale·dSᵀ Q
                        gemm_strided(
                            s.q_len, s.k_len, hd,
                            &dp, (s.k_len as isize, 1),
                            &kd[koff..], (d as isize, 1),
                            &mut gq[qoff..], (d as isize, 1),
                            scale, 1.0,
                        );
                        gemm_strided(
                            s.k_len, s.q_len, hd,
                            &dp, (1, s.k_len as isize),
                            &qd[qoff..], (d as isize, 1),
                            &mut gk[koff..], (d as isize, 1),
                            scale, 1.0,
                        );
                    }
                }
                for (var, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if wants(var) {
                        axpy(buf(grads, var, g.len()), 1.0, &g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<(u64, ParamId), Var>,
}

impl Gradients {
    /// Gradient of a node, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a bound parameter, or `None` when it was not bound or
    /// received no gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&[f64]> {
        self.bound
            .get(&(store.uid(), id))
            .and_then(|&v| self.get(v))
    }
}

fn buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn rope_apply(data: &mut [f64], d: usize, n_heads: usize, positions: &[usize], base: f64, inverse: bool) {
    let hd = d / n_heads;
    let half = hd / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / hd as f64))
        .collect();
    for (row, &pos) in data.chunks_mut(d).zip(positions) {
        let rot: Vec<(f64, f64)> = freqs
            .iter()
            .map(|f| {
                let a = pos as f64 * f;
                (a.cos(), sign * a.sin())
            })
            .collect();
        for h in 0..n_heads {
            let head = &mut row[h * hd..(h + 1) * hd];
            for (i, &(c, s)) in rot.iter().enumerate() {
                let (x1, x2) = (head[i], head[i + half]);
                head[i] = x1 * c - x2 * s;
                head[i + half] = x2 * c + x1 * s;
            }
        }
    }
}
