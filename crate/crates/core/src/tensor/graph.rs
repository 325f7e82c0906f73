use super::Tensor;
use crate::error::{Error, Result};

/// Handle into a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

/// Forward mode: train uses batch statistics in normalization and updates
/// running buffers, eval reads the running buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Attribution tag for the cost model; every recorded op carries one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostKind {
    Embedding,
    Aggregation,
    /// Pointwise layers of a refinement block outside the set operation.
    RefineMlp,
    Encoder,
    NormAct,
    Elementwise,
    Bfm,
    Decoder,
    Head,
    ClassEmbed,
    Loss,
    Other,
}

impl CostKind {
    pub fn label(self) -> &'static str {
        match self {
            CostKind::Embedding => "embedding",
            CostKind::Aggregation => "aggregation",
            CostKind::RefineMlp => "refine_mlp",
            CostKind::Encoder => "encoder",
            CostKind::NormAct => "norm_act",
            CostKind::Elementwise => "elementwise",
            CostKind::Bfm => "bfm",
            CostKind::Decoder => "decoder",
            CostKind::Head => "head",
            CostKind::ClassEmbed => "class_embed",
            CostKind::Loss => "loss",
            CostKind::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Sin,
    Cos,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    },
    Unary {
        x: TensorId,
        kind: UnaryKind,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    ReduceMax {
        x: TensorId,
        axis: usize,
        arg: Vec<u32>,
    },
    ReduceMean {
        x: TensorId,
        axis: usize,
    },
    SumAll {
        x: TensorId,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    GatherRows {
        x: TensorId,
        rows: Vec<u32>,
    },
    InterpRows {
        x: TensorId,
        idx: Vec<u32>,
        w: Vec<f64>,
        k: usize,
    },
    Reshape {
        x: TensorId,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    CrossEntropyLs {
        logits: TensorId,
        labels: Vec<u32>,
        smoothing: f64,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    stage: u16,
    kind: CostKind,
}

/// Per-op cost record used by the analysis module.
#[derive(Debug, Clone, Copy)]
pub struct CostEntry {
    pub stage: u16,
    pub kind: CostKind,
    pub flops: u64,
    pub comparisons: u64,
}

/// Reverse-mode tape. Ops append nodes; ids always reference earlier nodes,
/// so the arena order is already topological and `backward` is one reverse
/// sweep with additive gradient accumulation.
pub struct Graph {
    nodes: Vec<Node>,
    stages: Vec<String>,
    cur_stage: u16,
    cur_kind: CostKind,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            stages: vec!["global".to_string()],
            cur_stage: 0,
            cur_kind: CostKind::Other,
        }
    }

    /// Set the (stage, kind) attribution for subsequently recorded ops.
    pub fn set_scope(&mut self, stage: &str, kind: CostKind) {
        self.cur_stage = match self.stages.iter().position(|s| s == stage) {
            Some(i) => i as u16,
            None => {
                self.stages.push(stage.to_string());
                (self.stages.len() - 1) as u16
            }
        };
        self.cur_kind = kind;
    }

    pub fn set_kind(&mut self, kind: CostKind) {
        self.cur_kind = kind;
    }

    pub fn kind(&self) -> CostKind {
        self.cur_kind
    }

    pub fn stage_label(&self, stage: u16) -> &str {
        &self.stages[stage as usize]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            stage: self.cur_stage,
            kind: self.cur_kind,
        });
        id
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0 as usize]
    }

    fn requires(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    /// Constant input; no gradient is tracked into it.
    pub fn input(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; `grad` is populated by `backward`.
    pub fn param(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.node(id).value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    // ── Ops ──────────────────────────────────────────────────────────────

    /// `x @ w (+ b)` applied to the trailing axis of `x`.
    /// `x: [..., cin]`, `w: [cin, cout]`, `b: [cout]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape().len() != 2 {
            return Err(Error::shape("linear", format!("weight must be 2-d, got {:?}", ws.shape())));
        }
        let (cin, cout) = (ws.shape()[0], ws.shape()[1]);
        if xs.last_dim() != cin {
            return Err(Error::shape(
                "linear",
                format!("input width {} != weight rows {}", xs.last_dim(), cin),
            ));
        }
        if let Some(b) = b {
            let bs = self.value(b);
            if bs.shape() != [cout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} != [{}]", bs.shape(), cout),
                ));
            }
        }
        let rows = xs.leading();
        let mut out_shape = xs.shape().to_vec();
        *out_shape.last_mut().unwrap() = cout;

        let mut out = vec![0.0; rows * cout];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for r in 0..rows {
                let xr = &xd[r * cin..(r + 1) * cin];
                let or = &mut out[r * cout..(r + 1) * cout];
                if let Some(b) = b {
                    or.copy_from_slice(self.nodes[b.0 as usize].value.data());
                }
                for (i, &xi) in xr.iter().enumerate() {
                    let wr = &wd[i * cout..(i + 1) * cout];
                    for (o, &wv) in wr.iter().enumerate() {
                        or[o] += xi * wv;
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || b.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Linear { x, w, b }, rg))
    }

    fn unary(&mut self, x: TensorId, kind: UnaryKind) -> TensorId {
        let xs = self.value(x);
        let data: Vec<f64> = match kind {
            UnaryKind::Relu => xs.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            UnaryKind::Sigmoid => xs.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
            UnaryKind::Sin => xs.data().iter().map(|&v| v.sin()).collect(),
            UnaryKind::Cos => xs.data().iter().map(|&v| v.cos()).collect(),
        };
        let shape = xs.shape().to_vec();
        let rg = self.requires(x);
        self.push(Tensor { shape, data }, Op::Unary { x, kind }, rg)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn sin(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Sin)
    }

    pub fn cos(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Cos)
    }

    fn zip_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, rg))
    }

    fn reduce_dims(&self, op: &'static str, x: TensorId, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.value(x).shape();
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {} out of range for {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok((outer, len, inner, out_shape))
    }

    /// Max over `axis`. Ties route the gradient to the lowest index; among
    /// value-equal entries with different bit patterns (-0.0 next to +0.0)
    /// the total-order maximum wins, so the stored result does not depend
    /// on how entries are ordered along the axis.
    pub fn reduce_max(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (outer, len, inner, out_shape) = self.reduce_dims("reduce_max", x, axis)?;
        if len == 0 {
            return Err(Error::shape("reduce_max", "cannot reduce an empty axis".to_string()));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xd[o * len * inner + i];
                let mut best_j = 0u32;
                for j in 1..len {
                    let v = xd[(o * len + j) * inner + i];
                    if v > best || (v == best && v.total_cmp(&best).is_gt()) {
                        best = v;
                        best_j = j as u32;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_j;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::ReduceMax { x, axis, arg }, rg))
    }

    /// Mean over `axis`. Values are summed in ascending value order, so the
    /// result does not depend on how entries are ordered along the axis.
    pub fn reduce_mean(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (outer, len, inner, out_shape) = self.reduce_dims("reduce_mean", x, axis)?;
        if len == 0 {
            return Err(Error::shape("reduce_mean", "cannot reduce an empty axis".to_string()));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut scratch = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    scratch[j] = xd[(o * len + j) * inner + i];
                }
                scratch.sort_unstable_by(f64::total_cmp);
                out[o * inner + i] = scratch.iter().sum::<f64>() / len as f64;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::ReduceMean { x, axis }, rg))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs".to_string()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {} out of range for {:?}", axis, first)));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {:?} vs {:?} on axis {}", s, first, axis),
                ));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let block = s[axis] * inner;
            let pd = self.value(p).data();
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                out[dst..dst + block].copy_from_slice(&pd[o * block..(o + 1) * block]);
            }
            offset += s[axis];
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat { parts: parts.to_vec(), axis },
            rg,
        ))
    }

    /// Row gather from a 2-d tensor: `out` row `i` is `x` row `rows[i]`,
    /// reshaped to `lead + [c]`. Backward scatter-adds, so repeated rows
    /// accumulate gradient.
    pub fn gather_rows(&mut self, x: TensorId, rows: &[usize], lead: &[usize]) -> Result<TensorId> {
        let xs = self.value(x);
        if xs.shape().len() != 2 {
            return Err(Error::shape("gather_rows", format!("source must be 2-d, got {:?}", xs.shape())));
        }
        let (n, c) = (xs.shape()[0], xs.shape()[1]);
        let lead_numel: usize = lead.iter().product();
        if lead_numel != rows.len() {
            return Err(Error::shape(
                "gather_rows",
                format!("lead shape {:?} wants {} rows, got {}", lead, lead_numel, rows.len()),
            ));
        }
        let mut out = vec![0.0; rows.len() * c];
        let xd = xs.data();
        let mut idx = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(Error::shape("gather_rows", format!("row {} out of range {}", r, n)));
            }
            out[i * c..(i + 1) * c].copy_from_slice(&xd[r * c..(r + 1) * c]);
            idx.push(r as u32);
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(c);
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::GatherRows { x, rows: idx }, rg))
    }

    /// Fixed-weight row mixing: `out[i] = sum_j w[i*k+j] * x[idx[i*k+j]]`.
    /// Used for inverse-distance feature interpolation; the weights are data,
    /// not parameters, so only `x` receives gradient.
    pub fn interp_rows(
        &mut self,
        x: TensorId,
        idx: &[usize],
        w: &[f64],
        k: usize,
    ) -> Result<TensorId> {
        let xs = self.value(x);
        if xs.shape().len() != 2 {
            return Err(Error::shape("interp_rows", format!("source must be 2-d, got {:?}", xs.shape())));
        }
        if idx.len() != w.len() || k == 0 || idx.len() % k != 0 {
            return Err(Error::shape(
                "interp_rows",
                format!("index/weight lengths {} / {} not a multiple of k={}", idx.len(), w.len(), k),
            ));
        }
        let (n, c) = (xs.shape()[0], xs.shape()[1]);
        let rows = idx.len() / k;
        let mut out = vec![0.0; rows * c];
        let xd = xs.data();
        let mut idx32 = Vec::with_capacity(idx.len());
        for (slot, (&r, &wv)) in idx.iter().zip(w).enumerate() {
            if r >= n {
                return Err(Error::shape("interp_rows", format!("row {} out of range {}", r, n)));
            }
            let dst = slot / k;
            let or = &mut out[dst * c..(dst + 1) * c];
            let xr = &xd[r * c..(r + 1) * c];
            for (ov, &xv) in or.iter_mut().zip(xr) {
                *ov += wv * xv;
            }
            idx32.push(r as u32);
        }
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::InterpRows { x, idx: idx32, w: w.to_vec(), k },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let xs = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != xs.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} ({} values) cannot view as {:?}", xs.shape(), xs.numel(), shape),
            ));
        }
        let data = xs.data().to_vec();
        let rg = self.requires(x);
        Ok(self.push(Tensor { shape, data }, Op::Reshape { x }, rg))
    }

    /// Batch-style normalization over all leading axes, per trailing channel.
    ///
    /// Train mode normalizes with biased batch statistics and folds them into
    /// the running buffers (`running = (1-momentum)*running + momentum*batch`);
    /// eval mode normalizes with the running buffers and leaves them alone.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<TensorId> {
        let xs = self.value(x);
        let c = xs.last_dim();
        let rows = xs.leading();
        if rows == 0 {
            return Err(Error::shape("batch_norm", "no rows".to_string()));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{} shape {:?} != [{}]", name, self.value(id).shape(), c),
                ));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats length {} != channels {}", running_mean.len(), c),
            ));
        }

        let (mean, var) = match mode {
            Mode::Train => {
                let xd = xs.data();
                let mut mean = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        mean[ch] += xd[r * c + ch];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= rows as f64;
                }
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let d = xd[r * c + ch] - mean[ch];
                        var[ch] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= rows as f64;
                }
                for ch in 0..c {
                    running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
                    running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var[ch];
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for ch in 0..c {
                let xhat = (xd[r * c + ch] - mean[ch]) * inv_std[ch];
                out[r * c + ch] = gd[ch] * xhat + bd[ch];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train: mode == Mode::Train },
            rg,
        ))
    }

    /// Label-smoothed cross entropy, averaged over rows.
    /// Target distribution: `(1-s)` on the true class plus `s/K` everywhere.
    pub fn cross_entropy_ls(
        &mut self,
        logits: TensorId,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<TensorId> {
        let ls = self.value(logits);
        if ls.shape().len() != 2 {
            return Err(Error::shape("cross_entropy", format!("logits must be 2-d, got {:?}", ls.shape())));
        }
        let (n, k) = (ls.shape()[0], ls.shape()[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if n == 0 || k == 0 {
            return Err(Error::shape("cross_entropy", "empty logits".to_string()));
        }
        if !(0.0..=1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1]", smoothing)));
        }
        let ld = ls.data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        let uniform = smoothing / k as f64;
        let mut labels32 = Vec::with_capacity(n);
        for r in 0..n {
            let y = labels[r];
            if y >= k {
                return Err(Error::Data(format!("label {} out of range {}", y, k)));
            }
            labels32.push(y as u32);
            let row = &ld[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row {
                z += (v - m).exp();
            }
            let lse = m + z.ln();
            let mut row_loss = 0.0;
            for (j, &v) in row.iter().enumerate() {
                probs[r * k + j] = (v - lse).exp();
                let t = uniform + if j == y { 1.0 - smoothing } else { 0.0 };
                row_loss += t * (lse - v);
            }
            total += row_loss;
        }
        let loss = total / n as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLs { logits, labels: labels32, smoothing, probs },
            rg,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<f64> {
        let n = &mut self.nodes[id.0 as usize];
        let numel = n.value.numel();
        n.grad.get_or_insert_with(|| vec![0.0; numel])
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively, so
    /// a tensor feeding several consumers (or one consumer several times)
    /// collects every contribution.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.grad_buf(loss)[0] = 1.0;
        for id in (0..=loss.0).rev() {
            let nid = TensorId(id);
            if self.nodes[id as usize].grad.is_none() || !self.nodes[id as usize].requires_grad {
                continue;
            }
            // Take the op out to appease the borrow checker; Leaf is a cheap placeholder.
            let op = std::mem::replace(&mut self.nodes[id as usize].op, Op::Leaf);
            self.backprop_one(nid, &op)?;
            self.nodes[id as usize].op = op;
        }
        Ok(())
    }

    fn backprop_one(&mut self, out: TensorId, op: &Op) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let cin = self.value(w).shape()[0];
                let cout = self.value(w).shape()[1];
                let rows = self.value(x).leading();
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                if self.requires(x) {
                    let mut dx = vec![0.0; rows * cin];
                    let wd = self.value(w).data();
                    for r in 0..rows {
                        let dyr = &dy[r * cout..(r + 1) * cout];
                        let dxr = &mut dx[r * cin..(r + 1) * cin];
                        for i in 0..cin {
                            let wr = &wd[i * cout..(i + 1) * cout];
                            let mut acc = 0.0;
                            for (o, &wv) in wr.iter().enumerate() {
                                acc += dyr[o] * wv;
                            }
                            dxr[i] += acc;
                        }
                    }
                    let g = self.grad_buf(x);
                    for (gv, dv) in g.iter_mut().zip(&dx) {
                        *gv += dv;
                    }
                }
                if self.requires(w) {
                    let mut dw = vec![0.0; cin * cout];
                    let xd = self.value(x).data();
                    for r in 0..rows {
                        let dyr = &dy[r * cout..(r + 1) * cout];
                        let xr = &xd[r * cin..(r + 1) * cin];
                        for (i, &xi) in xr.iter().enumerate() {
                            let dwr = &mut dw[i * cout..(i + 1) * cout];
                            for (o, &dv) in dyr.iter().enumerate() {
                                dwr[o] += xi * dv;
                            }
                        }
                    }
                    let g = self.grad_buf(w);
                    for (gv, dv) in g.iter_mut().zip(&dw) {
                        *gv += dv;
                    }
                }
                if let Some(b) = b {
                    if self.requires(b) {
                        let mut db = vec![0.0; cout];
                        for r in 0..rows {
                            for o in 0..cout {
                                db[o] += dy[r * cout + o];
                            }
                        }
                        let g = self.grad_buf(b);
                        for (gv, dv) in g.iter_mut().zip(&db) {
                            *gv += dv;
                        }
                    }
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::Unary { x, kind } => {
                let x = *x;
                if !self.requires(x) {
                    return Ok(());
                }
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                let local: Vec<f64> = match kind {
                    UnaryKind::Relu => self
                        .value(x)
                        .data()
                        .iter()
                        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                        .collect(),
                    UnaryKind::Sigmoid => self
                        .value(out)
                        .data()
                        .iter()
                        .map(|&y| y * (1.0 - y))
                        .collect(),
                    UnaryKind::Sin => self.value(x).data().iter().map(|&v| v.cos()).collect(),
                    UnaryKind::Cos => self.value(x).data().iter().map(|&v| -v.sin()).collect(),
                };
                let g = self.grad_buf(x);
                for ((gv, &dv), &lv) in g.iter_mut().zip(&dy).zip(&local) {
                    *gv += dv * lv;
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                for t in [a, b] {
                    if self.requires(t) {
                        let g = self.grad_buf(t);
                        for (gv, &dv) in g.iter_mut().zip(&dy) {
                            *gv += dv;
                        }
                    }
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                if self.requires(a) {
                    let other: Vec<f64> = self.value(b).data().to_vec();
                    let g = self.grad_buf(a);
                    for ((gv, &dv), &ov) in g.iter_mut().zip(&dy).zip(&other) {
                        *gv += dv * ov;
                    }
                }
                if self.requires(b) {
                    let other: Vec<f64> = self.value(a).data().to_vec();
                    let g = self.grad_buf(b);
                    for ((gv, &dv), &ov) in g.iter_mut().zip(&dy).zip(&other) {
                        *gv += dv * ov;
                    }
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::ReduceMax { x, axis, arg } => {
                let x = *x;
                if !self.requires(x) {
                    return Ok(());
                }
                let (outer, len, inner, _) = self.reduce_dims("reduce_max", x, *axis)?;
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                let g = self.grad_buf(x);
                for o in 0..outer {
                    for i in 0..inner {
                        let j = arg[o * inner + i] as usize;
                        g[(o * len + j) * inner + i] += dy[o * inner + i];
                    }
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::ReduceMean { x, axis } => {
                let x = *x;
                if !self.requires(x) {
                    return Ok(());
                }
                let (outer, len, inner, _) = self.reduce_dims("reduce_mean", x, *axis)?;
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                let scale = 1.0 / len as f64;
                let g = self.grad_buf(x);
                for o in 0..outer {
                    for i in 0..inner {
                        let dv = dy[o * inner + i] * scale;
                        for j in 0..len {
                            g[(o * len + j) * inner + i] += dv;
                        }
                    }
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::SumAll { x } => {
                let x = *x;
                if !self.requires(x) {
                    return Ok(());
                }
                let dv = self.nodes[out.0 as usize].grad.as_ref().unwrap()[0];
                let g = self.grad_buf(x);
                for gv in g.iter_mut() {
                    *gv += dv;
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.value(out).shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let plen = self.value(p).shape()[axis];
                    if self.requires(p) {
                        let block = plen * inner;
                        let g = self.grad_buf(p);
                        for o in 0..outer {
                            let src = (o * axis_total + offset) * inner;
                            for t in 0..block {
                                g[o * block + t] += dy[src + t];
                            }
                        }
                    }
                    offset += plen;
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                if !self.requires(x) {
                    return Ok(());
                }
                let c = self.value(x).shape()[1];
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                let g = self.grad_buf(x);
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut g[r as usize * c..(r as usize + 1) * c];
                    let src = &dy[i * c..(i + 1) * c];
                    for (gv, &dv) in dst.iter_mut().zip(src) {
                        *gv += dv;
                    }
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::InterpRows { x, idx, w, k } => {
                let x = *x;
                if !self.requires(x) {
                    return Ok(());
                }
                let c = self.value(x).shape()[1];
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                let g = self.grad_buf(x);
                for (slot, (&r, &wv)) in idx.iter().zip(w).enumerate() {
                    let dst = &mut g[r as usize * c..(r as usize + 1) * c];
                    let src = &dy[(slot / k) * c..(slot / k + 1) * c];
                    for (gv, &dv) in dst.iter_mut().zip(src) {
                        *gv += wv * dv;
                    }
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::Reshape { x } => {
                let x = *x;
                if !self.requires(x) {
                    return Ok(());
                }
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                let g = self.grad_buf(x);
                for (gv, &dv) in g.iter_mut().zip(&dy) {
                    *gv += dv;
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = self.value(x).last_dim();
                let rows = self.value(x).leading();
                let dy = self.nodes[out.0 as usize].grad.take().unwrap();
                let xd = self.value(x).data();
                let mut xhat = vec![0.0; rows * c];
                for r in 0..rows {
                    for ch in 0..c {
                        xhat[r * c + ch] = (xd[r * c + ch] - mean[ch]) * inv_std[ch];
                    }
                }

                // Per-channel reductions shared by every branch.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        sum_dy[ch] += dy[r * c + ch];
                        sum_dy_xhat[ch] += dy[r * c + ch] * xhat[r * c + ch];
                    }
                }
                if self.requires(beta) {
                    let g = self.grad_buf(beta);
                    for (gv, &dv) in g.iter_mut().zip(&sum_dy) {
                        *gv += dv;
                    }
                }
                if self.requires(gamma) {
                    let g = self.grad_buf(gamma);
                    for (gv, &dv) in g.iter_mut().zip(&sum_dy_xhat) {
                        *gv += dv;
                    }
                }
                if self.requires(x) {
                    let rn = rows as f64;
                    let gd = self.value(gamma).data();
                    let mut dx = vec![0.0; rows * c];
                    for r in 0..rows {
                        for ch in 0..c {
                            dx[r * c + ch] = if *train {
                                gd[ch] * inv_std[ch] / rn
                                    * (rn * dy[r * c + ch]
                                        - sum_dy[ch]
                                        - xhat[r * c + ch] * sum_dy_xhat[ch])
                            } else {
                                gd[ch] * inv_std[ch] * dy[r * c + ch]
                            };
                        }
                    }
                    let g = self.grad_buf(x);
                    for (gv, &dv) in g.iter_mut().zip(&dx) {
                        *gv += dv;
                    }
                }
                self.nodes[out.0 as usize].grad = Some(dy);
            }
            Op::CrossEntropyLs { logits, labels, smoothing, probs } => {
                let logits = *logits;
                if !self.requires(logits) {
                    return Ok(());
                }
                let (n, k) = {
                    let s = self.value(logits).shape();
                    (s[0], s[1])
                };
                let dv = self.nodes[out.0 as usize].grad.as_ref().unwrap()[0];
                let uniform = *smoothing / k as f64;
                let scale = dv / n as f64;
                let g = self.grad_buf(logits);
                for r in 0..n {
                    let y = labels[r] as usize;
                    for j in 0..k {
                        let t = uniform + if j == y { 1.0 - *smoothing } else { 0.0 };
                        g[r * k + j] += scale * (probs[r * k + j] - t);
                    }
                }
            }
        }
        Ok(())
    }

    // ── Diagnostics and cost scan ────────────────────────────────────────

    /// First node (tape order) holding a non-finite value, with a description.
    pub fn find_nonfinite(&self) -> Option<(usize, String)> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.value.data().iter().any(|v| !v.is_finite()) {
                let desc = format!(
                    "node {} ({} in stage '{}', shape {:?})",
                    i,
                    op_name(&node.op),
                    self.stages[node.stage as usize],
                    node.value.shape()
                );
                return Some((i, desc));
            }
        }
        None
    }

    /// Per-op cost records for the analysis module. Linear ops count
    /// multiply-accumulates only (bias excluded); normalization, activations
    /// and elementwise ops count one per element; max reductions count
    /// comparisons instead of flops; data movement is free.
    pub fn cost_entries(&self) -> Vec<CostEntry> {
        self.nodes
            .iter()
            .map(|node| {
                let (flops, comparisons) = match &node.op {
                    Op::Leaf | Op::Reshape { .. } | Op::Concat { .. } | Op::GatherRows { .. } => (0, 0),
                    Op::Linear { x, w, .. } => {
                        let rows = self.value(*x).leading() as u64;
                        let ws = self.value(*w).shape();
                        (rows * ws[0] as u64 * ws[1] as u64, 0)
                    }
                    Op::Unary { .. } | Op::Add { .. } | Op::Mul { .. } => {
                        (node.value.numel() as u64, 0)
                    }
                    Op::ReduceMax { x, axis, .. } => {
                        let len = self.value(*x).shape()[*axis] as u64;
                        (0, node.value.numel() as u64 * (len.saturating_sub(1)))
                    }
                    Op::ReduceMean { x, .. } => (self.value(*x).numel() as u64, 0),
                    Op::SumAll { x } => (self.value(*x).numel() as u64, 0),
                    Op::InterpRows { k, .. } => (node.value.numel() as u64 * *k as u64, 0),
                    Op::BatchNorm { x, .. } => (self.value(*x).numel() as u64, 0),
                    Op::CrossEntropyLs { logits, .. } => (self.value(*logits).numel() as u64 * 3, 0),
                };
                CostEntry { stage: node.stage, kind: node.kind, flops, comparisons }
            })
            .collect()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::Unary { kind: UnaryKind::Relu, .. } => "relu",
        Op::Unary { kind: UnaryKind::Sigmoid, .. } => "sigmoid",
        Op::Unary { kind: UnaryKind::Sin, .. } => "sin",
        Op::Unary { kind: UnaryKind::Cos, .. } => "cos",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::ReduceMax { .. } => "reduce_max",
        Op::ReduceMean { .. } => "reduce_mean",
        Op::SumAll { .. } => "sum",
        Op::Concat { .. } => "concat",
        Op::GatherRows { .. } => "gather_rows",
        Op::InterpRows { .. } => "interp_rows",
        Op::Reshape { .. } => "reshape",
        Op::BatchNorm { .. } => "batch_norm",
        Op::CrossEntropyLs { .. } => "cross_entropy",
    }
}
