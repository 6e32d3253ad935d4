//! Reverse-mode gradient tape over small dense matrices.
//!
//! Only the gating parameters are leaves. Model weights enter as borrowed
//! constants and never receive gradients. Nodes that do not depend on any leaf
//! are recorded for their value but skipped during the backward sweep.
//!
//! Values are `f64` so that finite-difference checks on the gates are not
//! swamped by single-precision rounding.

use super::tensor::{gelu, gelu_grad, Tensor2};
use crate::error::{AatError, Result};

/// Dense `f64` matrix stored on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_tensor(t: &Tensor2) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<'w> {
    Leaf,
    Constant,
    ScaledSigmoid { x: NodeId, tau: f64 },
    Affine { x: NodeId, w: &'w Tensor2 },
    MatMul { a: NodeId, b: NodeId },
    MatMulT { a: NodeId, b: NodeId },
    Scale { x: NodeId, s: f64 },
    Add { a: NodeId, b: NodeId },
    LayerNorm { x: NodeId, gain: &'w [f32], eps: f64 },
    SoftmaxRows { x: NodeId },
    Manipulate { a: NodeId, beta: NodeId },
    Gelu { x: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    Row { x: NodeId, index: usize },
    StackRows { parts: Vec<NodeId> },
    L2NormalizeRows { x: NodeId },
    ClipLoss { img: NodeId, text: Mat, logit_scale: f64 },
}

#[derive(Debug)]
struct Node<'w> {
    value: Mat,
    op: Op<'w>,
    requires_grad: bool,
}

/// Records a forward computation and replays it backward onto the leaves.
#[derive(Debug, Default)]
pub struct GradTape<'w> {
    nodes: Vec<Node<'w>>,
    leaves: Vec<NodeId>,
    finalized: bool,
}

impl<'w> GradTape<'w> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: Vec::new(),
            finalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    /// Marks the forward pass complete; further recording is refused.
    pub fn finalize(&mut self) {
        self.finalized = true;
    }

    fn push(&mut self, value: Mat, op: Op<'w>, inputs: &[NodeId]) -> NodeId {
        assert!(!self.finalized, "recording onto a finalized tape");
        let requires_grad =
            matches!(op, Op::Leaf) || inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// A trainable scalar. Leaves are numbered in creation order.
    pub fn leaf(&mut self, value: f64) -> NodeId {
        let id = self.push(Mat::scalar(value), Op::Leaf, &[]);
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Constant, &[])
    }

    pub fn constant_tensor(&mut self, t: &Tensor2) -> NodeId {
        self.constant(Mat::from_tensor(t))
    }

    /// `sigmoid(tau * x)` for a scalar node.
    pub fn scaled_sigmoid(&mut self, x: NodeId, tau: f64) -> NodeId {
        let v = self.val(x).data[0];
        let y = 1.0 / (1.0 + (-tau * v).exp());
        self.push(Mat::scalar(y), Op::ScaledSigmoid { x, tau }, &[x])
    }

    /// `x · w + b` against frozen weights.
    pub fn affine(&mut self, x: NodeId, w: &'w Tensor2, b: Option<&'w [f32]>) -> NodeId {
        let xv = self.val(x);
        assert_eq!(xv.cols, w.rows(), "affine inner dimension");
        let mut out = Mat::zeros(xv.rows, w.cols());
        for r in 0..xv.rows {
            let o = out.row_mut(r);
            for (k, &xk) in xv.row(r).iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                for (ov, &wv) in o.iter_mut().zip(w.row(k)) {
                    *ov += xk * f64::from(wv);
                }
            }
            if let Some(b) = b {
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += f64::from(bv);
                }
            }
        }
        self.push(out, Op::Affine { x, w }, &[x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dimension");
        let mut out = Mat::zeros(av.rows, bv.cols);
        for r in 0..av.rows {
            for k in 0..av.cols {
                let x = av.get(r, k);
                for c in 0..bv.cols {
                    out.data[r * bv.cols + c] += x * bv.get(k, c);
                }
            }
        }
        self.push(out, Op::MatMul { a, b }, &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.cols, bv.cols, "matmul_t inner dimension");
        let mut out = Mat::zeros(av.rows, bv.rows);
        for r in 0..av.rows {
            for c in 0..bv.rows {
                out.data[r * bv.rows + c] = av.row(r).iter().zip(bv.row(c)).map(|(x, y)| x * y).sum();
            }
        }
        self.push(out, Op::MatMulT { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let xv = self.val(x);
        let out = Mat {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|v| v * s).collect(),
        };
        self.push(out, Op::Scale { x, s }, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.val(a).clone();
        assert_eq!(out.data.len(), self.val(b).data.len(), "add shape");
        out.add_assign(self.val(b));
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: &'w [f32], bias: &'w [f32], eps: f64) -> NodeId {
        let xv = self.val(x);
        assert_eq!(gain.len(), xv.cols, "layer_norm gain length");
        let mut out = xv.clone();
        for r in 0..out.rows {
            let (mean, rstd) = row_stats(xv.row(r), eps);
            for ((o, &g), &b) in out.row_mut(r).iter_mut().zip(gain).zip(bias) {
                *o = (*o - mean) * rstd * f64::from(g) + f64::from(b);
            }
        }
        self.push(out, Op::LayerNorm { x, gain, eps }, &[x])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut out = self.val(x).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::SoftmaxRows { x }, &[x])
    }

    /// Scales columns `1..N` of a row-stochastic matrix by the scalar node
    /// `beta` and renormalizes each row.
    pub fn manipulate(&mut self, a: NodeId, beta: NodeId) -> NodeId {
        let beta_v = self.val(beta).data[0];
        let mut out = self.val(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for v in row.iter_mut().skip(1) {
                *v *= beta_v;
            }
            let sum: f64 = row.iter().sum();
            if sum < super::DEGENERATE_ROW_SUM {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[0] = 1.0;
            } else {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        self.push(out, Op::Manipulate { a, beta }, &[a, beta])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let out = Mat {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|&v| gelu(v)).collect(),
        };
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.val(parts[0]).rows;
        let cols = parts.iter().map(|p| self.val(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.val(*p);
                assert_eq!(pv.rows, rows, "concat_cols row count");
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(out, Op::ConcatCols { parts: parts.to_vec() }, parts)
    }

    pub fn row(&mut self, x: NodeId, index: usize) -> NodeId {
        let xv = self.val(x);
        let out = Mat {
            rows: 1,
            cols: xv.cols,
            data: xv.row(index).to_vec(),
        };
        self.push(out, Op::Row { x, index }, &[x])
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.val(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.val(*p);
            assert_eq!(pv.cols, cols, "stack_rows column count");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Mat { rows, cols, data }, Op::StackRows { parts: parts.to_vec() }, parts)
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let mut out = self.val(x).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        self.push(out, Op::L2NormalizeRows { x }, &[x])
    }

    /// Symmetric contrastive loss of image rows against constant text rows.
    pub fn clip_loss(&mut self, img: NodeId, text: Mat, logit_scale: f64) -> Result<NodeId> {
        let (loss, _) = clip_loss_and_grad(self.val(img), &text, logit_scale)?;
        Ok(self.push(
            Mat::scalar(loss),
            Op::ClipLoss {
                img,
                text,
                logit_scale,
            },
            &[img],
        ))
    }

    /// Gradient of the scalar `loss` with respect to every leaf, in leaf order.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<f64>> {
        let v = self.val(loss);
        if v.rows != 1 || v.cols != 1 {
            return Err(AatError::Tape("loss is not a scalar"));
        }
        self.backward_seeded(loss, &Mat::scalar(1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// to the leaves.
    pub fn backward_seeded(&self, output: NodeId, seed: &Mat) -> Result<Vec<f64>> {
        if !self.finalized {
            return Err(AatError::Tape("tape not finalized"));
        }
        let out_v = self.val(output);
        if out_v.rows != seed.rows || out_v.cols != seed.cols {
            return Err(AatError::Tape("seed shape differs from output"));
        }
        let mut grads: Vec<Option<Mat>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        Ok(self
            .leaves
            .iter()
            .map(|l| grads.get(l.0).and_then(|g| g.as_ref()).map_or(0.0, |g| g.data[0]))
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<'w>, g: &Mat, grads: &mut [Option<Mat>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::ScaledSigmoid { x, tau } => {
                let s = y.data[0];
                self.accumulate(grads, *x, Mat::scalar(g.data[0] * tau * s * (1.0 - s)));
            }
            Op::Affine { x, w, .. } => {
                // dx = g · wᵀ
                let mut dx = Mat::zeros(g.rows, w.rows());
                for r in 0..g.rows {
                    let gr = g.row(r);
                    for k in 0..w.rows() {
                        dx.data[r * w.rows() + k] =
                            gr.iter().zip(w.row(k)).map(|(a, &b)| a * f64::from(b)).sum();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.nodes[a.0].requires_grad {
                    let mut da = Mat::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        for k in 0..av.cols {
                            da.data[r * av.cols + k] =
                                g.row(r).iter().zip(bv.row(k)).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    for r in 0..av.rows {
                        for k in 0..av.cols {
                            let x = av.get(r, k);
                            for c in 0..bv.cols {
                                db.data[k * bv.cols + c] += x * g.get(r, c);
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulT { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.nodes[a.0].requires_grad {
                    // da = g · b
                    let mut da = Mat::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        for c in 0..bv.rows {
                            let gv = g.get(r, c);
                            for k in 0..av.cols {
                                da.data[r * av.cols + k] += gv * bv.get(c, k);
                            }
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // db = gᵀ · a
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    for r in 0..av.rows {
                        for c in 0..bv.rows {
                            let gv = g.get(r, c);
                            for k in 0..av.cols {
                                db.data[c * bv.cols + k] += gv * av.get(r, k);
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, s } => {
                let dx = Mat {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().map(|v| v * s).collect(),
                };
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::LayerNorm { x, gain, eps } => {
                let xv = self.val(*x);
                let n = xv.cols as f64;
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let (mean, rstd) = row_stats(xv.row(r), *eps);
                    let xhat: Vec<f64> = xv.row(r).iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> =
                        g.row(r).iter().zip(gain.iter()).map(|(a, &b)| a * f64::from(b)).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd * (dxhat[k] - m1 - xhat[k] * m2);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows { x } => {
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = y.get(r, k) * (g.get(r, k) - inner);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Manipulate { a, beta } => {
                let av = self.val(*a);
                let bv = self.val(*beta).data[0];
                let mut da = Mat::zeros(av.rows, av.cols);
                let mut dbeta = 0.0;
                for r in 0..av.rows {
                    let row = av.row(r);
                    let image_mass: f64 = row.iter().skip(1).sum();
                    let sum = row[0] + bv * image_mass;
                    if sum < super::DEGENERATE_ROW_SUM {
                        continue;
                    }
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (k, o) in da.row_mut(r).iter_mut().enumerate() {
                        let w = if k == 0 { 1.0 } else { bv };
                        *o = w / sum * (gr[k] - inner);
                    }
                    let mut db = -inner * image_mass;
                    for k in 1..row.len() {
                        db += gr[k] * row[k];
                    }
                    dbeta += db / sum;
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *beta, Mat::scalar(dbeta));
            }
            Op::Gelu { x } => {
                let xv = self.val(*x);
                let dx = Mat {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&xv.data).map(|(gv, &xv)| gv * gelu_grad(xv)).collect(),
                };
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for p in parts {
                    let cols = self.val(*p).cols;
                    if self.nodes[p.0].requires_grad {
                        let mut dp = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    off += cols;
                }
            }
            Op::Row { x, index } => {
                let xv = self.val(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                dx.row_mut(*index).copy_from_slice(&g.data);
                self.accumulate(grads, *x, dx);
            }
            Op::StackRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let len = pv.data.len();
                    if self.nodes[p.0].requires_grad {
                        let dp = Mat {
                            rows: pv.rows,
                            cols: pv.cols,
                            data: g.data[off..off + len].to_vec(),
                        };
                        self.accumulate(grads, *p, dp);
                    }
                    off += len;
                }
            }
            Op::L2NormalizeRows { x } => {
                let xv = self.val(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (g.get(r, k) - y.get(r, k) * inner) / norm;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ClipLoss {
                img,
                text,
                logit_scale,
            } => {
                // Shapes were validated when the node was recorded.
                let (_, mut dimg) = clip_loss_and_grad(self.val(*img), text, *logit_scale)
                    .expect("clip loss shapes checked at record time");
                dimg.data.iter_mut().for_each(|v| *v *= g.data[0]);
                self.accumulate(grads, *img, dimg);
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Symmetric cross-entropy over `logit_scale · img · textᵀ`, averaged over the
/// image→text and text→image directions, plus its gradient with respect to
/// `img`. Rows are paired by index.
pub fn clip_loss_and_grad(img: &Mat, text: &Mat, logit_scale: f64) -> Result<(f64, Mat)> {
    let b = img.rows;
    if b < 2 {
        return Err(AatError::InvalidParameter(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    if text.rows != b || text.cols != img.cols {
        return Err(AatError::dims(
            "contrastive_loss",
            format!("{}x{}", b, img.cols),
            format!("{}x{}", text.rows, text.cols),
        ));
    }
    let mut logits = Mat::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            logits.data[i * b + j] =
                logit_scale * img.row(i).iter().zip(text.row(j)).map(|(x, y)| x * y).sum::<f64>();
        }
    }

    // dL/dlogits = 0.5/B * (softmax_rows - I) + 0.5/B * (softmax_cols - I)
    let mut dlogits = Mat::zeros(b, b);
    let mut loss = 0.0;
    let half_over_b = 0.5 / b as f64;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[i];
        for j in 0..b {
            let p = (row[j] - lse).exp();
            dlogits.data[i * b + j] += half_over_b * (p - f64::from(u8::from(i == j)));
        }
    }
    for j in 0..b {
        let max = (0..b).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..b).map(|i| (logits.get(i, j) - max).exp()).sum::<f64>().ln();
        loss += lse - logits.get(j, j);
        for i in 0..b {
            let p = (logits.get(i, j) - lse).exp();
            dlogits.data[i * b + j] += half_over_b * (p - f64::from(u8::from(i == j)));
        }
    }
    loss *= half_over_b;

    // dimg = scale · dlogits · text
    let mut dimg = Mat::zeros(b, img.cols);
    for i in 0..b {
        for j in 0..b {
            let d = dlogits.get(i, j) * logit_scale;
            if d == 0.0 {
                continue;
            }
            for (o, t) in dimg.data[i * img.cols..(i + 1) * img.cols].iter_mut().zip(text.row(j)) {
                *o += d * t;
            }
        }
    }
    Ok((loss, dimg))
}
