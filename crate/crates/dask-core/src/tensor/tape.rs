//! Recorded-operation reverse-mode differentiation.
//!
//! Every forward op appends a node to the tape; `backward` replays the record
//! in reverse exactly once. Gradients are only materialized for nodes that can
//! reach a tracked leaf, so frozen-model forwards cost nothing at backward.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Relu {
        input: usize,
    },
    GlobalAvgPool {
        input: usize,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    Sub {
        lhs: usize,
        rhs: usize,
    },
    Mul {
        lhs: usize,
        rhs: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    RowNormalize {
        input: usize,
    },
    MatMul {
        lhs: usize,
        rhs: usize,
    },
    Transpose {
        input: usize,
    },
    SoftmaxRows {
        input: usize,
    },
    Log {
        input: usize,
    },
    Abs {
        input: usize,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    SliceRow {
        input: usize,
        row: usize,
    },
    Narrow {
        input: usize,
        offset: usize,
    },
    Reshape {
        input: usize,
    },
    MulChannel {
        input: usize,
        per_channel: usize,
    },
    AddChannel {
        input: usize,
        per_channel: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    /// Batch-hard triplet loss; selections are fixed at forward time.
    TripletHard {
        feats: usize,
        selections: Vec<TripletSelection>,
    },
}

#[derive(Debug)]
struct TripletSelection {
    anchor: usize,
    positive: usize,
    negative: usize,
    active: bool,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    tracked: bool,
    needs_grad: bool,
}

/// Ordered record of executed differentiable operations.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Records an input value not tracked for gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a parameter leaf; `backward` will populate its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            tracked,
            needs_grad: tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked: false,
            needs_grad: needs,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    /// Same-size 2-D convolution with replicate-edge padding of (k-1)/2,
    /// generalized with an output stride for downsampling blocks.
    ///
    /// input [B,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout].
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (
            self.val(input.0).shape().to_vec(),
            self.val(weight.0).shape().to_vec(),
            self.val(bias.0).shape().to_vec(),
        );
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects input [B,C,H,W], weight [O,C,k,k], bias [O]; got {xs:?} {ws:?} {bs:?}"
            )));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw {
            return Err(Error::InvalidArgument(format!(
                "non-square kernel {kh}x{kw}"
            )));
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("even kernel size {k}")));
        }
        if wcin != cin || bs[0] != cout {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channels: input {cin}, weight expects {wcin}, bias {} for {cout} outputs",
                bs[0]
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("zero stride".into()));
        }
        let pad = (k - 1) / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;

        let padded = replicate_pad(self.val(input.0).data(), b, cin, h, w, pad);
        let mut out = vec![0.0; b * cout * ho * wo];
        conv_forward(
            &padded,
            self.val(weight.0).data(),
            self.val(bias.0).data(),
            &mut out,
            ConvDims {
                b,
                cin,
                cout,
                hp: h + 2 * pad,
                wp: w + 2 * pad,
                ho,
                wo,
                k,
                stride,
            },
        );
        self.push_op(
            Tensor::new(vec![b, cout, ho, wo], out)?,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
            },
            &[input.0, weight.0, bias.0],
        )
    }

    /// Fully-connected layer: x[B,I] @ w[I,O] + bias[O].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.val(input.0).shape().to_vec(),
            self.val(weight.0).shape().to_vec(),
            self.val(bias.0).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::ShapeMismatch(format!(
                "linear: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (b, i, o) = (xs[0], xs[1], ws[1]);
        let x = self.val(input.0).data();
        let w = self.val(weight.0).data();
        let bv = self.val(bias.0).data();
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            let row = &x[r * i..(r + 1) * i];
            let orow = &mut out[r * o..(r + 1) * o];
            orow.copy_from_slice(bv);
            for (c, &xv) in row.iter().enumerate() {
                let wrow = &w[c * o..(c + 1) * o];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
        self.push_op(
            Tensor::new(vec![b, o], out)?,
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            &[input.0, weight.0, bias.0],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let v = self.val(input.0);
        let out: Vec<f64> = v.data().iter().map(|&x| x.max(0.0)).collect();
        self.push_op(
            Tensor::new(v.shape().to_vec(), out)?,
            Op::Relu { input: input.0 },
            &[input.0],
        )
    }

    /// [B,C,H,W] -> [B,C] spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let v = self.val(input.0);
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "global_avg_pool expects [B,C,H,W], got {s:?}"
            )));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![0.0; b * c];
        for bc in 0..b * c {
            let plane = &v.data()[bc * hw..(bc + 1) * hw];
            out[bc] = plane.iter().sum::<f64>() / hw as f64;
        }
        self.push_op(
            Tensor::new(vec![b, c], out)?,
            Op::GlobalAvgPool { input: input.0 },
            &[input.0],
        )
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.elementwise(lhs, rhs, |a, b| a + b, |l, r| Op::Add { lhs: l, rhs: r })
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.elementwise(lhs, rhs, |a, b| a - b, |l, r| Op::Sub { lhs: l, rhs: r })
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.elementwise(lhs, rhs, |a, b| a * b, |l, r| Op::Mul { lhs: l, rhs: r })
    }

    fn elementwise(
        &mut self,
        lhs: Var,
        rhs: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ls, rs) = (self.val(lhs.0).shape(), self.val(rhs.0).shape());
        if ls != rs {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {ls:?} vs {rs:?}"
            )));
        }
        let out: Vec<f64> = self
            .val(lhs.0)
            .data()
            .iter()
            .zip(self.val(rhs.0).data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        self.push_op(
            Tensor::new(ls.to_vec(), out)?,
            op(lhs.0, rhs.0),
            &[lhs.0, rhs.0],
        )
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let v = self.val(input.0);
        let out: Vec<f64> = v.data().iter().map(|&x| x * factor).collect();
        self.push_op(
            Tensor::new(v.shape().to_vec(), out)?,
            Op::Scale {
                input: input.0,
                factor,
            },
            &[input.0],
        )
    }

    /// Row-wise L2 normalization of a [B,D] matrix. Zero-norm rows are rejected.
    pub fn row_normalize(&mut self, input: Var) -> Result<Var> {
        let v = self.val(input.0);
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "row_normalize expects [B,D], got {s:?}"
            )));
        }
        let (b, d) = (s[0], s[1]);
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            let row = &v.data()[r * d..(r + 1) * d];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::InvalidArgument(format!("zero-norm row {r}")));
            }
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = x / norm;
            }
        }
        self.push_op(
            Tensor::new(vec![b, d], out)?,
            Op::RowNormalize { input: input.0 },
            &[input.0],
        )
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (ls, rs) = (
            self.val(lhs.0).shape().to_vec(),
            self.val(rhs.0).shape().to_vec(),
        );
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch(format!("matmul {ls:?} x {rs:?}")));
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let out = matmul_raw(self.val(lhs.0).data(), self.val(rhs.0).data(), m, k, n);
        self.push_op(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                lhs: lhs.0,
                rhs: rhs.0,
            },
            &[lhs.0, rhs.0],
        )
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let v = self.val(input.0);
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose expects 2-D, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(v.data(), r, c);
        self.push_op(
            Tensor::new(vec![c, r], out)?,
            Op::Transpose { input: input.0 },
            &[input.0],
        )
    }

    /// Numerically stable softmax over the last axis of a [B,N] matrix.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let v = self.val(input.0);
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax_rows expects [B,N], got {s:?}"
            )));
        }
        let (b, n) = (s[0], s[1]);
        let mut out = vec![0.0; b * n];
        for r in 0..b {
            softmax_into(&v.data()[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        self.push_op(
            Tensor::new(vec![b, n], out)?,
            Op::SoftmaxRows { input: input.0 },
            &[input.0],
        )
    }

    /// Elementwise natural log; inputs must be strictly positive.
    pub fn log(&mut self, input: Var) -> Result<Var> {
        let v = self.val(input.0);
        if v.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidArgument("log of non-positive value".into()));
        }
        let out: Vec<f64> = v.data().iter().map(|&x| x.ln()).collect();
        self.push_op(
            Tensor::new(v.shape().to_vec(), out)?,
            Op::Log { input: input.0 },
            &[input.0],
        )
    }

    pub fn abs(&mut self, input: Var) -> Result<Var> {
        let v = self.val(input.0);
        let out: Vec<f64> = v.data().iter().map(|&x| x.abs()).collect();
        self.push_op(
            Tensor::new(v.shape().to_vec(), out)?,
            Op::Abs { input: input.0 },
            &[input.0],
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.val(input.0).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum { input: input.0 }, &[input.0])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let v = self.val(input.0);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push_op(Tensor::scalar(m), Op::Mean { input: input.0 }, &[input.0])
    }

    /// Extracts row `row` of a [R,N] matrix as a [N] vector.
    pub fn slice_row(&mut self, input: Var, row: usize) -> Result<Var> {
        let v = self.val(input.0);
        let s = v.shape();
        if s.len() != 2 || row >= s[0] {
            return Err(Error::ShapeMismatch(format!(
                "slice_row {row} of {s:?}"
            )));
        }
        let n = s[1];
        let out = v.data()[row * n..(row + 1) * n].to_vec();
        self.push_op(
            Tensor::new(vec![n], out)?,
            Op::SliceRow {
                input: input.0,
                row,
            },
            &[input.0],
        )
    }

    /// Contiguous sub-range of a 1-D tensor.
    pub fn narrow(&mut self, input: Var, offset: usize, len: usize) -> Result<Var> {
        let v = self.val(input.0);
        if v.shape().len() != 1 || offset + len > v.numel() || len == 0 {
            return Err(Error::ShapeMismatch(format!(
                "narrow [{offset}, {}) of {:?}",
                offset + len,
                v.shape()
            )));
        }
        let out = v.data()[offset..offset + len].to_vec();
        self.push_op(
            Tensor::new(vec![len], out)?,
            Op::Narrow {
                input: input.0,
                offset,
            },
            &[input.0],
        )
    }

    /// Multiplies each channel plane of x [B,C,H,W] by the matching entry of a
    /// [C] vector.
    pub fn mul_channel(&mut self, input: Var, per_channel: Var) -> Result<Var> {
        self.channel_broadcast(input, per_channel, |x, s| x * s, |i, p| Op::MulChannel {
            input: i,
            per_channel: p,
        })
    }

    /// Adds a per-channel offset to each channel plane of x [B,C,H,W].
    pub fn add_channel(&mut self, input: Var, per_channel: Var) -> Result<Var> {
        self.channel_broadcast(input, per_channel, |x, s| x + s, |i, p| Op::AddChannel {
            input: i,
            per_channel: p,
        })
    }

    fn channel_broadcast(
        &mut self,
        input: Var,
        per_channel: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let xs = self.val(input.0).shape().to_vec();
        let ss = self.val(per_channel.0).shape().to_vec();
        if xs.len() != 4 || ss.len() != 1 || ss[0] != xs[1] {
            return Err(Error::ShapeMismatch(format!(
                "channel broadcast of {ss:?} over {xs:?}"
            )));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let x = self.val(input.0).data();
        let s = self.val(per_channel.0).data();
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let sv = s[ci];
                for (o, &xv) in out[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                    *o = f(xv, sv);
                }
            }
        }
        self.push_op(
            Tensor::new(xs, out)?,
            op(input.0, per_channel.0),
            &[input.0, per_channel.0],
        )
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.val(input.0);
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?}",
                v.shape()
            )));
        }
        let out = v.data().to_vec();
        self.push_op(
            Tensor::new(shape, out)?,
            Op::Reshape { input: input.0 },
            &[input.0],
        )
    }

    /// Mean softmax cross-entropy of logits [B,N] against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.val(logits.0);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (b, n) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside classifier range {n}"
            )));
        }
        let mut total = 0.0;
        for r in 0..b {
            let row = &v.data()[r * n..(r + 1) * n];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total -= row[labels[r]] - lse;
        }
        self.push_op(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            &[logits.0],
        )
    }

    /// Batch-hard triplet loss on raw (unnormalized) features [B,D] with
    /// Euclidean distances. Anchors lacking a positive or a negative are
    /// skipped; at least one valid anchor is required.
    pub fn batch_hard_triplet(&mut self, feats: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let v = self.val(feats.0);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "triplet features {s:?} with {} labels",
                labels.len()
            )));
        }
        let (b, d) = (s[0], s[1]);
        if b < 2 {
            return Err(Error::InvalidArgument(
                "triplet loss needs a batch of at least 2".into(),
            ));
        }
        let dist = pairwise_euclidean(v.data(), b, d);
        let mut selections = Vec::new();
        let mut total = 0.0;
        for a in 0..b {
            let mut hardest_pos: Option<(usize, f64)> = None;
            let mut hardest_neg: Option<(usize, f64)> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                let dij = dist[a * b + j];
                if labels[j] == labels[a] {
                    if hardest_pos.map_or(true, |(_, best)| dij > best) {
                        hardest_pos = Some((j, dij));
                    }
                } else if hardest_neg.map_or(true, |(_, best)| dij < best) {
                    hardest_neg = Some((j, dij));
                }
            }
            if let (Some((p, dp)), Some((n, dn))) = (hardest_pos, hardest_neg) {
                let hinge = dp - dn + margin;
                let active = hinge > 0.0;
                total += hinge.max(0.0);
                selections.push(TripletSelection {
                    anchor: a,
                    positive: p,
                    negative: n,
                    active,
                });
            }
        }
        if selections.is_empty() {
            return Err(Error::InvalidArgument(
                "no anchor with both a positive and a negative".into(),
            ));
        }
        let loss = total / selections.len() as f64;
        self.push_op(
            Tensor::scalar(loss),
            Op::TripletHard {
                feats: feats.0,
                selections,
            },
            &[feats.0],
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Propagates d(loss)/d(leaf) into every tracked leaf. The loss must be a
    /// scalar produced on this tape, and the tape is consumed by the call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already run on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            self.step_backward(i, &grad)?;
            // Restore the node's own gradient so callers can inspect it.
            self.nodes[i].grad = Some(grad);
        }

        for node in &self.nodes {
            if node.tracked {
                if let Some(g) = &node.grad {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("backward gradient".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, g: &[f64]) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let numel = self.nodes[target].value.numel();
        let slot = self.nodes[target].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (a, b) in slot.iter_mut().zip(g) {
            *a += b;
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn step_backward(&mut self, i: usize, grad: &[f64]) -> Result<()> {
        // Ops are dispatched on a borrowed copy of the op metadata; value
        // reads below go through raw indexing to appease the borrow checker.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (input, weight, bias, stride) = (*input, *weight, *bias, *stride);
                let xs = self.val(input).shape().to_vec();
                let ws = self.val(weight).shape().to_vec();
                let os = self.nodes[i].value.shape().to_vec();
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k) = (ws[0], ws[2]);
                let (ho, wo) = (os[2], os[3]);
                let pad = (k - 1) / 2;
                let dims = ConvDims {
                    b,
                    cin,
                    cout,
                    hp: h + 2 * pad,
                    wp: w + 2 * pad,
                    ho,
                    wo,
                    k,
                    stride,
                };

                if self.needs(bias) {
                    let mut gb = vec![0.0; cout];
                    for bi in 0..b {
                        for co in 0..cout {
                            let base = (bi * cout + co) * ho * wo;
                            gb[co] += grad[base..base + ho * wo].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(bias, &gb);
                }
                if self.needs(weight) {
                    let padded =
                        replicate_pad(self.val(input).data(), b, cin, h, w, pad);
                    let mut gw = vec![0.0; ws.iter().product()];
                    conv_backward_weight(&padded, grad, &mut gw, dims);
                    self.accumulate(weight, &gw);
                }
                if self.needs(input) {
                    let mut gpad = vec![0.0; b * cin * dims.hp * dims.wp];
                    conv_backward_input(self.val(weight).data(), grad, &mut gpad, dims);
                    let gin = fold_replicate_pad(&gpad, b, cin, h, w, pad);
                    self.accumulate(input, &gin);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let xs = self.val(input).shape().to_vec();
                let (b, icnt) = (xs[0], xs[1]);
                let o = self.val(weight).shape()[1];
                if self.needs(bias) {
                    let mut gb = vec![0.0; o];
                    for r in 0..b {
                        for (gv, &g) in gb.iter_mut().zip(&grad[r * o..(r + 1) * o]) {
                            *gv += g;
                        }
                    }
                    self.accumulate(bias, &gb);
                }
                if self.needs(weight) {
                    let x = self.val(input).data();
                    let mut gw = vec![0.0; icnt * o];
                    for r in 0..b {
                        for c in 0..icnt {
                            let xv = x[r * icnt + c];
                            let gwrow = &mut gw[c * o..(c + 1) * o];
                            for (gwv, &g) in gwrow.iter_mut().zip(&grad[r * o..(r + 1) * o]) {
                                *gwv += xv * g;
                            }
                        }
                    }
                    self.accumulate(weight, &gw);
                }
                if self.needs(input) {
                    let w = self.val(weight).data();
                    let mut gx = vec![0.0; b * icnt];
                    for r in 0..b {
                        let grow = &grad[r * o..(r + 1) * o];
                        let gxrow = &mut gx[r * icnt..(r + 1) * icnt];
                        for (c, gxv) in gxrow.iter_mut().enumerate() {
                            let wrow = &w[c * o..(c + 1) * o];
                            *gxv = wrow.iter().zip(grow).map(|(&wv, &g)| wv * g).sum();
                        }
                    }
                    self.accumulate(input, &gx);
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if self.needs(input) {
                    let x = self.val(input).data();
                    let g: Vec<f64> = grad
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(input, &g);
                }
            }
            Op::GlobalAvgPool { input } => {
                let input = *input;
                if self.needs(input) {
                    let s = self.val(input).shape().to_vec();
                    let hw = s[2] * s[3];
                    let mut g = vec![0.0; s.iter().product()];
                    for (bc, &go) in grad.iter().enumerate() {
                        let share = go / hw as f64;
                        for v in &mut g[bc * hw..(bc + 1) * hw] {
                            *v = share;
                        }
                    }
                    self.accumulate(input, &g);
                }
            }
            Op::Add { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                self.accumulate(lhs, grad);
                self.accumulate(rhs, grad);
            }
            Op::Sub { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                self.accumulate(lhs, grad);
                if self.needs(rhs) {
                    let g: Vec<f64> = grad.iter().map(|&g| -g).collect();
                    self.accumulate(rhs, &g);
                }
            }
            Op::Mul { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                if self.needs(lhs) {
                    let g: Vec<f64> = grad
                        .iter()
                        .zip(self.val(rhs).data())
                        .map(|(&g, &b)| g * b)
                        .collect();
                    self.accumulate(lhs, &g);
                }
                if self.needs(rhs) {
                    let g: Vec<f64> = grad
                        .iter()
                        .zip(self.val(lhs).data())
                        .map(|(&g, &a)| g * a)
                        .collect();
                    self.accumulate(rhs, &g);
                }
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                if self.needs(input) {
                    let g: Vec<f64> = grad.iter().map(|&g| g * factor).collect();
                    self.accumulate(input, &g);
                }
            }
            Op::RowNormalize { input } => {
                let input = *input;
                if self.needs(input) {
                    let s = self.val(input).shape().to_vec();
                    let (b, d) = (s[0], s[1]);
                    let y = self.nodes[i].value.data();
                    let x = self.val(input).data();
                    let mut g = vec![0.0; b * d];
                    for r in 0..b {
                        let xr = &x[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &grad[r * d..(r + 1) * d];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                        for ((gv, &go), &yv) in
                            g[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr)
                        {
                            *gv = (go - yv * dot) / norm;
                        }
                    }
                    self.accumulate(input, &g);
                }
            }
            Op::MatMul { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                let ls = self.val(lhs).shape().to_vec();
                let rs = self.val(rhs).shape().to_vec();
                let (m, k, n) = (ls[0], ls[1], rs[1]);
                if self.needs(lhs) {
                    // dA = G @ B^T
                    let bt = transpose_raw(self.val(rhs).data(), k, n);
                    let ga = matmul_raw(grad, &bt, m, n, k);
                    self.accumulate(lhs, &ga);
                }
                if self.needs(rhs) {
                    // dB = A^T @ G
                    let at = transpose_raw(self.val(lhs).data(), m, k);
                    let gb = matmul_raw(&at, grad, k, m, n);
                    self.accumulate(rhs, &gb);
                }
            }
            Op::Transpose { input } => {
                let input = *input;
                if self.needs(input) {
                    let os = self.nodes[i].value.shape().to_vec();
                    let g = transpose_raw(grad, os[0], os[1]);
                    self.accumulate(input, &g);
                }
            }
            Op::SoftmaxRows { input } => {
                let input = *input;
                if self.needs(input) {
                    let s = self.nodes[i].value.shape().to_vec();
                    let (b, n) = (s[0], s[1]);
                    let y = self.nodes[i].value.data();
                    let mut g = vec![0.0; b * n];
                    for r in 0..b {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &grad[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for ((gv, &go), &yv) in
                            g[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr)
                        {
                            *gv = yv * (go - dot);
                        }
                    }
                    self.accumulate(input, &g);
                }
            }
            Op::Log { input } => {
                let input = *input;
                if self.needs(input) {
                    let g: Vec<f64> = grad
                        .iter()
                        .zip(self.val(input).data())
                        .map(|(&g, &x)| g / x)
                        .collect();
                    self.accumulate(input, &g);
                }
            }
            Op::Abs { input } => {
                let input = *input;
                if self.needs(input) {
                    let g: Vec<f64> = grad
                        .iter()
                        .zip(self.val(input).data())
                        .map(|(&g, &x)| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(input, &g);
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if self.needs(input) {
                    let g = vec![grad[0]; self.val(input).numel()];
                    self.accumulate(input, &g);
                }
            }
            Op::Mean { input } => {
                let input = *input;
                if self.needs(input) {
                    let n = self.val(input).numel();
                    let g = vec![grad[0] / n as f64; n];
                    self.accumulate(input, &g);
                }
            }
            Op::SliceRow { input, row } => {
                let (input, row) = (*input, *row);
                if self.needs(input) {
                    let n = self.nodes[i].value.numel();
                    let mut g = vec![0.0; self.val(input).numel()];
                    g[row * n..(row + 1) * n].copy_from_slice(grad);
                    self.accumulate(input, &g);
                }
            }
            Op::Narrow { input, offset } => {
                let (input, offset) = (*input, *offset);
                if self.needs(input) {
                    let mut g = vec![0.0; self.val(input).numel()];
                    g[offset..offset + grad.len()].copy_from_slice(grad);
                    self.accumulate(input, &g);
                }
            }
            Op::Reshape { input } => {
                let input = *input;
                self.accumulate(input, grad);
            }
            Op::MulChannel { input, per_channel } => {
                let (input, per_channel) = (*input, *per_channel);
                let xs = self.val(input).shape().to_vec();
                let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                if self.needs(input) {
                    let s = self.val(per_channel).data().to_vec();
                    let mut g = vec![0.0; grad.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            for (gv, &go) in
                                g[base..base + hw].iter_mut().zip(&grad[base..base + hw])
                            {
                                *gv = go * s[ci];
                            }
                        }
                    }
                    self.accumulate(input, &g);
                }
                if self.needs(per_channel) {
                    let x = self.val(input).data();
                    let mut gs = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            gs[ci] += grad[base..base + hw]
                                .iter()
                                .zip(&x[base..base + hw])
                                .map(|(&g, &xv)| g * xv)
                                .sum::<f64>();
                        }
                    }
                    self.accumulate(per_channel, &gs);
                }
            }
            Op::AddChannel { input, per_channel } => {
                let (input, per_channel) = (*input, *per_channel);
                self.accumulate(input, grad);
                if self.needs(per_channel) {
                    let xs = self.val(input).shape().to_vec();
                    let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut gs = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            gs[ci] += grad[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(per_channel, &gs);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                if self.needs(logits) {
                    let s = self.val(logits).shape().to_vec();
                    let (b, n) = (s[0], s[1]);
                    let x = self.val(logits).data();
                    let mut g = vec![0.0; b * n];
                    let scale = grad[0] / b as f64;
                    for r in 0..b {
                        softmax_into(&x[r * n..(r + 1) * n], &mut g[r * n..(r + 1) * n]);
                        for v in &mut g[r * n..(r + 1) * n] {
                            *v *= scale;
                        }
                        g[r * n + labels[r]] -= scale;
                    }
                    self.accumulate(logits, &g);
                }
            }
            Op::TripletHard { feats, selections } => {
                let feats = *feats;
                if self.needs(feats) {
                    let s = self.val(feats).shape().to_vec();
                    let (b, d) = (s[0], s[1]);
                    let x = self.val(feats).data();
                    let valid = selections.len() as f64;
                    let coef = grad[0] / valid;
                    let mut g = vec![0.0; b * d];
                    let mut pulls: Vec<(usize, usize, f64)> = Vec::new();
                    for sel in selections {
                        if !sel.active {
                            continue;
                        }
                        pulls.push((sel.anchor, sel.positive, coef));
                        pulls.push((sel.anchor, sel.negative, -coef));
                    }
                    for (a, j, c) in pulls {
                        let mut dist = 0.0;
                        for t in 0..d {
                            let diff = x[a * d + t] - x[j * d + t];
                            dist += diff * diff;
                        }
                        let dist = dist.sqrt();
                        if dist == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let u = c * (x[a * d + t] - x[j * d + t]) / dist;
                            g[a * d + t] += u;
                            g[j * d + t] -= u;
                        }
                    }
                    self.accumulate(feats, &g);
                }
            }
        }
        Ok(())
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct ConvDims {
    b: usize,
    cin: usize,
    cout: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
}

/// Copies [B,C,H,W] into [B,C,H+2p,W+2p] with replicate-edge padding.
fn replicate_pad(x: &[f64], b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; b * c * hp * wp];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        for py in 0..hp {
            let sy = py.saturating_sub(p).min(h - 1);
            let srow = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[py * wp..(py + 1) * wp];
            for v in &mut drow[..p] {
                *v = srow[0];
            }
            drow[p..p + w].copy_from_slice(srow);
            for v in &mut drow[p + w..] {
                *v = srow[w - 1];
            }
        }
    }
    out
}

/// Folds gradients of a padded buffer back onto source cells (adjoint of
/// replicate_pad): border contributions accumulate into the clamped edges.
fn fold_replicate_pad(gpad: &[f64], b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return gpad.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        let src = &gpad[plane * hp * wp..(plane + 1) * hp * wp];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for py in 0..hp {
            let sy = py.saturating_sub(p).min(h - 1);
            for px in 0..wp {
                let sx = px.saturating_sub(p).min(w - 1);
                dst[sy * w + sx] += src[py * wp + px];
            }
        }
    }
    out
}

fn conv_forward(padded: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64], d: ConvDims) {
    let ConvDims {
        b,
        cin,
        cout,
        hp,
        wp,
        ho,
        wo,
        k,
        stride,
    } = d;
    for bi in 0..b {
        for co in 0..cout {
            let oplane = &mut out[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
            oplane.fill(bias[co]);
            for ci in 0..cin {
                let iplane = &padded[(bi * cin + ci) * hp * wp..(bi * cin + ci + 1) * hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                        for y in 0..ho {
                            let irow = &iplane[(y * stride + ky) * wp + kx..];
                            let orow = &mut oplane[y * wo..(y + 1) * wo];
                            if stride == 1 {
                                for (ov, &iv) in orow.iter_mut().zip(&irow[..wo]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for (x, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * irow[x * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(padded: &[f64], gout: &[f64], gw: &mut [f64], d: ConvDims) {
    let ConvDims {
        b,
        cin,
        cout,
        hp,
        wp,
        ho,
        wo,
        k,
        stride,
    } = d;
    for bi in 0..b {
        for co in 0..cout {
            let gplane = &gout[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
            for ci in 0..cin {
                let iplane = &padded[(bi * cin + ci) * hp * wp..(bi * cin + ci + 1) * hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for y in 0..ho {
                            let irow = &iplane[(y * stride + ky) * wp + kx..];
                            let grow = &gplane[y * wo..(y + 1) * wo];
                            if stride == 1 {
                                for (&g, &iv) in grow.iter().zip(&irow[..wo]) {
                                    acc += g * iv;
                                }
                            } else {
                                for (x, &g) in grow.iter().enumerate() {
                                    acc += g * irow[x * stride];
                                }
                            }
                        }
                        gw[((co * cin + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

fn conv_backward_input(weight: &[f64], gout: &[f64], gpad: &mut [f64], d: ConvDims) {
    let ConvDims {
        b,
        cin,
        cout,
        hp,
        wp,
        ho,
        wo,
        k,
        stride,
    } = d;
    for bi in 0..b {
        for co in 0..cout {
            let gplane = &gout[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
            for ci in 0..cin {
                let ipad = &mut gpad[(bi * cin + ci) * hp * wp..(bi * cin + ci + 1) * hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                        for y in 0..ho {
                            let base = (y * stride + ky) * wp + kx;
                            let grow = &gplane[y * wo..(y + 1) * wo];
                            if stride == 1 {
                                for (x, &g) in grow.iter().enumerate() {
                                    ipad[base + x] += wv * g;
                                }
                            } else {
                                for (x, &g) in grow.iter().enumerate() {
                                    ipad[base + x * stride] += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn pairwise_euclidean(x: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let mut acc = 0.0;
            for t in 0..d {
                let diff = x[i * d + t] - x[j * d + t];
                acc += diff * diff;
            }
            let v = acc.sqrt();
            dist[i * b + j] = v;
            dist[j * b + i] = v;
        }
    }
    dist
}
