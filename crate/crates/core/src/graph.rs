//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; node
//! ids are handed out in topological order, so the backward sweep is a single
//! reverse pass. One tape is built per training step and dropped afterwards.
//!
//! The op set is deliberately small: exactly what the forward model, the
//! losses and the backbones need. Every op's vector-Jacobian product is
//! covered by finite-difference tests at the bottom of this file.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    /// (k) x (k, n) -> (n)
    VecMat(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    /// Row-wise masked softmax; masked columns get exactly zero weight.
    /// The mask is baked into the stored output (zero columns), which is all
    /// the backward pass needs.
    SoftmaxRows(Var),
    /// Per-column max over (optionally masked) rows; ties resolve to the
    /// lowest row index.
    MaxCols {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    /// out[r][c] = x[r][c] * s[r]
    ScaleRows {
        x: Var,
        s: Var,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceRow {
        x: Var,
        row: usize,
    },
    Relu(Var),
    Sqrt(Var),
    Log(Var),
    SumAll(Var),
    LayerNormRows {
        x: Var,
        eps: f64,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    /// (C, H, W) -> (H*W, C) with rows ordered row-major over (y, x).
    ChwToRows(Var),
    /// Zero-pad a (m, n) tensor to (total, n) rows.
    PadRows(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    /// Numerically stable cross entropy of softmax(logits) against a one-hot
    /// label: logsumexp(logits) - logits[label].
    CrossEntropyLogits {
        logits: Var,
        label: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward recording. Build with the op methods, then call
/// [`Tape::backward`] on a scalar node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// (node, parameter index in the owning store)
    param_nodes: Vec<(Var, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a constant with no gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Insert a differentiable leaf tied to parameter `param_idx` of the
    /// owning store. Gradients are collected per parameter index.
    pub fn param(&mut self, param_idx: usize, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.param_nodes.push((v, param_idx));
        v
    }

    /// Insert a differentiable leaf that is not tied to a store (used by
    /// tests and gradient checks that differentiate w.r.t. activations).
    pub fn free_param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context: what.to_string(),
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "div")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                context: "matmul".to_string(),
                expected: vec![ta.rows(), ta.cols(), ta.cols()],
                got: vec![tb.rows(), tb.cols()],
            });
        }
        let t = matmul_values(ta, tb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul(a, b), ng))
    }

    pub fn vecmat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 2 || ta.len() != tb.rows() {
            return Err(Error::ShapeMismatch {
                context: "vecmat".to_string(),
                expected: vec![ta.len()],
                got: tb.shape().to_vec(),
            });
        }
        let (k, n) = (tb.rows(), tb.cols());
        let mut out = vec![0.0; n];
        for i in 0..k {
            let ai = ta.data()[i];
            let brow = tb.row(i);
            for j in 0..n {
                out[j] += ai * brow[j];
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::vector(out), Op::VecMat(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rank(), 2);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.set2(j, i, ta.at2(i, j));
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let ng = self.needs(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(vec![m, total]);
        let mut off = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.rows() != m {
                return Err(Error::ShapeMismatch {
                    context: "concat_cols".to_string(),
                    expected: vec![m],
                    got: vec![tp.rows()],
                });
            }
            let c = tp.cols();
            for i in 0..m {
                for j in 0..c {
                    out.set2(i, off + j, tp.at2(i, j));
                }
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row-wise softmax over the last dimension of a 2-D tensor. When a key
    /// mask is given, masked columns receive exactly zero weight; at least
    /// one column must stay unmasked.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let (m, n) = (tx.rows(), tx.cols());
        if let Some(mk) = mask {
            if mk.len() != n {
                return Err(Error::ShapeMismatch {
                    context: "softmax mask".to_string(),
                    expected: vec![n],
                    got: vec![mk.len()],
                });
            }
            if !mk.iter().any(|&b| b) {
                return Err(Error::AllMasked("softmax".to_string()));
            }
        }
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = tx.row(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if mask.is_none_or(|mk| mk[j]) && row[j] > max {
                    max = row[j];
                }
            }
            let mut sum = 0.0;
            let mut exps = vec![0.0; n];
            for j in 0..n {
                if mask.is_none_or(|mk| mk[j]) {
                    exps[j] = (row[j] - max).exp();
                    sum += exps[j];
                }
            }
            for j in 0..n {
                out.set2(i, j, exps[j] / sum);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    /// Per-channel max over rows (global max pooling). Masked rows are
    /// excluded; errors if every row is masked.
    pub fn max_cols(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let (m, n) = (tx.rows(), tx.cols());
        if let Some(mk) = mask {
            if mk.len() != m {
                return Err(Error::ShapeMismatch {
                    context: "max_cols mask".to_string(),
                    expected: vec![m],
                    got: vec![mk.len()],
                });
            }
        }
        let rows: Vec<usize> = (0..m)
            .filter(|&r| mask.is_none_or(|mk| mk[r]))
            .collect();
        if rows.is_empty() {
            return Err(Error::AllMasked("max pooling".to_string()));
        }
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![rows[0]; n];
        for &r in &rows {
            let row = tx.row(r);
            for c in 0..n {
                if row[c] > out[c] {
                    out[c] = row[c];
                    argmax[c] = r;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::vector(out), Op::MaxCols { x, argmax }, ng))
    }

    /// Column means over rows: (m, n) -> (n).
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            let row = tx.row(r);
            for c in 0..n {
                out[c] += row[c];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let ng = self.needs(x);
        self.push(Tensor::vector(out), Op::MeanRows(x), ng)
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 2 || ts.rank() != 1 || ts.len() != tx.rows() {
            return Err(Error::ShapeMismatch {
                context: "scale_rows".to_string(),
                expected: vec![tx.rows()],
                got: ts.shape().to_vec(),
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for r in 0..m {
            let sr = ts.data()[r];
            for c in 0..n {
                out.set2(r, c, tx.at2(r, c) * sr);
            }
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::ScaleRows { x, s }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        if start + len > tx.rows() {
            return Err(Error::ShapeMismatch {
                context: "slice_rows".to_string(),
                expected: vec![tx.rows()],
                got: vec![start + len],
            });
        }
        let n = tx.cols();
        let data = tx.data()[start * n..(start + len) * n].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![len, n], data), Op::SliceRows { x, start }, ng))
    }

    /// Extract row `row` of a 2-D tensor as a vector.
    pub fn row(&mut self, x: Var, row: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        assert!(row < tx.rows());
        let t = Tensor::vector(tx.row(row).to_vec());
        let ng = self.needs(x);
        self.push(t, Op::SliceRow { x, row }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.sqrt()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(t, Op::Sqrt(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(t, Op::Log(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..n {
                out.set2(r, c, (row[c] - mean) * inv);
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::LayerNormRows { x, eps }, ng)
    }

    /// 2-D convolution: input (C, H, W), weight (O, C, KH, KW), bias (O).
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (ti, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        if ti.rank() != 3 || tw.rank() != 4 || tb.rank() != 1 {
            return Err(Error::ShapeMismatch {
                context: "conv2d ranks".to_string(),
                expected: vec![3, 4, 1],
                got: vec![ti.rank(), tw.rank(), tb.rank()],
            });
        }
        let (c_in, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (c_out, c_w, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if c_w != c_in || tb.len() != c_out || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                context: "conv2d channels".to_string(),
                expected: vec![c_in, c_out],
                got: vec![c_w, tb.len()],
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        // im2col + matmul: weight is already (c_out, c_in*kh*kw) row-major
        let cols = im2col(ti.data(), c_in, h, w, kh, kw, stride, pad, oh, ow);
        let k = c_in * kh * kw;
        let n = oh * ow;
        let mut out = vec![0.0; c_out * n];
        matmul_acc(tw.data(), c_out, k, &cols, n, &mut out);
        for o in 0..c_out {
            let b = tb.data()[o];
            for v in &mut out[o * n..(o + 1) * n] {
                *v += b;
            }
        }
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![c_out, oh, ow], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Flatten a (C, H, W) feature volume into (H*W, C) rows, row-major over
    /// (y, x) so that consecutive row blocks are horizontal bands.
    pub fn chw_to_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3);
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut out = Tensor::zeros(vec![h * w, c]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.set2(y * w + xx, ch, tx.data()[(ch * h + y) * w + xx]);
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::ChwToRows(x), ng)
    }

    /// Zero-pad rows of a 2-D tensor up to `total` rows.
    pub fn pad_rows(&mut self, x: Var, total: usize) -> Result<Var> {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let (m, n) = (tx.rows(), tx.cols());
        if m > total {
            return Err(Error::ShapeMismatch {
                context: "pad_rows".to_string(),
                expected: vec![total],
                got: vec![m],
            });
        }
        let mut out = Tensor::zeros(vec![total, n]);
        out.data_mut()[..m * n].copy_from_slice(tx.data());
        let ng = self.needs(x);
        Ok(self.push(out, Op::PadRows(x), ng))
    }

    /// Row gather from an embedding table: (V, d) + ids -> (len(ids), d).
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        assert_eq!(tt.rank(), 2);
        let (v, d) = (tt.rows(), tt.cols());
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
        }
        let mut out = Tensor::zeros(vec![ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            for c in 0..d {
                out.set2(i, c, tt.at2(id, c));
            }
        }
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Cross entropy of softmax(logits) against one-hot `label`.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = self.value(logits);
        assert_eq!(tl.rank(), 1);
        if label >= tl.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: tl.len(),
            });
        }
        let max = tl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + tl.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - tl.data()[label];
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits { logits, label },
            ng,
        ))
    }

    /// Softmax of a node's current value, detached from the graph.
    pub fn softmax_value(&self, logits: Var) -> Vec<f64> {
        softmax_slice(self.value(logits).data())
    }

    /// Run the backward sweep from a scalar node; returns one gradient per
    /// node (None where no gradient flows).
    pub fn backward(&self, output: Var) -> Vec<Option<Tensor>> {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward() requires a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(
            self.value(output).shape().to_vec(),
            vec![1.0],
        ));

        for id in (0..self.nodes.len()).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    /// Registered parameter nodes with their store indices, in insertion
    /// order.
    pub fn param_entries(&self) -> &[(Var, usize)] {
        &self.param_nodes
    }

    /// Gradients of registered parameters after [`Tape::backward`], keyed by
    /// parameter index.
    pub fn param_grads(&self, grads: &[Option<Tensor>]) -> Vec<(usize, Tensor)> {
        self.param_nodes
            .iter()
            .filter_map(|&(v, idx)| grads[v.0].clone().map(|g| (idx, g)))
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(tb.data())
                        .map(|(gi, bi)| gi * bi)
                        .collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(gi, ai)| gi * ai)
                        .collect(),
                );
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(tb.data())
                        .map(|(gi, bi)| gi / bi)
                        .collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                        .collect(),
                );
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|gi| gi * c).collect(),
                );
                self.accumulate(grads, *a, da);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                // da = g @ b^T ; db = a^T @ g
                let da = matmul_nt(g, tb);
                let db = matmul_tn(ta, g);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::VecMat(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.rows(), tb.cols());
                let mut da = vec![0.0; k];
                let mut db = Tensor::zeros(vec![k, n]);
                for i in 0..k {
                    let brow = tb.row(i);
                    let ai = ta.data()[i];
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g.data()[j] * brow[j];
                        db.set2(i, j, ai * g.data()[j]);
                    }
                    da[i] = acc;
                }
                self.accumulate(grads, *a, Tensor::vector(da));
                self.accumulate(grads, *b, db);
            }
            Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let mut da = Tensor::zeros(vec![n, m]);
                for i in 0..m {
                    for j in 0..n {
                        da.set2(j, i, g.at2(i, j));
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Reshape(a) => {
                let da = g.clone().reshape(self.value(*a).shape().to_vec());
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut dp = Tensor::zeros(vec![m, c]);
                    for i in 0..m {
                        for j in 0..c {
                            dp.set2(i, j, g.at2(i, off + j));
                        }
                    }
                    self.accumulate(grads, p, dp);
                    off += c;
                }
            }
            Op::SoftmaxRows(x) => {
                // dx = s * (g - sum(g * s)) per row; masked entries have s = 0.
                let s = &self.nodes[id].value;
                let (m, n) = (s.rows(), s.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let srow = s.row(i);
                    let grow = g.row(i);
                    let dot: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                    for j in 0..n {
                        dx.set2(i, j, srow[j] * (grow[j] - dot));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaxCols { x, argmax } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.shape().to_vec());
                for (c, &r) in argmax.iter().enumerate() {
                    let idx = r * tx.cols() + c;
                    dx.data_mut()[idx] += g.data()[c];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (m, n) = (tx.rows(), tx.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    for c in 0..n {
                        dx.set2(r, c, g.data()[c] / m as f64);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScaleRows { x, s } => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let (m, n) = (tx.rows(), tx.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                let mut ds = vec![0.0; m];
                for r in 0..m {
                    let sr = ts.data()[r];
                    for c in 0..n {
                        dx.set2(r, c, g.at2(r, c) * sr);
                        ds[r] += g.at2(r, c) * tx.at2(r, c);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *s, Tensor::vector(ds));
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.shape().to_vec());
                let n = tx.cols();
                for r in 0..g.rows() {
                    for c in 0..n {
                        dx.set2(start + r, c, g.at2(r, c));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceRow { x, row } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.shape().to_vec());
                let n = tx.cols();
                for c in 0..n {
                    dx.set2(*row, c, g.data()[c]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(tx.data())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
                self.accumulate(grads, *x, da);
            }
            Op::Sqrt(x) => {
                let out = &self.nodes[id].value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(gi, oi)| gi * 0.5 / oi)
                        .collect(),
                );
                self.accumulate(grads, *x, da);
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(tx.data())
                        .map(|(gi, xi)| gi / xi)
                        .collect(),
                );
                self.accumulate(grads, *x, da);
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                let da = Tensor::full(tx.shape().to_vec(), g.item());
                self.accumulate(grads, *x, da);
            }
            Op::LayerNormRows { x, eps } => {
                let tx = self.value(*x);
                let y = &self.nodes[id].value;
                let (m, n) = (tx.rows(), tx.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    let row = tx.row(r);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let grow = g.row(r);
                    let yrow = y.row(r);
                    let gmean = grow.iter().sum::<f64>() / n as f64;
                    let gydot = grow
                        .iter()
                        .zip(yrow)
                        .map(|(gi, yi)| gi * yi)
                        .sum::<f64>()
                        / n as f64;
                    for c in 0..n {
                        dx.set2(r, c, inv * (grow[c] - gmean - yrow[c] * gydot));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (ti, tw) = (self.value(*input), self.value(*weight));
                let (c_in, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let (c_out, _, kh, kw) =
                    (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let needs_input = self.nodes[input.0].needs_grad;
                let gdat = g.data();
                let (stride, pad) = (*stride, *pad);
                let k = c_in * kh * kw;
                let n = oh * ow;

                let mut db = vec![0.0; c_out];
                for o in 0..c_out {
                    db[o] = gdat[o * n..(o + 1) * n].iter().sum();
                }

                // dW = g (c_out, n) @ cols^T (n, k)
                let cols = im2col(ti.data(), c_in, h, w, kh, kw, stride, pad, oh, ow);
                let mut dw = vec![0.0; c_out * k];
                for o in 0..c_out {
                    let grow = &gdat[o * n..(o + 1) * n];
                    let dwrow = &mut dw[o * k..(o + 1) * k];
                    for p in 0..k {
                        let crow = &cols[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += grow[i] * crow[i];
                        }
                        dwrow[p] = acc;
                    }
                }
                self.accumulate(grads, *weight, Tensor::new(tw.shape().to_vec(), dw));
                self.accumulate(grads, *bias, Tensor::vector(db));

                if needs_input {
                    // dcols = W^T (k, c_out) @ g (c_out, n), scattered back
                    let mut dcols = vec![0.0; k * n];
                    let wdat = tw.data();
                    for o in 0..c_out {
                        let grow = &gdat[o * n..(o + 1) * n];
                        let wrow = &wdat[o * k..(o + 1) * k];
                        for p in 0..k {
                            let wv = wrow[p];
                            if wv == 0.0 {
                                continue;
                            }
                            let drow = &mut dcols[p * n..(p + 1) * n];
                            for i in 0..n {
                                drow[i] += wv * grow[i];
                            }
                        }
                    }
                    let mut di = Tensor::zeros(ti.shape().to_vec());
                    col2im_add(&dcols, di.data_mut(), c_in, h, w, kh, kw, stride, pad, oh, ow);
                    self.accumulate(grads, *input, di);
                }
            }
            Op::ChwToRows(x) => {
                let tx = self.value(*x);
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let mut dx = Tensor::zeros(tx.shape().to_vec());
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx.data_mut()[(ch * h + y) * w + xx] = g.at2(y * w + xx, ch);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PadRows(x) => {
                let tx = self.value(*x);
                let (m, n) = (tx.rows(), tx.cols());
                let dx = Tensor::new(vec![m, n], g.data()[..m * n].to_vec());
                self.accumulate(grads, *x, dx);
            }
            Op::Embed { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut dt = Tensor::zeros(tt.shape().to_vec());
                for (i, &id_) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt.data_mut()[id_ * d + c] += g.at2(i, c);
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::CrossEntropyLogits { logits, label } => {
                let p = softmax_slice(self.value(*logits).data());
                let gs = g.item();
                let mut dl = vec![0.0; p.len()];
                for (i, pi) in p.iter().enumerate() {
                    dl[i] = gs * (pi - if i == *label { 1.0 } else { 0.0 });
                }
                self.accumulate(grads, *logits, Tensor::vector(dl));
            }
        }
    }
}

/// Valid output-column range [lo, hi) for which `ox * stride + kx - pad`
/// stays inside [0, w).
#[inline]
fn ox_bounds(stride: usize, pad: usize, kx: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi = if w + pad > kx {
        ow.min((w - 1 + pad - kx) / stride + 1)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold (c_in, h, w) into (c_in*kh*kw, oh*ow) patch columns, zero-padded.
#[allow(clippy::too_many_arguments)]
fn im2col(
    idat: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let n = oh * ow;
    let mut cols = vec![0.0; c_in * kh * kw * n];
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * n;
                let (lo, hi) = ox_bounds(stride, pad, kx, w, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = (c * h + iy as usize) * w;
                    let base = row + oy * ow;
                    let x0 = kx + lo * stride - pad;
                    for i in 0..hi - lo {
                        cols[base + lo + i] = idat[irow + x0 + i * stride];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add (c_in*kh*kw, oh*ow) columns back onto the (c_in, h, w) image.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    idat: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let n = oh * ow;
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * n;
                let (lo, hi) = ox_bounds(stride, pad, kx, w, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = (c * h + iy as usize) * w;
                    let base = row + oy * ow;
                    let x0 = kx + lo * stride - pad;
                    for i in 0..hi - lo {
                        idat[irow + x0 + i * stride] += cols[base + lo + i];
                    }
                }
            }
        }
    }
}

/// out (m, n) += a (m, k) @ b (k, n), all row-major flat slices.
fn matmul_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for p in 0..k {
            let aip = a.at2(i, p);
            if aip == 0.0 {
                continue;
            }
            let brow = b.row(p);
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// g (m, n) @ b^T (n, k) -> (m, k)
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (g.rows(), g.cols(), b.rows());
    let mut out = Tensor::zeros(vec![m, k]);
    for i in 0..m {
        let grow = g.row(i);
        for p in 0..k {
            let brow = b.row(p);
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            out.set2(i, p, acc);
        }
    }
    out
}

/// a^T (k, m) @ g (m, n) -> (k, n)
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), g.cols());
    let mut out = Tensor::zeros(vec![k, n]);
    for i in 0..m {
        let arow = a.row(i);
        let grow = g.row(i);
        for p in 0..k {
            let aip = arow[p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * grow[j];
            }
        }
    }
    out
}
