//! Reverse-mode differentiation over a recording tape.
//!
//! Every operation appends a node; `backward` walks the nodes once in
//! reverse insertion order (which is a reverse topological order, since an
//! op can only consume already-recorded values) and accumulates adjoints
//! additively on fan-out. Nodes that cannot influence any trainable leaf
//! are skipped entirely: a frozen parameter never has a gradient buffer
//! allocated for it.

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op<T: Scalar> {
    Leaf,
    Matmul {
        a: ValueId,
        b: ValueId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    AddRow {
        x: ValueId,
        v: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    MulRow {
        x: ValueId,
        v: ValueId,
    },
    Scale {
        x: ValueId,
        c: T,
    },
    Silu {
        x: ValueId,
    },
    RmsNorm {
        x: ValueId,
        gain: ValueId,
        eps: T,
    },
    MaskedSoftmax {
        x: ValueId,
    },
    Mse {
        pred: ValueId,
        target: Vec<T>,
    },
    Sum {
        x: ValueId,
    },
    Rope {
        x: ValueId,
        head_dim: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    ConcatRows {
        parts: Vec<ValueId>,
    },
    SliceRows {
        x: ValueId,
        start: usize,
    },
    ConcatCols {
        parts: Vec<ValueId>,
    },
    SliceCols {
        x: ValueId,
        start: usize,
    },
}

struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op<T>,
}

/// Recording tape for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. `trainable` marks it as a gradient target.
    pub fn leaf(&mut self, t: &Tensor<T>, trainable: bool) -> ValueId {
        self.push(t.data().to_vec(), t.shape().to_vec(), trainable, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> ValueId {
        self.leaf(t, false)
    }

    pub fn value(&self, id: ValueId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape_of(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: ValueId) -> Tensor<T> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape nodes hold consistent shapes")
    }

    /// Gradient of the last `backward` pass, if this node was on a
    /// differentiable path.
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool, op: Op<T>) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            needs_grad,
            op,
        });
        id
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn rows(&self, id: ValueId) -> usize {
        let s = &self.nodes[id.0].shape;
        if s.is_empty() {
            1
        } else {
            s[..s.len() - 1].iter().product()
        }
    }

    fn cols(&self, id: ValueId) -> usize {
        self.nodes[id.0].shape.last().copied().unwrap_or(1)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], ng, Op::Matmul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(TensorError::DimMismatch {
                op: "transpose",
                detail: format!("{s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[x.0].data;
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![c, r], ng, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, ng, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, ng, Op::Mul { a, b }))
    }

    /// Adds a single-row vector to every row of `x`.
    pub fn add_row(&mut self, x: ValueId, v: ValueId) -> Result<ValueId> {
        self.row_compat("add_row", x, v)?;
        let (rows, cols) = (self.rows(x), self.cols(x));
        let vd = &self.nodes[v.0].data;
        let mut out = self.nodes[x.0].data.clone();
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] += vd[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(out, shape, ng, Op::AddRow { x, v }))
    }

    /// Multiplies every row of `x` elementwise by a single-row vector.
    pub fn mul_row(&mut self, x: ValueId, v: ValueId) -> Result<ValueId> {
        self.row_compat("mul_row", x, v)?;
        let (rows, cols) = (self.rows(x), self.cols(x));
        let vd = &self.nodes[v.0].data;
        let mut out = self.nodes[x.0].data.clone();
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] *= vd[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(out, shape, ng, Op::MulRow { x, v }))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let c = T::from_f64(c);
        let out: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(out, shape, ng, Op::Scale { x, c })
    }

    pub fn silu(&mut self, x: ValueId) -> ValueId {
        let out: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                let sig = T::ONE / (T::ONE + (-v).exp());
                v * sig
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(out, shape, ng, Op::Silu { x })
    }

    /// Root-mean-square normalization over the trailing dimension with a
    /// learned per-channel gain. `eps` is fixed at 1e-6.
    pub fn rms_norm(&mut self, x: ValueId, gain: ValueId) -> Result<ValueId> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        if self.nodes[gain.0].data.len() != cols {
            return Err(TensorError::DimMismatch {
                op: "rms_norm",
                detail: format!(
                    "gain has {} entries, trailing dim is {}",
                    self.nodes[gain.0].data.len(),
                    cols
                ),
            });
        }
        let eps = T::from_f64(1e-6);
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gain.0].data;
        let mut out = vec![T::ZERO; xd.len()];
        let inv_d = T::from_f64(1.0 / cols as f64);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mut ms = T::ZERO;
            for &v in row {
                ms += v * v;
            }
            ms *= inv_d;
            let inv_rms = T::ONE / (ms + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = row[j] * inv_rms * gd[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(out, shape, ng, Op::RmsNorm { x, gain, eps }))
    }

    /// Row-wise softmax of `logits + bias`, stabilized by subtracting the
    /// row maximum over unmasked entries.
    ///
    /// `bias` entries must be 0 (open) or [`Scalar::MASK_NEG`] (masked);
    /// masked positions come out exactly 0 because their shifted exponent
    /// underflows. The bias may have a single row, broadcast to all rows.
    /// A row with every position masked is an error.
    pub fn masked_softmax(&mut self, logits: ValueId, bias: &Tensor<T>) -> Result<ValueId> {
        let (rows, cols) = (self.rows(logits), self.cols(logits));
        let brows = bias.rows();
        if bias.cols() != cols || (brows != rows && brows != 1) {
            return Err(TensorError::DimMismatch {
                op: "masked_softmax",
                detail: format!(
                    "logits {:?} vs bias {:?}",
                    self.nodes[logits.0].shape,
                    bias.shape()
                ),
            });
        }
        let masked_below = T::MASK_NEG * T::from_f64(0.5);
        let xd = &self.nodes[logits.0].data;
        let bd = bias.data();
        let mut out = vec![T::ZERO; xd.len()];
        for r in 0..rows {
            let brow = &bd[if brows == 1 { 0 } else { r * cols }..][..cols];
            let row = &xd[r * cols..(r + 1) * cols];
            let mut mx: Option<T> = None;
            for j in 0..cols {
                if brow[j] > masked_below {
                    let v = row[j];
                    mx = Some(match mx {
                        Some(m) if m >= v => m,
                        _ => v,
                    });
                }
            }
            let mx = mx.ok_or(TensorError::FullyMaskedRow { row: r })?;
            let mut denom = T::ZERO;
            for j in 0..cols {
                let e = (row[j] + brow[j] - mx).exp();
                out[r * cols + j] = e;
                denom += e;
            }
            let inv = T::ONE / denom;
            for j in 0..cols {
                out[r * cols + j] *= inv;
            }
        }
        let shape = self.nodes[logits.0].shape.clone();
        let ng = self.needs(logits);
        Ok(self.push(out, shape, ng, Op::MaskedSoftmax { x: logits }))
    }

    /// Mean squared error against a fixed target, reduced over all elements.
    pub fn mse(&mut self, pred: ValueId, target: &Tensor<T>) -> Result<ValueId> {
        if self.nodes[pred.0].shape != target.shape() {
            return Err(TensorError::DimMismatch {
                op: "mse",
                detail: format!("{:?} vs {:?}", self.nodes[pred.0].shape, target.shape()),
            });
        }
        let n = T::from_f64(target.len() as f64);
        let mut acc = T::ZERO;
        for (&p, &t) in self.nodes[pred.0].data.iter().zip(target.data()) {
            let d = p - t;
            acc += d * d;
        }
        let out = vec![acc / n];
        let ng = self.needs(pred);
        Ok(self.push(
            out,
            vec![],
            ng,
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let mut acc = T::ZERO;
        for &v in &self.nodes[x.0].data {
            acc += v;
        }
        let ng = self.needs(x);
        self.push(vec![acc], vec![], ng, Op::Sum { x })
    }

    /// Rotary position encoding: within every `head_dim` block of a row,
    /// consecutive pairs are rotated by per-row angles given as `cos`/`sin`
    /// tables of layout `[rows × head_dim/2]`.
    pub fn rope(&mut self, x: ValueId, head_dim: usize, cos: &[T], sin: &[T]) -> Result<ValueId> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        let half = head_dim / 2;
        if head_dim == 0 || head_dim % 2 != 0 || cols % head_dim != 0 {
            return Err(TensorError::DimMismatch {
                op: "rope",
                detail: format!("head_dim {head_dim} does not tile width {cols}"),
            });
        }
        if cos.len() != rows * half || sin.len() != rows * half {
            return Err(TensorError::DimMismatch {
                op: "rope",
                detail: format!("angle tables sized {} for {} rows", cos.len(), rows),
            });
        }
        let heads = cols / head_dim;
        let xd = &self.nodes[x.0].data;
        let mut out = xd.clone();
        for r in 0..rows {
            for h in 0..heads {
                let base = r * cols + h * head_dim;
                for p in 0..half {
                    let (c, s) = (cos[r * half + p], sin[r * half + p]);
                    let (x0, x1) = (xd[base + 2 * p], xd[base + 2 * p + 1]);
                    out[base + 2 * p] = x0 * c - x1 * s;
                    out[base + 2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(
            out,
            shape,
            ng,
            Op::Rope {
                x,
                head_dim,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.cols(parts[0]);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != cols {
                return Err(TensorError::DimMismatch {
                    op: "concat_rows",
                    detail: format!("widths {} vs {}", cols, self.cols(p)),
                });
            }
            rows += self.rows(p);
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            data,
            vec![rows, cols],
            ng,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        if start + len > rows {
            return Err(TensorError::DimMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {rows}", start + len),
            });
        }
        let data = self.nodes[x.0].data[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(x);
        Ok(self.push(data, vec![len, cols], ng, Op::SliceRows { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.rows(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            if self.rows(p) != rows {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", rows, self.rows(p)),
                });
            }
            widths.push(self.cols(p));
            total += self.cols(p);
        }
        let mut data = vec![T::ZERO; rows * total];
        let mut off = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let w = widths[idx];
            let src = &self.nodes[p.0].data;
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            data,
            vec![rows, total],
            ng,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        if start + len > cols {
            return Err(TensorError::DimMismatch {
                op: "slice_cols",
                detail: format!("cols {start}..{} of {cols}", start + len),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::ZERO; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![rows, len], ng, Op::SliceCols { x, start }))
    }

    /// Low-rank adapted projection `x · (W + scale · A · B)`, evaluated as
    /// the frozen base product plus the adapter path `scale · (x·A)·B`.
    ///
    /// With `B` all zeros the adapter path is exactly the zero matrix and
    /// the result is bitwise identical to `x · W`.
    pub fn linear_lora(
        &mut self,
        x: ValueId,
        w: ValueId,
        a: ValueId,
        b: ValueId,
        scale: f64,
    ) -> Result<ValueId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (sw, sx) = (&self.nodes[w.0].shape, &self.nodes[x.0].shape);
        let rank_ok = sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0] && sa[1] >= 1;
        let dims_ok = sw.len() == 2 && sa[0] == sw[0] && sb[1] == sw[1];
        if !rank_ok || !dims_ok {
            return Err(TensorError::DimMismatch {
                op: "linear_lora",
                detail: format!("x {sx:?}, W {sw:?}, A {sa:?}, B {sb:?}"),
            });
        }
        let base = self.matmul(x, w)?;
        let xa = self.matmul(x, a)?;
        let delta = self.matmul(xa, b)?;
        let delta = self.scale(delta, scale);
        self.add(base, delta)
    }

    fn same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::DimMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    fn row_compat(&self, op: &'static str, x: ValueId, v: ValueId) -> Result<()> {
        if self.cols(v) != self.cols(x) || self.rows(v) != 1 {
            return Err(TensorError::DimMismatch {
                op,
                detail: format!(
                    "{:?} broadcast onto {:?}",
                    self.nodes[v.0].shape, self.nodes[x.0].shape
                ),
            });
        }
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Computes adjoints of `loss` with respect to every trainable leaf.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing trainable feeds the loss
        }
        self.grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.step_back(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, target: ValueId, contrib: impl FnOnce(&mut [T])) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let n = self.nodes[target.0].data.len();
        let buf = self.grads[target.0].get_or_insert_with(|| vec![T::ZERO; n]);
        contrib(buf);
    }

    fn step_back(&mut self, i: usize, g: &[T]) {
        // Ops read sibling node data through raw indexing; nodes are never
        // removed so the borrows are disjoint from the grad buffers.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.nodes[a.0].needs_grad {
                    let bd = self.nodes[b.0].data.clone();
                    self.accum(a, |buf| matmul_nt(g, &bd, m, n, k, buf));
                }
                if self.nodes[b.0].needs_grad {
                    let ad = self.nodes[a.0].data.clone();
                    self.accum(b, |buf| matmul_tn(&ad, g, m, k, n, buf));
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                self.accum(x, |buf| {
                    for p in 0..r {
                        for q in 0..c {
                            buf[q * r + p] += g[p * c + q];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                self.accum(b, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::AddRow { x, v } => {
                let (x, v) = (*x, *v);
                let cols = self.cols(v);
                self.accum(x, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                self.accum(v, |buf| {
                    for (idx, &gv) in g.iter().enumerate() {
                        buf[idx % cols] += gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let bd = self.nodes[b.0].data.clone();
                    self.accum(a, |buf| {
                        for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(&bd) {
                            *o += gv * bv;
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let ad = self.nodes[a.0].data.clone();
                    self.accum(b, |buf| {
                        for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(&ad) {
                            *o += gv * av;
                        }
                    });
                }
            }
            Op::MulRow { x, v } => {
                let (x, v) = (*x, *v);
                let cols = self.cols(v);
                if self.nodes[x.0].needs_grad {
                    let vd = self.nodes[v.0].data.clone();
                    self.accum(x, |buf| {
                        for (idx, &gv) in g.iter().enumerate() {
                            buf[idx] += gv * vd[idx % cols];
                        }
                    });
                }
                if self.nodes[v.0].needs_grad {
                    let xd = self.nodes[x.0].data.clone();
                    self.accum(v, |buf| {
                        for (idx, &gv) in g.iter().enumerate() {
                            buf[idx % cols] += gv * xd[idx];
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.accum(x, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }
            Op::Silu { x } => {
                let x = *x;
                let xd = self.nodes[x.0].data.clone();
                self.accum(x, |buf| {
                    for (idx, &gv) in g.iter().enumerate() {
                        let v = xd[idx];
                        let sig = T::ONE / (T::ONE + (-v).exp());
                        let d = sig * (T::ONE + v * (T::ONE - sig));
                        buf[idx] += gv * d;
                    }
                });
            }
            Op::RmsNorm { x, gain, eps } => {
                let (x, gain, eps) = (*x, *gain, *eps);
                let cols = self.cols(x);
                let rows = self.rows(x);
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gain.0].data.clone();
                let inv_d = T::from_f64(1.0 / cols as f64);
                // Per row: r = (mean(x^2)+eps)^{-1/2}, y_j = g_j x_j r.
                // dx_j = r g_j go_j - r^3 x_j / d * sum_i(go_i g_i x_i)
                if self.nodes[x.0].needs_grad {
                    self.accum(x, |buf| {
                        for rr in 0..rows {
                            let row = &xd[rr * cols..(rr + 1) * cols];
                            let grow = &g[rr * cols..(rr + 1) * cols];
                            let mut ms = T::ZERO;
                            for &v in row {
                                ms += v * v;
                            }
                            ms *= inv_d;
                            let inv_rms = T::ONE / (ms + eps).sqrt();
                            let r3 = inv_rms * inv_rms * inv_rms;
                            let mut dot = T::ZERO;
                            for j in 0..cols {
                                dot += grow[j] * gd[j] * row[j];
                            }
                            for j in 0..cols {
                                buf[rr * cols + j] +=
                                    inv_rms * gd[j] * grow[j] - r3 * row[j] * inv_d * dot;
                            }
                        }
                    });
                }
                if self.nodes[gain.0].needs_grad {
                    self.accum(gain, |buf| {
                        for rr in 0..rows {
                            let row = &xd[rr * cols..(rr + 1) * cols];
                            let grow = &g[rr * cols..(rr + 1) * cols];
                            let mut ms = T::ZERO;
                            for &v in row {
                                ms += v * v;
                            }
                            ms *= inv_d;
                            let inv_rms = T::ONE / (ms + eps).sqrt();
                            for j in 0..cols {
                                buf[j] += grow[j] * row[j] * inv_rms;
                            }
                        }
                    });
                }
            }
            Op::MaskedSoftmax { x } => {
                let x = *x;
                let cols = self.cols(x);
                let rows = self.rows(x);
                let s = self.nodes[i].data.clone();
                self.accum(x, |buf| {
                    for r in 0..rows {
                        let srow = &s[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let mut dot = T::ZERO;
                        for j in 0..cols {
                            dot += grow[j] * srow[j];
                        }
                        for j in 0..cols {
                            buf[r * cols + j] += srow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pred = *pred;
                let target = target.clone();
                let pd = self.nodes[pred.0].data.clone();
                let n = T::from_f64(target.len() as f64);
                let two = T::from_f64(2.0);
                let g0 = g[0];
                self.accum(pred, |buf| {
                    for (idx, o) in buf.iter_mut().enumerate() {
                        *o += g0 * two * (pd[idx] - target[idx]) / n;
                    }
                });
            }
            Op::Sum { x } => {
                let x = *x;
                let g0 = g[0];
                self.accum(x, |buf| {
                    for o in buf.iter_mut() {
                        *o += g0;
                    }
                });
            }
            Op::Rope {
                x,
                head_dim,
                cos,
                sin,
            } => {
                let (x, head_dim) = (*x, *head_dim);
                let cos = cos.clone();
                let sin = sin.clone();
                let cols = self.cols(x);
                let rows = self.rows(x);
                let half = head_dim / 2;
                let heads = cols / head_dim;
                self.accum(x, |buf| {
                    for r in 0..rows {
                        for h in 0..heads {
                            let base = r * cols + h * head_dim;
                            for p in 0..half {
                                let (c, s) = (cos[r * half + p], sin[r * half + p]);
                                let (g0, g1) = (g[base + 2 * p], g[base + 2 * p + 1]);
                                buf[base + 2 * p] += g0 * c + g1 * s;
                                buf[base + 2 * p + 1] += -g0 * s + g1 * c;
                            }
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let cols = self.cols(ValueId(i));
                let mut row_off = 0;
                for p in parts {
                    let pr = self.rows(p);
                    let seg = row_off * cols..(row_off + pr) * cols;
                    self.accum(p, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g[seg]) {
                            *o += gv;
                        }
                    });
                    row_off += pr;
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let cols = self.cols(x);
                let out_len = self.nodes[i].data.len();
                self.accum(x, |buf| {
                    for (idx, &gv) in g[..out_len].iter().enumerate() {
                        buf[start * cols + idx] += gv;
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let total = self.cols(ValueId(i));
                let rows = self.rows(ValueId(i));
                let mut col_off = 0;
                for p in parts {
                    let w = self.cols(p);
                    let off = col_off;
                    self.accum(p, |buf| {
                        for r in 0..rows {
                            for j in 0..w {
                                buf[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    col_off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let cols = self.cols(x);
                let rows = self.rows(ValueId(i));
                let w = self.cols(ValueId(i));
                self.accum(x, |buf| {
                    for r in 0..rows {
                        for j in 0..w {
                            buf[r * cols + start + j] += g[r * w + j];
                        }
                    }
                });
            }
        }
    }
}

// ── matrix kernels ──────────────────────────────────────────────────

/// `out += A · B` for row-major `A [m×k]`, `B [k×n]`.
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// `out += A · Bᵀ` for row-major `A [m×k]`, `B [n×k]`.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += Aᵀ · B` for row-major `A [m×k]`, `B [m×n]`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_grad, rel_err, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_rng(shape.to_vec(), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..4 {
            let m = rt(&mut rng, &[2, 2]);
            let mut tape = Tape::new();
            let i2 = tape.constant(&Tensor::eye(2));
            let mm = tape.constant(&m);
            let out = tape.matmul(i2, mm).unwrap();
            assert_eq!(tape.value(out), m.data());
        }
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(&Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[2.0, 4.0]);
        assert_eq!(tape.shape_of(out), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::DimMismatch { .. })
        ));
    }

    /// Weighted-sum loss so gradients are non-uniform across elements.
    fn weighted_loss(tape: &mut Tape<f64>, out: ValueId, w: &Tensor<f64>) -> ValueId {
        let wid = tape.constant(w);
        let prod = tape.mul(out, wid).unwrap();
        tape.sum(prod)
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a0 = rt(&mut rng, &[5, 7]);
        let b0 = rt(&mut rng, &[7, 3]);
        let w = rt(&mut rng, &[5, 3]);

        let mut tape = Tape::new();
        let a = tape.leaf(&a0, true);
        let b = tape.leaf(&b0, true);
        let out = tape.matmul(a, b).unwrap();
        let loss = weighted_loss(&mut tape, out, &w);
        tape.backward(loss).unwrap();

        let inputs = [a0, b0];
        for (which, id) in [(0, a), (1, b)] {
            let fd = fd_grad(&inputs, which, FD_STEP, &mut |xs| {
                let mut t = Tape::new();
                let a = t.constant(&xs[0]);
                let b = t.constant(&xs[1]);
                let out = t.matmul(a, b).unwrap();
                let loss = weighted_loss(&mut t, out, &w);
                t.value(loss)[0]
            });
            assert!(
                rel_err(tape.grad(id).unwrap(), fd.data()) < 1e-6,
                "matmul input {which} gradient off"
            );
        }
    }

    #[test]
    fn masked_softmax_single_survivor() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let bias = Tensor::new(vec![1, 2], vec![0.0, f64::MASK_NEG]).unwrap();
        let out = tape.masked_softmax(x, &bias).unwrap();
        assert_eq!(tape.value(out), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_uniform_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::full(vec![1, 4], 3.7));
        let out = tape.masked_softmax(x, &Tensor::zeros(vec![1, 4])).unwrap();
        for &v in tape.value(out) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    /// Unstabilized exp/normalize in f64 over the unmasked set.
    fn softmax_oracle(logits: &[f64], masked: &[bool]) -> Vec<f64> {
        let denom: f64 = logits
            .iter()
            .zip(masked)
            .map(|(&l, &m)| if m { 0.0 } else { l.exp() })
            .sum();
        logits
            .iter()
            .zip(masked)
            .map(|(&l, &m)| if m { 0.0 } else { l.exp() / denom })
            .collect()
    }

    #[test]
    fn masked_softmax_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let rows = rng.random_range(1..5usize);
            let cols = rng.random_range(2..9usize);
            let x = rt(&mut rng, &[rows, cols]);
            let mut bias = vec![0.0f64; rows * cols];
            let mut masked = vec![false; rows * cols];
            for r in 0..rows {
                let keep = rng.random_range(0..cols);
                for c in 0..cols {
                    if c != keep && rng.random_bool(0.4) {
                        bias[r * cols + c] = f64::MASK_NEG;
                        masked[r * cols + c] = true;
                    }
                }
            }
            let bias = Tensor::new(vec![rows, cols], bias).unwrap();
            let mut tape = Tape::new();
            let xid = tape.constant(&x);
            let out = tape.masked_softmax(xid, &bias).unwrap();
            for r in 0..rows {
                let got = &tape.value(out)[r * cols..(r + 1) * cols];
                let want = softmax_oracle(
                    &x.data()[r * cols..(r + 1) * cols],
                    &masked[r * cols..(r + 1) * cols],
                );
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
                let sum: f64 = got.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for (j, &m) in masked[r * cols..(r + 1) * cols].iter().enumerate() {
                    if m {
                        assert_eq!(got[j], 0.0, "masked position must be exactly zero");
                    }
                }
            }
        }
    }

    #[test]
    fn masked_softmax_rejects_fully_masked_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(vec![2, 3]));
        let mut bias = vec![0.0; 6];
        for v in bias.iter_mut().skip(3) {
            *v = f64::MASK_NEG;
        }
        let bias = Tensor::new(vec![2, 3], bias).unwrap();
        assert!(matches!(
            tape.masked_softmax(x, &bias),
            Err(TensorError::FullyMaskedRow { row: 1 })
        ));
    }

    #[test]
    fn masked_softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rt(&mut rng, &[3, 5]);
        let w = rt(&mut rng, &[3, 5]);
        let mut bias = Tensor::zeros(vec![3, 5]).into_parts().1;
        bias[2] = f64::MASK_NEG;
        bias[9] = f64::MASK_NEG;
        let bias = Tensor::new(vec![3, 5], bias).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(&x0, true);
        let out = tape.masked_softmax(x, &bias).unwrap();
        let loss = weighted_loss(&mut tape, out, &w);
        tape.backward(loss).unwrap();

        let fd = fd_grad(&[x0], 0, FD_STEP, &mut |xs| {
            let mut t = Tape::new();
            let x = t.constant(&xs[0]);
            let out = t.masked_softmax(x, &bias).unwrap();
            let loss = weighted_loss(&mut t, out, &w);
            t.value(loss)[0]
        });
        assert!(rel_err(tape.grad(x).unwrap(), fd.data()) < 1e-6);
    }

    #[test]
    fn rms_norm_ones_stay_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::full(vec![1, 4], 1.0));
        let g = tape.constant(&Tensor::full(vec![1, 4], 1.0));
        let out = tape.rms_norm(x, g).unwrap();
        for &v in tape.value(out) {
            assert!((v - 1.0).abs() < 1e-6, "eps effect only: {v}");
        }
    }

    #[test]
    fn rms_norm_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rt(&mut rng, &[2, 6]);
        let gain = Tensor::full(vec![6], 1.0);
        let run = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let xi = t.constant(x);
            let gi = t.constant(&gain);
            let out = t.rms_norm(xi, gi).unwrap();
            t.value(out).to_vec()
        };
        let base = run(&x0);
        let scaled = run(&x0.map(|v| v * 37.5));
        for (a, b) in base.iter().zip(&scaled) {
            // Differences come only from the eps term shrinking relative
            // to the mean square, so they sit near eps itself.
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rms_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rt(&mut rng, &[3, 4]);
        let g0 = rt(&mut rng, &[4]);
        let w = rt(&mut rng, &[3, 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(&x0, true);
        let g = tape.leaf(&g0, true);
        let out = tape.rms_norm(x, g).unwrap();
        let loss = weighted_loss(&mut tape, out, &w);
        tape.backward(loss).unwrap();

        let inputs = [x0, g0];
        for (which, id) in [(0, x), (1, g)] {
            let fd = fd_grad(&inputs, which, FD_STEP, &mut |xs| {
                let mut t = Tape::new();
                let x = t.constant(&xs[0]);
                let g = t.constant(&xs[1]);
                let out = t.rms_norm(x, g).unwrap();
                let loss = weighted_loss(&mut t, out, &w);
                t.value(loss)[0]
            });
            assert!(rel_err(tape.grad(id).unwrap(), fd.data()) < 1e-5);
        }
    }

    #[test]
    fn linear_lora_zero_b_is_bitwise_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rt(&mut rng, &[3, 4]);
        let w0 = rt(&mut rng, &[4, 5]);
        let a0 = rt(&mut rng, &[4, 2]);
        let b0 = Tensor::<f64>::zeros(vec![2, 5]);

        let mut tape = Tape::new();
        let x = tape.constant(&x0);
        let w = tape.constant(&w0);
        let a = tape.constant(&a0);
        let b = tape.constant(&b0);
        let adapted = tape.linear_lora(x, w, a, b, 0.5).unwrap();
        let base = tape.matmul(x, w).unwrap();
        for (p, q) in tape.value(adapted).iter().zip(tape.value(base)) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn linear_lora_identity_delta_scales_input() {
        // W = 0 and A·B = I at full rank, so the output is scale·x.
        let d = 3;
        let mut tape = Tape::<f64>::new();
        let x0 = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, -1.0]).unwrap();
        let x = tape.constant(&x0);
        let w = tape.constant(&Tensor::zeros(vec![d, d]));
        let a = tape.constant(&Tensor::eye(d));
        let b = tape.constant(&Tensor::eye(d));
        let out = tape.linear_lora(x, w, a, b, 2.5).unwrap();
        for (o, i) in tape.value(out).iter().zip(x0.data()) {
            assert!((o - 2.5 * i).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_lora_matches_two_path_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let (m, din, r, dout) = (
                rng.random_range(1..4usize),
                rng.random_range(1..6usize),
                rng.random_range(1..4usize),
                rng.random_range(1..6usize),
            );
            let x = rt(&mut rng, &[m, din]);
            let w = rt(&mut rng, &[din, dout]);
            let a = rt(&mut rng, &[din, r]);
            let b = rt(&mut rng, &[r, dout]);
            let scale = 1.0 / r as f64;

            let mut tape = Tape::new();
            let xi = tape.constant(&x);
            let wi = tape.constant(&w);
            let ai = tape.constant(&a);
            let bi = tape.constant(&b);
            let got = tape.linear_lora(xi, wi, ai, bi, scale).unwrap();

            // Oracle materializes W + scale·A·B first, then applies x.
            let mut ab = vec![0.0; din * dout];
            matmul_nn(a.data(), b.data(), din, r, dout, &mut ab);
            let weff: Vec<f64> = w
                .data()
                .iter()
                .zip(&ab)
                .map(|(&wv, &d)| wv + scale * d)
                .collect();
            let mut want = vec![0.0; m * dout];
            matmul_nn(x.data(), &weff, m, din, dout, &mut want);
            for (g, w) in tape.value(got).iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_lora_frozen_base_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rt(&mut rng, &[2, 3]);
        let w0 = rt(&mut rng, &[3, 3]);
        let a0 = rt(&mut rng, &[3, 2]);
        let b0 = rt(&mut rng, &[2, 3]);
        let mut tape = Tape::new();
        let x = tape.constant(&x0);
        let w = tape.leaf(&w0, false); // frozen base
        let a = tape.leaf(&a0, true);
        let b = tape.leaf(&b0, true);
        let out = tape.linear_lora(x, w, a, b, 0.5).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none(), "frozen leaf must hold no grad");
        assert!(tape.grad(a).is_some());
        assert!(tape.grad(b).is_some());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x0 = Tensor::new(vec![2, 3], vec![5.0, -1.0, 2.0, 0.0, 3.5, 9.0]).unwrap();
        let x = tape.leaf(&x0, true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_half_square_gives_input() {
        let mut tape = Tape::<f64>::new();
        let x0 = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let x = tape.leaf(&x0, true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), x0.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn mse_basics() {
        let mut tape = Tape::<f64>::new();
        let x0 = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let x = tape.constant(&x0);
        let zero = tape.mse(x, &x0).unwrap();
        assert_eq!(tape.value(zero), &[0.0]);

        let p = tape.constant(&Tensor::new(vec![1], vec![2.0]).unwrap());
        let four = tape
            .mse(p, &Tensor::new(vec![1], vec![0.0]).unwrap())
            .unwrap();
        assert_eq!(tape.value(four), &[4.0]);
    }

    #[test]
    fn mse_gradient_is_two_over_n_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p0 = rt(&mut rng, &[2, 3]);
        let t0 = rt(&mut rng, &[2, 3]);
        let mut tape = Tape::new();
        let p = tape.leaf(&p0, true);
        let loss = tape.mse(p, &t0).unwrap();
        tape.backward(loss).unwrap();
        let fd = fd_grad(&[p0.clone()], 0, FD_STEP, &mut |xs| {
            let mut t = Tape::new();
            let p = t.constant(&xs[0]);
            let l = t.mse(p, &t0).unwrap();
            t.value(l)[0]
        });
        assert!(rel_err(tape.grad(p).unwrap(), fd.data()) < 1e-7);
        for (i, g) in tape.grad(p).unwrap().iter().enumerate() {
            let want = 2.0 * (p0.data()[i] - t0.data()[i]) / 6.0;
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rt(&mut rng, &[3, 3]);
        let w = rt(&mut rng, &[3, 3]);
        let mut tape = Tape::new();
        let x = tape.leaf(&x0, true);
        let out = tape.silu(x);
        let loss = weighted_loss(&mut tape, out, &w);
        tape.backward(loss).unwrap();
        let fd = fd_grad(&[x0], 0, FD_STEP, &mut |xs| {
            let mut t = Tape::new();
            let x = t.constant(&xs[0]);
            let out = t.silu(x);
            let loss = weighted_loss(&mut t, out, &w);
            t.value(loss)[0]
        });
        assert!(rel_err(tape.grad(x).unwrap(), fd.data()) < 1e-6);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![3, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn rope_preserves_pair_norms_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows = 3;
        let head_dim = 4;
        let x0 = rt(&mut rng, &[rows, 8]);
        let angles: Vec<f64> = (0..rows * 2).map(|i| 0.3 * i as f64).collect();
        let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
        let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
        let neg_sin: Vec<f64> = sin.iter().map(|s| -s).collect();

        let mut tape = Tape::new();
        let x = tape.constant(&x0);
        let fwd = tape.rope(x, head_dim, &cos, &sin).unwrap();
        let back = tape.rope(fwd, head_dim, &cos, &neg_sin).unwrap();
        for (a, b) in tape.value(back).iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = rt(&mut rng, &[2, 4]);
        let w = rt(&mut rng, &[2, 4]);
        let cos = vec![0.9, 0.5, 0.1, -0.4];
        let sin = vec![0.43, 0.86, 0.99, 0.91];
        let mut tape = Tape::new();
        let x = tape.leaf(&x0, true);
        let out = tape.rope(x, 4, &cos, &sin).unwrap();
        let loss = weighted_loss(&mut tape, out, &w);
        tape.backward(loss).unwrap();
        let fd = fd_grad(&[x0], 0, FD_STEP, &mut |xs| {
            let mut t = Tape::new();
            let x = t.constant(&xs[0]);
            let out = t.rope(x, 4, &cos, &sin).unwrap();
            let loss = weighted_loss(&mut t, out, &w);
            t.value(loss)[0]
        });
        assert!(rel_err(tape.grad(x).unwrap(), fd.data()) < 1e-6);
    }

    #[test]
    fn concat_slice_round_trip_with_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a0 = rt(&mut rng, &[2, 3]);
        let b0 = rt(&mut rng, &[4, 3]);
        let w = rt(&mut rng, &[2, 3]);

        let mut tape = Tape::new();
        let a = tape.leaf(&a0, true);
        let b = tape.leaf(&b0, true);
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape_of(cat), &[6, 3]);
        let back = tape.slice_rows(cat, 0, 2).unwrap();
        assert_eq!(tape.value(back), a0.data());

        let loss = weighted_loss(&mut tape, back, &w);
        tape.backward(loss).unwrap();
        // Only `a` is on the loss path once sliced back out.
        assert!(tape.grad(a).is_some());
        let gb = tape.grad(b).unwrap();
        assert!(gb.iter().all(|&v| v == 0.0));

        // Column round trip.
        let mut tape = Tape::new();
        let a = tape.leaf(&a0, true);
        let left = tape.slice_cols(a, 0, 1).unwrap();
        let right = tape.slice_cols(a, 1, 2).unwrap();
        let cat = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(cat), a0.data());
        let fd_w = rt(&mut rng, &[2, 3]);
        let loss = weighted_loss(&mut tape, cat, &fd_w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), fd_w.data());
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(x + x) so dloss/dx = 2 everywhere.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::full(vec![3], 1.5), true);
        let two_x = tape.add(x, x).unwrap();
        let loss = tape.sum(two_x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn add_row_and_mul_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x0 = rt(&mut rng, &[3, 4]);
        let v0 = rt(&mut rng, &[1, 4]);
        let w = rt(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let x = tape.leaf(&x0, true);
        let v = tape.leaf(&v0, true);
        let shifted = tape.add_row(x, v).unwrap();
        let scaled = tape.mul_row(shifted, v).unwrap();
        let loss = weighted_loss(&mut tape, scaled, &w);
        tape.backward(loss).unwrap();
        let inputs = [x0, v0];
        for (which, id) in [(0, x), (1, v)] {
            let fd = fd_grad(&inputs, which, FD_STEP, &mut |xs| {
                let mut t = Tape::new();
                let x = t.constant(&xs[0]);
                let v = t.constant(&xs[1]);
                let shifted = t.add_row(x, v).unwrap();
                let scaled = t.mul_row(shifted, v).unwrap();
                let loss = weighted_loss(&mut t, scaled, &w);
                t.value(loss)[0]
            });
            assert!(rel_err(tape.grad(id).unwrap(), fd.data()) < 1e-6);
        }
    }

    #[test]
    fn randomized_op_chains_pass_gradient_checks() {
        // Property over randomized shapes: a mixed chain of every
        // differentiable op matches central finite differences.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for trial in 0..25 {
            let rows = rng.random_range(1..5usize);
            let inner = rng.random_range(1..5usize) * 2; // rope needs even
            let x0 = rt(&mut rng, &[rows, inner]);
            let w0 = rt(&mut rng, &[inner, inner]);
            let gain0 = rt(&mut rng, &[inner]);
            let wsum = rt(&mut rng, &[rows, inner]);
            let cos: Vec<f64> = (0..rows * inner / 2).map(|i| (0.1 * i as f64).cos()).collect();
            let sin: Vec<f64> = (0..rows * inner / 2).map(|i| (0.1 * i as f64).sin()).collect();
            let mut bias = vec![0.0; rows * inner];
            if inner > 1 {
                for r in 0..rows {
                    bias[r * inner] = f64::MASK_NEG;
                }
            }
            let bias = Tensor::new(vec![rows, inner], bias).unwrap();

            let build = |t: &mut Tape<f64>, xs: &[Tensor<f64>]| -> ValueId {
                let x = t.constant(&xs[0]);
                let w = t.constant(&xs[1]);
                let gain = t.constant(&xs[2]);
                let h = t.matmul(x, w).unwrap();
                let h = t.silu(h);
                let h = t.rms_norm(h, gain).unwrap();
                let h = t.rope(h, inner, &cos, &sin).unwrap();
                let h = t.masked_softmax(h, &bias).unwrap();
                let wid = t.constant(&wsum);
                let p = t.mul(h, wid).unwrap();
                t.sum(p)
            };

            let inputs = [x0.clone(), w0.clone(), gain0.clone()];
            let mut tape = Tape::new();
            let x = tape.leaf(&x0, true);
            let w = tape.leaf(&w0, true);
            let gain = tape.leaf(&gain0, true);
            let h = tape.matmul(x, w).unwrap();
            let h = tape.silu(h);
            let h = tape.rms_norm(h, gain).unwrap();
            let h = tape.rope(h, inner, &cos, &sin).unwrap();
            let h = tape.masked_softmax(h, &bias).unwrap();
            let wid = tape.constant(&wsum);
            let p = tape.mul(h, wid).unwrap();
            let loss = tape.sum(p);
            tape.backward(loss).unwrap();

            for (which, id) in [(0, x), (1, w), (2, gain)] {
                let fd = fd_grad(&inputs, which, FD_STEP, &mut |xs| {
                    let mut t = Tape::new();
                    let loss = build(&mut t, xs);
                    t.value(loss)[0]
                });
                let e = rel_err(tape.grad(id).unwrap(), fd.data());
                assert!(e < 1e-4, "trial {trial} input {which}: rel err {e}");
            }
        }
    }
}
