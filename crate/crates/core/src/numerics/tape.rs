//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes only reference earlier nodes, so the
//! tape is acyclic by construction and a single reverse sweep visits each
//! node exactly once.

use std::cell::{Cell, Ref, RefCell};
use std::f64::consts::PI;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat(Vec<usize>),
    Slice {
        src: usize,
        start: usize,
    },
    Gather {
        src: usize,
        idx: Vec<usize>,
    },
    Transpose(usize),
    MaskRows {
        src: usize,
        keep: Vec<bool>,
    },
    Sum(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        scale: f64,
        // per head, S×S row-major; disallowed entries are exactly zero
        probs: Vec<Vec<f64>>,
        allowed: Vec<bool>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat(..) => "concat_rows",
            Op::Slice { .. } => "slice_rows",
            Op::Gather { .. } => "gather_rows",
            Op::Transpose(..) => "transpose",
            Op::MaskRows { .. } => "mask_rows",
            Op::Sum(..) => "sum",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy_masked",
        }
    }
}

/// Linear record of tensor operations supporting one backward sweep.
///
/// A tape is single-threaded; use one tape per forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    single_precision: bool,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op.kind())
            .field("shape", &node.value.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            single_precision: false,
            backward_done: Cell::new(false),
        }
    }

    /// Tape whose every recorded value is rounded to `f32`.
    pub fn single_precision() -> Self {
        Self {
            single_precision: true,
            ..Self::new()
        }
    }

    pub fn is_single_precision(&self) -> bool {
        self.single_precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        if self.single_precision {
            value.round_to_f32();
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gradient of the last `backward` call with respect to `var`.
    ///
    /// `None` when the var does not require grad or the loss does not
    /// depend on it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    /// Attention probabilities saved by an attention node, one `S×S`
    /// row-major matrix per head.
    pub fn attention_probs(&self, var: Var<'_>) -> Option<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        match &nodes[var.id].op {
            Op::Attention { probs, .. } => {
                let s = nodes[var.id].value.rows();
                Some(
                    probs
                        .iter()
                        .map(|p| Tensor::new(vec![s, s], p.clone()).expect("square probs"))
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Propagates gradients from the scalar `loss` back to every node that
    /// requires grad.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::Tape(
                "backward called twice on the same tape; re-run the forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.backward_done.set(true);

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], id: usize) -> Option<&'g mut Tensor> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape())))
}

fn add_into(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(da) = slot(grads, nodes, a) {
                gemm(m, n, k, g.data(), false, bv.data(), true, da.data_mut(), true);
            }
            if let Some(db) = slot(grads, nodes, b) {
                gemm(k, m, n, av.data(), true, g.data(), false, db.data_mut(), true);
            }
        }
        &Op::Add(a, b) => {
            for p in [a, b] {
                if let Some(dp) = slot(grads, nodes, p) {
                    add_into(dp, g.data());
                }
            }
        }
        &Op::AddRow(a, b) => {
            if let Some(da) = slot(grads, nodes, a) {
                add_into(da, g.data());
            }
            if let Some(db) = slot(grads, nodes, b) {
                let n = g.cols();
                let dbd = db.data_mut();
                for row in g.data().chunks(n) {
                    for (d, v) in dbd.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(da) = slot(grads, nodes, a) {
                for ((d, gv), bb) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *d += gv * bb;
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for ((d, gv), aa) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += gv * aa;
                }
            }
        }
        &Op::Scale(a, s) => {
            if let Some(da) = slot(grads, nodes, a) {
                for (d, gv) in da.data_mut().iter_mut().zip(g.data()) {
                    *d += gv * s;
                }
            }
        }
        &Op::Gelu(a) => {
            let av = &nodes[a].value;
            if let Some(da) = slot(grads, nodes, a) {
                for ((d, gv), x) in da.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += gv * gelu_grad(*x);
                }
            }
        }
        &Op::Softmax(a) => {
            if let Some(da) = slot(grads, nodes, a) {
                let n = out.cols();
                for ((drow, grow), yrow) in da
                    .data_mut()
                    .chunks_mut(n)
                    .zip(g.data().chunks(n))
                    .zip(out.data().chunks(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gv - dot);
                    }
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
            let d = out.cols();
            let gv = nodes[*gain].value.data();
            if let Some(dg) = slot(grads, nodes, *gain) {
                let dgd = dg.data_mut();
                for (grow, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                    for ((acc, gg), h) in dgd.iter_mut().zip(grow).zip(hrow) {
                        *acc += gg * h;
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                let dbd = db.data_mut();
                for grow in g.data().chunks(d) {
                    for (acc, gg) in dbd.iter_mut().zip(grow) {
                        *acc += gg;
                    }
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                for (r, (dxrow, (grow, hrow))) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(g.data().chunks(d).zip(xhat.chunks(d)))
                    .enumerate()
                {
                    let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h =
                        dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((acc, dhv), h) in dxrow.iter_mut().zip(&dh).zip(hrow) {
                        *acc += rstd[r] * (dhv - mean_dh - h * mean_dh_h);
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let n = out.cols();
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.rows() * n;
                if let Some(dp) = slot(grads, nodes, p) {
                    add_into(dp, &g.data()[offset..offset + len]);
                }
                offset += len;
            }
        }
        &Op::Slice { src, start } => {
            let n = out.cols();
            if let Some(ds) = slot(grads, nodes, src) {
                let dst = &mut ds.data_mut()[start * n..start * n + g.numel()];
                for (d, gv) in dst.iter_mut().zip(g.data()) {
                    *d += gv;
                }
            }
        }
        Op::Gather { src, idx } => {
            let n = out.cols();
            if let Some(ds) = slot(grads, nodes, *src) {
                let dsd = ds.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (d, gv) in dsd[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
            }
        }
        &Op::Transpose(a) => {
            if let Some(da) = slot(grads, nodes, a) {
                let gt = g.transpose();
                add_into(da, gt.data());
            }
        }
        Op::MaskRows { src, keep } => {
            let n = out.cols();
            if let Some(ds) = slot(grads, nodes, *src) {
                for (r, (drow, grow)) in ds
                    .data_mut()
                    .chunks_mut(n)
                    .zip(g.data().chunks(n))
                    .enumerate()
                {
                    if keep[r] {
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
        }
        &Op::Sum(a) => {
            let gv = g.item();
            if let Some(da) = slot(grads, nodes, a) {
                da.data_mut().iter_mut().for_each(|d| *d += gv);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            scale,
            probs,
            allowed,
        } => attention_backward(
            nodes, grads, g, *q, *k, *v, *heads, *scale, probs, allowed,
        ),
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let gv = g.item() / *count as f64;
            let vsz = nodes[*logits].value.cols();
            if let Some(dl) = slot(grads, nodes, *logits) {
                for (t, drow) in dl.data_mut().chunks_mut(vsz).enumerate() {
                    if !mask[t] {
                        continue;
                    }
                    let prow = &probs[t * vsz..(t + 1) * vsz];
                    for (j, (d, p)) in drow.iter_mut().zip(prow).enumerate() {
                        let onehot = if j == targets[t] { 1.0 } else { 0.0 };
                        *d += gv * (p - onehot);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    scale: f64,
    probs: &[Vec<f64>],
    allowed: &[bool],
) {
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let s = qv.rows();
    let d = qv.cols();
    let dh = d / heads;
    let mut dq = vec![0.0; s * d];
    let mut dk = vec![0.0; s * d];
    let mut dv = vec![0.0; s * d];
    let mut dp = vec![0.0; s];
    for (h, p) in probs.iter().enumerate() {
        let off = h * dh;
        for i in 0..s {
            let gi = &g.data()[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..s {
                dp[j] = 0.0;
                if !allowed[i * s + j] {
                    continue;
                }
                let pij = p[i * s + j];
                let vj = &vv.data()[j * d + off..j * d + off + dh];
                let mut acc = 0.0;
                for c in 0..dh {
                    acc += gi[c] * vj[c];
                    dv[j * d + off + c] += pij * gi[c];
                }
                dp[j] = acc;
                dot += pij * acc;
            }
            for j in 0..s {
                if !allowed[i * s + j] {
                    continue;
                }
                let ds = p[i * s + j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += ds * kv.data()[j * d + off + c];
                    dk[j * d + off + c] += ds * qv.data()[i * d + off + c];
                }
            }
        }
    }
    for (p, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(dst) = slot(grads, nodes, p) {
            add_into(dst, &buf);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.value_ref(self.id).rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.value_ref(self.id).cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'t> {
        let rg = self.tape.requires(parents);
        self.tape.push(value, op, rg)
    }

    /// Matrix product `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(dim_err("matmul", &a, &b));
            }
            a.matmul(&b)?
        };
        Ok(self.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.shape() != b.shape() {
                return Err(dim_err("add", &a, &b));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.record(value, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row);
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(row.id);
            if b.numel() != a.cols() {
                return Err(dim_err("add_row", &a, &b));
            }
            let mut out = a.clone();
            let n = a.cols();
            for r in out.data_mut().chunks_mut(n) {
                for (x, y) in r.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            out
        };
        Ok(self.record(value, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.shape() != b.shape() {
                return Err(dim_err("mul", &a, &b));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.record(value, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let value = self.tape.value_ref(self.id).map(|v| v * s);
        self.record(value, Op::Scale(self.id, s), &[self.id])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        let value = self.tape.value_ref(self.id).map(gelu);
        self.record(value, Op::Gelu(self.id), &[self.id])
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&self) -> Var<'t> {
        let value = {
            let a = self.tape.value_ref(self.id);
            let mut out = a.clone();
            let n = a.cols();
            for row in out.data_mut().chunks_mut(n) {
                softmax_in_place(row);
            }
            out
        };
        self.record(value, Op::Softmax(self.id), &[self.id])
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine `gain`/`bias` over the trailing dimension.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        if eps <= 0.0 {
            return Err(Error::InvalidTensor(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (value, xhat, rstd) = {
            let x = self.tape.value_ref(self.id);
            let gv = self.tape.value_ref(gain.id);
            let bv = self.tape.value_ref(bias.id);
            let d = x.cols();
            if gv.numel() != d {
                return Err(dim_err("layer_norm gain", &x, &gv));
            }
            if bv.numel() != d {
                return Err(dim_err("layer_norm bias", &x, &bv));
            }
            let mut out = x.clone();
            let mut xhat = vec![0.0; x.numel()];
            let mut rstd = Vec::with_capacity(x.rows());
            for (r, row) in x.data().chunks(d).enumerate() {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd.push(rs);
                for c in 0..d {
                    let h = (row[c] - mean) * rs;
                    xhat[r * d + c] = h;
                    out.data_mut()[r * d + c] = h * gv.data()[c] + bv.data()[c];
                }
            }
            (out, xhat, rstd)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            rstd,
        };
        Ok(self.record(value, op, &[self.id, gain.id, bias.id]))
    }

    pub fn transpose(&self) -> Var<'t> {
        let value = self.tape.value_ref(self.id).transpose();
        self.record(value, Op::Transpose(self.id), &[self.id])
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_ref(self.id);
            if start > end || end > a.rows() {
                return Err(Error::Index {
                    op: "slice_rows",
                    index: end,
                    size: a.rows(),
                });
            }
            let n = a.cols();
            Tensor::new(vec![end - start, n], a.data()[start * n..end * n].to_vec())?
        };
        Ok(self.record(value, Op::Slice { src: self.id, start }, &[self.id]))
    }

    /// Rows at `idx`, in that order (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_ref(self.id);
            let n = a.cols();
            let mut data = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                if i >= a.rows() {
                    return Err(Error::Index {
                        op: "gather_rows",
                        index: i,
                        size: a.rows(),
                    });
                }
                data.extend_from_slice(a.row(i));
            }
            Tensor::new(vec![idx.len(), n], data)?
        };
        let op = Op::Gather {
            src: self.id,
            idx: idx.to_vec(),
        };
        Ok(self.record(value, op, &[self.id]))
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&self, keep: &[bool]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_ref(self.id);
            if keep.len() != a.rows() {
                return Err(Error::Dimension {
                    op: "mask_rows",
                    left: a.shape().to_vec(),
                    right: vec![keep.len()],
                });
            }
            let mut out = a.clone();
            let n = a.cols();
            for (row, &k) in out.data_mut().chunks_mut(n).zip(keep) {
                if !k {
                    row.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            out
        };
        let op = Op::MaskRows {
            src: self.id,
            keep: keep.to_vec(),
        };
        Ok(self.record(value, op, &[self.id]))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.tape.value_ref(self.id).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `self` (`T×V` logits), over positions where `mask` is true.
    ///
    /// An empty mask yields 0 and logs a warning.
    pub fn cross_entropy_masked(&self, targets: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let (loss, probs, count) = {
            let logits = self.tape.value_ref(self.id);
            let (t, v) = (logits.rows(), logits.cols());
            if targets.len() != t || mask.len() != t {
                return Err(Error::Dimension {
                    op: "cross_entropy_masked",
                    left: logits.shape().to_vec(),
                    right: vec![targets.len(), mask.len()],
                });
            }
            let mut probs = vec![0.0; t * v];
            let mut total = 0.0;
            let mut count = 0;
            for pos in 0..t {
                if !mask[pos] {
                    continue;
                }
                let target = targets[pos];
                if target >= v {
                    return Err(Error::Index {
                        op: "cross_entropy_masked",
                        index: target,
                        size: v,
                    });
                }
                let row = logits.row(pos);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[target];
                for (p, x) in probs[pos * v..(pos + 1) * v].iter_mut().zip(row) {
                    *p = (x - lse).exp();
                }
                count += 1;
            }
            if count == 0 {
                log::warn!("cross_entropy_masked: empty mask, loss is 0");
                (0.0, probs, 0)
            } else {
                (total / count as f64, probs, count)
            }
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(self.record(Tensor::scalar(loss), op, &[self.id]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `self`, `k`, `v` are `S×d` with `d = heads·d_head`; head `h` uses
    /// columns `h·d_head..(h+1)·d_head`. A key `j` is visible to query `i`
    /// when `key_mask[j]` holds and, if `causal`, `j ≤ i`. Invisible keys
    /// get probability exactly 0 and take no part in the normalization.
    pub fn attention(
        &self,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var<'t>> {
        self.same_tape(&k);
        self.same_tape(&v);
        let (value, probs, allowed, scale) = {
            let qv = self.tape.value_ref(self.id);
            let kv = self.tape.value_ref(k.id);
            let vv = self.tape.value_ref(v.id);
            if qv.shape() != kv.shape() {
                return Err(dim_err("attention q/k", &qv, &kv));
            }
            if qv.shape() != vv.shape() {
                return Err(dim_err("attention q/v", &qv, &vv));
            }
            let (s, d) = (qv.rows(), qv.cols());
            if heads == 0 || d % heads != 0 {
                return Err(Error::InvalidTensor(format!(
                    "width {d} not divisible by {heads} heads"
                )));
            }
            if let Some(m) = key_mask {
                if m.len() != s {
                    return Err(Error::Dimension {
                        op: "attention key_mask",
                        left: qv.shape().to_vec(),
                        right: vec![m.len()],
                    });
                }
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut allowed = vec![false; s * s];
            for i in 0..s {
                for j in 0..s {
                    allowed[i * s + j] =
                        key_mask.is_none_or(|m| m[j]) && (!causal || j <= i);
                }
            }
            let mut out = vec![0.0; s * d];
            let mut probs = Vec::with_capacity(heads);
            let mut scores = vec![0.0; s];
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; s * s];
                for i in 0..s {
                    let qi = &qv.data()[i * d + off..i * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..s {
                        if !allowed[i * s + j] {
                            continue;
                        }
                        let kj = &kv.data()[j * d + off..j * d + off + dh];
                        let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[j] = sc;
                        max = max.max(sc);
                    }
                    let mut denom = 0.0;
                    for j in 0..s {
                        if allowed[i * s + j] {
                            let e = (scores[j] - max).exp();
                            p[i * s + j] = e;
                            denom += e;
                        }
                    }
                    if denom == 0.0 {
                        continue;
                    }
                    let oi = &mut out[i * d + off..i * d + off + dh];
                    for j in 0..s {
                        if !allowed[i * s + j] {
                            continue;
                        }
                        let pij = p[i * s + j] / denom;
                        p[i * s + j] = pij;
                        let vj = &vv.data()[j * d + off..j * d + off + dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(p);
            }
            (Tensor::new(vec![s, d], out)?, probs, allowed, scale)
        };
        let op = Op::Attention {
            q: self.id,
            k: k.id,
            v: v.id,
            heads,
            scale,
            probs,
            allowed,
        };
        Ok(self.record(value, op, &[self.id, k.id, v.id]))
    }
}

/// Concatenates matrices along rows; all parts need the same column count.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyInput("concat_rows of no parts".into()))?;
    let tape = first.tape;
    let value = {
        let n = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_tape(p);
            let v = tape.value_ref(p.id);
            if v.cols() != n {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: vec![rows, n],
                    right: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        Tensor::new(vec![rows, n], data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(first.record(value, Op::Concat(ids.clone()), &ids))
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = x.mul(x).unwrap().sum();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x.scale(2.0)).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = x.mul(c).unwrap().sum();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn shared_parent_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![3.0]));
        // x*x + x → 2x + 1
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn single_precision_rounds_values() {
        let tape = Tape::single_precision();
        let x = tape.constant(Tensor::scalar(0.1));
        assert_eq!(x.value().item(), 0.1f32 as f64);
    }

    #[test]
    fn masked_keys_get_zero_probability() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap());
        let out = q.attention(q, q, 1, Some(&[true, false, true]), false).unwrap();
        let probs = tape.attention_probs(out).unwrap();
        for i in 0..3 {
            assert_eq!(probs[0].row(i)[1], 0.0);
            let s: f64 = probs[0].row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_attention_first_row_copies_first_value() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let out = q.attention(q, q, 2, None, true).unwrap().value();
        assert_eq!(out.row(0), &[1.0, 2.0]);
    }
}
