//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Besides the
//! pointwise and matrix ops the tape has a few fused sequence ops (causal
//! convolution, selective scan, masked cross-entropy) with hand-written
//! adjoints.

use crate::error::{bail_invalid, bail_shape, Result};
use crate::mixers::{scan_with_states, InputDisc, MixerKind, ScanInputs};
use crate::tensor_core::{
    binary, broadcast_index, matmul_at_into, matmul_bt_into, matmul_into, softmax_cross_entropy,
    BinaryOp, Tensor, UnaryOp,
};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    AppendCol {
        x: NodeId,
    },
    Conv {
        x: NodeId,
        c: NodeId,
        bias: NodeId,
        seq_len: usize,
    },
    Scan(Box<ScanNode>),
    CrossEntropy {
        logits: NodeId,
        dlogits: Tensor,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct ScanNode {
    kind: MixerKind,
    lambda: NodeId,
    xhat: NodeId,
    delta: Option<NodeId>,
    b: NodeId,
    c: NodeId,
    seq_len: usize,
    states: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    param: bool,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            param: false,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            grad: None,
            param: true,
            requires_grad: true,
        });
        self.nodes.len() - 1
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            grad: None,
            param: false,
            requires_grad: false,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].grad.as_ref()
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id].param
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> NodeId {
        let v = crate::tensor_core::unary(op, &self.nodes[a].value);
        self.push(Op::Unary(op, a), v, &[a])
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = binary(op, &self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::Binary(op, a, b), v, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = crate::tensor_core::matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    /// `x[M,in] · w[out,in]ᵀ + b[out]`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
            bail_shape!("linear {:?} with weight {:?}", xv.shape(), wv.shape());
        }
        let (m, k, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = vec![0.0; m * o];
        if let Some(b) = b {
            let bv = self.nodes[b].value.data();
            if bv.len() != o {
                bail_shape!("bias length {} for {} outputs", bv.len(), o);
            }
            for r in 0..m {
                out[r * o..(r + 1) * o].copy_from_slice(bv);
            }
        }
        matmul_bt_into(xv.data(), wv.data(), &mut out, m, k, o);
        let v = Tensor::new(vec![m, o], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(Op::Linear { x, w, b }, v, &ins))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = &self.nodes[table].value;
        let (r, c) = (tv.shape()[0], tv.cols());
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                bail_invalid!("row {} outside table of {}", i, r);
            }
            out.extend_from_slice(tv.row(i));
        }
        let v = Tensor::new(vec![ids.len(), c], out)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            v,
            &[table],
        ))
    }

    /// Appends a constant column to a `[M, c]` matrix.
    pub fn append_col(&mut self, x: NodeId, col: &[f64]) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let (m, c) = (xv.shape()[0], xv.cols());
        if col.len() != m {
            bail_shape!("column of {} for {} rows", col.len(), m);
        }
        let mut out = Vec::with_capacity(m * (c + 1));
        for r in 0..m {
            out.extend_from_slice(xv.row(r));
            out.push(col[r]);
        }
        let v = Tensor::new(vec![m, c + 1], out)?;
        Ok(self.push(Op::AppendCol { x }, v, &[x]))
    }

    /// Causal depthwise convolution pre-activation over `[B*T, ch]` rows,
    /// `out_t = Σ_w c[w] ⊙ x_{t-W+1+w} - bias`, restarting every `seq_len` rows.
    pub fn conv(&mut self, x: NodeId, c: NodeId, bias: NodeId, seq_len: usize) -> Result<NodeId> {
        let (xv, cv, bv) = (
            &self.nodes[x].value,
            &self.nodes[c].value,
            &self.nodes[bias].value,
        );
        let ch = xv.cols();
        if cv.cols() != ch || bv.len() != ch || xv.rows() % seq_len != 0 {
            bail_shape!("conv operands do not agree");
        }
        let kernel = crate::mixers::ConvKernel {
            width: cv.shape()[0],
            c: cv.clone(),
            bias: bv.clone(),
            act: crate::mixers::Act::Identity,
        };
        let mut out = Vec::with_capacity(xv.len());
        for s in 0..xv.rows() / seq_len {
            out.extend(kernel.preact(
                &xv.data()[s * seq_len * ch..(s + 1) * seq_len * ch],
                seq_len,
            ));
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::Conv {
                x,
                c,
                bias,
                seq_len,
            },
            v,
            &[x, c, bias],
        ))
    }

    /// Selective scan over `[B*T, ·]` rows with Euler input discretization.
    /// `delta = None` means Δ ≡ 1 (s4d); s4d takes static `[N]` B and C.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &mut self,
        kind: MixerKind,
        lambda: NodeId,
        xhat: NodeId,
        delta: Option<NodeId>,
        b: NodeId,
        c: NodeId,
        seq_len: usize,
    ) -> Result<NodeId> {
        let xv = &self.nodes[xhat].value;
        let (rows, d) = (xv.rows(), xv.cols());
        if seq_len == 0 || rows % seq_len != 0 {
            bail_shape!("{} rows do not split into sequences of {}", rows, seq_len);
        }
        let n = self.nodes[b].value.cols();
        let static_bc = kind == MixerKind::S4d;
        let w = kind.delta_width(d, n);
        let mut y = Vec::with_capacity(rows * d);
        let mut states = Vec::with_capacity(rows * d * n);
        for s in 0..rows / seq_len {
            let r0 = s * seq_len;
            let bc = |id: NodeId| {
                let v = self.nodes[id].value.data();
                if static_bc {
                    v
                } else {
                    &v[r0 * n..(r0 + seq_len) * n]
                }
            };
            let inp = ScanInputs {
                kind,
                d,
                n,
                t: seq_len,
                lambda: self.nodes[lambda].value.data(),
                xhat: &xv.data()[r0 * d..(r0 + seq_len) * d],
                delta: delta.map(|id| &self.nodes[id].value.data()[r0 * w..(r0 + seq_len) * w]),
                b: bc(b),
                c: bc(c),
                static_bc,
                disc: InputDisc::Euler,
            };
            inp.validate()?;
            let (ys, hs) = scan_with_states(&inp);
            y.extend(ys);
            states.extend(hs);
        }
        let v = Tensor::new(vec![rows, d], y)?;
        let mut ins = vec![lambda, xhat, b, c];
        ins.extend(delta);
        let node = ScanNode {
            kind,
            lambda,
            xhat,
            delta,
            b,
            c,
            seq_len,
            states,
        };
        Ok(self.push(Op::Scan(Box::new(node)), v, &ins))
    }

    /// Sum of all entries, a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[a].value.data().iter().sum());
        self.push(Op::Sum(a), v, &[a])
    }

    /// Mean masked softmax cross-entropy, a scalar node.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (loss, dlogits) = softmax_cross_entropy(&self.nodes[logits].value, targets, mask)?;
        Ok(self.push(
            Op::CrossEntropy { logits, dlogits },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`; fills gradients of every node that
    /// depends on a parameter.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].value.is_scalar() {
            bail_shape!(
                "loss must be a scalar, got {:?}",
                self.nodes[loss].value.shape()
            );
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let shape = self.nodes[loss].value.shape().to_vec();
        self.nodes[loss].grad = Some(Tensor::full(&shape, 1.0));
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contribs = self.adjoint(id, &g)?;
            self.nodes[id].grad = Some(g);
            for (target, t) in contribs {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut self.nodes[target].grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        for node in &mut self.nodes {
            if !node.param && matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        Ok(())
    }

    fn adjoint(&self, id: NodeId, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |i: NodeId| &self.nodes[i].value;
        let need = |i: NodeId| self.nodes[i].requires_grad;
        let mut out = Vec::new();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = val(*a).data();
                let y = self.nodes[id].value.data();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x)
                    .zip(y)
                    .map(|((&gv, &xv), &yv)| gv * op.derivative(xv, yv))
                    .collect();
                out.push((*a, Tensor::new(val(*a).shape().to_vec(), d)?));
            }
            Op::Binary(op, a, b) => {
                let oshape = self.nodes[id].value.shape();
                let (av, bv) = (val(*a), val(*b));
                let ia = broadcast_index(av.shape(), oshape);
                let ib = broadcast_index(bv.shape(), oshape);
                if need(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for (p, &gv) in g.data().iter().enumerate() {
                        ga[ia[p]] += match op {
                            BinaryOp::Add | BinaryOp::Sub => gv,
                            BinaryOp::Mul => gv * bv.data()[ib[p]],
                        };
                    }
                    out.push((*a, Tensor::new(av.shape().to_vec(), ga)?));
                }
                if need(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for (p, &gv) in g.data().iter().enumerate() {
                        gb[ib[p]] += match op {
                            BinaryOp::Add => gv,
                            BinaryOp::Sub => -gv,
                            BinaryOp::Mul => gv * av.data()[ia[p]],
                        };
                    }
                    out.push((*b, Tensor::new(bv.shape().to_vec(), gb)?));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if need(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g.data(), bv.data(), &mut ga, m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], ga)?));
                }
                if need(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(av.data(), g.data(), &mut gb, m, k, n);
                    out.push((*b, Tensor::new(vec![k, n], gb)?));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, k, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if need(*x) {
                    let mut gx = vec![0.0; m * k];
                    matmul_into(g.data(), wv.data(), &mut gx, m, o, k);
                    out.push((*x, Tensor::new(vec![m, k], gx)?));
                }
                if need(*w) {
                    let mut gw = vec![0.0; o * k];
                    matmul_at_into(g.data(), xv.data(), &mut gw, m, o, k);
                    out.push((*w, Tensor::new(vec![o, k], gw)?));
                }
                if let Some(b) = b {
                    if need(*b) {
                        let mut gb = vec![0.0; o];
                        for r in 0..m {
                            for (acc, &gv) in gb.iter_mut().zip(&g.data()[r * o..(r + 1) * o]) {
                                *acc += gv;
                            }
                        }
                        out.push((*b, Tensor::new(val(*b).shape().to_vec(), gb)?));
                    }
                }
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let c = tv.cols();
                let mut gt = vec![0.0; tv.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for (acc, &gv) in gt[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g.data()[r * c..(r + 1) * c])
                    {
                        *acc += gv;
                    }
                }
                out.push((*table, Tensor::new(tv.shape().to_vec(), gt)?));
            }
            Op::AppendCol { x } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut gx = Vec::with_capacity(xv.len());
                for r in 0..xv.rows() {
                    gx.extend_from_slice(&g.data()[r * (c + 1)..r * (c + 1) + c]);
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
            }
            Op::Conv {
                x,
                c,
                bias,
                seq_len,
            } => {
                let (xv, cv) = (val(*x), val(*c));
                let ch = xv.cols();
                let width = cv.shape()[0];
                let mut gx = vec![0.0; xv.len()];
                let mut gc = vec![0.0; cv.len()];
                let mut gb = vec![0.0; ch];
                let gd = g.data();
                for row in 0..xv.rows() {
                    let t = row % seq_len;
                    let grow = &gd[row * ch..(row + 1) * ch];
                    for (acc, &gv) in gb.iter_mut().zip(grow) {
                        *acc -= gv;
                    }
                    for w in 0..width {
                        let lag = width - 1 - w;
                        if lag > t {
                            continue;
                        }
                        let src = row - lag;
                        for j in 0..ch {
                            gx[src * ch + j] += grow[j] * cv.data()[w * ch + j];
                            gc[w * ch + j] += grow[j] * xv.data()[src * ch + j];
                        }
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
                out.push((*c, Tensor::new(cv.shape().to_vec(), gc)?));
                out.push((*bias, Tensor::new(val(*bias).shape().to_vec(), gb)?));
            }
            Op::Scan(node) => out.extend(self.scan_adjoint(node, g)?),
            Op::CrossEntropy { logits, dlogits } => {
                let s = g.data()[0];
                out.push((*logits, dlogits.map(|v| v * s)));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), g.data()[0]))),
        }
        Ok(out)
    }

    fn scan_adjoint(&self, sn: &ScanNode, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |i: NodeId| &self.nodes[i].value;
        let kind = sn.kind;
        let (xv, lam) = (val(sn.xhat), val(sn.lambda));
        let (rows, d) = (xv.rows(), xv.cols());
        let bval = val(sn.b);
        let cval = val(sn.c);
        let n = bval.cols();
        let tl = sn.seq_len;
        let static_bc = kind == MixerKind::S4d;
        let w = kind.delta_width(d, n);
        let mut gx = vec![0.0; rows * d];
        let mut glam = vec![0.0; lam.len()];
        let mut gdelta = vec![0.0; if sn.delta.is_some() { rows * w } else { 0 }];
        let mut gb = vec![0.0; bval.len()];
        let mut gc = vec![0.0; cval.len()];
        let mut gh = vec![0.0; d * n];
        let lamd = lam.data();
        let dn = d * n;
        for s in 0..rows / tl {
            gh.fill(0.0);
            for t in (0..tl).rev() {
                let row = s * tl + t;
                let h = &sn.states[row * dn..(row + 1) * dn];
                let hprev = if t > 0 {
                    Some(&sn.states[(row - 1) * dn..row * dn])
                } else {
                    None
                };
                let bc_off = if static_bc { 0 } else { row * n };
                for i in 0..d {
                    let dy = g.data()[row * d + i];
                    let x = xv.data()[row * d + i];
                    for k in 0..n {
                        let li = if kind == MixerKind::Mamba2 {
                            0
                        } else {
                            i * n + k
                        };
                        let di = match kind {
                            MixerKind::S4d | MixerKind::Mamba => row * d + i,
                            MixerKind::Mamba2 => row,
                            MixerKind::MambaDt => row * n + k,
                        };
                        let dl = sn.delta.map_or(1.0, |id| val(id).data()[di]);
                        let cv = cval.data()[bc_off + k];
                        let bv = bval.data()[bc_off + k];
                        let hk = h[i * n + k];
                        let grad_h = gh[i * n + k] + dy * cv;
                        gc[bc_off + k] += dy * hk;
                        let a = (-lamd[li] * dl).exp();
                        if let Some(hp) = hprev {
                            let dz = -grad_h * hp[i * n + k] * a;
                            glam[li] += dz * dl;
                            if sn.delta.is_some() {
                                gdelta[di] += dz * lamd[li];
                            }
                        }
                        let coef = if kind == MixerKind::MambaDt { 1.0 } else { dl };
                        gx[row * d + i] += grad_h * coef * bv;
                        gb[bc_off + k] += grad_h * coef * x;
                        if kind != MixerKind::MambaDt && sn.delta.is_some() {
                            gdelta[di] += grad_h * x * bv;
                        }
                        gh[i * n + k] = grad_h * a;
                    }
                }
            }
        }
        let mut out = vec![
            (sn.xhat, Tensor::new(xv.shape().to_vec(), gx)?),
            (sn.lambda, Tensor::new(lam.shape().to_vec(), glam)?),
            (sn.b, Tensor::new(bval.shape().to_vec(), gb)?),
            (sn.c, Tensor::new(cval.shape().to_vec(), gc)?),
        ];
        if let Some(id) = sn.delta {
            out.push((id, Tensor::new(val(id).shape().to_vec(), gdelta)?));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_softplus_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.unary(UnaryOp::Softplus, x);
        g.backward(y).unwrap();
        assert!((g.grad(x).unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.input(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0]);
        assert!(g.grad(c).is_none());
    }
}
