use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, gemm, inverse_permutation, split_at_axis};
use super::ops::{batch_offsets, broadcast_batch, concat_values, narrow_values};
use super::{check_finite, Result, Scalar, Tensor, TensorError};

/// Variance epsilon used by every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<F> {
    Leaf,
    /// `b` is broadcast over the leading axes of `a`.
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: F },
    Relu { a: usize },
    MatMul { a: usize, b: usize, trans_b: bool },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<F>, inv_std: Vec<F> },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    Repeat { a: usize, axis: usize, times: usize },
    SumAxis { a: usize, axis: usize },
    Sum { a: usize },
    Gather { table: usize, ids: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, row_scale: Vec<F>, probs: Vec<F>, smoothing: F },
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Node inputs always precede the
/// node itself, so a reverse sweep is a valid topological order.
///
/// A tape is confined to one thread; build one per sequence or per step.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_node(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation (masks, cached activations).
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<F>, op: Op<F>, inputs: &[usize]) -> Result<Var<'_, F>> {
        check_finite(op_name, &data)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_node(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn owns(&self, v: Var<'_, F>) -> bool {
        std::ptr::eq(v.tape, self) && v.id < self.len()
    }

    /// Rows of `table` selected by `ids`: `[V, e]` → `[ids.len(), e]`.
    pub fn gather<'t>(&'t self, table: Var<'t, F>, ids: &[usize]) -> Result<Var<'t, F>> {
        let t = table.value_ref();
        if t.rank() != 2 {
            return Err(TensorError::Invalid(format!(
                "gather expects a [rows, width] table, got {:?}",
                t.shape()
            )));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, rows });
            }
            data.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
        }
        self.push(
            "gather",
            vec![ids.len(), width],
            data,
            Op::Gather {
                table: table.id,
                ids: ids.to_vec(),
            },
            &[table.id],
        )
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let values: Vec<Rc<Tensor<F>>> = parts.iter().map(|p| p.value_ref()).collect();
        let (shape, data) = concat_values(values.iter().map(|v| (v.shape(), v.data())), axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(
            "concat",
            shape,
            data,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Summed token cross-entropy of `logits [N, V]` against `targets`,
    /// with each row weighted by `row_scale` (zero for padding). With
    /// `smoothing` ε the target distribution is `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy<'t>(
        &'t self,
        logits: Var<'t, F>,
        targets: &[usize],
        row_scale: &[F],
        smoothing: F,
    ) -> Result<Var<'t, F>> {
        let lv = logits.value_ref();
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || row_scale.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, v) = (lv.shape()[0], lv.shape()[1]);
        if v == 0 {
            return Err(TensorError::EmptyAxis { op: "cross_entropy" });
        }
        let probs = kernels::softmax_forward(lv.data(), lv.shape(), 1);
        let x = lv.data();
        let vf = F::from_usize(v).unwrap();
        let mut total = F::zero();
        for r in 0..n {
            if row_scale[r] == F::zero() {
                continue;
            }
            let gold = targets[r];
            if gold >= v {
                return Err(TensorError::IndexOutOfRange { index: gold, rows: v });
            }
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
            let nll = lse - row[gold];
            let mut loss = (F::one() - smoothing) * nll;
            if smoothing > F::zero() {
                let mean_nll = row.iter().map(|&z| lse - z).sum::<F>() / vf;
                loss += smoothing * mean_nll;
            }
            total += row_scale[r] * loss;
        }
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![total],
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                row_scale: row_scale.to_vec(),
                probs,
                smoothing,
            },
            &[logits.id],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if !self.owns(loss) {
            return Err(TensorError::Invalid("loss does not belong to this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![F::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                backprop_node(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let mut out = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.iter().zip(grads) {
            out.push(match g {
                Some(g) if node.requires_grad => {
                    check_finite("backward", &g)?;
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            });
        }
        Ok(Gradients { grads: out })
    }

    /// Gradients of `loss` with respect to named differentiable leaves.
    /// Leaves the loss does not depend on get a zero gradient.
    pub fn grad(&self, loss: Var<'_, F>, params: &[(&str, Var<'_, F>)]) -> Result<Vec<Tensor<F>>> {
        for (name, p) in params {
            let ok = self.owns(*p) && {
                let nodes = self.nodes.borrow();
                nodes[p.id].requires_grad && matches!(nodes[p.id].op, Op::Leaf)
            };
            if !ok {
                return Err(TensorError::NotOnTape {
                    name: (*name).to_string(),
                });
            }
        }
        let grads = self.backward(loss)?;
        Ok(params.iter().map(|(_, p)| grads.wrt(*p)).collect())
    }
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when the loss does not reach it.
    pub fn wrt(&self, v: Var<'_, F>) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

fn grad_buf<'g, F: Scalar>(nodes: &[Node<F>], grads: &'g mut [Option<Vec<F>>], id: usize) -> Option<&'g mut Vec<F>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![F::zero(); len]))
}

fn backprop_node<F: Scalar>(nodes: &[Node<F>], id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(db) = grad_buf(nodes, grads, *b) {
                let n = db.len().max(1);
                for chunk in g.chunks_exact(n) {
                    db.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv.data()) {
                    *d += x * y;
                }
            }
            if let Some(db) = grad_buf(nodes, grads, *b) {
                for ((d, &x), &y) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += x * y;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c);
            }
        }
        Op::Relu { a } => {
            let av = &nodes[*a].value;
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for ((d, &x), &v) in da.iter_mut().zip(g).zip(av.data()) {
                    if v > F::zero() {
                        *d += x;
                    }
                }
            }
        }
        Op::MatMul { a, b, trans_b } => matmul_backward(nodes, grads, g, *a, *b, *trans_b),
        Op::Softmax { a, axis } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                kernels::softmax_backward(node.value.data(), g, node.value.shape(), *axis, da);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let e = nodes[*gain].value.len();
            let gv = nodes[*gain].value.data().to_vec();
            let rows = xhat.len() / e.max(1);
            let ef = F::from_usize(e).unwrap();
            if let Some(dg) = grad_buf(nodes, grads, *gain) {
                for r in 0..rows {
                    for i in 0..e {
                        dg[i] += g[r * e + i] * xhat[r * e + i];
                    }
                }
            }
            if let Some(db) = grad_buf(nodes, grads, *bias) {
                for r in 0..rows {
                    for i in 0..e {
                        db[i] += g[r * e + i];
                    }
                }
            }
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for r in 0..rows {
                    let row = r * e..(r + 1) * e;
                    let mut sum_d = F::zero();
                    let mut sum_dx = F::zero();
                    for i in 0..e {
                        let d = g[row.start + i] * gv[i];
                        sum_d += d;
                        sum_dx += d * xhat[row.start + i];
                    }
                    let k = inv_std[r] / ef;
                    for i in 0..e {
                        let d = g[row.start + i] * gv[i];
                        dx[row.start + i] += k * (ef * d - sum_d - xhat[row.start + i] * sum_dx);
                    }
                }
            }
        }
        Op::Permute { a, perm } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                let inv = inverse_permutation(perm);
                let (_, back) = kernels::permute_forward(g, node.value.shape(), &inv);
                da.iter_mut().zip(back).for_each(|(d, x)| *d += x);
            }
        }
        Op::Reshape { a } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::Repeat { a, axis, times } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                let (outer, _, inner) = split_at_axis(node.value.shape(), *axis);
                for o in 0..outer {
                    for r in 0..*times {
                        let src = (o * times + r) * inner;
                        for i in 0..inner {
                            da[o * inner + i] += g[src + i];
                        }
                    }
                }
            }
        }
        Op::SumAxis { a, axis } => {
            let shape = nodes[*a].value.shape().to_vec();
            if let Some(da) = grad_buf(nodes, grads, *a) {
                let (outer, len, inner) = split_at_axis(&shape, *axis);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            da[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Gather { table, ids } => {
            let width = node.value.shape()[1];
            if let Some(dt) = grad_buf(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for i in 0..width {
                        dt[id * width + i] += g[r * width + i];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut start = 0;
            for &p in parts {
                let ext = nodes[p].value.shape()[*axis];
                if let Some(dp) = grad_buf(nodes, grads, p) {
                    for o in 0..outer {
                        let src = (o * total + start) * inner;
                        let dst = o * ext * inner;
                        for i in 0..ext * inner {
                            dp[dst + i] += g[src + i];
                        }
                    }
                }
                start += ext;
            }
        }
        Op::Narrow { a, axis, start } => {
            let in_shape = nodes[*a].value.shape().to_vec();
            let len = node.value.shape()[*axis];
            if let Some(da) = grad_buf(nodes, grads, *a) {
                let (outer, ext, inner) = split_at_axis(&in_shape, *axis);
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        da[dst + i] += g[src + i];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            row_scale,
            probs,
            smoothing,
        } => {
            let v = nodes[*logits].value.shape()[1];
            let vf = F::from_usize(v).unwrap();
            if let Some(dl) = grad_buf(nodes, grads, *logits) {
                for (r, &gold) in targets.iter().enumerate() {
                    let w = row_scale[r] * g[0];
                    if w == F::zero() {
                        continue;
                    }
                    for c in 0..v {
                        let mut target = *smoothing / vf;
                        if c == gold {
                            target += F::one() - *smoothing;
                        }
                        dl[r * v + c] += w * (probs[r * v + c] - target);
                    }
                }
            }
        }
    }
}

fn matmul_backward<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    g: &[F],
    a: usize,
    b: usize,
    trans_b: bool,
) {
    let av = &nodes[a].value;
    let bv = &nodes[b].value;
    let (ra, rb) = (av.rank(), bv.rank());
    let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
    let n = if trans_b { bv.shape()[rb - 2] } else { bv.shape()[rb - 1] };
    let a_batch = &av.shape()[..ra - 2];
    let b_batch = &bv.shape()[..rb - 2];
    let b_flat = b_batch.iter().product::<usize>() == 1;
    let a_flat = a_batch.iter().product::<usize>() == 1;

    if b_flat {
        // every batch element multiplies the same right operand
        let rows = av.len() / k.max(1);
        if let Some(da) = grad_buf(nodes, grads, a) {
            // dA = dC · op(B)ᵀ
            gemm(rows, n, k, g, false, bv.data(), !trans_b, da, true);
        }
        if let Some(db) = grad_buf(nodes, grads, b) {
            if trans_b {
                // dB[n,k] = dCᵀ · A
                gemm(n, rows, k, g, true, av.data(), false, db, true);
            } else {
                // dB[k,n] = Aᵀ · dC
                gemm(k, rows, n, av.data(), true, g, false, db, true);
            }
        }
        return;
    }

    let out_batch = broadcast_batch(a_batch, b_batch).expect("validated in forward");
    let offs_a = batch_offsets(a_batch, &out_batch);
    let offs_b = batch_offsets(b_batch, &out_batch);
    let (sa, sb, sc) = (m * k, k * n, m * n);
    if let Some(da) = grad_buf(nodes, grads, a) {
        for (e, &oa) in offs_a.iter().enumerate() {
            let ob = offs_b[e];
            gemm(
                m,
                n,
                k,
                &g[e * sc..(e + 1) * sc],
                false,
                &bv.data()[ob * sb..(ob + 1) * sb],
                !trans_b,
                &mut da[oa * sa..(oa + 1) * sa],
                true,
            );
        }
    }
    if let Some(db) = grad_buf(nodes, grads, b) {
        for (e, &ob) in offs_b.iter().enumerate() {
            let oa = if a_flat { 0 } else { offs_a[e] };
            let a_mat = &av.data()[oa * sa..(oa + 1) * sa];
            let g_mat = &g[e * sc..(e + 1) * sc];
            let out = &mut db[ob * sb..(ob + 1) * sb];
            if trans_b {
                gemm(n, m, k, g_mat, true, a_mat, false, out, true);
            } else {
                gemm(k, m, n, a_mat, true, g_mat, false, out, true);
            }
        }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<F> {
        (*self.tape.value(self.id)).clone()
    }

    /// Shared handle to the recorded value, without copying it.
    pub fn value_ref(&self) -> Rc<Tensor<F>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, F>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Invalid(format!("{op}: operands live on different tapes")))
        }
    }

    /// Element-wise sum. `other` may have the shape of a trailing suffix of
    /// `self`, in which case it is broadcast over the leading axes.
    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other, "add")?;
        let (a, b) = (self.value_ref(), other.value_ref());
        let suffix_ok = b.rank() <= a.rank() && a.shape()[a.rank() - b.rank()..] == *b.shape();
        if !suffix_ok {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<F> = if b.is_empty() {
            a.to_vec()
        } else {
            let mut data = Vec::with_capacity(a.len());
            for chunk in a.data().chunks_exact(b.len()) {
                data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| x + y));
            }
            data
        };
        self.tape.push(
            "add",
            a.shape().to_vec(),
            data,
            Op::Add { a: self.id, b: other.id },
            &[self.id, other.id],
        )
    }

    /// Element-wise product of equally shaped operands.
    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other, "mul")?;
        let (a, b) = (self.value_ref(), other.value_ref());
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        self.tape.push(
            "mul",
            a.shape().to_vec(),
            data,
            Op::Mul { a: self.id, b: other.id },
            &[self.id, other.id],
        )
    }

    pub fn scale(self, c: F) -> Result<Var<'t, F>> {
        let a = self.value_ref();
        let data = a.data().iter().map(|&x| x * c).collect();
        self.tape
            .push("scale", a.shape().to_vec(), data, Op::Scale { a: self.id, c }, &[self.id])
    }

    pub fn relu(self) -> Result<Var<'t, F>> {
        let a = self.value_ref();
        let data = a.data().iter().map(|&x| x.max(F::zero())).collect();
        self.tape
            .push("relu", a.shape().to_vec(), data, Op::Relu { a: self.id }, &[self.id])
    }

    /// Batched matrix product `[..., m, k] × [..., k, n] → [..., m, n]`.
    /// Leading batch extents are right-aligned and must be equal or 1.
    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` over the last two axes: `[..., m, k] × [..., n, k] → [..., m, n]`.
    pub fn matmul_t(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t, F>, trans_b: bool) -> Result<Var<'t, F>> {
        self.same_tape(&other, "matmul")?;
        let (av, bv) = (self.value_ref(), other.value_ref());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.rank() < 2 || bv.rank() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (av.rank(), bv.rank());
        let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
        let (kb, n) = if trans_b {
            (bv.shape()[rb - 1], bv.shape()[rb - 2])
        } else {
            (bv.shape()[rb - 2], bv.shape()[rb - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let a_batch = &av.shape()[..ra - 2];
        let b_batch = &bv.shape()[..rb - 2];
        let out_batch = broadcast_batch(a_batch, b_batch).ok_or_else(mismatch)?;
        let mut out_shape = out_batch.clone();
        out_shape.extend([m, n]);
        let total: usize = out_shape.iter().product();
        let mut out = vec![F::zero(); total];

        if b_batch.iter().product::<usize>() == 1 && out_batch.iter().product::<usize>() == a_batch.iter().product::<usize>() {
            let rows = av.len() / k.max(1);
            let rows = if k == 0 { total / n.max(1) } else { rows };
            gemm(rows, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        } else {
            let offs_a = batch_offsets(a_batch, &out_batch);
            let offs_b = batch_offsets(b_batch, &out_batch);
            let (sa, sb, sc) = (m * k, k * n, m * n);
            for (e, (&oa, &ob)) in offs_a.iter().zip(&offs_b).enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &av.data()[oa * sa..(oa + 1) * sa],
                    false,
                    &bv.data()[ob * sb..(ob + 1) * sb],
                    trans_b,
                    &mut out[e * sc..(e + 1) * sc],
                    false,
                );
            }
        }
        self.tape.push(
            "matmul",
            out_shape,
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let a = self.value_ref();
        if axis >= a.rank() {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                rank: a.rank(),
            });
        }
        if a.shape()[axis] == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let data = kernels::softmax_forward(a.data(), a.shape(), axis);
        self.tape.push(
            "softmax",
            a.shape().to_vec(),
            data,
            Op::Softmax { a: self.id, axis },
            &[self.id],
        )
    }

    /// Normalizes the last axis to zero mean and unit variance
    /// (epsilon [`LAYER_NORM_EPS`]) followed by `gain`/`bias`.
    pub fn layer_norm(self, gain: Var<'t, F>, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&gain, "layer_norm")?;
        self.same_tape(&bias, "layer_norm")?;
        let (x, gv, bv) = (self.value_ref(), gain.value_ref(), bias.value_ref());
        let e = *x.shape().last().unwrap_or(&0);
        if e == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        if gv.shape() != [e] || bv.shape() != [e] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.len() / e;
        let ef = F::from_usize(e).unwrap();
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let mut xhat = vec![F::zero(); x.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * e..(r + 1) * e];
            let mean = row.iter().copied().sum::<F>() / ef;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / ef;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..e {
                let h = (row[i] - mean) * is;
                xhat[r * e + i] = h;
                out[r * e + i] = h * gv.data()[i] + bv.data()[i];
            }
        }
        self.tape.push(
            "layer_norm",
            x.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        )
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, F>> {
        let a = self.value_ref();
        let mut seen = vec![false; a.rank()];
        let valid = perm.len() == a.rank()
            && perm.iter().all(|&p| p < a.rank() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid(format!(
                "permute: {perm:?} is not a permutation of rank {}",
                a.rank()
            )));
        }
        let (shape, data) = kernels::permute_forward(a.data(), a.shape(), perm);
        self.tape.push(
            "permute",
            shape,
            data,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        )
    }

    /// Swaps two axes.
    pub fn transpose(self, ax0: usize, ax1: usize) -> Result<Var<'t, F>> {
        let rank = self.shape().len();
        if ax0 >= rank || ax1 >= rank {
            return Err(TensorError::BadAxis {
                op: "transpose",
                axis: ax0.max(ax1),
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(ax0, ax1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let a = self.value_ref();
        if shape.iter().product::<usize>() != a.len() {
            return Err(TensorError::BadShape {
                shape: shape.to_vec(),
                len: a.len(),
            });
        }
        let value = a.reshape(shape.to_vec())?;
        let requires_grad = self.requires_grad();
        Ok(self.tape.push_node(value, Op::Reshape { a: self.id }, requires_grad))
    }

    /// Repeats an extent-1 axis `times` times.
    pub fn repeat_axis(self, axis: usize, times: usize) -> Result<Var<'t, F>> {
        let a = self.value_ref();
        if axis >= a.rank() {
            return Err(TensorError::BadAxis {
                op: "repeat_axis",
                axis,
                rank: a.rank(),
            });
        }
        if a.shape()[axis] != 1 {
            return Err(TensorError::Invalid(format!(
                "repeat_axis: axis {axis} of {:?} must have extent 1",
                a.shape()
            )));
        }
        let (outer, _, inner) = split_at_axis(a.shape(), axis);
        let mut data = Vec::with_capacity(a.len() * times);
        for o in 0..outer {
            let src = &a.data()[o * inner..(o + 1) * inner];
            for _ in 0..times {
                data.extend_from_slice(src);
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = times;
        self.tape.push(
            "repeat_axis",
            shape,
            data,
            Op::Repeat {
                a: self.id,
                axis,
                times,
            },
            &[self.id],
        )
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, F>> {
        let a = self.value_ref();
        if axis >= a.rank() {
            return Err(TensorError::BadAxis {
                op: "sum_axis",
                axis,
                rank: a.rank(),
            });
        }
        let (outer, len, inner) = split_at_axis(a.shape(), axis);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += a.data()[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        self.tape
            .push("sum_axis", shape, data, Op::SumAxis { a: self.id, axis }, &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t, F>> {
        let a = self.value_ref();
        let total = a.data().iter().copied().sum();
        self.tape
            .push("sum", Vec::new(), vec![total], Op::Sum { a: self.id }, &[self.id])
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let a = self.value_ref();
        let (shape, data) = narrow_values(a.shape(), a.data(), axis, start, len)?;
        self.tape.push(
            "narrow",
            shape,
            data,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }
}
