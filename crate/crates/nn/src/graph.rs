//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order and evaluated eagerly; the
//! whole tape can be re-run after leaf values change (finite-difference
//! checks rely on this). All tensors are dense row-major matrices; a
//! scalar is a 1x1 matrix.

use crate::procrustes;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    /// Row-broadcast add: (N x D) + (1 x D).
    AddBias(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, T),
    AddScalar(TensorId, T),
    ClampMin(TensorId, T),
    Square(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    SoftmaxRows(TensorId),
    MatMul(TensorId, TensorId),
    /// A * B^T with A: N x K, B: M x K.
    MatMulNT(TensorId, TensorId),
    /// A^T * B with A: K x N, B: K x M.
    MatMulTN(TensorId, TensorId),
    MeanAxis0(TensorId),
    SumAxis0(TensorId),
    SumAxis1(TensorId),
    L2NormRows(TensorId),
    GatherRows(TensorId, Box<[usize]>),
    ConcatCols(Box<[TensorId]>),
    SliceCols(TensorId, usize, usize),
    Transpose(TensorId),
    /// Row-broadcast multiply: (N x D) * (N x 1).
    ScaleRows(TensorId, TensorId),
    LayerNormRows {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: T,
    },
    /// Weighted rigid alignment of J mean pairs; output is [R | t] as 3 x 4.
    Kabsch {
        src: TensorId,
        dst: TensorId,
        weights: TensorId,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    grad: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use computation tape.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

#[inline]
fn check_shape(ctx: &str, got: (usize, usize), want: (usize, usize)) {
    assert!(
        got == want,
        "{ctx}: shape mismatch, got {}x{} but expected {}x{}",
        got.0,
        got.1,
        want.0,
        want.1
    );
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar convenience accessor; panics unless `id` is 1x1.
    pub fn scalar_value(&self, id: TensorId) -> T {
        check_shape("scalar_value", self.shape(id), (1, 1));
        self.nodes[id.0].value[0]
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> TensorId {
        self.leaf(rows, cols, data, false)
    }

    /// Trainable input; gradients are accumulated into it.
    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<T>) -> TensorId {
        self.leaf(rows, cols, data, true)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<T>, requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            rows * cols,
            "leaf: data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        self.nodes.push(Node {
            rows,
            cols,
            value: data,
            grad: Vec::new(),
            op: Op::Leaf,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Overwrites a leaf's value; used by finite-difference checks.
    pub fn set_leaf_value(&mut self, id: TensorId, data: &[T]) {
        let node = &mut self.nodes[id.0];
        assert!(matches!(node.op, Op::Leaf), "set_leaf_value on a non-leaf");
        assert_eq!(data.len(), node.value.len());
        node.value.copy_from_slice(data);
    }

    fn push(&mut self, rows: usize, cols: usize, op: Op<T>) -> TensorId {
        let requires_grad = self.op_requires_grad(&op);
        let value = self.eval_op(&op, rows, cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: Vec::new(),
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op<T>) -> bool {
        let dep = |id: &TensorId| self.nodes[id.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::MatMulTN(a, b)
            | Op::ScaleRows(a, b) => dep(a) || dep(b),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::ClampMin(a, _)
            | Op::Square(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::MeanAxis0(a)
            | Op::SumAxis0(a)
            | Op::SumAxis1(a)
            | Op::L2NormRows(a)
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, _, _)
            | Op::Transpose(a) => dep(a),
            Op::ConcatCols(parts) => parts.iter().any(dep),
            Op::LayerNormRows { x, gain, bias, .. } => dep(x) || dep(gain) || dep(bias),
            Op::Kabsch { src, dst, weights } => dep(src) || dep(dst) || dep(weights),
        }
    }

    // ---- builder methods -------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        check_shape("add", self.shape(b), self.shape(a));
        let (r, c) = self.shape(a);
        self.push(r, c, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        check_shape("add_bias", self.shape(bias), (1, c));
        self.push(r, c, Op::AddBias(a, bias))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        check_shape("sub", self.shape(b), self.shape(a));
        let (r, c) = self.shape(a);
        self.push(r, c, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        check_shape("mul", self.shape(b), self.shape(a));
        let (r, c) = self.shape(a);
        self.push(r, c, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        check_shape("div", self.shape(b), self.shape(a));
        let (r, c) = self.shape(a);
        self.push(r, c, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: TensorId, factor: T) -> TensorId {
        let (r, c) = self.shape(a);
        self.push(r, c, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: TensorId, value: T) -> TensorId {
        let (r, c) = self.shape(a);
        self.push(r, c, Op::AddScalar(a, value))
    }

    pub fn clamp_min(&mut self, a: TensorId, floor: T) -> TensorId {
        let (r, c) = self.shape(a);
        self.push(r, c, Op::ClampMin(a, floor))
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        self.push(r, c, Op::Square(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        self.push(r, c, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        self.push(r, c, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        self.push(r, c, Op::SoftmaxRows(a))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(
            k, k2,
            "matmul: inner dimensions differ, {n}x{k} vs {k2}x{m}"
        );
        self.push(n, m, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        assert_eq!(
            k, k2,
            "matmul_nt: inner dimensions differ, {n}x{k} vs ({m}x{k2})^T"
        );
        self.push(n, m, Op::MatMulNT(a, b))
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (k, n) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(
            k, k2,
            "matmul_tn: inner dimensions differ, ({k}x{n})^T vs {k2}x{m}"
        );
        self.push(n, m, Op::MatMulTN(a, b))
    }

    pub fn mean_axis0(&mut self, a: TensorId) -> TensorId {
        let (_, c) = self.shape(a);
        self.push(1, c, Op::MeanAxis0(a))
    }

    pub fn sum_axis0(&mut self, a: TensorId) -> TensorId {
        let (_, c) = self.shape(a);
        self.push(1, c, Op::SumAxis0(a))
    }

    pub fn sum_axis1(&mut self, a: TensorId) -> TensorId {
        let (r, _) = self.shape(a);
        self.push(r, 1, Op::SumAxis1(a))
    }

    pub fn mean_axis1(&mut self, a: TensorId) -> TensorId {
        let (_, c) = self.shape(a);
        let s = self.sum_axis1(a);
        self.scale(s, T::ONE / T::from_f64(c as f64))
    }

    /// Euclidean norm of every row, as an N x 1 column.
    pub fn l2_norm_rows(&mut self, a: TensorId) -> TensorId {
        let (r, _) = self.shape(a);
        self.push(r, 1, Op::L2NormRows(a))
    }

    /// Selects rows by index; duplicate indices are allowed. Gradients
    /// scatter-add into the selected rows only.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> TensorId {
        let (r, c) = self.shape(a);
        for &i in indices {
            assert!(i < r, "gather_rows: index {i} out of range for {r} rows");
        }
        self.push(
            indices.len(),
            c,
            Op::GatherRows(a, indices.to_vec().into_boxed_slice()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let (r, _) = self.shape(parts[0]);
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(
                pr, r,
                "concat_cols: row counts differ, {pr} vs {r}"
            );
            cols += pc;
        }
        self.push(r, cols, Op::ConcatCols(parts.to_vec().into_boxed_slice()))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (r, c) = self.shape(a);
        assert!(
            start + len <= c,
            "slice_cols: range {start}..{} out of {c} columns",
            start + len
        );
        self.push(r, len, Op::SliceCols(a, start, len))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        self.push(c, r, Op::Transpose(a))
    }

    pub fn scale_rows(&mut self, a: TensorId, s: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        check_shape("scale_rows", self.shape(s), (r, 1));
        self.push(r, c, Op::ScaleRows(a, s))
    }

    pub fn layer_norm_rows(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: T) -> TensorId {
        let (r, c) = self.shape(x);
        check_shape("layer_norm gain", self.shape(gain), (1, c));
        check_shape("layer_norm bias", self.shape(bias), (1, c));
        self.push(r, c, Op::LayerNormRows { x, gain, bias, eps })
    }

    /// Weighted rigid alignment: finds the rotation+translation minimizing
    /// sum_j w_j ||R s_j + t - d_j||^2 and emits it as a 3 x 4 `[R | t]`
    /// block. Internally solved in f64 regardless of `T`.
    pub fn kabsch(&mut self, src: TensorId, dst: TensorId, weights: TensorId) -> TensorId {
        let (j, c) = self.shape(src);
        check_shape("kabsch src", (j, c), (j, 3));
        check_shape("kabsch dst", self.shape(dst), (j, 3));
        check_shape("kabsch weights", self.shape(weights), (j, 1));
        self.push(3, 4, Op::Kabsch { src, dst, weights })
    }

    // ---- forward ----------------------------------------------------------

    fn eval_op(&self, op: &Op<T>, rows: usize, cols: usize) -> Vec<T> {
        let v = |id: &TensorId| &self.nodes[id.0].value;
        let sh = |id: &TensorId| (self.nodes[id.0].rows, self.nodes[id.0].cols);
        match op {
            Op::Leaf => unreachable!("leaves are never re-evaluated"),
            Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(&x, &y)| x + y).collect(),
            Op::Sub(a, b) => v(a).iter().zip(v(b)).map(|(&x, &y)| x - y).collect(),
            Op::Mul(a, b) => v(a).iter().zip(v(b)).map(|(&x, &y)| x * y).collect(),
            Op::Div(a, b) => v(a).iter().zip(v(b)).map(|(&x, &y)| x / y).collect(),
            Op::AddBias(a, b) => {
                let bias = v(b);
                v(a)
                    .chunks_exact(cols)
                    .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
                    .collect()
            }
            Op::Scale(a, f) => v(a).iter().map(|&x| x * *f).collect(),
            Op::AddScalar(a, f) => v(a).iter().map(|&x| x + *f).collect(),
            Op::ClampMin(a, f) => v(a).iter().map(|&x| x.max(*f)).collect(),
            Op::Square(a) => v(a).iter().map(|&x| x * x).collect(),
            Op::Relu(a) => v(a)
                .iter()
                .map(|&x| if x > T::ZERO { x } else { T::ZERO })
                .collect(),
            Op::Sigmoid(a) => v(a)
                .iter()
                .map(|&x| T::ONE / (T::ONE + (-x).exp()))
                .collect(),
            Op::SoftmaxRows(a) => {
                let mut out = vec![T::ZERO; rows * cols];
                for (orow, row) in out.chunks_exact_mut(cols).zip(v(a).chunks_exact(cols)) {
                    let mut mx = row[0];
                    for &x in row {
                        mx = mx.max(x);
                    }
                    let mut sum = T::ZERO;
                    for (o, &x) in orow.iter_mut().zip(row) {
                        *o = (x - mx).exp();
                        sum += *o;
                    }
                    let inv = T::ONE / sum;
                    for o in orow.iter_mut() {
                        *o = *o * inv;
                    }
                }
                out
            }
            Op::MatMul(a, b) => {
                let (n, k) = sh(a);
                let (_, m) = sh(b);
                let mut out = vec![T::ZERO; n * m];
                matmul_acc(&mut out, v(a), v(b), n, k, m);
                out
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = sh(a);
                let (m, _) = sh(b);
                let mut out = vec![T::ZERO; n * m];
                matmul_nt_acc(&mut out, v(a), v(b), n, k, m);
                out
            }
            Op::MatMulTN(a, b) => {
                let (k, n) = sh(a);
                let (_, m) = sh(b);
                let mut out = vec![T::ZERO; n * m];
                matmul_tn_acc(&mut out, v(a), v(b), k, n, m);
                out
            }
            Op::MeanAxis0(a) => {
                let (n, c) = sh(a);
                let mut out = vec![T::ZERO; c];
                for row in v(a).chunks_exact(c) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                let inv = T::ONE / T::from_f64(n as f64);
                for o in out.iter_mut() {
                    *o = *o * inv;
                }
                out
            }
            Op::SumAxis0(a) => {
                let (_, c) = sh(a);
                let mut out = vec![T::ZERO; c];
                for row in v(a).chunks_exact(c) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out
            }
            Op::SumAxis1(a) => {
                let (_, c) = sh(a);
                v(a)
                    .chunks_exact(c)
                    .map(|row| {
                        let mut s = T::ZERO;
                        for &x in row {
                            s += x;
                        }
                        s
                    })
                    .collect()
            }
            Op::L2NormRows(a) => {
                let (_, c) = sh(a);
                v(a)
                    .chunks_exact(c)
                    .map(|row| {
                        let mut s = T::ZERO;
                        for &x in row {
                            s += x * x;
                        }
                        s.sqrt()
                    })
                    .collect()
            }
            Op::GatherRows(a, idx) => {
                let (_, c) = sh(a);
                let av = v(a);
                let mut out = Vec::with_capacity(idx.len() * c);
                for &i in idx.iter() {
                    out.extend_from_slice(&av[i * c..(i + 1) * c]);
                }
                out
            }
            Op::ConcatCols(parts) => {
                let mut out = vec![T::ZERO; rows * cols];
                let mut offset = 0;
                for p in parts.iter() {
                    let (_, pc) = sh(p);
                    let pv = v(p);
                    for r in 0..rows {
                        out[r * cols + offset..r * cols + offset + pc]
                            .copy_from_slice(&pv[r * pc..(r + 1) * pc]);
                    }
                    offset += pc;
                }
                out
            }
            Op::SliceCols(a, start, len) => {
                let (_, c) = sh(a);
                let av = v(a);
                let mut out = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    out.extend_from_slice(&av[r * c + start..r * c + start + len]);
                }
                out
            }
            Op::Transpose(a) => {
                let (n, c) = sh(a);
                let av = v(a);
                let mut out = vec![T::ZERO; n * c];
                for i in 0..n {
                    for j in 0..c {
                        out[j * n + i] = av[i * c + j];
                    }
                }
                out
            }
            Op::ScaleRows(a, s) => {
                let (_, c) = sh(a);
                let sv = v(s);
                v(a)
                    .chunks_exact(c)
                    .zip(sv)
                    .flat_map(|(row, &f)| row.iter().map(move |&x| x * f))
                    .collect()
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (_, c) = sh(x);
                let g = v(gain);
                let b = v(bias);
                let mut out = vec![T::ZERO; rows * cols];
                let inv_c = T::ONE / T::from_f64(c as f64);
                for (orow, row) in out.chunks_exact_mut(c).zip(v(x).chunks_exact(c)) {
                    let mut mean = T::ZERO;
                    for &xv in row {
                        mean += xv;
                    }
                    mean = mean * inv_c;
                    let mut var = T::ZERO;
                    for &xv in row {
                        let d = xv - mean;
                        var += d * d;
                    }
                    var = var * inv_c;
                    let inv_std = T::ONE / (var + *eps).sqrt();
                    for ((o, &xv), (&gv, &bv)) in
                        orow.iter_mut().zip(row).zip(g.iter().zip(b.iter()))
                    {
                        *o = gv * ((xv - mean) * inv_std) + bv;
                    }
                }
                out
            }
            Op::Kabsch { src, dst, weights } => {
                procrustes::kabsch_forward(v(src), v(dst), v(weights))
            }
        }
    }

    /// Re-evaluates every non-leaf node in creation order. Call after
    /// changing leaf values with [`Graph::set_leaf_value`].
    pub fn recompute(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (r, c) = (self.nodes[i].rows, self.nodes[i].cols);
            let value = self.eval_op(&op, r, c);
            self.nodes[i].value = value;
        }
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar output. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: TensorId) {
        check_shape("backward output", self.shape(loss), (1, 1));
        for node in self.nodes.iter_mut() {
            if node.requires_grad || matches!(node.op, Op::Leaf) {
                node.grad.clear();
                node.grad.resize(node.value.len(), T::ZERO);
            } else {
                node.grad.clear();
            }
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any trainable leaf.
            return;
        }
        self.nodes[loss.0].grad = vec![T::ONE];
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[id].grad);
            if g.is_empty() {
                continue;
            }
            self.backprop_node(TensorId(id), &g);
            self.nodes[id].grad = g;
        }
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Temporarily removes `id`'s gradient buffer, lets `f` accumulate into
    /// it with read access to the rest of the graph, and puts it back.
    fn acc_grad<F>(&mut self, id: TensorId, f: F)
    where
        F: FnOnce(&Graph<T>, &mut [T]),
    {
        if !self.wants(id) {
            return;
        }
        let mut g = std::mem::take(&mut self.nodes[id.0].grad);
        f(self, &mut g);
        self.nodes[id.0].grad = g;
    }

    fn backprop_node(&mut self, id: TensorId, g_out: &[T]) {
        let op = self.nodes[id.0].op.clone();
        let (rows, cols) = self.shape(id);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_grad(a, |_, ga| acc(ga, g_out));
                self.acc_grad(b, |_, gb| acc(gb, g_out));
            }
            Op::Sub(a, b) => {
                self.acc_grad(a, |_, ga| acc(ga, g_out));
                self.acc_grad(b, |_, gb| {
                    for (g, &go) in gb.iter_mut().zip(g_out) {
                        *g = *g - go;
                    }
                });
            }
            Op::AddBias(a, b) => {
                self.acc_grad(a, |_, ga| acc(ga, g_out));
                self.acc_grad(b, |_, gb| {
                    for row in g_out.chunks_exact(cols) {
                        for (g, &go) in gb.iter_mut().zip(row) {
                            *g += go;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                self.acc_grad(a, |gr, ga| {
                    for ((g, &go), &bv) in ga.iter_mut().zip(g_out).zip(gr.value(b)) {
                        *g += go * bv;
                    }
                });
                self.acc_grad(b, |gr, gb| {
                    for ((g, &go), &av) in gb.iter_mut().zip(g_out).zip(gr.value(a)) {
                        *g += go * av;
                    }
                });
            }
            Op::Div(a, b) => {
                self.acc_grad(a, |gr, ga| {
                    for ((g, &go), &bv) in ga.iter_mut().zip(g_out).zip(gr.value(b)) {
                        *g += go / bv;
                    }
                });
                self.acc_grad(b, |gr, gb| {
                    let av = gr.value(a);
                    let bv = gr.value(b);
                    for i in 0..gb.len() {
                        gb[i] = gb[i] - g_out[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, f) => {
                self.acc_grad(a, |_, ga| {
                    for (g, &go) in ga.iter_mut().zip(g_out) {
                        *g += go * f;
                    }
                });
            }
            Op::AddScalar(a, _) => {
                self.acc_grad(a, |_, ga| acc(ga, g_out));
            }
            Op::ClampMin(a, f) => {
                self.acc_grad(a, |gr, ga| {
                    for ((g, &go), &av) in ga.iter_mut().zip(g_out).zip(gr.value(a)) {
                        if av >= f {
                            *g += go;
                        }
                    }
                });
            }
            Op::Square(a) => {
                self.acc_grad(a, |gr, ga| {
                    let two = T::from_f64(2.0);
                    for ((g, &go), &av) in ga.iter_mut().zip(g_out).zip(gr.value(a)) {
                        *g += two * av * go;
                    }
                });
            }
            Op::Relu(a) => {
                self.acc_grad(a, |gr, ga| {
                    for ((g, &go), &av) in ga.iter_mut().zip(g_out).zip(gr.value(a)) {
                        if av > T::ZERO {
                            *g += go;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = TensorId(id.0);
                self.acc_grad(a, |gr, ga| {
                    for ((g, &go), &y) in ga.iter_mut().zip(g_out).zip(gr.value(out)) {
                        *g += go * y * (T::ONE - y);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let out = TensorId(id.0);
                self.acc_grad(a, |gr, ga| {
                    let y = gr.value(out);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gor = &g_out[r * cols..(r + 1) * cols];
                        let mut dot = T::ZERO;
                        for (&yv, &gv) in yr.iter().zip(gor) {
                            dot += yv * gv;
                        }
                        let gar = &mut ga[r * cols..(r + 1) * cols];
                        for ((g, &yv), &gv) in gar.iter_mut().zip(yr).zip(gor) {
                            *g += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(a);
                let (_, m) = self.shape(b);
                self.acc_grad(a, |gr, ga| {
                    matmul_nt_acc(ga, g_out, gr.value(b), n, m, k);
                });
                self.acc_grad(b, |gr, gb| {
                    matmul_tn_acc(gb, gr.value(a), g_out, n, k, m);
                });
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = self.shape(a);
                let (m, _) = self.shape(b);
                self.acc_grad(a, |gr, ga| {
                    matmul_acc(ga, g_out, gr.value(b), n, m, k);
                });
                self.acc_grad(b, |gr, gb| {
                    matmul_tn_acc(gb, g_out, gr.value(a), n, m, k);
                });
            }
            Op::MatMulTN(a, b) => {
                let (k, n) = self.shape(a);
                let (_, m) = self.shape(b);
                self.acc_grad(a, |gr, ga| {
                    matmul_nt_acc(ga, gr.value(b), g_out, k, m, n);
                });
                self.acc_grad(b, |gr, gb| {
                    matmul_acc(gb, gr.value(a), g_out, k, n, m);
                });
            }
            Op::MeanAxis0(a) => {
                let (n, c) = self.shape(a);
                let inv = T::ONE / T::from_f64(n as f64);
                self.acc_grad(a, |_, ga| {
                    for row in ga.chunks_exact_mut(c) {
                        for (g, &go) in row.iter_mut().zip(g_out) {
                            *g += go * inv;
                        }
                    }
                });
            }
            Op::SumAxis0(a) => {
                let (_, c) = self.shape(a);
                self.acc_grad(a, |_, ga| {
                    for row in ga.chunks_exact_mut(c) {
                        for (g, &go) in row.iter_mut().zip(g_out) {
                            *g += go;
                        }
                    }
                });
            }
            Op::SumAxis1(a) => {
                let (_, c) = self.shape(a);
                self.acc_grad(a, |_, ga| {
                    for (row, &go) in ga.chunks_exact_mut(c).zip(g_out) {
                        for g in row.iter_mut() {
                            *g += go;
                        }
                    }
                });
            }
            Op::L2NormRows(a) => {
                let out = TensorId(id.0);
                let (_, c) = self.shape(a);
                self.acc_grad(a, |gr, ga| {
                    let av = gr.value(a);
                    let norms = gr.value(out);
                    for r in 0..norms.len() {
                        if norms[r] <= T::ZERO {
                            continue;
                        }
                        let f = g_out[r] / norms[r];
                        let garow = &mut ga[r * c..(r + 1) * c];
                        let arow = &av[r * c..(r + 1) * c];
                        for (g, &x) in garow.iter_mut().zip(arow) {
                            *g += f * x;
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let (_, c) = self.shape(a);
                self.acc_grad(a, |_, ga| {
                    for (k, &i) in idx.iter().enumerate() {
                        let grow = &g_out[k * c..(k + 1) * c];
                        let garow = &mut ga[i * c..(i + 1) * c];
                        for (g, &go) in garow.iter_mut().zip(grow) {
                            *g += go;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts.iter() {
                    let (_, pc) = self.shape(p);
                    let start = offset;
                    self.acc_grad(p, |_, gp| {
                        for r in 0..rows {
                            let grow = &g_out[r * cols + start..r * cols + start + pc];
                            let gprow = &mut gp[r * pc..(r + 1) * pc];
                            for (g, &go) in gprow.iter_mut().zip(grow) {
                                *g += go;
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceCols(a, start, len) => {
                let (_, c) = self.shape(a);
                self.acc_grad(a, |_, ga| {
                    for r in 0..rows {
                        let grow = &g_out[r * len..(r + 1) * len];
                        let garow = &mut ga[r * c + start..r * c + start + len];
                        for (g, &go) in garow.iter_mut().zip(grow) {
                            *g += go;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, c) = self.shape(a);
                self.acc_grad(a, |_, ga| {
                    for i in 0..n {
                        for j in 0..c {
                            ga[i * c + j] += g_out[j * n + i];
                        }
                    }
                });
            }
            Op::ScaleRows(a, s) => {
                let (_, c) = self.shape(a);
                self.acc_grad(a, |gr, ga| {
                    let sv = gr.value(s);
                    for ((garow, grow), &f) in
                        ga.chunks_exact_mut(c).zip(g_out.chunks_exact(c)).zip(sv)
                    {
                        for (g, &go) in garow.iter_mut().zip(grow) {
                            *g += go * f;
                        }
                    }
                });
                self.acc_grad(s, |gr, gs| {
                    let av = gr.value(a);
                    for (r, g) in gs.iter_mut().enumerate() {
                        let arow = &av[r * c..(r + 1) * c];
                        let grow = &g_out[r * c..(r + 1) * c];
                        let mut dot = T::ZERO;
                        for (&x, &go) in arow.iter().zip(grow) {
                            dot += x * go;
                        }
                        *g += dot;
                    }
                });
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (_, c) = self.shape(x);
                let inv_c = T::ONE / T::from_f64(c as f64);
                // Recompute per-row statistics from the input.
                self.acc_grad(x, |gr, gx| {
                    let xv = gr.value(x);
                    let gv = gr.value(gain);
                    for r in 0..rows {
                        let xr = &xv[r * c..(r + 1) * c];
                        let gor = &g_out[r * c..(r + 1) * c];
                        let (mean, inv_std) = row_stats(xr, eps, inv_c);
                        let mut mean_d = T::ZERO;
                        let mut mean_dx = T::ZERO;
                        for ((&xi, &go), &gi) in xr.iter().zip(gor).zip(gv) {
                            let xhat = (xi - mean) * inv_std;
                            let d = go * gi;
                            mean_d += d;
                            mean_dx += d * xhat;
                        }
                        mean_d = mean_d * inv_c;
                        mean_dx = mean_dx * inv_c;
                        let gxr = &mut gx[r * c..(r + 1) * c];
                        for ((g, &xi), (&go, &gi)) in
                            gxr.iter_mut().zip(xr).zip(gor.iter().zip(gv))
                        {
                            let xhat = (xi - mean) * inv_std;
                            *g += (go * gi - mean_d - xhat * mean_dx) * inv_std;
                        }
                    }
                });
                self.acc_grad(gain, |gr, gg| {
                    let xv = gr.value(x);
                    for r in 0..rows {
                        let xr = &xv[r * c..(r + 1) * c];
                        let gor = &g_out[r * c..(r + 1) * c];
                        let (mean, inv_std) = row_stats(xr, eps, inv_c);
                        for ((g, &xi), &go) in gg.iter_mut().zip(xr).zip(gor) {
                            *g += go * ((xi - mean) * inv_std);
                        }
                    }
                });
                self.acc_grad(bias, |_, gb| {
                    for r in 0..rows {
                        let gor = &g_out[r * c..(r + 1) * c];
                        for (g, &go) in gb.iter_mut().zip(gor) {
                            *g += go;
                        }
                    }
                });
            }
            Op::Kabsch { src, dst, weights } => {
                let (gs, gd, gw) = procrustes::kabsch_backward(
                    self.value(src),
                    self.value(dst),
                    self.value(weights),
                    g_out,
                );
                self.acc_grad(src, |_, ga| acc(ga, &gs));
                self.acc_grad(dst, |_, ga| acc(ga, &gd));
                self.acc_grad(weights, |_, ga| acc(ga, &gw));
            }
        }
    }
}

#[inline]
fn row_stats<T: Scalar>(row: &[T], eps: T, inv_c: T) -> (T, T) {
    let mut mean = T::ZERO;
    for &x in row {
        mean += x;
    }
    mean = mean * inv_c;
    let mut var = T::ZERO;
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    var = var * inv_c;
    (mean, T::ONE / (var + eps).sqrt())
}

#[inline]
fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// c += a * b with a: n x k, b: k x m.
pub(crate) fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(c.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c += a * b^T with a: n x k, b: m x k.
pub(crate) fn matmul_nt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(c.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cv += dot(arow, brow);
        }
    }
}

/// c += a^T * b with a: k x n, b: k x m.
pub(crate) fn matmul_tn_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], k: usize, n: usize, m: usize) {
    debug_assert_eq!(c.len(), n * m);
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * m..(i + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc0 = T::ZERO;
    let mut acc1 = T::ZERO;
    let mut acc2 = T::ZERO;
    let mut acc3 = T::ZERO;
    let mut xc = x.chunks_exact(4);
    let mut yc = y.chunks_exact(4);
    for (xs, ys) in (&mut xc).zip(&mut yc) {
        acc0 += xs[0] * ys[0];
        acc1 += xs[1] * ys[1];
        acc2 += xs[2] * ys[2];
        acc3 += xs[3] * ys[3];
    }
    let mut s = (acc0 + acc1) + (acc2 + acc3);
    for (&xv, &yv) in xc.remainder().iter().zip(yc.remainder()) {
        s += xv * yv;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(1, 2, vec![0.0, 0.0]);
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let mut g = Graph::<f64>::new();
        let x = g.param(1, 1, vec![0.0]);
        let y = g.sigmoid(x);
        g.backward(y);
        assert!((g.grad(x)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn matmul_matches_hand_example() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = g.constant(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(a, b);
        assert_eq!(g.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_rejects_mismatched_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(2, 2, vec![0.0; 4]);
        let b = g.constant(1, 2, vec![0.0; 2]);
        g.add(a, b);
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut g = Graph::<f64>::new();
        let a = g.param(3, 1, vec![1.0, 2.0, 3.0]);
        let picked = g.gather_rows(a, &[1, 1]);
        let s = g.sum_axis0(picked);
        let s2 = g.sum_axis1(s);
        g.backward(s2);
        assert_eq!(g.grad(a), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn recompute_tracks_new_leaf_values() {
        let mut g = Graph::<f64>::new();
        let x = g.param(1, 1, vec![2.0]);
        let y = g.square(x);
        assert_eq!(g.value(y), &[4.0]);
        g.set_leaf_value(x, &[3.0]);
        g.recompute();
        assert_eq!(g.value(y), &[9.0]);
    }
}
