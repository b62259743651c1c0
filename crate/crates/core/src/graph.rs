//! Minimal reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a per-example tape: the forward pass appends nodes (values
//! are computed eagerly), and [`Graph::backward`] walks the tape in reverse
//! accumulating vector-Jacobian products. Parameter matrices are borrowed
//! into the tape as leaves, so building a graph never copies the model.
//!
//! The op set is exactly what an encoder-decoder transformer with an NLL
//! loss needs; each backward rule is validated against central finite
//! differences in the tests below.

use crate::tensor::{Matrix, Real};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Value<'a, F> {
    Owned(Matrix<F>),
    Borrowed(&'a Matrix<F>),
}

impl<F> Value<'_, F> {
    #[inline]
    fn get(&self) -> &Matrix<F> {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op<F> {
    Leaf,
    /// A · B
    MatMul(NodeId, NodeId),
    /// A · Bᵀ
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a 1×n bias row to every row of a.
    AddRowBroadcast(NodeId, NodeId),
    Scale(NodeId, F),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// Row-wise layer norm; `x_hat` and `inv_sigma` are cached for backward.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        x_hat: Matrix<F>,
        inv_sigma: Vec<F>,
    },
    /// Elementwise multiply by a fixed mask (inverted dropout).
    Dropout(NodeId, Matrix<F>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// Rows of `table` selected by token id.
    GatherRows {
        table: NodeId,
        ids: Vec<u32>,
    },
    /// −Σ log_probs[t, targets[t]] over positions where mask[t]; 1×1 output.
    NllSum {
        log_probs: NodeId,
        targets: Vec<u32>,
        mask: Vec<bool>,
    },
}

struct Node<'a, F> {
    value: Value<'a, F>,
    op: Op<F>,
}

/// Gradients indexed by the node they belong to.
pub struct Gradients<F> {
    grads: Vec<Option<Matrix<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `id`, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix<F>> {
        self.grads[id.0].as_ref()
    }

    /// Take ownership of the gradient for `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Matrix<F>> {
        self.grads[id.0].take()
    }
}

pub struct Graph<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
}

impl<'a, F: Real> Graph<'a, F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Matrix<F> {
        self.nodes[id.0].value.get()
    }

    /// Borrow an external matrix (parameter) as a leaf.
    pub fn leaf(&mut self, m: &'a Matrix<F>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Owned constant (positional encodings, attention masks).
    pub fn constant(&mut self, m: Matrix<F>) -> NodeId {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let bias_row = {
            let b = self.value(bias);
            assert_eq!(b.rows(), 1, "bias must be a row vector");
            b.row(0).to_vec()
        };
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), bias_row.len());
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&bias_row) {
                *x += b;
            }
        }
        self.push(v, Op::AddRowBroadcast(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(F::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            crate::tensor::softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            crate::tensor::log_softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer norm with learned gain/bias (both 1×n).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: F) -> NodeId {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let n = F::from_f64(cols as f64);
        let mut x_hat = Matrix::zeros(rows, cols);
        let mut inv_sigma = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xm.row(i);
            let mean = row.iter().cloned().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = (var + eps).sqrt().recip();
            inv_sigma.push(inv);
            for (j, &v) in row.iter().enumerate() {
                x_hat.set(i, j, (v - mean) * inv);
            }
        }
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.set(i, j, x_hat.get(i, j) * g[j] + b[j]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_sigma,
            },
        )
    }

    /// Inverted dropout with a precomputed mask of {0, 1/(1−rate)} entries.
    pub fn dropout(&mut self, x: NodeId, mask: Matrix<F>) -> NodeId {
        assert_eq!(self.value(x).shape(), mask.shape());
        let v = self.value(x).zip_map(&mask, |a, m| a * m);
        self.push(v, Op::Dropout(x, mask))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xm = self.value(x);
        assert!(start + len <= xm.cols());
        let v = Matrix::from_fn(xm.rows(), len, |i, j| xm.get(i, start + j));
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows(), rows);
            for i in 0..rows {
                for j in 0..pm.cols() {
                    v.set(i, offset + j, pm.get(i, j));
                }
            }
            offset += pm.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            let row = t.row(id as usize).to_vec();
            v.row_mut(i).copy_from_slice(&row);
        }
        self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Summed NLL over masked-in positions; `log_probs` must already be
    /// log-softmaxed. Returns a 1×1 node.
    pub fn nll_sum(&mut self, log_probs: NodeId, targets: &[u32], mask: &[bool]) -> NodeId {
        let lp = self.value(log_probs);
        assert_eq!(lp.rows(), targets.len());
        assert_eq!(targets.len(), mask.len());
        let mut total = F::zero();
        for (t, (&tgt, &m)) in targets.iter().zip(mask.iter()).enumerate() {
            if m {
                total -= lp.get(t, tgt as usize);
            }
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::NllSum {
                log_probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        )
    }

    /// Reverse pass from a 1×1 `root`, seeding with `seed`.
    pub fn backward(&self, root: NodeId, seed: F) -> Gradients<F> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![seed]));
        Gradients {
            grads: self.backward_from_seeds(grads),
        }
    }

    /// The reverse loop itself, starting from an arbitrary seeded table.
    /// Split out so tests can seed non-scalar outputs directly.
    fn backward_from_seeds(&self, mut grads: Vec<Option<Matrix<F>>>) -> Vec<Option<Matrix<F>>> {
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(grad); // keep for the caller
                }
                Op::MatMul(a, b) => {
                    let da = grad.matmul_nt(self.value(*b)); // dC·Bᵀ
                    let db = self.value(*a).matmul_tn(&grad); // Aᵀ·dC
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = grad.matmul(self.value(*b)); // dC·B
                    let db = grad.matmul_tn(self.value(*a)); // dCᵀ·A
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::AddRowBroadcast(a, bias) => {
                    let mut db = Matrix::zeros(1, grad.cols());
                    for i in 0..grad.rows() {
                        for (j, &g) in grad.row(i).iter().enumerate() {
                            db.set(0, j, db.get(0, j) + g);
                        }
                    }
                    accumulate(&mut grads, *a, grad);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, grad.map(|g| g * *s));
                }
                Op::Relu(a) => {
                    let da = grad.zip_map(self.value(*a), |g, x| {
                        if x > F::zero() {
                            g
                        } else {
                            F::zero()
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(NodeId(idx));
                    let mut da = Matrix::zeros(grad.rows(), grad.cols());
                    for i in 0..grad.rows() {
                        let dot: F = grad
                            .row(i)
                            .iter()
                            .zip(y.row(i).iter())
                            .map(|(&g, &p)| g * p)
                            .sum();
                        for j in 0..grad.cols() {
                            da.set(i, j, y.get(i, j) * (grad.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = self.value(NodeId(idx)); // log-probs
                    let mut da = Matrix::zeros(grad.rows(), grad.cols());
                    for i in 0..grad.rows() {
                        let gsum: F = grad.row(i).iter().cloned().sum();
                        for j in 0..grad.cols() {
                            da.set(i, j, grad.get(i, j) - y.get(i, j).exp() * gsum);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    x_hat,
                    inv_sigma,
                } => {
                    let (rows, cols) = grad.shape();
                    let n = F::from_f64(cols as f64);
                    let g_row = self.value(*gain).row(0).to_vec();
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for (i, &inv) in inv_sigma.iter().enumerate().take(rows) {
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for (j, &gj) in g_row.iter().enumerate() {
                            let g = grad.get(i, j);
                            let xh = x_hat.get(i, j);
                            dgain.set(0, j, dgain.get(0, j) + g * xh);
                            dbias.set(0, j, dbias.get(0, j) + g);
                            let dxh = g * gj;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh;
                        }
                        for (j, &gj) in g_row.iter().enumerate() {
                            let dxh = grad.get(i, j) * gj;
                            let xh = x_hat.get(i, j);
                            dx.set(
                                i,
                                j,
                                inv * (dxh - sum_dxhat / n - xh * sum_dxhat_xhat / n),
                            );
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::Dropout(x, mask) => {
                    accumulate(&mut grads, *x, grad.zip_map(mask, |g, m| g * m));
                }
                Op::SliceCols { x, start } => {
                    let xm = self.value(*x);
                    let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                    for i in 0..grad.rows() {
                        for j in 0..grad.cols() {
                            dx.set(i, start + j, grad.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let dp = Matrix::from_fn(grad.rows(), w, |i, j| grad.get(i, offset + j));
                        accumulate(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = dt.row_mut(id as usize);
                        for (d, &g) in dst.iter_mut().zip(grad.row(i)) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::NllSum {
                    log_probs,
                    targets,
                    mask,
                } => {
                    let seed = grad.get(0, 0);
                    let lp = self.value(*log_probs);
                    let mut dlp = Matrix::zeros(lp.rows(), lp.cols());
                    for (t, (&tgt, &m)) in targets.iter().zip(mask.iter()).enumerate() {
                        if m {
                            dlp.set(t, tgt as usize, -seed);
                        }
                    }
                    accumulate(&mut grads, *log_probs, dlp);
                }
            }
        }
        grads
    }
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Matrix<F>>], id: NodeId, g: Matrix<F>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign_scaled(&g, F::one()),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` w.r.t. every element of `inputs[which]`.
    fn fd_grad(
        inputs: &[Matrix<f64>],
        which: usize,
        h: f64,
        f: impl Fn(&[Matrix<f64>]) -> f64,
    ) -> Matrix<f64> {
        let mut grad = Matrix::zeros(inputs[which].rows(), inputs[which].cols());
        for i in 0..grad.rows() {
            for j in 0..grad.cols() {
                let base = inputs[which].get(i, j);
                let mut plus = inputs.to_vec();
                plus[which].set(i, j, base + h);
                let mut minus = inputs.to_vec();
                minus[which].set(i, j, base - h);
                grad.set(i, j, (f(&plus) - f(&minus)) / (2.0 * h));
            }
        }
        grad
    }

    fn assert_close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                let (x, y) = (a.get(i, j), b.get(i, j));
                let denom = x.abs().max(y.abs()).max(1.0);
                assert!(
                    ((x - y) / denom).abs() < tol,
                    "mismatch at ({i},{j}): {x} vs {y}"
                );
            }
        }
    }

    /// Scalar test loss: weighted sum of outputs so every element matters.
    fn weighted_sum(m: &Matrix<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                acc += m.get(i, j) * ((i * m.cols() + j) as f64 * 0.37 - 1.1);
            }
        }
        acc
    }

    /// Runs `build` under the graph and checks every leaf gradient against
    /// finite differences of `Σ w ⊙ out` through the same computation. The
    /// weighted scalarization is applied by seeding the output node's
    /// gradient with `w` directly, which exercises `backward_from_seeds`
    /// without needing an elementwise-product op in the public API.
    fn check_op(
        inputs: Vec<Matrix<f64>>,
        build: impl Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId,
    ) {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = inputs.iter().map(|m| g.leaf(m)).collect();
        let out = build(&mut g, &leaves);

        let (rows, cols) = g.value(out).shape();
        let mut seed = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                seed.set(i, j, (i * cols + j) as f64 * 0.37 - 1.1);
            }
        }
        let mut grads: Vec<Option<Matrix<f64>>> = (0..g.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let grads = g.backward_from_seeds(grads);

        for (k, leaf) in leaves.iter().enumerate() {
            let analytic = grads[leaf.0].as_ref().expect("leaf got no gradient");
            let fd = fd_grad(&inputs, k, 1e-5, |xs| {
                let mut g2 = Graph::new();
                let l2: Vec<NodeId> = xs.iter().map(|m| g2.leaf(m)).collect();
                let o2 = build(&mut g2, &l2);
                weighted_sum(g2.value(o2))
            });
            assert_close(analytic, &fd, 1e-6);
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        // Offset chosen so no entry lands exactly on relu's kink at zero,
        // where finite differences and the subgradient disagree.
        let a = Matrix::from_fn(3, 4, |i, j| 0.3 * i as f64 - 0.2 * j as f64 + 0.13);
        let b = Matrix::from_fn(4, 2, |i, j| 0.15 * i as f64 + 0.4 * j as f64 - 0.3);
        check_op(vec![a.clone(), b.clone()], |g, l| g.matmul(l[0], l[1]));

        let bt = b.transpose(); // 2×4 for A·Bᵀ with A 3×4
        check_op(vec![a.clone(), bt], |g, l| g.matmul_nt(l[0], l[1]));

        let c = Matrix::from_fn(3, 4, |i, j| 0.05 * (i + j) as f64 - 0.1);
        check_op(vec![a.clone(), c], |g, l| g.add(l[0], l[1]));

        let bias = Matrix::from_fn(1, 4, |_, j| 0.2 * j as f64 - 0.3);
        check_op(vec![a.clone(), bias], |g, l| g.add_row_broadcast(l[0], l[1]));

        check_op(vec![a.clone()], |g, l| g.scale(l[0], -1.7));
        check_op(vec![a.clone()], |g, l| g.relu(l[0]));
        check_op(vec![a.clone()], |g, l| g.softmax_rows(l[0]));
        check_op(vec![a.clone()], |g, l| g.log_softmax_rows(l[0]));

        let gain = Matrix::from_fn(1, 4, |_, j| 1.0 + 0.1 * j as f64);
        let lbias = Matrix::from_fn(1, 4, |_, j| 0.05 * j as f64);
        check_op(vec![a.clone(), gain, lbias], |g, l| {
            g.layer_norm(l[0], l[1], l[2], 1e-5)
        });

        let mask = Matrix::from_fn(3, 4, |i, j| if (i + j) % 3 == 0 { 0.0 } else { 2.0 });
        check_op(vec![a.clone()], |g, l| g.dropout(l[0], mask.clone()));

        check_op(vec![a.clone()], |g, l| g.slice_cols(l[0], 1, 2));
        check_op(vec![a.clone(), a.map(|x| x * 0.5)], |g, l| {
            let s1 = g.slice_cols(l[0], 0, 2);
            let s2 = g.slice_cols(l[1], 2, 2);
            g.concat_cols(&[s1, s2])
        });

        let table = Matrix::from_fn(5, 3, |i, j| 0.1 * i as f64 - 0.2 * j as f64);
        check_op(vec![table], |g, l| g.gather_rows(l[0], &[3, 0, 3, 1]));
    }

    #[test]
    fn nll_sum_gradient_matches_finite_differences() {
        let logits = Matrix::from_fn(4, 5, |i, j| 0.3 * i as f64 - 0.25 * j as f64 + 0.05);
        let targets = [1u32, 4, 0, 2];
        let mask = [true, true, false, true];

        let mut g = Graph::new();
        let leaf = g.leaf(&logits);
        let lp = g.log_softmax_rows(leaf);
        let loss = g.nll_sum(lp, &targets, &mask);
        let mut grads = g.backward(loss, 1.0);
        let analytic = grads.take(leaf).unwrap();

        let fd = fd_grad(std::slice::from_ref(&logits), 0, 1e-6, |xs| {
            let mut g2 = Graph::new();
            let l2 = g2.leaf(&xs[0]);
            let lp2 = g2.log_softmax_rows(l2);
            let loss2 = g2.nll_sum(lp2, &targets, &mask);
            g2.value(loss2).get(0, 0)
        });
        assert_close(&analytic, &fd, 1e-7);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let a = Matrix::from_fn(2, 2, |i, j| (i + j) as f64);
        let b = Matrix::from_fn(2, 2, |i, j| (i * 2 + j) as f64);
        let mut g = Graph::new();
        let la = g.leaf(&a);
        let lb = g.leaf(&b);
        let lp = g.log_softmax_rows(la);
        let loss = g.nll_sum(lp, &[0, 1], &[true, true]);
        let grads = g.backward(loss, 1.0);
        assert!(grads.get(la).is_some());
        assert!(grads.get(lb).is_none());
    }

    #[test]
    fn backward_seed_is_linear() {
        let a = Matrix::from_fn(2, 3, |i, j| 0.2 * i as f64 + 0.1 * j as f64 - 0.15);
        let mut g = Graph::new();
        let la = g.leaf(&a);
        let lp = g.log_softmax_rows(la);
        let loss = g.nll_sum(lp, &[0, 2], &[true, true]);
        let g1 = g.backward(loss, 1.0);
        let g2 = g.backward(loss, 2.0);
        let (x, y) = (g1.get(la).unwrap(), g2.get(la).unwrap());
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                assert!((2.0 * x.get(i, j) - y.get(i, j)).abs() < 1e-12);
            }
        }
    }
}
