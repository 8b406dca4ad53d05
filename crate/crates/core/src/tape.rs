//! Reverse-mode autodiff on a Wengert tape.
//!
//! The tape is an append-only arena of nodes. Building an op runs its
//! forward computation eagerly with the kernels from [`crate::matrix`], so
//! traced and untraced forward passes are bit-identical by construction.
//! Node ids index the arena in topological order, which makes the backward
//! pass a single reverse sweep with no sorting.
//!
//! The op set is closed: exactly the operations the network, the loss, and
//! the regularizers need. There is no broadcasting beyond the bias row add
//! and no implicit shape coercion.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a 1xN bias row onto every row of the left operand.
    AddRow(NodeId, NodeId),
    ScalarMul(f64, NodeId),
    Tanh(NodeId),
    /// Sum of squared entries, as a 1x1 node.
    FrobeniusSq(NodeId),
    /// Mean softmax cross-entropy over the batch, as a 1x1 node.
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
/// Nodes with no path to the output have no entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
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

    /// Value of a node. Ids are only valid on the tape that produced them.
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let value = self.value(m).add_row_broadcast(self.value(row))?;
        Ok(self.push(Op::AddRow(m, row), value))
    }

    pub fn scalar_mul(&mut self, k: f64, x: NodeId) -> NodeId {
        let value = self.value(x).scale(k);
        self.push(Op::ScalarMul(k, x), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), value)
    }

    pub fn frobenius_norm_sq(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).frobenius_norm_sq();
        self.push(
            Op::FrobeniusSq(x),
            Matrix::from_vec(1, 1, vec![v]).expect("1x1"),
        )
    }

    /// Fused stable softmax + cross-entropy, averaged over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        let (n, classes) = z.shape();
        if classes == 0 || n == 0 {
            return Err(Error::contract(
                "cross-entropy needs at least one row and one class".to_string(),
            ));
        }
        if labels.len() != n {
            return Err(Error::contract(format!(
                "{} labels for {} logit rows",
                labels.len(),
                n
            )));
        }
        let mut sum = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::contract(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            sum += lse - row[y];
        }
        let value = Matrix::from_vec(1, 1, vec![sum / n as f64]).expect("1x1");
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
        ))
    }

    /// Reverse sweep from a scalar node. Gradients of interior nodes (not
    /// just leaves) remain readable afterwards; the trainer uses that for
    /// effective-weight gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract(format!(
                "node id {} outside tape of length {}",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            let (r, c) = self.nodes[loss.0].value.shape();
            return Err(Error::contract(format!(
                "backward requires a scalar node, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).expect("1x1"));
        for idx in (0..=loss.0).rev() {
            let Some(d_out) = grads[idx].clone() else {
                continue;
            };
            self.apply_vjp(idx, &d_out, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Propagate d_out through node idx into its inputs.
    fn apply_vjp(&self, idx: usize, d_out: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let d_a = d_out.matmul(&self.value(*b).transpose())?;
                let d_b = self.value(*a).transpose().matmul(d_out)?;
                accumulate(grads, *a, d_a)?;
                accumulate(grads, *b, d_b)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, d_out.clone())?;
                accumulate(grads, *b, d_out.clone())?;
            }
            Op::AddRow(m, row) => {
                let col_sums = Matrix::from_fn(1, d_out.cols(), |_, c| {
                    (0..d_out.rows()).map(|r| d_out.get(r, c)).sum()
                });
                accumulate(grads, *row, col_sums)?;
                accumulate(grads, *m, d_out.clone())?;
            }
            Op::ScalarMul(k, x) => {
                accumulate(grads, *x, d_out.scale(*k))?;
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                let mut d_x = d_out.clone();
                for (g, y) in d_x.data_mut().iter_mut().zip(y.data()) {
                    *g *= 1.0 - y * y;
                }
                accumulate(grads, *x, d_x)?;
            }
            Op::FrobeniusSq(x) => {
                let g = d_out.get(0, 0);
                accumulate(grads, *x, self.value(*x).scale(2.0 * g))?;
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let g = d_out.get(0, 0);
                let z = self.value(*logits);
                let n = z.rows() as f64;
                let mut d_z = z.softmax_rows()?;
                for (i, &y) in labels.iter().enumerate() {
                    d_z.set(i, y, d_z.get(i, y) - 1.0);
                }
                accumulate(grads, *logits, d_z.scale(g / n))?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(g) => {
            *g = g.add(&delta)?;
        }
        slot @ None => {
            *slot = Some(delta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
    }

    /// Central finite difference of a scalar function of one leaf entry.
    fn fd_grad(mut f: impl FnMut(&Matrix) -> f64, at: &Matrix, eps: f64) -> Matrix {
        Matrix::from_fn(at.rows(), at.cols(), |r, c| {
            let mut plus = at.clone();
            plus.set(r, c, at.get(r, c) + eps);
            let mut minus = at.clone();
            minus.set(r, c, at.get(r, c) - eps);
            (f(&plus) - f(&minus)) / (2.0 * eps)
        })
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    fn assert_close_to_fd(analytic: &Matrix, numeric: &Matrix, tol: f64) {
        for r in 0..analytic.rows() {
            for c in 0..analytic.cols() {
                let e = rel_err(analytic.get(r, c), numeric.get(r, c));
                assert!(
                    e < tol,
                    "grad mismatch at ({r},{c}): analytic {}, fd {}, rel {e}",
                    analytic.get(r, c),
                    numeric.get(r, c)
                );
            }
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a0 = random_matrix(3, 4, &mut rng);
        let b0 = random_matrix(4, 2, &mut rng);

        let eval = |a: &Matrix, b: &Matrix| {
            let mut t = Tape::new();
            let a = t.leaf(a.clone());
            let b = t.leaf(b.clone());
            let prod = t.matmul(a, b).unwrap();
            let loss = t.frobenius_norm_sq(prod);
            (t, a, b, loss)
        };

        let (t, a, b, loss) = eval(&a0, &b0);
        let grads = t.backward(loss).unwrap();
        let fd_a = fd_grad(
            |m| {
                let (t, _, _, l) = eval(m, &b0);
                t.value(l).get(0, 0)
            },
            &a0,
            1e-5,
        );
        let fd_b = fd_grad(
            |m| {
                let (t, _, _, l) = eval(&a0, m);
                t.value(l).get(0, 0)
            },
            &b0,
            1e-5,
        );
        assert_close_to_fd(grads.get(a).unwrap(), &fd_a, 1e-5);
        assert_close_to_fd(grads.get(b).unwrap(), &fd_b, 1e-5);
    }

    #[test]
    fn layer_graph_gradient_matches_finite_difference() {
        // tanh(x W + b) through cross-entropy: the exact op chain the
        // network forward pass builds per layer.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x0 = random_matrix(5, 3, &mut rng);
        let w0 = random_matrix(3, 4, &mut rng);
        let b0 = random_matrix(1, 4, &mut rng);
        let labels = vec![0, 3, 1, 2, 0];

        let run = |w: &Matrix, b: &Matrix| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let w_id = t.leaf(w.clone());
            let b_id = t.leaf(b.clone());
            let z = t.matmul(x, w_id).unwrap();
            let z = t.add_row(z, b_id).unwrap();
            let h = t.tanh(z);
            let loss = t.softmax_cross_entropy(h, &labels).unwrap();
            (t, w_id, b_id, loss)
        };

        let (t, w_id, b_id, loss) = run(&w0, &b0);
        let grads = t.backward(loss).unwrap();
        let fd_w = fd_grad(
            |m| {
                let (t, _, _, l) = run(m, &b0);
                t.value(l).get(0, 0)
            },
            &w0,
            1e-5,
        );
        let fd_b = fd_grad(
            |m| {
                let (t, _, _, l) = run(&w0, m);
                t.value(l).get(0, 0)
            },
            &b0,
            1e-5,
        );
        assert_close_to_fd(grads.get(w_id).unwrap(), &fd_w, 1e-4);
        assert_close_to_fd(grads.get(b_id).unwrap(), &fd_b, 1e-4);
    }

    #[test]
    fn cross_entropy_value_matches_naive_oracle() {
        // Small logits, so the naive un-stabilized formula is safe to use
        // as an independent oracle.
        let z = Matrix::from_vec(2, 3, vec![0.2, -0.4, 0.9, 1.1, 0.0, -0.3]).unwrap();
        let labels = vec![2, 0];
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = z.row(i);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            oracle += -(row[y].exp() / denom).ln();
        }
        oracle /= labels.len() as f64;

        let mut t = Tape::new();
        let z_id = t.leaf(z);
        let loss = t.softmax_cross_entropy(z_id, &labels).unwrap();
        assert!((t.value(loss).get(0, 0) - oracle).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let z = random_matrix(4, 3, &mut rng);
        let labels = vec![1, 0, 2, 2];
        let mut t = Tape::new();
        let z_id = t.leaf(z.clone());
        let loss = t.softmax_cross_entropy(z_id, &labels).unwrap();
        let grads = t.backward(loss).unwrap();

        let mut want = z.softmax_rows().unwrap();
        for (i, &y) in labels.iter().enumerate() {
            want.set(i, y, want.get(i, y) - 1.0);
        }
        let want = want.scale(1.0 / labels.len() as f64);
        assert!(grads.get(z_id).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::zeros(2, 3));
        assert!(t.softmax_cross_entropy(z, &[0]).is_err());
        assert!(t.softmax_cross_entropy(z, &[0, 3]).is_err());
    }

    #[test]
    fn bias_gradient_is_column_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let m0 = random_matrix(6, 2, &mut rng);
        let b0 = random_matrix(1, 2, &mut rng);
        let mut t = Tape::new();
        let m = t.leaf(m0);
        let b = t.leaf(b0);
        let s = t.add_row(m, b).unwrap();
        let loss = t.frobenius_norm_sq(s);
        let grads = t.backward(loss).unwrap();
        // d frob / d s = 2 s, and the bias grad is its column sum.
        let s_val = t.value(s);
        let want = Matrix::from_fn(1, 2, |_, c| {
            (0..s_val.rows()).map(|r| 2.0 * s_val.get(r, c)).sum()
        });
        assert!(grads.get(b).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn fanout_accumulates_and_trace_gradient_is_identity() {
        // trace(W) built as sum_i e_i W e_i^T exercises gradient
        // accumulation: W feeds n separate matmuls. d trace / dW = I.
        let n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let w0 = random_matrix(n, n, &mut rng);
        let mut t = Tape::new();
        let w = t.leaf(w0);
        let mut total: Option<NodeId> = None;
        for i in 0..n {
            let e = t.leaf(Matrix::from_fn(1, n, |_, c| if c == i { 1.0 } else { 0.0 }));
            let et = t.leaf(Matrix::from_fn(n, 1, |r, _| if r == i { 1.0 } else { 0.0 }));
            let we = t.matmul(e, w).unwrap();
            let term = t.matmul(we, et).unwrap();
            total = Some(match total {
                Some(acc) => t.add(acc, term).unwrap(),
                None => term,
            });
        }
        let loss = total.unwrap();
        let grads = t.backward(loss).unwrap();
        let diff = grads
            .get(w)
            .unwrap()
            .max_abs_diff(&Matrix::identity(n))
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::identity(2));
        let b = t.leaf(Matrix::identity(2));
        let loss = t.frobenius_norm_sq(a);
        let grads = t.backward(loss).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 2));
        let err = t.backward(a).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(26);
            let mut t = Tape::new();
            let x = t.leaf(random_matrix(4, 3, &mut rng));
            let w = t.leaf(random_matrix(3, 3, &mut rng));
            let z = t.matmul(x, w).unwrap();
            let h = t.tanh(z);
            let loss = t.softmax_cross_entropy(h, &[0, 1, 2, 1]).unwrap();
            let grads = t.backward(loss).unwrap();
            grads.get(w).unwrap().clone()
        };
        let a = build();
        let b = build();
        assert_eq!(a.data(), b.data());
    }
}
