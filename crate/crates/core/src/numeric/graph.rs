//! Eager reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation computes its value when it is recorded, so node ids are
//! already in topological order. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for trainable parameters only; frozen
//! tensors and constants never appear in the result.

use std::collections::BTreeMap;

use super::{NumericError, Tensor};

pub type NodeId = usize;

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Debug)]
enum Leaf {
    Param(String),
    Frozen,
    Constant,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(Leaf),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    /// Adds a `[1, m]` row to every row of `a`.
    AddRow(NodeId, NodeId),
    /// Multiplies every row of `a` by a `[1, m]` row.
    MulRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Relu(NodeId),
    ConcatCols(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Column means: `[n, m] -> [1, m]`.
    MeanRows(NodeId),
    /// Mean softmax cross-entropy of each row against an integer target.
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = t.matrix_shape();
    Tensor::new(vec![r, c], t.into_data()).expect("same element count")
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.matrix_shape();
    let m = b.cols();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, m, out).expect("matmul shape")
}

/// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
pub(crate) fn matmul_t(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.matrix_shape();
    let m = b.rows();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(n, m, out).expect("matmul_t shape")
}

/// `aᵀ · b` for `a: [n, k]`, `b: [n, m]`.
fn t_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.matrix_shape();
    let m = b.cols();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &bd[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(k, m, out).expect("t_matmul shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

fn row_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Numerically stable softmax of each row.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let data = (0..t.rows()).flat_map(|i| row_softmax(t.row(i))).collect();
    Tensor::new(t.shape().to_vec(), data).expect("softmax shape")
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Registers a trainable tensor. Registering the same name twice returns
    /// the existing node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(as_matrix(value.clone()), Op::Leaf(Leaf::Param(name.to_owned())));
        self.params.insert(name.to_owned(), id);
        id
    }

    /// Registers a non-trainable tensor (e.g. the embedding table).
    pub fn frozen(&mut self, value: &Tensor) -> NodeId {
        self.push(as_matrix(value.clone()), Op::Leaf(Leaf::Frozen))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(as_matrix(value), Op::Leaf(Leaf::Constant))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(mismatch("matmul", va, vb));
        }
        let v = matmul(va, vb);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(mismatch("matmul_t", va, vb));
        }
        let v = matmul_t(va, vb);
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    fn check_row(&self, op: &'static str, a: NodeId, row: NodeId) -> Result<(), NumericError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(mismatch(op, va, vr));
        }
        Ok(())
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NumericError> {
        self.check_row("add_row", a, row)?;
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vr.data()[i % c])
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NumericError> {
        self.check_row("mul_row", a, row)?;
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vr.data()[i % c])
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va, vb));
        }
        let v = zip_map(va, vb, f);
        Ok(self.push(v, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(mismatch("concat_cols", va, vb));
        }
        let (n, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let v = Tensor::matrix(n, ca + cb, data)?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Tensor::scalar(va.sum() / va.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (n, c) = va.matrix_shape();
        let mut out = vec![0.0; c];
        for i in 0..n {
            for (o, x) in out.iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let v = Tensor::row_vector(out);
        self.push(v, Op::MeanRows(a))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, NumericError> {
        let vl = self.value(logits);
        if vl.rows() != targets.len() {
            return Err(NumericError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vl.cols()) {
            return Err(NumericError::IndexOutOfRange {
                index: t,
                bound: vl.cols(),
            });
        }
        let n = targets.len();
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = vl.row(i);
                log_sum_exp(row) - row[t]
            })
            .sum();
        let v = Tensor::scalar(total / n as f64);
        Ok(self.push(v, Op::SoftmaxCrossEntropy(logits, targets.to_vec())))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        if !lv.data()[0].is_finite() {
            return Err(NumericError::NonFiniteLoss { node: loss });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss + 1];
        adj[loss] = Some(Tensor::full(lv.shape(), 1.0));

        fn acc(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut adj[id] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        }

        let mut grads = Gradients::new();
        for id in (0..=loss).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf(Leaf::Param(name)) => {
                    grads.insert(name.clone(), g);
                }
                Op::Leaf(_) => {}
                Op::MatMul(a, b) => {
                    let ga = matmul_t(&g, self.value(*b));
                    let gb = t_matmul(self.value(*a), &g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let ga = matmul(&g, self.value(*b));
                    let gb = t_matmul(&g, self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for (i, x) in g.data().iter().enumerate() {
                        gr[i % c] += x;
                    }
                    acc(&mut adj, *row, Tensor::row_vector(gr));
                    acc(&mut adj, *a, g);
                }
                Op::MulRow(a, row) => {
                    let va = self.value(*a);
                    let vr = self.value(*row);
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    let mut ga = g.clone();
                    for (i, (gx, ax)) in ga.data_mut().iter_mut().zip(va.data()).enumerate() {
                        gr[i % c] += *gx * ax;
                        *gx *= vr.data()[i % c];
                    }
                    acc(&mut adj, *row, Tensor::row_vector(gr));
                    acc(&mut adj, *a, ga);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|x| -x));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut adj, *a, g.map(|x| x * f)),
                Op::AddScalar(a) => acc(&mut adj, *a, g),
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &node.value, |x, y| x * (1.0 - y * y));
                    acc(&mut adj, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = zip_map(&g, &node.value, |x, y| x * y);
                    acc(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = zip_map(&g, self.value(*a), |x, y| 2.0 * x * y);
                    acc(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip_map(&g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    acc(&mut adj, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let n = g.rows();
                    let mut ga = Vec::with_capacity(n * ca);
                    let mut gb = Vec::with_capacity(n * cb);
                    for i in 0..n {
                        let row = g.row(i);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    acc(&mut adj, *a, Tensor::matrix(n, ca, ga)?);
                    acc(&mut adj, *b, Tensor::matrix(n, cb, gb)?);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    acc(&mut adj, *a, Tensor::full(self.value(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let s = g.data()[0] / va.len() as f64;
                    acc(&mut adj, *a, Tensor::full(va.shape(), s));
                }
                Op::MeanRows(a) => {
                    let va = self.value(*a);
                    let (n, c) = va.matrix_shape();
                    let data = (0..n * c).map(|i| g.data()[i % c] / n as f64).collect();
                    acc(&mut adj, *a, Tensor::new(va.shape().to_vec(), data)?);
                }
                Op::SoftmaxCrossEntropy(logits, targets) => {
                    let s = g.data()[0] / targets.len() as f64;
                    let mut probs = softmax_rows(self.value(*logits));
                    let c = probs.cols();
                    for (i, &t) in targets.iter().enumerate() {
                        probs.data_mut()[i * c + t] -= 1.0;
                    }
                    probs.scale_in_place(s);
                    acc(&mut adj, *logits, probs);
                }
            }
        }
        for (name, &id) in &self.params {
            grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(self.value(id).shape()));
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_one_hot() {
        let logits = Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let mut g = Graph::new();
        let l = g.param("logits", &logits);
        let ce = g.softmax_cross_entropy(l, &[1]).unwrap();
        let grads = g.backward(ce).unwrap();
        let p = softmax_rows(&logits);
        let expected = [p.data()[0], p.data()[1] - 1.0, p.data()[2]];
        for (a, b) in grads["logits"].data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_and_constant_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let e = g.frozen(&Tensor::matrix(2, 2, vec![0.5, 0.1, 0.2, 0.3]).unwrap());
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let h = g.matmul(x, w).unwrap();
        let y = g.matmul_t(h, e).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["w"]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(NumericError::NonScalarLoss { .. })
        ));
        let big = g.param("b", &Tensor::scalar(1000.0));
        let e = g.exp(big);
        let e2 = g.exp(e);
        assert!(matches!(
            g.backward(e2),
            Err(NumericError::NonFiniteLoss { node }) if node == e2
        ));
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", &Tensor::scalar(2.0));
        let _b = g.param("b", &Tensor::row_vector(vec![1.0, 1.0]));
        let y = g.square(a);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["b"].data(), &[0.0, 0.0]);
    }
}
