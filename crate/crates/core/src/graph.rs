//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly and
//! records enough to replay its vector-Jacobian product in
//! [`Graph::backward`]. Shape mismatches inside the tape are programming
//! errors and panic; user-facing layers validate shapes before calling in.

use crate::tensor::Matrix;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Exp(Var),
    Ln(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    SumCols(Var),
    MeanAll(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the value of `v` into a constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + 1·bias`, broadcasting a `1 × c` bias over every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows(), 1);
        assert_eq!(av.cols(), bv.cols());
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[a, bias]);
        self.push(value, Op::AddRowBias(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Ln(a), rg)
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Scales each row to unit L2 norm, dividing by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let rg = self.any_grad(&[a]);
        self.push(value, Op::NormalizeRows(a, eps), rg)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_vec(rows, cols, data).expect("sized above");
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows());
        let cols = av.cols();
        let value =
            Matrix::from_vec(len, cols, av.data()[start * cols..(start + len) * cols].to_vec())
                .expect("in bounds");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols());
        let mut value = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// `out.data[k] = a.data[index[k]]`, reshaped to `rows × cols`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols);
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Matrix::from_vec(rows, cols, data).expect("sized above");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Gather(a, index), rg)
    }

    /// Column means: `n × c -> 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows() as f64;
        let mut out = vec![0.0; av.cols()];
        for r in 0..av.rows() {
            for (o, v) in out.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        let value = Matrix::row_vector(&out);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Row sums: `n × c -> n × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let value = Matrix::from_vec(av.rows(), 1, data).expect("sized above");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::scalar(av.sum() / av.len() as f64);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MeanAll(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Weighted mean cross-entropy of row-softmaxed `logits` against
    /// `targets`: `Σ w[y_i]·(−log p_i[y_i]) / Σ w[y_i]`. Pass `None` for
    /// unit class weights.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        let mut probs = lv.clone();
        let weights: Vec<f64> = targets
            .iter()
            .map(|&t| class_weights.map_or(1.0, |w| w[t]))
            .collect();
        let total_weight: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            let row = probs.row_mut(r);
            softmax_in_place(row);
            // log p via log-sum-exp keeps large margins finite.
            let logits_row = lv.row(r);
            let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += w * (lse - logits_row[t]);
        }
        let value = Matrix::scalar(loss / total_weight);
        let rg = self.any_grad(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            rg,
        )
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.matmul_t(self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t_matmul(g));
                }
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRowBias(a, bias) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], gb);
                }
            }
            Op::Scale(a, k) => accumulate(&mut grads[a.0], g.scale(*k)),
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x.map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                accumulate(&mut grads[a.0], g.zip_map(&d, |u, v| u * v));
            }
            Op::Exp(a) => accumulate(&mut grads[a.0], g.zip_map(y, |u, v| u * v)),
            Op::Ln(a) => accumulate(&mut grads[a.0], g.zip_map(self.value(*a), |u, x| u / x)),
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::NormalizeRows(a, eps) => {
                let x = self.value(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    if norm > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (q - p * dot) / norm;
                        }
                    } else {
                        for (o, q) in ga.row_mut(r).iter_mut().zip(gr) {
                            *o = q / eps;
                        }
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.wants(*p) {
                        let chunk = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(
                            &mut grads[p.0],
                            Matrix::from_vec(rows, cols, chunk).expect("sized"),
                        );
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut chunk = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            chunk
                                .row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        accumulate(&mut grads[p.0], chunk);
                    }
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let cols = av.cols();
                ga.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                accumulate(&mut grads[a.0], ga);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Gather(a, index) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let dst = ga.data_mut();
                for (k, &i) in index.iter().enumerate() {
                    dst[i] += g.data()[k];
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let n = av.rows() as f64;
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let v = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|o| *o = v);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let v = g.item() / av.len() as f64;
                accumulate(&mut grads[a.0], Matrix::filled(av.rows(), av.cols(), v));
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                accumulate(&mut grads[a.0], Matrix::filled(av.rows(), av.cols(), g.item()));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let total: f64 = weights.iter().sum();
                let upstream = g.item();
                let mut ga = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = ga.row_mut(r);
                    row[t] -= 1.0;
                    let k = upstream * w / total;
                    row.iter_mut().for_each(|v| *v *= k);
                }
                accumulate(&mut grads[logits.0], ga);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
