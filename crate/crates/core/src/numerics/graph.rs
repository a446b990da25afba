use std::collections::HashMap;

use super::{NumArray, ParamStore};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: NumArray,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    AddN(Vec<Var>),
    MaxRows(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    CrossEntropyRows(Var, Vec<usize>, NumArray),
    BceWithLogits(Var, Vec<f64>, NumArray),
}

#[derive(Debug)]
struct Node {
    value: NumArray,
    op: Op,
}

/// Tape of matrix operations supporting reverse-mode differentiation.
///
/// Every value is a 2-D matrix. Parameters are pulled from a [`ParamStore`]
/// by name (once per graph) and gradients flow back into the same store on
/// [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn mismatch(op: &'static str, a: &NumArray, b: &NumArray) -> Error {
    Error::ShapeMismatch {
        op,
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
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

    fn push(&mut self, value: NumArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &NumArray {
        &self.nodes[v.0].value
    }

    /// First entry of a value; intended for `[1, 1]` results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn input(&mut self, value: NumArray) -> Var {
        let value = value.as_matrix();
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.as_matrix();
        let v = self.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NumArray> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(mismatch(op, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        NumArray::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(mismatch("add_row", va, vr));
        }
        let n = va.cols();
        let mut out = va.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vr.data()[i % n];
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Sum of equally shaped values, left to right.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or(Error::ShapeMismatch {
            op: "add_n",
            detail: "no operands".into(),
        })?;
        let mut out = self.value(first).clone();
        for &v in &vars[1..] {
            let vv = self.value(v);
            if !vv.same_shape(&out) {
                return Err(mismatch("add_n", &out, vv));
            }
            out.add_assign(vv);
        }
        Ok(self.push(out, Op::AddN(vars.to_vec())))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        let n = va.cols();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = vx.cols();
        if vg.cols() != n || vb.cols() != n || vg.rows() != 1 || vb.rows() != 1 {
            return Err(mismatch("layer_norm", vx, vg));
        }
        let mut xhat = vx.clone();
        let mut out = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, vg.data()[c] * h + vb.data()[c]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let rows = self.value(vars[0]).rows();
        let mut total = 0;
        for &v in vars {
            let vv = self.value(v);
            if vv.rows() != rows {
                return Err(mismatch("concat_cols", self.value(vars[0]), vv));
            }
            total += vv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in vars {
                data.extend_from_slice(self.value(v).row_slice(r));
            }
        }
        let out = NumArray::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(vars.to_vec())))
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let cols = self.value(vars[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in vars {
            let vv = self.value(v);
            if vv.cols() != cols {
                return Err(mismatch("concat_rows", self.value(vars[0]), vv));
            }
            rows += vv.rows();
            data.extend_from_slice(vv.data());
        }
        let out = NumArray::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(vars.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start >= end || end > va.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{start}..{end} of {:?}", va.shape()),
            });
        }
        let rows = va.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&va.row_slice(r)[start..end]);
        }
        let out = NumArray::matrix(rows, end - start, data)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start >= end || end > va.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{start}..{end} of {:?}", va.shape()),
            });
        }
        let c = va.cols();
        let data = va.data()[start * c..end * c].to_vec();
        let out = NumArray::matrix(end - start, c, data)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(NumArray::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(NumArray::scalar(s), Op::MeanAll(a))
    }

    /// Column-wise max over rows, `[m, n] -> [1, n]`. Ties resolve to the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut best = va.row_slice(0).to_vec();
        let mut arg = vec![0; n];
        for r in 1..va.rows() {
            for (c, &v) in va.row_slice(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    arg[c] = r;
                }
            }
        }
        let out = NumArray::row(best).expect("nonempty");
        self.push(out, Op::MaxRows(a, arg))
    }

    /// Row `i` of the result is row `idx[i]` of `a`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= va.rows()) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("indices {idx:?} into {:?}", va.shape()),
            });
        }
        let c = va.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(va.row_slice(i));
        }
        let out = NumArray::matrix(idx.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    /// `Σ_i −log softmax(a_i)[targets[i]]` over the rows of `a`.
    pub fn cross_entropy_rows(&mut self, a: Var, targets: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let n = va.cols();
        if targets.len() != va.rows() || targets.iter().any(|&t| t >= n) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_rows",
                detail: format!("{} targets for {:?}", targets.len(), va.shape()),
            });
        }
        let mut probs = va.clone();
        let mut loss = 0.0;
        for (r, row) in probs.data_mut().chunks_mut(n).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        Ok(self.push(
            NumArray::scalar(loss),
            Op::CrossEntropyRows(a, targets.to_vec(), probs),
        ))
    }

    /// Mean binary cross-entropy of `[m, 1]` logits against soft labels in `[0, 1]`.
    pub fn bce_with_logits(&mut self, a: Var, labels: &[f64]) -> Result<Var> {
        let va = self.value(a);
        if va.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("{} labels for {:?}", labels.len(), va.shape()),
            });
        }
        let m = labels.len() as f64;
        let mut loss = 0.0;
        for (&z, &y) in va.data().iter().zip(labels) {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let probs = va.map(sigmoid);
        Ok(self.push(
            NumArray::scalar(loss / m),
            Op::BceWithLogits(a, labels.to_vec(), probs),
        ))
    }

    /// Propagates d(out)/d(node) backwards and adds parameter gradients into `store`.
    ///
    /// `out` must be a single-element value.
    pub fn backward(&self, out: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("output must be scalar, got {:?}", self.value(out).shape()),
            });
        }
        let mut grads: Vec<Option<NumArray>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(NumArray::filled(self.value(out).shape(), 1.0));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => store.accumulate_grad(name, &g)?,
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let n = g.cols();
                    let mut gr = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (acc, v) in gr.iter_mut().zip(g.row_slice(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *row, NumArray::row(gr)?);
                    accumulate(&mut grads, *a, g);
                }
                Op::AddN(vars) => {
                    for &v in vars {
                        accumulate(&mut grads, v, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |x, y| x * y);
                    let gb = elementwise(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|v| v * c)),
                Op::Tanh(a) => {
                    let ga = elementwise(&g, &node.value, |d, y| d * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = elementwise(&g, &node.value, |d, y| d * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = elementwise(&g, self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            ga.set(r, c, yr[c] * (gr[c] - dot));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let (rows, n) = (g.rows(), g.cols());
                    let mut gx = NumArray::zeros(&[rows, n]);
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for r in 0..rows {
                        let gr = g.row_slice(r);
                        let hr = xhat.row_slice(r);
                        let dh: Vec<f64> = (0..n).map(|c| gr[c] * gam.data()[c]).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gg[c] += gr[c] * hr[c];
                            gb[c] += gr[c];
                            let v = inv_std[r] / n as f64
                                * (n as f64 * dh[c] - sum_dh - hr[c] * sum_dh_h);
                            gx.set(r, c, v);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, NumArray::row(gg)?);
                    accumulate(&mut grads, *beta, NumArray::row(gb)?);
                }
                Op::ConcatCols(vars) => {
                    let mut offset = 0;
                    for &v in vars {
                        let w = self.value(v).cols();
                        let rows = g.rows();
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads, v, NumArray::matrix(rows, w, part)?);
                        offset += w;
                    }
                }
                Op::ConcatRows(vars) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &v in vars {
                        let h = self.value(v).rows();
                        let part = g.data()[offset * c..(offset + h) * c].to_vec();
                        accumulate(&mut grads, v, NumArray::matrix(h, c, part)?);
                        offset += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let va = self.value(*a);
                    let mut ga = NumArray::zeros(&[va.rows(), va.cols()]);
                    for r in 0..g.rows() {
                        for (c, &v) in g.row_slice(r).iter().enumerate() {
                            ga.set(r, start + c, v);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let va = self.value(*a);
                    let c = va.cols();
                    let mut ga = NumArray::zeros(&[va.rows(), c]);
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::SumAll(a) => {
                    let d = g.data()[0];
                    let ga = NumArray::filled(&[self.value(*a).rows(), self.value(*a).cols()], d);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let va = self.value(*a);
                    let d = g.data()[0] / va.len() as f64;
                    accumulate(&mut grads, *a, NumArray::filled(&[va.rows(), va.cols()], d));
                }
                Op::MaxRows(a, arg) => {
                    let va = self.value(*a);
                    let mut ga = NumArray::zeros(&[va.rows(), va.cols()]);
                    for (c, &r) in arg.iter().enumerate() {
                        ga.set(r, c, g.data()[c]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let va = self.value(*a);
                    let c = va.cols();
                    let mut ga = NumArray::zeros(&[va.rows(), c]);
                    for (r, &i) in idx.iter().enumerate() {
                        for (dst, v) in ga.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(r)) {
                            *dst += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropyRows(a, targets, probs) => {
                    let d = g.data()[0];
                    let mut ga = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = ga.at(r, t);
                        ga.set(r, t, v - 1.0);
                    }
                    accumulate(&mut grads, *a, ga.map(|v| v * d));
                }
                Op::BceWithLogits(a, labels, probs) => {
                    let d = g.data()[0] / labels.len() as f64;
                    let mut ga = probs.clone();
                    for (v, y) in ga.data_mut().iter_mut().zip(labels) {
                        *v = (*v - y) * d;
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<NumArray>], v: Var, g: NumArray) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &NumArray, b: &NumArray, f: impl Fn(f64, f64) -> f64) -> NumArray {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    NumArray::new(vec![a.rows(), a.cols()], data).expect("same length")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
