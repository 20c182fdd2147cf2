use std::collections::BTreeMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Floor on the row norm in `normalize_rows`.
pub(crate) const NORM_EPS: f64 = 1e-12;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    RowSums(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Vec<f64>),
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        clamped: Vec<bool>,
    },
    Log(Var),
    Exp(Var),
    Diag(Var),
    LogSumExpRows {
        x: Var,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Records a forward computation so it can be differentiated.
///
/// Nodes are appended in evaluation order, which is a valid topological
/// order for the reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn var(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(name.to_string()))
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn checked(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(rows, cols, value, op))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.node(v) {
            Node {
                rows: 1,
                cols: 1,
                value,
                ..
            } => Ok(value[0]),
            n => Err(Error::contract(format!(
                "expected scalar, got {}x{}",
                n.rows, n.cols
            ))),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("graph values are finite")
    }

    /// Binds a trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = t.dims2().expect("parameters are at most 2-D");
        self.push(r, c, t.values().to_vec(), Op::Param(id))
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.values().to_vec(), Op::Constant))
    }

    pub fn constant_row(&mut self, values: &[f64]) -> Var {
        self.push(1, values.len(), values.to_vec(), Op::Constant)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, name)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.checked(name, r, c, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(Error::dim(format!(
                "{name}: row {:?} vs {r}x{c}",
                self.shape(b)
            )));
        }
        let bv = self.value(b);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, bv[i % c]))
            .collect();
        self.checked(name, r, c, value, op)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|x| x * s).collect();
        self.checked("scale", r, c, value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|x| x + s).collect();
        self.checked("add_scalar", r, c, value, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        if k != k2 {
            return Err(Error::dim(format!("matmul: {r}x{k} by {k2}x{c}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * c..(p + 1) * c];
                orow.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
            }
        }
        self.checked("matmul", r, c, out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        Ok(self.push(c, r, out, Op::Transpose(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.shape(*p).0)
            .ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        if parts.iter().any(|p| self.shape(*p).0 != rows) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let pc = self.shape(*p).1;
                out.extend_from_slice(&self.value(*p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.shape(*p).1)
            .ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        if parts.iter().any(|p| self.shape(*p).1 != cols) {
            return Err(Error::dim("concat_rows: column counts differ"));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            rows += self.shape(*p).0;
            out.extend_from_slice(self.value(*p));
        }
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::dim(format!("slice_rows {start}+{len} of {r}")));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::dim(format!("slice_cols {start}+{len} of {c}")));
        }
        let av = self.value(a);
        let out = (0..r)
            .flat_map(|i| av[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.push(r, len, out, Op::SliceCols(a, start)))
    }

    /// Column-wise mean: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::dim("mean of zero rows"));
        }
        let av = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            out.iter_mut()
                .zip(&av[i * c..(i + 1) * c])
                .for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.checked("mean_rows", 1, c, out, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.checked("sum", 1, 1, vec![s], Op::SumAll(a))
    }

    /// Per-row sums: `r x c -> r x 1`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .chunks(c.max(1))
            .map(|row| row.iter().sum())
            .collect();
        self.checked("row_sums", r, 1, out, Op::RowSums(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = softmax_rows_raw(self.value(a), c);
        self.checked("softmax_rows", r, c, out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let probs = softmax_rows_raw(self.value(a), c);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row.iter().map(move |x| x - lse)
            })
            .collect();
        self.checked("log_softmax_rows", r, c, out, Op::LogSoftmaxRows(a, probs))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in self.value(a).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|x| (x - mean) * is));
        }
        self.checked(
            "layer_norm_rows",
            r,
            c,
            out,
            Op::LayerNormRows { x: a, inv_std },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.max(0.0)).collect();
        Ok(self.push(r, c, out, Op::Relu(a)))
    }

    /// Divides each row by `max(norm, NORM_EPS)`, so a zero row stays zero
    /// and its cosine with anything is 0. A non-finite norm is an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        let mut clamped = Vec::with_capacity(r);
        for row in self.value(a).chunks(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !n.is_finite() {
                return Err(Error::Numeric("normalize_rows (non-finite norm)".into()));
            }
            let n_eff = n.max(NORM_EPS);
            norms.push(n_eff);
            clamped.push(n < NORM_EPS);
            out.extend(row.iter().map(|x| x / n_eff));
        }
        Ok(self.push(
            r,
            c,
            out,
            Op::NormalizeRows {
                x: a,
                norms,
                clamped,
            },
        ))
    }

    /// Row-wise cosine similarity of two equally shaped blocks: `r x 1`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_rows")?;
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let prod = self.mul(na, nb)?;
        self.row_sums(prod)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        self.checked("log", r, c, out, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        self.checked("exp", r, c, out, Op::Exp(a))
    }

    /// Diagonal of a square block as an `r x 1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::dim(format!("diag of {r}x{c}")));
        }
        let out = (0..r).map(|i| self.value(a)[i * c + i]).collect();
        Ok(self.push(r, 1, out, Op::Diag(a)))
    }

    /// Row-wise log-sum-exp restricted to entries where `mask` is true:
    /// `r x c -> r x 1`. Every row must keep at least one entry.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(Error::dim("logsumexp mask shape"));
            }
        }
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let av = self.value(a);
        let mut out = Vec::with_capacity(r);
        let mut probs = vec![0.0; r * c];
        for i in 0..r {
            let idx = || (i * c..(i + 1) * c).filter(|&j| keep(j));
            let m = idx().map(|j| av[j]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::contract(format!("logsumexp row {i} has no entries")));
            }
            let z: f64 = idx().map(|j| (av[j] - m).exp()).sum();
            for j in idx() {
                probs[j] = (av[j] - m).exp() / z;
            }
            out.push(m + z.ln());
        }
        self.checked(
            "logsumexp_rows",
            r,
            1,
            out,
            Op::LogSumExpRows { x: a, probs },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.node(loss);
        if (n.rows, n.cols) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {}x{}",
                n.rows, n.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[idx]) {
                match params.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
                    None => {
                        params.insert(*id, g.clone());
                    }
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(x, (gy, y))| *x += gy * y)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(x, (gy, y))| *x += gy * y)
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (i, gy) in g.iter().enumerate() {
                        gb[i % cols] += gy;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for (i, gy) in g.iter().enumerate() {
                        ga[i] += gy * bv[i % cols];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, gy) in g.iter().enumerate() {
                        gb[i % cols] += gy * av[i];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
            }),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MatMul(a, b) => {
                let k = self.nodes[a.0].cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G · Bᵀ
                acc(*a, &mut |ga| {
                    for i in 0..rows {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..cols {
                                s += g[i * cols + j] * bv[p * cols + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |gb| {
                    for i in 0..rows {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let grow = &g[i * cols..(i + 1) * cols];
                            gb[p * cols..(p + 1) * cols]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, y)| *o += x * y);
                        }
                    }
                });
            }
            Op::Transpose(a) => acc(*a, &mut |ga| {
                // node is rows x cols, input is cols x rows
                for i in 0..rows {
                    for j in 0..cols {
                        ga[j * rows + i] += g[i * cols + j];
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p.0].cols;
                    acc(*p, &mut |gp| {
                        for i in 0..rows {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * cols + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(*p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => acc(*a, &mut |ga| {
                add_into(&mut ga[start * cols..(start + rows) * cols], g)
            }),
            Op::SliceCols(a, start) => {
                let ac = self.nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * ac + start + j] += g[i * cols + j];
                        }
                    }
                })
            }
            Op::MeanRows(a) => {
                let r = self.nodes[a.0].rows;
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i % cols] / r as f64;
                    }
                })
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::RowSums(a) => {
                let c = self.nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i / c];
                    }
                })
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..rows {
                        let r = i * cols..(i + 1) * cols;
                        let dot: f64 = g[r.clone()]
                            .iter()
                            .zip(&y[r.clone()])
                            .map(|(p, q)| p * q)
                            .sum();
                        for j in r {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmaxRows(a, probs) => acc(*a, &mut |ga| {
                for i in 0..rows {
                    let r = i * cols..(i + 1) * cols;
                    let gs: f64 = g[r.clone()].iter().sum();
                    for j in r {
                        ga[j] += g[j] - probs[j] * gs;
                    }
                }
            }),
            Op::LayerNormRows { x, inv_std } => {
                let y = &node.value;
                acc(*x, &mut |ga| {
                    let n = cols as f64;
                    for i in 0..rows {
                        let r = i * cols..(i + 1) * cols;
                        let gm = g[r.clone()].iter().sum::<f64>() / n;
                        let gy = g[r.clone()]
                            .iter()
                            .zip(&y[r.clone()])
                            .map(|(p, q)| p * q)
                            .sum::<f64>()
                            / n;
                        for j in r {
                            ga[j] += inv_std[i] * (g[j] - gm - y[j] * gy);
                        }
                    }
                })
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        if av[i] > 0.0 {
                            *x += g[i];
                        }
                    }
                })
            }
            Op::NormalizeRows { x, norms, clamped } => {
                let y = &node.value;
                acc(*x, &mut |ga| {
                    for i in 0..rows {
                        let r = i * cols..(i + 1) * cols;
                        if clamped[i] {
                            for j in r {
                                ga[j] += g[j] / norms[i];
                            }
                            continue;
                        }
                        let dot: f64 = g[r.clone()]
                            .iter()
                            .zip(&y[r.clone()])
                            .map(|(p, q)| p * q)
                            .sum();
                        for j in r {
                            ga[j] += (g[j] - y[j] * dot) / norms[i];
                        }
                    }
                })
            }
            Op::Log(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] / av[i];
                    }
                })
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * y[i];
                    }
                })
            }
            Op::Diag(a) => {
                let c = self.nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for i in 0..rows {
                        ga[i * c + i] += g[i];
                    }
                })
            }
            Op::LogSumExpRows { x, probs } => {
                let c = self.nodes[x.0].cols;
                acc(*x, &mut |ga| {
                    for (j, gx) in ga.iter_mut().enumerate() {
                        *gx += g[j / c] * probs[j];
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Max-subtracted softmax over each row of a row-major block.
pub(crate) fn softmax_rows_raw(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(cols.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|x| (x - m).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|x| *x /= z);
    }
    out
}
