use std::collections::HashMap;

use super::kernels;
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        scale: f64,
    },
    Sum(Var, f64),
    MeanRows {
        x: Var,
        keep: Option<Vec<bool>>,
        count: usize,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; `backward` replays them in reverse.
///
/// Parameters from the bound [`ParamSet`] are copied onto the tape the first
/// time they are requested and reused afterwards.
#[derive(Debug)]
pub struct Tape<'p> {
    params: Option<&'p ParamSet>,
    bound: HashMap<ParamId, Var>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params: Some(params),
            bound: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    /// A tape with no parameter set attached.
    pub fn detached() -> Self {
        Tape {
            params: None,
            bound: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let params = self
            .params
            .ok_or_else(|| Error::contract("tape has no parameter set"))?;
        if id.0 >= params.len() {
            return Err(Error::contract(format!("unknown parameter id {}", id.0)));
        }
        let v = self.leaf(params.get(id).clone(), true);
        self.bound.insert(id, v);
        Ok(v)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::contract(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_a_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul_t", Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(name, Tensor::new(shape, out)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("scale", Tensor::new(shape, out)?, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("add_scalar", Tensor::new(shape, out)?, Op::AddScalar(a), rg)
    }

    /// Adds a length-`n` bias to every slice of `x[.. x n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, bv) in chunk.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        self.push("add_row", Tensor::new(shape, out)?, Op::AddRow(x, bias), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax along the last axis where entries with `keep[i] == false`
    /// receive zero probability. `keep` has one flag per element of `x`.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::shape("masked_softmax", self.shape(x), &[keep.len()]));
        }
        self.softmax_impl(x, Some(keep))
    }

    fn softmax_impl(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut out = vec![0.0; t.numel()];
        for (r, (src, dst)) in t.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let k = keep.map(|k| &k[r * n..(r + 1) * n]);
            if !kernels::softmax_slice(src, k, dst) {
                return Err(Error::contract(format!("softmax: row {r} is fully masked")));
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let t = self.value(x);
        let d = t.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; t.numel()];
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = Vec::with_capacity(t.rows());
        for (r, src) in t.data().chunks(d).enumerate() {
            let mut mean = 0.0;
            for v in src {
                mean += v;
            }
            mean /= d as f64;
            let mut var = 0.0;
            for v in src {
                var += (v - mean) * (v - mean);
            }
            var /= d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (src[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", Tensor::new(shape, out)?, op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("gelu", Tensor::new(shape, out)?, Op::Gelu(x), rg)
    }

    /// Softmax cross-entropy of each row of `logits` against its target;
    /// rows with `None` are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        reduction: Reduction,
    ) -> Result<Var> {
        let t = self.value(logits);
        let v = t.cols();
        if targets.len() != t.rows() {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let count = targets.iter().filter(|x| x.is_some()).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy: no targets"));
        }
        let mut probs = vec![0.0; t.numel()];
        let mut total = 0.0;
        for (r, (src, p)) in t.data().chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            let Some(target) = targets[r] else { continue };
            if target >= v {
                return Err(Error::contract(format!(
                    "cross_entropy: target {target} outside {v} classes"
                )));
            }
            kernels::softmax_slice(src, None, p);
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in src {
                sum += (x - max).exp();
            }
            total += max + sum.ln() - src[target];
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / count as f64,
        };
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            scale,
        };
        self.push("cross_entropy", Tensor::scalar(total * scale), op, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut s = 0.0;
        for v in self.value(x).data() {
            s += v;
        }
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x, 1.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let mut s = 0.0;
        for v in self.value(x).data() {
            s += v;
        }
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s / n), Op::Sum(x, 1.0 / n), rg)
    }

    /// Mean over the rows of `x[r x c]` whose `keep` flag is set; `[1 x c]`.
    pub fn mean_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        if let Some(k) = keep {
            if k.len() != r {
                return Err(Error::shape("mean_rows", self.shape(x), &[k.len()]));
            }
        }
        let kept = |i: usize| keep.map_or(true, |k| k[i]);
        let count = (0..r).filter(|&i| kept(i)).count();
        if count == 0 {
            return Err(Error::contract("mean_rows: no rows selected"));
        }
        let t = self.value(x);
        let mut out = vec![0.0; c];
        for i in (0..r).filter(|&i| kept(i)) {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        let rg = self.rg(&[x]);
        let op = Op::MeanRows {
            x,
            keep: keep.map(<[bool]>::to_vec),
            count,
        };
        self.push("mean_rows", Tensor::new(vec![1, c], out)?, op, rg)
    }

    /// Divides every row by its L2 norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for (r, chunk) in out.chunks_mut(c).enumerate() {
            let norm = kernels::dot(chunk, chunk).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::contract(format!("l2_normalize: row {r} has zero norm")));
            }
            for v in chunk.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push("l2_normalize", Tensor::new(shape, out)?, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows: no inputs"))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims2(p, "concat_rows")?;
            if c2 != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push("concat_rows", Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols: no inputs"))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r2, c) = self.dims2(p, "concat_cols")?;
            if r2 != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        self.push("concat_cols", Tensor::new(vec![r, cols], out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start .. start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::contract(format!(
                "slice_cols: range {start}..{} outside {c} columns",
                start + len
            )));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push("slice_cols", Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows: no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!("gather_rows: id {bad} outside {r} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather_rows", Tensor::new(vec![ids.len(), c], out)?, op, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate over every
    /// use of a value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        let mut bound: Vec<(ParamId, Var)> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        bound.sort();
        Ok(Gradients { grads, bound })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if wants(a) {
                    acc(a, kernels::matmul_a_bt(g, val(b), m, n, k));
                }
                if wants(b) {
                    acc(b, kernels::matmul_at_b(val(a), g, m, k, n));
                }
            }
            &Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if wants(a) {
                    acc(a, kernels::matmul(g, val(b), m, n, k));
                }
                if wants(b) {
                    acc(b, kernels::matmul_at_b(g, val(a), m, n, k));
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                acc(a, kernels::transpose(g, c, r));
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|x| -x).collect());
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                }
                if wants(b) {
                    acc(b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale(a, s) => acc(a, g.iter().map(|x| x * s).collect()),
            &Op::AddScalar(a) => acc(a, g.to_vec()),
            &Op::AddRow(x, bias) => {
                acc(x, g.to_vec());
                if wants(bias) {
                    let n = node.value.cols();
                    let mut db = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(bias, db);
                }
            }
            &Op::Softmax(x) => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((ys, gs), ds) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let inner = kernels::dot(ys, gs);
                    for j in 0..n {
                        ds[j] = ys[j] * (gs[j] - inner);
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gv = val(*gain);
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gs, hs) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gs[j] * hs[j];
                            db[j] += gs[j];
                        }
                    }
                    acc(*gain, dg);
                    acc(*bias, db);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let df = d as f64;
                    for (r, ((gs, hs), ds)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gs[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hs[j];
                        }
                        for j in 0..d {
                            let dh = gs[j] * gv[j];
                            ds[j] = inv_std[r] / df * (df * dh - sum_dh - hs[j] * sum_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
            }
            &Op::Gelu(x) => {
                acc(
                    x,
                    g.iter()
                        .zip(val(x))
                        .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                        .collect(),
                );
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let v = self.value(*logits).cols();
                let upstream = g[0] * scale;
                let mut dx = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        dx[r * v + j] = probs[r * v + j] * upstream;
                    }
                    dx[r * v + t] -= upstream;
                }
                acc(*logits, dx);
            }
            &Op::Sum(x, s) => acc(x, vec![g[0] * s; self.value(x).numel()]),
            Op::MeanRows { x, keep, count } => {
                let c = node.value.cols();
                let r = self.shape(*x)[0];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    if keep.as_ref().map_or(true, |k| k[i]) {
                        for j in 0..c {
                            dx[i * c + j] = g[j] / *count as f64;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, ((ys, gs), ds)) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
                    let inner = kernels::dot(ys, gs);
                    for j in 0..c {
                        ds[j] = (gs[j] - ys[j] * inner) / norms[r];
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * total + start..i * total + start + c]);
                        }
                        acc(p, d);
                    }
                    start += c;
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let len = node.value.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(x, dx);
            }
            Op::GatherRows { table, ids } => {
                let c = node.value.cols();
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += g[i * c + j];
                    }
                }
                acc(*table, dt);
            }
            &Op::Reshape(x) => acc(x, g.to_vec()),
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a recorded value; `None` when it does not require grad or
    /// the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.bound
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }

    /// Per-parameter gradients indexed by `ParamId`, length `n_params`.
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; n_params];
        for (p, v) in std::mem::take(&mut self.bound) {
            if p.0 < n_params {
                out[p.0] = self.grads[v.0].take();
            }
        }
        out
    }
}
