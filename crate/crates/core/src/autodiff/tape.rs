use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// [m,n] + row vector [n], broadcast over rows.
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    /// Row lookup into a [V,d] table.
    Gather { table: usize, ids: Vec<usize> },
    Softmax(usize),
    LogSoftmax(usize),
    Log(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Gelu(usize),
    /// Normalization over the last axis with affine gamma/beta.
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Sum(usize),
    Mean(usize),
    /// Pick (row, col) entries out of a 2-D tensor into a vector.
    Select { src: usize, picks: Vec<(usize, usize)> },
    SliceCols { src: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Wengert list: ops are recorded in construction order, which is by
/// definition topological, and replayed in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Add(a.0, b.0), Tensor::from_parts(shape, data))
    }

    /// `a` is [m,n], `row` is [n]; adds `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(row).shape(), [n], "add_row: width mismatch");
        let mut data = self.value(a).data().to_vec();
        let r = self.value(row).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        self.push(Op::AddRow(a.0, row.0), Tensor::from_parts(vec![m, n], data))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Mul(a.0, b.0), Tensor::from_parts(shape, data))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Scale(a.0, c), Tensor::from_parts(shape, data))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::Matmul(a.0, b.0), Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose(a.0), Tensor::from_parts(vec![n, m], out))
    }

    /// Embedding lookup: rows `ids` of the [V,d] `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.value(table).dims2();
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "gather: id {} out of range {}", id, v);
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            Op::Gather { table: table.0, ids: ids.to_vec() },
            Tensor::from_parts(vec![ids.len(), d], out),
        )
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last == 0 {
            return Err(Error::Shape("softmax over empty axis".into()));
        }
        let data = rowwise(self.value(a).data(), last, softmax_row);
        Ok(self.push(Op::Softmax(a.0), Tensor::from_parts(shape, data)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let last = *shape.last().expect("log_softmax: scalar input");
        assert!(last > 0, "log_softmax over empty axis");
        let data = rowwise(self.value(a).data(), last, log_softmax_row);
        self.push(Op::LogSoftmax(a.0), Tensor::from_parts(shape, data))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        self.push(Op::Log(a.0), Tensor::from_parts(shape, data))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a.0), Tensor::from_parts(shape, data))
    }

    /// log(sigmoid(x)) computed as -softplus(-x); stable for large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|&x| log_sigmoid(x)).collect();
        self.push(Op::LogSigmoid(a.0), Tensor::from_parts(shape, data))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        self.push(Op::Gelu(a.0), Tensor::from_parts(shape, data))
    }

    /// Layer norm over the last axis: gamma * (x - mu) / sqrt(var + eps) + beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().expect("layer_norm: scalar input");
        assert_eq!(self.value(gamma).shape(), [n]);
        assert_eq!(self.value(beta).shape(), [n]);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (row, orow) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let (xhat, _) = normalize_row(row);
            for j in 0..n {
                orow[j] = g[j] * xhat[j] + b[j];
            }
        }
        self.push(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 },
            Tensor::from_parts(shape, out),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a.0), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        assert!(n > 0, "mean of empty tensor");
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Mean(a.0), Tensor::scalar(s / n as f64))
    }

    /// Pick the given (row, col) entries of a 2-D tensor into a [k] vector.
    pub fn select(&mut self, src: Var, picks: &[(usize, usize)]) -> Var {
        let (m, n) = self.value(src).dims2();
        let data = self.value(src).data();
        let out: Vec<f64> = picks
            .iter()
            .map(|&(r, c)| {
                assert!(r < m && c < n, "select: pick ({r},{c}) out of [{m},{n}]");
                data[r * n + c]
            })
            .collect();
        self.push(
            Op::Select { src: src.0, picks: picks.to_vec() },
            Tensor::from_parts(vec![picks.len()], out),
        )
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(src).dims2();
        assert!(start + len <= n, "slice_cols: range out of bounds");
        let data = self.value(src).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&data[i * n + start..i * n + start + len]);
        }
        self.push(
            Op::SliceCols { src: src.0, start, len },
            Tensor::from_parts(vec![m, len], out),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.value(p).dims2();
                assert_eq!(pm, m, "concat_cols: row count mismatch");
                pn
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            Tensor::from_parts(vec![m, total], out),
        )
    }

    /// Sum of scalar vars.
    pub fn sum_vars(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "sum_vars of empty list");
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Mean of scalar vars.
    pub fn mean_vars(&mut self, vars: &[Var]) -> Var {
        let s = self.sum_vars(vars);
        self.scale(s, 1.0 / vars.len() as f64)
    }

    /// Reverse sweep from a scalar loss. Every node gets a gradient buffer;
    /// nodes off the path to the loss keep exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.value.numel()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Split borrows: take the output grad out, scatter into inputs.
            let g_out = std::mem::take(&mut grads[i]);
            self.accumulate(i, &g_out, &mut grads);
            grads[i] = g_out;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                axpy(&mut grads[*a], g, 1.0);
                axpy(&mut grads[*b], g, 1.0);
            }
            Op::AddRow(a, row) => {
                axpy(&mut grads[*a], g, 1.0);
                let n = grads[*row].len();
                for (j, &gv) in g.iter().enumerate() {
                    grads[*row][j % n] += gv;
                }
            }
            Op::Mul(a, b) => {
                let (da, db): (Vec<f64>, Vec<f64>) = {
                    let va = self.nodes[*a].value.data();
                    let vb = self.nodes[*b].value.data();
                    (
                        g.iter().zip(vb).map(|(gv, y)| gv * y).collect(),
                        g.iter().zip(va).map(|(gv, x)| gv * x).collect(),
                    )
                };
                axpy(&mut grads[*a], &da, 1.0);
                axpy(&mut grads[*b], &db, 1.0);
            }
            Op::Scale(a, c) => axpy(&mut grads[*a], g, *c),
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2();
                let n = self.nodes[*b].value.dims2().1;
                let va = self.nodes[*a].value.data();
                let vb = self.nodes[*b].value.data();
                // dA += G @ B^T
                let mut da = vec![0.0; m * k];
                matmul_nt_into(g, vb, &mut da, m, n, k);
                axpy(&mut grads[*a], &da, 1.0);
                // dB += A^T @ G
                let mut db = vec![0.0; k * n];
                matmul_tn_into(va, g, &mut db, m, k, n);
                axpy(&mut grads[*b], &db, 1.0);
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[*a].value.dims2();
                let ga = &mut grads[*a];
                for i2 in 0..n {
                    for j in 0..m {
                        ga[j * n + i2] += g[i2 * m + j];
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[*table].value.dims2().1;
                let gt = &mut grads[*table];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[t * d + j];
                    }
                }
            }
            Op::Softmax(a) => {
                let last = *node.value.shape().last().unwrap();
                let p = node.value.data();
                let ga = &mut grads[*a];
                for r in 0..p.len() / last {
                    let pr = &p[r * last..(r + 1) * last];
                    let gr = &g[r * last..(r + 1) * last];
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..last {
                        ga[r * last + j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let last = *node.value.shape().last().unwrap();
                let lp = node.value.data();
                let ga = &mut grads[*a];
                for r in 0..lp.len() / last {
                    let lpr = &lp[r * last..(r + 1) * last];
                    let gr = &g[r * last..(r + 1) * last];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..last {
                        ga[r * last + j] += gr[j] - lpr[j].exp() * gsum;
                    }
                }
            }
            Op::Log(a) => {
                let va = self.nodes[*a].value.data();
                let ga = &mut grads[*a];
                for (j, (&gv, &x)) in g.iter().zip(va).enumerate() {
                    ga[j] += gv / x;
                }
            }
            Op::Sigmoid(a) => {
                let s = node.value.data();
                let ga = &mut grads[*a];
                for (j, (&gv, &sv)) in g.iter().zip(s).enumerate() {
                    ga[j] += gv * sv * (1.0 - sv);
                }
            }
            Op::LogSigmoid(a) => {
                let va = self.nodes[*a].value.data();
                let ga = &mut grads[*a];
                for (j, (&gv, &x)) in g.iter().zip(va).enumerate() {
                    // d/dx log sigmoid(x) = sigmoid(-x)
                    ga[j] += gv * sigmoid(-x);
                }
            }
            Op::Gelu(a) => {
                let va = self.nodes[*a].value.data();
                let ga = &mut grads[*a];
                for (j, (&gv, &x)) in g.iter().zip(va).enumerate() {
                    ga[j] += gv * gelu_grad(x);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let n = *node.value.shape().last().unwrap();
                let (dx_all, dgamma, dbeta) = {
                    let vx = self.nodes[*x].value.data();
                    let vg = self.nodes[*gamma].value.data();
                    let mut dx_all = vec![0.0; vx.len()];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for (r, row) in vx.chunks_exact(n).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let (xhat, inv_std) = normalize_row(row);
                        let mut mean_gdy = 0.0;
                        let mut mean_gdy_xhat = 0.0;
                        for j in 0..n {
                            let gdy = vg[j] * gr[j];
                            mean_gdy += gdy;
                            mean_gdy_xhat += gdy * xhat[j];
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                        }
                        mean_gdy /= n as f64;
                        mean_gdy_xhat /= n as f64;
                        for j in 0..n {
                            let gdy = vg[j] * gr[j];
                            dx_all[r * n + j] +=
                                (gdy - mean_gdy - xhat[j] * mean_gdy_xhat) * inv_std;
                        }
                    }
                    (dx_all, dgamma, dbeta)
                };
                axpy(&mut grads[*x], &dx_all, 1.0);
                axpy(&mut grads[*gamma], &dgamma, 1.0);
                axpy(&mut grads[*beta], &dbeta, 1.0);
            }
            Op::Sum(a) => {
                let gv = g[0];
                for gd in grads[*a].iter_mut() {
                    *gd += gv;
                }
            }
            Op::Mean(a) => {
                let gv = g[0] / grads[*a].len() as f64;
                for gd in grads[*a].iter_mut() {
                    *gd += gv;
                }
            }
            Op::Select { src, picks } => {
                let n = self.nodes[*src].value.dims2().1;
                let gs = &mut grads[*src];
                for (t, &(r, c)) in picks.iter().enumerate() {
                    gs[r * n + c] += g[t];
                }
            }
            Op::SliceCols { src, start, len } => {
                let (m, n) = self.nodes[*src].value.dims2();
                let gs = &mut grads[*src];
                for i2 in 0..m {
                    for j in 0..*len {
                        gs[i2 * n + start + j] += g[i2 * len + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().1;
                let m = node.value.dims2().0;
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.dims2().1;
                    let gp = &mut grads[p];
                    for i2 in 0..m {
                        for j in 0..w {
                            gp[i2 * w + j] += g[i2 * total + off + j];
                        }
                    }
                    off += w;
                }
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// C += A[m,k] @ B[k,n], all row-major.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A[m,n] @ B[k,n]^T  (result [m,k]).
fn matmul_nt_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// C += A[m,k]^T @ B[m,n]  (result [k,n]).
fn matmul_tn_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn rowwise(data: &[f64], last: usize, f: fn(&[f64], &mut [f64])) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
        f(row, orow);
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Returns (xhat, 1/std) for one row.
fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    (row.iter().map(|&x| (x - mean) * inv_std).collect(), inv_std)
}
