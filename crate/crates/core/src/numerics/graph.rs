use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{kernels, NumericsError, Real, Result, Tensor};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Gradients keyed by parameter name. Only leaves registered through
/// [`Graph::param`] appear here.
pub type Gradients<F> = BTreeMap<String, Tensor<F>>;

/// A matrix that takes part in the forward pass but never receives a
/// gradient: dense frozen weights and quantized weights both implement it.
/// Shapes follow the `[d_out, d_in]` weight convention.
pub trait FrozenLinear<F: Real>: Send + Sync {
    fn out_dim(&self) -> usize;
    fn in_dim(&self) -> usize;
    /// `x · Wᵀ` for `x: [n, d_in]`.
    fn forward_rows(&self, x: &Tensor<F>) -> Tensor<F>;
    /// `g · W` for `g: [n, d_out]`.
    fn backward_rows(&self, g: &Tensor<F>) -> Tensor<F>;
}

impl<F: Real> FrozenLinear<F> for Tensor<F> {
    fn out_dim(&self) -> usize {
        self.rows()
    }

    fn in_dim(&self) -> usize {
        self.cols()
    }

    fn forward_rows(&self, x: &Tensor<F>) -> Tensor<F> {
        let (n, k, m) = (x.rows(), self.cols(), self.rows());
        let mut wt = vec![F::zero(); k * m];
        kernels::transpose(m, k, self.data(), &mut wt);
        let mut out = vec![F::zero(); n * m];
        kernels::gemm(n, k, m, x.data(), &wt, &mut out);
        Tensor::new(vec![n, m], out).expect("forward_rows shape")
    }

    fn backward_rows(&self, g: &Tensor<F>) -> Tensor<F> {
        let (n, m, k) = (g.rows(), self.rows(), self.cols());
        let mut out = vec![F::zero(); n * k];
        kernels::gemm(n, m, k, g.data(), self.data(), &mut out);
        Tensor::new(vec![n, k], out).expect("backward_rows shape")
    }
}

enum Op<F: Real> {
    Leaf {
        name: Option<String>,
    },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Frozen {
        x: Var,
        weight: Arc<dyn FrozenLinear<F>>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Dropout {
        x: Var,
        keep: Vec<F>,
    },
    Gelu(Var),
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
    Sum(Var),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Append-only operation tape. Nodes are stored in execution order, so the
/// reverse index order is a valid reverse topological order for backward.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, l: &[usize], r: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: l.to_vec(),
        right: r.to_vec(),
    }
}

/// Per-call dropout stream derived from `(seed, site, step)`.
pub fn dropout_rng(seed: u64, site: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(site);
    rng.set_word_pos((step as u128) << 40);
    rng
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(NumericsError::NonFinite {
                op: op_name(&op).to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf {
                name: Some(name.into()),
            },
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { name: None },
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let out = FrozenLinear::forward_rows(self.value(b), self.value(a));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    /// `x · Wᵀ` against a weight that never receives a gradient.
    pub fn frozen_linear(&mut self, x: Var, weight: Arc<dyn FrozenLinear<F>>) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[1] != weight.in_dim() {
            return Err(shape_err("frozen_linear", sx, &[weight.out_dim(), weight.in_dim()]));
        }
        let out = weight.forward_rows(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Frozen { x, weight }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a length-`n` vector to every row of `[m, n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sx.len() != 2 || self.value(bias).numel() != n {
            return Err(shape_err("add_row", sx, sb));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o = *o + b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Gathers rows of `table: [rows, d]` into `[ids.len(), d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(shape_err("embed", t.shape(), &[ids.len()]));
        }
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IdOutOfRange { id, rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.needs(table);
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Softmax along the last axis. `mask[i]` true excludes that element;
    /// excluded entries come out as exact zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(shape_err("softmax", xv.shape(), &[m.len()]));
            }
        }
        let n = xv.cols();
        let mut out = vec![F::zero(); xv.numel()];
        for (r, (row, o)) in xv.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            kernels::softmax_row(row, mask.map(|m| &m[r * n..(r + 1) * n]), o);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Row-wise layer normalization with biased variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).numel() != n || self.value(shift).numel() != n {
            return Err(shape_err("layer_norm", xv.shape(), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let nf = F::of(n as f64);
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = vec![F::zero(); xv.numel()];
        for (r, row) in xv.data().chunks(n).enumerate() {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + s[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(shift);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Inverted dropout. Survivors are scaled by `1 / (1 - p)`. The keep mask
    /// is drawn from a stream keyed on `(seed, site, step)`; identity when
    /// `training` is false or `p == 0`.
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        seed: u64,
        site: u64,
        step: u64,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::DropoutProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = dropout_rng(seed, site, step);
        let scale = F::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let keep: Vec<F> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    scale
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&keep).map(|(&a, &k)| a * k).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(x);
        self.push(out, Op::Dropout { x, keep }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Rectangular block `[row0 .. row0+rows, col0 .. col0+cols]` of a matrix.
    pub fn slice(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || row0 + rows > xv.rows() || col0 + cols > xv.cols() {
            return Err(shape_err("slice", xv.shape(), &[row0 + rows, col0 + cols]));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            data.extend_from_slice(&xv.row(r)[col0..col0 + cols]);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = self.needs(x);
        self.push(out, Op::Slice { x, row0, col0 }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", &[], &[]));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", &[], &[]));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Mean negative log-likelihood over rows whose target is not the
    /// sentinel. An all-ignored batch yields zero loss and zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore: i64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != targets.len() {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let vocab = lv.cols();
        let mut tgt = Vec::with_capacity(targets.len());
        for &t in targets {
            if t == ignore {
                tgt.push(None);
            } else if t < 0 || t as usize >= vocab {
                return Err(NumericsError::TargetOutOfRange { id: t, vocab });
            } else {
                tgt.push(Some(t as usize));
            }
        }
        let mut probs = vec![F::zero(); lv.numel()];
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, t) in tgt.iter().enumerate() {
            let row = lv.row(r);
            if let Some(t) = *t {
                let lse = kernels::log_sum_exp(row);
                total = total + (lse - row[t]);
                count += 1;
                for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                    *p = (v - lse).exp();
                }
            }
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::of(count as f64)
        };
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: tgt,
                probs,
                count,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar `loss`. The tape is left untouched, so
    /// repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        let mut out = Gradients::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e = *e + *x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<F>,
        g: Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        out: &mut Gradients<F>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf { name } => {
                if let Some(name) = name {
                    match out.get_mut(name) {
                        Some(existing) => {
                            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                                *e = *e + *x;
                            }
                        }
                        None => {
                            out.insert(name.clone(), g);
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    self.acc(grads, *a, FrozenLinear::forward_rows(bv, &g));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    self.acc(grads, *b, av.transpose().matmul(&g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    // dA = G · B
                    self.acc(grads, *a, g.matmul(bv)?);
                }
                if self.needs(*b) {
                    // dB = Gᵀ · A
                    self.acc(grads, *b, g.transpose().matmul(av)?);
                }
            }
            Op::Frozen { x, weight } => {
                self.acc(grads, *x, weight.backward_rows(&g));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g);
            }
            Op::AddRow(x, bias) => {
                if self.needs(*bias) {
                    let n = g.cols();
                    let mut db = vec![F::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    let db = Tensor::new(self.shape(*bias).to_vec(), db)?;
                    self.acc(grads, *bias, db);
                }
                self.acc(grads, *x, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, g.scale(*s));
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = vec![F::zero(); y.numel()];
                for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gv = self.value(*gain).data();
                if self.needs(*gain) || self.needs(*shift) {
                    let mut dg = vec![F::zero(); n];
                    let mut ds = vec![F::zero(); n];
                    for (gr, hr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] = dg[j] + gr[j] * hr[j];
                            ds[j] = ds[j] + gr[j];
                        }
                    }
                    self.acc(grads, *gain, Tensor::new(self.shape(*gain).to_vec(), dg)?);
                    self.acc(grads, *shift, Tensor::new(self.shape(*shift).to_vec(), ds)?);
                }
                if self.needs(*x) {
                    let nf = F::of(n as f64);
                    let mut dx = vec![F::zero(); g.numel()];
                    for (r, ((gr, hr), dr)) in g
                        .data()
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(dx.chunks_mut(n))
                        .enumerate()
                    {
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            mean_d = mean_d + dh;
                            mean_dh = mean_dh + dh * hr[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            dr[j] = inv_std[r] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::Dropout { x, keep } => {
                let d = g.data().iter().zip(keep).map(|(&a, &k)| a * k).collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&a, &v)| a * kernels::gelu_grad(v))
                    .collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Slice { x, row0, col0 } => {
                let xs = self.shape(*x);
                let xc = xs[1];
                let mut dx = Tensor::zeros(xs);
                let cols = g.cols();
                for r in 0..g.rows() {
                    let start = (row0 + r) * xc + col0;
                    dx.data_mut()[start..start + cols].copy_from_slice(g.row(r));
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let rows = g.rows();
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        self.acc(grads, p, Tensor::new(vec![rows, pc], d)?);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.needs(p) {
                        let d = g.data()[offset * cols..(offset + pr) * cols].to_vec();
                        self.acc(grads, p, Tensor::new(vec![pr, cols], d)?);
                    }
                    offset += pr;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let vocab = lv.cols();
                let mut d = vec![F::zero(); lv.numel()];
                if *count > 0 {
                    let scale = g.data()[0] / F::of(*count as f64);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let row = &mut d[r * vocab..(r + 1) * vocab];
                            for (o, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                                *o = p * scale;
                            }
                            row[t] = row[t] - scale;
                        }
                    }
                }
                self.acc(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x), s));
            }
        }
        Ok(())
    }
}

fn op_name<F: Real>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Frozen { .. } => "frozen_linear",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Embed { .. } => "embed",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Dropout { .. } => "dropout",
        Op::Gelu(..) => "gelu",
        Op::Slice { .. } => "slice",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(..) => "sum",
    }
}
