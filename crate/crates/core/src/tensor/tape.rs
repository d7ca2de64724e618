use super::kernels::{add_into, gelu, gelu_grad, matmul_acc, transpose};
use super::{Real, Result, Tensor, TensorError, KL_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast2 {
        src: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        src: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        src: Var,
        factor: S,
    },
    SliceLast {
        src: Var,
        start: usize,
        len: usize,
        width: usize,
    },
    Softmax {
        src: Var,
        inv_t: S,
        width: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        width: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu {
        src: Var,
    },
    PrependToken {
        token: Var,
        src: Var,
        batch: usize,
        n: usize,
        d: usize,
    },
    SelectToken {
        src: Var,
        index: usize,
        batch: usize,
        n: usize,
        d: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    KlDiv {
        p: Var,
        q: Var,
        batch: usize,
    },
    Sum {
        src: Var,
    },
    Mean {
        src: Var,
    },
}

/// Linear record of differentiable operations.
///
/// Values are immutable once recorded. [`Tape::backward`] replays the record
/// in exact reverse order and then clears it; values stay readable.
#[derive(Debug)]
pub struct Tape<S: Real = f32> {
    values: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    needs_grad: Vec<bool>,
    consumed: bool,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn slot<'a, S: Real>(
    grads: &'a mut [Option<Vec<S>>],
    needs: &[bool],
    v: Var,
    len: usize,
) -> Option<&'a mut [S]> {
    if !needs[v.0] {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![S::zero(); len])
            .as_mut_slice(),
    )
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs = value.requires_grad() || inputs.iter().any(|v| self.needs_grad[v.0]);
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        self.push(tensor, Op::Leaf, &[])
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of a `requires_grad` leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.values[v.0].grad()
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_acc(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); batch * m * n];
        let (ad, bd) = (self.values[a.0].data(), self.values[b.0].data());
        for bi in 0..batch {
            matmul_acc(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, batch, m, k, n }, &[a, b]))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, src: Var) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 3 {
            return Err(shape_err("transpose_last2", s, &[]));
        }
        let (batch, rows, cols) = (s[0], s[1], s[2]);
        let d = self.values[src.0].data();
        let mut out = Vec::with_capacity(d.len());
        for bi in 0..batch {
            out.extend(transpose(&d[bi * rows * cols..(bi + 1) * rows * cols], rows, cols));
        }
        let t = Tensor::new(vec![batch, cols, rows], out)?;
        Ok(self.push(t, Op::TransposeLast2 { src, batch, rows, cols }, &[src]))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[src.0]
            .clone()
            .with_requires_grad(false)
            .reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { src }, &[src]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias rows,
    /// positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let ta = &self.values[a.0];
        let bd = self.values[b.0].data();
        let inner = bd.len().max(1);
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(inner) {
            add_into(chunk, bd);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddBroadcast { a, b }, &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, src: Var, factor: S) -> Var {
        let ts = &self.values[src.0];
        let data = ts.data().iter().map(|&x| x * factor).collect();
        let t = Tensor::new(ts.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { src, factor }, &[src])
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let width = *s.last().ok_or_else(|| shape_err("slice_last", &s, &[]))?;
        if start + len > width || len == 0 {
            return Err(TensorError::Param {
                op: "slice_last",
                msg: format!("range {start}..{} outside last axis of {s:?}", start + len),
            });
        }
        let d = self.values[src.0].data();
        let rows = d.len() / width;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * width + start..r * width + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SliceLast { src, start, len, width }, &[src]))
    }

    /// Temperature softmax along the last axis, max-shifted for stability.
    pub fn softmax(&mut self, src: Var, temperature: S) -> Result<Var> {
        if !(temperature > S::zero()) || !temperature.is_finite() {
            return Err(TensorError::Param {
                op: "softmax",
                msg: format!("temperature must be positive and finite, got {temperature:?}"),
            });
        }
        let s = self.shape(src).to_vec();
        let width = *s.last().ok_or_else(|| shape_err("softmax", &s, &[]))?;
        let inv_t = S::one() / temperature;
        let mut out = self.values[src.0].data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_row(row, inv_t);
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::Softmax { src, inv_t, width }, &[src]))
    }

    /// Layer normalization over the last axis: `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().ok_or_else(|| shape_err("layer_norm", &s, &[]))?;
        if self.shape(gain) != [width] {
            return Err(shape_err("layer_norm", &s, self.shape(gain)));
        }
        if self.shape(bias) != [width] {
            return Err(shape_err("layer_norm", &s, self.shape(bias)));
        }
        let xd = self.values[x.0].data();
        let g = self.values[gain.0].data();
        let b = self.values[bias.0].data();
        let rows = xd.len() / width;
        let inv_w = S::one() / S::from_usize(width).unwrap();
        let mut out = vec![S::zero(); xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * width..(r + 1) * width];
            let mut sum = S::zero();
            for &v in row {
                sum += v;
            }
            let mean = sum * inv_w;
            let mut var = S::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var * inv_w;
            let rstd = S::one() / (var + eps).sqrt();
            let o = &mut out[r * width..(r + 1) * width];
            for j in 0..width {
                o[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                width,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, src: Var) -> Var {
        let ts = &self.values[src.0];
        let data = ts.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(ts.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu { src }, &[src])
    }

    /// Prepends `token[d]` to every sequence of `src[B×n×d]`.
    pub fn prepend_token(&mut self, token: Var, src: Var) -> Result<Var> {
        let (st, ss) = (self.shape(token), self.shape(src));
        if ss.len() != 3 || st != [ss[2]] {
            return Err(shape_err("prepend_token", ss, st));
        }
        let (batch, n, d) = (ss[0], ss[1], ss[2]);
        let td = self.values[token.0].data();
        let sd = self.values[src.0].data();
        let mut out = Vec::with_capacity(batch * (n + 1) * d);
        for bi in 0..batch {
            out.extend_from_slice(td);
            out.extend_from_slice(&sd[bi * n * d..(bi + 1) * n * d]);
        }
        let t = Tensor::new(vec![batch, n + 1, d], out)?;
        Ok(self.push(t, Op::PrependToken { token, src, batch, n, d }, &[token, src]))
    }

    /// Token `index` of every sequence: `[B×n×d] -> [B×d]`.
    pub fn select_token(&mut self, src: Var, index: usize) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 3 || index >= s[1] {
            return Err(shape_err("select_token", s, &[index]));
        }
        let (batch, n, d) = (s[0], s[1], s[2]);
        let sd = self.values[src.0].data();
        let mut out = Vec::with_capacity(batch * d);
        for bi in 0..batch {
            let off = (bi * n + index) * d;
            out.extend_from_slice(&sd[off..off + d]);
        }
        let t = Tensor::new(vec![batch, d], out)?;
        Ok(self.push(t, Op::SelectToken { src, index, batch, n, d }, &[src]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", s, &[labels.len()]));
        }
        let (batch, classes) = (s[0], s[1]);
        if batch == 0 {
            return Err(TensorError::Data {
                op: "cross_entropy",
                msg: "empty batch".into(),
            });
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(TensorError::Data {
                op: "cross_entropy",
                msg: format!("label {y} at index {i} outside [0, {classes})"),
            });
        }
        let mut probs = self.values[logits.0].data().to_vec();
        let mut total = S::zero();
        for (row, &y) in probs.chunks_mut(classes).zip(labels) {
            // -log softmax via log-sum-exp
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut z = S::zero();
            for &v in row.iter() {
                z += (v - max).exp();
            }
            let lse = max + z.ln();
            total += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / S::from_usize(batch).unwrap();
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Batch mean of `sum_i p_i ln(p_i / q_i)` over probability rows, with
    /// entries clamped to at least [`KL_EPS`] before the logarithm.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (sp, sq) = (self.shape(p), self.shape(q));
        if sp.len() != 2 || sp != sq {
            return Err(shape_err("kl_div", sp, sq));
        }
        let (batch, classes) = (sp[0], sp[1]);
        if batch == 0 {
            return Err(TensorError::Data {
                op: "kl_div",
                msg: "empty batch".into(),
            });
        }
        let (pd, qd) = (self.values[p.0].data(), self.values[q.0].data());
        for (name, d) in [("p", pd), ("q", qd)] {
            for (r, row) in d.chunks(classes).enumerate() {
                let s: f64 = row.iter().map(|v| v.to_f64().unwrap()).sum();
                if (s - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < S::zero()) {
                    return Err(TensorError::Contract {
                        op: "kl_div",
                        msg: format!("row {r} of {name} is not a distribution (sum {s})"),
                    });
                }
            }
        }
        let eps = S::lit(KL_EPS);
        let mut total = S::zero();
        for (&pv, &qv) in pd.iter().zip(qd) {
            let (pc, qc) = (pv.max(eps), qv.max(eps));
            total += pc * (pc / qc).ln();
        }
        let t = Tensor::scalar(total / S::from_usize(batch).unwrap());
        Ok(self.push(t, Op::KlDiv { p, q, batch }, &[p, q]))
    }

    pub fn sum(&mut self, src: Var) -> Var {
        let mut total = S::zero();
        for &v in self.values[src.0].data() {
            total += v;
        }
        self.push(Tensor::scalar(total), Op::Sum { src }, &[src])
    }

    pub fn mean(&mut self, src: Var) -> Var {
        let d = self.values[src.0].data();
        let mut total = S::zero();
        for &v in d {
            total += v;
        }
        let n = S::from_usize(d.len().max(1)).unwrap();
        self.push(Tensor::scalar(total / n), Op::Mean { src }, &[src])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Afterwards every `requires_grad` leaf holds a gradient (zeros when the
    /// loss does not depend on it) and the operation record is cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::Usage("tape already replayed".into()));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![S::one()]);
        let needs = &self.needs_grad;
        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let vals = &self.values;
            match &self.ops[i] {
                Op::Leaf => {}
                &Op::MatMul { a, b, m, k, n } => {
                    if let Some(da) = slot(&mut grads, needs, a, m * k) {
                        let bt = transpose(vals[b.0].data(), k, n);
                        matmul_acc(&g, &bt, da, m, n, k);
                    }
                    if let Some(db) = slot(&mut grads, needs, b, k * n) {
                        let at = transpose(vals[a.0].data(), m, k);
                        matmul_acc(&at, &g, db, k, m, n);
                    }
                }
                &Op::BatchMatMul { a, b, batch, m, k, n } => {
                    if let Some(da) = slot(&mut grads, needs, a, batch * m * k) {
                        let bd = vals[b.0].data();
                        for bi in 0..batch {
                            let bt = transpose(&bd[bi * k * n..(bi + 1) * k * n], k, n);
                            matmul_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bt,
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    if let Some(db) = slot(&mut grads, needs, b, batch * k * n) {
                        let ad = vals[a.0].data();
                        for bi in 0..batch {
                            let at = transpose(&ad[bi * m * k..(bi + 1) * m * k], m, k);
                            matmul_acc(
                                &at,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    }
                }
                &Op::TransposeLast2 { src, batch, rows, cols } => {
                    if let Some(ds) = slot(&mut grads, needs, src, batch * rows * cols) {
                        for bi in 0..batch {
                            let gt = transpose(&g[bi * rows * cols..(bi + 1) * rows * cols], cols, rows);
                            add_into(&mut ds[bi * rows * cols..(bi + 1) * rows * cols], &gt);
                        }
                    }
                }
                &Op::Reshape { src } => {
                    if let Some(ds) = slot(&mut grads, needs, src, g.len()) {
                        add_into(ds, &g);
                    }
                }
                &Op::Add { a, b } => {
                    if let Some(da) = slot(&mut grads, needs, a, g.len()) {
                        add_into(da, &g);
                    }
                    if let Some(db) = slot(&mut grads, needs, b, g.len()) {
                        add_into(db, &g);
                    }
                }
                &Op::AddBroadcast { a, b } => {
                    if let Some(da) = slot(&mut grads, needs, a, g.len()) {
                        add_into(da, &g);
                    }
                    let inner = vals[b.0].numel();
                    if let Some(db) = slot(&mut grads, needs, b, inner) {
                        for chunk in g.chunks(inner.max(1)) {
                            add_into(db, chunk);
                        }
                    }
                }
                &Op::Mul { a, b } => {
                    if let Some(da) = slot(&mut grads, needs, a, g.len()) {
                        for ((d, &gv), &bv) in da.iter_mut().zip(&g).zip(vals[b.0].data()) {
                            *d += gv * bv;
                        }
                    }
                    if let Some(db) = slot(&mut grads, needs, b, g.len()) {
                        for ((d, &gv), &av) in db.iter_mut().zip(&g).zip(vals[a.0].data()) {
                            *d += gv * av;
                        }
                    }
                }
                &Op::Scale { src, factor } => {
                    if let Some(ds) = slot(&mut grads, needs, src, g.len()) {
                        for (d, &gv) in ds.iter_mut().zip(&g) {
                            *d += gv * factor;
                        }
                    }
                }
                &Op::SliceLast { src, start, len, width } => {
                    let rows = g.len() / len;
                    if let Some(ds) = slot(&mut grads, needs, src, rows * width) {
                        for r in 0..rows {
                            add_into(
                                &mut ds[r * width + start..r * width + start + len],
                                &g[r * len..(r + 1) * len],
                            );
                        }
                    }
                }
                &Op::Softmax { src, inv_t, width } => {
                    let y = vals[i].data();
                    if let Some(ds) = slot(&mut grads, needs, src, g.len()) {
                        for ((dr, gr), yr) in ds.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                            let mut dot = S::zero();
                            for (&gv, &yv) in gr.iter().zip(yr) {
                                dot += gv * yv;
                            }
                            for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += yv * (gv - dot) * inv_t;
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    width,
                    mean,
                    rstd,
                } => {
                    let (x, gain, bias, width) = (*x, *gain, *bias, *width);
                    let xd = vals[x.0].data();
                    let gd = vals[gain.0].data();
                    let rows = xd.len() / width;
                    let inv_w = S::one() / S::from_usize(width).unwrap();
                    let xhat = |r: usize, j: usize| (xd[r * width + j] - mean[r]) * rstd[r];
                    if let Some(dg) = slot(&mut grads, needs, gain, width) {
                        for r in 0..rows {
                            for j in 0..width {
                                dg[j] += g[r * width + j] * xhat(r, j);
                            }
                        }
                    }
                    if let Some(db) = slot(&mut grads, needs, bias, width) {
                        for r in 0..rows {
                            add_into(db, &g[r * width..(r + 1) * width]);
                        }
                    }
                    if let Some(dx) = slot(&mut grads, needs, x, xd.len()) {
                        for r in 0..rows {
                            let mut s1 = S::zero();
                            let mut s2 = S::zero();
                            for j in 0..width {
                                let dxh = g[r * width + j] * gd[j];
                                s1 += dxh;
                                s2 += dxh * xhat(r, j);
                            }
                            let (m1, m2) = (s1 * inv_w, s2 * inv_w);
                            for j in 0..width {
                                let dxh = g[r * width + j] * gd[j];
                                dx[r * width + j] += rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                            }
                        }
                    }
                }
                &Op::Gelu { src } => {
                    if let Some(ds) = slot(&mut grads, needs, src, g.len()) {
                        for ((d, &gv), &xv) in ds.iter_mut().zip(&g).zip(vals[src.0].data()) {
                            *d += gv * gelu_grad(xv);
                        }
                    }
                }
                &Op::PrependToken { token, src, batch, n, d } => {
                    if let Some(dt) = slot(&mut grads, needs, token, d) {
                        for bi in 0..batch {
                            let off = bi * (n + 1) * d;
                            add_into(dt, &g[off..off + d]);
                        }
                    }
                    if let Some(ds) = slot(&mut grads, needs, src, batch * n * d) {
                        for bi in 0..batch {
                            let off = bi * (n + 1) * d + d;
                            add_into(&mut ds[bi * n * d..(bi + 1) * n * d], &g[off..off + n * d]);
                        }
                    }
                }
                &Op::SelectToken { src, index, batch, n, d } => {
                    if let Some(ds) = slot(&mut grads, needs, src, batch * n * d) {
                        for bi in 0..batch {
                            let off = (bi * n + index) * d;
                            add_into(&mut ds[off..off + d], &g[bi * d..(bi + 1) * d]);
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let classes = probs.len() / labels.len();
                    let scale = g[0] / S::from_usize(labels.len()).unwrap();
                    if let Some(dl) = slot(&mut grads, needs, logits, probs.len()) {
                        for (r, &y) in labels.iter().enumerate() {
                            for c in 0..classes {
                                let target = if c == y { S::one() } else { S::zero() };
                                dl[r * classes + c] += scale * (probs[r * classes + c] - target);
                            }
                        }
                    }
                }
                &Op::KlDiv { p, q, batch } => {
                    let eps = S::lit(KL_EPS);
                    let scale = g[0] / S::from_usize(batch).unwrap();
                    let (pd, qd) = (vals[p.0].data(), vals[q.0].data());
                    if let Some(dp) = slot(&mut grads, needs, p, pd.len()) {
                        for ((d, &pv), &qv) in dp.iter_mut().zip(pd).zip(qd) {
                            if pv > eps {
                                *d += scale * ((pv / qv.max(eps)).ln() + S::one());
                            }
                        }
                    }
                    if let Some(dq) = slot(&mut grads, needs, q, qd.len()) {
                        for ((d, &pv), &qv) in dq.iter_mut().zip(pd).zip(qd) {
                            if qv > eps {
                                *d -= scale * pv.max(eps) / qv;
                            }
                        }
                    }
                }
                &Op::Sum { src } => {
                    let n = vals[src.0].numel();
                    if let Some(ds) = slot(&mut grads, needs, src, n) {
                        for d in ds.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                &Op::Mean { src } => {
                    let n = vals[src.0].numel();
                    let gv = g[0] / S::from_usize(n.max(1)).unwrap();
                    if let Some(ds) = slot(&mut grads, needs, src, n) {
                        for d in ds.iter_mut() {
                            *d += gv;
                        }
                    }
                }
            }
            if self.values[i].requires_grad() {
                self.values[i].set_grad(g);
            }
        }
        for t in self.values.iter_mut() {
            if t.requires_grad() && t.grad().is_none() {
                let n = t.numel();
                t.set_grad(vec![S::zero(); n]);
            }
        }
        for op in self.ops.iter_mut() {
            *op = Op::Leaf;
        }
        self.consumed = true;
        Ok(())
    }
}

fn softmax_row<S: Real>(row: &mut [S], inv_t: S) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut z = S::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_t).exp();
        z += *v;
    }
    let inv_z = S::one() / z;
    for v in row.iter_mut() {
        *v *= inv_z;
    }
}
