use super::tensor::{gemm, Tensor};
use super::NumError;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call over a packed batch.
///
/// Queries are `[batch·q_len, d]`, keys and values `[batch·k_len, d]`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// One flag per key row; padded keys are `false`.
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleByElem { x: Var, s: Var, index: usize },
    Softmax(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, spec: Box<AttentionSpec>, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, probs: Vec<f64>, count: usize },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it
/// and [`Graph::backward`] can sweep the tape once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`, zeros when it did not participate.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub(crate) fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, var: Var) -> Result<(usize, usize), NumError> {
        self.value(var).dims2()
    }

    /// `a·b`, or `a·bᵀ` when `trans_b` is set.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumError> {
        let (m, k) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(NumError::Shape(format!(
                "matmul of {:?} and {:?}{}",
                self.value(a).shape(),
                self.value(b).shape(),
                if trans_b { " (transposed)" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.matmul_ext(a, b, false)
    }

    /// `a·bᵀ`; the natural form for `x Wᵀ` with `W` stored `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.matmul_ext(a, b, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumError::Shape(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[m]` bias to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let (_, m) = self.dims2(x)?;
        if self.value(bias).shape() != [m] {
            return Err(NumError::Shape(format!(
                "row bias {:?} for matrix {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// `x · s[index]`, differentiable in both `x` and `s`.
    pub fn scale_by_elem(&mut self, x: Var, s: Var, index: usize) -> Result<Var, NumError> {
        let factor = *self
            .value(s)
            .data()
            .get(index)
            .ok_or_else(|| NumError::Argument(format!("element {index} of {:?}", self.value(s).shape())))?;
        let out = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ScaleByElem { x, s, index }, rg))
    }

    /// Softmax over a 1-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumError> {
        if self.value(x).rank() != 1 {
            return Err(NumError::Shape(format!("softmax expects a vector, got {:?}", self.value(x).shape())));
        }
        let out = Tensor::vector(super::softmax(self.value(x).data())?);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumError> {
        let (n, m) = self.dims2(x)?;
        if self.value(gain).shape() != [m] || self.value(bias).shape() != [m] {
            return Err(NumError::Shape(format!("layer norm parameters for width {m}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * m];
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = &xv[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..m {
                let h = (row[c] - mean) * rs;
                xhat[r * m + c] = h;
                out[r * m + c] = h * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let (vocab, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(NumError::Argument("embedding lookup of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumError::Argument(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(Tensor::matrix(ids.len(), d, out)?, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Scaled dot-product attention over `spec.heads` heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var, NumError> {
        let (qr, d) = self.dims2(q)?;
        let (kr, kd) = self.dims2(k)?;
        let (vr, vd) = self.dims2(v)?;
        if qr != spec.batch * spec.q_len
            || kr != spec.batch * spec.k_len
            || vr != kr
            || kd != d
            || vd != d
            || spec.key_valid.len() != kr
        {
            return Err(NumError::Shape(format!(
                "attention q {:?} k {:?} v {:?} for batch {} × ({}, {})",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape(),
                spec.batch,
                spec.q_len,
                spec.k_len
            )));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(NumError::Argument(format!("{} heads do not divide width {d}", spec.heads)));
        }
        if spec.causal && spec.q_len != spec.k_len {
            return Err(NumError::Argument("causal attention needs equal query and key lengths".into()));
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (lq, lk, heads) = (spec.q_len, spec.k_len, spec.heads);
        let qd = self.value(q).data();
        let kdta = self.value(k).data();
        let vdta = self.value(v).data();
        let mut probs = vec![0.0; spec.batch * heads * lq * lk];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; lk];
        for b in 0..spec.batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qrow = &qd[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if spec.allowed(b, i, j) {
                            let krow = &kdta[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                            let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let base = ((b * heads + h) * lq + i) * lk;
                    let mut total = 0.0;
                    for j in 0..lk {
                        if spec.allowed(b, i, j) {
                            let e = (scores[j] - max).exp();
                            probs[base + j] = e;
                            total += e;
                        }
                    }
                    let orow = &mut out[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                    for j in 0..lk {
                        let p = probs[base + j] / total;
                        probs[base + j] = p;
                        if p != 0.0 {
                            let vrow = &vdta[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                            for (o, vv) in orow.iter_mut().zip(vrow) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(Tensor::matrix(qr, d, out)?, Op::Attention { q, k, v, spec: Box::new(spec), probs }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions whose target is `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var, NumError> {
        let (n, vocab) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(NumError::Shape(format!("{} targets for {n} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != pad && t >= vocab) {
            return Err(NumError::Argument(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..n {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for c in 0..vocab {
                probs[r * vocab + c] = (row[c] - log_z).exp();
            }
            if targets[r] != pad {
                total += log_z - row[targets[r]];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        if !loss.is_finite() {
            return Err(NumError::NonFinite("cross-entropy".into()));
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad, probs, count },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        if self.value(loss).len() != 1 {
            return Err(NumError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (g, n) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(NumError::NonFinite(format!("gradient of a {:?} node", n.value.shape())));
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, var: Var) -> Tensor {
        Tensor::zeros(self.value(var).shape())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).shape().split_first().map(|(m, r)| (*m, r[0])).unwrap();
                let n = g.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = self.zeros_like(*a);
                    // dA = dC·Bᵀ, or dC·B when B entered transposed.
                    gemm(m, n, k, gd, false, self.value(*b).data(), !trans_b, da.data_mut(), false);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = self.zeros_like(*b);
                    if *trans_b {
                        gemm(n, m, k, gd, true, self.value(*a).data(), false, db.data_mut(), false);
                    } else {
                        gemm(k, m, n, self.value(*a).data(), true, gd, false, db.data_mut(), false);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let m = g.shape()[1];
                    let mut db = vec![0.0; m];
                    for row in gd.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::vector(db));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * f)),
            Op::ScaleByElem { x, s, index } => {
                let factor = self.value(*s).data()[*index];
                self.accumulate(grads, *x, g.map(|v| v * factor));
                if self.requires_grad(*s) {
                    let mut ds = self.zeros_like(*s);
                    ds.data_mut()[*index] = gd.iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: f64 = gd.iter().zip(y).map(|(a, b)| a * b).sum();
                let d = y.iter().zip(gd).map(|(yi, gi)| yi * (gi - dot)).collect();
                self.accumulate(grads, *x, Tensor::vector(d));
            }
            Op::Gelu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gi)| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * m];
                    for r in 0..n {
                        let gr = &gd[r * m..(r + 1) * m];
                        let hr = &xhat[r * m..(r + 1) * m];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..m {
                            let dh = gr[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= m as f64;
                        mean_dh_h /= m as f64;
                        for c in 0..m {
                            let dh = gr[c] * gv[c];
                            dx[r * m + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(n, m, dx).unwrap());
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; m];
                    for (i, v) in gd.iter().enumerate() {
                        dg[i % m] += v * xhat[i];
                    }
                    self.accumulate(grads, *gain, Tensor::vector(dg));
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; m];
                    for (i, v) in gd.iter().enumerate() {
                        db[i % m] += v;
                    }
                    self.accumulate(grads, *bias, Tensor::vector(db));
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let d = g.shape()[1];
                    let mut dt = self.zeros_like(*table);
                    let dtd = dt.data_mut();
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            dtd[i * d + c] += gd[r * d + c];
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::Attention { q, k, v, spec, probs } => self.attention_backward(*q, *k, *v, spec, probs, gd, grads),
            Op::CrossEntropy { logits, targets, pad, probs, count } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.value(*logits).shape()[1];
                let scale = gd[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    for c in 0..vocab {
                        dl[r * vocab + c] = probs[r * vocab + c] * scale;
                    }
                    dl[r * vocab + t] -= scale;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, dl).unwrap());
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(shape, gd[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let d = self.value(q).shape()[1];
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (lq, lk, heads) = (spec.q_len, spec.k_len, spec.heads);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; lk];
        for b in 0..spec.batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let base = ((b * heads + h) * lq + i) * lk;
                    let p = &probs[base..base + lk];
                    let qi = (b * lq + i) * d + off;
                    let grow = &gd[qi..qi + dh];
                    let mut dot = 0.0;
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = (b * lk + j) * d + off;
                        let s: f64 = grow.iter().zip(&vd[vj..vj + dh]).map(|(a, c)| a * c).sum();
                        dp[j] = s;
                        dot += p[j] * s;
                        for (dvv, gv) in dv[vj..vj + dh].iter_mut().zip(grow) {
                            *dvv += p[j] * gv;
                        }
                    }
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = (b * lk + j) * d + off;
                        for c in 0..dh {
                            dq[qi + c] += ds * kd[kj + c];
                            dk[kj + c] += ds * qd[qi + c];
                        }
                    }
                }
            }
        }
        let shape_q = self.value(q).shape().to_vec();
        let shape_k = self.value(k).shape().to_vec();
        self.accumulate(grads, q, Tensor::new(shape_q, dq).unwrap());
        self.accumulate(grads, k, Tensor::new(shape_k.clone(), dk).unwrap());
        self.accumulate(grads, v, Tensor::new(shape_k, dv).unwrap());
    }
}
