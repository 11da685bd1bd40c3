use super::array::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Array, Result, Scalar, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<F> {
    Leaf,
    Detach,
    Add(Var, Var),
    /// a: n x d plus a length-d row broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddConst(Var, F),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    },
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    /// Row gather (embedding lookup); indices may repeat.
    Rows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

/// Dynamic tape: ops append in execution order, so reverse index order is a
/// reverse topological order for the backward sweep.
pub struct Tape<F: Scalar> {
    values: Vec<Array<F>>,
    ops: Vec<Op<F>>,
    requires: Vec<bool>,
}

/// Gradient of the loss w.r.t. every reachable `requires_grad` node.
pub struct Gradients<F> {
    grads: Vec<Option<Array<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Array<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: Array<F>, op: Op<F>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn leaf(&mut self, value: Array<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.constant(Array::scalar(v))
    }

    /// Identity forward, blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        { let v = self.values[a.0].clone(); self.push(v, Op::Detach, false) }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("add", a, b, |x, y| x + y)
            .map(|v| self.push(v, Op::Add(a, b), self.req(a) || self.req(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("sub", a, b, |x, y| x - y)
            .map(|v| self.push(v, Op::Sub(a, b), self.req(a) || self.req(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("mul", a, b, |x, y| x * y)
            .map(|v| self.push(v, Op::Mul(a, b), self.req(a) || self.req(b)))
    }

    fn zip_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Array<F>> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Array::new(va.shape().to_vec(), data)
    }

    /// Broadcast a length-d (or 1 x d) vector over the rows of a.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let (n, d) = va.dims2();
        if vb.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(va.data()[i * d + j] + vb.data()[j]);
            }
        }
        let value = Array::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, b), self.req(a) || self.req(b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.values[a.0].map(|x| x * c);
        self.push(value, Op::Scale(a, c), self.req(a))
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let value = self.values[a.0].map(|x| x + c);
        self.push(value, Op::AddConst(a, c), self.req(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let (p, q) = va.as_mat()?;
        let (q2, r) = vb.as_mat()?;
        if q != q2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = vec![F::zero(); p * r];
        matmul_acc(&mut data, va.data(), vb.data(), p, q, r);
        let value = Array::matrix(p, r, data)?;
        Ok(self.push(value, Op::MatMul(a, b), self.req(a) || self.req(b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.values[a.0];
        let (n, m) = va.as_mat()?;
        let mut data = vec![F::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = va.data()[i * m + j];
            }
        }
        let value = Array::matrix(m, n, data)?;
        Ok(self.push(value, Op::Transpose(a), self.req(a)))
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = &self.values[a.0];
        let (n, d) = va.dims2();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &va.data()[i * d..(i + 1) * d];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum: F = exps.iter().cloned().sum();
            data.extend(exps.into_iter().map(|e| e / sum));
        }
        let value = Array::new(va.shape().to_vec(), data).unwrap();
        self.push(value, Op::Softmax(a), self.req(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = &self.values[a.0];
        let (n, d) = va.dims2();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &va.data()[i * d..(i + 1) * d];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse: F = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            data.extend(row.iter().map(|&x| x - lse));
        }
        let value = Array::new(va.shape().to_vec(), data).unwrap();
        self.push(value, Op::LogSoftmax(a), self.req(a))
    }

    /// Layer normalization over the last axis (population variance), then the
    /// gamma/beta affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let vx = &self.values[x.0];
        let (n, d) = vx.dims2();
        if self.values[gamma.0].numel() != d || self.values[beta.0].numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: self.values[gamma.0].shape().to_vec(),
            });
        }
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut data = Vec::with_capacity(n * d);
        let dn = F::from_f64(d as f64);
        for i in 0..n {
            let row = &vx.data()[i * d..(i + 1) * d];
            let mean = row.iter().cloned().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rstd = (var + eps).sqrt().recip();
            for j in 0..d {
                data.push((row[j] - mean) * rstd * g[j] + b[j]);
            }
        }
        let value = Array::new(vx.shape().to_vec(), data)?;
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }, req))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(gelu_fwd);
        self.push(value, Op::Gelu(a), self.req(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|x| x.max(F::zero()));
        self.push(value, Op::Relu(a), self.req(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|x| x.abs());
        self.push(value, Op::Abs(a), self.req(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|x| x.sqrt());
        self.push(value, Op::Sqrt(a), self.req(a))
    }

    /// Concatenate 2-D parts along `axis` (0 = rows, 1 = cols).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::Contract(format!(
                "concat: need at least one part and axis in {{0,1}}, got {} parts, axis {axis}",
                parts.len()
            )));
        }
        let first = self.values[parts[0].0].as_mat()?;
        let mut rows = first.0;
        let mut cols = first.1;
        for &p in &parts[1..] {
            let (r, c) = self.values[p.0].as_mat()?;
            if axis == 0 {
                if c != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![rows, cols],
                        rhs: vec![r, c],
                    });
                }
                rows += r;
            } else {
                if r != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![rows, cols],
                        rhs: vec![r, c],
                    });
                }
                cols += c;
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.values[p.0].data());
            }
        } else {
            for i in 0..rows {
                for &p in parts {
                    let (_, c) = self.values[p.0].as_mat().unwrap();
                    data.extend_from_slice(&self.values[p.0].data()[i * c..(i + 1) * c]);
                }
            }
        }
        let value = Array::matrix(rows, cols, data)?;
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.values[x.0];
        let (n, d) = vx.as_mat()?;
        if start + len > n || len == 0 {
            return Err(TensorError::BadShape {
                op: "slice_rows",
                shape: vx.shape().to_vec(),
                reason: format!("rows {start}..{} out of range", start + len),
            });
        }
        let data = vx.data()[start * d..(start + len) * d].to_vec();
        let value = Array::matrix(len, d, data)?;
        Ok(self.push(value, Op::SliceRows { x, start, len }, self.req(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.values[x.0];
        let (n, d) = vx.as_mat()?;
        if start + len > d || len == 0 {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                shape: vx.shape().to_vec(),
                reason: format!("cols {start}..{} out of range", start + len),
            });
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&vx.data()[i * d + start..i * d + start + len]);
        }
        let value = Array::matrix(n, len, data)?;
        Ok(self.push(value, Op::SliceCols { x, start, len }, self.req(x)))
    }

    /// Row gather / embedding lookup; indices may repeat.
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = &self.values[x.0];
        let (n, d) = vx.as_mat()?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(TensorError::Contract(format!(
                "rows: index out of range for {n} rows: {idx:?}"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&vx.data()[i * d..(i + 1) * d]);
        }
        let value = Array::matrix(idx.len(), d, data)?;
        Ok(self.push(
            value,
            Op::Rows {
                x,
                idx: idx.to_vec(),
            },
            self.req(x),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.values[a.0].data().iter().cloned().sum();
        self.push(Array::scalar(s), Op::Sum(a), self.req(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = &self.values[a.0];
        let s: F = va.data().iter().cloned().sum();
        let m = s / F::from_f64(va.numel() as f64);
        self.push(Array::scalar(m), Op::Mean(a), self.req(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.values[a.0].reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), self.req(a)))
    }

    /// Reverse sweep from a scalar loss. Returns dLoss/dNode for every node
    /// with `requires_grad` reachable from the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let vl = &self.values[loss.0];
        if vl.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: vl.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Array<F>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Array::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(grads: &mut [Option<Array<F>>], v: Var, shape: &[usize], add: impl FnOnce(&mut [F])) {
        let slot = grads[v.0].get_or_insert_with(|| Array::zeros(shape.to_vec()));
        add(slot.data_mut());
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, node: usize, g: &Array<F>, grads: &mut [Option<Array<F>>]) {
        let need = |v: Var| self.requires[v.0];
        match &self.ops[node] {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                for &p in [a, b].iter() {
                    if need(*p) {
                        Self::acc(grads, *p, g.shape(), |d| {
                            for (dv, &gv) in d.iter_mut().zip(g.data()) {
                                *dv += gv;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    Self::acc(grads, *a, g.shape(), |d| {
                        for (dv, &gv) in d.iter_mut().zip(g.data()) {
                            *dv += gv;
                        }
                    });
                }
                if need(*b) {
                    Self::acc(grads, *b, g.shape(), |d| {
                        for (dv, &gv) in d.iter_mut().zip(g.data()) {
                            *dv -= gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                if need(*a) {
                    Self::acc(grads, *a, g.shape(), |d| {
                        for ((dv, &gv), &bv) in d.iter_mut().zip(g.data()).zip(vb.data()) {
                            *dv += gv * bv;
                        }
                    });
                }
                if need(*b) {
                    Self::acc(grads, *b, g.shape(), |d| {
                        for ((dv, &gv), &av) in d.iter_mut().zip(g.data()).zip(va.data()) {
                            *dv += gv * av;
                        }
                    });
                }
            }
            Op::AddRow(a, b) => {
                let (n, d) = self.values[a.0].dims2();
                if need(*a) {
                    Self::acc(grads, *a, self.values[a.0].shape(), |dst| {
                        for (dv, &gv) in dst.iter_mut().zip(g.data()) {
                            *dv += gv;
                        }
                    });
                }
                if need(*b) {
                    Self::acc(grads, *b, self.values[b.0].shape(), |dst| {
                        for i in 0..n {
                            for j in 0..d {
                                dst[j] += g.data()[i * d + j];
                            }
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if need(*a) {
                    Self::acc(grads, *a, g.shape(), |d| {
                        for (dv, &gv) in d.iter_mut().zip(g.data()) {
                            *dv += gv * *c;
                        }
                    });
                }
            }
            Op::AddConst(a, _) => {
                if need(*a) {
                    Self::acc(grads, *a, g.shape(), |d| {
                        for (dv, &gv) in d.iter_mut().zip(g.data()) {
                            *dv += gv;
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                let (p, q) = va.as_mat().unwrap();
                let (_, r) = vb.as_mat().unwrap();
                if need(*a) {
                    // dA = dC @ B^T
                    Self::acc(grads, *a, va.shape(), |d| {
                        matmul_nt_acc(d, g.data(), vb.data(), p, r, q);
                    });
                }
                if need(*b) {
                    // dB = A^T @ dC
                    Self::acc(grads, *b, vb.shape(), |d| {
                        matmul_tn_acc(d, va.data(), g.data(), p, q, r);
                    });
                }
            }
            Op::Transpose(a) => {
                if need(*a) {
                    let va = &self.values[a.0];
                    let (n, m) = va.as_mat().unwrap();
                    Self::acc(grads, *a, va.shape(), |d| {
                        for i in 0..n {
                            for j in 0..m {
                                d[i * m + j] += g.data()[j * n + i];
                            }
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if need(*a) {
                    let y = &self.values[node];
                    let (n, dcols) = y.dims2();
                    Self::acc(grads, *a, y.shape(), |d| {
                        for i in 0..n {
                            let yr = &y.data()[i * dcols..(i + 1) * dcols];
                            let gr = &g.data()[i * dcols..(i + 1) * dcols];
                            let dot: F = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                            for j in 0..dcols {
                                d[i * dcols + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                if need(*a) {
                    let y = &self.values[node];
                    let (n, dcols) = y.dims2();
                    Self::acc(grads, *a, y.shape(), |d| {
                        for i in 0..n {
                            let yr = &y.data()[i * dcols..(i + 1) * dcols];
                            let gr = &g.data()[i * dcols..(i + 1) * dcols];
                            let gsum: F = gr.iter().cloned().sum();
                            for j in 0..dcols {
                                d[i * dcols + j] += gr[j] - yr[j].exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = &self.values[x.0];
                let (n, dcols) = vx.dims2();
                let dn = F::from_f64(dcols as f64);
                let gam = self.values[gamma.0].data();
                // Recompute per-row stats; cheaper than caching for desk scale.
                let mut xhat = vec![F::zero(); n * dcols];
                let mut rstd = vec![F::zero(); n];
                for i in 0..n {
                    let row = &vx.data()[i * dcols..(i + 1) * dcols];
                    let mean = row.iter().cloned().sum::<F>() / dn;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
                    rstd[i] = (var + *eps).sqrt().recip();
                    for j in 0..dcols {
                        xhat[i * dcols + j] = (row[j] - mean) * rstd[i];
                    }
                }
                if need(*x) {
                    Self::acc(grads, *x, vx.shape(), |d| {
                        for i in 0..n {
                            let gr = &g.data()[i * dcols..(i + 1) * dcols];
                            let xh = &xhat[i * dcols..(i + 1) * dcols];
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for j in 0..dcols {
                                let dxh = gr[j] * gam[j];
                                m1 += dxh;
                                m2 += dxh * xh[j];
                            }
                            m1 = m1 / dn;
                            m2 = m2 / dn;
                            for j in 0..dcols {
                                let dxh = gr[j] * gam[j];
                                d[i * dcols + j] += rstd[i] * (dxh - m1 - xh[j] * m2);
                            }
                        }
                    });
                }
                if need(*gamma) {
                    Self::acc(grads, *gamma, self.values[gamma.0].shape(), |d| {
                        for i in 0..n {
                            for j in 0..dcols {
                                d[j] += g.data()[i * dcols + j] * xhat[i * dcols + j];
                            }
                        }
                    });
                }
                if need(*beta) {
                    Self::acc(grads, *beta, self.values[beta.0].shape(), |d| {
                        for i in 0..n {
                            for j in 0..dcols {
                                d[j] += g.data()[i * dcols + j];
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if need(*a) {
                    let va = &self.values[a.0];
                    Self::acc(grads, *a, va.shape(), |d| {
                        for ((dv, &gv), &xv) in d.iter_mut().zip(g.data()).zip(va.data()) {
                            *dv += gv * gelu_bwd(xv);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if need(*a) {
                    let va = &self.values[a.0];
                    Self::acc(grads, *a, va.shape(), |d| {
                        for ((dv, &gv), &xv) in d.iter_mut().zip(g.data()).zip(va.data()) {
                            if xv > F::zero() {
                                *dv += gv;
                            }
                        }
                    });
                }
            }
            Op::Abs(a) => {
                if need(*a) {
                    let va = &self.values[a.0];
                    Self::acc(grads, *a, va.shape(), |d| {
                        for ((dv, &gv), &xv) in d.iter_mut().zip(g.data()).zip(va.data()) {
                            *dv += gv * xv.signum();
                        }
                    });
                }
            }
            Op::Sqrt(a) => {
                if need(*a) {
                    let y = &self.values[node];
                    let half = F::from_f64(0.5);
                    Self::acc(grads, *a, y.shape(), |d| {
                        for ((dv, &gv), &yv) in d.iter_mut().zip(g.data()).zip(y.data()) {
                            *dv += gv * half / yv;
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut row0 = 0;
                    for &p in parts {
                        let (r, c) = self.values[p.0].as_mat().unwrap();
                        if need(p) {
                            Self::acc(grads, p, self.values[p.0].shape(), |d| {
                                d.iter_mut()
                                    .zip(&g.data()[row0 * c..(row0 + r) * c])
                                    .for_each(|(dv, &gv)| *dv += gv);
                            });
                        }
                        row0 += r;
                    }
                } else {
                    let (rows, cols) = self.values[node].as_mat().unwrap();
                    let mut col0 = 0;
                    for &p in parts {
                        let (_, c) = self.values[p.0].as_mat().unwrap();
                        if need(p) {
                            Self::acc(grads, p, self.values[p.0].shape(), |d| {
                                for i in 0..rows {
                                    for j in 0..c {
                                        d[i * c + j] += g.data()[i * cols + col0 + j];
                                    }
                                }
                            });
                        }
                        col0 += c;
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                if need(*x) {
                    let vx = &self.values[x.0];
                    let (_, d) = vx.as_mat().unwrap();
                    Self::acc(grads, *x, vx.shape(), |dst| {
                        dst[start * d..(start + len) * d]
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(dv, &gv)| *dv += gv);
                    });
                }
            }
            Op::SliceCols { x, start, len } => {
                if need(*x) {
                    let vx = &self.values[x.0];
                    let (n, d) = vx.as_mat().unwrap();
                    Self::acc(grads, *x, vx.shape(), |dst| {
                        for i in 0..n {
                            for j in 0..*len {
                                dst[i * d + start + j] += g.data()[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::Rows { x, idx } => {
                if need(*x) {
                    let vx = &self.values[x.0];
                    let (_, d) = vx.as_mat().unwrap();
                    Self::acc(grads, *x, vx.shape(), |dst| {
                        for (k, &i) in idx.iter().enumerate() {
                            for j in 0..d {
                                dst[i * d + j] += g.data()[k * d + j];
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if need(*a) {
                    let gv = g.item();
                    Self::acc(grads, *a, self.values[a.0].shape(), |d| {
                        d.iter_mut().for_each(|dv| *dv += gv);
                    });
                }
            }
            Op::Mean(a) => {
                if need(*a) {
                    let va = &self.values[a.0];
                    let gv = g.item() / F::from_f64(va.numel() as f64);
                    Self::acc(grads, *a, va.shape(), |d| {
                        d.iter_mut().for_each(|dv| *dv += gv);
                    });
                }
            }
            Op::Reshape(a) => {
                if need(*a) {
                    Self::acc(grads, *a, self.values[a.0].shape(), |d| {
                        d.iter_mut()
                            .zip(g.data())
                            .for_each(|(dv, &gv)| *dv += gv);
                    });
                }
            }
        }
    }
}

/// Tanh-approximation GELU (the usual transformer choice).
fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + three * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}
