//! Forward op recording and the backward match.

use super::{Node, Op, Tensor, TensorError};

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out[r * cols..(r + 1) * cols].iter_mut() {
            *o /= sum;
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + GELU_A * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
}

impl Tensor {
    fn binary_check(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if !self.tape.same_tape(&other.tape) {
            return Err(TensorError::TapeMismatch);
        }
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn any_grad(&self, other: &Tensor) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    /// `self [m,k] · other [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if !self.tape.same_tape(&other.tape) {
            return Err(TensorError::TapeMismatch);
        }
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let out = matmul_raw(&self.value(), &other.value(), m, k, n);
        self.tape.count_flops(2 * (m * k * n) as u64);
        Ok(self.tape.push(
            out,
            vec![m, n],
            Op::MatMul { a: self.id, b: other.id },
            self.any_grad(other),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "rank-2 tensor",
                got: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self
            .tape
            .push(out, vec![n, m], Op::Transpose { x: self.id }, self.requires_grad()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_check(other, "add")?;
        let out: Vec<f64> = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a + b)
            .collect();
        self.tape.count_flops(out.len() as u64);
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            Op::Add { a: self.id, b: other.id },
            self.any_grad(other),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_check(other, "sub")?;
        let out: Vec<f64> = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a - b)
            .collect();
        self.tape.count_flops(out.len() as u64);
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            Op::Sub { a: self.id, b: other.id },
            self.any_grad(other),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_check(other, "mul")?;
        let out: Vec<f64> = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a * b)
            .collect();
        self.tape.count_flops(out.len() as u64);
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            Op::Mul { a: self.id, b: other.id },
            self.any_grad(other),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_check(other, "div")?;
        let out: Vec<f64> = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a / b)
            .collect();
        self.tape.count_flops(out.len() as u64);
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            Op::Div { a: self.id, b: other.id },
            self.any_grad(other),
        ))
    }

    /// Broadcast add of a `[d]` row vector over every row of `[n,d]`.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor, TensorError> {
        if !self.tape.same_tape(&row.tape) {
            return Err(TensorError::TapeMismatch);
        }
        let d = self.row_len();
        if row.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let r = row.value();
        let mut out = self.value();
        for chunk in out.chunks_mut(d) {
            for (o, v) in chunk.iter_mut().zip(&r) {
                *o += v;
            }
        }
        self.tape.count_flops(out.len() as u64);
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            Op::AddRow { x: self.id, row: row.id },
            self.any_grad(row),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| v * c).collect();
        self.tape.count_flops(out.len() as u64);
        self.tape
            .push(out, self.shape.clone(), Op::Scale { x: self.id, c }, self.requires_grad())
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| v + c).collect();
        self.tape.count_flops(out.len() as u64);
        self.tape
            .push(out, self.shape.clone(), Op::AddConst { x: self.id }, self.requires_grad())
    }

    /// Multiply every element by a scalar tensor (gradient flows to both).
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor, TensorError> {
        if !self.tape.same_tape(&s.tape) {
            return Err(TensorError::TapeMismatch);
        }
        if s.numel() != 1 {
            return Err(TensorError::BadShape {
                op: "scale_by",
                expected: "scalar multiplier",
                got: s.shape.clone(),
            });
        }
        let sv = s.item();
        let out: Vec<f64> = self.value().iter().map(|v| v * sv).collect();
        self.tape.count_flops(out.len() as u64);
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            Op::ScaleByScalar { x: self.id, s: s.id },
            self.any_grad(s),
        ))
    }

    pub fn neg(&self) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| -v).collect();
        self.tape
            .push(out, self.shape.clone(), Op::Neg { x: self.id }, self.requires_grad())
    }

    pub fn sigmoid(&self) -> Tensor {
        // Clamped to the open interval so saturated inputs stay strictly
        // inside (0,1) in f64.
        let hi = 1.0 - f64::EPSILON / 2.0;
        let out: Vec<f64> = self
            .value()
            .iter()
            .map(|v| (1.0 / (1.0 + (-v).exp())).clamp(f64::MIN_POSITIVE, hi))
            .collect();
        self.tape.count_flops(3 * out.len() as u64);
        self.tape
            .push(out, self.shape.clone(), Op::Sigmoid { x: self.id }, self.requires_grad())
    }

    pub fn gelu(&self) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| gelu(*v)).collect();
        self.tape.count_flops(8 * out.len() as u64);
        self.tape
            .push(out, self.shape.clone(), Op::Gelu { x: self.id }, self.requires_grad())
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| v.exp()).collect();
        self.tape.count_flops(out.len() as u64);
        self.tape
            .push(out, self.shape.clone(), Op::Exp { x: self.id }, self.requires_grad())
    }

    pub fn ln(&self) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| v.ln()).collect();
        self.tape.count_flops(out.len() as u64);
        self.tape
            .push(out, self.shape.clone(), Op::Ln { x: self.id }, self.requires_grad())
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax(&self) -> Tensor {
        let cols = last_extent(&self.shape);
        let rows = self.numel() / cols.max(1);
        let out = softmax_rows(&self.value(), rows, cols);
        self.tape.count_flops(3 * out.len() as u64);
        self.tape
            .push(out, self.shape.clone(), Op::Softmax { x: self.id }, self.requires_grad())
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor {
        let cols = last_extent(&self.shape);
        let rows = self.numel() / cols.max(1);
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.tape.count_flops(3 * out.len() as u64);
        self.tape
            .push(out, self.shape.clone(), Op::LogSoftmax { x: self.id }, self.requires_grad())
    }

    /// Row-wise layer normalization over the last axis with learnable gain
    /// and bias of length `d`.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        if !self.tape.same_tape(&gain.tape) || !self.tape.same_tape(&bias.tape) {
            return Err(TensorError::TapeMismatch);
        }
        let d = last_extent(&self.shape);
        if gain.numel() != d || bias.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let rows = self.numel() / d;
        let x = self.value();
        let g = gain.value();
        let b = bias.value();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        self.tape.count_flops(6 * out.len() as u64);
        Ok(self.tape.push(
            out,
            self.shape.clone(),
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, eps },
            self.requires_grad() || gain.requires_grad() || bias.requires_grad(),
        ))
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean_all(&self) -> Tensor {
        let x = self.value();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        self.tape.count_flops(x.len() as u64);
        self.tape
            .push(vec![m], vec![1], Op::MeanAll { x: self.id }, self.requires_grad())
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&self) -> Tensor {
        let x = self.value();
        let s = x.iter().sum::<f64>();
        self.tape.count_flops(x.len() as u64);
        self.tape
            .push(vec![s], vec![1], Op::SumAll { x: self.id }, self.requires_grad())
    }

    /// Gather rows by index (duplicates allowed; backward scatter-adds).
    /// On a rank-1 tensor this gathers elements.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let rows = self.rows();
        let d = self.row_len();
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
        }
        let x = self.value();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(self.tape.push(
            out,
            shape,
            Op::GatherRows { x: self.id, indices: indices.to_vec() },
            self.requires_grad(),
        ))
    }

    /// Inverse of `gather_rows`: place row `j` of `self` at `indices[j]` of an
    /// `out_rows`-row result, zeros elsewhere. Indices must be distinct.
    pub fn scatter_rows(&self, indices: &[usize], out_rows: usize) -> Result<Tensor, TensorError> {
        if indices.len() != self.rows() {
            return Err(TensorError::BadShape {
                op: "scatter_rows",
                expected: "one index per input row",
                got: self.shape.clone(),
            });
        }
        let d = self.row_len();
        let x = self.value();
        let mut out = vec![0.0; out_rows * d];
        for (j, &i) in indices.iter().enumerate() {
            if i >= out_rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "scatter_rows",
                    index: i,
                    extent: out_rows,
                });
            }
            out[i * d..(i + 1) * d].copy_from_slice(&x[j * d..(j + 1) * d]);
        }
        let mut shape = self.shape.clone();
        shape[0] = out_rows;
        Ok(self.tape.push(
            out,
            shape,
            Op::ScatterRows { x: self.id, indices: indices.to_vec() },
            self.requires_grad(),
        ))
    }

    /// Gather columns by index from `[n,d]` giving `[n, indices.len()]`.
    pub fn gather_cols(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_cols",
                expected: "rank-2 tensor",
                got: self.shape.clone(),
            });
        }
        let (n, d) = (self.shape[0], self.shape[1]);
        for &j in indices {
            if j >= d {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_cols",
                    index: j,
                    extent: d,
                });
            }
        }
        let x = self.value();
        let mut out = Vec::with_capacity(n * indices.len());
        for r in 0..n {
            for &j in indices {
                out.push(x[r * d + j]);
            }
        }
        Ok(self.tape.push(
            out,
            vec![n, indices.len()],
            Op::GatherCols { x: self.id, indices: indices.to_vec() },
            self.requires_grad(),
        ))
    }

    /// Flatten `[n,d]` (or `[n]`) into `[n*d]` keeping row-major order.
    pub fn flatten(&self) -> Tensor {
        // Recorded as a 1-index gather of the whole buffer reshaped; cheapest
        // is a ConcatRows of self alone with a new shape.
        let out = self.value();
        let n = out.len();
        self.tape.push(
            out,
            vec![n],
            Op::ConcatRows { parts: vec![self.id] },
            self.requires_grad(),
        )
    }
}

/// Stack tensors with equal row length along axis 0.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let tape = parts[0].tape.clone();
    let d = parts[0].row_len();
    let mut data = Vec::new();
    let mut rows = 0;
    let mut requires = false;
    for p in parts {
        if !tape.same_tape(&p.tape) {
            return Err(TensorError::TapeMismatch);
        }
        if p.row_len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        rows += p.rows();
        requires |= p.requires_grad();
        data.extend_from_slice(&p.value());
    }
    let mut shape = parts[0].shape.clone();
    if shape.is_empty() {
        shape = vec![rows];
    } else {
        shape[0] = rows;
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(data, shape, Op::ConcatRows { parts: ids }, requires))
}

/// Stack rank-2 tensors with equal row count along axis 1.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let tape = parts[0].tape.clone();
    let n = parts[0].rows();
    let mut widths = Vec::with_capacity(parts.len());
    let mut requires = false;
    for p in parts {
        if !tape.same_tape(&p.tape) {
            return Err(TensorError::TapeMismatch);
        }
        if p.shape.len() != 2 || p.rows() != n {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        widths.push(p.shape[1]);
        requires |= p.requires_grad();
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    let values: Vec<Vec<f64>> = parts.iter().map(|p| p.value()).collect();
    for r in 0..n {
        for (p, w) in values.iter().zip(&widths) {
            data.extend_from_slice(&p[r * w..(r + 1) * w]);
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(data, vec![n, total], Op::ConcatCols { parts: ids }, requires))
}

/// One node's contribution to its parents' gradients.
pub(crate) fn backprop_node(nodes: &mut [Node], id: usize) {
    let op = nodes[id].op.clone();
    if matches!(op, Op::Leaf) {
        return;
    }
    let g = std::mem::take(&mut nodes[id].grad);
    if g.iter().all(|v| *v == 0.0) {
        nodes[id].grad = g;
        return;
    }
    match op {
        Op::Leaf => unreachable!(),
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            // dA = G · Bᵀ
            let bt = {
                let bd = &nodes[b].data;
                let mut t = vec![0.0; bd.len()];
                for i in 0..k {
                    for j in 0..n {
                        t[j * k + i] = bd[i * n + j];
                    }
                }
                t
            };
            let da = matmul_raw(&g, &bt, m, n, k);
            // dB = Aᵀ · G
            let at = {
                let ad = &nodes[a].data;
                let mut t = vec![0.0; ad.len()];
                for i in 0..m {
                    for j in 0..k {
                        t[j * m + i] = ad[i * k + j];
                    }
                }
                t
            };
            let db = matmul_raw(&at, &g, k, m, n);
            accumulate(nodes, a, &da);
            accumulate(nodes, b, &db);
        }
        Op::Transpose { x } => {
            let (n, m) = (nodes[id].shape[0], nodes[id].shape[1]);
            let mut dx = vec![0.0; g.len()];
            for i in 0..n {
                for j in 0..m {
                    dx[j * n + i] = g[i * m + j];
                }
            }
            accumulate(nodes, x, &dx);
        }
        Op::Add { a, b } => {
            accumulate(nodes, a, &g);
            accumulate(nodes, b, &g);
        }
        Op::Sub { a, b } => {
            accumulate(nodes, a, &g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(nodes, b, &neg);
        }
        Op::Mul { a, b } => {
            let da: Vec<f64> = g.iter().zip(&nodes[b].data).map(|(g, b)| g * b).collect();
            let db: Vec<f64> = g.iter().zip(&nodes[a].data).map(|(g, a)| g * a).collect();
            accumulate(nodes, a, &da);
            accumulate(nodes, b, &db);
        }
        Op::Div { a, b } => {
            let da: Vec<f64> = g.iter().zip(&nodes[b].data).map(|(g, b)| g / b).collect();
            let db: Vec<f64> = g
                .iter()
                .zip(nodes[a].data.iter().zip(&nodes[b].data))
                .map(|(g, (a, b))| -g * a / (b * b))
                .collect();
            accumulate(nodes, a, &da);
            accumulate(nodes, b, &db);
        }
        Op::AddRow { x, row } => {
            let d = nodes[row].data.len();
            let mut drow = vec![0.0; d];
            for chunk in g.chunks(d) {
                for (o, v) in drow.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            accumulate(nodes, x, &g);
            accumulate(nodes, row, &drow);
        }
        Op::Scale { x, c } => {
            let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(nodes, x, &dx);
        }
        Op::AddConst { x } => {
            accumulate(nodes, x, &g);
        }
        Op::ScaleByScalar { x, s } => {
            let sv = nodes[s].data[0];
            let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
            let ds: f64 = g.iter().zip(&nodes[x].data).map(|(g, x)| g * x).sum();
            accumulate(nodes, x, &dx);
            accumulate(nodes, s, &[ds]);
        }
        Op::Neg { x } => {
            let dx: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(nodes, x, &dx);
        }
        Op::Sigmoid { x } => {
            let dx: Vec<f64> = g
                .iter()
                .zip(&nodes[id].data)
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            accumulate(nodes, x, &dx);
        }
        Op::Gelu { x } => {
            let dx: Vec<f64> = g
                .iter()
                .zip(&nodes[x].data)
                .map(|(g, v)| g * gelu_grad(*v))
                .collect();
            accumulate(nodes, x, &dx);
        }
        Op::Exp { x } => {
            let dx: Vec<f64> = g.iter().zip(&nodes[id].data).map(|(g, y)| g * y).collect();
            accumulate(nodes, x, &dx);
        }
        Op::Ln { x } => {
            let dx: Vec<f64> = g.iter().zip(&nodes[x].data).map(|(g, v)| g / v).collect();
            accumulate(nodes, x, &dx);
        }
        Op::Softmax { x } => {
            let cols = last_extent(&nodes[id].shape);
            let y = &nodes[id].data;
            let mut dx = vec![0.0; g.len()];
            for r in 0..g.len() / cols {
                let gy: f64 = (0..cols)
                    .map(|j| g[r * cols + j] * y[r * cols + j])
                    .sum();
                for j in 0..cols {
                    dx[r * cols + j] = y[r * cols + j] * (g[r * cols + j] - gy);
                }
            }
            accumulate(nodes, x, &dx);
        }
        Op::LogSoftmax { x } => {
            let cols = last_extent(&nodes[id].shape);
            let y = &nodes[id].data;
            let mut dx = vec![0.0; g.len()];
            for r in 0..g.len() / cols {
                let gsum: f64 = (0..cols).map(|j| g[r * cols + j]).sum();
                for j in 0..cols {
                    dx[r * cols + j] = g[r * cols + j] - y[r * cols + j].exp() * gsum;
                }
            }
            accumulate(nodes, x, &dx);
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let d = nodes[gain].data.len();
            let rows = g.len() / d;
            let mut dx = vec![0.0; g.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let row = &nodes[x].data[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                let gout = &g[r * d..(r + 1) * d];
                let mut dxhat = vec![0.0; d];
                for j in 0..d {
                    dbias[j] += gout[j];
                    dgain[j] += gout[j] * xhat[j];
                    dxhat[j] = gout[j] * nodes[gain].data[j];
                }
                let m1 = dxhat.iter().sum::<f64>() / d as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[r * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            accumulate(nodes, x, &dx);
            accumulate(nodes, gain, &dgain);
            accumulate(nodes, bias, &dbias);
        }
        Op::MeanAll { x } => {
            let n = nodes[x].data.len();
            let v = g[0] / n as f64;
            let dx = vec![v; n];
            accumulate(nodes, x, &dx);
        }
        Op::SumAll { x } => {
            let dx = vec![g[0]; nodes[x].data.len()];
            accumulate(nodes, x, &dx);
        }
        Op::GatherRows { x, indices } => {
            let d = row_len_of(&nodes[x].shape);
            let mut dx = vec![0.0; nodes[x].data.len()];
            for (j, &i) in indices.iter().enumerate() {
                for c in 0..d {
                    dx[i * d + c] += g[j * d + c];
                }
            }
            accumulate(nodes, x, &dx);
        }
        Op::ScatterRows { x, indices } => {
            let d = row_len_of(&nodes[x].shape);
            let mut dx = vec![0.0; nodes[x].data.len()];
            for (j, &i) in indices.iter().enumerate() {
                dx[j * d..(j + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
            }
            accumulate(nodes, x, &dx);
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p].data.len();
                let slice: Vec<f64> = g[off..off + len].to_vec();
                accumulate(nodes, p, &slice);
                off += len;
            }
        }
        Op::GatherCols { x, indices } => {
            let (n, d) = (nodes[x].shape[0], nodes[x].shape[1]);
            let w = indices.len();
            let mut dx = vec![0.0; nodes[x].data.len()];
            for r in 0..n {
                for (c, &j) in indices.iter().enumerate() {
                    dx[r * d + j] += g[r * w + c];
                }
            }
            accumulate(nodes, x, &dx);
        }
        Op::ConcatCols { parts } => {
            let n = nodes[id].shape[0];
            let widths: Vec<usize> = parts.iter().map(|&p| nodes[p].shape[1]).collect();
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (idx, &p) in parts.iter().enumerate() {
                let w = widths[idx];
                let mut dp = vec![0.0; n * w];
                for r in 0..n {
                    dp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                }
                accumulate(nodes, p, &dp);
                off += w;
            }
        }
    }
    nodes[id].grad = g;
}

fn accumulate(nodes: &mut [Node], id: usize, contrib: &[f64]) {
    let grad = &mut nodes[id].grad;
    debug_assert_eq!(grad.len(), contrib.len());
    for (g, c) in grad.iter_mut().zip(contrib) {
        *g += c;
    }
}

fn last_extent(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn row_len_of(shape: &[usize]) -> usize {
    if shape.len() <= 1 {
        1
    } else {
        shape[1..].iter().product()
    }
}
