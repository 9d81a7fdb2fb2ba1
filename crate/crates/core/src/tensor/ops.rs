//! Tensor operations: broadcasting arithmetic, matmul, shape manipulation,
//! reductions, and fused last-axis kernels (softmax family, layer norm).
//!
//! Backward rules are registered per op as closures over small captured
//! state; bulk inputs are reached through the node's parent references.

use matrixmultiply::dgemm;

use super::{numel_of, Node, Result, Tensor, TensorError};

/// Right-aligned numpy broadcasting of two shapes.
fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let ad = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let bd = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = if ad == bd || bd == 1 {
            ad
        } else if ad == 1 {
            bd
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` within the broadcast space `out`, with 0 on
/// broadcast (or missing) dimensions.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        let od = rank - shape.len() + d;
        strides[od] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out_shape`.
fn for_each_broadcast(
    out_shape: &[usize],
    astr: &[usize],
    bstr: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel_of(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for i in 0..n {
        f(i, ao, bo);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += astr[d];
            bo += bstr[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ao -= astr[d] * out_shape[d];
            bo -= bstr[d] * out_shape[d];
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

fn binary_op(op: BinOp, lhs: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_shapes(op.name(), lhs.shape(), rhs.shape())?;
    let n = numel_of(&out_shape);
    let mut data = vec![0.0; n];
    if lhs.shape() == rhs.shape() {
        let (a, b) = (lhs.data(), rhs.data());
        for i in 0..n {
            data[i] = op.apply(a[i], b[i]);
        }
    } else {
        let astr = bcast_strides(lhs.shape(), &out_shape);
        let bstr = bcast_strides(rhs.shape(), &out_shape);
        let (a, b) = (lhs.data(), rhs.data());
        for_each_broadcast(&out_shape, &astr, &bstr, |i, ao, bo| {
            data[i] = op.apply(a[ao], b[bo]);
        });
    }
    if matches!(op, BinOp::Div) && !data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op: "div" });
    }
    let oshape = out_shape.clone();
    let grad_fn = Box::new(move |node: &Node, g: &[f64]| {
        let la = node.parent_shape(0).to_vec();
        let lb = node.parent_shape(1).to_vec();
        let mut ga = vec![0.0; numel_of(&la)];
        let mut gb = vec![0.0; numel_of(&lb)];
        let astr = bcast_strides(&la, &oshape);
        let bstr = bcast_strides(&lb, &oshape);
        let (a, b) = (node.parent_data(0), node.parent_data(1));
        for_each_broadcast(&oshape, &astr, &bstr, |i, ao, bo| match op {
            BinOp::Add => {
                ga[ao] += g[i];
                gb[bo] += g[i];
            }
            BinOp::Sub => {
                ga[ao] += g[i];
                gb[bo] -= g[i];
            }
            BinOp::Mul => {
                ga[ao] += g[i] * b[bo];
                gb[bo] += g[i] * a[ao];
            }
            BinOp::Div => {
                ga[ao] += g[i] / b[bo];
                gb[bo] -= g[i] * a[ao] / (b[bo] * b[bo]);
            }
        });
        vec![ga, gb]
    });
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![lhs.clone(), rhs.clone()],
        grad_fn,
    ))
}

/// Row-major GEMM: `c = op(a) @ op(b) + beta * c` where `op` optionally
/// transposes the stored layout. `a` stores `[m,k]` (or `[k,m]` when `ta`),
/// `b` stores `[k,n]` (or `[n,k]` when `tb`), `c` is `[m,n]`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn unary_op(
    name: &'static str,
    t: &Tensor,
    f: impl Fn(f64) -> f64,
    // dy/dx from (x, y)
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    check_finite: bool,
) -> Result<Tensor> {
    let data: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
    if check_finite && !data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op: name });
    }
    let grad_fn = Box::new(move |node: &Node, g: &[f64]| {
        let x = node.parent_data(0);
        let y = node.data();
        vec![(0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect()]
    });
    Ok(Tensor::from_op(
        t.shape().to_vec(),
        data,
        vec![t.clone()],
        grad_fn,
    ))
}

fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    // (output shape, input strides ordered by output dims)
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    (out_shape, strides)
}

fn permute_raw(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let (out_shape, strides) = permute_map(shape, perm);
    let n = data.len();
    let mut out = vec![0.0; n];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for item in out.iter_mut().take(n) {
        *item = data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= strides[d] * out_shape[d];
        }
    }
    (out_shape, out)
}

/// (outer, axis size, inner) decomposition around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(BinOp::Add, self, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(BinOp::Sub, self, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(BinOp::Mul, self, rhs)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(BinOp::Div, self, rhs)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        unary_op("scale", self, |x| c * x, move |_, _| c, false)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        unary_op("add_scalar", self, |x| x + c, |_, _| 1.0, false)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary_op("exp", self, f64::exp, |_, y| y, true)
    }

    pub fn log(&self) -> Result<Tensor> {
        unary_op("log", self, f64::ln, |x, _| 1.0 / x, true)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        unary_op("sqrt", self, f64::sqrt, |_, y| 0.5 / y, true)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        const S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044_715;
        unary_op(
            "gelu",
            self,
            |x| 0.5 * x * (1.0 + (S * (x + C * x * x * x)).tanh()),
            |x, _| {
                let t = (S * (x + C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * S * (1.0 + 3.0 * C * x * x)
            },
            false,
        )
    }

    /// Matrix product. Accepts `[.., m, k] @ [.., k, n]` with identical
    /// leading dims, or a rank-2 right operand shared across the batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        };
        if ls.len() < 2 || rs.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        let shared_rhs = rs.len() == 2 && ls.len() > 2;
        if k != k2 || (!shared_rhs && ls[..ls.len() - 2] != rs[..rs.len() - 2]) {
            return Err(mismatch());
        }
        let batch: usize = ls[..ls.len() - 2].iter().product();
        let mut out_shape = ls[..ls.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; batch * m * n];
        let (a, b) = (self.data(), rhs.data());
        for i in 0..batch {
            let bb = if shared_rhs { b } else { &b[i * k * n..] };
            gemm(m, k, n, &a[i * m * k..], false, bb, false, &mut data[i * m * n..], 0.0);
        }
        let grad_fn = Box::new(move |node: &Node, g: &[f64]| {
            let a = node.parent_data(0);
            let b = node.parent_data(1);
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for i in 0..batch {
                let gi = &g[i * m * n..];
                // dA = dC @ B^T
                let bb = if shared_rhs { b } else { &b[i * k * n..] };
                gemm(m, n, k, gi, false, bb, true, &mut ga[i * m * k..], 0.0);
                // dB = A^T @ dC, accumulated when B is shared
                let gbi = if shared_rhs { &mut gb[..] } else { &mut gb[i * k * n..] };
                let beta = if shared_rhs && i > 0 { 1.0 } else { 0.0 };
                gemm(k, m, n, &a[i * m * k..], true, gi, false, gbi, beta);
            }
            vec![ga, gb]
        });
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            grad_fn,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.numel(),
            });
        }
        let grad_fn = Box::new(move |_: &Node, g: &[f64]| vec![g.to_vec()]);
        Ok(Tensor::from_op_shared(
            shape.to_vec(),
            self.data_arc(),
            vec![self.clone()],
            grad_fn,
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Domain {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of 0..{rank}"),
            });
        }
        let (out_shape, data) = permute_raw(self.data(), self.shape(), perm);
        let mut inv = vec![0usize; rank];
        for (d, &p) in perm.iter().enumerate() {
            inv[p] = d;
        }
        let oshape = out_shape.clone();
        let grad_fn = Box::new(move |_: &Node, g: &[f64]| {
            vec![permute_raw(g, &oshape, &inv).1]
        });
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], grad_fn))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Domain {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", self.shape()),
            });
        }
        self.permute(&[1, 0])
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op: "narrow", axis, rank });
        }
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        if start + len > dim {
            return Err(TensorError::IndexOutOfBounds {
                op: "narrow",
                index: start + len,
                size: dim,
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let s = (o * dim + start) * inner;
            let d = o * len * inner;
            data[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        let grad_fn = Box::new(move |node: &Node, g: &[f64]| {
            let mut gp = vec![0.0; node.parent_data(0).len()];
            for o in 0..outer {
                let s = (o * dim + start) * inner;
                let d = o * len * inner;
                gp[s..s + len * inner].copy_from_slice(&g[d..d + len * inner]);
            }
            vec![gp]
        });
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], grad_fn))
    }

    /// Concatenation along `axis`; all other dims must match.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Domain {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op: "concat", axis, rank });
        }
        let mut axis_total = 0usize;
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut data = vec![0.0; numel_of(&out_shape)];
        let mut offset = 0usize;
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        for (p, &dim) in parts.iter().zip(&dims) {
            let src = p.data();
            for o in 0..outer {
                let s = o * dim * inner;
                let d = (o * axis_total + offset) * inner;
                data[d..d + dim * inner].copy_from_slice(&src[s..s + dim * inner]);
            }
            offset += dim;
        }
        let grad_fn = Box::new(move |_: &Node, g: &[f64]| {
            let mut grads = Vec::with_capacity(dims.len());
            let mut offset = 0usize;
            for &dim in &dims {
                let mut gp = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let s = (o * axis_total + offset) * inner;
                    let d = o * dim * inner;
                    gp[d..d + dim * inner].copy_from_slice(&g[s..s + dim * inner]);
                }
                offset += dim;
                grads.push(gp);
            }
            grads
        });
        Ok(Tensor::from_op(out_shape, data, parts.to_vec(), grad_fn))
    }

    /// Gather entries along `axis` at the given indices (with repetition).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op: "index_select", axis, rank });
        }
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(TensorError::IndexOutOfBounds {
                op: "index_select",
                index: bad,
                size: dim,
            });
        }
        let len = indices.len();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for (j, &ix) in indices.iter().enumerate() {
                let s = (o * dim + ix) * inner;
                let d = (o * len + j) * inner;
                data[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let idx: Vec<usize> = indices.to_vec();
        let grad_fn = Box::new(move |node: &Node, g: &[f64]| {
            let mut gp = vec![0.0; node.parent_data(0).len()];
            for o in 0..outer {
                for (j, &ix) in idx.iter().enumerate() {
                    let s = (o * dim + ix) * inner;
                    let d = (o * len + j) * inner;
                    for t in 0..inner {
                        gp[s + t] += g[d + t];
                    }
                }
            }
            vec![gp]
        });
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], grad_fn))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let grad_fn =
            Box::new(move |_: &Node, g: &[f64]| vec![vec![g[0]; n]]);
        Ok(Tensor::from_op(vec![], vec![s], vec![self.clone()], grad_fn))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::Domain {
                op: "mean_all",
                detail: "empty tensor".into(),
            });
        }
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        let grad_fn =
            Box::new(move |_: &Node, g: &[f64]| vec![vec![g[0] / n as f64; n]]);
        Ok(Tensor::from_op(vec![], vec![s], vec![self.clone()], grad_fn))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.reduce_axis("sum_axis", axis, keepdim, false)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.reduce_axis("mean_axis", axis, keepdim, true)
    }

    fn reduce_axis(&self, op: &'static str, axis: usize, keepdim: bool, mean: bool) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op, axis, rank });
        }
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        if mean && dim == 0 {
            return Err(TensorError::Domain { op, detail: "empty axis".into() });
        }
        let scale = if mean { 1.0 / dim as f64 } else { 1.0 };
        let src = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..dim {
                let s = (o * dim + t) * inner;
                for j in 0..inner {
                    data[o * inner + j] += src[s + j];
                }
            }
        }
        if mean {
            for v in &mut data {
                *v *= scale;
            }
        }
        let mut out_shape = self.shape().to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let grad_fn = Box::new(move |node: &Node, g: &[f64]| {
            let mut gp = vec![0.0; node.parent_data(0).len()];
            for o in 0..outer {
                for t in 0..dim {
                    let s = (o * dim + t) * inner;
                    for j in 0..inner {
                        gp[s + j] = g[o * inner + j] * scale;
                    }
                }
            }
            vec![gp]
        });
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], grad_fn))
    }

    /// Softmax over the last axis at temperature `temp`.
    pub fn softmax(&self, temp: f64) -> Result<Tensor> {
        if !(temp > 0.0) || !temp.is_finite() {
            return Err(TensorError::Domain {
                op: "softmax",
                detail: format!("temperature must be positive, got {temp}"),
            });
        }
        let (rows, d) = self.last_axis_rows("softmax")?;
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..d {
                let e = ((row[j] - m) / temp).exp();
                data[r * d + j] = e;
                s += e;
            }
            for j in 0..d {
                data[r * d + j] /= s;
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let grad_fn = Box::new(move |node: &Node, g: &[f64]| {
            let y = node.data();
            let mut gp = vec![0.0; g.len()];
            for r in 0..rows {
                let o = r * d;
                let dot: f64 = (0..d).map(|j| g[o + j] * y[o + j]).sum();
                for j in 0..d {
                    gp[o + j] = y[o + j] * (g[o + j] - dot) / temp;
                }
            }
            vec![gp]
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            grad_fn,
        ))
    }

    /// Log-softmax over the last axis at temperature `temp`.
    pub fn log_softmax(&self, temp: f64) -> Result<Tensor> {
        if !(temp > 0.0) || !temp.is_finite() {
            return Err(TensorError::Domain {
                op: "log_softmax",
                detail: format!("temperature must be positive, got {temp}"),
            });
        }
        let (rows, d) = self.last_axis_rows("log_softmax")?;
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = (row.iter().map(|&x| ((x - m) / temp).exp()).sum::<f64>()).ln();
            for j in 0..d {
                data[r * d + j] = (row[j] - m) / temp - lse;
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let grad_fn = Box::new(move |node: &Node, g: &[f64]| {
            let y = node.data();
            let mut gp = vec![0.0; g.len()];
            for r in 0..rows {
                let o = r * d;
                let gsum: f64 = g[o..o + d].iter().sum();
                for j in 0..d {
                    gp[o + j] = (g[o + j] - y[o + j].exp() * gsum) / temp;
                }
            }
            vec![gp]
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            grad_fn,
        ))
    }

    /// Log-sum-exp over the last axis; output drops that axis.
    pub fn logsumexp_last(&self) -> Result<Tensor> {
        let (rows, d) = self.last_axis_rows("logsumexp")?;
        let src = self.data();
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            data[r] = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "logsumexp" });
        }
        let out_shape = self.shape()[..self.rank() - 1].to_vec();
        let grad_fn = Box::new(move |node: &Node, g: &[f64]| {
            let x = node.parent_data(0);
            let y = node.data();
            let mut gp = vec![0.0; x.len()];
            for r in 0..rows {
                for j in 0..d {
                    gp[r * d + j] = g[r] * (x[r * d + j] - y[r]).exp();
                }
            }
            vec![gp]
        });
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], grad_fn))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, d) = self.last_axis_rows("layer_norm")?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let src = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mu) * inv * gm[j] + bt[j];
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "layer_norm" });
        }
        let grad_fn = Box::new(move |node: &Node, g: &[f64]| {
            let x = node.parent_data(0);
            let gm = node.parent_data(1);
            let mut gx = vec![0.0; x.len()];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let o = r * d;
                let row = &x[o..o + d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let mut m1 = 0.0; // mean of dxhat
                let mut m2 = 0.0; // mean of dxhat * xhat
                for j in 0..d {
                    let xh = (row[j] - mu) * inv;
                    let dxh = g[o + j] * gm[j];
                    m1 += dxh;
                    m2 += dxh * xh;
                    gg[j] += g[o + j] * xh;
                    gb[j] += g[o + j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let xh = (row[j] - mu) * inv;
                    let dxh = g[o + j] * gm[j];
                    gx[o + j] = (dxh - m1 - xh * m2) * inv;
                }
            }
            vec![gx, gg, gb]
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            grad_fn,
        ))
    }

    /// Rows normalized to unit L2 norm (stabilized by `eps` inside the sqrt).
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let norms = self
            .mul(self)?
            .sum_axis(self.rank() - 1, true)?
            .add_scalar(eps)?
            .sqrt()?;
        self.div(&norms)
    }

    /// `a[i] . b[j]` cosine similarities as an `[n, m]` matrix.
    pub fn cosine_similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity_matrix",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let an = a.l2_normalize_rows(1e-12)?;
        let bn = b.l2_normalize_rows(1e-12)?;
        an.matmul(&bn.transpose()?)
    }

    /// `x @ w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.matmul(w)?.add(b)
    }

    fn last_axis_rows(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() == 0 {
            return Err(TensorError::AxisOutOfRange { op, axis: 0, rank: 0 });
        }
        let d = self.shape()[self.rank() - 1];
        if d == 0 {
            return Err(TensorError::Domain { op, detail: "empty last axis".into() });
        }
        Ok((self.numel() / d, d))
    }
}
