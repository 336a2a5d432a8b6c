//! Small dense matrix ops used by the region-statistics loss.

use super::{Graph, Op};
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::{NodeId, TensorND};

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
fn invert_raw<S: Scalar>(a: &[S], n: usize) -> Result<Vec<S>> {
    let mut work = a.to_vec();
    let mut inv = vec![S::zero(); n * n];
    for i in 0..n {
        inv[i * n + i] = S::one();
    }
    for col in 0..n {
        let mut pivot = col;
        let mut best = work[col * n + col].abs();
        for row in col + 1..n {
            let v = work[row * n + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best == S::zero() {
            return Err(Error::InvalidArgument(format!(
                "matrix is singular at column {col}"
            )));
        }
        if pivot != col {
            for j in 0..n {
                work.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
        }
        let d = work[col * n + col];
        for j in 0..n {
            work[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = work[row * n + col];
            if f == S::zero() {
                continue;
            }
            for j in 0..n {
                let wc = work[col * n + j];
                let ic = inv[col * n + j];
                work[row * n + j] -= f * wc;
                inv[row * n + j] -= f * ic;
            }
        }
    }
    Ok(inv)
}

fn square_dims<S: Scalar>(g: &Graph<S>, id: NodeId, what: &str) -> Result<usize> {
    let shape = g.nodes[id].value.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects a square matrix, got {shape:?}"
        )));
    }
    Ok(shape[0])
}

impl<S: Scalar> Graph<S> {
    /// Extract the [H,W] spatial plane at (batch, channel) of a [B,C,H,W] tensor.
    pub fn plane(&mut self, input: NodeId, batch: usize, channel: usize) -> Result<NodeId> {
        let shape = self.nodes[input].value.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "plane expects rank 4 [B,C,H,W], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if batch >= b || channel >= c {
            return Err(Error::InvalidArgument(format!(
                "plane ({batch},{channel}) out of range for {b}x{c} planes"
            )));
        }
        let base = (batch * c + channel) * h * w;
        let data = self.nodes[input].value.data()[base..base + h * w].to_vec();
        let value = TensorND::new(vec![h, w], data)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::Plane { input, batch, channel }, value, rg))
    }

    pub(super) fn plane_backward(
        &mut self,
        input: NodeId,
        batch: usize,
        channel: usize,
        gout: &[S],
    ) {
        let shape = self.nodes[input].value.shape();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let base = (batch * c + channel) * h * w;
        let mut gx = vec![S::zero(); self.nodes[input].value.numel()];
        gx[base..base + h * w].copy_from_slice(gout);
        self.accumulate(input, &gx);
    }

    /// Collect r x r windows of an [H,W] matrix, top-left corners stepping by
    /// `stride`, into the columns of an [r*r, L] matrix. Window element
    /// (dy,dx) lands in row dy*r + dx.
    pub fn unfold(&mut self, input: NodeId, r: usize, stride: usize) -> Result<NodeId> {
        let shape = self.nodes[input].value.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "unfold expects a rank 2 matrix, got {shape:?}"
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        if r == 0 || stride == 0 {
            return Err(Error::InvalidArgument("unfold needs r >= 1 and stride >= 1".into()));
        }
        if r > h || r > w {
            return Err(Error::ShapeMismatch(format!(
                "unfold window {r}x{r} exceeds input {h}x{w}"
            )));
        }
        let nh = (h - r) / stride + 1;
        let nw = (w - r) / stride + 1;
        let l = nh * nw;
        let x = self.nodes[input].value.data();
        let mut out = vec![S::zero(); r * r * l];
        for wy in 0..nh {
            for wx in 0..nw {
                let col = wy * nw + wx;
                for dy in 0..r {
                    let row_in = (wy * stride + dy) * w + wx * stride;
                    for dx in 0..r {
                        out[(dy * r + dx) * l + col] = x[row_in + dx];
                    }
                }
            }
        }
        let value = TensorND::new(vec![r * r, l], out)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::Unfold { input, r, stride }, value, rg))
    }

    pub(super) fn unfold_backward(&mut self, input: NodeId, r: usize, stride: usize, gout: &[S]) {
        let shape = self.nodes[input].value.shape();
        let (h, w) = (shape[0], shape[1]);
        let nh = (h - r) / stride + 1;
        let nw = (w - r) / stride + 1;
        let l = nh * nw;
        let mut gx = vec![S::zero(); h * w];
        for wy in 0..nh {
            for wx in 0..nw {
                let col = wy * nw + wx;
                for dy in 0..r {
                    let row_in = (wy * stride + dy) * w + wx * stride;
                    for dx in 0..r {
                        gx[row_in + dx] += gout[(dy * r + dx) * l + col];
                    }
                }
            }
        }
        self.accumulate(input, &gx);
    }

    /// Subtract each row's mean from a [d, L] matrix.
    pub fn center_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.nodes[input].value.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "center_rows expects a rank 2 matrix, got {shape:?}"
            )));
        }
        let (d, l) = (shape[0], shape[1]);
        let x = self.nodes[input].value.data();
        let inv = S::one() / sc::<S>(l as f64);
        let mut out = vec![S::zero(); d * l];
        for i in 0..d {
            let row = &x[i * l..(i + 1) * l];
            let mu = row.iter().copied().sum::<S>() * inv;
            for (o, &v) in out[i * l..(i + 1) * l].iter_mut().zip(row) {
                *o = v - mu;
            }
        }
        let value = TensorND::new(vec![d, l], out)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::CenterRows { input }, value, rg))
    }

    pub(super) fn center_rows_backward(&mut self, input: NodeId, gout: &[S]) {
        let shape = self.nodes[input].value.shape();
        let (d, l) = (shape[0], shape[1]);
        let inv = S::one() / sc::<S>(l as f64);
        let mut gx = vec![S::zero(); d * l];
        for i in 0..d {
            let grow = &gout[i * l..(i + 1) * l];
            let mu = grow.iter().copied().sum::<S>() * inv;
            for (o, &g) in gx[i * l..(i + 1) * l].iter_mut().zip(grow) {
                *o = g - mu;
            }
        }
        self.accumulate(input, &gx);
    }

    /// Matrix product of [m,k] and [k,n].
    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let ls = self.nodes[lhs].value.shape();
        let rs = self.nodes[rhs].value.shape();
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul dimensions {ls:?} x {rs:?} are incompatible"
            )));
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let out = matmul_raw(self.nodes[lhs].value.data(), self.nodes[rhs].value.data(), m, k, n);
        let value = TensorND::new(vec![m, n], out)?;
        let rg = self.requires(&[lhs, rhs]);
        Ok(self.push(Op::MatMul { lhs, rhs }, value, rg))
    }

    pub(super) fn matmul_backward(&mut self, lhs: NodeId, rhs: NodeId, gout: &[S]) {
        let ls = self.nodes[lhs].value.shape();
        let rs = self.nodes[rhs].value.shape();
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        if self.nodes[lhs].requires_grad {
            let bt = transpose_raw(self.nodes[rhs].value.data(), k, n);
            let ga = matmul_raw(gout, &bt, m, n, k);
            self.accumulate(lhs, &ga);
        }
        if self.nodes[rhs].requires_grad {
            let at = transpose_raw(self.nodes[lhs].value.data(), m, k);
            let gb = matmul_raw(&at, gout, k, m, n);
            self.accumulate(rhs, &gb);
        }
    }

    pub fn transpose(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.nodes[input].value.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose expects a rank 2 matrix, got {shape:?}"
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        let out = transpose_raw(self.nodes[input].value.data(), m, n);
        let value = TensorND::new(vec![n, m], out)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::Transpose { input }, value, rg))
    }

    pub(super) fn transpose_backward(&mut self, input: NodeId, gout: &[S]) {
        let shape = self.nodes[input].value.shape();
        let (m, n) = (shape[0], shape[1]);
        let gx = transpose_raw(gout, n, m);
        self.accumulate(input, &gx);
    }

    /// Inverse of a square matrix. Fails on singular input.
    pub fn mat_inverse(&mut self, input: NodeId) -> Result<NodeId> {
        let n = square_dims(self, input, "mat_inverse")?;
        let inv = invert_raw(self.nodes[input].value.data(), n)?;
        let value = TensorND::new(vec![n, n], inv)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::MatInverse { input }, value, rg))
    }

    pub(super) fn mat_inverse_backward(&mut self, input: NodeId, id: NodeId, gout: &[S]) {
        // d tr(G^T A^-1) / dA = -(A^-1)^T G (A^-1)^T
        let n = self.nodes[input].value.shape()[0];
        let inv_t = transpose_raw(self.nodes[id].value.data(), n, n);
        let tmp = matmul_raw(&inv_t, gout, n, n, n);
        let mut gx = matmul_raw(&tmp, &inv_t, n, n, n);
        for v in &mut gx {
            *v = -*v;
        }
        self.accumulate(input, &gx);
    }

    /// Log-determinant of the symmetrized input (A + A^T)/2 via Cholesky.
    /// Fails with [`Error::NotPositiveDefinite`] when a pivot is not positive.
    /// The gradient with respect to the input is the inverse of the
    /// symmetrized matrix.
    pub fn cholesky_logdet(&mut self, input: NodeId) -> Result<NodeId> {
        let n = square_dims(self, input, "cholesky_logdet")?;
        let a = self.nodes[input].value.data();
        let mut sym = vec![S::zero(); n * n];
        let half = sc::<S>(0.5);
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = (a[i * n + j] + a[j * n + i]) * half;
            }
        }

        let mut chol = vec![S::zero(); n * n];
        for j in 0..n {
            let mut d = sym[j * n + j];
            for k in 0..j {
                d -= chol[j * n + k] * chol[j * n + k];
            }
            if d <= S::zero() || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: d.to_f64_c(),
                });
            }
            let dj = d.sqrt();
            chol[j * n + j] = dj;
            for i in j + 1..n {
                let mut s = sym[i * n + j];
                for k in 0..j {
                    s -= chol[i * n + k] * chol[j * n + k];
                }
                chol[i * n + j] = s / dj;
            }
        }

        let mut logdet = S::zero();
        for j in 0..n {
            logdet += chol[j * n + j].ln();
        }
        logdet = logdet + logdet;

        // Forward substitution for L^-1, then S^-1 = L^-T L^-1.
        let mut linv = vec![S::zero(); n * n];
        for col in 0..n {
            linv[col * n + col] = S::one() / chol[col * n + col];
            for i in col + 1..n {
                let mut s = S::zero();
                for k in col..i {
                    s += chol[i * n + k] * linv[k * n + col];
                }
                linv[i * n + col] = -s / chol[i * n + i];
            }
        }
        let linv_t = transpose_raw(&linv, n, n);
        let inverse = matmul_raw(&linv_t, &linv, n, n, n);

        let value = TensorND::scalar(logdet);
        let rg = self.requires(&[input]);
        Ok(self.push(Op::CholeskyLogdet { input, inverse }, value, rg))
    }
}
