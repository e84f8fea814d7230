//! Reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node to the tape; nodes only reference earlier
//! nodes, so the tape is always in topological order. `backward` walks it in
//! reverse and accumulates gradients in that fixed order.

use super::{gelu, gelu_grad, gemm, layer_norm_forward, masked_softmax, Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Square(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; nodes the loss never reached get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::matrix(r, c, g.clone()),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), g))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNt(a, b), g))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::shape(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (r, c) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(Error::shape(op, &[r, c], &[rr, rc]));
        }
        Ok((r, c))
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("add_row", a, row)?;
        let b = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|xs| xs.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let g = self.any_grad(&[a, row]);
        Ok(self.push(Tensor::matrix(r, c, data), Op::AddRow(a, row), g))
    }

    /// `a ⊙ row`, broadcasting a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("mul_row", a, row)?;
        let b = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|xs| xs.iter().zip(b).map(|(x, y)| x * y))
            .collect();
        let g = self.any_grad(&[a, row]);
        Ok(self.push(Tensor::matrix(r, c, data), Op::MulRow(a, row), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn add_const(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let g = self.any_grad(&[a]);
        self.push(v, Op::AddConst(a), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn masked_softmax(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let v = masked_softmax(self.value(a), mask)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(v, Op::Softmax(a), g))
    }

    /// Layer norm without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (v, inv) = layer_norm_forward(self.value(a), eps);
        let g = self.any_grad(&[a]);
        self.push(v, Op::LayerNorm(a, inv), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(r, len, data), Op::SliceCols(a, start), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat_cols", &[rows], &[r, c]));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let g = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, len]));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let g = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(len, c, data), Op::SliceRows(a, start), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape("concat_rows", &[cols], &[r, c]));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let g = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), g))
    }

    /// Gathers rows by index. Gradients scatter back to the chosen rows only.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, _) = self.dims(a);
        if indices.is_empty() || indices.iter().any(|&i| i >= r) {
            return Err(Error::contract(format!("select_rows: indices {indices:?} for {r} rows")));
        }
        let v = self.value(a).select_rows(indices);
        let g = self.any_grad(&[a]);
        Ok(self.push(v, Op::SelectRows(a, indices.to_vec()), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let g = self.any_grad(&[a]);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Abs(a), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Square(a), g)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|nd| nd.value.dims2()).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            self.propagate(i, g, lo);
        }
        Ok(Gradients { grads, shapes })
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.numel();
        Some(lo[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = node.value.dims2();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let nn = self.dims(*b).1;
                if let Some(ga) = self.slot(lo, *a) {
                    gemm(m, nn, k, g, false, self.value(*b).data(), true, ga, true);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    gemm(k, m, nn, self.value(*a).data(), true, g, false, gb, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let nn = self.dims(*b).0;
                if let Some(ga) = self.slot(lo, *a) {
                    gemm(m, nn, k, g, false, self.value(*b).data(), false, ga, true);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    gemm(nn, m, k, g, true, self.value(*a).data(), false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(ga) = self.slot(lo, v) {
                        axpy(ga, g, s);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(ga) = self.slot(lo, v) {
                        axpy(ga, g, s);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(lo, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gr) = self.slot(lo, *row) {
                    for chunk in g.chunks(c) {
                        axpy(gr, chunk, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(lo, *a) {
                    for ((d, gv), y) in ga.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *d += gv * y;
                    }
                }
                if let Some(gb) = self.slot(lo, *b) {
                    for ((d, gv), x) in gb.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *d += gv * x;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).data();
                if let Some(ga) = self.slot(lo, *a) {
                    for (dst, gs) in ga.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, gv), y) in dst.iter_mut().zip(gs).zip(rv) {
                            *d += gv * y;
                        }
                    }
                }
                if let Some(gr) = self.slot(lo, *row) {
                    let av = self.value(*a).data();
                    for (gs, xs) in g.chunks(c).zip(av.chunks(c)) {
                        for ((d, gv), x) in gr.iter_mut().zip(gs).zip(xs) {
                            *d += gv * x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(lo, *a) {
                    axpy(ga, g, *s);
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = self.slot(lo, *a) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = self.slot(lo, *a) {
                    for ((d, gv), x) in ga.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *d += gv * gelu_grad(*x);
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.slot(lo, *a) {
                    let y = node.value.data();
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for ((d, p), q) in ga[row * c..(row + 1) * c].iter_mut().zip(ys).zip(gs) {
                            // masked entries have p == 0 and contribute exactly zero
                            *d += p * (q - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(a, inv_std) => {
                if let Some(ga) = self.slot(lo, *a) {
                    let y = node.value.data();
                    let cf = c as f64;
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let sum_g: f64 = gs.iter().sum();
                        let sum_gy: f64 = gs.iter().zip(ys).map(|(p, q)| p * q).sum();
                        let k = inv_std[row] / cf;
                        for ((d, gv), yv) in ga[row * c..(row + 1) * c].iter_mut().zip(gs).zip(ys) {
                            *d += k * (cf * gv - sum_g - yv * sum_gy);
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let src_c = self.dims(*a).1;
                if let Some(ga) = self.slot(lo, *a) {
                    for row in 0..r {
                        axpy(
                            &mut ga[row * src_c + start..row * src_c + start + c],
                            &g[row * c..(row + 1) * c],
                            1.0,
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(gp) = self.slot(lo, p) {
                        for row in 0..r {
                            axpy(
                                &mut gp[row * pc..(row + 1) * pc],
                                &g[row * c + off..row * c + off + pc],
                                1.0,
                            );
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(ga) = self.slot(lo, *a) {
                    axpy(&mut ga[start * c..(start + r) * c], g, 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.slot(lo, p) {
                        axpy(gp, &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::SelectRows(a, idx) => {
                if let Some(ga) = self.slot(lo, *a) {
                    for (k, &src) in idx.iter().enumerate() {
                        axpy(&mut ga[src * c..(src + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(lo, *a) {
                    // node is r x c, source is c x r
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(lo, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                if let Some(ga) = self.slot(lo, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Abs(a) => {
                if let Some(ga) = self.slot(lo, *a) {
                    for ((d, gv), x) in ga.iter_mut().zip(g).zip(self.value(*a).data()) {
                        let sign = if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *d += gv * sign;
                    }
                }
            }
            Op::Square(a) => {
                if let Some(ga) = self.slot(lo, *a) {
                    for ((d, gv), x) in ga.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *d += 2.0 * gv * x;
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, DEFAULT_STEP, DEFAULT_TOL};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, -2.0, 3.0]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_times_x_gives_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]), true);
        let y = tape.scale(x, 0.0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn unreached_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]), true);
        let y = tape.leaf(Tensor::row(vec![3.0]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(!g.reached(y));
        assert_eq!(g.wrt(y).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_of_matmul_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = Tensor::randn(4, 3, 1.0, &mut rng);
        let target = Tensor::randn(2, 3, 1.0, &mut rng);
        let x = Tensor::randn(2, 4, 1.0, &mut rng);
        let mask = Mask::new(2, 3, vec![true, false, true, true, true, true]).unwrap();
        let report = grad_check(
            |tape, x| {
                let w = tape.constant(w.clone());
                let t = tape.constant(target.clone());
                let z = tape.matmul(x, w)?;
                let p = tape.masked_softmax(z, &mask)?;
                let d = tape.mul(p, t)?;
                Ok(tape.sum(d))
            },
            &x,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::randn(3, 5, 1.0, &mut rng), true);
            let b = tape.leaf(Tensor::randn(5, 4, 1.0, &mut rng), true);
            let c = tape.matmul(a, b).unwrap();
            let n = tape.layer_norm(c, 1e-5);
            let g = tape.gelu(n);
            let s = tape.square(g);
            let l = tape.mean(s);
            let grads = tape.backward(l).unwrap();
            (grads.wrt(a), grads.wrt(b))
        };
        assert_eq!(run(), run());
    }
}
