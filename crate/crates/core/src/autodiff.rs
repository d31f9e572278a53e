//! Reverse-mode differentiation over a small fixed set of matrix primitives.
//!
//! A [`Tape`] records every value produced during a forward pass. Leaves are
//! either trainable parameters (registered under a name) or constants; only
//! trainable leaves receive an entry in the [`Gradients`] returned by
//! [`Tape::backward`]. Nodes that do not depend on any trainable leaf are never
//! visited during the backward sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    RepeatRows { a: Var, times: usize },
    Gather { table: Var, idx: Vec<usize> },
    Silu(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    ScaleShift { a: Var, mul: f64 },
    ScaleRows { a: Var, coeffs: Vec<f64> },
    TemporalMix { x: Var, mix: Var, frames: usize },
    ConcatCols(Var, Var),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by trainable parameter name.
pub type Gradients = BTreeMap<String, Matrix>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, String)>,
}

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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Register a trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((v, name.into()));
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `x · wᵀ + b` with `x: n×in`, `w: out×in`, `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut y = self.value(x).matmul_t(self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            debug_assert_eq!(bias.cols(), y.cols());
            let bias = bias.data().to_vec();
            for r in 0..y.rows() {
                for (v, bb) in y.row_mut(r).iter_mut().zip(&bias) {
                    *v += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(y, Op::Affine { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Mul(a, b), rg)
    }

    /// Add a `1×cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).data().to_vec();
        let mut y = self.value(a).clone();
        debug_assert_eq!(r.len(), y.cols());
        for i in 0..y.rows() {
            for (v, rr) in y.row_mut(i).iter_mut().zip(&r) {
                *v += rr;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(y, Op::AddRow { a, row }, rg)
    }

    /// Repeat every row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let src = self.value(a);
        let mut data = Vec::with_capacity(src.rows() * times * src.cols());
        for r in 0..src.rows() {
            for _ in 0..times {
                data.extend_from_slice(src.row(r));
            }
        }
        let y = Matrix::from_vec(src.rows() * times, src.cols(), data).expect("sized above");
        let rg = self.rg(a);
        self.push(y, Op::RepeatRows { a, times }, rg)
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes row `i`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let y = Matrix::from_vec(idx.len(), t.cols(), data).expect("sized above");
        let rg = self.rg(table);
        self.push(y, Op::Gather { table, idx }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(y, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(y, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(y, Op::Log(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(y, Op::Square(a), rg)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let y = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(y, Op::Clamp { a, lo, hi }, rg)
    }

    /// `mul · a + add`, elementwise.
    pub fn scale_shift(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let y = self.value(a).map(|x| mul * x + add);
        let rg = self.rg(a);
        self.push(y, Op::ScaleShift { a, mul }, rg)
    }

    /// Multiply row `r` of `a` by `coeffs[r]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: Vec<f64>) -> Var {
        let mut y = self.value(a).clone();
        debug_assert_eq!(coeffs.len(), y.rows());
        for (r, &c) in coeffs.iter().enumerate() {
            for v in y.row_mut(r) {
                *v *= c;
            }
        }
        let rg = self.rg(a);
        self.push(y, Op::ScaleRows { a, coeffs }, rg)
    }

    /// Per-channel mixing across the frames of each clip.
    ///
    /// `x` is `(clips·frames)×channels`, `mix` is `channels×(frames·frames)`;
    /// `y[b,f,k] = Σ_g mix[k,f,g] · x[b,g,k]`.
    pub fn temporal_mix(&mut self, x: Var, mix: Var, frames: usize) -> Var {
        let xv = self.value(x);
        let mv = self.value(mix);
        let (rows, ch) = xv.shape();
        debug_assert_eq!(rows % frames, 0);
        debug_assert_eq!(mv.shape(), (ch, frames * frames));
        let mut y = Matrix::zeros(rows, ch);
        let clips = rows / frames;
        for b in 0..clips {
            for f in 0..frames {
                let yr = (b * frames + f) * ch;
                for g in 0..frames {
                    let xr = (b * frames + g) * ch;
                    let xrow = &xv.data()[xr..xr + ch];
                    let yrow = &mut y.data_mut()[yr..yr + ch];
                    for k in 0..ch {
                        yrow[k] += mv.data()[k * frames * frames + f * frames + g] * xrow[k];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(mix);
        self.push(y, Op::TemporalMix { x, mix, frames }, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        debug_assert_eq!(av.rows(), bv.rows());
        let mut data = Vec::with_capacity(av.rows() * (av.cols() + bv.cols()));
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let y = Matrix::from_vec(av.rows(), av.cols() + bv.cols(), data).expect("sized above");
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::ConcatCols(a, b), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let y = self.value(a).clone().reshaped(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(y, Op::Reshape(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let y = Matrix::scalar(m.sum() / m.data().len() as f64);
        let rg = self.rg(a);
        self.push(y, Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(y, Op::Sum(a), rg)
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    ///
    /// Parameters the loss does not depend on get an all-zero entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Gradients::new();
        for (v, name) in &self.params {
            let g = if v.0 <= loss.0 {
                grads[v.0].take()
            } else {
                None
            };
            let shape = self.value(*v).shape();
            let g = g.unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                if self.rg(*x) {
                    let dx = g.matmul(self.value(*w));
                    accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let dw = g.t_matmul(self.value(*x));
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        accumulate(grads, *b, column_sums(g));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow { a, row } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*row) {
                    accumulate(grads, *row, column_sums(g));
                }
            }
            Op::RepeatRows { a, times } => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    for k in 0..*times {
                        let gr = g.row(r * times + k);
                        for (dv, gv) in d.row_mut(r).iter_mut().zip(gr) {
                            *dv += gv;
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Gather { table, idx } => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *dv += gv;
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                });
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |gv, s| gv * s * (1.0 - s));
                accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv / x);
                accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x);
                accumulate(grads, *a, d);
            }
            Op::Clamp { a, lo, hi } => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x < *lo || x > *hi {
                        0.0
                    } else {
                        gv
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::ScaleShift { a, mul } => {
                accumulate(grads, *a, g.map(|v| v * mul));
            }
            Op::ScaleRows { a, coeffs } => {
                let mut d = g.clone();
                for (r, &c) in coeffs.iter().enumerate() {
                    for v in d.row_mut(r) {
                        *v *= c;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::TemporalMix { x, mix, frames } => {
                let frames = *frames;
                let xv = self.value(*x);
                let mv = self.value(*mix);
                let (rows, ch) = xv.shape();
                let clips = rows / frames;
                let ff = frames * frames;
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(rows, ch);
                    for b in 0..clips {
                        for f in 0..frames {
                            let gr = (b * frames + f) * ch;
                            for gi in 0..frames {
                                let xr = (b * frames + gi) * ch;
                                for k in 0..ch {
                                    dx.data_mut()[xr + k] +=
                                        mv.data()[k * ff + f * frames + gi] * g.data()[gr + k];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.rg(*mix) {
                    let mut dm = Matrix::zeros(ch, ff);
                    for b in 0..clips {
                        for f in 0..frames {
                            let gr = (b * frames + f) * ch;
                            for gi in 0..frames {
                                let xr = (b * frames + gi) * ch;
                                for k in 0..ch {
                                    dm.data_mut()[k * ff + f * frames + gi] +=
                                        g.data()[gr + k] * xv.data()[xr + k];
                                }
                            }
                        }
                    }
                    accumulate(grads, *mix, dm);
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                if self.rg(*a) {
                    let d = Matrix::from_fn(g.rows(), ac, |r, c| g.get(r, c));
                    accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = Matrix::from_fn(g.rows(), bc, |r, c| g.get(r, ac + c));
                    accumulate(grads, *b, d);
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, *a, g.clone().reshaped(r, c).expect("same size"));
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                let s = g.get(0, 0) / src.data().len() as f64;
                accumulate(grads, *a, Matrix::from_fn(src.rows(), src.cols(), |_, _| s));
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                let s = g.get(0, 0);
                accumulate(grads, *a, Matrix::from_fn(src.rows(), src.cols(), |_, _| s));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut s = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (sv, gv) in s.data_mut().iter_mut().zip(g.row(r)) {
            *sv += gv;
        }
    }
    s
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let p = tape.param("p", Matrix::from_fn(2, 3, |r, c| (r + c) as f64));
        let _ = tape.silu(p);
        let c = tape.constant(Matrix::scalar(4.0));
        let loss = tape.scale_shift(c, 2.0, 1.0);
        let g = tape.backward(loss).unwrap();
        assert!(g["p"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let p0 = Matrix::from_fn(3, 2, |r, c| r as f64 * 0.7 - c as f64 * 1.3);
        let mut tape = Tape::new();
        let p = tape.param("p", p0.clone());
        let sq = tape.square(p);
        let s = tape.sum(sq);
        let loss = tape.scale_shift(s, 0.5, 0.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g["p"], p0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param("p", Matrix::zeros(2, 2));
        assert!(matches!(
            tape.backward(p),
            Err(Error::NonScalarLoss { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn constants_get_no_entry() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::scalar(3.0));
        let p = tape.param("p", Matrix::scalar(2.0));
        let y = tape.mul(a, p);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g["p"].get(0, 0), 3.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
