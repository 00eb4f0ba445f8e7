//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Node ids are
//! assigned in creation order, so replaying the tape backwards is a valid
//! topological order for the chain rule.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gemm, Layout, Tensor};
use crate::error::{contract, FlrError, Result};

/// Additive mask value treated as "−∞" by [`Var::masked_softmax`].
pub const MASKED: f64 = -1e30;

fn is_masked(m: f64) -> bool {
    m <= MASKED * 0.5
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        la: Layout,
        lb: Layout,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        a: usize,
        bias: usize,
    },
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Ln(usize),
    Gelu(usize),
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Minimum(usize, usize),
    Sum(usize),
    Softmax(usize),
    LogSoftmax(usize),
    RmsNorm {
        a: usize,
        gain: usize,
        eps: f64,
    },
    NormalizeRows(usize),
    Rope {
        a: usize,
        positions: Vec<usize>,
        base: f64,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows {
        a: usize,
        idx: Vec<usize>,
    },
    ReplaceRow {
        a: usize,
        row: usize,
        src: usize,
    },
    Pick {
        a: usize,
        idx: Vec<usize>,
    },
    Reshape(usize),
    Transpose(usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    pub fn is_populated(&self, v: Var<'_>) -> bool {
        self.get(v).is_some()
    }

    pub fn populated_count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::scalar(x))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(nodes[i].op, Op::Leaf) || i == loss.id)
                    .map(|g| Tensor::new(nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn rope_rotate(data: &mut [f64], cols: usize, positions: &[usize], base: f64, sign: f64) {
    let half = cols / 2;
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut data[r * cols..(r + 1) * cols];
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / cols as f64);
            let (s, c) = (sign * theta).sin_cos();
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            la,
            lb,
            m,
            k,
            n,
        } => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = acc(nodes, grads, *a) {
                // d op(a) = g · op(b)^T  (m×k)
                let flip_b = match lb {
                    Layout::Normal => Layout::Transposed,
                    Layout::Transposed => Layout::Normal,
                };
                match la {
                    Layout::Normal => gemm(*m, *n, *k, g, Layout::Normal, bv.data(), flip_b, ga, true),
                    // a stored k×m: d a = op(b) · g^T
                    Layout::Transposed => gemm(*k, *n, *m, bv.data(), *lb, g, Layout::Transposed, ga, true),
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                // d op(b) = op(a)^T · g  (k×n)
                let flip_a = match la {
                    Layout::Normal => Layout::Transposed,
                    Layout::Transposed => Layout::Normal,
                };
                match lb {
                    Layout::Normal => gemm(*k, *m, *n, av.data(), flip_a, g, Layout::Normal, gb, true),
                    // b stored n×k: d b = g^T · op(a)
                    Layout::Transposed => gemm(*n, *m, *k, g, Layout::Transposed, av.data(), *la, gb, true),
                }
            }
        }
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(ga) = acc(nodes, grads, id) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv.data()[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av.data()[i];
                }
            }
        }
        Op::AddBias { a, bias } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            let n = out.cols();
            if let Some(gb) = acc(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::Offset(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * out.data()[i];
                }
            }
        }
        Op::Ln(a) => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / av.data()[i];
                }
            }
        }
        Op::Gelu(a) => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(av.data()[i]);
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    let x = av.data()[i];
                    if x > *lo && x < *hi {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av.data()[i] <= bv.data()[i] {
                        ga[i] += g[i];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    if av.data()[i] > bv.data()[i] {
                        gb[i] += g[i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Softmax(a) => {
            let n = out.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, (yr, gr)) in out.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, d)| y * d).sum();
                    for j in 0..n {
                        ga[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let n = out.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, (yr, gr)) in out.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        ga[r * n + j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::RmsNorm { a, gain, eps } => {
            let (av, gv) = (nodes[*a].value.clone(), nodes[*gain].value.clone());
            let n = av.cols();
            let rows = av.len() / n.max(1);
            let mut dgain = vec![0.0; n];
            let mut dx = vec![0.0; av.len()];
            for r in 0..rows {
                let x = &av.data()[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let ms = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
                let rms = (ms + eps).sqrt();
                let mut dot = 0.0;
                for j in 0..n {
                    dgain[j] += gr[j] * x[j] / rms;
                    dot += gr[j] * gv.data()[j] * x[j];
                }
                for j in 0..n {
                    dx[r * n + j] = gr[j] * gv.data()[j] / rms - x[j] * dot / (n as f64 * rms * rms * rms);
                }
            }
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(&dx).for_each(|(x, y)| *x += y);
            }
            if let Some(gg) = acc(nodes, grads, *gain) {
                gg.iter_mut().zip(&dgain).for_each(|(x, y)| *x += y);
            }
        }
        Op::NormalizeRows(a) => {
            let av = nodes[*a].value.clone();
            let n = av.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for r in 0..av.len() / n {
                    let x = &av.data()[r * n..(r + 1) * n];
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[r * n + j] += (gr[j] - y[j] * dot) / norm;
                    }
                }
            }
        }
        Op::Rope { a, positions, base } => {
            let cols = out.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                let mut back = g.to_vec();
                rope_rotate(&mut back, cols, positions, *base, -1.0);
                ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
            }
        }
        Op::SliceCols { a, start } => {
            let src_cols = nodes[*a].value.cols();
            let len = out.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, gr) in g.chunks(len).enumerate() {
                    let dst = &mut ga[r * src_cols + start..r * src_cols + start + len];
                    dst.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                if let Some(gp) = acc(nodes, grads, p) {
                    for (r, gr) in g.chunks(total).enumerate() {
                        let dst = &mut gp[r * c..(r + 1) * c];
                        dst.iter_mut().zip(&gr[offset..offset + c]).for_each(|(x, y)| *x += y);
                    }
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = acc(nodes, grads, p) {
                    gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y);
                }
                offset += len;
            }
        }
        Op::GatherRows { a, idx } => {
            let n = out.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[src * n..(src + 1) * n];
                    dst.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::ReplaceRow { a, row, src } => {
            let n = out.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                    if i / n != *row {
                        *x += y;
                    }
                }
            }
            if let Some(gs) = acc(nodes, grads, *src) {
                gs.iter_mut().zip(&g[row * n..(row + 1) * n]).for_each(|(x, y)| *x += y);
            }
        }
        Op::Pick { a, idx } => {
            let n = nodes[*a].value.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, &c) in idx.iter().enumerate() {
                    ga[r * n + c] += g[r];
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = out.dims2().expect("matrix");
            if let Some(ga) = acc(nodes, grads, *a) {
                // out is r×c, input is c×r
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> FlrError {
    FlrError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn matmul_impl(&self, other: Var<'t>, la: Layout, lb: Layout) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(shape_err("matmul", &av, &bv));
        }
        let (ar, ac) = av.dims2()?;
        let (br, bc) = bv.dims2()?;
        let (m, k) = if la == Layout::Normal { (ar, ac) } else { (ac, ar) };
        let (k2, n) = if lb == Layout::Normal { (br, bc) } else { (bc, br) };
        if k != k2 {
            return Err(shape_err("matmul", &av, &bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), la, bv.data(), lb, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(
            other,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                la,
                lb,
                m,
                k,
                n,
            },
        ))
    }

    /// `self · other` for `m×k` and `k×n` matrices.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, Layout::Normal, Layout::Normal)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, Layout::Normal, Layout::Transposed)
    }

    fn zip_with(&self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        if av.shape() != bv.shape() {
            return Err(shape_err(name, &av, &bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.binary(other, value, op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn minimum(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "minimum", f64::min, Op::Minimum(self.id, other.id))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), bias.value());
        let n = av.cols();
        if bv.len() != n {
            return Err(shape_err("add_bias", &av, &bv));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(x, b)| *x += b);
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.binary(bias, value, Op::AddBias { a: self.id, bias: bias.id }))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| c * x), Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x + c), Op::Offset(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(self.value().map(f64::ln), Op::Ln(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(self.value().map(gelu), Op::Gelu(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x.clamp(lo, hi)), Op::Clamp { a: self.id, lo, hi })
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data()[i * c + j];
            }
        }
        Ok(self.unary(Tensor::new(vec![c, r], data)?, Op::Transpose(self.id)))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let v = self.value();
        let n = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        Ok(self.unary(Tensor::new(v.shape().to_vec(), data)?, Op::Softmax(self.id)))
    }

    /// Row-wise softmax of `self + mask`, where mask entries are `0` or
    /// [`MASKED`]. Masked positions come out as exact zeros; a row with no
    /// unmasked entry is an error, and so is a non-finite unmasked score.
    pub fn masked_softmax(&self, mask: &Tensor) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != mask.shape() {
            return Err(shape_err("masked_softmax", &v, mask));
        }
        let n = v.cols();
        let mut data = v.data().to_vec();
        for (r, (row, mrow)) in data.chunks_mut(n).zip(mask.data().chunks(n)).enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (x, &m) in row.iter_mut().zip(mrow) {
                if !is_masked(m) {
                    if !x.is_finite() {
                        return Err(FlrError::Divergence(format!("non-finite attention score in row {r}")));
                    }
                    *x += m;
                    max = max.max(*x);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(FlrError::FullyMasked { row: r });
            }
            let mut z = 0.0;
            for (x, &m) in row.iter_mut().zip(mrow) {
                *x = if is_masked(m) { 0.0 } else { (*x - max).exp() };
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        Ok(self.unary(Tensor::new(v.shape().to_vec(), data)?, Op::Softmax(self.id)))
    }

    pub fn log_softmax(&self) -> Var<'t> {
        let v = self.value();
        let n = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.unary(value, Op::LogSoftmax(self.id))
    }

    /// Root-mean-square normalization of each row, scaled by `gain`.
    pub fn rms_norm(&self, gain: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (v, gv) = (self.value(), gain.value());
        let n = v.cols();
        if gv.len() != n {
            return Err(shape_err("rms_norm", &v, &gv));
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let rms = (row.iter().map(|x| x * x).sum::<f64>() / n as f64 + eps).sqrt();
            row.iter_mut().zip(gv.data()).for_each(|(x, g)| *x = *x / rms * g);
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.binary(
            gain,
            value,
            Op::RmsNorm {
                a: self.id,
                gain: gain.id,
                eps,
            },
        ))
    }

    /// Scales every row to unit L2 norm. Zero rows are rejected.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let n = v.cols();
        let mut data = v.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(contract(format!("row {r} has zero or non-finite norm")));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(self.unary(Tensor::new(v.shape().to_vec(), data)?, Op::NormalizeRows(self.id)))
    }

    /// Rotary position embedding on an `L×d` matrix, one position per row.
    pub fn rope(&self, positions: &[usize], base: f64) -> Result<Var<'t>> {
        let v = self.value();
        let (rows, cols) = v.dims2()?;
        if cols % 2 != 0 {
            return Err(FlrError::Config(format!("rope needs an even head dim, got {cols}")));
        }
        if positions.len() != rows {
            return Err(contract(format!(
                "rope: {} positions for {} rows",
                positions.len(),
                rows
            )));
        }
        let mut data = v.data().to_vec();
        rope_rotate(&mut data, cols, positions, base, 1.0);
        let op = Op::Rope {
            a: self.id,
            positions: positions.to_vec(),
            base,
        };
        Ok(self.unary(Tensor::new(v.shape().to_vec(), data)?, op))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (rows, cols) = v.dims2()?;
        if start + len > cols {
            return Err(contract(format!("slice_cols {start}+{len} out of {cols}")));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        Ok(self.unary(Tensor::new(vec![rows, len], data)?, Op::SliceCols { a: self.id, start }))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| contract("concat of nothing"))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let rows = values[0].rows();
        let mut total = 0;
        for v in &values {
            if v.rows() != rows || v.rank() != 2 {
                return Err(shape_err("concat_cols", &values[0], v));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let rg = parts.iter().any(Var::requires_grad);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(ids), rg))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| contract("concat of nothing"))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let cols = values[0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for v in &values {
            if v.cols() != cols {
                return Err(shape_err("concat_rows", &values[0], v));
            }
            rows += v.len() / cols.max(1);
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(Var::requires_grad);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(ids), rg))
    }

    /// Selects rows by index (embedding lookup).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (rows, cols) = v.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(contract(format!("row index {i} out of {rows}")));
            }
            data.extend_from_slice(v.row(i));
        }
        let op = Op::GatherRows {
            a: self.id,
            idx: idx.to_vec(),
        };
        Ok(self.unary(Tensor::new(vec![idx.len(), cols], data)?, op))
    }

    pub fn row(&self, i: usize) -> Result<Var<'t>> {
        self.gather_rows(&[i])
    }

    /// Copy of `self` with row `row` replaced by `src` (length `cols`).
    pub fn replace_row(&self, row: usize, src: Var<'t>) -> Result<Var<'t>> {
        let (v, s) = (self.value(), src.value());
        let (rows, cols) = v.dims2()?;
        if s.len() != cols || row >= rows {
            return Err(shape_err("replace_row", &v, &s));
        }
        let mut data = v.data().to_vec();
        data[row * cols..(row + 1) * cols].copy_from_slice(s.data());
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.binary(
            src,
            value,
            Op::ReplaceRow {
                a: self.id,
                row,
                src: src.id,
            },
        ))
    }

    /// `out[i] = self[i, idx[i]]`.
    pub fn pick(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (rows, cols) = v.dims2()?;
        if idx.len() != rows || idx.iter().any(|&c| c >= cols) {
            return Err(contract(format!("pick: bad indices for shape {:?}", v.shape())));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| v.data()[r * cols + c]).collect();
        let op = Op::Pick {
            a: self.id,
            idx: idx.to_vec(),
        };
        Ok(self.unary(Tensor::new(vec![rows], data)?, op))
    }
}
