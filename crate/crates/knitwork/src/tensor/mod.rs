//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! Every network weight, activation and loss in this crate is a [`Tensor`].
//! Tensors form a DAG: each one optionally records the operation and parent
//! tensors that produced it. Calling [`Tensor::backward`] on a scalar walks
//! the DAG in reverse topological order and accumulates gradients into every
//! ancestor with `requires_grad`.
//!
//! Scope is deliberately small: first-order gradients only, broadcasting
//! limited to scalar-with-tensor and equal shapes, CPU only.

mod adam;
mod kernels;

pub use adam::AdamState;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{KnitworkError, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
///
/// Tensors created inside the scope are plain leaves; useful for rendering
/// and for producing detached discriminator inputs without building a tape.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

// ── Graph node ───────────────────────────────────────────────────────────────

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul { a: Tensor, b: Tensor, m: usize, k: usize, n: usize },
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    AddRowBias { x: Tensor, bias: Tensor, rows: usize, cols: usize },
    Linear { x: Tensor, w: Tensor, bias: Tensor, m: usize, k: usize, n: usize },
    Relu(Tensor),
    LeakyRelu(Tensor, f64),
    Sigmoid(Tensor),
    Square(Tensor),
    Abs(Tensor),
    Ln(Tensor),
    Clamp { t: Tensor, lo: f64, hi: f64 },
    SumAll(Tensor),
    MeanAll(Tensor),
    SumAxis { t: Tensor, axis: usize },
    MeanAxis { t: Tensor, axis: usize },
    SliceCols { t: Tensor, rows: usize, cols: usize, start: usize, len: usize },
    SliceRows { t: Tensor, cols: usize, start: usize, len: usize },
    GridRowShift { t: Tensor, h: usize, w: usize, cols: usize, dy: i64, dx: i64 },
    Reshape(Tensor),
    DepthwiseConv2d { img: Tensor, kernel: Tensor, h: usize, w: usize, c: usize, kh: usize, kw: usize },
    Subsample2d { img: Tensor, h: usize, w: usize, c: usize, factor: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Dense n-dimensional f64 tensor, row-major, with optional gradient tracking.
///
/// `Tensor` is a cheap handle (`Rc`) onto a graph node; cloning it clones the
/// handle, not the data. The graph is single-owner: one training loop per
/// tape, no cross-thread sharing.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<RefCell<Node>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.node.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..4]={:?})",
            n.shape,
            n.requires_grad,
            &n.data[..n.data.len().min(4)]
        )
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(node: Node) -> Self {
        Tensor { node: Rc::new(RefCell::new(node)) }
    }

    fn result(shape: Vec<usize>, data: Vec<f64>, op: Op, parents_require: bool) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        let tracked = grad_enabled() && parents_require;
        Tensor::from_node(Node {
            shape,
            data,
            grad: None,
            requires_grad: tracked,
            // Dropping the op when untracked prunes the graph early.
            op: if tracked { op } else { Op::Leaf },
        })
    }

    // ── Constructors ────────────────────────────────────────────────────────

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(KnitworkError::dimension(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, numel_of(&shape), data.len()),
            ));
        }
        Ok(Tensor::from_node(Node { shape, data, grad: None, requires_grad: false, op: Op::Leaf }))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor::from_node(Node { shape, data: vec![0.0; n], grad: None, requires_grad: false, op: Op::Leaf })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_node(Node { shape: vec![1], data: vec![v], grad: None, requires_grad: false, op: Op::Leaf })
    }

    /// Leaf tensor that participates in gradient accumulation (a trainable
    /// parameter or an input whose gradient is wanted).
    pub fn parameter(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Tensor::from_vec(shape, data)?;
        t.node.borrow_mut().requires_grad = true;
        Ok(t)
    }

    // ── Accessors ───────────────────────────────────────────────────────────

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.node.borrow().data.clone()
    }

    /// Applies `f` to the raw data without copying.
    pub fn with_data<T>(&self, f: impl FnOnce(&[f64]) -> T) -> T {
        f(&self.node.borrow().data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.node.borrow();
        assert_eq!(n.data.len(), 1, "item() on tensor of {} elements", n.data.len());
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// Moves the gradient out, leaving it cleared.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.node.borrow_mut().grad.take()
    }

    /// Overwrites the stored values in place. Shape must match. Used by the
    /// optimizer and by checkpoint restore.
    pub fn set_data(&self, data: &[f64]) {
        let mut n = self.node.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        n.data.copy_from_slice(data);
    }

    /// Mutates the stored values in place without copying out.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.node.borrow_mut().data)
    }

    /// New leaf with the same values and no gradient history.
    pub fn detach(&self) -> Tensor {
        let n = self.node.borrow();
        Tensor::from_node(Node {
            shape: n.shape.clone(),
            data: n.data.clone(),
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        })
    }

    // ── Binary elementwise (equal shapes or scalar broadcast) ───────────────

    fn binary(
        &self,
        other: &Tensor,
        opname: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let (a, b) = (self.node.borrow(), other.node.borrow());
        let out: Vec<f64>;
        let shape: Vec<usize>;
        if a.shape == b.shape {
            out = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
            shape = a.shape.clone();
        } else if b.data.len() == 1 {
            let s = b.data[0];
            out = a.data.iter().map(|&x| f(x, s)).collect();
            shape = a.shape.clone();
        } else if a.data.len() == 1 {
            let s = a.data[0];
            out = b.data.iter().map(|&y| f(s, y)).collect();
            shape = b.shape.clone();
        } else {
            return Err(KnitworkError::dimension(
                opname,
                format!("incompatible shapes {:?} vs {:?}", a.shape, b.shape),
            ));
        }
        let require = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::result(shape, out, mk(self.clone(), other.clone()), require))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let n = self.node.borrow();
        let out = n.data.iter().map(|&x| x + c).collect();
        let (shape, req) = (n.shape.clone(), n.requires_grad);
        drop(n);
        Tensor::result(shape, out, Op::AddScalar(self.clone()), req)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let n = self.node.borrow();
        let out = n.data.iter().map(|&x| x * c).collect();
        let (shape, req) = (n.shape.clone(), n.requires_grad);
        drop(n);
        Tensor::result(shape, out, Op::MulScalar(self.clone(), c), req)
    }

    /// `[rows × cols] + [cols]`, the bias term of a fully-connected layer.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (x, b) = (self.node.borrow(), bias.node.borrow());
        if x.shape.len() != 2 || b.shape != [x.shape[1]] {
            return Err(KnitworkError::dimension(
                "add_row_bias",
                format!("x {:?} vs bias {:?}", x.shape, b.shape),
            ));
        }
        let (rows, cols) = (x.shape[0], x.shape[1]);
        let mut out = x.data.clone();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        let require = x.requires_grad || b.requires_grad;
        drop(x);
        drop(b);
        Ok(Tensor::result(
            vec![rows, cols],
            out,
            Op::AddRowBias { x: self.clone(), bias: bias.clone(), rows, cols },
            require,
        ))
    }

    /// Fused fully-connected layer: `self[m×k] · w[k×n] + bias[n]`.
    pub fn linear(&self, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (x, ww, bb) = (self.node.borrow(), w.node.borrow(), bias.node.borrow());
        if x.shape.len() != 2 || ww.shape.len() != 2 || x.shape[1] != ww.shape[0] || bb.shape != [ww.shape[1]] {
            return Err(KnitworkError::dimension(
                "linear",
                format!("x {:?} · w {:?} + b {:?}", x.shape, ww.shape, bb.shape),
            ));
        }
        let (m, k, n) = (x.shape[0], x.shape[1], ww.shape[1]);
        let out = kernels::matmul_nn_bias(&x.data, &ww.data, &bb.data, m, k, n);
        let require = x.requires_grad || ww.requires_grad || bb.requires_grad;
        drop(x);
        drop(ww);
        drop(bb);
        Ok(Tensor::result(
            vec![m, n],
            out,
            Op::Linear { x: self.clone(), w: w.clone(), bias: bias.clone(), m, k, n },
            require,
        ))
    }

    // ── Unary elementwise ───────────────────────────────────────────────────

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let n = self.node.borrow();
        let out = n.data.iter().map(|&x| f(x)).collect();
        let (shape, req) = (n.shape.clone(), n.requires_grad);
        drop(n);
        Tensor::result(shape, out, op, req)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), Op::Relu(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(|x| if x >= 0.0 { x } else { slope * x }, Op::LeakyRelu(self.clone(), slope))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, Op::Square(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, Op::Abs(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, Op::Ln(self.clone()))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|x| x.clamp(lo, hi), Op::Clamp { t: self.clone(), lo, hi })
    }

    // ── Matmul ──────────────────────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.node.borrow(), other.node.borrow());
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(KnitworkError::dimension(
                "matmul",
                format!("{:?} · {:?}", a.shape, b.shape),
            ));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let out = kernels::matmul_nn(&a.data, &b.data, m, k, n);
        let require = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::result(
            vec![m, n],
            out,
            Op::Matmul { a: self.clone(), b: other.clone(), m, k, n },
            require,
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let n = self.node.borrow();
        let s: f64 = n.data.iter().sum();
        let req = n.requires_grad;
        drop(n);
        Tensor::result(vec![1], vec![s], Op::SumAll(self.clone()), req)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.node.borrow();
        let count = n.data.len().max(1) as f64;
        let s: f64 = n.data.iter().sum::<f64>() / count;
        let req = n.requires_grad;
        drop(n);
        Tensor::result(vec![1], vec![s], Op::MeanAll(self.clone()), req)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        let n = self.node.borrow();
        if axis >= n.shape.len() {
            return Err(KnitworkError::dimension(
                "reduce",
                format!("axis {axis} out of range for shape {:?}", n.shape),
            ));
        }
        let (outer, axis_len, inner) = split_axis(&n.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let base = (o * axis_len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += n.data[base + i];
                }
            }
        }
        if mean {
            let d = axis_len.max(1) as f64;
            out.iter_mut().for_each(|v| *v /= d);
        }
        let mut shape = n.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let req = n.requires_grad;
        drop(n);
        let op = if mean { Op::MeanAxis { t: self.clone(), axis } } else { Op::SumAxis { t: self.clone(), axis } };
        Ok(Tensor::result(shape, out, op, req))
    }

    // ── Structural ops ──────────────────────────────────────────────────────

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let n = self.node.borrow();
        if n.shape.len() != 2 || start + len > n.shape[1] {
            return Err(KnitworkError::dimension(
                "slice_cols",
                format!("cols [{start}, {}) of shape {:?}", start + len, n.shape),
            ));
        }
        let (rows, cols) = (n.shape[0], n.shape[1]);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&n.data[r * cols + start..r * cols + start + len]);
        }
        let req = n.requires_grad;
        drop(n);
        Ok(Tensor::result(
            vec![rows, len],
            out,
            Op::SliceCols { t: self.clone(), rows, cols, start, len },
            req,
        ))
    }

    /// Rows `[start, start+len)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let n = self.node.borrow();
        if n.shape.len() != 2 || start + len > n.shape[0] {
            return Err(KnitworkError::dimension(
                "slice_rows",
                format!("rows [{start}, {}) of shape {:?}", start + len, n.shape),
            ));
        }
        let cols = n.shape[1];
        let out = n.data[start * cols..(start + len) * cols].to_vec();
        let req = n.requires_grad;
        drop(n);
        Ok(Tensor::result(
            vec![len, cols],
            out,
            Op::SliceRows { t: self.clone(), cols, start, len },
            req,
        ))
    }

    /// Rows of a `[h·w × cols]` tensor reinterpreted as an `h×w` grid and
    /// shifted by `(dy, dx)`: output row for pixel `(y, x)` is the input row
    /// at `(y+dy, x+dx)`, or zeros when that falls outside the grid.
    pub fn grid_row_shift(&self, h: usize, w: usize, dy: i64, dx: i64) -> Result<Tensor> {
        let n = self.node.borrow();
        if n.shape.len() != 2 || n.shape[0] != h * w {
            return Err(KnitworkError::dimension(
                "grid_row_shift",
                format!("shape {:?} vs grid {h}×{w}", n.shape),
            ));
        }
        let cols = n.shape[1];
        let mut out = vec![0.0; h * w * cols];
        for y in 0..h as i64 {
            let sy = y + dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w as i64 {
                let sx = x + dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                let src = (sy as usize * w + sx as usize) * cols;
                let dst = (y as usize * w + x as usize) * cols;
                out[dst..dst + cols].copy_from_slice(&n.data[src..src + cols]);
            }
        }
        let req = n.requires_grad;
        drop(n);
        Ok(Tensor::result(
            vec![h * w, cols],
            out,
            Op::GridRowShift { t: self.clone(), h, w, cols, dy, dx },
            req,
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n = self.node.borrow();
        if numel_of(&shape) != n.data.len() {
            return Err(KnitworkError::dimension(
                "reshape",
                format!("{:?} -> {:?}", n.shape, shape),
            ));
        }
        let out = n.data.clone();
        let req = n.requires_grad;
        drop(n);
        Ok(Tensor::result(shape, out, Op::Reshape(self.clone()), req))
    }

    // ── Image-domain ops (blind-SR downsampling path) ───────────────────────

    /// Depthwise 2-D correlation of an `[h, w, c]` image with a single
    /// `[kh, kw]` kernel shared across channels. Symmetric (edge-inclusive
    /// mirror) padding keeps the output the same size. Differentiable in both
    /// the image and the kernel.
    pub fn conv2d_depthwise(&self, kernel: &Tensor) -> Result<Tensor> {
        let (img, ker) = (self.node.borrow(), kernel.node.borrow());
        if img.shape.len() != 3 {
            return Err(KnitworkError::dimension("conv2d", format!("image shape {:?}", img.shape)));
        }
        if ker.shape.len() != 2 || ker.shape[0] % 2 == 0 || ker.shape[1] % 2 == 0 {
            return Err(KnitworkError::dimension(
                "conv2d",
                format!("kernel shape {:?} (odd dims required)", ker.shape),
            ));
        }
        let (h, w, c) = (img.shape[0], img.shape[1], img.shape[2]);
        let (kh, kw) = (ker.shape[0], ker.shape[1]);
        let out = kernels::conv2d_depthwise(&img.data, h, w, c, &ker.data, kh, kw);
        let require = img.requires_grad || ker.requires_grad;
        drop(img);
        drop(ker);
        Ok(Tensor::result(
            vec![h, w, c],
            out,
            Op::DepthwiseConv2d { img: self.clone(), kernel: kernel.clone(), h, w, c, kh, kw },
            require,
        ))
    }

    /// Keeps every `factor`-th pixel of an `[h, w, c]` image, starting at
    /// `(0, 0)`.
    pub fn subsample2d(&self, factor: usize) -> Result<Tensor> {
        let n = self.node.borrow();
        if n.shape.len() != 3 {
            return Err(KnitworkError::dimension("subsample2d", format!("image shape {:?}", n.shape)));
        }
        let (h, w, c) = (n.shape[0], n.shape[1], n.shape[2]);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(KnitworkError::contract(format!(
                "subsample2d: {h}×{w} not divisible by factor {factor}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for x in 0..ow {
                let src = ((y * factor) * w + x * factor) * c;
                let dst = (y * ow + x) * c;
                out[dst..dst + c].copy_from_slice(&n.data[src..src + c]);
            }
        }
        let req = n.requires_grad;
        drop(n);
        Ok(Tensor::result(
            vec![oh, ow, c],
            out,
            Op::Subsample2d { img: self.clone(), h, w, c, factor },
            req,
        ))
    }

    // ── Backward pass ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Accumulates (sums) gradients
    /// into every ancestor with `requires_grad`; call [`Tensor::zero_grad`]
    /// (or an optimizer step) to clear them between iterations.
    pub fn backward(&self) -> Result<()> {
        {
            let n = self.node.borrow();
            if n.data.len() != 1 {
                return Err(KnitworkError::contract(format!(
                    "backward() requires a scalar loss, got shape {:?}",
                    n.shape
                )));
            }
            if !n.requires_grad {
                return Err(KnitworkError::contract(
                    "backward() on a tensor with no recorded computation".to_string(),
                ));
            }
        }

        let order = self.topo_order();
        accumulate(self, &[1.0]);

        for t in order.iter().rev() {
            // The node's own gradient is complete here (all consumers sit
            // later in the topological order), so it can be borrowed while
            // parents accumulate — parents are distinct nodes.
            let n = t.node.borrow();
            if !n.requires_grad || matches!(n.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = n.grad.as_deref() else { continue };
            backprop_one(t, &n.op, grad);
        }
        Ok(())
    }

    /// Post-order DFS over the recorded graph (iterative; graphs can be wide).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const RefCell<Node>> = HashSet::new();
        // Stack entries: (tensor, children_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.node);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            if !t.node.borrow().requires_grad {
                continue;
            }
            stack.push((t.clone(), true));
            let n = t.node.borrow();
            for p in op_parents(&n.op) {
                if !visited.contains(&Rc::as_ptr(&p.node)) {
                    stack.push((p, false));
                }
            }
        }
        order
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn op_parents(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul { a, b, .. } => vec![a.clone(), b.clone()],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a.clone(), b.clone()],
        Op::AddRowBias { x, bias, .. } => vec![x.clone(), bias.clone()],
        Op::Linear { x, w, bias, .. } => vec![x.clone(), w.clone(), bias.clone()],
        Op::DepthwiseConv2d { img, kernel, .. } => vec![img.clone(), kernel.clone()],
        Op::AddScalar(t)
        | Op::MulScalar(t, _)
        | Op::Relu(t)
        | Op::LeakyRelu(t, _)
        | Op::Sigmoid(t)
        | Op::Square(t)
        | Op::Abs(t)
        | Op::Ln(t)
        | Op::Clamp { t, .. }
        | Op::SumAll(t)
        | Op::MeanAll(t)
        | Op::SumAxis { t, .. }
        | Op::MeanAxis { t, .. }
        | Op::SliceCols { t, .. }
        | Op::SliceRows { t, .. }
        | Op::GridRowShift { t, .. }
        | Op::Reshape(t) => vec![t.clone()],
        Op::Subsample2d { img, .. } => vec![img.clone()],
    }
}

fn accumulate(t: &Tensor, g: &[f64]) {
    let mut n = t.node.borrow_mut();
    if !n.requires_grad {
        return;
    }
    match &mut n.grad {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
        None => n.grad = Some(g.to_vec()),
    }
}

/// Like [`accumulate`], but takes ownership so a fresh gradient needs no copy.
fn accumulate_vec(t: &Tensor, g: Vec<f64>) {
    let mut n = t.node.borrow_mut();
    if !n.requires_grad {
        return;
    }
    match &mut n.grad {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
        None => n.grad = Some(g),
    }
}

/// Adds `g` (or `g` summed to one element when the parent is a broadcast
/// scalar) into the parent's gradient.
fn accumulate_bcast(t: &Tensor, g: Vec<f64>) {
    let len = t.node.borrow().data.len();
    if len == g.len() {
        accumulate_vec(t, g);
    } else {
        debug_assert_eq!(len, 1);
        accumulate(t, &[g.iter().sum()]);
    }
}

fn backprop_one(out: &Tensor, op: &Op, g: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b, m, k, n } => {
            if a.requires_grad() {
                let bb = b.node.borrow();
                let da = kernels::matmul_nt(g, &bb.data, *m, *n, *k);
                drop(bb);
                accumulate_vec(a, da);
            }
            if b.requires_grad() {
                let aa = a.node.borrow();
                let db = kernels::matmul_tn(&aa.data, g, *m, *k, *n);
                drop(aa);
                accumulate_vec(b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate_bcast(a, g.to_vec());
            accumulate_bcast(b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate_bcast(a, g.to_vec());
            accumulate_bcast(b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            // d(a·b)/da = g·b, with a scalar operand reduced by summation.
            let da: Option<Vec<f64>> = if a.requires_grad() {
                let bn = b.node.borrow();
                Some(if bn.data.len() == 1 {
                    g.iter().map(|gv| gv * bn.data[0]).collect()
                } else {
                    g.iter().zip(&bn.data).map(|(gv, bv)| gv * bv).collect()
                })
            } else {
                None
            };
            let db: Option<Vec<f64>> = if b.requires_grad() {
                let an = a.node.borrow();
                Some(if an.data.len() == 1 {
                    g.iter().map(|gv| gv * an.data[0]).collect()
                } else {
                    g.iter().zip(&an.data).map(|(gv, av)| gv * av).collect()
                })
            } else {
                None
            };
            if let Some(da) = da {
                accumulate_bcast(a, da);
            }
            if let Some(db) = db {
                accumulate_bcast(b, db);
            }
        }
        Op::AddScalar(t) => accumulate(t, g),
        Op::MulScalar(t, c) => {
            accumulate_vec(t, g.iter().map(|v| v * c).collect());
        }
        Op::Linear { x, w, bias, m, k, n } => {
            if x.requires_grad() {
                let ww = w.node.borrow();
                let dx = kernels::matmul_nt(g, &ww.data, *m, *n, *k);
                drop(ww);
                accumulate_vec(x, dx);
            }
            if w.requires_grad() {
                let xx = x.node.borrow();
                let dw = kernels::matmul_tn(&xx.data, g, *m, *k, *n);
                drop(xx);
                accumulate_vec(w, dw);
            }
            if bias.requires_grad() {
                let mut db = vec![0.0; *n];
                for r in 0..*m {
                    for (acc, gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *acc += gv;
                    }
                }
                accumulate_vec(bias, db);
            }
        }
        Op::AddRowBias { x, bias, rows, cols } => {
            accumulate(x, g);
            // bias arm below keeps its owned buffer
            if bias.requires_grad() {
                let mut db = vec![0.0; *cols];
                for r in 0..*rows {
                    for (acc, gv) in db.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *acc += gv;
                    }
                }
                accumulate_vec(bias, db);
            }
        }
        Op::Relu(t) => {
            let dt: Vec<f64> = {
                let n = t.node.borrow();
                n.data.iter().zip(g).map(|(&x, gv)| if x > 0.0 { *gv } else { 0.0 }).collect()
            };
            accumulate_vec(t, dt);
        }
        Op::LeakyRelu(t, slope) => {
            let dt: Vec<f64> = {
                let n = t.node.borrow();
                n.data.iter().zip(g).map(|(&x, gv)| if x >= 0.0 { *gv } else { slope * gv }).collect()
            };
            accumulate_vec(t, dt);
        }
        Op::Sigmoid(t) => {
            let dt: Vec<f64> = {
                let o = out.node.borrow();
                o.data.iter().zip(g).map(|(&s, gv)| gv * s * (1.0 - s)).collect()
            };
            accumulate_vec(t, dt);
        }
        Op::Square(t) => {
            let dt: Vec<f64> = {
                let n = t.node.borrow();
                n.data.iter().zip(g).map(|(&x, gv)| 2.0 * x * gv).collect()
            };
            accumulate_vec(t, dt);
        }
        Op::Abs(t) => {
            let dt: Vec<f64> = {
                let n = t.node.borrow();
                n.data.iter().zip(g).map(|(&x, gv)| gv * x.signum()).collect()
            };
            accumulate_vec(t, dt);
        }
        Op::Ln(t) => {
            let dt: Vec<f64> = {
                let n = t.node.borrow();
                n.data.iter().zip(g).map(|(&x, gv)| gv / x).collect()
            };
            accumulate_vec(t, dt);
        }
        Op::Clamp { t, lo, hi } => {
            let dt: Vec<f64> = {
                let n = t.node.borrow();
                n.data
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| if x >= *lo && x <= *hi { *gv } else { 0.0 })
                    .collect()
            };
            accumulate_vec(t, dt);
        }
        Op::SumAll(t) => {
            accumulate_vec(t, vec![g[0]; t.numel()]);
        }
        Op::MeanAll(t) => {
            let count = t.numel().max(1) as f64;
            accumulate_vec(t, vec![g[0] / count; t.numel()]);
        }
        Op::SumAxis { t, axis } | Op::MeanAxis { t, axis } => {
            let shape = t.shape();
            let (outer, axis_len, inner) = split_axis(&shape, *axis);
            let scale = if matches!(op, Op::MeanAxis { .. }) { 1.0 / axis_len.max(1) as f64 } else { 1.0 };
            let mut dt = vec![0.0; outer * axis_len * inner];
            for o in 0..outer {
                for a in 0..axis_len {
                    let base = (o * axis_len + a) * inner;
                    for i in 0..inner {
                        dt[base + i] = g[o * inner + i] * scale;
                    }
                }
            }
            accumulate_vec(t, dt);
        }
        Op::SliceCols { t, rows, cols, start, len } => {
            let mut dt = vec![0.0; rows * cols];
            for r in 0..*rows {
                dt[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            accumulate_vec(t, dt);
        }
        Op::SliceRows { t, cols, start, len } => {
            let mut dt = vec![0.0; t.numel()];
            dt[start * cols..(start + len) * cols].copy_from_slice(g);
            accumulate_vec(t, dt);
        }
        Op::GridRowShift { t, h, w, cols, dy, dx } => {
            let mut dt = vec![0.0; h * w * cols];
            for y in 0..*h as i64 {
                let sy = y + dy;
                if sy < 0 || sy >= *h as i64 {
                    continue;
                }
                for x in 0..*w as i64 {
                    let sx = x + dx;
                    if sx < 0 || sx >= *w as i64 {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * cols;
                    let dst = (y as usize * w + x as usize) * cols;
                    for i in 0..*cols {
                        dt[src + i] += g[dst + i];
                    }
                }
            }
            accumulate_vec(t, dt);
        }
        Op::Reshape(t) => accumulate(t, g),
        Op::DepthwiseConv2d { img, kernel, h, w, c, kh, kw } => {
            if img.requires_grad() {
                let ker = kernel.node.borrow();
                let dimg = kernels::conv2d_depthwise_grad_img(g, *h, *w, *c, &ker.data, *kh, *kw);
                drop(ker);
                accumulate_vec(img, dimg);
            }
            if kernel.requires_grad() {
                let im = img.node.borrow();
                let dker = kernels::conv2d_depthwise_grad_kernel(g, &im.data, *h, *w, *c, *kh, *kw);
                drop(im);
                accumulate_vec(kernel, dker);
            }
        }
        Op::Subsample2d { img, h, w, c, factor } => {
            let (oh, ow) = (h / factor, w / factor);
            let mut dimg = vec![0.0; h * w * c];
            for y in 0..oh {
                for x in 0..ow {
                    let dst = ((y * factor) * w + x * factor) * c;
                    let src = (y * ow + x) * c;
                    dimg[dst..dst + c].copy_from_slice(&g[src..src + c]);
                }
            }
            accumulate_vec(img, dimg);
        }
    }
}
