use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::{DiffError, Param, Result, Tensor};

/// Row-major matmul kernels. `nn` is C += A·B, `nt` is C += A·Bᵀ,
/// `tn` is C += Aᵀ·B. All outputs must be pre-zeroed by the caller.
/// Below this work size the packing overhead of the blocked GEMM exceeds
/// the cost of a plain loop.
const GEMM_CUTOFF: usize = 4096;

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if m * k * n >= GEMM_CUTOFF {
        // out += a (row-major [m,k]) * b (row-major [k,n])
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    // a is [m,n], b is [k,n], out is [m,k]: out[i,l] += dot(a_i, b_l)
    if m * n * k >= GEMM_CUTOFF {
        // b viewed transposed: element (p,q) of the [n,k] operand is b[q*n+p].
        unsafe {
            matrixmultiply::dgemm(
                m,
                n,
                k,
                1.0,
                a.as_ptr(),
                n as isize,
                1,
                b.as_ptr(),
                1,
                n as isize,
                1.0,
                out.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (l, o) in orow.iter_mut().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // a is [m,k], g is [m,n], out is [k,n]: out[l,j] += sum_i a[i,l] g[i,j]
    if m * k * n >= GEMM_CUTOFF {
        // a viewed transposed: element (p,q) of the [k,m] operand is a[q*k+p].
        unsafe {
            matrixmultiply::dgemm(
                k,
                m,
                n,
                1.0,
                a.as_ptr(),
                1,
                k as isize,
                g.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (l, &ail) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &gij) in orow.iter_mut().zip(grow) {
                *o += ail * gij;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Shape {
    rows: usize,
    cols: usize,
    rank: u8,
}

impl Shape {
    fn scalar() -> Self {
        Shape {
            rows: 1,
            cols: 1,
            rank: 0,
        }
    }
    fn vector(n: usize) -> Self {
        Shape {
            rows: 1,
            cols: n,
            rank: 1,
        }
    }
    fn matrix(rows: usize, cols: usize) -> Self {
        Shape {
            rows,
            cols,
            rank: 2,
        }
    }
    fn len(&self) -> usize {
        self.rows * self.cols
    }
    fn to_vec(self) -> Vec<usize> {
        match self.rank {
            0 => vec![],
            1 => vec![self.cols],
            _ => vec![self.rows, self.cols],
        }
    }
    fn of(t: &Tensor) -> Self {
        match t.shape().len() {
            0 => Shape::scalar(),
            1 => Shape::vector(t.shape()[0]),
            2 => Shape::matrix(t.shape()[0], t.shape()[1]),
            _ => panic!("tape supports rank <= 2, got {:?}", t.shape()),
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Matmul(usize, usize),
    MatmulNT(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Elu(usize),
    Abs(usize),
    SoftmaxRows(usize),
    LogSumExpCols(usize),
    MseMean(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumCols(usize),
    PoolRowsGrouped { x: usize, group: usize, mean: bool },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize, end: usize },
    GatherRows { x: usize, idx: Rc<Vec<usize>> },
    SelectColPerRow { x: usize, idx: Rc<Vec<usize>> },
    RowwiseBmm { a: usize, b: usize, inner: usize, out_cols: usize },
    Reshape(usize),
}

struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
    needs_grad: bool,
    /// Set on leaves created by [`Tape::param`]; receives the accumulated
    /// gradient when `backward` reaches the leaf.
    binding: Option<Param>,
}

struct TapeInner {
    nodes: Vec<Node>,
    /// Dedup cache so repeated `param` calls in one graph share a leaf.
    leaf_cache: HashMap<*const RefCell<Tensor>, usize>,
}

/// Define-by-run gradient tape. Cheap to clone (shared handle). A fresh
/// tape is built for every loss evaluation and dropped afterwards;
/// parameter gradients outlive it inside their [`Param`] storage.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                leaf_cache: HashMap::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, shape: Shape, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
            binding: None,
        });
        Var {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// Leaf with no gradient tracking.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), Shape::of(t), Op::Leaf, false)
    }

    pub fn constant_matrix(&self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(DiffError::LengthMismatch {
                len: data.len(),
                shape: vec![rows, cols],
            });
        }
        Ok(self.push(data, Shape::matrix(rows, cols), Op::Leaf, false))
    }

    pub fn constant_vector(&self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(data, Shape::vector(n), Op::Leaf, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var {
        self.push(vec![v], Shape::scalar(), Op::Leaf, false)
    }

    /// Leaf bound to parameter storage. Gradient flows back into `p` when
    /// the tensor has `requires_grad` set. Repeated calls with the same
    /// parameter return the same node.
    pub fn param(&self, p: &Param) -> Var {
        let key = Rc::as_ptr(p);
        if let Some(&idx) = self.inner.borrow().leaf_cache.get(&key) {
            return Var {
                tape: self.clone(),
                idx,
            };
        }
        let (value, shape, needs) = {
            let t = p.borrow();
            (t.data().to_vec(), Shape::of(&t), t.requires_grad())
        };
        let var = self.push(value, shape, Op::Leaf, needs);
        let mut inner = self.inner.borrow_mut();
        inner.nodes[var.idx].binding = Some(Rc::clone(p));
        inner.leaf_cache.insert(key, var.idx);
        var
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

impl Var {
    pub fn idx(&self) -> usize {
        self.idx
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].shape.to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.inner.borrow().nodes[self.idx].shape.rows
    }

    pub fn cols(&self) -> usize {
        self.tape.inner.borrow().nodes[self.idx].shape.cols
    }

    fn shp(&self) -> Shape {
        self.tape.inner.borrow().nodes[self.idx].shape
    }

    fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].needs_grad
    }

    /// Borrow the forward value.
    pub fn value(&self) -> Ref<'_, [f64]> {
        Ref::map(self.tape.inner.borrow(), |i| {
            i.nodes[self.idx].value.as_slice()
        })
    }

    pub fn value_vec(&self) -> Vec<f64> {
        self.value().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.value_vec()).expect("node invariant")
    }

    fn bin_check(&self, other: &Var, op: &'static str) -> Result<()> {
        if !self.tape.same(&other.tape) {
            return Err(DiffError::TapeMismatch { op });
        }
        Ok(())
    }

    fn unary<F>(&self, op_ctor: F, f: impl Fn(f64) -> f64) -> Var
    where
        F: Fn(usize) -> Op,
    {
        let (value, shape, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.idx];
            (n.value.iter().map(|&x| f(x)).collect(), n.shape, n.needs_grad)
        };
        self.tape.push(value, shape, op_ctor(self.idx), needs)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.bin_check(other, "add")?;
        let (s1, s2) = (self.shp(), other.shp());
        if s1 != s2 {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", s1.to_vec(), s2.to_vec()),
            ));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        };
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self
            .tape
            .push(value, s1, Op::Add(self.idx, other.idx), needs))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.bin_check(other, "sub")?;
        let (s1, s2) = (self.shp(), other.shp());
        if s1 != s2 {
            return Err(shape_err(
                "sub",
                format!("{:?} vs {:?}", s1.to_vec(), s2.to_vec()),
            ));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            a.iter().zip(b).map(|(x, y)| x - y).collect()
        };
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self
            .tape
            .push(value, s1, Op::Sub(self.idx, other.idx), needs))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.bin_check(other, "mul")?;
        let (s1, s2) = (self.shp(), other.shp());
        if s1 != s2 {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", s1.to_vec(), s2.to_vec()),
            ));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            a.iter().zip(b).map(|(x, y)| x * y).collect()
        };
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self
            .tape
            .push(value, s1, Op::Mul(self.idx, other.idx), needs))
    }

    pub fn scale(&self, c: f64) -> Var {
        let (value, shape, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.idx];
            (
                n.value.iter().map(|&x| c * x).collect(),
                n.shape,
                n.needs_grad,
            )
        };
        self.tape.push(value, shape, Op::Scale(self.idx, c), needs)
    }

    /// `[m,n] + [n]` bias broadcast across rows.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        self.bin_check(bias, "add_row")?;
        let (s, sb) = (self.shp(), bias.shp());
        if sb.rank != 1 || sb.cols != s.cols {
            return Err(shape_err(
                "add_row",
                format!("matrix {:?} + bias {:?}", s.to_vec(), sb.to_vec()),
            ));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[bias.idx].value;
            let mut out = a.clone();
            for row in out.chunks_exact_mut(s.cols) {
                for (o, &bj) in row.iter_mut().zip(b.iter()) {
                    *o += bj;
                }
            }
            out
        };
        let needs = self.needs_grad() || bias.needs_grad();
        Ok(self
            .tape
            .push(value, s, Op::AddRow(self.idx, bias.idx), needs))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.bin_check(other, "matmul")?;
        let (sa, sb) = (self.shp(), other.shp());
        if sa.rank != 2 || sb.rank != 2 || sa.cols != sb.rows {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", sa.to_vec(), sb.to_vec()),
            ));
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            let mut out = vec![0.0; m * n];
            matmul_nn(a, b, m, k, n, &mut out);
            out
        };
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::matrix(m, n),
            Op::Matmul(self.idx, other.idx),
            needs,
        ))
    }

    /// `self * other^T`; `self` is `[m,k]`, `other` is `[n,k]`, result `[m,n]`.
    pub fn matmul_nt(&self, other: &Var) -> Result<Var> {
        self.bin_check(other, "matmul_nt")?;
        let (sa, sb) = (self.shp(), other.shp());
        if sa.rank != 2 || sb.rank != 2 || sa.cols != sb.cols {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} x {:?}^T", sa.to_vec(), sb.to_vec()),
            ));
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.rows);
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            let mut out = vec![0.0; m * n];
            matmul_nt(a, b, m, k, n, &mut out);
            out
        };
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::matrix(m, n),
            Op::MatmulNT(self.idx, other.idx),
            needs,
        ))
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&self) -> Var {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn elu(&self) -> Var {
        self.unary(Op::Elu, |x| if x > 0.0 { x } else { x.exp() - 1.0 })
    }

    pub fn abs(&self) -> Var {
        self.unary(Op::Abs, f64::abs)
    }

    /// Row-wise softmax of a matrix, numerically stabilized by the row max.
    pub fn softmax_rows(&self) -> Result<Var> {
        let s = self.shp();
        if s.rank != 2 {
            return Err(shape_err(
                "softmax_rows",
                format!("expected matrix, got {:?}", s.to_vec()),
            ));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let mut out = vec![0.0; x.len()];
            for (orow, xrow) in out.chunks_exact_mut(s.cols).zip(x.chunks_exact(s.cols)) {
                let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &xi) in orow.iter_mut().zip(xrow) {
                    *o = (xi - mx).exp();
                    z += *o;
                }
                for o in orow.iter_mut() {
                    *o /= z;
                }
            }
            out
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(value, s, Op::SoftmaxRows(self.idx), needs))
    }

    /// Per-row `ln(sum_j exp(x_ij))`, shape `[m,1]`.
    pub fn logsumexp_cols(&self) -> Result<Var> {
        let s = self.shp();
        if s.rank != 2 {
            return Err(shape_err(
                "logsumexp_cols",
                format!("expected matrix, got {:?}", s.to_vec()),
            ));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            x.chunks_exact(s.cols)
                .map(|row| {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln()
                })
                .collect()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::matrix(s.rows, 1),
            Op::LogSumExpCols(self.idx),
            needs,
        ))
    }

    /// Mean squared error over all elements: `mean((a - b)^2)`.
    pub fn mse(&self, target: &Var) -> Result<Var> {
        self.bin_check(target, "mse")?;
        let (s1, s2) = (self.shp(), target.shp());
        if s1.len() != s2.len() {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", s1.to_vec(), s2.to_vec()),
            ));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[target.idx].value;
            let n = a.len().max(1) as f64;
            let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            vec![sum / n]
        };
        let needs = self.needs_grad() || target.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::scalar(),
            Op::MseMean(self.idx, target.idx),
            needs,
        ))
    }

    pub fn sum_all(&self) -> Var {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.idx];
            (vec![n.value.iter().sum()], n.needs_grad)
        };
        self.tape
            .push(value, Shape::scalar(), Op::SumAll(self.idx), needs)
    }

    pub fn mean_all(&self) -> Var {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.idx];
            let len = n.value.len().max(1) as f64;
            (vec![n.value.iter().sum::<f64>() / len], n.needs_grad)
        };
        self.tape
            .push(value, Shape::scalar(), Op::MeanAll(self.idx), needs)
    }

    /// Row sums of a matrix: `[m,n] -> [m,1]`.
    pub fn sum_cols(&self) -> Result<Var> {
        let s = self.shp();
        if s.rank != 2 {
            return Err(shape_err(
                "sum_cols",
                format!("expected matrix, got {:?}", s.to_vec()),
            ));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            x.chunks_exact(s.cols).map(|r| r.iter().sum()).collect()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::matrix(s.rows, 1),
            Op::SumCols(self.idx),
            needs,
        ))
    }

    /// Pools consecutive groups of `group` rows: `[g*group, n] -> [g, n]`.
    /// `mean` selects mean-pooling, otherwise sum-pooling.
    pub fn pool_rows_grouped(&self, group: usize, mean: bool) -> Result<Var> {
        let s = self.shp();
        if s.rank != 2 || group == 0 || s.rows % group != 0 {
            return Err(shape_err(
                "pool_rows_grouped",
                format!("rows {} not divisible by group {}", s.rows, group),
            ));
        }
        let g = s.rows / group;
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let mut out = vec![0.0; g * s.cols];
            for e in 0..g {
                let orow = &mut out[e * s.cols..(e + 1) * s.cols];
                for r in 0..group {
                    let xrow = &x[(e * group + r) * s.cols..(e * group + r + 1) * s.cols];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += xv;
                    }
                }
                if mean {
                    for o in orow.iter_mut() {
                        *o /= group as f64;
                    }
                }
            }
            out
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::matrix(g, s.cols),
            Op::PoolRowsGrouped {
                x: self.idx,
                group,
                mean,
            },
            needs,
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var> {
        let s = self.shp();
        if s.rank != 2 || start > end || end > s.rows {
            return Err(shape_err(
                "slice_rows",
                format!("[{start}..{end}) of {} rows", s.rows),
            ));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].value[start * s.cols..end * s.cols].to_vec()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::matrix(end - start, s.cols),
            Op::SliceRows { x: self.idx, start },
            needs,
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        let s = self.shp();
        if s.rank != 2 || start > end || end > s.cols {
            return Err(shape_err(
                "slice_cols",
                format!("[{start}..{end}) of {} cols", s.cols),
            ));
        }
        let width = end - start;
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let mut out = Vec::with_capacity(s.rows * width);
            for row in x.chunks_exact(s.cols) {
                out.extend_from_slice(&row[start..end]);
            }
            out
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::matrix(s.rows, width),
            Op::SliceCols {
                x: self.idx,
                start,
                end,
            },
            needs,
        ))
    }

    /// Row gather: `out[r] = x[idx[r]]`. Repeated indices are allowed;
    /// backward scatter-adds, which makes this double as embedding lookup.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let s = self.shp();
        if s.rank != 2 {
            return Err(shape_err(
                "gather_rows",
                format!("expected matrix, got {:?}", s.to_vec()),
            ));
        }
        for &i in idx {
            if i >= s.rows {
                return Err(DiffError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    bound: s.rows,
                });
            }
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let mut out = Vec::with_capacity(idx.len() * s.cols);
            for &i in idx {
                out.extend_from_slice(&x[i * s.cols..(i + 1) * s.cols]);
            }
            out
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::matrix(idx.len(), s.cols),
            Op::GatherRows {
                x: self.idx,
                idx: Rc::new(idx.to_vec()),
            },
            needs,
        ))
    }

    /// Per-row column selection: `out[i,0] = x[i, idx[i]]`.
    pub fn select_col_per_row(&self, idx: &[usize]) -> Result<Var> {
        let s = self.shp();
        if s.rank != 2 || idx.len() != s.rows {
            return Err(shape_err(
                "select_col_per_row",
                format!("{} indices for {} rows", idx.len(), s.rows),
            ));
        }
        for &j in idx {
            if j >= s.cols {
                return Err(DiffError::IndexOutOfBounds {
                    op: "select_col_per_row",
                    index: j,
                    bound: s.cols,
                });
            }
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            idx.iter()
                .enumerate()
                .map(|(i, &j)| x[i * s.cols + j])
                .collect()
        };
        let needs = self.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::matrix(s.rows, 1),
            Op::SelectColPerRow {
                x: self.idx,
                idx: Rc::new(idx.to_vec()),
            },
            needs,
        ))
    }

    /// Per-row vector-matrix product: `a` is `[r, k]`, `b` packs one `k x m`
    /// matrix per row as `[r, k*m]`; output is `[r, m]` with
    /// `out[e,j] = sum_i a[e,i] * b[e, i*m + j]`.
    pub fn rowwise_bmm(&self, b: &Var, out_cols: usize) -> Result<Var> {
        self.bin_check(b, "rowwise_bmm")?;
        let (sa, sb) = (self.shp(), b.shp());
        let inner = sa.cols;
        if sa.rank != 2
            || sb.rank != 2
            || sa.rows != sb.rows
            || sb.cols != inner * out_cols
        {
            return Err(shape_err(
                "rowwise_bmm",
                format!(
                    "a {:?}, b {:?}, out_cols {}",
                    sa.to_vec(),
                    sb.to_vec(),
                    out_cols
                ),
            ));
        }
        let value = {
            let t = self.tape.inner.borrow();
            let av = &t.nodes[self.idx].value;
            let bv = &t.nodes[b.idx].value;
            let mut out = vec![0.0; sa.rows * out_cols];
            for e in 0..sa.rows {
                let arow = &av[e * inner..(e + 1) * inner];
                let brow = &bv[e * inner * out_cols..(e + 1) * inner * out_cols];
                let orow = &mut out[e * out_cols..(e + 1) * out_cols];
                for (i, &ai) in arow.iter().enumerate() {
                    let bslice = &brow[i * out_cols..(i + 1) * out_cols];
                    for (o, &bj) in orow.iter_mut().zip(bslice) {
                        *o += ai * bj;
                    }
                }
            }
            out
        };
        let needs = self.needs_grad() || b.needs_grad();
        Ok(self.tape.push(
            value,
            Shape::matrix(sa.rows, out_cols),
            Op::RowwiseBmm {
                a: self.idx,
                b: b.idx,
                inner,
                out_cols,
            },
            needs,
        ))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shp();
        if rows * cols != s.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> [{rows},{cols}]", s.to_vec()),
            ));
        }
        let value = self.tape.inner.borrow().nodes[self.idx].value.clone();
        let needs = self.needs_grad();
        Ok(self
            .tape
            .push(value, Shape::matrix(rows, cols), Op::Reshape(self.idx), needs))
    }

    /// Value copy with the gradient edge severed.
    pub fn detach(&self) -> Var {
        let (value, shape) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.idx];
            (n.value.clone(), n.shape)
        };
        self.tape.push(value, shape, Op::Leaf, false)
    }

    /// Runs reverse-mode accumulation from this scalar node. Gradients land
    /// in the bound parameter tensors (`Tensor::grad`), adding to whatever
    /// is already there.
    pub fn backward(&self) -> Result<()> {
        let inner = self.tape.inner.borrow_mut();
        let root = self.idx;
        {
            let n = &inner.nodes[root];
            if n.shape.len() != 1 {
                return Err(DiffError::NonScalarRoot {
                    shape: n.shape.to_vec(),
                });
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !inner.nodes[idx].needs_grad {
                continue;
            }
            if let Some(p) = &inner.nodes[idx].binding {
                p.borrow_mut().accumulate_grad(&g);
            }
            backprop_node(&inner.nodes, idx, &g, &mut grads);
        }
        Ok(())
    }
}

/// Adds `scale * src` into the gradient slot of node `parent`.
fn ensure_grad<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    parent: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[parent].needs_grad {
        return None;
    }
    Some(
        grads[parent]
            .get_or_insert_with(|| vec![0.0; nodes[parent].value.len()]),
    )
}

fn backprop_node(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            if let Some(gb) = ensure_grad(grads, nodes, *b) {
                for (o, &gi) in gb.iter_mut().zip(g) {
                    *o += gi;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            if let Some(gb) = ensure_grad(grads, nodes, *b) {
                for (o, &gi) in gb.iter_mut().zip(g) {
                    *o -= gi;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for ((o, &gi), &bx) in ga.iter_mut().zip(g).zip(bv) {
                    *o += gi * bx;
                }
            }
            if let Some(gb) = ensure_grad(grads, nodes, *b) {
                for ((o, &gi), &ax) in gb.iter_mut().zip(g).zip(av) {
                    *o += gi * ax;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            let cols = nodes[*b].value.len();
            if let Some(gb) = ensure_grad(grads, nodes, *b) {
                for row in g.chunks_exact(cols) {
                    for (o, &gi) in gb.iter_mut().zip(row) {
                        *o += gi;
                    }
                }
            }
        }
        Op::Matmul(a, b) => {
            let (sa, sb) = (nodes[*a].shape, nodes[*b].shape);
            let (m, k, n) = (sa.rows, sa.cols, sb.cols);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                matmul_nt(g, bv, m, n, k, ga);
            }
            if let Some(gb) = ensure_grad(grads, nodes, *b) {
                matmul_tn(av, g, m, k, n, gb);
            }
        }
        Op::MatmulNT(a, b) => {
            // c = a * b^T with a [m,k], b [n,k]: da += g * b, db += g^T * a.
            let (sa, sb) = (nodes[*a].shape, nodes[*b].shape);
            let (m, k, n) = (sa.rows, sa.cols, sb.rows);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                matmul_nn(g, bv, m, n, k, ga);
            }
            if let Some(gb) = ensure_grad(grads, nodes, *b) {
                matmul_tn(g, av, m, n, k, gb);
            }
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value;
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                    if x > 0.0 {
                        *o += gi;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let yv = &node.value;
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(yv) {
                    *o += gi * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            let yv = &node.value;
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(yv) {
                    *o += gi * (1.0 - y * y);
                }
            }
        }
        Op::Elu(a) => {
            let (av, yv) = (&nodes[*a].value, &node.value);
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for (((o, &gi), &x), &y) in ga.iter_mut().zip(g).zip(av).zip(yv) {
                    *o += gi * if x > 0.0 { 1.0 } else { y + 1.0 };
                }
            }
        }
        Op::Abs(a) => {
            let av = &nodes[*a].value;
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                    *o += gi * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let yv = &node.value;
            let cols = node.shape.cols;
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for ((orow, grow), yrow) in ga
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(yv.chunks_exact(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                    for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yi * (gi - dot);
                    }
                }
            }
        }
        Op::LogSumExpCols(a) => {
            let xv = &nodes[*a].value;
            let yv = &node.value;
            let cols = nodes[*a].shape.cols;
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for (r, (orow, xrow)) in ga
                    .chunks_exact_mut(cols)
                    .zip(xv.chunks_exact(cols))
                    .enumerate()
                {
                    let (gi, yi) = (g[r], yv[r]);
                    for (o, &x) in orow.iter_mut().zip(xrow) {
                        *o += gi * (x - yi).exp();
                    }
                }
            }
        }
        Op::MseMean(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let n = av.len().max(1) as f64;
            let c = 2.0 * g[0] / n;
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                    *o += c * (x - y);
                }
            }
            if let Some(gb) = ensure_grad(grads, nodes, *b) {
                for ((o, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                    *o -= c * (x - y);
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
        }
        Op::MeanAll(a) => {
            let n = nodes[*a].value.len().max(1) as f64;
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                let c = g[0] / n;
                for o in ga.iter_mut() {
                    *o += c;
                }
            }
        }
        Op::SumCols(a) => {
            let cols = nodes[*a].shape.cols;
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for (r, orow) in ga.chunks_exact_mut(cols).enumerate() {
                    for o in orow.iter_mut() {
                        *o += g[r];
                    }
                }
            }
        }
        Op::PoolRowsGrouped { x, group, mean } => {
            let cols = nodes[*x].shape.cols;
            let scale = if *mean { 1.0 / *group as f64 } else { 1.0 };
            if let Some(ga) = ensure_grad(grads, nodes, *x) {
                for (r, orow) in ga.chunks_exact_mut(cols).enumerate() {
                    let e = r / group;
                    let grow = &g[e * cols..(e + 1) * cols];
                    for (o, &gi) in orow.iter_mut().zip(grow) {
                        *o += scale * gi;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = ensure_grad(grads, nodes, p) {
                    for (o, &gi) in gp.iter_mut().zip(&g[offset..offset + len]) {
                        *o += gi;
                    }
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = node.shape.rows;
            let total = node.shape.cols;
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].shape.cols;
                if let Some(gp) = ensure_grad(grads, nodes, p) {
                    for r in 0..rows {
                        let grow = &g[r * total + offset..r * total + offset + w];
                        for (o, &gi) in gp[r * w..(r + 1) * w].iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::SliceRows { x, start } => {
            let cols = nodes[*x].shape.cols;
            if let Some(gx) = ensure_grad(grads, nodes, *x) {
                for (o, &gi) in gx[start * cols..start * cols + g.len()]
                    .iter_mut()
                    .zip(g)
                {
                    *o += gi;
                }
            }
        }
        Op::SliceCols { x, start, end } => {
            let cols = nodes[*x].shape.cols;
            let w = end - start;
            if let Some(gx) = ensure_grad(grads, nodes, *x) {
                for (r, grow) in g.chunks_exact(w).enumerate() {
                    let orow = &mut gx[r * cols + start..r * cols + end];
                    for (o, &gi) in orow.iter_mut().zip(grow) {
                        *o += gi;
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let cols = nodes[*x].shape.cols;
            if let Some(gx) = ensure_grad(grads, nodes, *x) {
                for (r, &i) in idx.iter().enumerate() {
                    let grow = &g[r * cols..(r + 1) * cols];
                    for (o, &gi) in gx[i * cols..(i + 1) * cols].iter_mut().zip(grow) {
                        *o += gi;
                    }
                }
            }
        }
        Op::SelectColPerRow { x, idx } => {
            let cols = nodes[*x].shape.cols;
            if let Some(gx) = ensure_grad(grads, nodes, *x) {
                for (r, &j) in idx.iter().enumerate() {
                    gx[r * cols + j] += g[r];
                }
            }
        }
        Op::RowwiseBmm {
            a,
            b,
            inner,
            out_cols,
        } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let rows = node.shape.rows;
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for e in 0..rows {
                    let grow = &g[e * out_cols..(e + 1) * out_cols];
                    let brow = &bv[e * inner * out_cols..(e + 1) * inner * out_cols];
                    let orow = &mut ga[e * inner..(e + 1) * inner];
                    for (i, o) in orow.iter_mut().enumerate() {
                        let bslice = &brow[i * out_cols..(i + 1) * out_cols];
                        let mut acc = 0.0;
                        for (&gi, &bj) in grow.iter().zip(bslice) {
                            acc += gi * bj;
                        }
                        *o += acc;
                    }
                }
            }
            if let Some(gb) = ensure_grad(grads, nodes, *b) {
                for e in 0..rows {
                    let grow = &g[e * out_cols..(e + 1) * out_cols];
                    let arow = &av[e * inner..(e + 1) * inner];
                    let orow = &mut gb[e * inner * out_cols..(e + 1) * inner * out_cols];
                    for (i, &ai) in arow.iter().enumerate() {
                        let oslice = &mut orow[i * out_cols..(i + 1) * out_cols];
                        for (o, &gi) in oslice.iter_mut().zip(grow) {
                            *o += ai * gi;
                        }
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = ensure_grad(grads, nodes, *a) {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi;
                }
            }
        }
    }
}

/// Stacks vars vertically. All parts must share a column count.
pub fn concat_rows(parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or_else(|| DiffError::ShapeMismatch {
        op: "concat_rows",
        detail: "empty part list".into(),
    })?;
    let cols = first.cols();
    let mut rows = 0;
    let mut needs = false;
    for p in parts {
        first.bin_check(p, "concat_rows")?;
        let s = p.shp();
        if s.rank != 2 || s.cols != cols {
            return Err(shape_err(
                "concat_rows",
                format!("expected [_, {cols}], got {:?}", s.to_vec()),
            ));
        }
        rows += s.rows;
        needs |= p.needs_grad();
    }
    let value = {
        let inner = first.tape.inner.borrow();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&inner.nodes[p.idx].value);
        }
        out
    };
    let idxs = parts.iter().map(|p| p.idx).collect();
    Ok(first
        .tape
        .push(value, Shape::matrix(rows, cols), Op::ConcatRows(idxs), needs))
}

/// Stacks vars horizontally. All parts must share a row count.
pub fn concat_cols(parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or_else(|| DiffError::ShapeMismatch {
        op: "concat_cols",
        detail: "empty part list".into(),
    })?;
    let rows = first.rows();
    let mut cols = 0;
    let mut needs = false;
    for p in parts {
        first.bin_check(p, "concat_cols")?;
        let s = p.shp();
        if s.rank != 2 || s.rows != rows {
            return Err(shape_err(
                "concat_cols",
                format!("expected [{rows}, _], got {:?}", s.to_vec()),
            ));
        }
        cols += s.cols;
        needs |= p.needs_grad();
    }
    let value = {
        let inner = first.tape.inner.borrow();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let w = inner.nodes[p.idx].shape.cols;
                let v = &inner.nodes[p.idx].value[r * w..(r + 1) * w];
                out.extend_from_slice(v);
            }
        }
        out
    };
    let idxs = parts.iter().map(|p| p.idx).collect();
    Ok(first
        .tape
        .push(value, Shape::matrix(rows, cols), Op::ConcatCols(idxs), needs))
}
