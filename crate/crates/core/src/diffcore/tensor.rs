use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use super::{DiffError, Result};

/// Dense row-major f64 tensor.
///
/// Invariants: `data.len() == shape.iter().product()` (an empty shape is a
/// scalar with one element) and, when present, `grad.len() == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(DiffError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform init on `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols of a rank-2 tensor; scalars and vectors are treated as a
    /// single row so the batched ops can consume them uniformly.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Accumulates `g` into the gradient buffer, allocating zeros first if
    /// the buffer is absent. No-op when `requires_grad` is false.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.data.len());
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (b, &x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Shared handle to a parameter tensor. Tapes hold clones of the handle so
/// `backward` can deposit gradients into the original storage.
pub type Param = Rc<RefCell<Tensor>>;

/// Named collection of parameters with deterministic (sorted) iteration
/// order. One group per network so checkpoints and EMA updates can address
/// "the encoder" or "the mixer" as a unit.
#[derive(Debug, Clone, Default)]
pub struct ParamGroup {
    name: String,
    params: BTreeMap<String, Param>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>) -> Self {
        ParamGroup {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Registers a trainable tensor and returns its handle.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Param {
        let name = name.into();
        let p: Param = Rc::new(RefCell::new(tensor.with_requires_grad(true)));
        self.params.insert(name, Rc::clone(&p));
        p
    }

    pub fn get(&self, name: &str) -> Result<Param> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| DiffError::UnknownParam {
                group: self.name.clone(),
                name: name.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&self) {
        for p in self.params.values() {
            p.borrow_mut().zero_grad();
        }
    }

    /// Total number of scalar elements across all parameters.
    pub fn n_elements(&self) -> usize {
        self.params.values().map(|p| p.borrow().len()).sum()
    }

    /// Marks every tensor in the group as frozen (`requires_grad = false`)
    /// and drops any gradient buffers. Used for EMA target copies.
    pub fn freeze(&self) {
        for p in self.params.values() {
            p.borrow_mut().set_requires_grad(false);
        }
    }

    /// Deep copy with fresh storage. Gradients are not copied.
    pub fn deep_clone(&self, name: impl Into<String>) -> Self {
        let mut out = ParamGroup::new(name);
        for (k, v) in &self.params {
            let t = v.borrow();
            let copied = Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .expect("clone preserves invariant")
                .with_requires_grad(t.requires_grad());
            out.params.insert(k.clone(), Rc::new(RefCell::new(copied)));
        }
        out
    }
}
