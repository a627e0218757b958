//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a reference-counted node. Operations on tensors that
//! require gradients record a backward closure together with their parents;
//! [`Tensor::backward`] walks the recorded graph in reverse creation order
//! and accumulates gradients (`+=`) into every leaf created with
//! `requires_grad`. Graphs are single-threaded by construction (`Rc`).
//!
//! Inside [`no_grad`] no backward records are allocated at all. Independently
//! of the grad mode, [`record_ops`] captures the kind of every op executed,
//! which is how tests assert that a forward path contains (or avoids) a given
//! operation.

mod gemm;
pub mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

pub use ops::{attention_probs, Adjacency, AttentionLayout};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Concat,
    SliceRows,
    SliceCols,
    GatherRows,
    Transpose,
    Reshape,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    Relu,
    Dropout,
    Sum,
    Mean,
    NllRows,
    Cosine,
    NormalizeRows,
    Mse,
    Attention,
    /// Sparse adjacency times dense matrix: the only adjacency-dependent op.
    CsrMatMul,
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Record {
    kind: OpKind,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    record: Option<Record>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static RECORDS: Cell<u64> = const { Cell::new(0) };
    static TRACE: RefCell<Option<Vec<OpKind>>> = const { RefCell::new(None) };
    static ZERO_NORM_ROWS: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// Number of backward records allocated on this thread so far.
pub fn backward_records_created() -> u64 {
    RECORDS.with(Cell::get)
}

/// Runs `f` and returns the kinds of all ops it executed, in order.
pub fn record_ops<R>(f: impl FnOnce() -> R) -> (R, Vec<OpKind>) {
    let prev = TRACE.with(|t| t.borrow_mut().replace(Vec::new()));
    let out = f();
    let ops = TRACE.with(|t| {
        let mut slot = t.borrow_mut();
        let ops = slot.take().unwrap_or_default();
        // nested recordings also report to the enclosing one
        *slot = prev.map(|mut outer| {
            outer.extend_from_slice(&ops);
            outer
        });
        ops
    });
    (out, ops)
}

/// Rows seen by cosine similarity with a zero norm (similarity defined as 0).
pub fn zero_norm_rows_seen() -> u64 {
    ZERO_NORM_ROWS.with(Cell::get)
}

pub(crate) fn note_zero_norm_row() {
    ZERO_NORM_ROWS.with(|c| c.set(c.get() + 1));
}

fn trace(kind: OpKind) {
    TRACE.with(|t| {
        if let Some(v) = t.borrow_mut().as_mut() {
            v.push(kind);
        }
    });
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(numel(&shape), data.len(), "data length does not match shape {shape:?}");
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            record: None,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "{} values cannot fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf.
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(Tensor::leaf(t.0.shape.clone(), t.0.data.take(), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor::leaf(Vec::new(), vec![x], false)
    }

    /// Result of an op. A backward record is attached only when grad mode is
    /// on and some parent requires gradients.
    pub(crate) fn from_op(
        kind: OpKind,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        trace(kind);
        debug_assert_eq!(numel(&shape), data.len());
        let needs = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let record = needs.then(|| {
            RECORDS.with(|c| c.set(c.get() + 1));
            Record {
                kind,
                parents: parents.iter().map(|&p| p.clone()).collect(),
                backward: Box::new(backward),
            }
        });
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: needs,
            record,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn rows(&self) -> usize {
        self.0.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.0.shape.get(1).copied().unwrap_or(1)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.record.is_none()
    }

    pub fn op_kind(&self) -> Option<OpKind> {
        self.0.record.as_ref().map(|r| r.kind)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values, for optimizers and finite differences.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() needs a single-element tensor");
        self.0.data.borrow()[0]
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        let c = self.cols();
        self.0.data.borrow()[r * c..(r + 1) * c].to_vec()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Copy of the values cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|x| x.is_finite())
    }

    /// Reverse-mode pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        // Collect the reachable graph; creation ids give a topological order.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            if let Some(rec) = &t.0.record {
                for p in &rec.parents {
                    if p.requires_grad() && !seen.contains(&p.0.id) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut grads: std::collections::HashMap<u64, Vec<f64>> = std::collections::HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for t in nodes {
            let Some(g) = grads.remove(&t.0.id) else {
                continue;
            };
            match &t.0.record {
                Some(rec) => {
                    let parent_grads = (rec.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), rec.parents.len());
                    for (p, pg) in rec.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{:?} grad size", rec.kind);
                        match grads.get_mut(&p.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.0.id, pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_kind())
            .finish()
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Parameter {
            name: name.into(),
            tensor: Tensor::parameter(shape, data)?,
        })
    }
}
