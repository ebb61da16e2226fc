//! Dense f32 tensors (rank 1-4, row-major) with reverse-mode autodiff.
//!
//! Operations live in [`ops`]; they optionally record onto a [`Tape`], and
//! [`Tape::backward`] replays the records in reverse to fill parameter
//! gradients. Reductions accumulate in f64. Every op validates its output
//! for NaN/Inf and fails rather than propagate them.

pub mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: bool,
    /// True when produced by an op (as opposed to a leaf constructor).
    from_op: bool,
    grad: RefCell<Option<Vec<f32>>>,
}

/// Shared handle to a dense tensor. Cloning is O(1).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::invalid(
            "tensor",
            format!("rank must be 1..=4, got shape {shape:?}"),
        ));
    }
    let numel: usize = shape.iter().product();
    if numel != len || numel == 0 {
        return Err(Error::invalid(
            "tensor",
            format!("shape {shape:?} does not match data length {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    /// Leaf tensor that does not participate in gradients.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        validate_shape(shape, data.len())?;
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad: false,
                from_op: false,
                grad: RefCell::new(None),
            }),
        })
    }

    /// Trainable leaf (a parameter): gradients accumulate here on backward.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        validate_shape(shape, data.len())?;
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad: true,
                from_op: false,
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::new(&[1], vec![value]).expect("scalar shape is valid")
    }

    fn from_op_output(op: &'static str, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                from_op: true,
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "item",
                format!("expected a scalar, got shape {:?}", self.shape()),
            ));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the data buffer. Shape must match. Used by checkpoint load
    /// and in-place parameter updates.
    pub fn set_data(&self, data: Vec<f32>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::invalid(
                "set_data",
                format!("length {} does not match shape {:?}", data.len(), self.shape()),
            ));
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

pub(crate) struct OpRecord {
    output: Tensor,
    rule: ops::Rule,
}

/// Wengert tape: ops executed with a tape attached push one record each;
/// `backward` replays them newest-first.
pub struct Tape {
    records: RefCell<Vec<OpRecord>>,
    leaves: RefCell<Vec<Tensor>>,
    leaf_ids: RefCell<HashSet<u64>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            leaves: RefCell::new(Vec::new()),
            leaf_ids: RefCell::new(HashSet::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.borrow().is_empty()
    }

    pub(crate) fn record(&self, output: &Tensor, rule: ops::Rule) {
        for input in rule.inputs() {
            if input.requires_grad() && !input.inner.from_op {
                let mut ids = self.leaf_ids.borrow_mut();
                if ids.insert(input.id()) {
                    self.leaves.borrow_mut().push(input.clone());
                }
            }
        }
        self.records.borrow_mut().push(OpRecord {
            output: output.clone(),
            rule,
        });
    }

    /// Reverse-replay from a scalar loss. Fills `grad` on every
    /// requires_grad leaf seen by this tape; leaves not reachable from the
    /// loss get a zero gradient.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let records = self.records.borrow();
        if !records.iter().any(|r| r.output.id() == loss.id()) {
            return Err(Error::invalid(
                "backward",
                "loss was not produced under this tape",
            ));
        }

        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(loss.id(), vec![1.0]);

        for rec in records.iter().rev() {
            let Some(g) = grads.remove(&rec.output.id()) else {
                continue; // not on the path from the loss
            };
            rec.rule.apply(&rec.output, &g, &mut grads)?;
        }
        drop(records);

        for leaf in self.leaves.borrow().iter() {
            match grads.remove(&leaf.id()) {
                Some(g) => leaf.accumulate_grad(&g),
                None => leaf.accumulate_grad(&vec![0.0; leaf.numel()]),
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub(crate) fn accumulate_into(grads: &mut HashMap<u64, Vec<f32>>, t: &Tensor, g: &[f32]) {
    // Inputs that can't lead to a parameter don't need gradient buffers.
    if !t.requires_grad() {
        return;
    }
    match grads.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (acc, v) in e.get_mut().iter_mut().zip(g) {
                *acc += v;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g.to_vec());
        }
    }
}
