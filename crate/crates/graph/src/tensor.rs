use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use crate::op::Op;

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// While alive, new ops record no history and produce constant leaves.
pub struct NoGradGuard {
    _private: (),
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub fn no_grad() -> NoGradGuard {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    NoGradGuard { _private: () }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
}

impl Drop for Node {
    // Long chains (unrolled inner loops, chained frames) would overflow the
    // stack with the default recursive drop.
    fn drop(&mut self) {
        let Some(op) = self.op.take() else { return };
        let mut stack = op.into_parents();
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(op) = node.op.take() {
                    stack.extend(op.into_parents());
                }
            }
        }
    }
}

/// Dense f64 tensor with an optional recorded history.
///
/// Cloning is cheap: data and history are reference counted.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Rc<Vec<f64>>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op: None,
        }))
    }

    /// Constant leaf.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::leaf(shape.to_vec(), Rc::new(data), false)
    }

    /// Leaf that gradients are taken with respect to.
    pub fn variable(shape: &[usize], data: Vec<f64>) -> Self {
        Self::leaf(shape.to_vec(), Rc::new(data), true)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let record = grad_enabled() && op.any_parent_requires_grad();
        let numel: usize = shape.iter().product();
        debug_assert_eq!(numel, data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: Rc::new(data),
            requires_grad: record,
            op: if record { Some(op) } else { None },
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, no history.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Same values as a fresh variable leaf.
    pub fn detach_variable(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// `[C, H, W]` dims of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => panic!("expected a [C, H, W] tensor, got shape {s:?}"),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
