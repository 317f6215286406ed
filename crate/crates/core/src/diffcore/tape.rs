use std::cell::RefCell;
use std::fmt;

use super::memtrack;
use super::tensor::Tensor;
use crate::error::{Error, Phase, Result};

/// What a backward rule sees when the tape is replayed.
pub struct BackwardCtx<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a [f64],
    pub out: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    /// Which inputs need a gradient. Rules may return `None` for the rest.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    leaf: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in creation order, so an operation's inputs always
/// precede it. [`Tape::backward`] walks the nodes once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bytes: RefCell<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op)
            .field("shape", &node.value.shape())
            .finish()
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

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            op: if requires_grad { "param" } else { "constant" },
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            leaf: true,
            grad: None,
        })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let bytes = node.value.numel() * std::mem::size_of::<f64>();
        *self.bytes.borrow_mut() += bytes;
        memtrack::alloc(bytes);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends an operation output. Fails with [`Error::NonFinite`] when the
    /// forward value contains NaN or infinity.
    pub(crate) fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'t>],
        backward: BackwardFn,
    ) -> Result<Var<'t>> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op,
                phase: Phase::Forward,
            });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        Ok(self.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            leaf: false,
            grad: None,
        }))
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        std::ptr::eq(self, other)
    }

    pub(crate) fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar root. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        if !self.same_tape(root.tape) {
            return Err(Error::Usage("root belongs to another tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(rule) = node.backward.as_ref() else {
                // leaf: keep its gradient for the write-back below
                grads[id] = Some(g);
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = rule(&ctx);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                if pg.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: node.op,
                        phase: Phase::Backward,
                    });
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut nodes[id];
            if let (Some(g), true) = (g, node.leaf && node.requires_grad) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        memtrack::free(*self.bytes.borrow());
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_value(self.id, Tensor::numel)
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, |t| t.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    /// Copy of this value with no gradient connection.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}
