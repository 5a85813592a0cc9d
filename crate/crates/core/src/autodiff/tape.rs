use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Inputs handed to a backward closure.
pub struct BackwardArgs<'a, F> {
    pub inputs: &'a [Rc<Tensor<F>>],
    pub output: &'a Tensor<F>,
    pub grad: &'a Tensor<F>,
}

/// Maps saved values and the upstream gradient to one optional gradient per input.
pub type BackwardFn<F> = Box<dyn Fn(&BackwardArgs<'_, F>) -> Result<Vec<Option<Tensor<F>>>>>;

struct Node<F> {
    op: &'static str,
    value: Rc<Tensor<F>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in creation order, so index order is a topological
/// order and the backward sweep simply walks indices downwards.
pub struct Tape<F: Element> {
    nodes: RefCell<Vec<Node<F>>>,
    elements: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Element> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Element> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            elements: Cell::new(0),
        }
    }

    /// Records a leaf. Leaves with `requires_grad` receive accumulated gradients.
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push_node(Node {
            op: "leaf",
            value: Rc::new(value),
            inputs: vec![],
            backward: None,
            requires_grad,
            grad: None,
        })
    }

    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    fn push_node(&self, node: Node<F>) -> Var<'_, F> {
        self.elements.set(self.elements.get() + node.value.numel());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an op. The closure is dropped when no input needs a gradient.
    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor<F>,
        inputs: &[Var<'_, F>],
        backward: BackwardFn<F>,
    ) -> Var<'_, F> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push_node(Node {
            op,
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            grad: None,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<F>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of scalars produced by all recorded nodes.
    pub fn elements(&self) -> usize {
        self.elements.get()
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss, summing into leaf accumulators.
    ///
    /// Repeated calls accumulate. Every requires-grad leaf reachable from the
    /// loss ends with a populated gradient, zero if nothing flowed into it.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::contract(
                "loss is not connected to any gradient leaf",
            ));
        }
        let n = loss.id + 1;
        let mut reachable = vec![false; n];
        reachable[loss.id] = true;
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..n).rev() {
            if !reachable[id] {
                continue;
            }
            let node = &nodes[id];
            for &i in &node.inputs {
                if nodes[i].requires_grad {
                    reachable[i] = true;
                }
            }
            let Some(g) = grads[id].take() else { continue };
            let Some(bw) = &node.backward else {
                // a leaf: keep for accumulation below
                grads[id] = Some(g);
                continue;
            };
            let inputs: Vec<Rc<Tensor<F>>> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].value.clone())
                .collect();
            let args = BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &g,
            };
            let input_grads = bw(&args)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::contract(format!(
                    "{}: backward returned {} gradients for {} inputs",
                    node.op,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (slot, (&i, ig)) in node.inputs.iter().zip(input_grads).enumerate() {
                let Some(ig) = ig else { continue };
                if !nodes[i].requires_grad {
                    continue;
                }
                if ig.shape() != inputs[slot].shape() {
                    return Err(Error::contract(format!(
                        "{}: gradient for input {slot} has shape {:?}, input has {:?}",
                        node.op,
                        ig.shape(),
                        inputs[slot].shape()
                    )));
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for id in 0..n {
            let node = &mut nodes[id];
            if !reachable[id] || node.backward.is_some() || !node.requires_grad {
                continue;
            }
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl<'t, F: Element> Var<'t, F> {
    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<F>> {
        self.tape.grad(*self)
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub(crate) fn check_tape(&self, other: &Var<'_, F>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }
}
