//! The recording tape, variables, and the reverse sweep.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::element::Element;
use crate::tensor::Tensor;

/// What a backward closure sees: the upstream gradient, the op output, and the op inputs.
pub struct BackwardCtx<'a, E> {
    pub grad: &'a Tensor<E>,
    pub output: &'a Tensor<E>,
    pub inputs: &'a [Rc<Tensor<E>>],
}

/// Returns one optional gradient per input, in input order.
pub type BackwardFn<E> = Box<dyn Fn(&BackwardCtx<'_, E>) -> Vec<Option<Tensor<E>>>>;

struct Node<E> {
    value: Rc<Tensor<E>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<E>>,
    requires_grad: bool,
}

/// Append-only record of every operation evaluated in one forward pass.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
    macs: Cell<u64>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), macs: Cell::new(0) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<E>) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf_rc(Rc::new(value), true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf_rc(Rc::new(value), false)
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<E>>, requires_grad: bool) -> Var<'_, E> {
        self.push(Node { value, parents: Vec::new(), backward: None, requires_grad })
    }

    /// Records an op with a hand-written backward.
    ///
    /// The closure is dropped immediately when no input requires a gradient.
    pub fn custom_op<'t>(
        &'t self,
        inputs: &[Var<'t, E>],
        value: Tensor<E>,
        backward: impl Fn(&BackwardCtx<'_, E>) -> Vec<Option<Tensor<E>>> + 'static,
    ) -> Var<'t, E> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let parents = inputs.iter().map(|v| v.id).collect();
        let backward: Option<BackwardFn<E>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node { value: Rc::new(value), parents, backward, requires_grad })
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<E>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Adds to the multiply-accumulate counter used for FLOP accounting.
    pub fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// Reverse sweep from a scalar `loss`, seeding `d loss / d loss = 1`.
    pub fn backward(&self, loss: Var<'_, E>) -> Gradients<E> {
        let seed = Tensor::ones(loss.value().shape().to_vec());
        self.backward_with(loss, seed)
    }

    /// Reverse sweep with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: Var<'_, E>, seed: Tensor<E>) -> Gradients<E> {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.shape(), nodes[root.id].value.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<E>>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(seed);
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    leaves.insert(id, g);
                }
                Some(bw) => {
                    let inputs: Vec<Rc<Tensor<E>>> =
                        node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
                    let ctx = BackwardCtx { grad: &g, output: &node.value, inputs: &inputs };
                    let parent_grads = bw(&ctx);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Gradients of the leaves reached by a reverse sweep.
pub struct Gradients<E> {
    grads: HashMap<usize, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: Var<'_, E>) -> Option<&Tensor<E>> {
        self.grads.get(&var.id)
    }

    /// Gradient of `var`, or zeros when it did not influence the root.
    pub fn get_or_zeros(&self, var: Var<'_, E>) -> Tensor<E> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, E: Element> {
    pub(crate) tape: &'t Tape<E>,
    pub(crate) id: usize,
}

impl<E: Element> Clone for Var<'_, E> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<E: Element> Copy for Var<'_, E> {}

impl<E: Element> fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, E: Element> Var<'t, E> {
    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<E>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.value().dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, E> {
        self.tape.leaf_rc(self.value(), false)
    }

    /// Records a unary op whose backward only needs the upstream gradient.
    pub(crate) fn unary(
        self,
        value: Tensor<E>,
        backward: impl Fn(&BackwardCtx<'_, E>) -> Tensor<E> + 'static,
    ) -> Var<'t, E> {
        self.tape.custom_op(&[self], value, move |ctx| vec![Some(backward(ctx))])
    }
}
