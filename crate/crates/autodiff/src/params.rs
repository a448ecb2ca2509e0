//! Named parameter storage and the per-forward context that exposes it on a tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::element::Element;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Role of a stored tensor; decides weight decay and whether it is trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Affine scale/shift of a normalization layer.
    Norm,
    /// Learnable scalar gains.
    Scalar,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
            ParamKind::Scalar => "scalar",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "norm" => ParamKind::Norm,
            "scalar" => ParamKind::Scalar,
            "buffer" => ParamKind::Buffer,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<E> {
    pub name: String,
    pub kind: ParamKind,
    value: Rc<Tensor<E>>,
}

impl<E: Element> ParamEntry<E> {
    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, value: Rc::new(value) });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn get_rc(&self, id: ParamId) -> Rc<Tensor<E>> {
        Rc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; copies only if a tape still holds the old value.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<E>) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), value.shape(), "shape change for {}", e.name);
        e.value = Rc::new(value);
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.value.numel()).sum()
    }

    /// Same layout, different element type.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), kind: e.kind, value: Rc::new(e.value.cast()) })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass.
pub struct Ctx<'t, E: Element> {
    pub tape: &'t Tape<E>,
    pub store: &'t ParamStore<E>,
    /// Batch-norm uses batch statistics and records running-stat updates when set.
    pub train: bool,
    /// Parameters become differentiable leaves when set.
    pub grad: bool,
    vars: RefCell<HashMap<usize, Var<'t, E>>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<E>)>>,
}

impl<'t, E: Element> Ctx<'t, E> {
    pub fn new(tape: &'t Tape<E>, store: &'t ParamStore<E>, train: bool, grad: bool) -> Self {
        Self {
            tape,
            store,
            train,
            grad,
            vars: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// The parameter as a tape variable; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var<'t, E> {
        if let Some(v) = self.vars.borrow().get(&id.0) {
            return *v;
        }
        let rg = self.grad && self.store.kind(id).trainable();
        let v = self.tape.leaf_rc(self.store.get_rc(id), rg);
        self.vars.borrow_mut().insert(id.0, v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> Rc<Tensor<E>> {
        self.store.get_rc(id)
    }

    pub fn record_buffer_update(&self, id: ParamId, value: Tensor<E>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<E>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Gradient for every parameter that was touched and is trainable, by id.
    pub fn param_grads(&self, grads: &Gradients<E>) -> Vec<(ParamId, Tensor<E>)> {
        let vars = self.vars.borrow();
        let mut out: Vec<(ParamId, Tensor<E>)> = vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .filter_map(|(&i, v)| grads.get(*v).map(|g| (ParamId(i), g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
