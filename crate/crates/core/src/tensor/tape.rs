use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    param: Option<Rc<str>>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
}

/// A named, trainable (or frozen) leaf that lives outside any tape.
#[derive(Clone, Debug)]
pub struct Param<T: Real = f32> {
    name: Rc<str>,
    pub value: Rc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: &str, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value: Rc::new(value),
            grad: None,
            requires_grad: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    /// Mutable access to the values; copies if a tape still holds them.
    pub fn data_mut(&mut self) -> &mut [T] {
        Rc::make_mut(&mut self.value).data_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: Rc::new(self.value.cast()),
            grad: self.grad.as_ref().map(|g| g.cast()),
            requires_grad: self.requires_grad,
        }
    }
}

/// Recorded operations of one forward pass. Build a fresh tape per step.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    warnings: RefCell<Vec<String>>,
}

/// Handle to a value on a [`Tape`].
pub struct Var<'t, T: Real = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            warnings: RefCell::new(Vec::new()),
        }
    }

    /// Tape for inference: values only, nothing requires grad.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded op. Parameters are untouched.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.warnings.borrow_mut().clear();
    }

    pub fn warn(&self, msg: impl Into<String>) {
        self.warnings.borrow_mut().push(msg.into());
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.borrow().clone()
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        let id = self.push(Node {
            value,
            requires_grad: false,
            param: None,
            parents: Vec::new(),
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Leaf that requires grad (when the tape records gradients).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push(Node {
            value: Rc::new(value),
            requires_grad: self.grad_enabled,
            param: None,
            parents: Vec::new(),
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Registers a parameter as a leaf. Shares storage with the parameter.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        let id = self.push(Node {
            value: p.value.clone(),
            requires_grad: self.grad_enabled && p.requires_grad,
            param: Some(p.name.clone()),
            parents: Vec::new(),
            backward: None,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an op result. `backward` maps the upstream gradient to one
    /// optional gradient per parent (in `parents` order).
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[usize],
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|&p| self.requires_grad_of(p));
        let id = self.push(Node {
            value: Rc::new(value),
            requires_grad,
            param: None,
            parents: parents.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var { tape: self, id }
    }

    /// Reverse sweep from a scalar loss. Each recorded op is visited once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = bw(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut by_id = HashMap::new();
        let mut by_name: HashMap<Rc<str>, Tensor<T>> = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad || node.backward.is_some() {
                continue;
            }
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
            if let Some(name) = &node.param {
                match by_name.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        by_name.insert(name.clone(), g.clone());
                    }
                }
            }
            by_id.insert(id, g);
        }
        Ok(Gradients { by_id, by_name })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real = f32> {
    by_id: HashMap<usize, Tensor<T>>,
    by_name: HashMap<Rc<str>, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::leaf`] or [`Tape::param`].
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_id.get(&v.id)
    }

    /// Summed gradient of every registration of the named parameter.
    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    /// Adds gradients into the matching parameters' `grad` fields.
    pub fn accumulate<'p>(&self, params: impl IntoIterator<Item = &'p mut Param<T>>) {
        for p in params {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = self.by_name.get(&p.name) else { continue };
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant_rc(self.value())
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}
