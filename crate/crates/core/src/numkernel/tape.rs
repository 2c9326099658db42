//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every op applied to [`Var`] handles during a forward
//! pass. [`Tape::backward`] walks the record in reverse once, producing
//! [`Gradients`] for every node. Parameters enter the tape through
//! [`Tape::param`], which snapshots the stored value and memoizes the leaf so
//! a weight shared across slices or timesteps accumulates into one gradient.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded op: given the input values, the
/// op output and the cotangent of the output, return one optional cotangent
/// per input (same order as recorded).
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    name: &'static str,
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    nonfinite: RefCell<Option<String>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    fn push(&self, node: Node) -> Var<'_> {
        if cfg!(debug_assertions) && !node.value.is_finite() {
            let mut slot = self.nonfinite.borrow_mut();
            if slot.is_none() {
                *slot = Some(format!("op '{}' produced a non-finite value", node.name));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Constant leaf; no gradient is requested for it but one is still
    /// computed and available through [`Gradients::wrt`].
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            name: "leaf",
            value: Rc::new(value),
            inputs: vec![],
            backward: None,
            param: None,
        })
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.push(Node {
            name: "param",
            value: Rc::new(store.get(id).value.clone()),
            inputs: vec![],
            backward: None,
            param: Some(id),
        });
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Record an op. `backward` receives the input values in the order of
    /// `inputs`.
    pub fn op<'t>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var<'t> {
        self.push(Node {
            name,
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: Some(backward),
            param: None,
        })
    }

    pub fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// First non-finite op output recorded (debug builds only).
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite.borrow().as_ref() {
            Some(msg) => Err(Error::Numeric(msg.clone())),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar loss. A tape supports one backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::Contract("tape already used for a backward pass".into()));
        }
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &*nodes[i].value).collect();
                let upstream = bw(&inputs, &node.value, &g);
                debug_assert_eq!(upstream.len(), node.inputs.len(), "op {}", node.name);
                for (&input, ug) in node.inputs.iter().zip(upstream) {
                    let Some(ug) = ug else { continue };
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(&ug).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(ug),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let params = nodes[..=loss.id]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    /// Name of the op that produced this node.
    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].name
    }

    /// Number of inputs of the op that produced this node.
    pub fn arity(&self) -> usize {
        self.tape.nodes.borrow()[self.id].inputs.len()
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[v.id].clone(), g.clone()))
    }

    /// Gradient for `v`, zeros when no path reached it.
    pub fn wrt_or_zero(&self, v: Var<'_>) -> Tensor {
        self.wrt(v).unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.params
            .iter()
            .map(|&(p, node)| (p, self.grads[node].as_deref()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named learnable tensors of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name '{name}'")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add the parameter gradients of a backward pass into `grad`, scaled.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.param_grads() {
            let Some(g) = g else { continue };
            let p = &mut self.params[id.0];
            let acc = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            acc.data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += scale * b);
        }
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("param set", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Overwrite values from another store by name; every name must exist
    /// with a matching shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (_, p) in other.iter() {
            let id = self
                .id_of(&p.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter '{}'", p.name)))?;
            self.set(id, p.value.clone())?;
        }
        Ok(())
    }
}

/// Bundles the tape and parameter store a forward pass reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub params: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, params: &'a ParamStore) -> Self {
        Ctx { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var<'a> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'a> {
        self.tape.constant(t)
    }
}
