//! Named parameter storage and per-forward binding onto a tape.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    LoraA,
    LoraB,
}

impl ParamKind {
    pub fn is_adapter(self) -> bool {
        matches!(self, ParamKind::LoraA | ParamKind::LoraB)
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Every weight of a model. Slots of removed parameters stay empty so that
/// outstanding ids never alias a different tensor.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    slots: Vec<Option<Param<T>>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> ParamId {
        self.slots.push(Some(Param {
            name: name.into(),
            kind,
            tensor,
        }));
        ParamId(self.slots.len() - 1)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param<T>> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        self.slots[id.0].as_mut().expect("parameter was removed")
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.get(id).tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.get_mut(id).tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| p.as_mut().map(|p| (ParamId(i), p)))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_where(&self, pred: impl Fn(&Param<T>) -> bool) -> usize {
        self.iter().filter(|(_, p)| pred(p)).map(|(_, p)| p.tensor.numel()).sum()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.tensor.requires_grad())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.iter_mut().for_each(|(_, p)| p.tensor.zero_grad());
    }

    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<T>)]) -> Result<()> {
        for (id, g) in grads {
            self.tensor_mut(*id).accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Same parameters in another precision; ids are preserved.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            slots: self
                .slots
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| Param {
                        name: p.name.clone(),
                        kind: p.kind,
                        tensor: p.tensor.cast(),
                    })
                })
                .collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.iter().find(|(_, p)| !p.tensor.is_finite()) {
            Some((_, p)) => Err(Error::Config(format!("parameter {} is not finite", p.name))),
            None => Ok(()),
        }
    }
}

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    params: &'a ParamSet<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(params: &'a ParamSet<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.slots.len()],
        }
    }

    pub fn params(&self) -> &'a ParamSet<T> {
        self.params
    }

    /// Tape handle of a parameter, recorded on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.tensor(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn take_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }
}
