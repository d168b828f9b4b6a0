use std::collections::BTreeMap;

use super::{Gradients, NumError, Tape, Tensor, Var};

/// Stable handle to a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    tensor: Tensor,
}

/// Owner of every trainable tensor. Retired parameters leave a hole so ids
/// stay stable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Option<Slot>>,
}

/// Tape leaves created for the live parameters of a store.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<ParamId, Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Result<Var, NumError> {
        self.vars.get(&id).copied().ok_or_else(|| NumError::Contract(format!("parameter {id:?} is not bound")))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `tensor` as trainable (a gradient buffer is attached).
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.slots.push(Some(Slot { name: name.into(), tensor: tensor.with_grad() }));
        ParamId(self.slots.len() - 1)
    }

    /// Drops a parameter, returning its final value.
    pub fn retire(&mut self, id: ParamId) -> Result<Tensor, NumError> {
        self.slots
            .get_mut(id.0)
            .and_then(Option::take)
            .map(|s| s.tensor)
            .ok_or_else(|| NumError::Contract(format!("parameter {id:?} is not live")))
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor, NumError> {
        self.slots
            .get(id.0)
            .and_then(Option::as_ref)
            .map(|s| &s.tensor)
            .ok_or_else(|| NumError::Contract(format!("parameter {id:?} is not live")))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor, NumError> {
        self.slots
            .get_mut(id.0)
            .and_then(Option::as_mut)
            .map(|s| &mut s.tensor)
            .ok_or_else(|| NumError::Contract(format!("parameter {id:?} is not live")))
    }

    pub fn name(&self, id: ParamId) -> Option<&str> {
        self.slots.get(id.0).and_then(Option::as_ref).map(|s| s.name.as_str())
    }

    /// Live parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|s| (ParamId(i), s.name.as_str(), &s.tensor)))
    }

    pub fn live_count(&self) -> usize {
        self.iter().count()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Records every live parameter as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bindings, NumError> {
        let mut vars = BTreeMap::new();
        for (id, _, t) in self.iter() {
            vars.insert(id, tape.leaf(t)?);
        }
        Ok(Bindings { vars })
    }

    /// Records every live parameter as an untracked leaf (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bindings, NumError> {
        let mut vars = BTreeMap::new();
        for (id, _, t) in self.iter() {
            vars.insert(id, tape.leaf(&t.detached())?);
        }
        Ok(Bindings { vars })
    }

    /// Adds the tape adjoints of bound parameters into their gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, binds: &Bindings) -> Result<(), NumError> {
        for (&id, &var) in &binds.vars {
            if let Some(g) = grads.get(var) {
                self.get_mut(id)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.iter_mut().flatten() {
            slot.tensor.zero_grad();
        }
    }

    /// All live values concatenated in insertion order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.iter().flat_map(|(_, _, t)| t.values().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.iter().flat_map(|(_, _, t)| t.grad().unwrap_or(&[]).iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<(), NumError> {
        if flat.len() != self.scalar_count() {
            return Err(NumError::Dimension(format!("{} values for {} parameters", flat.len(), self.scalar_count())));
        }
        let mut off = 0;
        for slot in self.slots.iter_mut().flatten() {
            let n = slot.tensor.len();
            slot.tensor.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retire_leaves_ids_stable() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::zeros(vec![2, 2]));
        let b = s.insert("b", Tensor::zeros(vec![1, 3]));
        assert_eq!(s.scalar_count(), 7);
        s.retire(a).unwrap();
        assert!(s.get(a).is_err());
        assert_eq!(s.get(b).unwrap().len(), 3);
        assert_eq!(s.scalar_count(), 3);
        assert!(s.retire(a).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut s = ParamStore::new();
        let id = s.insert("m", Tensor::full(vec![2, 2], 1.5));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let b = s.bind(&mut tape).unwrap();
            let loss = tape.sum(b.var(id).unwrap()).unwrap();
            let g = tape.backward(loss).unwrap();
            s.accumulate(&g, &b).unwrap();
        }
        assert_eq!(s.get(id).unwrap().grad().unwrap(), &[2.0; 4]);
        s.zero_grad();
        assert_eq!(s.get(id).unwrap().grad().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn flat_round_trip() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(vec![2, 1]));
        s.insert("b", Tensor::zeros(vec![1, 1]));
        s.set_flat_values(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.flat_values(), vec![1.0, 2.0, 3.0]);
        assert!(s.set_flat_values(&[1.0]).is_err());
    }
}
