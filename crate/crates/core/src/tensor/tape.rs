use std::cell::{Cell, RefCell};

use super::array::{Array, Scalar};
use super::params::{ParamId, ParamStore};
use super::var::{backpropagate, Var};
use crate::error::{Error, Result};

/// Scope of one forward/backward pass.
///
/// A recording tape hands out parameter leaves that require gradients; a
/// `no_grad` tape hands out plain constants, so nothing is retained beyond the
/// values still referenced by the caller.
pub struct Tape<S: Scalar = f32> {
    recording: bool,
    params: RefCell<Vec<(ParamId, Var<S>)>>,
    done: Cell<bool>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            recording: true,
            params: RefCell::new(Vec::new()),
            done: Cell::new(false),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn constant(&self, value: Array<S>) -> Var<S> {
        Var::leaf(value, false)
    }

    /// Leaf that receives a gradient when the tape records.
    pub fn leaf(&self, value: Array<S>) -> Var<S> {
        Var::leaf(value, self.recording)
    }

    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var<S> {
        let v = Var::leaf(store.value(id).clone(), self.recording);
        if self.recording {
            self.params.borrow_mut().push((id, v.clone()));
        }
        v
    }

    /// Computes `d loss / d leaf` for every gradient-carrying leaf reachable from `loss`.
    pub fn backward(&self, loss: &Var<S>) -> Result<()> {
        if self.done.get() {
            return Err(Error::BackwardTwice);
        }
        backpropagate(loss)?;
        self.done.set(true);
        Ok(())
    }

    /// Clears the backward flag and the parameter registry.
    pub fn reset(&self) {
        self.done.set(false);
        self.params.borrow_mut().clear();
    }

    /// Adds the gradients of all parameter leaves into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for (id, v) in self.params.borrow().iter() {
            if let Some(g) = v.grad() {
                store.grad_mut(*id).add_assign(&g);
            }
        }
    }
}
