//! Binds a [`ParamStore`] onto a fresh tape for one forward/backward pass.
//!
//! The first request for each parameter creates a leaf (trainable entries
//! become differentiation targets, frozen ones constants); later requests
//! return the same leaf so gradients accumulate across repeated uses.

use std::cell::RefCell;

use indexmap::IndexMap;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Tensor};
use crate::Scalar;

pub struct Session<'a, S: Scalar> {
    tape: Tape<S>,
    store: &'a ParamStore<S>,
    bound: RefCell<IndexMap<String, Tensor<S>>>,
}

impl<'a, S: Scalar> Session<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: RefCell::new(IndexMap::new()),
        }
    }

    pub fn tape(&self) -> &Tape<S> {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    /// The tape leaf for a named parameter, created on first use.
    pub fn param(&self, name: &str) -> Result<Tensor<S>> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self.store.get(name)?;
        let leaf = self.tape.leaf(p.data.clone(), &p.shape, p.trainable)?;
        self.bound
            .borrow_mut()
            .insert(name.to_string(), leaf.clone());
        Ok(leaf)
    }

    /// A no-grad leaf for external data (images, targets, noise).
    pub fn constant(&self, data: Vec<S>, shape: &[usize]) -> Result<Tensor<S>> {
        self.tape.constant(data, shape)
    }

    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound trainable parameter, in binding order.
    /// Parameters that never received a gradient contribution are omitted.
    pub fn gradients(&self) -> Vec<(String, Vec<S>)> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, t)| t.grad().map(|g| (name.clone(), g)))
            .collect()
    }
}
