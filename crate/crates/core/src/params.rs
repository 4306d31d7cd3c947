//! Named parameter registry and the per-forward binding of parameters to
//! graph leaves.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};
use crate::zoo::TeState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Buffers (running statistics) and frozen parameters are not trainable.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param { name, tensor, trainable });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Side products of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardEffects<T> {
    /// Running-statistic buffers to overwrite after a train-mode pass.
    pub buffer_updates: Vec<(ParamId, Tensor<T>)>,
    /// Per zoo layer: batch-mean gate value of every source.
    pub gate_means: Vec<(usize, Vec<f64>)>,
}

/// One forward pass: a fresh graph plus lazily bound parameter leaves.
pub struct Forward<'s, T> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<NodeId>>,
    pub mode: Mode,
    /// Use temporal-ensemble gates for every zoo layer (lite inference).
    pub frozen: Option<&'s TeState>,
    /// Apply channel alignment outside the graph, as inference would with
    /// pre-aligned weights. Alignment gets no gradient in this mode.
    pub precomputed_alignment: bool,
    pub effects: ForwardEffects<T>,
}

impl<'s, T: Real> Forward<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            frozen: None,
            precomputed_alignment: false,
            effects: ForwardEffects { buffer_updates: Vec::new(), gate_means: Vec::new() },
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Leaf for a parameter; trainable parameters get gradients in train mode.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let p = &self.store.params[id.0];
        let node = if p.trainable && self.mode == Mode::Train {
            self.graph.param(p.tensor.clone())
        } else {
            self.graph.input(p.tensor.clone())
        };
        self.bound[id.0] = Some(node);
        node
    }

    /// Runs backward from `loss` and returns gradients for every bound
    /// trainable parameter.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = Vec::new();
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(node) = b {
                if self.store.params[i].trainable && self.mode == Mode::Train {
                    out.push((ParamId(i), grads.take(*node)));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::zeros(&[1]), true).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2]), true).is_err());
        assert_eq!(s.find("a"), Some(ParamId(0)));
    }

    #[test]
    fn eval_mode_binds_constants() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::full(&[2], 1.0), true).unwrap();
        let mut f = Forward::new(&s, Mode::Eval);
        let n = f.param(id);
        let l = f.graph.sum(n);
        assert!(f.backward(l).unwrap().is_empty());
    }
}
