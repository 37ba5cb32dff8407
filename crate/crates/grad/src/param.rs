//! Named parameter storage shared by the models.
//!
//! Registration order is the canonical parameter order everywhere: it fixes
//! the binding order into a [`Graph`], the optimizer state layout, and the
//! blob order of checkpoints written by the store layer.

use crate::graph::{Arr, Graph, Var};

/// An ordered, named collection of parameter tensors.
#[derive(Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arr>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under `name` and return its index.  Names must be
    /// unique; they document the checkpoint blob order.
    pub fn register(&mut self, name: &str, value: Arr) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Arr {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Arr {
        &mut self.values[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Bind every tensor as a graph input, in registration order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|v| g.input(v.clone())).collect()
    }

    /// Map a flat scalar index to `(tensor index, offset within tensor)`.
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let mut rest = flat;
        for (i, v) in self.values.iter().enumerate() {
            if rest < v.len() {
                return (i, rest);
            }
            rest -= v.len();
        }
        panic!("flat parameter index {flat} out of range");
    }

    pub fn get_flat(&self, flat: usize) -> f64 {
        let (i, off) = self.locate(flat);
        self.values[i].as_slice().expect("standard layout")[off]
    }

    pub fn set_flat(&mut self, flat: usize, value: f64) {
        let (i, off) = self.locate(flat);
        self.values[i].as_slice_mut().expect("standard layout")[off] = value;
    }
}
