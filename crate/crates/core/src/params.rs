use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.entries.iter_mut().for_each(|(_, t)| t.set_requires_grad(on));
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Records every parameter as a graph leaf, tracked or not.
    pub fn insert_into(&self, g: &mut Graph<T>, track: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| if track { g.param(t) } else { g.constant(t.detached()) })
            .collect()
    }

    /// Adds the leaf gradients of `vars` (as returned by [`Self::insert_into`]) into
    /// the parameters' own buffers.
    pub fn accumulate_from(&mut self, g: &Graph<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "{} graph handles for {} parameters",
                vars.len(),
                self.entries.len()
            )));
        }
        for ((_, t), &v) in self.entries.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Global L2 norm of all gradient buffers (missing buffers count as zero).
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter().map(|v| v.f64() * v.f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// True when both sets hold the same names with the same shapes, in order.
    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// Copies values (not gradients) from `other`, which must share the layout.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Contract("parameter layouts differ".into()));
        }
        for ((_, dst), (_, src)) in self.entries.iter_mut().zip(&other.entries) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Untracked copy with no gradients.
    pub fn detached(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.detached()))
                .collect(),
        }
    }
}
