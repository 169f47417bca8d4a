use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named, ordered collection of learnable tensors.
///
/// Cloning produces an independent deep copy; iteration order is insertion
/// order and is identical across clones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

/// Gradients share the parameter layout: one tensor per parameter name.
pub type Gradients = ParamSet;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names in the same order with zero-filled tensors.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// `self += scale * other`, matching by name.
    pub fn axpy(&mut self, scale: f64, other: &ParamSet) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let o = other
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if o.shape() != t.shape() {
                return Err(Error::shape("axpy", name.clone(), format!("{:?} vs {:?}", t.shape(), o.shape())));
            }
            t.axpy(scale, o);
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.tensors.values_mut().for_each(|t| t.scale_in_place(s));
    }

    /// Exact equality of names, order, shapes and every stored bit.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.bitwise_eq(tb))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.iter()
            .zip(other.iter())
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Same names, with tensors taken from `values` in order.
    pub fn with_values(&self, values: &[Tensor]) -> Result<ParamSet> {
        if values.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tensors for {} parameters",
                values.len(),
                self.len()
            )));
        }
        let mut out = ParamSet::new();
        for ((name, old), new) in self.iter().zip(values) {
            if old.shape() != new.shape() {
                return Err(Error::shape("with_values", name.to_string(), format!("{:?} vs {:?}", old.shape(), new.shape())));
            }
            out.insert(name, new.clone())?;
        }
        Ok(out)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.tensors.values().cloned().collect()
    }

    /// Registers every tensor as a gradient leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a constant on `tape`.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }
}

/// Parameters as tape variables, keyed by name.
pub struct BoundParams<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Reads accumulated leaf gradients back into a [`Gradients`] map.
    pub fn grads(&self, tape: &Tape) -> Gradients {
        ParamSet {
            tensors: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), tape.grad(*v)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn clone_is_isolated() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(&[2], 1.0)).unwrap();
        p.insert("b", Tensor::zeros(&[1])).unwrap();
        let orig = p.clone();
        let mut c = p.clone();
        c.get_mut("w").unwrap().data_mut()[0] = 5.0;
        assert!(p.bitwise_eq(&orig));
        assert_eq!(c.names().collect::<Vec<_>>(), vec!["w", "b"]);
    }
}
