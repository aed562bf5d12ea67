use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named parameter table. Non-trainable entries hold running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Replace values by name; every entry must be present with a matching shape.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in tensors {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::invalid(format!("unexpected tensor {name}")))?;
            let e = &mut self.entries[id.0];
            if e.value.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t;
            seen[id.0] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("missing tensor {}", self.entries[k].name)));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Gradients of the objective, one tensor per parameter in store order.
/// Non-trainable entries carry zero tensors so shapes mirror the store.
#[derive(Clone, Debug)]
pub struct GradientTape<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradientTape<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        GradientTape {
            grads: store.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn matches(&self, store: &ParamStore<T>) -> bool {
        self.grads.len() == store.entries.len()
            && self
                .grads
                .iter()
                .zip(&store.entries)
                .all(|(g, e)| g.shape() == e.value.shape())
    }

    /// Sum another tape into this one (data-parallel accumulation).
    pub fn accumulate(&mut self, other: &GradientTape<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.scale(s);
        }
    }
}
