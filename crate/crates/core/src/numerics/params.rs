use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Gradient accumulators keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore {
    grads: BTreeMap<String, Tensor>,
}

impl GradStore {
    /// Zero accumulator for `name`. Panics on unknown names: the set of
    /// parameters is fixed at model construction.
    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient slot for `{name}`"))
    }

    /// Two distinct accumulators at once.
    pub fn pair_mut(&mut self, a: &str, b: &str) -> (&mut Tensor, &mut Tensor) {
        assert_ne!(a, b);
        let mut first = None;
        let mut second = None;
        for (name, t) in self.grads.iter_mut() {
            if name == a {
                first = Some(t);
            } else if name == b {
                second = Some(t);
            }
        }
        (
            first.unwrap_or_else(|| panic!("no gradient slot for `{a}`")),
            second.unwrap_or_else(|| panic!("no gradient slot for `{b}`")),
        )
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn zero(&mut self) {
        self.grads.values_mut().for_each(|t| t.fill(0.0));
    }

    /// Adds `other` into `self`, name by name, in sorted name order.
    pub fn accumulate(&mut self, other: &GradStore) {
        for (name, g) in &other.grads {
            if let Some(mine) = self.grads.get_mut(name) {
                mine.add_assign(g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.values_mut().for_each(|t| t.scale(factor));
    }
}

/// Named trainable parameters with matching gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    grads: GradStore,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.values.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.grads
            .grads
            .insert(name.to_string(), Tensor::zeros(value.shape()));
        self.values.insert(name.to_string(), value);
        Ok(())
    }

    /// Parameter value; panics on unknown names (fixed model layout).
    pub fn value(&self, name: &str) -> &Tensor {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_value(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grads(&self) -> &GradStore {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut GradStore {
        &mut self.grads
    }

    /// Fresh zeroed accumulator with the same layout.
    pub fn zero_grads_like(&self) -> GradStore {
        let mut g = self.grads.clone();
        g.zero();
        g
    }

    pub fn zero_grad(&mut self) {
        self.grads.zero();
    }

    /// Plain SGD: `p -= lr * grad`.
    pub fn sgd_step(&mut self, lr: f64) {
        for (name, value) in self.values.iter_mut() {
            let g = &self.grads.grads[name];
            for (p, d) in value.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * d;
            }
        }
    }
}

/// Uniform `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))` for a `[out, in]` weight.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_out: usize, fan_in: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Tensor::from_vec(&[fan_out, fan_in], data).expect("shape matches")
}
