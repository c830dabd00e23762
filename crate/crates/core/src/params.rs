//! Named parameter storage shared by every learnable layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group. Encoders, mask heads and the fusion chain train with
/// the fusion rate; decoder, recurrence, heads and propagation with the
/// refinement rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Fusion,
    Refinement,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape(), "parameter shape change");
        self.entries[id.0].value = value;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    Normal(f64),
    /// He-style normal with std `gain / sqrt(fan_in)`.
    FanIn { gain: f64 },
}

/// Hands out parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            group,
        }
    }

    /// Child builder with `name` appended to the prefix.
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            prefix: self.qualify(name),
            store: self.store,
            rng: self.rng,
            group: self.group,
        }
    }

    pub fn with_group(&mut self, group: ParamGroup) -> ParamBuilder<'_> {
        ParamBuilder {
            prefix: self.prefix.clone(),
            store: self.store,
            rng: self.rng,
            group,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, shape: Shape, init: Init) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, v),
            Init::Normal(std) => Tensor::randn(shape, std, self.rng),
            Init::FanIn { gain } => {
                let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
                Tensor::randn(shape, gain / fan_in.sqrt(), self.rng)
            }
        };
        let qualified = self.qualify(name);
        self.store.add(qualified, value, self.group)
    }
}

/// Deterministic RNG used for parameter initialisation and data shuffling.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_prefixes_names() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let mut root = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
        let mut enc = root.pp("encoder");
        let id = enc.pp("conv1").tensor("weight", [2, 1, 3, 3], Init::Zeros);
        assert_eq!(store.entry(id).name, "encoder.conv1.weight");
        assert_eq!(store.find("encoder.conv1.weight"), Some(id));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(0.0), ParamGroup::Fusion);
        store.add("a", Tensor::scalar(0.0), ParamGroup::Fusion);
    }
}
