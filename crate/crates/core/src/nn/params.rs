use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Tape, Var};

static NEXT_STORE: AtomicU32 = AtomicU32::new(0);

/// Stable handle to a parameter; carries its store so bindings from different
/// stores on one tape never collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    store: u32,
    index: u32,
}

/// Named, ordered parameter table.
pub struct ParamStore {
    id: u32,
    names: Vec<String>,
    values: Vec<DenseTensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        // a clone is a distinct store; ids must not alias the original
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: DenseTensor, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId {
            store: self.id,
            index: (self.names.len() - 1) as u32,
        }
    }

    fn slot(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.id, "parameter handle from a different store");
        id.index as usize
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseTensor {
        &self.values[self.slot(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseTensor {
        let i = self.slot(id);
        &mut self.values[i]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[self.slot(id)]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId {
            store: self.id,
            index: i as u32,
        })
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[self.slot(id)]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|i| ParamId {
            store: self.id,
            index: i as u32,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Sets trainability for every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (n, t) in self.names.iter().zip(self.trainable.iter_mut()) {
            if n.starts_with(prefix) {
                *t = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    pub fn num_trainable(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| v.numel())
            .sum()
    }

    /// Places the parameter on the tape. Trainable parameters become gradient
    /// leaves bound to their id; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        let i = self.slot(id);
        if self.trainable[i] {
            let v = tape.leaf(self.values[i].clone(), true);
            tape.bind_param(v, id);
            v
        } else {
            tape.constant(self.values[i].clone())
        }
    }

    /// Serialized bytes of all parameters whose name starts with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (n, v) in self.iter() {
            if n.starts_with(prefix) {
                out.extend_from_slice(n.as_bytes());
                out.extend_from_slice(&v.to_bytes());
            }
        }
        out
    }

    /// Overwrites values from `(name, tensor)` pairs; every target name must exist
    /// with a matching shape. `rename` maps a source name to a target name.
    pub fn load_named<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a DenseTensor)>,
        rename: impl Fn(&str) -> Option<String>,
    ) -> Result<usize> {
        let mut count = 0;
        for (name, t) in entries {
            let Some(target) = rename(name) else { continue };
            let i = *self
                .index
                .get(&target)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown parameter {target}")))?;
            if self.values[i].shape() != t.shape() {
                return Err(Error::shape("checkpoint load", self.values[i].shape(), t.shape()));
            }
            self.values[i] = t.clone();
            count += 1;
        }
        Ok(count)
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn scoped(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, value: DenseTensor) -> ParamId {
        let n = self.full_name(name);
        self.store.add(&n, value, true)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f32) -> ParamId {
        let t = DenseTensor::randn(shape, std, self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, DenseTensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.tensor(name, DenseTensor::full(shape, value))
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// Seeded generator used for every parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
