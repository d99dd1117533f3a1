use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};
use usfnet_autograd::{Graph, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-bound, bound)`
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Buffers (running statistics) are stored with the parameters but never trained.
    pub buffer: bool,
}

impl ParamSpec {
    pub fn param(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), init, buffer: false }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), init, buffer: true }
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn collect(&self, out: &mut Vec<ParamSpec>);

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        self.collect(&mut v);
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Initialises every spec in declaration order from `rng`.
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::default();
        for s in specs {
            let t = match s.init {
                Init::Uniform(b) => Tensor::uniform(&s.shape, -b, b, rng),
                Init::Const(v) => Tensor::full(&s.shape, v),
            };
            let map = if s.buffer { &mut store.buffers } else { &mut store.params };
            if map.insert(s.name.clone(), t).is_some() {
                return Err(Error::Invalid(format!("duplicate parameter name `{}`", s.name)));
            }
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    /// Replaces an existing parameter, checking its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != t.shape() {
            return Err(Error::Invalid(format!("`{name}`: shape {:?} != {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Hex SHA-256 over names, shapes and the exact bits of every parameter and buffer.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (tag, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, t) in map {
                h.update(tag.as_bytes());
                h.update(name.as_bytes());
                for &d in t.shape() {
                    h.update((d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Verifies that the store holds exactly the tensors `specs` describe.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            let t = if s.buffer { self.buffer(&s.name)? } else { self.get(&s.name)? };
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Invalid(format!("`{}` has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)));
            }
        }
        if specs.len() != self.params.len() + self.buffers.len() {
            return Err(Error::Invalid("store holds tensors the model does not declare".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, parameters differentiable.
    Train,
    /// Running statistics, parameters constant.
    Eval,
}

/// Binds a [`ParamStore`] to a [`Graph`] for one forward pass.
pub struct Session<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    mode: Mode,
    grads: bool,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
    buffer_updates: RefCell<BTreeMap<String, Tensor>>,
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore, mode: Mode) -> Self {
        Session {
            graph,
            store,
            mode,
            grads: mode == Mode::Train,
            bound: RefCell::new(BTreeMap::new()),
            buffer_updates: RefCell::new(BTreeMap::new()),
        }
    }

    /// Overrides whether parameters are bound as differentiable leaves.
    pub fn with_param_grads(mut self, on: bool) -> Self {
        self.grads = on;
        self
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// The graph node for parameter `name`; repeated calls return the same node.
    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.grads { self.graph.leaf(t) } else { self.graph.constant(t) };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'g Tensor> {
        self.store.buffer(name)
    }

    pub fn record_buffer(&self, name: &str, t: Tensor) {
        self.buffer_updates.borrow_mut().insert(name.to_string(), t);
    }

    pub fn bound_params(&self) -> Vec<(String, Var<'g>)> {
        self.bound.borrow().iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn take_buffer_updates(&self) -> BTreeMap<String, Tensor> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded_and_fingerprint_tracks_bits() {
        let specs = vec![
            ParamSpec::param("a.weight", &[2, 3], Init::Uniform(0.5)),
            ParamSpec::buffer("a.running_var", &[3], Init::Const(1.0)),
        ];
        let s1 = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s2 = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.fingerprint(), s2.fingerprint());
        assert!(s1.get("a.weight").unwrap().data().iter().all(|v| v.abs() <= 0.5));
        let mut s3 = s1.clone();
        s3.get_mut("a.weight").unwrap().data_mut()[0] += 1e-12;
        assert_ne!(s1.fingerprint(), s3.fingerprint());
        s1.check_against(&specs).unwrap();
        assert_eq!(s1.param_count(), 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let specs = vec![
            ParamSpec::param("x", &[1], Init::Const(0.0)),
            ParamSpec::param("x", &[1], Init::Const(0.0)),
        ];
        assert!(ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn session_binds_once() {
        let mut store = ParamStore::default();
        store.insert("w", Tensor::ones(&[2]));
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Train);
        let a = s.param("w").unwrap();
        let b = s.param("w").unwrap();
        assert_eq!(a.id(), b.id());
        assert!(s.param("missing").is_err());
        assert_eq!(s.bound_params().len(), 1);
    }
}
