//! Named parameter storage shared by the trainable models.
//!
//! Parameters live outside any graph as plain `f32` arrays. Each training
//! step binds them into a fresh [`Graph`] as leaves, runs forward/backward,
//! and reads the gradients back out. Binding at `f64` reuses the same model
//! wiring for finite-difference checks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::graph::{Graph, TensorId};
use super::shape::Shape;
use super::{Element, GradError, Result};

/// Index of an entry in a [`ParamStore`]; stable across binds and saves.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

/// One named tensor: trainable weights or persistent model state such as
/// normalisation statistics (`trainable = false`).
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
    pub trainable: bool,
}

/// Ordered collection of named parameters for one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    pub(crate) entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn add(&mut self, name: &str, shape: Shape, data: Vec<f32>, trainable: bool) -> ParamId {
        assert_eq!(
            shape.numel(),
            data.len(),
            "{name}: data length vs shape {shape}"
        );
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Gaussian-initialised trainable weights with the given std deviation.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: Shape,
        std: f32,
        rng: &mut impl Rng,
    ) -> ParamId {
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
        self.add(name, shape, data, true)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Shape, trainable: bool) -> ParamId {
        let data = vec![0.0; shape.numel()];
        self.add(name, shape, data, trainable)
    }

    pub fn add_full(&mut self, name: &str, shape: Shape, value: f32, trainable: bool) -> ParamId {
        let data = vec![value; shape.numel()];
        self.add(name, shape, data, trainable)
    }

    /// Looks a parameter up by its registered name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.entries[id.0].data
    }

    pub fn shape(&self, id: ParamId) -> &Shape {
        &self.entries[id.0].shape
    }

    /// Inserts every entry into `g` as a leaf; trainable entries become
    /// differentiation targets unless `frozen`.
    pub fn bind<T: Element>(&self, g: &mut Graph<T>, frozen: bool) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|e| {
                let data = e.data.iter().map(|&v| super::elem::<T>(v as f64)).collect();
                g.leaf(e.shape.clone(), data, e.trainable && !frozen)
                    .expect("stored shape matches stored data")
            })
            .collect();
        Binding { ids }
    }

    /// Binds every entry as a non-differentiated leaf taking its values
    /// from `values` (parallel to entry order) instead of the stored data.
    /// Lets finite-difference harnesses evaluate the same wiring at
    /// perturbed parameters without round-tripping through `f32` storage.
    pub fn bind_values<T: Element>(&self, g: &mut Graph<T>, values: &[Vec<T>]) -> Binding {
        assert_eq!(values.len(), self.entries.len());
        let ids = self
            .entries
            .iter()
            .zip(values)
            .map(|(e, v)| {
                g.leaf(e.shape.clone(), v.clone(), false)
                    .expect("value vector matches stored shape")
            })
            .collect();
        Binding { ids }
    }

    /// Overwrites entry data from `(name, data)` pairs; names and lengths
    /// must match the existing layout exactly.
    pub fn load_named(&mut self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        for e in &mut self.entries {
            let found = tensors
                .iter()
                .find(|(n, _, _)| n == &e.name)
                .ok_or_else(|| GradError::MissingGrad {
                    name: format!("checkpoint tensor {}", e.name),
                })?;
            if found.1 != e.shape.dims() || found.2.len() != e.data.len() {
                return Err(GradError::ShapeMismatch {
                    op: "load_named",
                    detail: format!("{}: stored {:?} vs expected {}", e.name, found.1, e.shape),
                });
            }
            e.data.copy_from_slice(&found.2);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes, and little-endian payloads; equal stores
    /// hash equal, so this detects any mutation of frozen models.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([0u8]);
            for &d in e.shape.dims() {
                h.update((d as u32).to_le_bytes());
            }
            for &v in &e.data {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Graph leaf ids for one bound store, indexed by [`ParamId`].
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }

    /// Collects gradients for every trainable entry after a backward pass.
    /// Entries the loss never touched report zeros; frozen entries yield
    /// `None`.
    pub fn grads<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore) -> Vec<Option<Vec<f32>>> {
        self.ids
            .iter()
            .zip(store.entries())
            .map(|(&tid, e)| {
                if e.trainable && g.requires_grad(tid) {
                    let gslice = g.grad_or_zeros(tid);
                    Some(
                        gslice
                            .iter()
                            .map(|&v| v.to_f64().unwrap_or(0.0) as f32)
                            .collect(),
                    )
                } else {
                    None
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_and_read_back() {
        let mut store = ParamStore::new();
        let w = store.add("m.w", Shape::new(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0], true);
        let s = store.add("m.stat", Shape::new(&[2]), vec![0.5, 0.5], false);
        let mut g: Graph<f32> = Graph::new();
        let b = store.bind(&mut g, false);
        assert_eq!(g.data(b.id(w)), &[1.0, 2.0, 3.0, 4.0]);
        assert!(g.requires_grad(b.id(w)));
        assert!(!g.requires_grad(b.id(s)));
    }

    #[test]
    fn untouched_parameter_reports_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("a", Shape::new(&[1]), vec![2.0], true);
        let unused = store.add("b", Shape::new(&[1]), vec![3.0], true);
        let mut g: Graph<f32> = Graph::new();
        let b = store.bind(&mut g, false);
        let y = g.mul(b.id(used), b.id(used)).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let grads = b.grads(&mut g, &store);
        assert_eq!(grads[0].as_deref(), Some(&[4.0f32][..]));
        assert_eq!(grads[1].as_deref(), Some(&[0.0f32][..]));
        let _ = unused;
    }

    #[test]
    fn fingerprint_detects_mutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_normal("w", Shape::new(&[4]), 0.1, &mut rng);
        let before = store.fingerprint();
        assert_eq!(before, store.fingerprint(), "stable across calls");
        store.data_mut(ParamId(0))[0] += 1.0;
        assert_ne!(before, store.fingerprint());
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Shape::new(&[1]), vec![0.0], true);
        store.add("w", Shape::new(&[1]), vec![0.0], true);
    }
}
