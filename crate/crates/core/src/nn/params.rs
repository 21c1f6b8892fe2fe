//! Named parameter storage shared by both networks.

use std::cell::RefCell;

use anomgan_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spectral::{power_iteration_step, SpectralState};
use crate::error::Result;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    spectral: Option<SpectralState>,
}

/// Ordered collection of named tensors, each optionally carrying the
/// power-iteration state used to spectrally normalize it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, None)
    }

    pub fn add_normalized(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        state: SpectralState,
    ) -> ParamId {
        self.push(name.into(), value, Some(state))
    }

    fn push(&mut self, name: String, value: Tensor, spectral: Option<SpectralState>) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            spectral,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn spectral(&self, id: ParamId) -> Option<&SpectralState> {
        self.entries[id.0].spectral.as_ref()
    }

    pub fn set_spectral(&mut self, id: ParamId, state: SpectralState) {
        self.entries[id.0].spectral = Some(state);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Advances every spectral state by its configured power iterations.
    pub fn advance_spectral(&mut self) -> Result<()> {
        for entry in &mut self.entries {
            if let Some(state) = &entry.spectral {
                let (_, next) = power_iteration_step(&entry.value, state)?;
                entry.spectral = Some(next);
            }
        }
        Ok(())
    }

    /// Records every parameter on `graph`. Trainable bindings produce
    /// gradients; frozen ones are graph constants.
    pub fn bind<'g, 's>(&'s self, graph: &'g Graph, trainable: bool) -> Bound<'g, 's> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    graph.param(e.value.clone())
                } else {
                    graph.constant(e.value.clone())
                }
            })
            .collect();
        self.bind_vars(vars)
    }

    /// Binds caller-supplied leaves, one per parameter in store order, in
    /// place of the stored values. Spectral states still come from the store.
    pub fn bind_vars<'g, 's>(&'s self, vars: Vec<Var<'g>>) -> Bound<'g, 's> {
        assert_eq!(vars.len(), self.entries.len(), "one leaf per parameter");
        Bound {
            store: self,
            vars,
            normalized: RefCell::new(vec![None; self.entries.len()]),
        }
    }

    /// Stored values in parameter order.
    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }
}

/// Parameters of one [`ParamStore`] recorded on a graph.
pub struct Bound<'g, 's> {
    store: &'s ParamStore,
    vars: Vec<Var<'g>>,
    normalized: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g> Bound<'g, '_> {
    /// The raw leaf for `id`.
    pub fn raw(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// The weight as used in a layer: divided by its spectral-norm estimate
    /// when the parameter carries spectral state. Memoized per binding.
    pub fn weight(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.normalized.borrow()[id.0] {
            return v;
        }
        let raw = self.vars[id.0];
        let w = match self.store.spectral(id) {
            Some(state) => raw.spectral_normalize(&state.u, &state.v),
            None => raw,
        };
        self.normalized.borrow_mut()[id.0] = Some(w);
        w
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }
}

/// Allocates freshly initialized layer parameters into a store.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    spectral: bool,
    init_std: f64,
}

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, spectral: bool) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spectral,
            init_std: INIT_STD,
        }
    }

    pub fn spectral(&self) -> bool {
        self.spectral
    }

    /// Gaussian weight of `shape`; spectrally normalized when the builder is.
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let normal = Normal::new(0.0, self.init_std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        let value = Tensor::from_vec(shape.to_vec(), data);
        if self.spectral {
            let rows = shape[0];
            let cols = n / rows;
            let state = SpectralState::random(rows, cols, &mut self.rng);
            // One iteration so the stored estimate is meaningful before training.
            let (_, state) = power_iteration_step(&value, &state)?;
            Ok(self.store.add_normalized(name, value, state))
        } else {
            Ok(self.store.add(name, value))
        }
    }

    pub fn bias(&mut self, name: &str, len: usize) -> ParamId {
        self.store.add(name, Tensor::zeros([len]))
    }
}
