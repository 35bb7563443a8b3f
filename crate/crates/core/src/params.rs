//! Named parameter storage and per-step binding into the autodiff graph.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    /// Layer-wise learning-rate group; 0 is nearest the output.
    pub group: usize,
    /// Whether decoupled weight decay applies (matrices and embeddings).
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

pub const INIT_STD: f64 = 0.02;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: usize, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Truncated-normal matrix, std 0.02.
    pub fn add_weight(&mut self, name: impl Into<String>, shape: &[usize], group: usize, rng: &mut Rng) -> ParamId {
        let t = Tensor::from_fn(shape, |_| T::lit(rng.trunc_normal(INIT_STD)));
        self.add(name, t, group, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize], group: usize) -> ParamId {
        self.add(name, Tensor::zeros(shape), group, false)
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize], group: usize) -> ParamId {
        self.add(name, Tensor::ones(shape), group, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
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

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Overwrites a parameter by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("assign", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Wraps every parameter as a graph leaf; `trainable` picks which ones
    /// receive gradients.
    pub fn bind(&self, trainable: impl Fn(&ParamEntry<T>) -> bool) -> Bound<T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| Var::leaf(e.value.clone(), trainable(e)))
                .collect(),
        }
    }

    pub fn bind_all(&self) -> Bound<T> {
        self.bind(|_| true)
    }

    pub fn bind_frozen(&self) -> Bound<T> {
        self.bind(|_| false)
    }
}

/// Graph leaves for one forward/backward pass over a [`ParamStore`].
pub struct Bound<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// Affine map `x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearSlots {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearSlots {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        group: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add_weight(format!("{name}.weight"), &[input, output], group, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[output], group));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, bound: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = x.matmul(bound.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(bound.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormSlots {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNormSlots {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, group: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), &[dim], group),
            bias: store.add_zeros(format!("{name}.bias"), &[dim], group),
        }
    }

    pub fn forward<T: Scalar>(&self, bound: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.layer_norm(bound.var(self.gain), bound.var(self.bias), LN_EPS)
    }
}
