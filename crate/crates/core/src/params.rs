//! Named trainable parameters and the per-forward binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    fn zeros(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub adam: AdamState,
}

/// Parameters keyed by dotted path, e.g. `mcbl.head0.U_m`. Iteration order
/// is the sorted path order, which is also the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let adam = AdamState::zeros(value.len());
        self.params.insert(name, Parameter { value, adam });
        Ok(())
    }

    /// Weight matrix drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn init_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::ones(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set parameter", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub(crate) fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Sets every parameter whose path starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Gradient per parameter path.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Whether a forward pass is for training (dropout active) or inference.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Mode {
    Eval,
    Train { rng: ChaCha8Rng },
}

/// One forward pass: a tape plus the parameters bound onto it so far.
///
/// Parameters are copied onto the tape the first time a module asks for
/// them; [`Session::param_grads`] collects their gradients afterwards.
pub struct Session<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParameterStore,
    bound: BTreeMap<String, Var>,
    mode: Mode,
}

impl<'a> Session<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParameterStore, mode: Mode) -> Self {
        Session {
            tape,
            store,
            bound: BTreeMap::new(),
            mode,
        }
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    pub fn training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    /// The tape node holding parameter `name`.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.tape.param(value);
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Binds `name` to an existing node instead of the stored value.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let stored = self.store.get(name)?;
        let shape = self.tape.value(var).shape();
        if stored.shape() != shape {
            return Err(Error::dim("bind parameter", stored.shape(), shape));
        }
        self.bound.insert(name.to_owned(), var);
        Ok(())
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match &mut self.mode {
            Mode::Eval => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(x)
            }
            Mode::Train { rng } => self.tape.dropout(x, rate, true, rng),
        }
    }

    /// Gradients of every stored parameter; zeros for those not used.
    pub fn param_grads(&self, grads: &mut Gradients) -> ParamGrads {
        self.store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.to_owned(), g)
            })
            .collect()
    }
}
