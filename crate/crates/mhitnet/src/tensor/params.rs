//! Named parameters, the flat variable store, and the forward context that
//! binds parameters onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{GradStore, Shape, Tape, Tensor, Value};

/// How a parameter is filled by [`VarStore::init_parameters`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal with the given fan-in: N(0, sqrt(2 / fan_in)).
    HeNormal { fan_in: usize },
    /// N(0, std).
    Normal { std: f32 },
}

/// Stable handle into a [`VarStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named tensor owned by a model. Trainable parameters receive gradients
/// and optimizer updates; non-trainable ones are buffers (running statistics)
/// that are still checkpointed.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub init: Init,
}

/// Flat, insertion-ordered store of all parameters of a model.
#[derive(Clone, Debug, Default)]
pub struct VarStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl VarStore {
    pub fn new() -> Self {
        VarStore::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        trainable: bool,
        init: Init,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Tensor::zeros(shape),
            trainable,
            init,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.params[id.0].value.shape(),
            value.shape(),
            "set_value must preserve the parameter shape"
        );
        self.params[id.0].value = value;
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total number of stored floats (parameters plus buffers).
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Number of trainable floats.
    pub fn trainable_len(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Fill every parameter from its declared [`Init`] rule, deterministically
    /// under `seed`. Same seed, same store layout: bit-identical values.
    pub fn init_parameters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for param in &mut self.params {
            let shape = param.value.shape();
            let data = param.value.data_mut();
            match param.init {
                Init::Zeros => data.fill(0.0),
                Init::Ones => data.fill(1.0),
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in data.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = (z * std) as f32;
                    }
                }
                Init::Normal { std } => {
                    for v in data.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = (z * std as f64) as f32;
                    }
                }
            }
            let _ = shape;
        }
        let _: u64 = rng.gen(); // keep the stream position past the last fill
    }
}

/// One forward pass: a tape plus the store it binds parameters from.
///
/// Training-mode passes may update batch-norm running statistics through
/// [`Ctx::set_buffer`]; that makes a training forward single-writer on the
/// store, matching the module's concurrency contract.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a mut VarStore,
    pub training: bool,
    /// Whether a training-mode pass is allowed to touch running statistics.
    /// Gradient checking re-evaluates the forward and turns this off.
    pub update_stats: bool,
    bindings: Vec<Option<Value>>,
}

impl<'a> Ctx<'a> {
    pub fn train(store: &'a mut VarStore) -> Self {
        let n = store.len();
        Ctx {
            tape: Tape::new(),
            store,
            training: true,
            update_stats: true,
            bindings: vec![None; n],
        }
    }

    pub fn eval(store: &'a mut VarStore) -> Self {
        let n = store.len();
        Ctx {
            tape: Tape::no_grad(),
            store,
            training: false,
            update_stats: false,
            bindings: vec![None; n],
        }
    }

    /// Evaluation-mode pass that still records gradients (used by the
    /// gradient-check harness to probe eval-only code paths).
    pub fn eval_with_grad(store: &'a mut VarStore) -> Self {
        let n = store.len();
        Ctx {
            tape: Tape::new(),
            store,
            training: false,
            update_stats: false,
            bindings: vec![None; n],
        }
    }

    /// Training-mode pass without running-stat updates (pure function of the
    /// inputs; required for finite-difference probing).
    pub fn train_frozen_stats(store: &'a mut VarStore) -> Self {
        let mut cx = Ctx::train(store);
        cx.update_stats = false;
        cx
    }

    /// Bind a parameter onto the tape, once; later binds return the same node.
    pub fn bind(&mut self, id: ParamId) -> Value {
        if let Some(v) = self.bindings[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(&p.value, p.trainable);
        self.bindings[id.0] = Some(v);
        v
    }

    /// Read a buffer (e.g. running statistics) without touching the tape.
    pub fn buffer(&self, id: ParamId) -> &Tensor {
        self.store.value(id)
    }

    pub fn set_buffer(&mut self, id: ParamId, value: Tensor) {
        self.store.set_value(id, value);
    }

    /// Put an input tensor on the tape (no gradient).
    pub fn input(&mut self, t: &Tensor) -> Value {
        self.tape.constant(t)
    }

    /// Put an input on the tape and track its gradient (for input-side
    /// finite-difference checks).
    pub fn input_with_grad(&mut self, t: &Tensor) -> Value {
        self.tape.leaf(t, true)
    }

    /// Gradient for a bound parameter after `tape.backward`; zeros when the
    /// parameter was never reached by the loss.
    pub fn grad_of(&self, grads: &GradStore, id: ParamId) -> Tensor {
        let shape = self.store.value(id).shape();
        match self.bindings[id.0].and_then(|v| grads.get(v).map(|g| g.to_vec())) {
            Some(g) => Tensor::new(shape, g).expect("gradient shape mirrors parameter"),
            None => Tensor::zeros(shape),
        }
    }
}
