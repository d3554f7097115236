//! Named parameter storage, the per-pass session that exposes parameters as
//! tape variables, and the small layers shared by every block.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use irdet_tensor::{
    batch_norm, central_difference_conv2d, conv2d, BatchStats, ConvGeometry, Gradients, Real,
    RunningStats, Tape, Tensor, Var,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

/// Insertion-ordered map from names to tensors. Trainable entries are
/// parameters; the rest are buffers such as norm running statistics.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid("ParamStore::insert", format!("duplicate name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(invalid(
                "ParamStore::set",
                format!(
                    "`{}` has shape {:?}, got {:?}",
                    slot.name,
                    slot.value.shape(),
                    value.shape()
                ),
            ));
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        for u in updates {
            let mut running = RunningStats {
                mean: self.get(u.mean).clone(),
                var: self.get(u.var).clone(),
            };
            running.update(&u.batch, T::of(u.momentum));
            *self.get_mut(u.mean) = running.mean;
            *self.get_mut(u.var) = running.var;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: Arc::new(e.value.cast()),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Deferred running-statistics update produced by a training-mode norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch: BatchStats<T>,
    pub momentum: f64,
}

/// One forward pass over a store. Parameters become tape leaves on first
/// use; in inference mode they are constants and norms use running stats.
pub struct Session<'t, T: Real> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    training: bool,
    track: bool,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
    stats: RefCell<Vec<StatUpdate<T>>>,
}

impl<'t, T: Real> Session<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>, training: bool, track: bool) -> Self {
        Self {
            tape,
            store,
            training,
            track,
            vars: RefCell::new(vec![None; store.len()]),
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn training(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self::new(tape, store, true, true)
    }

    pub fn inference(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self::new(tape, store, false, false)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore<T> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let value = self.store.shared(id);
        let v = if self.track && self.store.is_trainable(id) {
            self.tape.leaf_shared(value)
        } else {
            self.tape.constant_shared(value)
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Parameter gradients of every parameter touched in this pass.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|v| v.requires_grad()).map(|v| (ParamId(i), grads.take(v))))
            .collect()
    }

    fn push_stats(&self, update: StatUpdate<T>) {
        self.stats.borrow_mut().push(update);
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub central_difference: bool,
}

impl Conv2d {
    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        Ok(if self.central_difference {
            central_difference_conv2d(x, w, b, self.geom)?
        } else {
            conv2d(x, w, b, self.geom)?
        })
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let running = RunningStats {
            mean: s.store().get(self.running_mean).clone(),
            var: s.store().get(self.running_var).clone(),
        };
        let (y, stats) = batch_norm(
            x,
            s.param(self.gamma),
            s.param(self.beta),
            &running,
            s.is_training(),
            T::of(self.eps),
        )?;
        if let Some(batch) = stats {
            s.push_stats(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch,
                momentum: self.momentum,
            });
        }
        Ok(y)
    }
}

/// Convolution, optionally followed by batch norm and relu.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm>,
}

impl ConvUnit {
    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(s, x)?;
        match &self.norm {
            Some(norm) => Ok(norm.forward(s, y)?.relu()),
            None => Ok(y),
        }
    }
}

/// Allocates and initializes parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.qualify(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn store(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)`. Draws in f64 so that every precision
    /// sees the same initial values up to rounding.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.store.insert(self.qualify(name), value, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<ParamId> {
        self.store
            .insert(self.qualify(name), Tensor::full(shape, T::of(value)), trainable)
    }

    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Result<Conv2d> {
        let mut b = self.scope(name);
        let weight = b.kaiming("weight", &[c_out, c_in, kernel, kernel], c_in * kernel * kernel)?;
        let bias = if bias {
            Some(b.constant("bias", &[c_out], 0.0, true)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            geom,
            central_difference: false,
        })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        let mut b = self.scope(name);
        Ok(BatchNorm {
            gamma: b.constant("gamma", &[channels], 1.0, true)?,
            beta: b.constant("beta", &[channels], 0.0, true)?,
            running_mean: b.constant("running_mean", &[channels], 0.0, false)?,
            running_var: b.constant("running_var", &[channels], 1.0, false)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Conv + norm + relu. The conv carries no bias since the norm removes it.
    pub fn conv_unit(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeometry,
        central_difference: bool,
    ) -> Result<ConvUnit> {
        let mut b = self.scope(name);
        let mut conv = b.conv("conv", c_in, c_out, kernel, geom, false)?;
        conv.central_difference = central_difference;
        let norm = Some(b.batch_norm("norm", c_out)?);
        Ok(ConvUnit { conv, norm })
    }
}
