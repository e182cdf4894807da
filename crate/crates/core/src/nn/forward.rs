//! One forward pass: a tape, parameter bindings, and the train/inference
//! switches that dropout and normalization layers consult.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::params::{ParamId, ParamStore};
use crate::rng::{self, tag};
use crate::tensor::{Tape, TensorId, TensorValue};

#[derive(Debug, Clone, Copy)]
pub enum Mode {
    /// Batch statistics, dropout active, parameters bound with gradients.
    /// Dropout masks derive from (seed, epoch, batch, site), so repeating a
    /// forward pass with the same coordinates repeats the noise exactly.
    Train { seed: u64, epoch: u64, batch: u64 },
    /// Running statistics, dropout is the identity, no gradients.
    Eval,
}

pub struct ForwardPass<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    mode: Mode,
    bound: BTreeMap<ParamId, TensorId>,
    /// Running-statistic refreshes collected during a training pass,
    /// applied by the caller once the pass is complete.
    pub stat_updates: Vec<(ParamId, TensorValue)>,
    dropout_site: u64,
}

impl<'p> ForwardPass<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode) -> Self {
        ForwardPass {
            tape: Tape::new(),
            store,
            mode,
            bound: BTreeMap::new(),
            stat_updates: Vec::new(),
            dropout_site: 0,
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    /// Bind a parameter once per pass; fittable parameters become gradient
    /// leaves in training mode.
    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound.get(&id) {
            return *t;
        }
        let requires_grad = self.is_train() && self.store.is_fittable(id);
        let t = self.tape.leaf(self.store.value(id).clone(), requires_grad);
        self.bound.insert(id, t);
        t
    }

    pub fn param_value(&self, id: ParamId) -> &TensorValue {
        self.store.value(id)
    }

    pub fn constant(&mut self, v: TensorValue) -> TensorId {
        self.tape.constant(v)
    }

    /// Tape id a parameter was bound to, if it was used in this pass.
    pub fn binding(&self, id: ParamId) -> Option<TensorId> {
        self.bound.get(&id).copied()
    }

    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, TensorId)> + '_ {
        self.bound.iter().map(|(p, t)| (*p, *t))
    }

    /// Fresh dropout stream for the next dropout site, or None in inference.
    pub fn next_dropout_rng(&mut self) -> Option<ChaCha8Rng> {
        match self.mode {
            Mode::Eval => None,
            Mode::Train { seed, epoch, batch } => {
                let site = self.dropout_site;
                self.dropout_site += 1;
                Some(rng::stream(seed, &[tag::DROPOUT, epoch, batch, site]))
            }
        }
    }

    /// Apply collected running-statistic updates to a parameter store.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, TensorValue)> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// Sample an inverted-dropout mask: entries are 0 with probability p and
/// 1/(1-p) otherwise, so expectation is preserved and inference is identity.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> TensorValue {
    let numel: usize = shape.iter().product();
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        })
        .collect();
    TensorValue::new(shape.to_vec(), data).expect("shape matches")
}
