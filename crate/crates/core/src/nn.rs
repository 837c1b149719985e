//! Layer blocks shared by the side-network modules, and the forward scope
//! that binds a [`ParamStore`] to a [`Tape`].

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{EntryKind, ParamStore};
use crate::tensor::{lit, Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics, running-statistic updates recorded.
    Train,
    /// Running statistics.
    Eval,
}

/// Binds parameters from a store onto a tape for one forward pass.
///
/// Parameters are materialized lazily and cached by name, so a parameter
/// used twice maps to a single tape leaf. Trainable parameters become
/// gradient-tracking leaves when `track_grads` is set; frozen ones never do.
pub struct Scope<'s, 't, T: Float> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    track_grads: bool,
    vars: RefCell<IndexMap<String, Var<'t, T>>>,
    buffer_updates: RefCell<Vec<(String, Tensor<T>)>>,
}

impl<'s, 't, T: Float> Scope<'s, 't, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape,
            store,
            mode,
            track_grads,
            vars: RefCell::new(IndexMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let entry = self.store.entry(name)?;
        let var = self
            .tape
            .leaf(entry.tensor.clone(), self.track_grads && entry.is_trainable());
        self.vars.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor<T>> {
        self.store.tensor(name)
    }

    /// Parameters materialized so far, in first-use order.
    pub fn bound_params(&self) -> Vec<(String, Var<'t, T>)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    fn record_running_stats(&self, prefix: &str, stats: &kernels::BatchStats<T>) -> Result<()> {
        let m: T = lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var_unbiased)] {
            let name = format!("{prefix}.{suffix}");
            let old = self.buffer(&name)?;
            let new = Tensor::from_vec(
                old.shape(),
                old.data()
                    .iter()
                    .zip(batch)
                    .map(|(&o, &b)| keep * o + m * b)
                    .collect(),
            )?;
            self.buffer_updates.borrow_mut().push((name, new));
        }
        Ok(())
    }
}

/// Writes running-statistic updates collected by a train-mode forward pass.
pub fn apply_buffer_updates<T: Float>(store: &mut ParamStore<T>, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
    for (name, t) in updates {
        store.set(&name, t)?;
    }
    Ok(())
}

/// Seeded parameter initialization helpers.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal<T: Float>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let normal = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(self.rng);
            if v.abs() <= 2.0 * std {
                break lit(v);
            }
        })
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv and linear layers.
    pub fn fan_in_uniform<T: Float>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| lit(self.rng.random_range(-bound..=bound)))
    }
}

fn add_batch_norm<T: Float>(store: &mut ParamStore<T>, prefix: &str, c: usize, frozen: bool) -> Result<()> {
    store.insert(&format!("{prefix}.weight"), Tensor::ones(&[c]), frozen, EntryKind::Param)?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[c]), frozen, EntryKind::Param)?;
    store.insert(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]), frozen, EntryKind::Buffer)?;
    store.insert(&format!("{prefix}.running_var"), Tensor::ones(&[c]), frozen, EntryKind::Buffer)?;
    Ok(())
}

pub(crate) fn batch_norm<'t, T: Float>(scope: &Scope<'_, 't, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let gamma = scope.param(&format!("{prefix}.weight"))?;
    let beta = scope.param(&format!("{prefix}.bias"))?;
    match scope.mode() {
        Mode::Train => {
            let (y, stats) = kernels::batch_norm_train(x, gamma, beta, BN_EPS).map_err(|e| e.context(prefix))?;
            scope.record_running_stats(prefix, &stats)?;
            Ok(y)
        }
        Mode::Eval => kernels::batch_norm_eval(
            x,
            gamma,
            beta,
            scope.buffer(&format!("{prefix}.running_mean"))?,
            scope.buffer(&format!("{prefix}.running_var"))?,
            BN_EPS,
        )
        .map_err(|e| e.context(prefix)),
    }
}

/// Convolution, batch normalization and ReLU, stored under one name prefix:
/// `{prefix}.conv.{weight,bias}` and `{prefix}.bn.{weight,bias,running_mean,running_var}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlock {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

/// The 1x1 flavour used by the side adapter and the projections.
pub type Conv1x1Block = ConvBlock;

impl ConvBlock {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernels keep spatial size with symmetric padding");
        Self {
            prefix: prefix.into(),
            c_in,
            c_out,
            kernel,
        }
    }

    pub fn conv1x1(prefix: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self::new(prefix, c_in, c_out, 1)
    }

    pub fn conv3x3(prefix: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self::new(prefix, c_in, c_out, 3)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.conv.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.conv.bias", self.prefix)
    }

    pub fn bn_prefix(&self) -> String {
        format!("{}.bn", self.prefix)
    }

    /// Learned scalars: conv weight + conv bias + batch-norm scale and shift.
    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out + 2 * self.c_out
    }

    pub fn register<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init<'_>, frozen: bool) -> Result<()> {
        let k = self.kernel;
        let fan_in = self.c_in * k * k;
        store.insert(
            &self.weight_name(),
            init.fan_in_uniform(&[self.c_out, self.c_in, k, k], fan_in),
            frozen,
            EntryKind::Param,
        )?;
        store.insert(&self.bias_name(), init.fan_in_uniform(&[self.c_out], fan_in), frozen, EntryKind::Param)?;
        add_batch_norm(store, &self.bn_prefix(), self.c_out, frozen)
    }

    pub fn forward<'t, T: Float>(&self, scope: &Scope<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (b, c, _, _) = x.dims4()?;
        if scope.mode() == Mode::Train && b < 2 {
            return Err(Error::Validation(format!(
                "{}: train-mode batch statistics need a batch of at least 2, got {b}",
                self.prefix
            )));
        }
        if c != self.c_in {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {c}",
                self.prefix, self.c_in
            )));
        }
        let w = scope.param(&self.weight_name())?;
        let b = scope.param(&self.bias_name())?;
        let y = if self.kernel == 1 {
            kernels::pointwise(x, w, Some(b))
        } else {
            kernels::conv2d(x, w, Some(b), 1, self.kernel / 2)
        }
        .map_err(|e| e.context(&self.prefix))?;
        let y = batch_norm(scope, &self.bn_prefix(), y)?;
        Ok(y.relu())
    }
}

/// Plain (bias-carrying) 1x1 convolution without normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear1x1 {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear1x1 {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self {
            prefix: prefix.into(),
            c_in,
            c_out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in + self.c_out
    }

    pub fn register<T: Float>(&self, store: &mut ParamStore<T>, init: &mut Init<'_>, frozen: bool) -> Result<()> {
        store.insert(
            &format!("{}.weight", self.prefix),
            init.fan_in_uniform(&[self.c_out, self.c_in, 1, 1], self.c_in),
            frozen,
            EntryKind::Param,
        )?;
        store.insert(
            &format!("{}.bias", self.prefix),
            init.fan_in_uniform(&[self.c_out], self.c_in),
            frozen,
            EntryKind::Param,
        )
    }

    pub fn forward<'t, T: Float>(&self, scope: &Scope<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = scope.param(&format!("{}.weight", self.prefix))?;
        let b = scope.param(&format!("{}.bias", self.prefix))?;
        kernels::pointwise(x, w, Some(b)).map_err(|e| e.context(&self.prefix))
    }
}
