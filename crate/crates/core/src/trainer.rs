//! Training, evaluation and gradient auditing.
//!
//! Only trainable entries of the parameter store receive optimizer state or
//! updates; batch-norm running statistics are refreshed from train-mode
//! passes; backbone bytes are re-verified at every checkpoint.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tape};
use crate::data::{self, SegSample};
use crate::error::{Error, Result};
use crate::losses::{self, LossKind, LossValue};
use crate::metrics::{self, DatasetEvaluation, MetricReport, Plane};
use crate::model::{ModelConfig, TsSam};
use crate::nn::{apply_buffer_updates, Mode, Scope};
use crate::params::ParamStore;
use crate::tensor::{lit, Float, Tensor};

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cod,
    Sod,
    Shadow,
}

impl Task {
    pub fn loss(self) -> LossKind {
        match self {
            Task::Cod | Task::Sod => LossKind::BceIou,
            Task::Shadow => LossKind::Bbce,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Task::Cod | Task::Sod => 80,
            Task::Shadow => 100,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cod" => Ok(Task::Cod),
            "sod" => Ok(Task::Sod),
            "shadow" => Ok(Task::Shadow),
            _ => Err(Error::Config(format!("unknown task `{s}` (expected cod, sod or shadow)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Defaults to the task's epoch count.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub task: Task,
    pub seed: u64,
    pub grad_check: bool,
    /// Write a checkpoint every this many optimizer steps; 0 disables.
    pub checkpoint_every: usize,
    /// Evaluate on the training set after every epoch.
    pub eval_every_epoch: bool,
    /// Side of the removed low-frequency square relative to the short image side.
    pub hf_mask_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.0008,
            epochs: None,
            batch_size: 4,
            task: Task::Cod,
            seed: 0,
            grad_check: false,
            checkpoint_every: 0,
            eval_every_epoch: false,
            hf_mask_ratio: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.task.default_epochs())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.hf_mask_ratio) {
            return Err(Error::Config(format!("hf_mask_ratio {} outside [0, 1)", self.hf_mask_ratio)));
        }
        Ok(())
    }

    /// Batches per epoch; a trailing batch of one sample is dropped.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size + usize::from(n % self.batch_size >= 2)
    }
}

/// Model and training settings in one JSON document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Config(format!(
            "step {step} outside the schedule of {total_steps} steps"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

/// Adam without weight decay, holding state for trainable entries only.
#[derive(Debug, Clone)]
pub struct Adam<T: Float> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Result<Self> {
        let names = store.trainable_names();
        if names.is_empty() {
            return Err(Error::Config("no trainable parameters".into()));
        }
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for n in names {
            let shape = store.tensor(&n)?.shape().to_vec();
            m.insert(n.clone(), Tensor::zeros(&shape));
            v.insert(n, Tensor::zeros(&shape));
        }
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        })
    }

    pub fn state_keys(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; `grads` must cover exactly the tracked parameters.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let c1 = lit::<T>(1.0 - self.beta1.powi(self.t as i32));
        let c2 = lit::<T>(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (lit::<T>(lr), lit::<T>(self.eps));
        for (name, m) in self.m.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Numeric(format!("missing gradient for `{name}`")))?;
            let v = self.v.get_mut(name).expect("m and v share keys");
            let p = store.tensor_mut(name)?;
            let pd = p.data_mut();
            for (((pi, mi), vi), &gi) in pd.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        loss: LossValue,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        report: Option<MetricReport>,
    },
    /// Schedule end: `lr` at step `T` and the eval-mode loss on the training set.
    Final {
        step: usize,
        lr: f64,
        loss: LossValue,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, f64, &LossValue)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step { step, lr, loss, .. } => Some((*step, *lr, loss)),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Epoch { .. }))
    }

    pub fn final_record(&self) -> Option<&LogRecord> {
        self.records.iter().rev().find(|r| matches!(r, LogRecord::Final { .. }))
    }
}

pub struct TrainOutcome<T: Float> {
    pub store: ParamStore<T>,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
    pub optimizer: Adam<T>,
    pub total_steps: usize,
}

/// Network input for `task`: the image itself, or its high-frequency component.
pub fn model_input(sample: &SegSample, task: Task, hf_mask_ratio: f64) -> Result<Tensor<f32>> {
    match task {
        Task::Cod | Task::Sod => Ok(sample.image.clone()),
        Task::Shadow => data::high_freq_component(&sample.image, hf_mask_ratio),
    }
}

struct Prepared<T: Float> {
    inputs: Vec<Tensor<T>>,
    masks: Vec<Tensor<T>>,
}

fn prepare<T: Float>(model: &TsSam, samples: &[SegSample], task: Task, ratio: f64) -> Result<Prepared<T>> {
    let [h, w] = model.config.image_size;
    let mut inputs = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        if s.hw() != (h, w) {
            return Err(Error::Data(format!(
                "`{}` is {:?}, model expects {h}x{w}; resize first",
                s.id,
                s.hw()
            )));
        }
        inputs.push(model_input(s, task, ratio)?.cast());
        masks.push(s.mask.cast());
    }
    Ok(Prepared { inputs, masks })
}

fn gather<T: Float>(items: &[Tensor<T>], idx: &[usize]) -> Result<Tensor<T>> {
    Tensor::stack(&idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>())
}

fn loss_over<T: Float>(model: &TsSam, store: &ParamStore<T>, prep: &Prepared<T>, kind: LossKind) -> Result<LossValue> {
    let idx: Vec<usize> = (0..prep.inputs.len()).collect();
    let tape = Tape::new();
    let scope = Scope::new(&tape, store, Mode::Eval, false);
    let logits = model.forward(&scope, tape.constant(gather(&prep.inputs, &idx)?))?;
    Ok(losses::compute(kind, logits, &gather(&prep.masks, &idx)?)?.value())
}

/// Runs Adam with cosine decay over `samples`; checkpoints go to `ckpt_dir` when given.
pub fn train<T: Float>(
    model: &TsSam,
    mut store: ParamStore<T>,
    samples: &[SegSample],
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model.check_store(&store)?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let steps_per_epoch = cfg.steps_per_epoch(samples.len());
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} sample(s) cannot form a batch of at least 2",
            samples.len()
        )));
    }
    let epochs = cfg.epochs();
    let total = epochs * steps_per_epoch;
    let kind = cfg.task.loss();
    let prep = prepare::<T>(model, samples, cfg.task, cfg.hf_mask_ratio)?;
    let mut optimizer = Adam::new(&store)?;
    let frozen_digest = store.checksum_prefix(BACKBONE_PREFIX);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();

    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for b in 0..steps_per_epoch {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let lr = cosine_lr(step, total, cfg.lr0)?;
            let images = gather(&prep.inputs, idx)?;
            let masks = gather(&prep.masks, idx)?;

            let (value, grads, updates) = {
                let tape = Tape::new();
                let scope = Scope::new(&tape, &store, Mode::Train, true);
                let logits = match model.forward(&scope, tape.constant(images)) {
                    Err(Error::Numeric(msg)) => return Err(abort(&store, ckpt_dir, step, &msg)),
                    other => other?,
                };
                let terms = losses::compute(kind, logits, &masks)?;
                let value = terms.value();
                if !value.total.is_finite() {
                    return Err(abort(&store, ckpt_dir, step, "loss"));
                }
                let g = tape.backward(terms.total)?;
                let mut grads = IndexMap::new();
                for (name, var) in scope.bound_params() {
                    if var.requires_grad() {
                        let t = g.get_or_zeros(var);
                        if !t.is_finite() {
                            return Err(abort(&store, ckpt_dir, step, &format!("gradient of `{name}`")));
                        }
                        grads.insert(name, t);
                    }
                }
                (value, grads, scope.take_buffer_updates())
            };
            optimizer.step(&mut store, &grads, lr)?;
            apply_buffer_updates(&mut store, updates)?;

            epoch_loss += value.total;
            log.records.push(LogRecord::Step {
                step,
                epoch,
                lr,
                loss: value,
            });
            step += 1;

            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                if let Some(dir) = ckpt_dir {
                    checkpoints.push(write_checkpoint(&store, dir, step, &frozen_digest)?);
                }
            }
        }
        let report = if cfg.eval_every_epoch {
            Some(evaluate(model, &store, samples, cfg.task, cfg.hf_mask_ratio)?.report)
        } else {
            None
        };
        log.records.push(LogRecord::Epoch {
            epoch,
            mean_loss: epoch_loss / steps_per_epoch as f64,
            report,
        });
    }
    if total > 0 {
        log.records.push(LogRecord::Final {
            step: total,
            lr: cosine_lr(total, total, cfg.lr0)?,
            loss: loss_over(model, &store, &prep, kind)?,
        });
    }
    if store.checksum_prefix(BACKBONE_PREFIX) != frozen_digest {
        return Err(Error::Numeric("frozen backbone parameters changed during training".into()));
    }
    Ok(TrainOutcome {
        store,
        log,
        checkpoints,
        optimizer,
        total_steps: total,
    })
}

fn write_checkpoint<T: Float>(store: &ParamStore<T>, dir: &Path, step: usize, frozen_digest: &str) -> Result<PathBuf> {
    if store.checksum_prefix(BACKBONE_PREFIX) != frozen_digest {
        return Err(Error::Numeric(format!(
            "frozen backbone parameters changed before step {step}"
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("step_{step:06}.ckpt"));
    store.save_checkpoint(&path)?;
    Ok(path)
}

/// Saves the parameters from before the failing step and builds the error.
fn abort<T: Float>(store: &ParamStore<T>, dir: Option<&Path>, step: usize, what: &str) -> Error {
    let kept = dir.map(|d| {
        let path = d.join("last_good.ckpt");
        std::fs::create_dir_all(d)
            .map_err(|e| Error::io(d, e))
            .and_then(|_| store.save_checkpoint(&path))
            .map(|_| path)
    });
    match kept {
        Some(Ok(p)) => Error::Numeric(format!(
            "non-finite {what} at step {step}; last good parameters kept in {}",
            p.display()
        )),
        Some(Err(e)) => Error::Numeric(format!("non-finite {what} at step {step}; saving last good parameters failed: {e}")),
        None => Error::Numeric(format!("non-finite {what} at step {step}")),
    }
}

/// Eval-mode sigmoid predictions, one `(1, 1, H, W)` map per sample.
pub fn predict<T: Float>(
    model: &TsSam,
    store: &ParamStore<T>,
    samples: &[SegSample],
    task: Task,
    hf_mask_ratio: f64,
) -> Result<Vec<Tensor<T>>> {
    let prep = prepare::<T>(model, samples, task, hf_mask_ratio)?;
    prep.inputs
        .iter()
        .map(|x| {
            let s = x.shape();
            let logits = model.predict(store, &x.reshape(&[1, s[0], s[1], s[2]])?)?;
            Ok(logits.map(sigmoid))
        })
        .collect()
}

pub fn evaluate<T: Float>(
    model: &TsSam,
    store: &ParamStore<T>,
    samples: &[SegSample],
    task: Task,
    hf_mask_ratio: f64,
) -> Result<DatasetEvaluation> {
    let preds = predict(model, store, samples, task, hf_mask_ratio)?;
    let items = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| Ok((s.id.clone(), Plane::from_tensor(&p)?, Plane::from_tensor(&s.mask)?)))
        .collect::<Result<Vec<_>>>()?;
    metrics::evaluate_dataset(&items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Absolute differences below this always pass.
    pub abs_floor: f64,
    /// Elements probed per parameter tensor.
    pub samples_per_group: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-8,
            samples_per_group: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    /// Probes skipped because the loss is not smooth within `h` of the point.
    pub nonsmooth: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub non_finite: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, abs_floor / tolerance)`, so that `error <= tolerance`
/// holds exactly when `|a - n| <= max(tolerance * max(|a|, |n|), abs_floor)`.
pub fn relative_error(analytic: f64, numeric: f64, tolerance: f64, abs_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(abs_floor / tolerance);
    (analytic - numeric).abs() / scale
}

/// Central-difference audit of every trainable tensor in double precision,
/// with batch norm in eval mode.
pub fn grad_check(
    model: &TsSam,
    store: &ParamStore<f64>,
    images: &Tensor<f64>,
    masks: &Tensor<f64>,
    loss: LossKind,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    model.check_store(store)?;
    let loss_at = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let scope = Scope::new(&tape, s, Mode::Eval, false);
        let logits = model.forward(&scope, tape.constant(images.clone()))?;
        Ok(losses::compute(loss, logits, masks)?.total.value().item())
    };

    let analytic: IndexMap<String, Tensor<f64>> = {
        let tape = Tape::new();
        let scope = Scope::new(&tape, store, Mode::Eval, true);
        let logits = model.forward(&scope, tape.constant(images.clone()))?;
        let terms = losses::compute(loss, logits, masks)?;
        let g = tape.backward(terms.total)?;
        scope
            .bound_params()
            .into_iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(n, v)| (n, g.get_or_zeros(v)))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = store.clone();
    let mut central = |name: &str, i: usize, h: f64| -> Result<f64> {
        let orig = store.tensor(name)?.data()[i];
        probe.tensor_mut(name)?.data_mut()[i] = orig + h;
        let up = loss_at(&probe)?;
        probe.tensor_mut(name)?.data_mut()[i] = orig - h;
        let down = loss_at(&probe)?;
        probe.tensor_mut(name)?.data_mut()[i] = orig;
        Ok((up - down) / (2.0 * h))
    };
    let mut groups = Vec::new();
    for name in store.trainable_names() {
        let grad = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.tensor(&name).expect("listed").shape()));
        let numel = grad.numel();
        let mut order: Vec<usize> = (0..numel).collect();
        order.shuffle(&mut rng);
        let mut checked = 0;
        let mut nonsmooth = 0;
        let mut max_rel: f64 = 0.0;
        let mut non_finite = !grad.is_finite();
        for &i in &order {
            if checked == cfg.samples_per_group {
                break;
            }
            let numeric = central(&name, i, cfg.h)?;
            let a = grad.data()[i];
            if !(a.is_finite() && numeric.is_finite()) {
                non_finite = true;
                checked += 1;
                continue;
            }
            // A ReLU or max-pool switch inside [-h, h] makes the two step sizes disagree.
            let half = central(&name, i, cfg.h / 2.0)?;
            if relative_error(numeric, half, cfg.tolerance, cfg.abs_floor) > cfg.tolerance {
                nonsmooth += 1;
                continue;
            }
            max_rel = max_rel.max(relative_error(a, numeric, cfg.tolerance, cfg.abs_floor));
            checked += 1;
        }
        let max_abs_analytic = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        groups.push(GroupCheck {
            pass: !non_finite && checked > 0 && max_rel <= cfg.tolerance,
            name,
            numel,
            checked,
            nonsmooth,
            max_rel_error: max_rel,
            max_abs_analytic,
            non_finite,
        });
    }
    Ok(GradCheckReport {
        loss,
        tolerance: cfg.tolerance,
        pass: groups.iter().all(|g| g.pass),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Difficulty};

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.0008).unwrap(), 0.0008);
        assert!(cosine_lr(100, 100, 0.0008).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 0.0008).unwrap() - 0.0004).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 0.0008).is_err());
        assert!(cosine_lr(0, 0, 0.0008).is_err());
    }

    #[test]
    fn steps_per_epoch_drops_single_remainder() {
        let cfg = TrainConfig {
            batch_size: 4,
            ..Default::default()
        };
        assert_eq!(cfg.steps_per_epoch(8), 2);
        assert_eq!(cfg.steps_per_epoch(9), 2);
        assert_eq!(cfg.steps_per_epoch(10), 3);
        assert_eq!(cfg.steps_per_epoch(1), 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr0: 0.0, ..Default::default() }.validate().is_err());
        let run = RunConfig::default();
        assert_eq!(RunConfig::from_json(&run.to_json()).unwrap(), run);
        assert!(RunConfig::from_json(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (model, store) = TsSam::build::<f32>(ModelConfig::default()).unwrap();
        let data = generate_synthetic(4, (64, 64), 0, Difficulty::Low).unwrap();
        let cfg = TrainConfig {
            epochs: Some(0),
            ..Default::default()
        };
        let out = train(&model, store.clone(), &data, &cfg, None).unwrap();
        assert!(out.store.bit_identical(&store));
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn short_run_respects_freeze_and_logs_schedule() {
        let (model, store) = TsSam::build::<f32>(ModelConfig::default()).unwrap();
        let data = generate_synthetic(4, (64, 64), 0, Difficulty::Low).unwrap();
        let cfg = TrainConfig {
            epochs: Some(2),
            batch_size: 2,
            ..Default::default()
        };
        let out = train(&model, store.clone(), &data, &cfg, None).unwrap();
        assert_eq!(out.total_steps, 4);
        assert_eq!(
            out.store.checksum_prefix(BACKBONE_PREFIX),
            store.checksum_prefix(BACKBONE_PREFIX)
        );
        for prefix in ["csa.", "mrm.", "ffd."] {
            assert_ne!(out.store.checksum_prefix(prefix), store.checksum_prefix(prefix), "{prefix}");
        }
        for (step, lr, _) in out.log.steps() {
            assert_eq!(lr, cosine_lr(step, 4, cfg.lr0).unwrap());
        }
        assert!(out.optimizer.state_keys().all(|k| !k.starts_with(BACKBONE_PREFIX)));
        match out.log.final_record().unwrap() {
            LogRecord::Final { step, lr, .. } => {
                assert_eq!(*step, 4);
                assert_eq!(*lr, cosine_lr(4, 4, cfg.lr0).unwrap());
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn untrained_zero_head_predicts_half() {
        let (model, mut store) = TsSam::build::<f32>(ModelConfig::default()).unwrap();
        store.set("ffd.head.weight", Tensor::zeros(&[1, 16, 1, 1])).unwrap();
        store.set("ffd.head.bias", Tensor::zeros(&[1])).unwrap();
        let data = generate_synthetic(3, (64, 64), 1, Difficulty::Low).unwrap();
        let eval = evaluate(&model, &store, &data, Task::Cod, 0.25).unwrap();
        assert_eq!(eval.report.mae, 0.5);
        let again = evaluate(&model, &store, &data, Task::Cod, 0.25).unwrap();
        assert_eq!(eval.report, again.report);
    }
}
