//! Training loop: Adam/SGD with decay schedules, elastic-net and weight
//! decay regularization, softmax cross-entropy, and the constant
//! iteration budget that makes subset runs comparable to full-data runs.
//!
//! The budget rule: a run is `epochs * ceil(full_size / batch)`
//! iterations long no matter how small the actual training subset is.
//! Subsets therefore loop more epochs, stopping mid-epoch once the
//! budget is spent, and the learning-rate schedule advances by nominal
//! epoch position (iterations divided by the full-data epoch length) so
//! every run traverses the same decay trajectory.
//!
//! All randomness (shuffling, augmentation draws, dropout masks) splits
//! deterministically from the config seed, so identical invocations
//! produce byte-identical metrics.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{augment_crop_flip, augment_random_rotation, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, Phase};
use crate::params::{ParamId, ParamSet, Regularization};
use crate::rng::{rng_from_seed, split_seed_indexed};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DecaySpec {
    #[default]
    None,
    /// `lr = lr0 * factor^nominal_epochs_elapsed` (continuous).
    Exponential { factor: f64 },
    /// `lr = lr0 * factor^floor(nominal_epochs_elapsed / every_epochs)`.
    Step { factor: f64, every_epochs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Augment {
    #[default]
    None,
    RandomRotation,
    RandomCropFlip,
}

fn default_elastic_net() -> f64 {
    1e-7
}

fn default_reg_constant() -> f64 {
    1.0
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub decay: DecaySpec,
    pub batch_size: usize,
    /// Nominal epochs over the full dataset; fixes the iteration budget.
    pub epochs: usize,
    /// Penalty factor on elastic-net parameters (steerable coefficients).
    #[serde(default = "default_elastic_net")]
    pub elastic_net_factor: f64,
    /// Generic decay factor on L2-tagged parameters.
    #[serde(default)]
    pub weight_decay: f64,
    /// Global multiplier on both penalties.
    #[serde(default = "default_reg_constant")]
    pub regularization_constant: f64,
    #[serde(default)]
    pub augment: Augment,
    /// SGD momentum; ignored by Adam.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        match self.decay {
            DecaySpec::Exponential { factor } | DecaySpec::Step { factor, .. }
                if !(factor > 0.0 && factor <= 1.0) =>
            {
                return Err(Error::config(format!(
                    "decay factor must lie in (0, 1], got {factor}"
                )));
            }
            DecaySpec::Step { every_epochs: 0, .. } => {
                return Err(Error::config("decay every_epochs must be positive"));
            }
            _ => {}
        }
        if self.elastic_net_factor < 0.0
            || self.weight_decay < 0.0
            || self.regularization_constant < 0.0
        {
            return Err(Error::config("regularization factors must be non-negative"));
        }
        Ok(())
    }
}

/// Iteration budget arithmetic: `(actual_epochs, target_iterations)`.
///
/// `target = epochs * ceil(full / batch)` iterations; a subset of `n`
/// samples runs `ceil(target / ceil(n / batch))` epochs, the last one
/// stopping mid-epoch once the target is reached.
pub fn iteration_budget(
    n: usize,
    batch: usize,
    epochs: usize,
    full: usize,
) -> Result<(usize, usize)> {
    if n == 0 || batch == 0 {
        return Err(Error::contract(
            "iteration budget needs a non-empty dataset and positive batch size",
        ));
    }
    let per_epoch_full = full.max(n).div_ceil(batch);
    let target = epochs * per_epoch_full;
    let per_epoch_actual = n.div_ceil(batch);
    let actual_epochs = target.div_ceil(per_epoch_actual.max(1));
    Ok((actual_epochs, target))
}

/// Learning rate at a given iteration under the decay schedule, driven
/// by nominal epoch position so subsets share the trajectory.
pub fn learning_rate_at(
    config: &TrainConfig,
    iteration: usize,
    iters_per_nominal_epoch: usize,
) -> f64 {
    let nominal = iteration as f64 / iters_per_nominal_epoch.max(1) as f64;
    match config.decay {
        DecaySpec::None => config.learning_rate,
        DecaySpec::Exponential { factor } => config.learning_rate * factor.powf(nominal),
        DecaySpec::Step {
            factor,
            every_epochs,
        } => config.learning_rate * factor.powi((nominal / every_epochs as f64).floor() as i32),
    }
}

// ---------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    momentum: f64,
    step: u64,
    slots: HashMap<ParamId, Slot<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            step: 0,
            slots: HashMap::new(),
        }
    }

    /// One update over every parameter that has a gradient.
    pub fn apply(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &HashMap<ParamId, Tensor<T>>,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        for (&id, grad) in grads {
            let slot = self.slots.entry(id).or_insert_with(|| Slot {
                m: vec![T::zero(); grad.numel()],
                v: vec![T::zero(); grad.numel()],
            });
            let w = params.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let b1 = T::fromf(ADAM_BETA1);
                    let b2 = T::fromf(ADAM_BETA2);
                    let corr1 = 1.0 - ADAM_BETA1.powi(t);
                    let corr2 = 1.0 - ADAM_BETA2.powi(t);
                    for i in 0..w.len() {
                        let g = grad.data()[i];
                        slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * g;
                        slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * g * g;
                        let mhat = slot.m[i].tof() / corr1;
                        let vhat = slot.v[i].tof() / corr2;
                        w[i] = w[i] - T::fromf(lr * mhat / (vhat.sqrt() + ADAM_EPS));
                    }
                }
                OptimizerKind::Sgd => {
                    let mu = T::fromf(self.momentum);
                    for i in 0..w.len() {
                        slot.m[i] = mu * slot.m[i] + grad.data()[i];
                        w[i] = w[i] - T::fromf(lr) * slot.m[i];
                    }
                }
            }
        }
    }
}

/// Add regularization gradients in place and return the penalty value:
/// elastic net `c*f*(0.5|w| + 0.5 w^2)` on tagged steerable
/// coefficients, plain `c*d*0.5 w^2` decay on L2-tagged weights.
pub fn apply_regularization<T: Scalar>(
    params: &ParamSet<T>,
    ids: &[ParamId],
    config: &TrainConfig,
    grads: &mut HashMap<ParamId, Tensor<T>>,
) -> f64 {
    let c = config.regularization_constant;
    let mut penalty = 0.0f64;
    for &id in ids {
        let entry = params.entry(id);
        let (factor, elastic) = match entry.reg {
            Regularization::ElasticNet => (c * config.elastic_net_factor, true),
            Regularization::L2 => (c * config.weight_decay, false),
            Regularization::None => continue,
        };
        if factor == 0.0 {
            continue;
        }
        let grad = grads
            .entry(id)
            .or_insert_with(|| Tensor::zeros(entry.value.shape().to_vec()));
        for (g, &w) in grad.data_mut().iter_mut().zip(entry.value.data()) {
            let wf = w.tof();
            if elastic {
                penalty += factor * (0.5 * wf.abs() + 0.5 * wf * wf);
                *g += T::fromf(factor * (0.5 * wf.signum() + wf));
            } else {
                penalty += factor * 0.5 * wf * wf;
                *g += T::fromf(factor * wf);
            }
        }
    }
    penalty
}

// ---------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub error: f64,
}

/// Render metric rows as the canonical CSV (`epoch,split,loss,error`).
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("epoch,split,loss,error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.epoch, r.split, r.loss, r.error
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<MetricRow>,
    pub completed_epochs: usize,
    pub iterations: usize,
    pub wall_seconds: f64,
    /// Set when the loss went non-finite; parameters hold the last
    /// finite state (the failing update is never applied).
    pub diverged: Option<String>,
    /// Non-fatal flag: training ended without improving the loss.
    pub stalled: bool,
}

/// Mean and population standard deviation of per-run test errors.
pub fn mte(errors: &[f64]) -> (f64, f64) {
    if errors.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / errors.len() as f64;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy loss and classification error on a dataset, in
/// eval mode (no dropout, no augmentation).
pub fn evaluate<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let n = data.len();
    let classes = model.classes();
    let mut loss_sum = 0.0f64;
    let mut wrong = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let batch = data.batch(&indices)?;
        let labels = &data.labels[start..end];
        let mut g = Graph::new();
        let logits = model.record_logits(&mut g, params, batch, Phase::Eval)?;
        let loss = g.cross_entropy_mean(logits, labels)?;
        loss_sum += g.value(loss).data()[0].tof() * (end - start) as f64;
        let lv = g.value(logits);
        for (i, &label) in labels.iter().enumerate() {
            if argmax(&lv.data()[i * classes..(i + 1) * classes]) != label {
                wrong += 1;
            }
        }
        start = end;
    }
    Ok((loss_sum / n as f64, wrong as f64 / n as f64))
}

// ---------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------

/// Train `model` in place. `full_size` anchors the iteration budget;
/// pass the untruncated dataset size when `train_data` is a subset so
/// total iterations stay constant across subset regimes.
pub fn train<T: Scalar>(
    model: &Model,
    params: &mut ParamSet<T>,
    train_data: &Dataset<T>,
    test_data: Option<&Dataset<T>>,
    config: &TrainConfig,
    full_size: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_data.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    let started = Instant::now();
    let n = train_data.len();
    let full = full_size.unwrap_or(n);
    let (epochs, target_iters) = iteration_budget(n, config.batch_size, config.epochs, full)?;
    let per_nominal = full.max(n).div_ceil(config.batch_size);
    let mut optimizer = Optimizer::new(config.optimizer, config.momentum);
    let mut history = Vec::new();
    let mut iteration = 0usize;
    let mut diverged = None;
    let mut first_train_loss = None;
    let mut last_train_loss = f64::INFINITY;

    'outer: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_from_seed(split_seed_indexed(config.seed, "shuffle", epoch as u64));
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            if iteration >= target_iters {
                break 'outer;
            }
            let mut batch = train_data.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_data.labels[i]).collect();
            batch = match config.augment {
                Augment::None => batch,
                Augment::RandomRotation => augment_random_rotation(
                    &batch,
                    split_seed_indexed(config.seed, "augment", iteration as u64),
                )?,
                Augment::RandomCropFlip => augment_crop_flip(
                    &batch,
                    2,
                    split_seed_indexed(config.seed, "augment", iteration as u64),
                )?,
            };
            let mut g = Graph::new();
            let logits = model.record_logits(
                &mut g,
                params,
                batch,
                Phase::Train {
                    dropout_seed: split_seed_indexed(config.seed, "dropout", iteration as u64),
                },
            )?;
            let loss = g.cross_entropy_mean(logits, &labels)?;
            let loss_value = g.value(loss).data()[0].tof();
            if !loss_value.is_finite() {
                diverged = Some(format!(
                    "loss became {loss_value} at epoch {} iteration {iteration}",
                    epoch + 1
                ));
                break 'outer;
            }
            let grads = g.backward(loss)?;
            let mut param_grads = g.param_gradients(&grads);
            apply_regularization(params, model.param_ids(), config, &mut param_grads);
            let lr = learning_rate_at(config, iteration, per_nominal);
            optimizer.apply(params, &param_grads, lr);
            iteration += 1;
        }
        let (train_loss, train_err) = evaluate(model, params, train_data, config.batch_size)?;
        history.push(MetricRow {
            epoch: epoch + 1,
            split: Split::Train,
            loss: train_loss,
            error: train_err,
        });
        if let Some(test) = test_data {
            let (test_loss, test_err) = evaluate(model, params, test, config.batch_size)?;
            history.push(MetricRow {
                epoch: epoch + 1,
                split: Split::Test,
                loss: test_loss,
                error: test_err,
            });
        }
        first_train_loss.get_or_insert(train_loss);
        last_train_loss = train_loss;
    }

    let stalled = diverged.is_none()
        && config.learning_rate > 0.0
        && matches!(first_train_loss, Some(first) if last_train_loss >= first);
    Ok(TrainOutcome {
        completed_epochs: history
            .iter()
            .map(|r| r.epoch)
            .max()
            .unwrap_or(0),
        iterations: iteration,
        wall_seconds: started.elapsed().as_secs_f64(),
        history,
        diverged,
        stalled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes;
    use crate::model::{build_model, Backbone, ConvSpec, HeadSpec, ModelConfig};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            image_size: 12,
            classes: 3,
            n_alpha: 4,
            n_f: 4,
            kernel_size: 3,
            conv: vec![
                ConvSpec {
                    channels: 4,
                    pool: true,
                },
                ConvSpec {
                    channels: 6,
                    pool: false,
                },
            ],
            backbone: Backbone::Equivariant,
            channel_rescale: false,
            head: HeadSpec::Monomial {
                distances: vec![vec![0.0], vec![0.0, 1.0]],
                per_channel: true,
                exponents: None,
            },
            dense: vec![16],
            dropout: 0.0,
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 5e-3,
            decay: DecaySpec::None,
            batch_size: 10,
            epochs: 2,
            elastic_net_factor: 1e-7,
            weight_decay: 0.0,
            regularization_constant: 1.0,
            augment: Augment::None,
            momentum: 0.9,
            seed: 17,
        }
    }

    #[test]
    fn iteration_budget_is_constant_across_subset_sizes() {
        let (e_full, t_full) = iteration_budget(1000, 32, 10, 1000).unwrap();
        assert_eq!((e_full, t_full), (10, 320));
        let (e_half, t_half) = iteration_budget(500, 32, 10, 1000).unwrap();
        assert_eq!(t_half, 320);
        assert_eq!(e_half, 20);
        let (e_odd, t_odd) = iteration_budget(700, 32, 10, 1000).unwrap();
        assert_eq!(t_odd, 320);
        assert_eq!(e_odd, 15); // 15 * 22 = 330 scheduled, stops at 320
    }

    #[test]
    fn decay_schedules_follow_nominal_epoch_position() {
        let mut config = tiny_train_config();
        config.learning_rate = 1.0;
        config.decay = DecaySpec::Exponential { factor: 0.5 };
        // 10 iterations per nominal epoch: after 20 iterations the rate
        // has halved twice.
        assert!((learning_rate_at(&config, 20, 10) - 0.25).abs() < 1e-12);
        config.decay = DecaySpec::Step {
            factor: 0.1,
            every_epochs: 2,
        };
        assert!((learning_rate_at(&config, 19, 10) - 1.0).abs() < 1e-12);
        assert!((learning_rate_at(&config, 20, 10) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = synth_shapes::<f64>(30, 12, 3, 5).unwrap();
        let mut params = ParamSet::<f64>::new();
        let model = build_model(&tiny_model_config(), &mut params, 1).unwrap();
        let before: Vec<Vec<f64>> = model
            .param_ids()
            .iter()
            .map(|&id| params.get(id).data().to_vec())
            .collect();
        let mut config = tiny_train_config();
        config.learning_rate = 0.0;
        config.epochs = 1;
        let outcome = train(&model, &mut params, &data, None, &config, None).unwrap();
        for (&id, old) in model.param_ids().iter().zip(&before) {
            assert_eq!(params.get(id).data(), old.as_slice());
        }
        let losses: Vec<f64> = outcome.history.iter().map(|r| r.loss).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn identical_runs_emit_byte_identical_metrics() {
        let data = synth_shapes::<f32>(30, 12, 3, 5).unwrap();
        let test = synth_shapes::<f32>(15, 12, 3, 6).unwrap();
        let config = tiny_train_config();
        let run = || {
            let mut params = ParamSet::<f32>::new();
            let model = build_model(&tiny_model_config(), &mut params, 1).unwrap();
            let outcome =
                train(&model, &mut params, &data, Some(&test), &config, None).unwrap();
            metrics_csv(&outcome.history)
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.starts_with("epoch,split,loss,error\n"));
    }

    #[test]
    fn training_reduces_the_loss_on_a_small_set() {
        let data = synth_shapes::<f32>(60, 12, 3, 11).unwrap();
        let mut params = ParamSet::<f32>::new();
        let model = build_model(&tiny_model_config(), &mut params, 2).unwrap();
        let mut config = tiny_train_config();
        config.epochs = 6;
        let outcome = train(&model, &mut params, &data, None, &config, None).unwrap();
        assert!(outcome.diverged.is_none());
        let first = outcome.history.first().unwrap().loss;
        let last = outcome.history.last().unwrap().loss;
        assert!(last < first, "loss did not improve: {first} -> {last}");
        assert!(!outcome.stalled);
    }

    #[test]
    fn subset_training_respects_the_iteration_budget() {
        let data = synth_shapes::<f32>(24, 12, 3, 7).unwrap();
        let mut params = ParamSet::<f32>::new();
        let model = build_model(&tiny_model_config(), &mut params, 3).unwrap();
        let mut config = tiny_train_config();
        config.epochs = 2;
        config.batch_size = 8;
        // Full size 48: budget = 2 * 6 = 12 iterations; the 24-sample
        // subset has 3 per epoch, so 4 epochs run.
        let outcome = train(&model, &mut params, &data, None, &config, Some(48)).unwrap();
        assert_eq!(outcome.iterations, 12);
        assert_eq!(outcome.completed_epochs, 4);
    }

    #[test]
    fn regularization_penalizes_tagged_parameters_only() {
        let mut params = ParamSet::<f64>::new();
        let en = params
            .add("en", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), Regularization::ElasticNet)
            .unwrap();
        let l2 = params
            .add("l2", Tensor::new(vec![1], vec![3.0]).unwrap(), Regularization::L2)
            .unwrap();
        let free = params
            .add("free", Tensor::new(vec![1], vec![5.0]).unwrap(), Regularization::None)
            .unwrap();
        let mut config = tiny_train_config();
        config.elastic_net_factor = 0.1;
        config.weight_decay = 0.01;
        config.regularization_constant = 2.0;
        let mut grads = HashMap::new();
        let penalty =
            apply_regularization(&params, &[en, l2, free], &config, &mut grads);
        // Elastic net: 0.2 * (0.5*1 + 0.5*1) + 0.2 * (0.5*2 + 0.5*4) = 0.2 + 0.6
        // L2: 0.02 * 0.5 * 9 = 0.09
        assert!((penalty - (0.8 + 0.09)).abs() < 1e-12);
        let gen = grads.get(&en).unwrap();
        assert!((gen.data()[0] - 0.2 * (0.5 + 1.0)).abs() < 1e-12);
        assert!((gen.data()[1] - 0.2 * (-0.5 - 2.0)).abs() < 1e-12);
        assert!((grads.get(&l2).unwrap().data()[0] - 0.02 * 3.0).abs() < 1e-12);
        assert!(!grads.contains_key(&free));
    }

    #[test]
    fn mte_matches_hand_computed_mean_and_spread() {
        let (mean, std) = mte(&[0.10, 0.20, 0.30]);
        assert!((mean - 0.20).abs() < 1e-12);
        // Population deviation: sqrt(((0.1)^2 + 0 + (0.1)^2) / 3).
        assert!((std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
        let (m1, s1) = mte(&[0.4]);
        assert_eq!((m1, s1), (0.4, 0.0));
    }

    #[test]
    fn constant_predictor_error_matches_class_imbalance() {
        // A model whose logits are constant picks one class for every
        // sample; on a balanced set the error is 1 - 1/classes.
        let data = synth_shapes::<f64>(30, 12, 3, 9).unwrap();
        let mut params = ParamSet::<f64>::new();
        let model = build_model(&tiny_model_config(), &mut params, 4).unwrap();
        for &id in model.param_ids() {
            let name_is_dense = params.entry(id).name.starts_with("dense");
            if name_is_dense {
                for v in params.get_mut(id).data_mut() {
                    *v = 0.0;
                }
            }
        }
        let (_, err) = evaluate(&model, &params, &data, 10).unwrap();
        assert!((err - 2.0 / 3.0).abs() < 1e-12);
    }
}
