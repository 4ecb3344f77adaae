//! Training loop: length-bucketed batches, Adam, and per-epoch evaluation on
//! the full training set.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParameterSet, Tape};
use crate::model::{Architecture, Integration, Model, ModelConfig, ModelError};
use crate::parity::ParityDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates, one moment buffer per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParameterSet) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Split each length bucket into chunks of at most this many strings.
    /// `None` trains on whole buckets.
    pub batch_size: Option<usize>,
    /// Stop once the training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_epochs: 400,
            lambda: 0.0,
            adam: AdamConfig::default(),
            seed: 0,
            batch_size: None,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("lambda {} must be finite and non-negative", self.lambda));
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive".into());
        }
        if self.batch_size == Some(0) {
            return fail("batch_size must be positive".into());
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return fail("Adam needs betas in [0, 1) and eps > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub learning_rate: f64,
    pub seed: u64,
    pub lambda: f64,
    /// Maximum over epochs of full-training-set accuracy.
    pub best_accuracy: f64,
    /// Wall time from the start of training to the end of the best epoch.
    pub time_to_best_s: f64,
    /// 1-based.
    pub epoch_of_best: usize,
    pub epochs_run: usize,
    pub wall_time_s: f64,
    /// Mean accepted steps per block in the final evaluation pass.
    pub mean_steps_per_block: Option<f64>,
    /// Unweighted regularization integral averaged over the training set,
    /// from the final evaluation pass.
    pub final_reg_integral: f64,
    pub accuracy_history: Vec<f64>,
    pub reg_history: Vec<f64>,
    pub failed_batches: usize,
    pub total_batches: usize,
    pub eval_failures: usize,
    /// More than 10% of training batches failed.
    pub invalid: bool,
    pub model: ModelConfig,
}

impl RunRecord {
    /// Accuracy used for ranking and averaging; invalid runs score 0.
    pub fn effective_accuracy(&self) -> f64 {
        if self.invalid {
            0.0
        } else {
            self.best_accuracy
        }
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            time_to_best_s: 0.0,
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// The model with the weights of the best epoch.
    pub best_model: Model,
}

/// Summary of one evaluation pass over the whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub reg_integral: f64,
    pub mean_steps_per_block: Option<f64>,
    pub failures: usize,
}

/// Forward-only pass over every length bucket. Strings in a bucket whose
/// solve fails count as misclassified.
pub fn evaluate(model: &Model, data: &ParityDataset) -> Result<Evaluation, ModelError> {
    let mut correct = 0usize;
    let mut reg_weighted = 0.0;
    let mut steps = Vec::new();
    let mut failures = 0;
    for bucket in data.buckets() {
        let (batch, labels) = bucket.batch()?;
        let mut tape = Tape::new();
        let bound = tape.bind(&model.params)?;
        let enc = match model.encode_batch(&mut tape, &bound, &batch, Integration::Adaptive) {
            Ok(enc) => enc,
            Err(ModelError::Solver { .. }) | Err(ModelError::Autodiff(_)) => {
                failures += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let logits = model.logits(&mut tape, &bound, enc.hidden, &batch)?;
        let logits = tape.value(logits);
        correct += labels
            .iter()
            .enumerate()
            .filter(|&(j, &label)| usize::from(logits.get(1, j) > logits.get(0, j)) == label)
            .count();
        reg_weighted += tape.scalar(enc.reg_total) * labels.len() as f64;
        steps.extend(enc.block_stats.iter().map(|s| s.accepted_steps as f64));
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        reg_integral: reg_weighted / n,
        mean_steps_per_block: (!steps.is_empty()).then(|| steps.iter().sum::<f64>() / steps.len() as f64),
        failures,
    })
}

pub fn train_run(mcfg: &ModelConfig, tcfg: &TrainConfig, data: &ParityDataset) -> Result<TrainOutcome, TrainError> {
    tcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = Model::new(mcfg.clone(), &mut rng)?;
    let mut adam = Adam::new(&model.params, tcfg.learning_rate, tcfg.adam);
    let start = Instant::now();

    let mut chunks: Vec<(usize, Vec<usize>)> = Vec::new();
    for (b, bucket) in data.buckets().iter().enumerate() {
        let size = tcfg.batch_size.unwrap_or(bucket.len()).max(1);
        let all: Vec<usize> = (0..bucket.len()).collect();
        chunks.extend(all.chunks(size).map(|c| (b, c.to_vec())));
    }
    let mut order: Vec<usize> = (0..chunks.len()).collect();

    let mut record = RunRecord {
        learning_rate: tcfg.learning_rate,
        seed: tcfg.seed,
        lambda: tcfg.lambda,
        best_accuracy: 0.0,
        time_to_best_s: 0.0,
        epoch_of_best: 0,
        epochs_run: 0,
        wall_time_s: 0.0,
        mean_steps_per_block: None,
        final_reg_integral: 0.0,
        accuracy_history: Vec::with_capacity(tcfg.max_epochs),
        reg_history: Vec::with_capacity(tcfg.max_epochs),
        failed_batches: 0,
        total_batches: 0,
        eval_failures: 0,
        invalid: false,
        model: mcfg.clone(),
    };
    let mut best_params = model.params.flatten();

    for epoch in 1..=tcfg.max_epochs {
        order.shuffle(&mut rng);
        if tcfg.batch_size.is_some() {
            for (_, idx) in &mut chunks {
                idx.shuffle(&mut rng);
            }
        }
        for &c in &order {
            let (b, idx) = &chunks[c];
            record.total_batches += 1;
            let (batch, labels) = data.buckets()[*b].subset(idx)?;
            let mut tape = Tape::new();
            let bound = tape.bind(&model.params).map_err(ModelError::from)?;
            let step = model
                .loss(&mut tape, &bound, &batch, &labels, tcfg.lambda, Integration::Adaptive)
                .and_then(|out| {
                    model.params.zero_grad();
                    tape.backward_into(out.loss, &mut model.params)?;
                    Ok(())
                });
            match step {
                Ok(()) => adam.step(&mut model.params),
                Err(ModelError::Solver { .. }) | Err(ModelError::Autodiff(_)) => {
                    record.failed_batches += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }

        let eval = evaluate(&model, data)?;
        record.epochs_run = epoch;
        record.eval_failures += eval.failures;
        record.accuracy_history.push(eval.accuracy);
        record.reg_history.push(eval.reg_integral);
        record.final_reg_integral = eval.reg_integral;
        record.mean_steps_per_block = eval.mean_steps_per_block;
        if eval.accuracy > record.best_accuracy || epoch == 1 {
            record.best_accuracy = eval.accuracy;
            record.epoch_of_best = epoch;
            record.time_to_best_s = start.elapsed().as_secs_f64();
            best_params = model.params.flatten();
        }
        if tcfg.target_accuracy.is_some_and(|t| eval.accuracy >= t) {
            break;
        }
    }

    record.wall_time_s = start.elapsed().as_secs_f64();
    record.invalid = record.failed_batches * 10 > record.total_batches;
    if mcfg.architecture == Architecture::Vanilla {
        record.mean_steps_per_block = None;
    }
    model.params.load_flat(&best_params).map_err(ModelError::from)?;
    model.params.zero_grad();
    Ok(TrainOutcome {
        record,
        best_model: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::parity::gen_dataset;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = ParameterSet::new();
        let id = params.insert("w", Tensor::from_rows(&[&[1.0, -2.0, 0.5]])).unwrap();
        params.iter_mut().next().unwrap().grad = Tensor::from_rows(&[&[0.3, -4.0, 0.0]]);
        let mut adam = Adam::new(&params, 0.1, AdamConfig::default());
        adam.step(&mut params);
        let w = params.value(id);
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps)
        let expected = [1.0 - 0.1 * 0.3 / (0.3 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 0.5];
        for (a, e) in w.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParameterSet::new();
        let id = params.insert("x", Tensor::column(&[3.0, -5.0])).unwrap();
        let mut adam = Adam::new(&params, 0.05, AdamConfig::default());
        for _ in 0..2000 {
            let x = params.value(id).clone();
            params.iter_mut().next().unwrap().grad = x.map(|v| 2.0 * (v - 1.0));
            adam.step(&mut params);
        }
        for v in params.value(id).data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: -1.0,
                ..Default::default()
            },
            TrainConfig {
                lambda: f64::NAN,
                ..Default::default()
            },
            TrainConfig {
                max_epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: Some(0),
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_learning_rate_never_moves() {
        let data = gen_dataset(4).unwrap();
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let out = train_run(&ModelConfig::vanilla(4, 1), &tcfg, &data).unwrap();
        let fresh = Model::new(ModelConfig::vanilla(4, 1), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(out.best_model.params.flatten(), fresh.params.flatten());
        let h = &out.record.accuracy_history;
        assert!(h.iter().all(|&a| a == h[0]));
        assert_eq!(out.record.epoch_of_best, 1);
        assert_eq!(out.record.total_batches, 12);
        assert!(!out.record.invalid);
    }

    #[test]
    fn same_seed_same_record() {
        let data = gen_dataset(3).unwrap();
        let tcfg = TrainConfig {
            max_epochs: 4,
            seed: 3,
            lambda: 0.01,
            batch_size: Some(3),
            ..Default::default()
        };
        let cfg = ModelConfig::node(4, 1);
        let a = train_run(&cfg, &tcfg, &data).unwrap();
        let b = train_run(&cfg, &tcfg, &data).unwrap();
        assert_eq!(a.record.without_timing(), b.record.without_timing());
        assert_eq!(a.best_model.params.flatten(), b.best_model.params.flatten());
        assert!(a.record.mean_steps_per_block.is_some());
        assert!(a.record.final_reg_integral > 0.0);
        let other = train_run(&cfg, &TrainConfig { seed: 4, ..tcfg }, &data).unwrap();
        assert_ne!(other.best_model.params.flatten(), a.best_model.params.flatten());
    }

    #[test]
    fn best_model_reproduces_best_accuracy() {
        let data = gen_dataset(3).unwrap();
        let tcfg = TrainConfig {
            max_epochs: 15,
            learning_rate: 0.03,
            seed: 1,
            ..Default::default()
        };
        let out = train_run(&ModelConfig::vanilla(4, 1), &tcfg, &data).unwrap();
        let eval = evaluate(&out.best_model, &data).unwrap();
        assert_eq!(eval.accuracy, out.record.best_accuracy);
        let max = out.record.accuracy_history.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, out.record.best_accuracy);
    }

    #[test]
    fn divergent_solves_are_counted_as_failures() {
        let data = gen_dataset(2).unwrap();
        let mut cfg = ModelConfig::node(4, 1);
        cfg.solver.max_steps = 1;
        let tcfg = TrainConfig {
            max_epochs: 2,
            ..Default::default()
        };
        let out = train_run(&cfg, &tcfg, &data).unwrap();
        assert_eq!(out.record.failed_batches, out.record.total_batches);
        assert!(out.record.invalid);
        assert_eq!(out.record.effective_accuracy(), 0.0);
        assert_eq!(out.record.eval_failures, 4);
        assert_eq!(out.record.best_accuracy, 0.0);
    }
}
