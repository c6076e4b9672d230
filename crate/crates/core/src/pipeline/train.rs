use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::datagen::{Dataset, Sample, Split, TaskKind};
use crate::error::{Error, Result};
use crate::numkit::{Gradients, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; off by default.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Seed of the minibatch shuffle.
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("batch size and thread count must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(format!(
                "invalid optimizer settings lr={} beta1={} beta2={}",
                self.lr, self.beta1, self.beta2
            )));
        }
        if !(self.adam_eps > 0.0) || self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("adam eps and clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value().shape()))
            .collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = params.grad(id).data().to_vec();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for ((m, v), g) in m.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            }
            let (m, v) = (self.first[i].data(), self.second[i].data());
            let value = params.value_mut(id).data_mut();
            for ((x, m), v) in value.iter_mut().zip(m).zip(v) {
                *x -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    pub batch_losses: Vec<f64>,
}

/// Model-independent training state: optimizer, shuffle stream and worker pool.
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Adam,
    epoch: usize,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pool = thread_pool(config.threads)?;
        Ok(Self {
            optimizer: Adam::new(&model.params, &config),
            config,
            epoch: 0,
            pool,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Epoch order depends only on the shuffle seed and the epoch index.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on the mean loss of `batch`. Returns the mean loss.
    ///
    /// A non-finite loss or gradient leaves the parameters untouched.
    pub fn step(&mut self, model: &mut Model, batch: &[&Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let results: Vec<Result<(f64, Gradients)>> = {
            let model = &*model;
            self.pool
                .install(|| batch.par_iter().map(|s| model.sample_gradients(s)).collect())
        };
        let mut total = 0.0;
        let mut merged = Gradients::with_len(model.params.len());
        for (i, r) in results.into_iter().enumerate() {
            let (loss, grads) = r.map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at batch sample {i}")),
                other => other,
            })?;
            total += loss;
            merged.merge(&grads);
        }
        let scale = 1.0 / batch.len() as f64;
        merged.scale(scale);
        model.params.zero_grad();
        model.params.accumulate(&merged);

        let norm_sq: f64 = model
            .params
            .ids()
            .map(|id| model.params.grad(id).data().iter().map(|g| g * g).sum::<f64>())
            .sum();
        if !norm_sq.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        if let Some(clip) = self.config.clip_norm {
            let norm = norm_sq.sqrt();
            if norm > clip {
                let ids: Vec<_> = model.params.ids().collect();
                for id in ids {
                    for g in model.params.grad_mut(id).data_mut() {
                        *g *= clip / norm;
                    }
                }
            }
        }
        self.optimizer.step(&mut model.params);
        Ok(total * scale)
    }

    pub fn train_epoch(&mut self, model: &mut Model, samples: &[Sample]) -> Result<EpochStats> {
        if samples.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let epoch = self.epoch;
        let order = self.epoch_order(epoch, samples.len());
        let mut batch_losses = Vec::new();
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = self.step(model, &batch).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("{msg} in epoch {} batch {}", epoch + 1, b + 1))
                }
                other => other,
            })?;
            total += loss * chunk.len() as f64;
            batch_losses.push(loss);
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch,
            loss: total / samples.len() as f64,
            batch_losses,
        })
    }
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub task: TaskKind,
    /// Accuracy for word and choice, mean squared error for number.
    pub value: f64,
    pub count: usize,
}

impl Metrics {
    pub fn name(&self) -> &'static str {
        match self.task {
            TaskKind::Number => "mse",
            _ => "accuracy",
        }
    }
}

/// Accuracy or MSE of the model's (rounded, clamped) predictions.
pub fn evaluate_samples(model: &Model, samples: &[Sample], threads: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let pool = thread_pool(threads)?;
    let preds: Vec<u32> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| model.predict(s))
            .collect::<Result<Vec<_>>>()
    })?;
    let truth: Vec<u32> = samples.iter().map(|s| s.answer).collect();
    Ok(Metrics {
        task: model.config.task,
        value: score(model.config.task, &preds, &truth),
        count: samples.len(),
    })
}

pub fn evaluate(model: &Model, dataset: &Dataset, split: Split, threads: usize) -> Result<Metrics> {
    model.config.check_dataset(dataset)?;
    evaluate_samples(model, dataset.split(split), threads)
}

/// Accuracy, or mean squared error for counts.
pub fn score(task: TaskKind, predictions: &[u32], truth: &[u32]) -> f64 {
    let n = truth.len() as f64;
    match task {
        TaskKind::Number => {
            predictions
                .iter()
                .zip(truth)
                .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
                .sum::<f64>()
                / n
        }
        _ => predictions.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / n,
    }
}
