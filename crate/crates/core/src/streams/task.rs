use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numnet::{backward, forward, forward_train, norm, sgd_step, softmax, Matrix, NetworkParams, NetworkSpec, StatsMode};
use crate::rng;
use crate::trio::{MaskMode, TrainableMask};

/// Inputs with their true labels. Labels are only ever used for metrics and
/// source training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> LabeledSet {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet { x: self.x.select_rows(idx), y: idx.iter().map(|&i| self.y[i]).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Distance of every class mean from the shared center.
    pub mean_radius: f64,
    /// Norm of the shared center, so inputs are not zero-mean.
    pub center_offset: f64,
    /// Per-coordinate standard deviation around the class mean.
    pub base_noise: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            num_classes: 10,
            dim: 32,
            mean_radius: 4.5,
            center_offset: 6.0,
            base_noise: 1.0,
            n_train: 5000,
            n_eval: 200,
            seed: 0,
        }
    }
}

/// Gaussian class clusters with means on a sphere.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub means: Matrix,
    pub train: LabeledSet,
    pub clean_eval: LabeledSet,
}

pub fn make_task(config: &TaskConfig) -> Result<SyntheticTask> {
    if config.num_classes < 2 || config.dim < 4 {
        return Err(Error::InvalidConfig("task needs at least 2 classes and 4 dimensions".into()));
    }
    if !(config.mean_radius > 0.0 && config.base_noise >= 0.0 && config.center_offset >= 0.0) {
        return Err(Error::InvalidConfig("task radius must be > 0, noise and offset >= 0".into()));
    }
    let mut r = rng::stream(config.seed, &[rng::tag("means")]);
    let mut means = Matrix::from_fn(config.num_classes, config.dim, |_, _| StandardNormal.sample(&mut r));
    let mut center: Vec<f64> = (0..config.dim).map(|_| StandardNormal.sample(&mut r)).collect();
    let cn = norm(&center);
    center.iter_mut().for_each(|v| *v *= config.center_offset / cn);
    for i in 0..config.num_classes {
        let n = norm(means.row(i));
        means.row_mut(i).iter_mut().zip(&center).for_each(|(v, c)| *v = *v * config.mean_radius / n + c);
    }
    let mut task = SyntheticTask {
        config: config.clone(),
        means,
        train: LabeledSet { x: Matrix::zeros(0, config.dim), y: vec![] },
        clean_eval: LabeledSet { x: Matrix::zeros(0, config.dim), y: vec![] },
    };
    task.train = task.sample(config.n_train, &[rng::tag("train")]);
    task.clean_eval = task.sample(config.n_eval, &[rng::tag("eval")]);
    Ok(task)
}

impl SyntheticTask {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Class-balanced clean sample, deterministic in (task seed, tags).
    pub fn sample(&self, n: usize, tags: &[u64]) -> LabeledSet {
        let mut r = rng::stream(self.config.seed, tags);
        let c = self.config.num_classes;
        let mut y: Vec<usize> = (0..n).map(|i| i % c).collect();
        y.shuffle(&mut r);
        let noise = self.config.base_noise;
        let x = Matrix::from_fn(n, self.config.dim, |i, j| {
            let e: f64 = StandardNormal.sample(&mut r);
            self.means[(y[i], j)] + noise * e
        });
        LabeledSet { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub required_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 15, lr: 0.1, batch_size: 64, seed: 0, required_accuracy: 0.95 }
    }
}

/// Accuracy of `params` on `data` with the given normalization mode.
pub fn accuracy(spec: &NetworkSpec, params: &NetworkParams, data: &LabeledSet, mode: StatsMode) -> Result<f64> {
    let out = forward(spec, params, &data.x, mode)?;
    let pred = out.logits.argmax_rows();
    let hits = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Mini-batch SGD on cross-entropy over the clean training set. Fails with
/// [`Error::NonConvergence`] if clean evaluation accuracy (running
/// statistics) ends below `required_accuracy`.
pub fn train_source(task: &SyntheticTask, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<NetworkParams> {
    if spec.input_dim() != task.dim() || spec.num_classes != task.num_classes() {
        return Err(Error::shape(
            "train_source",
            format!("{}→{}", task.dim(), task.num_classes()),
            format!("{}→{}", spec.input_dim(), spec.num_classes),
        ));
    }
    if cfg.batch_size < 2 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("source training needs batch >= 2, epochs >= 1, lr > 0".into()));
    }
    let mut params = NetworkParams::init(spec, rng::derive(cfg.seed, &[task.config.seed]));
    let mask = TrainableMask::new(spec, MaskMode::Full);
    let mut r = rng::stream(cfg.seed, &[rng::tag("source-order"), task.config.seed]);
    let n = task.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = task.train.select(chunk);
            let out = forward_train(spec, &mut params, &batch.x)?;
            let mut grad = softmax(&out.logits)?;
            let b = chunk.len() as f64;
            for (i, &y) in batch.y.iter().enumerate() {
                grad[(i, y)] -= 1.0;
            }
            let grad = grad.scale(1.0 / b);
            let g = backward(spec, &params, &out.cache, &grad, None)?;
            params = sgd_step(&params, &g, cfg.lr, &mask)?;
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("source training"));
    }
    let acc = accuracy(spec, &params, &task.clean_eval, StatsMode::Running)?;
    if acc < cfg.required_accuracy {
        return Err(Error::NonConvergence { accuracy: acc, required: cfg.required_accuracy });
    }
    Ok(params)
}
