//! Loss, Adam optimiser and the batched training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autograd::{Graph, Var};
use crate::dataset::{Sample, Sampler};
use crate::error::{Error, Result};
use crate::field::Frame;
use crate::model::{parse_value, save_weights, window_inputs, ModelWeights, Network};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Square crop side in frame pixels; fields are half as tall.
    pub crop_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub charbonnier_eps: f64,
    pub l1_weight: f64,
    pub charbonnier_weight: f64,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; 0 disables checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 4,
            crop_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            charbonnier_eps: 1e-3,
            l1_weight: 1.0,
            charbonnier_weight: 0.1,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 48x48 crops and a larger step size.
    pub fn desk() -> Self {
        TrainConfig { crop_size: 48, learning_rate: 1e-3, ..Self::default() }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "iterations",
    "batch_size",
    "crop_size",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "charbonnier_eps",
    "l1_weight",
    "charbonnier_weight",
    "train_seed",
    "checkpoint_interval",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size % 2 != 0 {
            return Err(Error::Config(format!("crop_size must be even and positive, got {}", self.crop_size)));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("charbonnier_eps", self.charbonnier_eps),
            ("l1_weight", self.l1_weight),
            ("charbonnier_weight", self.charbonnier_weight),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{k} must be positive, got {v}")));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) || b == 0.0 {
                return Err(Error::Config(format!("{k} must lie in (0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        TRAIN_KEYS.contains(&key)
    }

    /// Applies one `key=value` override; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "iterations" => self.iterations = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "crop_size" => self.crop_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "charbonnier_eps" => self.charbonnier_eps = parse_value(key, value)?,
            "l1_weight" => self.l1_weight = parse_value(key, value)?,
            "charbonnier_weight" => self.charbonnier_weight = parse_value(key, value)?,
            "train_seed" => self.seed = parse_value(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "crop_size={}", self.crop_size);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "beta1={}", self.beta1);
        let _ = writeln!(s, "beta2={}", self.beta2);
        let _ = writeln!(s, "adam_eps={}", self.adam_eps);
        let _ = writeln!(s, "charbonnier_eps={}", self.charbonnier_eps);
        let _ = writeln!(s, "l1_weight={}", self.l1_weight);
        let _ = writeln!(s, "charbonnier_weight={}", self.charbonnier_weight);
        let _ = writeln!(s, "train_seed={}", self.seed);
        let _ = writeln!(s, "checkpoint_interval={}", self.checkpoint_interval);
        s
    }
}

/// `l1_weight·L1 + charbonnier_weight·Cb(eps)`.
pub fn weighted_loss(g: &Graph<f32>, pred: Var, gt: Var, cfg: &TrainConfig) -> Result<Var> {
    let l1 = g.l1(pred, gt)?;
    let cb = g.charbonnier(pred, gt, cfg.charbonnier_eps as f32)?;
    let a = g.mul_scalar(l1, cfg.l1_weight as f32)?;
    let b = g.mul_scalar(cb, cfg.charbonnier_weight as f32)?;
    g.add(a, b)
}

/// `L1 + 0.1·Charbonnier(eps = 1e-3)`, generic over precision.
pub fn total_loss<T: crate::Float>(g: &Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    let l1 = g.l1(pred, gt)?;
    let cb = g.charbonnier(pred, gt, T::from_f64(1e-3))?;
    let cb = g.mul_scalar(cb, T::from_f64(0.1))?;
    g.add(l1, cb)
}

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(weights: &ModelWeights<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = weights.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One update from per-tensor gradients (in parameter order).
    pub fn update(&mut self, weights: &mut ModelWeights<f32>, grads: &[Vec<f32>]) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (self.learning_rate / c1) as f32;
        let sqrt_c2 = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((_, t), g), (m, v)) in weights.params_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / ((*v).sqrt() / sqrt_c2 + eps);
            }
        }
    }
}

/// Loss and per-tensor gradients of one sample.
pub fn sample_gradients(
    g: &Graph<f32>,
    weights: &ModelWeights<f32>,
    sample: &Sample,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
    g.clear();
    let bound = weights.bind(g, true);
    let net = Network::bind(weights.config(), &bound)?;
    let inputs = window_inputs(g, &sample.window);
    let out = net.forward(g, &inputs, sample.window.indicator())?;
    let target = g.input(&sample.target.to_tensor::<f32>());
    let loss = weighted_loss(g, out, target, cfg)?;
    g.backward(loss)?;
    let grads = weights
        .params()
        .iter()
        .map(|(name, _)| Ok(g.grad(bound.get(name)?).map(|t| t.into_data())))
        .collect::<Result<_>>()?;
    Ok((g.scalar(loss) as f64, grads))
}

/// Weights plus optimiser state; one call to [`step`](Trainer::step) per batch.
pub struct Trainer {
    pub weights: ModelWeights<f32>,
    pub config: TrainConfig,
    adam: Adam,
    workers: usize,
    graph: Graph<f32>,
}

impl Trainer {
    pub fn new(weights: ModelWeights<f32>, config: TrainConfig, workers: usize) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&weights, &config);
        Ok(Trainer { weights, config, adam, workers: workers.max(1), graph: Graph::new() })
    }

    fn batch_gradients(&self, batch: &[Sample]) -> Result<Vec<(f64, Vec<Option<Vec<f32>>>)>> {
        let workers = self.workers.min(batch.len());
        if workers <= 1 {
            return batch.iter().map(|s| sample_gradients(&self.graph, &self.weights, s, &self.config)).collect();
        }
        let (weights, cfg) = (&self.weights, &self.config);
        let mut slots: Vec<Option<Result<(f64, Vec<Option<Vec<f32>>>)>>> = (0..batch.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let g = Graph::new();
                        (w..batch.len())
                            .step_by(workers)
                            .map(|i| (i, sample_gradients(&g, weights, &batch[i], cfg)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("training worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every item assigned")).collect()
    }

    /// One optimiser step on `batch`; returns the mean sample loss.
    pub fn step(&mut self, batch: &[Sample]) -> Result<f64> {
        let iteration = self.adam.steps() as usize + 1;
        let diverged = |loss: f64| Error::Diverged { iteration, learning_rate: self.config.learning_rate, loss };
        let results = match self.batch_gradients(batch) {
            Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
            r => r?,
        };
        // Reduce in item order so the sum is independent of the worker count.
        let mut sum: Vec<Vec<f32>> = self.weights.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let mut loss = 0.0;
        for (item_loss, grads) in &results {
            loss += item_loss;
            for (acc, g) in sum.iter_mut().zip(grads) {
                if let Some(g) = g {
                    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
        }
        let loss = loss / batch.len() as f64;
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        let inv = 1.0 / batch.len() as f32;
        sum.iter_mut().flatten().for_each(|v| *v *= inv);
        if sum.iter().flatten().any(|v| !v.is_finite()) {
            return Err(diverged(loss));
        }
        self.adam.update(&mut self.weights, &sum);
        Ok(loss)
    }
}

/// Where a training run writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub workers: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}.dfrs"))
}

/// Trains from `initial` on random crops of `clips`; returns the weights and the per-iteration loss.
pub fn train_loop(
    initial: ModelWeights<f32>,
    clips: &[Vec<Frame>],
    cfg: &TrainConfig,
    opts: &TrainOptions,
    mut progress: impl FnMut(usize, f64),
) -> Result<(ModelWeights<f32>, Vec<f64>)> {
    let mut trainer = Trainer::new(initial, cfg.clone(), opts.workers)?;
    let mut sampler = Sampler::new(clips, cfg.crop_size, cfg.seed)?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let batch = sampler.next_batch(cfg.batch_size)?;
        let loss = trainer.step(&batch)?;
        losses.push(loss);
        progress(it, loss);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_weights(&trainer.weights, &checkpoint_path(dir, it))?;
            }
        }
    }
    Ok((trainer.weights, losses))
}

/// `iteration,loss` CSV with 1-based iterations.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, l);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_set_and_validate() {
        let mut c = TrainConfig::default();
        c.set("crop_size", "32").unwrap();
        c.set("train_seed", "9").unwrap();
        assert_eq!((c.crop_size, c.seed), (32, 9));
        assert!(c.set("momentum", "1").is_err());
        c.crop_size = 33;
        assert!(c.validate().is_err());
        let mut d = TrainConfig::default();
        for line in c.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(TrainConfig::is_key(k));
            d.set(k, v).unwrap();
        }
        assert_eq!(c, d);
    }

    #[test]
    fn loss_csv_format() {
        assert_eq!(loss_csv(&[0.5, 0.25]), "iteration,loss\n1,0.5\n2,0.25\n");
    }
}
