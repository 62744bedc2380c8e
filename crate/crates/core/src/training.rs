//! The training loop: per-example label masking and noisy image masking,
//! TL-DPO (or plain DPO) loss, Adam with a warmup-cosine schedule.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{validate_example, PreferenceExample};
use crate::error::{Error, Result};
use crate::losses::{value_and_grad, LossConfig, PreferencePair};
use crate::model::{ModelConfig, PolicyModel, ReferenceModel};
use crate::numerics::Tensor;
use crate::targeting::noisy_mask_features;

/// Which preference objective the loop minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `w_t·L_t + w_c·L_c` on target-restricted pairs.
    #[default]
    TlDpo,
    /// Plain DPO on the full, unmasked responses.
    Dpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    CosineWithWarmup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the number of optimizer steps (0 means no cap); the schedule is
    /// laid out over the capped total.
    pub max_steps: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub scheduler: Scheduler,
    pub objective: Objective,
    pub seed: u64,
    /// Held-out evaluation period in steps; 0 disables it.
    pub eval_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay per unit learning rate (0 gives plain Adam).
    pub weight_decay: f64,
    /// Evaluate the examples of a batch on the rayon pool.
    pub parallel: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 3,
            max_steps: 0,
            learning_rate: 1e-5,
            warmup_ratio: 0.1,
            scheduler: Scheduler::CosineWithWarmup,
            objective: Objective::TlDpo,
            seed: 0,
            eval_every: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            parallel: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup_ratio", "must lie in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        for (field, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Optimizer steps a run over `n` examples takes.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n);
        if self.max_steps > 0 {
            full.min(self.max_steps)
        } else {
            full
        }
    }
}

/// On-disk training configuration: a `[train]` table (with `[train.loss]`)
/// and a `[model]` table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config("<file>", e.to_string()))?;
        cfg.train.validate()?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain struct")
    }
}

/// Linear warmup from 0 over `W = ceil(warmup_ratio·total)` steps, then
/// cosine decay to 0 at `total`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.learning_rate;
    let total = total_steps.max(1);
    let step = step.min(total);
    let warmup = (cfg.warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total == warmup {
        return base;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay: 0.0,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Shrinks every parameter by `lr·weight_decay·p` per step, outside the
    /// adaptive update.
    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pi);
            }
        }
    }
}

/// Metrics of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_t: f64,
    pub loss_c: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_total(&self) -> Option<f64> {
        self.steps.last().map(|s| s.total)
    }

    /// Exponential moving average of the total loss, one value per step.
    pub fn smoothed_total(&self, alpha: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps.len());
        let mut acc = None;
        for s in &self.steps {
            let v = match acc {
                None => s.total,
                Some(a) => alpha * s.total + (1.0 - alpha) * a,
            };
            acc = Some(v);
            out.push(v);
        }
        out
    }

    pub fn write_metrics_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("steps: {}\n", self.steps.len());
        if let (Some(first), Some(last)) = (self.steps.first(), self.steps.last()) {
            s += &format!(
                "loss total: {:.6} -> {:.6} (L_t {:.6}, L_c {:.6})\n",
                first.total, last.total, last.loss_t, last.loss_c
            );
            let max_norm = self.steps.iter().map(|r| r.grad_norm).fold(0.0, f64::max);
            s += &format!("max grad norm: {max_norm:.6}\n");
        }
        if let Some(p) = &self.checkpoint {
            s += &format!("checkpoint: {}\n", p.display());
        }
        s += &format!("wall clock: {:.2}s\n", self.wall_clock_secs);
        s
    }
}

/// Combines integers into one well-mixed 64-bit seed (SplitMix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Stable 64-bit key of an example id.
pub fn id_key(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Noise seed for one example in one epoch.
pub fn noise_seed(train_seed: u64, epoch: usize, id: &str) -> u64 {
    mix_seed(&[train_seed, epoch as u64, id_key(id)])
}

/// An example prepared for the loss: its pair, image features and bbox.
struct Prepared<'a> {
    example: &'a PreferenceExample,
    pair: PreferencePair,
    features: Tensor,
}

fn prepare<'a>(
    model: &PolicyModel,
    dataset: &'a [PreferenceExample],
    objective: Objective,
) -> Result<Vec<Prepared<'a>>> {
    dataset
        .iter()
        .map(|ex| {
            if let Err(v) = validate_example(ex) {
                return Err(Error::Validation {
                    field: v[0].field.to_string(),
                    reason: format!("example {}: {}", ex.id, v[0].message),
                });
            }
            let pair = match objective {
                Objective::TlDpo => ex.target_pair()?,
                Objective::Dpo => ex.full_pair(),
            };
            Ok(Prepared {
                example: ex,
                features: model.features(&ex.image)?,
                pair,
            })
        })
        .collect()
}

struct ExampleGrad {
    loss_t: f64,
    loss_c: f64,
    total: f64,
    grads: Vec<Tensor>,
}

fn example_grad(
    model: &PolicyModel,
    reference: &ReferenceModel,
    p: &Prepared<'_>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ExampleGrad> {
    let mut parts = (0.0, 0.0);
    let (total, grads) = match cfg.objective {
        Objective::TlDpo => {
            let g = p.example.image.g;
            let seed = noise_seed(cfg.seed, epoch, &p.example.id);
            let masked =
                noisy_mask_features(&p.features, g, &p.example.bbox, cfg.loss.noise_sigma, seed)?;
            value_and_grad(model, reference, cfg.loss.beta, |s, graph| {
                let terms = s.tl_dpo_loss(graph, &p.pair, &masked, &cfg.loss)?;
                parts = (
                    graph.value(terms.generation).item()?,
                    graph.value(terms.condition).item()?,
                );
                Ok(terms.total)
            })?
        }
        Objective::Dpo => {
            let out = value_and_grad(model, reference, cfg.loss.beta, |s, graph| {
                s.dpo_loss(graph, std::slice::from_ref(&p.pair))
            })?;
            parts = (out.0, 0.0);
            out
        }
    };
    Ok(ExampleGrad {
        loss_t: parts.0,
        loss_c: parts.1,
        total,
        grads,
    })
}

/// Optional held-out evaluation run every `eval_every` steps.
pub type EvalHook<'h> = dyn FnMut(&PolicyModel) -> Result<f64> + 'h;

/// Trains `model` against the frozen `reference`.
///
/// Deterministic in `(cfg, dataset, model)`: batches come from a seeded
/// per-epoch permutation, mask noise is keyed by `(seed, epoch, example id)`
/// and per-example gradients are summed in batch order whether or not the
/// batch is evaluated in parallel.
pub fn train(
    model: PolicyModel,
    reference: &ReferenceModel,
    dataset: &[PreferenceExample],
    cfg: &TrainConfig,
) -> Result<(PolicyModel, TrainReport)> {
    train_with_eval(model, reference, dataset, cfg, None)
}

pub fn train_with_eval(
    mut model: PolicyModel,
    reference: &ReferenceModel,
    dataset: &[PreferenceExample],
    cfg: &TrainConfig,
    mut eval: Option<&mut EvalHook<'_>>,
) -> Result<(PolicyModel, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let prepared = prepare(&model, dataset, cfg.objective)?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 || prepared.is_empty() {
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        return Ok((model, report));
    }

    let total_steps = cfg.total_steps(prepared.len());
    let mut adam = Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        .with_weight_decay(cfg.weight_decay);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, 0x5348_5546]));
        order.sort_unstable();
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            if step == total_steps {
                break;
            }
            let eval_one = |&i: &usize| example_grad(&model, reference, &prepared[i], cfg, epoch);
            let results: Vec<Result<ExampleGrad>> = if cfg.parallel {
                batch.par_iter().map(eval_one).collect()
            } else {
                batch.iter().map(eval_one).collect()
            };

            let n = batch.len() as f64;
            let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            let (mut lt, mut lc, mut tot) = (0.0, 0.0, 0.0);
            for r in results {
                let r = r?;
                lt += r.loss_t;
                lc += r.loss_c;
                tot += r.total;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.add_assign(g);
                }
            }
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v /= n;
                }
            }
            let grad_norm = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
            let total = tot / n;
            if !total.is_finite() || !grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    ids: batch.iter().map(|&i| prepared[i].example.id.clone()).collect(),
                });
            }

            let lr = lr_schedule(step, total_steps, cfg);
            adam.step(model.params_mut(), &grads, lr);
            step += 1;

            let eval_accuracy = match eval.as_deref_mut() {
                Some(hook) if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == total_steps) => {
                    Some(hook(&model)?)
                }
                _ => None,
            };
            report.steps.push(StepRecord {
                step,
                epoch,
                loss_t: lt / n,
                loss_c: lc / n,
                total,
                lr,
                grad_norm,
                eval_accuracy,
            });
        }
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig {
            learning_rate: 2.0,
            warmup_ratio: 0.1,
            ..Default::default()
        };
        let total = 100;
        let w = 10;
        assert_eq!(lr_schedule(0, total, &cfg), 0.0);
        assert!((lr_schedule(5, total, &cfg) - 1.0).abs() < 1e-15);
        assert!((lr_schedule(w, total, &cfg) - 2.0).abs() < 1e-15);
        assert!((lr_schedule(w + (total - w) / 2, total, &cfg) - 1.0).abs() < 1e-12);
        assert!(lr_schedule(total, total, &cfg).abs() < 1e-15);
    }

    #[test]
    fn warmup_uses_ceiling() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_ratio: 0.1,
            ..Default::default()
        };
        // ceil(0.1 * 48) = 5
        assert!((lr_schedule(5, 48, &cfg) - 1.0).abs() < 1e-15);
        assert!(lr_schedule(4, 48, &cfg) < 1.0);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (10..=100).map(|s| lr_schedule(s, 100, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0, -1.0])];
        let g = vec![Tensor::vector(vec![0.5, -3.0])];
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &g, 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_ratio: 1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "warmup_ratio"));
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn run_config_toml_roundtrip() {
        let cfg = RunConfig::default();
        let s = cfg.to_toml_string();
        assert!(s.contains("[train.loss]"));
        assert_eq!(RunConfig::from_toml_str(&s).unwrap(), cfg);
        assert!(RunConfig::from_toml_str("[train]\nlearning_rate = -1.0").is_err());
    }

    #[test]
    fn seed_mixing_separates_inputs() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(noise_seed(0, 0, "a"), noise_seed(0, 1, "a"));
        assert_eq!(noise_seed(7, 3, "x"), noise_seed(7, 3, "x"));
    }
}
