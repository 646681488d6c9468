//! AdamW with cosine decay, the training and fine-tuning loops, evaluation
//! metrics, and the noise-robustness benchmark.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::bvp::{self, LinearSystemSample};
use crate::linalg::{self, LinalgError, Vector};
use crate::model::{self, ModelConfig, ModelError, ModelWeights};
use crate::seeding::{self, streams};
use crate::stats;

/// Truth vectors with a smaller norm than this cannot anchor a relative error.
pub const DEGENERATE_TRUTH_NORM: f64 = 1e-300;
pub const METRICS_HEADER: &str = "epoch,train_loss,test_mse,test_rel_mse,lr,seconds";
const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("relative error undefined for a truth vector of norm {0:e}")]
    DegenerateTruth(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Constant learning rate `fine_tune_lr` instead of the cosine schedule.
    pub fine_tune: bool,
    pub fine_tune_lr: f64,
    /// Save a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: Option<usize>,
    /// Relative perturbation applied to the right-hand side of training inputs.
    pub train_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 128,
            lr_max: 1e-4,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
            seed: 0,
            fine_tune: false,
            fine_tune_lr: 5e-5,
            checkpoint_every: None,
            train_noise: 0.0,
        }
    }
}

impl TrainConfig {
    /// Settings for the single-core desk-scale runs.
    pub fn desk() -> Self {
        TrainConfig { epochs: 50, batch_size: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad("need 0 <= lr_min <= lr_max");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps > 0.0 && self.fine_tune_lr >= 0.0 && self.train_noise >= 0.0) {
            return bad("weight_decay, adam_eps, fine_tune_lr and train_noise must be nonnegative");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive");
        }
        Ok(())
    }
}

/// `lr_min + (lr_max − lr_min)(1 + cos(π·step/total))/2`, evaluated as a
/// decrement from `lr_max` so the first step is exactly `lr_max`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_max - (lr_max - lr_min) * (1.0 - (std::f64::consts::PI * t).cos()) / 2.0
}

/// One parameter buffer with its gradient.
pub struct ParamGroup<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    pub decay: bool,
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.beta1, c.beta2, c.adam_eps, c.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, groups: &mut [ParamGroup<'_>], lr: f64) {
        if self.m.is_empty() {
            self.m = groups.iter().map(|g| vec![0.0; g.value.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), groups.len(), "parameter groups changed between steps");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (gi, g) in groups.iter_mut().enumerate() {
            let m = &mut self.m[gi];
            let v = &mut self.v[gi];
            assert_eq!(m.len(), g.value.len());
            assert_eq!(g.grad.len(), g.value.len());
            for i in 0..g.value.len() {
                let grad = g.grad[i];
                if g.decay && self.weight_decay != 0.0 {
                    g.value[i] -= lr * self.weight_decay * g.value[i];
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad * grad;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                g.value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Input tokens and target vector for one supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Tensor,
    pub target: Vector,
}

/// A homogeneous collection of examples (same token count and width).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupervisedSet {
    pub examples: Vec<Example>,
    /// Token feature that holds the right-hand side, for input noise.
    pub rhs_feature: Option<usize>,
}

impl SupervisedSet {
    pub fn new(examples: Vec<Example>, rhs_feature: Option<usize>) -> Result<Self, TrainError> {
        if let Some(first) = examples.first() {
            let shape = first.tokens.shape().to_vec();
            if shape.len() != 2 {
                return Err(TrainError::DimensionMismatch(format!("tokens must be 2-D, got {shape:?}")));
            }
            for e in &examples {
                if e.tokens.shape() != shape.as_slice() || e.target.len() != shape[0] {
                    return Err(TrainError::DimensionMismatch(format!(
                        "example with tokens {:?} and target {} in a set of {shape:?}",
                        e.tokens.shape(),
                        e.target.len()
                    )));
                }
            }
        }
        Ok(SupervisedSet { examples, rhs_feature })
    }

    /// Column-patch examples from labeled systems.
    pub fn from_systems(samples: &[LinearSystemSample]) -> Result<Self, TrainError> {
        let examples = samples
            .iter()
            .map(|s| {
                Ok(Example { tokens: model::encode_system(&s.a, &s.b, s.dim())?, target: s.x.clone() })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let n = samples.first().map_or(0, |s| s.dim());
        Self::new(examples, Some(n))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `(tokens, token_dim)`.
    pub fn token_shape(&self) -> Option<(usize, usize)> {
        self.examples.first().map(|e| (e.tokens.shape()[0], e.tokens.shape()[1]))
    }

    fn batch(&self, idx: &[usize], noise: Option<(f64, u64)>) -> (Tensor, Tensor) {
        let (t, d) = self.token_shape().expect("nonempty set");
        let mut tokens = Vec::with_capacity(idx.len() * t * d);
        let mut targets = Vec::with_capacity(idx.len() * t);
        for &i in idx {
            let e = &self.examples[i];
            match (noise, self.rhs_feature) {
                (Some((level, seed)), Some(f)) if level > 0.0 => {
                    let mut tok = e.tokens.data().to_vec();
                    let b: Vec<f64> = (0..t).map(|r| tok[r * d + f]).collect();
                    let mut rng = seeding::rng(seeding::derive(seed, streams::NOISE, i as u64));
                    let nb = bvp::add_noise(&b, level, &mut rng);
                    for r in 0..t {
                        tok[r * d + f] = nb[r];
                    }
                    tokens.extend_from_slice(&tok);
                }
                _ => tokens.extend_from_slice(e.tokens.data()),
            }
            targets.extend_from_slice(&e.target);
        }
        (
            Tensor::new(vec![idx.len(), t, d], tokens).expect("batch shape"),
            Tensor::new(vec![idx.len(), t], targets).expect("batch shape"),
        )
    }
}

/// One row per completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mse: f64,
    pub test_rel_mse: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:.3}\n",
                r.epoch, r.train_loss, r.test_mse, r.test_rel_mse, r.lr, r.seconds
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Same rows with the wall-clock column zeroed, for determinism checks.
    pub fn without_timing(&self) -> MetricsLog {
        MetricsLog { rows: self.rows.iter().map(|r| MetricsRow { seconds: 0.0, ..r.clone() }).collect() }
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_loss).collect()
    }
}

/// Means of consecutive non-overlapping windows of `window` values.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values.chunks(window.max(1)).filter(|c| c.len() == window.max(1)).map(stats::mean).collect()
}

/// `‖pred − truth‖² / ‖truth‖²`.
pub fn relative_mse(pred: &[f64], truth: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != truth.len() {
        return Err(TrainError::DimensionMismatch(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let tn = linalg::norm2(truth);
    if tn < DEGENERATE_TRUTH_NORM {
        return Err(TrainError::DegenerateTruth(tn));
    }
    let diff: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let ratio = linalg::norm2(&diff) / tn;
    Ok(ratio * ratio)
}

/// Per-sample squared error `Σ (p − t)²`.
pub fn squared_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum()
}

/// Predictions for every example, in order.
pub fn predict(weights: &ModelWeights, set: &SupervisedSet) -> Result<Vec<Vector>, TrainError> {
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (tokens, _) = set.batch(chunk, None);
        let y = model::forward_batch(weights, &tokens)?;
        let t = y.shape()[1];
        out.extend(y.data().chunks(t).map(Vector::from_slice));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    /// Mean per-sample squared error.
    pub mse: f64,
    pub mean_rel_mse: f64,
    pub median_rel_mse: f64,
}

pub fn evaluate(weights: &ModelWeights, set: &SupervisedSet) -> Result<EvalStats, TrainError> {
    if set.is_empty() {
        return Ok(EvalStats { mse: f64::NAN, mean_rel_mse: f64::NAN, median_rel_mse: f64::NAN });
    }
    let preds = predict(weights, set)?;
    let mut se = Vec::with_capacity(set.len());
    let mut rel = Vec::with_capacity(set.len());
    for (p, e) in preds.iter().zip(&set.examples) {
        se.push(squared_error(p, &e.target));
        rel.push(relative_mse(p, &e.target)?);
    }
    Ok(EvalStats { mse: stats::mean(&se), mean_rel_mse: stats::mean(&rel), median_rel_mse: stats::median(&rel) })
}

/// Test MSE of always predicting the mean training target.
pub fn mean_predictor_mse(train: &SupervisedSet, test: &SupervisedSet) -> Result<f64, TrainError> {
    let first = train.examples.first().ok_or(TrainError::EmptyDataset)?;
    let mut mean = vec![0.0; first.target.len()];
    for e in &train.examples {
        mean.iter_mut().zip(e.target.iter()).for_each(|(m, t)| *m += t);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    Ok(stats::mean(&test.examples.iter().map(|e| squared_error(&mean, &e.target)).collect::<Vec<_>>()))
}

fn check_compat(config: &ModelConfig, set: &SupervisedSet) -> Result<(), TrainError> {
    if let Some((t, d)) = set.token_shape() {
        if d != config.token_dim || t > config.max_tokens {
            return Err(TrainError::DimensionMismatch(format!(
                "dataset tokens {t}x{d} vs model token_dim {} / max_tokens {}",
                config.token_dim, config.max_tokens
            )));
        }
    }
    Ok(())
}

enum Schedule {
    Cosine,
    Constant(f64),
}

/// Trains a freshly initialized model (weights seeded by `train_cfg.seed`).
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &SupervisedSet,
    test_set: &SupervisedSet,
    checkpoints: Option<&Path>,
) -> Result<(ModelWeights, MetricsLog), TrainError> {
    let weights = model::init_weights(model_cfg, train_cfg.seed)?;
    let schedule = if train_cfg.fine_tune { Schedule::Constant(train_cfg.fine_tune_lr) } else { Schedule::Cosine };
    run(weights, train_cfg, train_set, test_set, checkpoints, schedule)
}

/// Continues training `pretrained` for `epochs` at the constant fine-tuning
/// learning rate.
pub fn fine_tune(
    pretrained: ModelWeights,
    train_cfg: &TrainConfig,
    train_set: &SupervisedSet,
    test_set: &SupervisedSet,
    epochs: usize,
    checkpoints: Option<&Path>,
) -> Result<(ModelWeights, MetricsLog), TrainError> {
    let cfg = TrainConfig { epochs, fine_tune: true, ..train_cfg.clone() };
    run(pretrained, &cfg, train_set, test_set, checkpoints, Schedule::Constant(cfg.fine_tune_lr))
}

fn run(
    mut weights: ModelWeights,
    cfg: &TrainConfig,
    train_set: &SupervisedSet,
    test_set: &SupervisedSet,
    checkpoints: Option<&Path>,
    schedule: Schedule,
) -> Result<(ModelWeights, MetricsLog), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_compat(weights.config(), train_set)?;
    check_compat(weights.config(), test_set)?;
    if let Some(dir) = checkpoints {
        std::fs::create_dir_all(dir)?;
    }
    let decay: Vec<bool> = weights.specs().iter().map(|s| s.kind.decays()).collect();
    let mut opt = AdamW::from_config(cfg);
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut log = MetricsLog::default();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut shuffle_rng = seeding::rng(seeding::derive(cfg.seed, streams::SHUFFLE, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let noise = (cfg.train_noise > 0.0)
                .then(|| (cfg.train_noise, seeding::derive(cfg.seed, epoch as u64, bi as u64)));
            let (tokens, targets) = train_set.batch(chunk, noise);
            let mut tape = Tape::new();
            let params = weights.bind(&mut tape);
            let tv = tape.leaf(tokens);
            let yv = tape.leaf(targets);
            let pred = model::forward_graph(&mut tape, weights.config(), &params, tv, None)?;
            let loss = tape.mse_loss(pred, yv)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::Divergence { epoch, loss: loss_value });
            }
            loss_sum += loss_value * chunk.len() as f64;
            tape.backward(loss)?;
            let mut grads: Vec<Tensor> = params.iter().map(|&p| tape.grad_or_zeros(p)).collect();
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
                }
            }
            lr = match schedule {
                Schedule::Cosine => cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min),
                Schedule::Constant(v) => v,
            };
            let mut groups: Vec<ParamGroup> = weights
                .tensors_mut()
                .iter_mut()
                .zip(&grads)
                .zip(&decay)
                .map(|((w, g), &d)| ParamGroup { value: w.data_mut(), grad: g.data(), decay: d })
                .collect();
            opt.step(&mut groups, lr);
            step += 1;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let eval = evaluate(&weights, test_set)?;
        log.rows.push(MetricsRow {
            epoch: epoch + 1,
            train_loss,
            test_mse: eval.mse,
            test_rel_mse: eval.mean_rel_mse,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let (Some(dir), Some(k)) = (checkpoints, cfg.checkpoint_every) {
            if (epoch + 1) % k == 0 {
                model::save_weights(&dir.join(format!("checkpoint_epoch_{:04}.afw", epoch + 1)), &weights)?;
            }
        }
    }
    if let Some(dir) = checkpoints {
        model::save_weights(&dir.join("model.afw"), &weights)?;
    }
    Ok((weights, log))
}

/// Median relative MSE of each solver at one noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub level: f64,
    pub model: f64,
    pub lu: f64,
    pub qr: f64,
    pub svd: f64,
}

pub const NOISE_HEADER: &str = "level,model,lu,qr,svd";

pub fn noise_table_csv(rows: &[NoiseRow]) -> String {
    let mut s = String::from(NOISE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{:e},{:e},{:e},{:e},{:e}\n", r.level, r.model, r.lu, r.qr, r.svd));
    }
    s
}

/// Perturbs every right-hand side at each level and scores the model and the
/// three classical solvers against the clean labels. A level-0 row is always
/// emitted first.
pub fn noise_benchmark(
    weights: &ModelWeights,
    samples: &[LinearSystemSample],
    levels: &[f64],
    rcond: f64,
    seed: u64,
) -> Result<Vec<NoiseRow>, TrainError> {
    if let Some(s) = samples.first() {
        if s.dim() + 1 != weights.config().token_dim || s.dim() > weights.config().max_tokens {
            return Err(TrainError::DimensionMismatch(format!(
                "dataset dimension {} vs model token_dim {}",
                s.dim(),
                weights.config().token_dim
            )));
        }
    }
    if let Some(bad) = levels.iter().find(|l| !(**l >= 0.0)) {
        return Err(TrainError::Config(format!("noise level {bad} is negative")));
    }
    let mut all_levels = vec![0.0];
    all_levels.extend(levels.iter().copied().filter(|l| *l != 0.0));

    let svds = samples.iter().map(|s| linalg::svd(&s.a)).collect::<Result<Vec<_>, _>>()?;
    let lus = samples.iter().map(|s| linalg::LuFactorization::factor(&s.a)).collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(all_levels.len());
    for (li, &level) in all_levels.iter().enumerate() {
        let noisy: Vec<Vector> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng =
                    seeding::rng(seeding::derive(seed, streams::NOISE, (li * samples.len() + i) as u64));
                bvp::add_noise(&s.b, level, &mut rng)
            })
            .collect();
        let examples = samples
            .iter()
            .zip(&noisy)
            .map(|(s, b)| Ok(Example { tokens: model::encode_system(&s.a, b, s.dim())?, target: s.x.clone() }))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let set = SupervisedSet::new(examples, None)?;
        let preds = predict(weights, &set)?;
        let mut m = Vec::new();
        let mut lu = Vec::new();
        let mut qr = Vec::new();
        let mut sv = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            m.push(relative_mse(&preds[i], &s.x)?);
            lu.push(relative_mse(&lus[i].solve(&noisy[i])?, &s.x)?);
            qr.push(relative_mse(&linalg::qr_least_squares(&s.a, &noisy[i])?, &s.x)?);
            sv.push(relative_mse(&linalg::solve_with_svd(&svds[i], &noisy[i], rcond)?, &s.x)?);
        }
        rows.push(NoiseRow {
            level,
            model: stats::median(&m),
            lu: stats::median(&lu),
            qr: stats::median(&qr),
            svd: stats::median(&sv),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-5), 1e-4);
        assert!((cosine_lr(100, 100, 1e-4, 1e-5) - 1e-5).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4, 1e-5) - 5.5e-5).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1e-4, 1e-5)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adamw_zero_grad_is_noop() {
        let mut w = vec![1.0, -2.0];
        let g = vec![0.0, 0.0];
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.0);
        opt.step(&mut [ParamGroup { value: &mut w, grad: &g, decay: true }], 0.1);
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn adamw_descends_on_quadratic() {
        let mut w = vec![1.0];
        let g = vec![1.0]; // d(w²/2)/dw at w = 1
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.01);
        opt.step(&mut [ParamGroup { value: &mut w, grad: &g, decay: true }], 0.1);
        assert!(w[0].abs() < 1.0);
    }

    #[test]
    fn adamw_matches_manual_trace() {
        // Two steps on two parameters, traced by hand:
        // step 1: m = 0.1 g, v = 0.05 g², m̂ = g, v̂ = g² → Δ = lr·sign(g)·|g|/(|g|+eps)
        let (b1, b2, eps, wd, lr) = (0.9f64, 0.95f64, 1e-8f64, 0.1f64, 0.01f64);
        let mut w = vec![0.5, -1.0];
        let mut opt = AdamW::new(b1, b2, eps, wd);
        let g1 = [0.2, -0.4];
        let g2 = [-0.1, 0.3];
        opt.step(&mut [ParamGroup { value: &mut w, grad: &g1, decay: true }], lr);
        opt.step(&mut [ParamGroup { value: &mut w, grad: &g2, decay: true }], lr);

        let mut expected = [0.5f64, -1.0];
        for i in 0..2 {
            let mut p = expected[i];
            p -= lr * wd * p;
            let m1 = (1.0 - b1) * g1[i];
            let v1 = (1.0 - b2) * g1[i] * g1[i];
            p -= lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
            p -= lr * wd * p;
            let m2 = b1 * m1 + (1.0 - b1) * g2[i];
            let v2 = b2 * v1 + (1.0 - b2) * g2[i] * g2[i];
            p -= lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
            expected[i] = p;
        }
        for i in 0..2 {
            assert!((w[i] - expected[i]).abs() < 1e-12, "{w:?} vs {expected:?}");
        }
    }

    #[test]
    fn relative_mse_cases() {
        let t = [1.0, -2.0, 3.0];
        assert_eq!(relative_mse(&t, &t).unwrap(), 0.0);
        assert!((relative_mse(&[2.0, -4.0, 6.0], &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((relative_mse(&[0.0; 3], &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(relative_mse(&[1.0], &[0.0]), Err(TrainError::DegenerateTruth(_))));
        assert!(relative_mse(&[1.0], &t).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_min: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn window_means_drop_partial_window() {
        assert_eq!(window_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }

    #[test]
    fn metrics_csv_shape() {
        let log = MetricsLog {
            rows: vec![MetricsRow { epoch: 1, train_loss: 1.0, test_mse: 2.0, test_rel_mse: 0.5, lr: 1e-4, seconds: 0.1 }],
        };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split(',').count(), 6);
    }
}
