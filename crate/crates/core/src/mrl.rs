//! Multi-scale training over a token pyramid.
//!
//! Each pyramid level `e` has its own linear head on the token-mean of the
//! restored level. The objective is `sum_e c_e * CE_e`, where `CE_e` is the
//! batch-mean softmax cross-entropy of head `e`. Gradients reach every head
//! and every level's modulation vectors in one backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matryoshka::{self, PyramidConfig, PyramidTrace, Sampling};
use crate::synthetic::{self, Sample, SyntheticDataset, SyntheticTask, TaskSpec};
use crate::tensor::Tensor;

/// Linear classifier `W r + b` with `W` stored row-major `(classes, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleHead {
    pub num_classes: usize,
    pub channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ScaleHead {
    pub fn zeros(num_classes: usize, channels: usize) -> Self {
        Self {
            num_classes,
            channels,
            weight: vec![0.0; num_classes * channels],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn logits(&self, readout: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| {
                let row = &self.weight[k * self.channels..(k + 1) * self.channels];
                row.iter().zip(readout).fold(self.bias[k], |acc, (w, r)| acc + w * r)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrlModel {
    pub pyramid: PyramidConfig,
    pub heads: Vec<ScaleHead>,
    pub loss_weights: Vec<f64>,
}

impl MrlModel {
    /// Zero heads and unit loss weights on every level.
    pub fn new(pyramid: PyramidConfig, num_classes: usize) -> Result<Self> {
        pyramid.validate()?;
        if num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        let levels = pyramid.num_levels();
        let heads = (0..levels).map(|_| ScaleHead::zeros(num_classes, pyramid.channels)).collect();
        Ok(Self {
            pyramid,
            heads,
            loss_weights: vec![1.0; levels],
        })
    }

    pub fn with_loss_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.loss_weights = weights;
        self.validate()?;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.heads[0].num_classes
    }

    pub fn num_levels(&self) -> usize {
        self.heads.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        let levels = self.pyramid.num_levels();
        if self.heads.len() != levels || self.loss_weights.len() != levels {
            return Err(Error::config(format!(
                "{levels} levels, {} heads, {} loss weights",
                self.heads.len(),
                self.loss_weights.len()
            )));
        }
        if self.loss_weights.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        let k = self.heads[0].num_classes;
        for h in &self.heads {
            if h.num_classes != k
                || h.channels != self.pyramid.channels
                || h.weight.len() != k * h.channels
                || h.bias.len() != k
            {
                return Err(Error::config("heads disagree on classes or channels"));
            }
        }
        Ok(())
    }

    /// Number of scalars in [`MrlModel::params`].
    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    /// All trainable scalars in a fixed order: per level `w_a`, `w_m`, then
    /// per head `weight`, `bias`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.pyramid.level_params {
            out.extend_from_slice(p.w_a_high.as_slice());
            out.extend_from_slice(p.w_m_low.as_slice());
        }
        for h in &self.heads {
            out.extend_from_slice(&h.weight);
            out.extend_from_slice(&h.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter().copied();
        let mut take = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().expect("length checked"));
        for p in &mut self.pyramid.level_params {
            take(p.w_a_high.as_mut_slice());
            take(p.w_m_low.as_mut_slice());
        }
        for h in &mut self.heads {
            take(&mut h.weight);
            take(&mut h.bias);
        }
        Ok(())
    }
}

/// Features prepared for repeated forward passes: the raw pooling chain is
/// independent of the parameters unless restored levels are chained, so it
/// is computed once.
#[derive(Debug, Clone)]
pub struct Prepared {
    input: PreparedInput,
    pub label: usize,
}

#[derive(Debug, Clone)]
enum PreparedInput {
    RawChain(Vec<Tensor>),
    Features(Tensor),
}

impl Prepared {
    pub fn new(sample: &Sample, cfg: &PyramidConfig) -> Result<Self> {
        let input = if cfg.chain_restored {
            PreparedInput::Features(sample.features.clone())
        } else {
            cfg.check_features(&sample.features)?;
            PreparedInput::RawChain(matryoshka::raw_chain(&sample.features, cfg.sampling)?)
        };
        Ok(Self {
            input,
            label: sample.label,
        })
    }

    fn trace(&self, cfg: &PyramidConfig) -> Result<PyramidTrace> {
        match &self.input {
            PreparedInput::RawChain(raw) => matryoshka::trace_from_raw(raw, cfg),
            PreparedInput::Features(f) => matryoshka::trace_pyramid(f, cfg),
        }
    }
}

pub fn prepare(dataset: &SyntheticDataset, cfg: &PyramidConfig) -> Result<Vec<Prepared>> {
    dataset.samples.iter().map(|s| Prepared::new(s, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_scale: Vec<f64>,
}

/// Cross-entropy of `logits` against `label`, and its gradient.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = m + z.ln() - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn check_batch(model: &MrlModel, batch: &[&Prepared]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    if let Some(p) = batch.iter().find(|p| p.label >= model.num_classes()) {
        return Err(Error::shape(format!(
            "label {} outside {} classes",
            p.label,
            model.num_classes()
        )));
    }
    Ok(())
}

pub fn forward_loss(model: &MrlModel, batch: &[&Prepared]) -> Result<LossReport> {
    check_batch(model, batch)?;
    let levels = model.num_levels();
    let mut per_scale = vec![0.0; levels];
    for p in batch {
        let trace = p.trace(&model.pyramid)?;
        for (e, level) in trace.pyramid.levels.iter().enumerate() {
            let logits = model.heads[e].logits(&level.restored.channel_means());
            per_scale[e] += softmax_xent(&logits, p.label).0;
        }
    }
    let b = batch.len() as f64;
    per_scale.iter_mut().for_each(|l| *l /= b);
    let total = weighted_total(&model.loss_weights, &per_scale);
    Ok(LossReport { total, per_scale })
}

fn weighted_total(weights: &[f64], per_scale: &[f64]) -> f64 {
    weights.iter().zip(per_scale).map(|(c, l)| c * l).sum()
}

/// Loss and gradient with respect to [`MrlModel::params`].
pub fn loss_and_grad(model: &MrlModel, batch: &[&Prepared]) -> Result<(LossReport, Vec<f64>)> {
    check_batch(model, batch)?;
    let levels = model.num_levels();
    let c = model.pyramid.channels;
    let k = model.num_classes();
    let b = batch.len() as f64;

    let mut per_scale = vec![0.0; levels];
    let mut g_fmvr = vec![(vec![0.0; c], vec![0.0; c]); levels];
    let mut g_heads: Vec<ScaleHead> = (0..levels).map(|_| ScaleHead::zeros(k, c)).collect();

    for p in batch {
        let trace = p.trace(&model.pyramid)?;
        let mut grad_levels = Vec::with_capacity(levels);
        for (e, level) in trace.pyramid.levels.iter().enumerate() {
            let readout = level.restored.channel_means();
            let head = &model.heads[e];
            let (loss, dlogits) = softmax_xent(&head.logits(&readout), p.label);
            per_scale[e] += loss;
            let scale = model.loss_weights[e] / b;
            let gh = &mut g_heads[e];
            let mut dreadout = vec![0.0; c];
            for (kk, dl) in dlogits.iter().enumerate() {
                let dl = dl * scale;
                gh.bias[kk] += dl;
                for ch in 0..c {
                    gh.weight[kk * c + ch] += dl * readout[ch];
                    dreadout[ch] += dl * head.weight[kk * c + ch];
                }
            }
            let cells = (level.side * level.side) as f64;
            let (h, w) = (level.restored.height(), level.restored.width());
            grad_levels.push(Tensor::from_fn((c, h, w), |ch, _, _| dreadout[ch] / cells)?);
        }
        let grads = matryoshka::pyramid_backward(&trace, &model.pyramid, &grad_levels)?;
        for (acc, (ga, gm)) in g_fmvr.iter_mut().zip(&grads.params) {
            acc.0.iter_mut().zip(ga.as_slice()).for_each(|(a, g)| *a += g);
            acc.1.iter_mut().zip(gm.as_slice()).for_each(|(a, g)| *a += g);
        }
    }

    per_scale.iter_mut().for_each(|l| *l /= b);
    let total = weighted_total(&model.loss_weights, &per_scale);
    let mut flat = Vec::with_capacity(model.num_params());
    for (ga, gm) in &g_fmvr {
        flat.extend_from_slice(ga);
        flat.extend_from_slice(gm);
    }
    for h in &g_heads {
        flat.extend_from_slice(&h.weight);
        flat.extend_from_slice(&h.bias);
    }
    Ok((LossReport { total, per_scale }, flat))
}

/// Gradient descent with heavy-ball momentum: `v = beta v + g; p -= lr v`.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub lr: f64,
    pub beta: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(lr: f64, beta: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&beta) {
            return Err(Error::config(format!("bad optimizer settings lr={lr} beta={beta}")));
        }
        Ok(Self {
            lr,
            beta,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.beta * *v + g;
            *p -= self.lr * *v;
        }
    }
}

/// One update; returns the loss measured before the update.
pub fn backward_and_step(model: &mut MrlModel, batch: &[&Prepared], opt: &mut Momentum) -> Result<LossReport> {
    let (report, grad) = loss_and_grad(model, batch)?;
    let mut params = model.params();
    opt.step(&mut params, &grad);
    model.set_params(&params)?;
    Ok(report)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax accuracy of every level's head.
pub fn evaluate(model: &MrlModel, data: &[Prepared]) -> Result<Vec<f64>> {
    let mut correct = vec![0usize; model.num_levels()];
    for p in data {
        let trace = p.trace(&model.pyramid)?;
        for (e, level) in trace.pyramid.levels.iter().enumerate() {
            let logits = model.heads[e].logits(&level.restored.channel_means());
            if argmax(&logits) == p.label {
                correct[e] += 1;
            }
        }
    }
    Ok(correct.iter().map(|&c| c as f64 / data.len().max(1) as f64).collect())
}

/// Accuracy of a single level, computed without touching the other heads.
pub fn evaluate_level(model: &MrlModel, data: &[Prepared], level: usize) -> Result<f64> {
    if level >= model.num_levels() {
        return Err(Error::config(format!("level {level} out of {}", model.num_levels())));
    }
    let mut correct = 0usize;
    for p in data {
        let trace = p.trace(&model.pyramid)?;
        let l = &trace.pyramid.levels[level];
        if argmax(&model.heads[level].logits(&l.restored.channel_means())) == p.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Class-balanced minibatches: position `j` of step `t` draws uniformly
/// from class `(t * size + j) mod K`.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
    size: usize,
    step: usize,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], num_classes: usize, size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class
                .get_mut(l)
                .ok_or_else(|| Error::config(format!("label {l} outside {num_classes} classes")))?
                .push(i);
        }
        if by_class.iter().any(|c| c.is_empty()) {
            return Err(Error::config("every class needs at least one training sample"));
        }
        Ok(Self {
            by_class,
            size,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let k = self.by_class.len();
        let start = self.step * self.size;
        self.step += 1;
        (0..self.size)
            .map(|j| {
                let pool = &self.by_class[(start + j) % k];
                pool[self.rng.random_range(0..pool.len())]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossReport,
}

/// Runs `steps` updates and returns the pre-update loss of each.
pub fn fit(
    model: &mut MrlModel,
    train: &[Prepared],
    opt: &mut Momentum,
    sampler: &mut BalancedSampler,
    steps: usize,
) -> Result<Vec<StepRecord>> {
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx = sampler.next_batch();
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &train[i]).collect();
        let loss = backward_and_step(model, &batch, opt)?;
        history.push(StepRecord { step, loss });
    }
    Ok(history)
}

/// Trailing moving average with window `w` (one value per full window).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || values.len() < w {
        return Vec::new();
    }
    values.windows(w).map(|win| win.iter().sum::<f64>() / w as f64).collect()
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub channels: usize,
    pub base_side: usize,
    pub sampling: Sampling,
    pub fmvr_enabled: bool,
    pub residual_skip: bool,
    pub chain_restored: bool,
    /// One weight per level; `None` means 1 everywhere.
    pub loss_weights: Option<Vec<f64>>,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub noise_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 8,
            channels: 16,
            base_side: 24,
            sampling: Sampling::AvgPool,
            fmvr_enabled: true,
            residual_skip: false,
            chain_restored: false,
            loss_weights: None,
            lr: 1e-2,
            momentum: 0.9,
            steps: 300,
            batch_size: 32,
            train_size: 2048,
            eval_size: 512,
            noise_sigma: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn pyramid(&self) -> Result<PyramidConfig> {
        Ok(PyramidConfig::new(self.base_side, self.channels, self.sampling, self.fmvr_enabled)?
            .with_residual_skip(self.residual_skip)
            .with_chain_restored(self.chain_restored))
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        let mut spec = TaskSpec::new(self.num_classes, self.channels);
        spec.side = self.base_side;
        spec.noise_sigma = self.noise_sigma;
        SyntheticTask::new(self.seed, spec)
    }

    pub fn model(&self) -> Result<MrlModel> {
        let model = MrlModel::new(self.pyramid()?, self.num_classes)?;
        match &self.loss_weights {
            Some(w) => model.with_loss_weights(w.clone()),
            None => Ok(model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        self.task()?;
        if self.batch_size == 0 || self.train_size < self.num_classes || self.eval_size == 0 {
            return Err(Error::config(
                "batch_size and eval_size must be positive and train_size at least num_classes",
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        Momentum::new(self.lr, self.momentum)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MrlModel,
    pub history: Vec<StepRecord>,
    /// Per-level accuracy on the held-out split.
    pub accuracy: Vec<f64>,
}

/// Held-out samples of the run's task.
pub fn eval_split(cfg: &TrainConfig) -> Result<SyntheticDataset> {
    Ok(cfg.task()?.generate(1, cfg.eval_size))
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = cfg.task()?;
    let mut model = cfg.model()?;
    let train_set = prepare(&task.generate(0, cfg.train_size), &model.pyramid)?;
    let eval_set = prepare(&task.generate(1, cfg.eval_size), &model.pyramid)?;
    let labels: Vec<usize> = train_set.iter().map(|p| p.label).collect();
    let mut sampler = BalancedSampler::new(&labels, cfg.num_classes, cfg.batch_size, synthetic::stream_seed(cfg.seed, 1 << 32))?;
    let mut opt = Momentum::new(cfg.lr, cfg.momentum)?;
    let history = fit(&mut model, &train_set, &mut opt, &mut sampler, cfg.steps)?;
    let accuracy = evaluate(&model, &eval_set)?;
    Ok(TrainOutcome {
        model,
        history,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matryoshka::Sampling;
    use crate::synthetic::generate_dataset;

    #[test]
    fn uniform_logits_give_ln_k() {
        let (loss, grad) = softmax_xent(&[0.0; 5], 2);
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_weights_zero_total() {
        let d = generate_dataset(0, 4, 4, 2).unwrap();
        let cfg = PyramidConfig::new(24, 2, Sampling::AvgPool, true).unwrap();
        let model = MrlModel::new(cfg.clone(), 4).unwrap().with_loss_weights(vec![0.0; 5]).unwrap();
        let prep = prepare(&d, &cfg).unwrap();
        let batch: Vec<_> = prep.iter().collect();
        let r = forward_loss(&model, &batch).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.per_scale.iter().all(|l| (l - 4f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let d = generate_dataset(1, 8, 4, 2).unwrap();
        let cfg = PyramidConfig::new(24, 2, Sampling::AvgPool, true).unwrap();
        let mut model = MrlModel::new(cfg.clone(), 4).unwrap();
        let before = model.clone();
        let prep = prepare(&d, &cfg).unwrap();
        let batch: Vec<_> = prep.iter().collect();
        let mut opt = Momentum::new(0.0, 0.9).unwrap();
        for _ in 0..3 {
            backward_and_step(&mut model, &batch, &mut opt).unwrap();
        }
        assert_eq!(model, before);
    }

    #[test]
    fn params_round_trip() {
        let cfg = PyramidConfig::new(4, 3, Sampling::AvgPool, true).unwrap();
        let mut model = MrlModel::new(cfg, 5).unwrap();
        let n = model.num_params();
        assert_eq!(n, 3 * (2 * 3) + 3 * (5 * 3 + 5));
        let v: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        model.set_params(&v).unwrap();
        assert_eq!(model.params(), v);
        assert!(model.set_params(&v[1..]).is_err());
    }

    #[test]
    fn balanced_sampler_cycles_classes() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let mut s = BalancedSampler::new(&labels, 4, 6, 0).unwrap();
        let b0 = s.next_batch();
        let b1 = s.next_batch();
        let classes: Vec<usize> = b0.iter().chain(&b1).map(|&i| labels[i]).collect();
        assert_eq!(classes, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3]);
        assert!(BalancedSampler::new(&[0, 0], 2, 4, 0).is_err());
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1., 2., 3., 4.], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.], 2).is_empty());
    }

    #[test]
    fn empty_batch_errors() {
        let cfg = PyramidConfig::new(4, 1, Sampling::AvgPool, true).unwrap();
        let model = MrlModel::new(cfg, 2).unwrap();
        assert!(forward_loss(&model, &[]).is_err());
    }
}
