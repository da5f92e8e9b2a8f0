//! Training: momentum SGD with separate learning-rate groups for
//! quantizer scalars, joint / quantizer-only / distillation modes,
//! quantizer initialization from data, and progressive bit-width
//! finetuning where each stage starts from the previous stage's weights
//! and interval parameters.

use crate::data::DatasetHandle;
use crate::error::{QilError, Result};
use crate::nn::{
    mse_logits, softmax_cross_entropy, GradStore, Mode, Network, ParamClass, QuantStat,
};
use crate::quantizer::{self, quantize};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Joint,
    QuantizerOnly,
    Distill,
}

/// Optimizer hyperparameters and schedule. Mirrors the JSON experiment
/// config field for field.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    #[serde(default = "default_qlr_ratio")]
    pub quantizer_lr_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_one")]
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub mode: TrainMode,
    /// (activation bits, weight bits) per progressive stage.
    #[serde(default)]
    pub bit_schedule: Vec<(u32, u32)>,
    pub seed: u64,
    /// Train the weight-transformer exponent (fixed at `gamma_init`
    /// otherwise).
    #[serde(default = "default_true")]
    pub gamma_trainable: bool,
    #[serde(default = "default_one")]
    pub gamma_init: f64,
    /// Distillation sub-mode: freeze weights and train only quantizers.
    #[serde(default)]
    pub distill_freeze_weights: bool,
}

fn default_qlr_ratio() -> f64 {
    0.01
}
fn default_one() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantizer_lr_ratio > 0.0) {
            return Err(QilError::InvalidConfig(
                "quantizer_lr_ratio must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(QilError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.gamma_init > 0.0) {
            return Err(QilError::InvalidConfig("gamma_init must be positive".into()));
        }
        validate_schedule(&self.bit_schedule)?;
        Ok(())
    }

    /// Step-decay schedule: `base_lr * factor^(#decay epochs <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base_lr * self.lr_decay_factor.powi(hits as i32)
    }
}

/// Bit schedules must strictly decrease (component-wise non-increasing,
/// strictly somewhere at each step).
pub fn validate_schedule(schedule: &[(u32, u32)]) -> Result<()> {
    for w in schedule.windows(2) {
        let ((ax, aw), (bx, bw)) = (w[0], w[1]);
        if bx > ax || bw > aw || (bx == ax && bw == aw) {
            return Err(QilError::InvalidConfig(format!(
                "bit schedule must strictly decrease, got ({ax},{aw}) -> ({bx},{bw})"
            )));
        }
    }
    Ok(())
}

/// One epoch's worth of metrics.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Fraction of correct training predictions; in distillation mode,
    /// agreement with the teacher's argmax (labels are never read).
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Weight pruning ratio per quantized layer.
    pub prune_weights: Vec<(String, f64)>,
    /// Activation pruning ratio per quantized layer, measured over the
    /// eval pass.
    pub prune_acts: Vec<(String, f64)>,
    /// Quantizer interval scalars at the end of the epoch.
    pub quantizer_snapshot: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub records: Vec<EpochRecord>,
}

/// Momentum SGD with per-class parameter groups: weights take weight
/// decay, quantizer scalars take `lr * quantizer_lr_ratio` and no decay,
/// and the radius/gamma clamps are applied after every step.
pub struct Sgd {
    velocity: IndexMap<String, Tensor>,
}

impl Sgd {
    pub fn new() -> Self {
        Sgd {
            velocity: IndexMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &GradStore, cfg: &TrainConfig, lr_now: f64) {
        let freeze_model = matches!(cfg.mode, TrainMode::QuantizerOnly)
            || (matches!(cfg.mode, TrainMode::Distill) && cfg.distill_freeze_weights);
        for (name, param) in net.params.iter_mut() {
            if !param.class.is_trainable() {
                continue;
            }
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let is_quant = param.class.is_quantizer();
            if freeze_model && !is_quant {
                continue;
            }
            if param.class == ParamClass::QuantGamma && !cfg.gamma_trainable {
                continue;
            }
            let lr = if is_quant {
                lr_now * cfg.quantizer_lr_ratio
            } else {
                lr_now
            };
            let decay = if param.class == ParamClass::Weight {
                cfg.weight_decay
            } else {
                0.0
            };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.value.shape()));
            for ((vi, &gi), pi) in v
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(param.value.data_mut().iter_mut())
            {
                *vi = cfg.momentum * *vi + gi + decay * *pi;
                *pi -= lr * *vi;
            }
            match param.class {
                ParamClass::QuantRadius => {
                    let d = param.value.data_mut();
                    d[0] = d[0].max(quantizer::MIN_RADIUS);
                }
                ParamClass::QuantGamma => {
                    let d = param.value.data_mut();
                    d[0] = d[0].clamp(quantizer::GAMMA_RANGE.0, quantizer::GAMMA_RANGE.1);
                }
                _ => {}
            }
        }
    }
}

impl Default for Sgd {
    fn default() -> Self {
        Self::new()
    }
}

/// Initialize quantizer intervals from the current weights and a
/// calibration batch: weight intervals span `[0, max|w|]`, activation
/// intervals span `[0, p99]` of the layer's input observed on the
/// full-precision network.
pub fn init_quantizers(net: &mut Network, calibration: &Tensor) -> Result<()> {
    let names = net.quantized_layer_names();
    for name in &names {
        let w = net.params.get(&format!("{name}.weight"));
        let m = w.max_abs();
        if m == 0.0 {
            return Err(QilError::DegenerateInit(format!(
                "{name}.weight is all zeros"
            )));
        }
        net.params.set_scalar(&format!("{name}.wq.c"), m / 2.0);
        net.params.set_scalar(&format!("{name}.wq.d"), m / 2.0);
        net.params.set_scalar(&format!("{name}.wq.gamma"), 1.0);
    }
    // activation intervals from a full-precision pass
    let was_active = net.quant_active;
    net.quant_active = false;
    let result = net.forward(calibration, Mode::Eval);
    net.quant_active = was_active;
    let (_, cache) = result?;
    let captured = net.quant_layer_inputs(&cache);
    for name in &names {
        let acts = captured
            .get(name.as_str())
            .ok_or_else(|| QilError::State(format!("no activations captured for {name}")))?;
        let p99 = percentile(acts, 0.99);
        if !(p99 > 0.0) {
            return Err(QilError::DegenerateInit(format!(
                "activation p99 for {name} is {p99}"
            )));
        }
        net.params.set_scalar(&format!("{name}.aq.c"), p99 / 2.0);
        net.params.set_scalar(&format!("{name}.aq.d"), p99 / 2.0);
    }
    Ok(())
}

/// Nearest-rank percentile (q in 0..1).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Weight pruning ratio per quantized layer at the current parameters.
pub fn weight_pruning(net: &Network) -> Vec<(String, f64)> {
    net.quantized_layer_names()
        .into_iter()
        .map(|name| {
            let spec = net.weight_quant_spec(&name).expect("quantized layer");
            let w = net.params.get(&format!("{name}.weight"));
            let qt = quantize(w, &net.interval_params(&name, true), &spec);
            let ratio = quantizer::pruning_ratio(&qt).expect("non-empty weights");
            (name, ratio)
        })
        .collect()
}

fn quantizer_snapshot(net: &Network) -> Vec<(String, f64)> {
    net.params
        .iter()
        .filter(|(_, p)| p.class.is_quantizer())
        .map(|(n, p)| (n.clone(), p.value.item()))
        .collect()
}

pub struct EvalStats {
    pub accuracy: f64,
    pub loss: f64,
    pub prune_acts: Vec<(String, f64)>,
}

/// Accuracy, mean loss and activation pruning ratios over a dataset.
pub fn evaluate(net: &Network, data: &DatasetHandle, batch_size: usize) -> Result<EvalStats> {
    if data.len() == 0 {
        return Err(QilError::Data("empty evaluation dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut act_zero: IndexMap<String, (usize, usize)> = IndexMap::new();
    let mut idx = 0;
    while idx < data.len() {
        let end = (idx + batch_size).min(data.len());
        let (x, labels) = data.batch_range(idx, end);
        let (logits, cache) = net.forward(&x, Mode::Eval)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * labels.len() as f64;
        correct += count_correct(&logits, &labels);
        for QuantStat {
            layer,
            zero_levels,
            total,
        } in &cache.act_stats
        {
            let e = act_zero.entry(layer.clone()).or_insert((0, 0));
            e.0 += zero_levels;
            e.1 += total;
        }
        idx = end;
    }
    Ok(EvalStats {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        prune_acts: act_zero
            .into_iter()
            .map(|(k, (z, t))| (k, z as f64 / t.max(1) as f64))
            .collect(),
    })
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_agree(student: &Tensor, teacher: &Tensor) -> usize {
    let classes = student.shape()[1];
    student
        .data()
        .chunks(classes)
        .zip(teacher.data().chunks(classes))
        .filter(|(s, t)| argmax(s) == argmax(t))
        .count()
}

/// Run the epoch loop. Joint and quantizer-only modes minimize
/// cross-entropy on labels; distillation minimizes the squared logit gap
/// to the teacher (run in eval mode at full precision) and never reads
/// labels. The network is trained in place; the report captures one
/// record per epoch.
pub fn train(
    net: &mut Network,
    train_data: &DatasetHandle,
    eval_data: &DatasetHandle,
    cfg: &TrainConfig,
    teacher: Option<&Network>,
) -> Result<RunReport> {
    cfg.validate()?;
    if train_data.len() == 0 {
        return Err(QilError::Data("empty training dataset".into()));
    }
    if matches!(cfg.mode, TrainMode::Distill) && teacher.is_none() {
        return Err(QilError::InvalidConfig(
            "distillation mode requires a teacher network".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new();
    let mut report = RunReport::default();
    let mut indices: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr_now = cfg.lr_at(epoch);
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let (x, labels) = train_data.batch(chunk);
            let (logits, cache) = net.forward(&x, Mode::Train)?;
            let (loss, grad_logits) = match (cfg.mode, teacher) {
                (TrainMode::Distill, Some(t)) => {
                    let (t_logits, _) = t.forward(&x, Mode::Eval)?;
                    correct += count_agree(&logits, &t_logits);
                    mse_logits(&logits, &t_logits)?
                }
                _ => {
                    correct += count_correct(&logits, &labels);
                    softmax_cross_entropy(&logits, &labels)?
                }
            };
            let grads = net.backward(&cache, &grad_logits)?;
            sgd.step(net, &grads, cfg, lr_now);
            net.apply_bn_updates(&cache);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let eval = evaluate(net, eval_data, cfg.batch_size)?;
        report.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            eval_loss: eval.loss,
            eval_accuracy: eval.accuracy,
            prune_weights: weight_pruning(net),
            prune_acts: eval.prune_acts,
            quantizer_snapshot: quantizer_snapshot(net),
        });
    }
    Ok(report)
}

/// Progressive finetuning: walk the bit schedule from high to low, each
/// stage initialized from the previous stage's network. Quantizer
/// intervals are inherited between stages and initialized from data only
/// at the first one; momentum buffers start fresh every stage.
pub fn progressive_train(
    fp_net: &Network,
    train_data: &DatasetHandle,
    eval_data: &DatasetHandle,
    cfg: &TrainConfig,
) -> Result<(Vec<Network>, Vec<RunReport>)> {
    cfg.validate()?;
    if cfg.bit_schedule.is_empty() {
        return Err(QilError::InvalidConfig("bit_schedule must not be empty".into()));
    }
    let mut nets = Vec::new();
    let mut reports = Vec::new();
    let mut current = fp_net.clone();
    for (stage, &(n_x, n_w)) in cfg.bit_schedule.iter().enumerate() {
        current.set_bits(n_x, n_w)?;
        current.quant_active = true;
        if stage == 0 {
            let calib = calibration_batch(train_data, 256);
            init_quantizers(&mut current, &calib)?;
            if cfg.gamma_init != 1.0 {
                for name in current.quantized_layer_names() {
                    current
                        .params
                        .set_scalar(&format!("{name}.wq.gamma"), cfg.gamma_init);
                }
            }
        }
        let report = train(&mut current, train_data, eval_data, cfg, None)?;
        nets.push(current.clone());
        reports.push(report);
    }
    Ok((nets, reports))
}

/// First `n` samples of a dataset, used to calibrate activation
/// intervals.
pub fn calibration_batch(data: &DatasetHandle, n: usize) -> Tensor {
    let end = n.min(data.len());
    let (x, _) = data.batch_range(0, end);
    x
}

#[cfg(test)]
mod tests;
