//! Float pretraining, two-stage quantization-aware training, evaluation,
//! and sensitivity probes.

mod optim;
mod probe;
mod run;

pub use optim::{cosine_lr, AdamW};
pub use probe::{
    eight_bit_reference, head_quantizers, probe_head_sensitivity, probe_mlp_components, HeadProbe,
    MlpProbe, MlpProbeRow, MlpReference,
};
pub use run::{read_metrics, RunDir, RunError, ALLOCATION_FILE, CHECKPOINT_FILE, LOCK_FILE, METRICS_FILE};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::bitops::{self, BitAllocation, CostModel};
use crate::data::{self, DataError, Dataset, DatasetSpec, Split};
use crate::quant::{discretize_bit, QuantError, MAX_BIT, MIN_BIT};
use crate::vit::{Forward, ModelConfig, QuantMode, Vit, VitError};

/// Floor applied to every scale after a gradient step.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model does not match config: {0}")]
    Mismatch(String),
    #[error("layer {layer} out of range for depth {depth}")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    BitOps(#[from] bitops::BitOpsError),
}

/// Everything a training run needs. Unknown keys are rejected when parsed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DatasetSpec,
    /// Target `N` of the `N`-bit BitOPs budget.
    #[serde(default = "defaults::constraint_bits")]
    pub constraint_bits: u8,
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    /// Fraction of epochs spent searching bits.
    #[serde(default = "defaults::sigma")]
    pub sigma: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr_weights")]
    pub lr_weights: f64,
    /// Step size for scales and bit-widths.
    #[serde(default = "defaults::lr_quant")]
    pub lr_quant: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Training images used to calibrate activation scales.
    #[serde(default = "defaults::calibration_size")]
    pub calibration_size: usize,
    /// The penalty measures BitOPs in units of `budget / penalty_units`, so
    /// a 1% overshoot is one unit.
    #[serde(default = "defaults::penalty_units")]
    pub penalty_units: f64,
    #[serde(default = "defaults::eval_batch_size")]
    pub eval_batch_size: usize,
}

mod defaults {
    pub fn constraint_bits() -> u8 {
        4
    }
    pub fn eta() -> f64 {
        0.1
    }
    pub fn sigma() -> f64 {
        0.9
    }
    pub fn epochs() -> usize {
        60
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr_weights() -> f64 {
        1e-3
    }
    pub fn lr_quant() -> f64 {
        1e-2
    }
    pub fn weight_decay() -> f64 {
        0.05
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn calibration_size() -> usize {
        64
    }
    pub fn penalty_units() -> f64 {
        100.0
    }
    pub fn eval_batch_size() -> usize {
        256
    }
}

impl TrainConfig {
    /// Defaults around a model and a dataset.
    pub fn new(model: ModelConfig, data: DatasetSpec) -> Self {
        Self {
            model,
            data,
            constraint_bits: defaults::constraint_bits(),
            eta: defaults::eta(),
            sigma: defaults::sigma(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lr_weights: defaults::lr_weights(),
            lr_quant: defaults::lr_quant(),
            weight_decay: defaults::weight_decay(),
            adam_beta1: defaults::beta1(),
            adam_beta2: defaults::beta2(),
            adam_eps: defaults::adam_eps(),
            seed: 0,
            calibration_size: defaults::calibration_size(),
            penalty_units: defaults::penalty_units(),
            eval_batch_size: defaults::eval_batch_size(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if !(MIN_BIT..=MAX_BIT).contains(&self.constraint_bits) {
            return bad(format!("constraint_bits {} outside [2, 8]", self.constraint_bits));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return bad(format!("sigma {} outside [0, 1]", self.sigma));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {} must be finite and non-negative", self.eta));
        }
        for (name, v) in [
            ("lr_weights", self.lr_weights),
            ("lr_quant", self.lr_quant),
            ("adam_eps", self.adam_eps),
            ("penalty_units", self.penalty_units),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1)"));
            }
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("calibration_size", self.calibration_size),
            ("eval_batch_size", self.eval_batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Epochs in the searching stage, `round(σ · epochs)`.
    pub fn search_epochs(&self) -> usize {
        (self.sigma * self.epochs as f64).round() as usize
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset, DataError> {
        let m = &self.model;
        self.data.load(split, m.in_channels, m.image_size, m.num_classes)
    }

    pub fn budget(&self) -> f64 {
        bitops::uniform_budget(&self.model, self.constraint_bits)
    }

    fn adamw(&self, params: &[crate::vit::Param]) -> AdamW {
        AdamW::new(params, self.adam_beta1, self.adam_beta2, self.adam_eps, self.weight_decay)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Float,
    Search,
    Dive,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    /// Running accuracy over the epoch's training batches.
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    /// Mean penalty over the epoch's steps.
    pub penalty: f64,
    /// Discrete BitOPs of the allocation at the end of the epoch.
    pub bitops: Option<f64>,
    pub budget: Option<f64>,
    pub allocation: Option<BitAllocation>,
}

/// A trained model with its optimizer and log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Vit,
    pub optimizer: AdamW,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.eval_accuracy)
    }
}

/// Top-1 accuracy. Read-only; batches run in parallel and are reduced in
/// order.
pub fn evaluate(model: &Vit, ds: &Dataset, batch_size: usize) -> Result<f64, TrainError> {
    let starts: Vec<usize> = (0..ds.len()).step_by(batch_size.max(1)).collect();
    let correct = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + batch_size).min(ds.len())).collect();
            let (images, labels) = ds.gather(&idx);
            let pred = model.predict(&images)?;
            Ok(pred.iter().zip(&labels).filter(|(p, l)| p == l).count())
        })
        .collect::<Result<Vec<usize>, VitError>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / ds.len().max(1) as f64)
}

/// Seed of the batch permutation of `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct StepStats {
    loss: f64,
    penalty: f64,
    correct: usize,
}

/// Penalty wiring for the searching stage.
struct Search<'c> {
    cost: &'c CostModel,
    units: f64,
    eta: f64,
}

fn train_step(
    model: &mut Vit,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    images: &Tensor,
    labels: &[usize],
    lr_w: f64,
    search: Option<&Search>,
) -> Result<StepStats, TrainError> {
    let (grads, stats) = {
        let mut fwd = Forward::new(model, true);
        let logits = fwd.logits(images)?;
        let ce = fwd.tape.cross_entropy(logits, labels)?;
        let (total, pen) = match search {
            Some(s) => {
                let cost = s.cost.record(&mut fwd)?;
                let pen = bitops::penalty(&mut fwd.tape, cost, s.units, s.eta)?;
                (fwd.tape.add(ce, pen)?, Some(pen))
            }
            None => (ce, None),
        };
        fwd.tape.backward(total)?;
        let classes = model.config.num_classes;
        let correct = fwd
            .tape
            .value(logits)
            .data()
            .chunks(classes)
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        let stats = StepStats {
            loss: fwd.tape.value(ce).item(),
            penalty: pen.map_or(0.0, |p| fwd.tape.value(p).item()),
            correct,
        };
        (fwd.gradients(), stats)
    };
    opt.update(&mut model.params, &grads.params, lr_w);
    for (i, q) in model.quantizers.iter_mut().enumerate() {
        if let Some(g) = &grads.scales[i] {
            for (s, gs) in q.state.scales.iter_mut().zip(g.data()) {
                *s = (*s - cfg.lr_quant * gs).max(MIN_SCALE);
            }
        }
        if let Some(gb) = grads.b_tilde[i] {
            q.state.b_tilde -= cfg.lr_quant * gb;
        }
    }
    Ok(stats)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

struct EpochTotals {
    loss: f64,
    penalty: f64,
    correct: usize,
    steps: usize,
    seen: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Vit,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    train: &Dataset,
    epoch: usize,
    step: &mut u64,
    total_steps: u64,
    search: Option<&Search>,
) -> Result<EpochTotals, TrainError> {
    let mut t = EpochTotals {
        loss: 0.0,
        penalty: 0.0,
        correct: 0,
        steps: 0,
        seen: 0,
    };
    for (images, labels) in data::batches(train, cfg.batch_size, epoch_seed(cfg.seed, epoch), true) {
        let lr = cosine_lr(cfg.lr_weights, *step, total_steps);
        let s = train_step(model, opt, cfg, &images, &labels, lr, search)?;
        *step += 1;
        t.loss += s.loss;
        t.penalty += s.penalty;
        t.correct += s.correct;
        t.steps += 1;
        t.seen += labels.len();
    }
    // Parameters live at checkpoint precision between epochs, so a saved
    // model evaluates exactly as logged.
    model.snap_to_f32();
    Ok(t)
}

fn check_data(cfg: &TrainConfig, ds: &Dataset) -> Result<(), TrainError> {
    let m = &cfg.model;
    let expected = [m.in_channels, m.image_size, m.image_size];
    if ds.image_shape() != expected {
        return Err(DataError::ShapeMismatch {
            expected: expected.to_vec(),
            got: ds.image_shape().to_vec(),
        }
        .into());
    }
    if ds.num_classes > m.num_classes {
        return Err(TrainError::Mismatch(format!(
            "dataset has {} classes, model {}",
            ds.num_classes, m.num_classes
        )));
    }
    Ok(())
}

fn steps_per_epoch(cfg: &TrainConfig, train: &Dataset) -> u64 {
    train.len().div_ceil(cfg.batch_size) as u64
}

/// Train the model of `cfg` in float mode from a fresh seeded init.
pub fn pretrain_float(cfg: &TrainConfig, train: &Dataset, eval: &Dataset) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_data(cfg, train)?;
    let mut mcfg = cfg.model.clone();
    mcfg.quant_mode = QuantMode::Float;
    let mut model = Vit::new(mcfg, cfg.seed)?;
    model.snap_to_f32();
    let mut opt = cfg.adamw(&model.params);
    let total = steps_per_epoch(cfg, train) * cfg.epochs as u64;
    let mut step = 0;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t = run_epoch(&mut model, &mut opt, cfg, train, epoch, &mut step, total, None)?;
        metrics.push(EpochMetrics {
            epoch,
            stage: Stage::Float,
            train_loss: t.loss / t.steps as f64,
            train_accuracy: t.correct as f64 / t.seen as f64,
            eval_accuracy: evaluate(&model, eval, cfg.eval_batch_size)?,
            penalty: 0.0,
            bitops: None,
            budget: None,
            allocation: None,
        });
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        metrics,
    })
}

fn same_shape(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |c: &ModelConfig| ModelConfig {
        quant_mode: QuantMode::Float,
        ..c.clone()
    };
    strip(a) == strip(b)
}

/// Quantized model initialized from a float one: interior bits at `N + 1`,
/// patch embedding and classifier at 8 (both still learnable), and all
/// seven scale entries of every quantizer MSE-initialized. Weight scales
/// see the full weight tensor; activation scales see `calibration`.
pub fn init_qat(float: &Vit, cfg: &TrainConfig, calibration: &Tensor) -> Result<Vit, TrainError> {
    cfg.validate()?;
    if !same_shape(&float.config, &cfg.model) {
        return Err(TrainError::Mismatch(
            "checkpoint architecture differs from the training config".into(),
        ));
    }
    let mut model = float.clone();
    model.config.quant_mode = QuantMode::Learned;
    model.bypass = vec![false; model.quantizers.len()];
    let interior = (cfg.constraint_bits + 1).min(MAX_BIT) as f64;
    for q in &mut model.quantizers {
        q.state.b_tilde = if q.spec.is_boundary() { MAX_BIT as f64 } else { interior };
        q.state.frozen_bit = None;
    }
    model.calibrate(calibration, |_| true)?;
    Ok(model)
}

fn freeze_bits(model: &mut Vit) -> Result<(), TrainError> {
    for q in &mut model.quantizers {
        q.state.frozen_bit = Some(discretize_bit(q.state.b_tilde)?);
    }
    Ok(())
}

/// Two-stage QAT. The first `round(σ · epochs)` epochs search: the loss adds
/// the BitOPs penalty and weights, scales and bit-widths all update. At the
/// boundary every bit is frozen at its discretized value; the remaining
/// epochs train weights and the active scales only.
pub fn train_qat(
    model: Vit,
    cfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_data(cfg, train)?;
    if model.config.quant_mode != QuantMode::Learned {
        return Err(TrainError::Mismatch("QAT needs a model in learned mode".into()));
    }
    let mut model = model;
    let budget = cfg.budget();
    let cost = CostModel::new(&model, budget / cfg.penalty_units)?;
    let search = Search {
        cost: &cost,
        units: cfg.penalty_units,
        eta: cfg.eta,
    };
    let search_epochs = cfg.search_epochs();
    let mut opt = cfg.adamw(&model.params);
    let total = steps_per_epoch(cfg, train) * cfg.epochs as u64;
    let mut step = 0;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch == search_epochs {
            freeze_bits(&mut model)?;
        }
        let stage = if epoch < search_epochs { Stage::Search } else { Stage::Dive };
        let s = (stage == Stage::Search).then_some(&search);
        let t = run_epoch(&mut model, &mut opt, cfg, train, epoch, &mut step, total, s)?;
        let allocation = model.get_allocation()?;
        metrics.push(EpochMetrics {
            epoch,
            stage,
            train_loss: t.loss / t.steps as f64,
            train_accuracy: t.correct as f64 / t.seen as f64,
            eval_accuracy: evaluate(&model, eval, cfg.eval_batch_size)?,
            penalty: t.penalty / t.steps as f64,
            bitops: Some(bitops::model_bitops(&model.config, &allocation)?.total),
            budget: Some(budget),
            allocation: Some(allocation),
        });
    }
    if search_epochs >= cfg.epochs {
        freeze_bits(&mut model)?;
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        metrics,
    })
}

/// Calibration images of a run: the first `calibration_size` training samples.
pub fn calibration_batch(cfg: &TrainConfig, train: &Dataset) -> Tensor {
    train.head(cfg.calibration_size).0
}
