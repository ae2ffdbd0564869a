//! Differentiable fake quantization with learnable scale and bit-width.
//!
//! A quantizer owns a float bit-width `b_tilde` and a switchable scale
//! vector with one entry per candidate bit in `2..=8`. The active bit is
//! `round(clamp(b_tilde, 2, 8))` (or a frozen bit); only the matching scale
//! entry takes part in the forward pass and receives gradient.
//!
//! Surrogate gradients of `x_hat = alpha * round(clamp(x / alpha, -q_min, q_max))`:
//!
//! * `x`: 1 inside `[-q_min, q_max]` (in units of alpha), 0 outside.
//! * `alpha`: `round(x/alpha) - x/alpha` inside, `-q_min` below, `q_max`
//!   above, all times `1 / sqrt(numel * q_max)`.
//! * bit: through the clip levels only. Elements clamped below contribute
//!   `-alpha * dq_min/db`, elements clamped above `alpha * dq_max/db`, then
//!   pass through the rounding of `b_tilde` while it lies in `(2, 8)`.

use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

pub const MIN_BIT: u8 = 2;
pub const MAX_BIT: u8 = 8;
pub const NUM_CANDIDATE_BITS: usize = (MAX_BIT - MIN_BIT + 1) as usize;
/// Number of candidate scales searched by [`mse_init_scale`].
pub const MSE_GRID_POINTS: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("bit-width {0} is not finite")]
    NonFiniteBit(f64),
    #[error("bit {0} outside [2, 8]")]
    BitOutOfRange(u8),
    #[error("quantization scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("input to the quantizer is not finite")]
    NonFiniteInput,
    #[error("no samples for scale initialization")]
    EmptySamples,
    #[error("all calibration samples are zero")]
    AllZeroSamples,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// What a quantizer is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Activation,
    AttentionScore,
    HeadOutput,
    QEmbed,
    KEmbed,
    VEmbed,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Activation => "activation",
            Role::AttentionScore => "attention_score",
            Role::HeadOutput => "head_output",
            Role::QEmbed => "q_embed",
            Role::KEmbed => "k_embed",
            Role::VEmbed => "v_embed",
        }
    }

    /// Softmax outputs are the only non-negative quantized tensors.
    pub fn default_signed(self) -> bool {
        !matches!(self, Role::AttentionScore)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantLevels {
    pub q_min: u32,
    pub q_max: u32,
}

/// Learnables of one quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub b_tilde: f64,
    /// One scale per candidate bit, `scales[b - 2]`.
    pub scales: [f64; NUM_CANDIDATE_BITS],
    pub signed: bool,
    pub role: Role,
    pub frozen_bit: Option<u8>,
}

impl QuantizerState {
    pub fn new(role: Role, b_tilde: f64) -> Self {
        Self {
            b_tilde,
            scales: [1.0; NUM_CANDIDATE_BITS],
            signed: role.default_signed(),
            role,
            frozen_bit: None,
        }
    }

    /// Frozen bit when set, otherwise the discretized `b_tilde`.
    pub fn active_bit(&self) -> Result<u8, QuantError> {
        match self.frozen_bit {
            Some(b) if (MIN_BIT..=MAX_BIT).contains(&b) => Ok(b),
            Some(b) => Err(QuantError::BitOutOfRange(b)),
            None => discretize_bit(self.b_tilde),
        }
    }

    pub fn select_scale(&self) -> Result<f64, QuantError> {
        Ok(self.scales[scale_index(self.active_bit()?)])
    }

    /// MSE-initialize every entry of the switchable scale vector from
    /// `samples`, falling back to 1.0 when the samples are unusable.
    pub fn init_scales(&mut self, samples: &[f64]) {
        for bit in MIN_BIT..=MAX_BIT {
            self.scales[scale_index(bit)] =
                mse_init_scale(samples, bit, self.signed).unwrap_or(1.0);
        }
    }

    pub fn check(&self) -> Result<(), QuantError> {
        if let Some(&bad) = self.scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(QuantError::NonPositiveScale(bad));
        }
        self.active_bit().map(|_| ())
    }
}

pub fn scale_index(bit: u8) -> usize {
    (bit - MIN_BIT) as usize
}

/// `round_half_even(clamp(b_tilde, 2, 8))`.
pub fn discretize_bit(b_tilde: f64) -> Result<u8, QuantError> {
    if !b_tilde.is_finite() {
        return Err(QuantError::NonFiniteBit(b_tilde));
    }
    Ok(b_tilde
        .clamp(MIN_BIT as f64, MAX_BIT as f64)
        .round_ties_even() as u8)
}

pub fn levels(bit: u8, signed: bool) -> QuantLevels {
    assert!((MIN_BIT..=MAX_BIT).contains(&bit), "bit {bit} outside [2, 8]");
    if signed {
        QuantLevels {
            q_min: 1 << (bit - 1),
            q_max: (1 << (bit - 1)) - 1,
        }
    } else {
        QuantLevels {
            q_min: 0,
            q_max: (1 << bit) - 1,
        }
    }
}

#[inline]
fn quantize_scalar(x: f64, alpha: f64, lv: QuantLevels) -> f64 {
    alpha * (x / alpha).clamp(-(lv.q_min as f64), lv.q_max as f64).round_ties_even()
}

/// Forward fake quantization without recording anything.
pub fn fake_quantize_values(
    x: &[f64],
    alpha: f64,
    bit: u8,
    signed: bool,
) -> Result<Vec<f64>, QuantError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(QuantError::NonPositiveScale(alpha));
    }
    let lv = levels(bit, signed);
    Ok(x.iter().map(|&v| quantize_scalar(v, alpha, lv)).collect())
}

fn quant_error(samples: &[f64], alpha: f64, lv: QuantLevels) -> f64 {
    samples
        .iter()
        .map(|&x| {
            let e = x - quantize_scalar(x, alpha, lv);
            e * e
        })
        .sum()
}

/// Candidate scales searched by [`mse_init_scale`]: geometric in
/// `[max|x| / 2^(b+2), 2 max|x| / q_max]`.
pub fn mse_scale_grid(max_abs: f64, bit: u8, signed: bool) -> Vec<f64> {
    let lv = levels(bit, signed);
    let lo = max_abs / f64::powi(2.0, bit as i32 + 2);
    let hi = 2.0 * max_abs / lv.q_max as f64;
    let ratio = hi / lo;
    (0..MSE_GRID_POINTS)
        .map(|i| lo * ratio.powf(i as f64 / (MSE_GRID_POINTS - 1) as f64))
        .collect()
}

/// Scale minimizing the squared fake-quantization error of `samples`.
pub fn mse_init_scale(samples: &[f64], bit: u8, signed: bool) -> Result<f64, QuantError> {
    if samples.is_empty() {
        return Err(QuantError::EmptySamples);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFiniteInput);
    }
    let max_abs = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Err(QuantError::AllZeroSamples);
    }
    let lv = levels(bit, signed);
    let mut best = (f64::INFINITY, 1.0);
    for alpha in mse_scale_grid(max_abs, bit, signed) {
        let err = quant_error(samples, alpha, lv);
        if err < best.0 {
            best = (err, alpha);
        }
    }
    Ok(best.1)
}

/// Recorded `discretize_bit` with the clamp straight-through surrogate.
pub fn discretize_var(tape: &mut Tape, b_tilde: Var) -> Result<Var, QuantError> {
    let bit = discretize_bit(tape.value(b_tilde).item())?;
    Ok(tape.custom(
        &[b_tilde],
        |_| Ok(Tensor::scalar(bit as f64)),
        |inputs, _, g| {
            let b = inputs[0].item();
            let pass = b > MIN_BIT as f64 && b < MAX_BIT as f64;
            vec![Tensor::scalar(if pass { g.item() } else { 0.0 })]
        },
    )?)
}

/// Recorded `clamp(b_tilde, 2, 8)`. The gradient is 1 strictly inside; on or
/// beyond an end it passes only when a descent step would move `b_tilde`
/// back into the range, so a bit parked at 8 can still be pulled down.
pub fn clamp_bit_var(tape: &mut Tape, b_tilde: Var) -> Result<Var, QuantError> {
    let b = tape.value(b_tilde).item();
    if !b.is_finite() {
        return Err(QuantError::NonFiniteBit(b));
    }
    Ok(tape.custom(
        &[b_tilde],
        |xs| Ok(xs[0].map(|v| v.clamp(MIN_BIT as f64, MAX_BIT as f64))),
        |inputs, _, g| {
            let (b, g) = (inputs[0].item(), g.item());
            let pass = if b >= MAX_BIT as f64 {
                g > 0.0
            } else if b <= MIN_BIT as f64 {
                g < 0.0
            } else {
                true
            };
            vec![Tensor::scalar(if pass { g } else { 0.0 })]
        },
    )?)
}

/// Pick `scales[bit - 2]` out of the recorded scale vector. Only that
/// entry receives gradient; `bit` itself is a constant here.
pub fn select_scale_var(tape: &mut Tape, scales: Var, bit: u8) -> Result<Var, QuantError> {
    if !(MIN_BIT..=MAX_BIT).contains(&bit) {
        return Err(QuantError::BitOutOfRange(bit));
    }
    Ok(tape.narrow(scales, 0, scale_index(bit), 1)?)
}

/// Recorded fake quantization of `x` with scale `alpha` (shape `[1]`) and
/// integer-valued bit `bit` (shape `[1]`).
pub fn fake_quantize_var(
    tape: &mut Tape,
    x: Var,
    alpha: Var,
    bit: Var,
    signed: bool,
) -> Result<Var, QuantError> {
    let a = tape.value(alpha).item();
    if !(a > 0.0) || !a.is_finite() {
        return Err(QuantError::NonPositiveScale(a));
    }
    if !tape.value(x).is_finite() {
        return Err(QuantError::NonFiniteInput);
    }
    let b = tape.value(bit).item();
    if b.fract() != 0.0 || !(MIN_BIT as f64..=MAX_BIT as f64).contains(&b) {
        return Err(QuantError::NonFiniteBit(b));
    }
    let bit_value = b as u8;
    let lv = levels(bit_value, signed);
    let forward = move |xs: &[&Tensor]| {
        let alpha = xs[1].item();
        Ok(xs[0].map(|v| quantize_scalar(v, alpha, lv)))
    };
    let backward = move |inputs: &[&Tensor], _: &Tensor, g: &Tensor| {
        let x = inputs[0];
        let alpha = inputs[1].item();
        let (lo, hi) = (-(lv.q_min as f64), lv.q_max as f64);
        let grad_scale = 1.0 / ((x.len() as f64) * lv.q_max as f64).sqrt();
        let pow = f64::powi(2.0, bit_value as i32 - 1);
        let (dqmin_db, dqmax_db) = if signed {
            (LN_2 * pow, LN_2 * pow)
        } else {
            (0.0, LN_2 * 2.0 * pow)
        };
        let mut gx = vec![0.0; x.len()];
        let mut galpha = 0.0;
        let mut gbit = 0.0;
        for (i, (&v, &up)) in x.data().iter().zip(g.data()).enumerate() {
            let s = v / alpha;
            if s < lo {
                galpha += up * lo;
                gbit += up * (-alpha * dqmin_db);
            } else if s > hi {
                galpha += up * hi;
                gbit += up * (alpha * dqmax_db);
            } else {
                gx[i] = up;
                galpha += up * (s.round_ties_even() - s);
            }
        }
        vec![
            Tensor::new(x.shape().to_vec(), gx).expect("shape preserved"),
            Tensor::scalar(galpha * grad_scale),
            Tensor::scalar(gbit),
        ]
    };
    Ok(tape.custom(&[x, alpha, bit], forward, backward)?)
}

/// Tape handles of a quantizer's learnables.
#[derive(Clone, Copy, Debug)]
pub struct QuantVars {
    pub scales: Var,
    /// Present when the bit-width is live (not frozen, not fixed by mode).
    pub b_tilde: Option<Var>,
}

/// Quantize `x` with `state`. When `vars.b_tilde` is `None` the bit is
/// `fixed_bit` (if given) or the state's active bit, recorded as a constant.
pub fn quantize(
    tape: &mut Tape,
    x: Var,
    state: &QuantizerState,
    vars: QuantVars,
    fixed_bit: Option<u8>,
) -> Result<Var, QuantError> {
    let (bit, bit_var) = match (vars.b_tilde, fixed_bit) {
        (_, Some(b)) => (b, tape.constant(Tensor::scalar(b as f64))?),
        (Some(bt), None) if state.frozen_bit.is_none() => {
            let v = discretize_var(tape, bt)?;
            (tape.value(v).item() as u8, v)
        }
        _ => {
            let b = state.active_bit()?;
            (b, tape.constant(Tensor::scalar(b as f64))?)
        }
    };
    let alpha = select_scale_var(tape, vars.scales, bit)?;
    fake_quantize_var(tape, x, alpha, bit_var, state.signed)
}
