use serde::{Deserialize, Serialize};

use super::{evaluate, TrainError};
use crate::autodiff::Tensor;
use crate::bitops::BitAllocation;
use crate::data::Dataset;
use crate::quant::{MAX_BIT, MIN_BIT};
use crate::vit::{QuantMode, Vit};

fn check_bit(bit: u8) -> Result<(), TrainError> {
    if (MIN_BIT..=MAX_BIT).contains(&bit) {
        Ok(())
    } else {
        Err(TrainError::Quant(crate::quant::QuantError::BitOutOfRange(bit)))
    }
}

/// Copy of `model` with every quantizer active and frozen at 8 bits, all
/// seven scale entries MSE-calibrated on `calibration`.
pub fn eight_bit_reference(model: &Vit, calibration: &Tensor) -> Result<Vit, TrainError> {
    let mut m = model.clone();
    m.config.quant_mode = QuantMode::Learned;
    m.bypass = vec![false; m.quantizers.len()];
    m.calibrate(calibration, |_| true)?;
    m.set_allocation(&BitAllocation::uniform(&m.config, MAX_BIT))?;
    for q in &mut m.quantizers {
        q.state.frozen_bit = Some(MAX_BIT);
    }
    Ok(m)
}

/// The nine quantizers owned by one head: Q, K, V, scores, output and the
/// four weight slices.
pub fn head_quantizers(model: &Vit, layer: usize, head: usize) -> Vec<usize> {
    model
        .quantizers
        .iter()
        .enumerate()
        .filter(|(_, q)| q.spec.layer == Some(layer) && q.spec.head == Some(head))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadProbe {
    pub layer: usize,
    pub low_bit: u8,
    pub baseline: f64,
    pub accuracies: Vec<f64>,
    /// `baseline - accuracy` per head.
    pub drops: Vec<f64>,
}

/// Accuracy drop of an 8-bit model when one head of `layer` is lowered to
/// `low_bit`, for each head in turn. `model` is not modified.
pub fn probe_head_sensitivity(
    model: &Vit,
    layer: usize,
    low_bit: u8,
    calibration: &Tensor,
    ds: &Dataset,
    batch_size: usize,
) -> Result<HeadProbe, TrainError> {
    if layer >= model.config.depth {
        return Err(TrainError::LayerOutOfRange {
            layer,
            depth: model.config.depth,
        });
    }
    check_bit(low_bit)?;
    let reference = eight_bit_reference(model, calibration)?;
    let baseline = evaluate(&reference, ds, batch_size)?;
    let mut accuracies = Vec::with_capacity(model.config.heads);
    for head in 0..model.config.heads {
        let mut m = reference.clone();
        for i in head_quantizers(&m, layer, head) {
            m.quantizers[i].state.frozen_bit = Some(low_bit);
        }
        accuracies.push(evaluate(&m, ds, batch_size)?);
    }
    Ok(HeadProbe {
        layer,
        low_bit,
        baseline,
        drops: accuracies.iter().map(|a| baseline - a).collect(),
        accuracies,
    })
}

/// What the MLP probe compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpReference {
    /// Unquantized model; only the probed quantizers are active.
    Float,
    /// Everything at 8 bits; the probed quantizers are lowered.
    EightBit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpProbeRow {
    pub component: String,
    pub accuracy: f64,
    pub drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpProbe {
    pub reference: MlpReference,
    pub low_bit: u8,
    pub baseline: f64,
    pub rows: Vec<MlpProbeRow>,
}

/// Accuracy with the MLP GELU outputs, the MLP fully-connected layers
/// (their input and both weights), and both together quantized to
/// `low_bit` in every block. `model` is not modified.
pub fn probe_mlp_components(
    model: &Vit,
    low_bit: u8,
    reference: MlpReference,
    calibration: &Tensor,
    ds: &Dataset,
    batch_size: usize,
) -> Result<MlpProbe, TrainError> {
    check_bit(low_bit)?;
    let base = eight_bit_reference(model, calibration)?;
    let baseline = match reference {
        MlpReference::EightBit => evaluate(&base, ds, batch_size)?,
        MlpReference::Float => {
            let mut f = model.clone();
            f.config.quant_mode = QuantMode::Float;
            evaluate(&f, ds, batch_size)?
        }
    };
    let select = |components: &[&str]| -> Vec<usize> {
        base.quantizers
            .iter()
            .enumerate()
            .filter(|(_, q)| {
                q.name().contains(".mlp.") && components.contains(&q.spec.component)
            })
            .map(|(i, _)| i)
            .collect()
    };
    let variants = [
        ("gelu", select(&["gelu"])),
        ("fc", select(&["x_in", "w1", "w2"])),
        ("gelu+fc", select(&["gelu", "x_in", "w1", "w2"])),
    ];
    let mut rows = Vec::with_capacity(variants.len());
    for (component, idx) in variants {
        let mut m = base.clone();
        if reference == MlpReference::Float {
            m.bypass = vec![true; m.quantizers.len()];
        }
        for &i in &idx {
            m.bypass[i] = false;
            m.quantizers[i].state.frozen_bit = Some(low_bit);
        }
        let accuracy = evaluate(&m, ds, batch_size)?;
        rows.push(MlpProbeRow {
            component: component.to_string(),
            accuracy,
            drop: baseline - accuracy,
        });
    }
    Ok(MlpProbe {
        reference,
        low_bit,
        baseline,
        rows,
    })
}
