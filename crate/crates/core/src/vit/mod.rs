//! Quantized vision transformer with head-wise bit-widths.

mod config;
mod forward;
mod model;

pub use config::{ConfigError, ModelConfig, QuantMode, QuantizerSpec};
pub use forward::{Forward, Gradients};
pub use model::{
    AttentionHead, Block, LayerNormParams, Param, QuantizedLinear, QuantizedMlp, QuantizedMsa,
    Quantizer, Vit,
};

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::quant::QuantError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VitError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("allocation has no entry for quantizer {0}")]
    MissingAllocation(String),
    #[error("unknown quantizer {0}")]
    UnknownQuantizer(String),
}

impl Vit {
    /// Logits for a batch without recording gradients.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor, VitError> {
        let mut fwd = Forward::new(self, false);
        let y = fwd.logits(images)?;
        Ok(fwd.tape.value(y).clone())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>, VitError> {
        let logits = self.logits(images)?;
        let c = self.config.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Inputs reaching each quantizer during an unquantized forward pass.
    pub fn capture_float_inputs(&self, images: &Tensor) -> Result<Vec<Option<Tensor>>, VitError> {
        let mut float = self.clone();
        float.config.quant_mode = QuantMode::Float;
        let mut fwd = Forward::new(&float, false).with_capture();
        fwd.logits(images)?;
        Ok(fwd.into_captured())
    }

    /// MSE-initialize all seven scale entries of every quantizer selected by
    /// `select`, from its float-mode input on `images`.
    pub fn calibrate(
        &mut self,
        images: &Tensor,
        select: impl Fn(&Quantizer) -> bool + Sync,
    ) -> Result<(), VitError> {
        let captured = self.capture_float_inputs(images)?;
        self.quantizers
            .par_iter_mut()
            .zip(captured.par_iter())
            .filter(|(q, _)| select(q))
            .for_each(|(q, seen)| {
                if let Some(t) = seen {
                    q.state.init_scales(t.data());
                }
            });
        Ok(())
    }
}

#[cfg(test)]
mod tests;
