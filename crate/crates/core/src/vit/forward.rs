use super::config::QuantMode;
use super::model::{Block, LayerNormParams, QuantizedLinear, QuantizedMlp, QuantizedMsa, Vit};
use super::VitError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::quant::{self, QuantVars};

type Result<T> = std::result::Result<T, VitError>;

/// One recorded forward pass over a [`Vit`].
///
/// Parameters and quantizer learnables become tape leaves the first time
/// they are touched. With `train` set they require grad; a frozen or
/// mode-fixed bit-width is always a constant.
pub struct Forward<'m> {
    pub tape: Tape,
    model: &'m Vit,
    train: bool,
    capture: bool,
    params: Vec<Option<Var>>,
    quant: Vec<Option<QuantVars>>,
    captured: Vec<Option<Tensor>>,
}

/// Gradients collected after `tape.backward`, indexed like the model tables.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
    pub scales: Vec<Option<Tensor>>,
    pub b_tilde: Vec<Option<f64>>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m Vit, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            model,
            train,
            capture: false,
            params: vec![None; model.params.len()],
            quant: vec![None; model.quantizers.len()],
            captured: vec![None; model.quantizers.len()],
        }
    }

    /// Record the input of every quantizer as it is reached.
    pub fn with_capture(mut self) -> Self {
        self.capture = true;
        self
    }

    pub fn model(&self) -> &'m Vit {
        self.model
    }

    pub fn param(&mut self, idx: usize) -> Result<Var> {
        if let Some(v) = self.params[idx] {
            return Ok(v);
        }
        let v = self
            .tape
            .leaf(self.model.params[idx].value.clone(), self.train)?;
        self.params[idx] = Some(v);
        Ok(v)
    }

    pub fn param_var(&self, idx: usize) -> Option<Var> {
        self.params[idx]
    }

    /// Tape handles for quantizer `idx`, created on first use.
    pub fn quant_vars(&mut self, idx: usize) -> Result<QuantVars> {
        if let Some(v) = self.quant[idx] {
            return Ok(v);
        }
        let state = &self.model.quantizers[idx].state;
        state.check()?;
        let scales = self
            .tape
            .leaf(Tensor::from_vec(state.scales.to_vec()), self.train)?;
        let live_bit = self.model.config.quant_mode == QuantMode::Learned && state.frozen_bit.is_none();
        let b_tilde = if live_bit {
            Some(self.tape.leaf(Tensor::scalar(state.b_tilde), self.train)?)
        } else {
            None
        };
        let vars = QuantVars { scales, b_tilde };
        self.quant[idx] = Some(vars);
        Ok(vars)
    }

    pub fn is_active(&self, idx: usize) -> bool {
        self.model.config.quant_mode != QuantMode::Float && !self.model.bypass[idx]
    }

    pub fn quantize(&mut self, idx: usize, x: Var) -> Result<Var> {
        if self.capture {
            self.captured[idx] = Some(self.tape.value(x).clone());
        }
        if !self.is_active(idx) {
            return Ok(x);
        }
        let vars = self.quant_vars(idx)?;
        let fixed = match self.model.config.quant_mode {
            QuantMode::Uniform { .. } => Some(self.model.effective_bit(idx)?),
            _ => None,
        };
        let state = &self.model.quantizers[idx].state;
        Ok(quant::quantize(&mut self.tape, x, state, vars, fixed)?)
    }

    /// Bit-width as a differentiable scalar: `clamp(b_tilde, 2, 8)` when the
    /// bit is live, otherwise the effective bit as a constant.
    pub fn continuous_bit(&mut self, idx: usize) -> Result<Var> {
        if self.is_active(idx) {
            if let Some(bt) = self.quant_vars(idx)?.b_tilde {
                return Ok(quant::clamp_bit_var(&mut self.tape, bt)?);
            }
        }
        let b = self.model.effective_bit(idx)?;
        Ok(self.tape.constant(Tensor::scalar(b as f64))?)
    }

    pub fn linear(&mut self, lin: &QuantizedLinear, x: Var) -> Result<Var> {
        let x = match lin.input_quant {
            Some(q) => self.quantize(q, x)?,
            None => x,
        };
        let w = self.param(lin.weight)?;
        let w = self.quantize(lin.weight_quant, w)?;
        let y = self.tape.matmul(x, w)?;
        match lin.bias {
            Some(b) => {
                let b = self.param(b)?;
                Ok(self.tape.add(y, b)?)
            }
            None => Ok(y),
        }
    }

    pub fn layernorm(&mut self, ln: &LayerNormParams, x: Var) -> Result<Var> {
        let g = self.param(ln.gamma)?;
        let b = self.param(ln.beta)?;
        Ok(self.tape.layernorm(x, g, b, self.model.config.layernorm_eps)?)
    }

    fn head_outputs(&mut self, msa: &QuantizedMsa, x: Var) -> Result<Vec<Var>> {
        let xq = self.quantize(msa.input_quant, x)?;
        let inv_sqrt_dh = 1.0 / (self.model.config.head_dim() as f64).sqrt();
        let mut outs = Vec::with_capacity(msa.heads.len());
        for head in &msa.heads {
            let q = self.linear(&head.query, xq)?;
            let q = self.quantize(head.q_quant, q)?;
            let k = self.linear(&head.key, xq)?;
            let k = self.quantize(head.k_quant, k)?;
            let v = self.linear(&head.value, xq)?;
            let v = self.quantize(head.v_quant, v)?;
            let kt = self.tape.transpose_last2(k)?;
            let scores = self.tape.matmul(q, kt)?;
            let scores = self.tape.mul_scalar(scores, inv_sqrt_dh)?;
            let attn = self.tape.softmax_lastdim(scores)?;
            let attn = self.quantize(head.attn_quant, attn)?;
            let h = self.tape.matmul(attn, v)?;
            outs.push(self.quantize(head.out_quant, h)?);
        }
        Ok(outs)
    }

    /// Head-wise MSA in sum form: `Σ_i ĥead_i · Ŵ_i^O + b_O`.
    pub fn msa(&mut self, msa: &QuantizedMsa, x: Var) -> Result<Var> {
        let heads = self.head_outputs(msa, x)?;
        let mut acc: Option<Var> = None;
        for (head, h) in msa.heads.iter().zip(heads) {
            let part = self.linear(&head.output, h)?;
            acc = Some(match acc {
                Some(a) => self.tape.add(a, part)?,
                None => part,
            });
        }
        let b = self.param(msa.out_bias)?;
        Ok(self.tape.add(acc.expect("at least one head"), b)?)
    }

    /// Concat form `Concat(head_1..head_h) · W^O + b_O`. Output-weight
    /// quantizers are bypassed, so this matches [`Forward::msa`] only when
    /// those are inactive (float mode).
    pub fn msa_concat(&mut self, msa: &QuantizedMsa, x: Var) -> Result<Var> {
        let heads = self.head_outputs(msa, x)?;
        let cat = self.tape.merge_heads(&heads)?;
        let slices = msa
            .heads
            .iter()
            .map(|h| self.param(h.output.weight))
            .collect::<Result<Vec<_>>>()?;
        let w_o = self.tape.concat(&slices, 0)?;
        let y = self.tape.matmul(cat, w_o)?;
        let b = self.param(msa.out_bias)?;
        Ok(self.tape.add(y, b)?)
    }

    pub fn mlp(&mut self, mlp: &QuantizedMlp, x: Var) -> Result<Var> {
        let x = self.quantize(mlp.input_quant, x)?;
        let h = self.linear(&mlp.fc1, x)?;
        let h = self.tape.gelu(h)?;
        let h = self.quantize(mlp.gelu_out_quant, h)?;
        self.linear(&mlp.fc2, h)
    }

    /// Post-norm: `X̂ = LN(X + MSA(X))`, `Y = LN(X̂ + MLP(X̂))`.
    /// Pre-norm: `X̂ = X + MSA(LN(X))`, `Y = X̂ + MLP(LN(X̂))`.
    pub fn block(&mut self, block: &Block, x: Var) -> Result<Var> {
        if self.model.config.pre_norm {
            let n = self.layernorm(&block.norm1, x)?;
            let a = self.msa(&block.msa, n)?;
            let x1 = self.tape.add(x, a)?;
            let n = self.layernorm(&block.norm2, x1)?;
            let m = self.mlp(&block.mlp, n)?;
            Ok(self.tape.add(x1, m)?)
        } else {
            let a = self.msa(&block.msa, x)?;
            let s = self.tape.add(x, a)?;
            let x1 = self.layernorm(&block.norm1, s)?;
            let m = self.mlp(&block.mlp, x1)?;
            let s = self.tape.add(x1, m)?;
            self.layernorm(&block.norm2, s)
        }
    }

    /// Images `[B, C, H, W]` to logits `[B, classes]`.
    pub fn logits(&mut self, images: &Tensor) -> Result<Var> {
        let model = self.model;
        let patches = model.patchify(images)?;
        let batch = patches.shape()[0];
        let d = model.config.embed_dim;
        let x = self.tape.constant(patches)?;
        let x = self.linear(&model.patch_embed, x)?;
        let cls = self.param(model.cls_token)?;
        let cls = self.tape.expand_leading(cls, batch)?;
        let x = self.tape.concat(&[cls, x], 1)?;
        let pos = self.param(model.pos_embed)?;
        let mut x = self.tape.add(x, pos)?;
        for block in &model.blocks {
            x = self.block(block, x)?;
        }
        let x = self.layernorm(&model.final_norm, x)?;
        let x = self.tape.narrow(x, 1, 0, 1)?;
        let x = self.tape.reshape(x, &[batch, d])?;
        self.linear(&model.classifier, x)
    }

    pub fn gradients(&self) -> Gradients {
        let grad = |v: Option<Var>| v.and_then(|v| self.tape.grad(v).cloned());
        Gradients {
            params: self.params.iter().map(|v| grad(*v)).collect(),
            scales: self.quant.iter().map(|q| grad(q.map(|q| q.scales))).collect(),
            b_tilde: self
                .quant
                .iter()
                .map(|q| grad(q.and_then(|q| q.b_tilde)).map(|t| t.item()))
                .collect(),
        }
    }

    /// Inputs seen by each quantizer (requires [`Forward::with_capture`]).
    pub fn into_captured(self) -> Vec<Option<Tensor>> {
        self.captured
    }
}
