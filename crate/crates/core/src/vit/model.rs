use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, QuantMode, QuantizerSpec};
use super::VitError;
use crate::autodiff::Tensor;
use crate::bitops::BitAllocation;
use crate::quant::{QuantizerState, MAX_BIT};

/// A named float parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Subject to weight decay (matrices only).
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantizer {
    pub spec: QuantizerSpec,
    pub state: QuantizerState,
}

impl Quantizer {
    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

// The structs below hold indices into `Vit::params` / `Vit::quantizers`.

/// `x̂ · Ŵ + b` with a weight quantizer and an optional input quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    pub weight: usize,
    pub bias: Option<usize>,
    pub weight_quant: usize,
    pub input_quant: Option<usize>,
}

/// One attention head: its slices `W_i^{Q,K,V}` (`d × d_h`) and `W_i^O`
/// (`d_h × d`) plus the five per-head activation quantizers.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub query: QuantizedLinear,
    pub key: QuantizedLinear,
    pub value: QuantizedLinear,
    pub output: QuantizedLinear,
    pub q_quant: usize,
    pub k_quant: usize,
    pub v_quant: usize,
    pub attn_quant: usize,
    pub out_quant: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMsa {
    pub heads: Vec<AttentionHead>,
    pub input_quant: usize,
    pub out_bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMlp {
    pub fc1: QuantizedLinear,
    pub fc2: QuantizedLinear,
    pub input_quant: usize,
    pub gelu_out_quant: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNormParams,
    pub msa: QuantizedMsa,
    pub norm2: LayerNormParams,
    pub mlp: QuantizedMlp,
}

/// Quantized vision transformer with flat parameter and quantizer tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Vit {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub quantizers: Vec<Quantizer>,
    pub patch_embed: QuantizedLinear,
    pub cls_token: usize,
    pub pos_embed: usize,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNormParams,
    pub classifier: QuantizedLinear,
    /// Quantizers forced to identity (runtime only, never saved).
    pub bypass: Vec<bool>,
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    specs: &'a [QuantizerSpec],
}

impl Builder<'_> {
    fn push(&mut self, name: String, value: Tensor, decay: bool) -> usize {
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }

    fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).unwrap()
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).unwrap();
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn quant(&self, name: &str) -> usize {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("no quantizer slot {name}"))
    }

    fn layernorm(&mut self, prefix: &str, d: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: self.push(format!("{prefix}.gamma"), Tensor::full(&[d], 1.0), false),
            beta: self.push(format!("{prefix}.beta"), Tensor::zeros(&[d]), false),
        }
    }

    /// Column slice `[rows × (c0..c0+w)]` of a row-major matrix.
    fn columns(m: &Tensor, c0: usize, w: usize) -> Tensor {
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&m.data()[r * cols + c0..r * cols + c0 + w]);
        }
        Tensor::new(vec![rows, w], data).unwrap()
    }

    fn rows(m: &Tensor, r0: usize, h: usize) -> Tensor {
        let cols = m.shape()[1];
        Tensor::new(vec![h, cols], m.data()[r0 * cols..(r0 + h) * cols].to_vec()).unwrap()
    }
}

impl Vit {
    /// Fresh model with seeded initialization (Xavier-uniform matrices,
    /// zero biases, N(0, 0.02) class token and positions).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, VitError> {
        config.validate()?;
        let specs = config.quantizer_specs();
        let d = config.embed_dim;
        let dh = config.head_dim();
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            specs: &specs,
        };

        let pe_w = b.xavier(config.patch_dim(), d);
        let patch_embed = QuantizedLinear {
            weight: b.push("patch_embed.weight".into(), pe_w, true),
            bias: Some(b.push("patch_embed.bias".into(), Tensor::zeros(&[d]), false)),
            weight_quant: b.quant("patch_embed.w"),
            input_quant: Some(b.quant("patch_embed.x")),
        };
        let cls = b.normal(&[1, d], 0.02);
        let cls_token = b.push("cls_token".into(), cls, false);
        let pos = b.normal(&[config.tokens(), d], 0.02);
        let pos_embed = b.push("pos_embed".into(), pos, false);

        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("block{l}");
            let norm1 = b.layernorm(&format!("{p}.norm1"), d);
            let full_q = b.xavier(d, d);
            let full_k = b.xavier(d, d);
            let full_v = b.xavier(d, d);
            let full_o = b.xavier(d, d);
            let mut heads = Vec::with_capacity(config.heads);
            for i in 0..config.heads {
                let proj = |b: &mut Builder, which: &str, full: &Tensor| QuantizedLinear {
                    weight: b.push(
                        format!("{p}.msa.head{i}.w_{which}"),
                        Builder::columns(full, i * dh, dh),
                        true,
                    ),
                    bias: Some(b.push(format!("{p}.msa.head{i}.b_{which}"), Tensor::zeros(&[dh]), false)),
                    weight_quant: b.quant(&format!("{p}.msa.w_{which}.head{i}")),
                    input_quant: None,
                };
                let query = proj(&mut b, "q", &full_q);
                let key = proj(&mut b, "k", &full_k);
                let value = proj(&mut b, "v", &full_v);
                let output = QuantizedLinear {
                    weight: b.push(
                        format!("{p}.msa.head{i}.w_o"),
                        Builder::rows(&full_o, i * dh, dh),
                        true,
                    ),
                    bias: None,
                    weight_quant: b.quant(&format!("{p}.msa.w_o.head{i}")),
                    input_quant: None,
                };
                heads.push(AttentionHead {
                    query,
                    key,
                    value,
                    output,
                    q_quant: b.quant(&format!("{p}.msa.head{i}.q")),
                    k_quant: b.quant(&format!("{p}.msa.head{i}.k")),
                    v_quant: b.quant(&format!("{p}.msa.head{i}.v")),
                    attn_quant: b.quant(&format!("{p}.msa.head{i}.attn")),
                    out_quant: b.quant(&format!("{p}.msa.head{i}.out")),
                });
            }
            let msa = QuantizedMsa {
                heads,
                input_quant: b.quant(&format!("{p}.msa.x_in")),
                out_bias: b.push(format!("{p}.msa.b_o"), Tensor::zeros(&[d]), false),
            };
            let norm2 = b.layernorm(&format!("{p}.norm2"), d);
            let w1 = b.xavier(d, config.mlp_dim);
            let w2 = b.xavier(config.mlp_dim, d);
            let mlp = QuantizedMlp {
                fc1: QuantizedLinear {
                    weight: b.push(format!("{p}.mlp.fc1.weight"), w1, true),
                    bias: Some(b.push(format!("{p}.mlp.fc1.bias"), Tensor::zeros(&[config.mlp_dim]), false)),
                    weight_quant: b.quant(&format!("{p}.mlp.w1")),
                    input_quant: None,
                },
                fc2: QuantizedLinear {
                    weight: b.push(format!("{p}.mlp.fc2.weight"), w2, true),
                    bias: Some(b.push(format!("{p}.mlp.fc2.bias"), Tensor::zeros(&[d]), false)),
                    weight_quant: b.quant(&format!("{p}.mlp.w2")),
                    input_quant: None,
                },
                input_quant: b.quant(&format!("{p}.mlp.x_in")),
                gelu_out_quant: b.quant(&format!("{p}.mlp.gelu")),
            };
            blocks.push(Block {
                norm1,
                msa,
                norm2,
                mlp,
            });
        }
        let final_norm = b.layernorm("norm", d);
        let cw = b.xavier(d, config.num_classes);
        let classifier = QuantizedLinear {
            weight: b.push("classifier.weight".into(), cw, true),
            bias: Some(b.push("classifier.bias".into(), Tensor::zeros(&[config.num_classes]), false)),
            weight_quant: b.quant("classifier.w"),
            input_quant: Some(b.quant("classifier.x")),
        };

        let quantizers: Vec<Quantizer> = specs
            .iter()
            .map(|s| Quantizer {
                spec: s.clone(),
                state: QuantizerState::new(s.role, MAX_BIT as f64),
            })
            .collect();
        let bypass = vec![false; quantizers.len()];
        Ok(Self {
            config,
            params: b.params,
            quantizers,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            final_norm,
            classifier,
            bypass,
        })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn quantizer_index(&self, name: &str) -> Option<usize> {
        self.quantizers.iter().position(|q| q.name() == name)
    }

    /// Ordered `(name, state)` list; order matches
    /// [`ModelConfig::quantizer_names`].
    pub fn collect_quantizers(&self) -> Vec<(&str, &QuantizerState)> {
        self.quantizers.iter().map(|q| (q.name(), &q.state)).collect()
    }

    /// Bit the forward pass uses for quantizer `idx` under the current mode.
    pub fn effective_bit(&self, idx: usize) -> Result<u8, VitError> {
        let q = &self.quantizers[idx];
        Ok(match self.config.quant_mode {
            QuantMode::Uniform { .. } if q.spec.is_boundary() => MAX_BIT,
            QuantMode::Uniform { bits } => bits,
            _ => q.state.active_bit()?,
        })
    }

    pub fn get_allocation(&self) -> Result<BitAllocation, VitError> {
        let mut alloc = BitAllocation::default();
        for (i, q) in self.quantizers.iter().enumerate() {
            alloc.insert(q.name(), self.effective_bit(i)?);
        }
        Ok(alloc)
    }

    /// Freeze every quantizer at the bit given by `alloc`.
    pub fn set_allocation(&mut self, alloc: &BitAllocation) -> Result<(), VitError> {
        for (name, _) in alloc.iter() {
            if self.quantizer_index(name).is_none() {
                return Err(VitError::UnknownQuantizer(name.to_string()));
            }
        }
        let mut bits = Vec::with_capacity(self.quantizers.len());
        for q in &self.quantizers {
            let bit = alloc
                .get(q.name())
                .ok_or_else(|| VitError::MissingAllocation(q.name().to_string()))?;
            if !(crate::quant::MIN_BIT..=MAX_BIT).contains(&bit) {
                return Err(VitError::Quant(crate::quant::QuantError::BitOutOfRange(bit)));
            }
            bits.push(bit);
        }
        for (q, bit) in self.quantizers.iter_mut().zip(bits) {
            q.state.frozen_bit = Some(bit);
        }
        Ok(())
    }

    /// Round every parameter through `f32`, the checkpoint precision.
    pub fn snap_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// `[B, C, H, W]` images to `[B, n_patches, C·p·p]` patch rows.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor, VitError> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(VitError::InputShape {
                expected: vec![0, c.in_channels, c.image_size, c.image_size],
                got: s.to_vec(),
            });
        }
        let (batch, p, side) = (s[0], c.patch_size, c.image_size / c.patch_size);
        let hw = c.image_size;
        let src = images.data();
        let mut out = Vec::with_capacity(images.len());
        for b in 0..batch {
            for py in 0..side {
                for px in 0..side {
                    for ch in 0..c.in_channels {
                        for dy in 0..p {
                            let row = ((b * c.in_channels + ch) * hw + py * p + dy) * hw + px * p;
                            out.extend_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![batch, side * side, c.patch_dim()], out)?)
    }
}
