use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{Role, MAX_BIT, MIN_BIT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("embed_dim {embed_dim} is not divisible by heads {heads}")]
    HeadSplit { embed_dim: usize, heads: usize },
    #[error("image_size {image_size} is not divisible by patch_size {patch_size}")]
    PatchSplit { image_size: usize, patch_size: usize },
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("uniform bit-width {0} outside [2, 8]")]
    UniformBits(u8),
}

/// How quantizers behave in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuantMode {
    /// Quantizers are identities.
    #[default]
    Float,
    /// Fixed bits: `bits` in the interior, 8 on the patch embedding and the
    /// classifier. Scales still learn.
    Uniform { bits: u8 },
    /// Learnable bit-widths and switchable scales.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub quant_mode: QuantMode,
    /// Pre-norm residual blocks instead of the post-norm default.
    #[serde(default)]
    pub pre_norm: bool,
    #[serde(default = "default_ln_eps")]
    pub layernorm_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// 32x32 RGB, patch 8, d=64, 4 heads, 4 blocks, d_m=128, 10 classes.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_dim: 128,
            num_classes: 10,
            quant_mode: QuantMode::Float,
            pre_norm: false,
            layernorm_eps: default_ln_eps(),
        }
    }

    pub fn deit_tiny() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 192,
            depth: 12,
            heads: 3,
            mlp_dim: 768,
            num_classes: 1000,
            ..Self::toy()
        }
    }

    pub fn deit_small() -> Self {
        Self {
            embed_dim: 384,
            heads: 6,
            mlp_dim: 1536,
            ..Self::deit_tiny()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(ConfigError::HeadSplit {
                embed_dim: self.embed_dim,
                heads: self.heads,
            });
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ConfigError::PatchSplit {
                image_size: self.image_size,
                patch_size: self.patch_size,
            });
        }
        if let QuantMode::Uniform { bits } = self.quant_mode {
            if !(MIN_BIT..=MAX_BIT).contains(&bits) {
                return Err(ConfigError::UniformBits(bits));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    /// Canonical quantizer list in model order.
    pub fn quantizer_specs(&self) -> Vec<QuantizerSpec> {
        let mut out = Vec::new();
        let top = |name: &str, component: &'static str, role| QuantizerSpec {
            name: name.to_string(),
            layer: None,
            head: None,
            component,
            role,
        };
        out.push(top("patch_embed.w", "w", Role::Weight));
        out.push(top("patch_embed.x", "x", Role::Activation));
        for l in 0..self.depth {
            let item = |name: String, head, component, role| QuantizerSpec {
                name,
                layer: Some(l),
                head,
                component,
                role,
            };
            out.push(item(format!("block{l}.msa.x_in"), None, "x_in", Role::Activation));
            for i in 0..self.heads {
                for (comp, role) in [
                    ("w_q", Role::Weight),
                    ("w_k", Role::Weight),
                    ("w_v", Role::Weight),
                ] {
                    out.push(item(format!("block{l}.msa.{comp}.head{i}"), Some(i), comp, role));
                }
                for (comp, role) in [
                    ("q", Role::QEmbed),
                    ("k", Role::KEmbed),
                    ("v", Role::VEmbed),
                    ("attn", Role::AttentionScore),
                    ("out", Role::HeadOutput),
                ] {
                    out.push(item(format!("block{l}.msa.head{i}.{comp}"), Some(i), comp, role));
                }
                out.push(item(format!("block{l}.msa.w_o.head{i}"), Some(i), "w_o", Role::Weight));
            }
            for (comp, role) in [
                ("x_in", Role::Activation),
                ("w1", Role::Weight),
                ("gelu", Role::Activation),
                ("w2", Role::Weight),
            ] {
                out.push(item(format!("block{l}.mlp.{comp}"), None, comp, role));
            }
        }
        out.push(top("classifier.w", "w", Role::Weight));
        out.push(top("classifier.x", "x", Role::Activation));
        out
    }

    pub fn quantizer_names(&self) -> Vec<String> {
        self.quantizer_specs().into_iter().map(|s| s.name).collect()
    }

    /// `L·(5h + 4h + 1) + 4L + 4`.
    pub fn expected_quantizer_count(&self) -> usize {
        self.depth * (9 * self.heads + 1) + 4 * self.depth + 4
    }
}

/// Static description of one quantizer slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizerSpec {
    pub name: String,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    /// Trailing name component (`q`, `w_o`, `gelu`, ...), used for grouping.
    pub component: &'static str,
    pub role: Role,
}

impl QuantizerSpec {
    /// Patch embedding and classifier quantizers.
    pub fn is_boundary(&self) -> bool {
        self.layer.is_none()
    }
}
