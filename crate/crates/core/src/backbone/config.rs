use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionVariant, QkvLayout};
use crate::error::{Error, Result};

/// Architecture of a DiT-style denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub attention: AttentionVariant,
    pub dwc_kernel: usize,
    /// Emit a variance-interpolation channel per input channel.
    pub learn_sigma: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_layout")]
    pub qkv_layout: QkvLayout,
    #[serde(default)]
    pub qkv_bias: bool,
    #[serde(default = "default_kernel_eps")]
    pub kernel_eps: f64,
    #[serde(default = "default_focused_power")]
    pub focused_power: u32,
    /// Width of the sinusoidal timestep features.
    #[serde(default = "default_freq_dim")]
    pub freq_dim: usize,
    #[serde(default = "default_timesteps")]
    pub num_timesteps: usize,
}

fn default_mlp_ratio() -> usize {
    4
}
fn default_layout() -> QkvLayout {
    QkvLayout::QKv
}
fn default_kernel_eps() -> f64 {
    1e-6
}
fn default_focused_power() -> u32 {
    3
}
fn default_freq_dim() -> usize {
    256
}
fn default_timesteps() -> usize {
    1000
}

pub const LAYERNORM_EPS: f64 = 1e-6;

impl ModelConfig {
    fn dit(depth: usize, hidden: usize, heads: usize) -> Self {
        ModelConfig {
            depth,
            hidden,
            heads,
            patch: 2,
            in_channels: 4,
            image_size: 32,
            num_classes: 1000,
            attention: AttentionVariant::Softmax,
            dwc_kernel: 5,
            learn_sigma: true,
            mlp_ratio: 4,
            qkv_layout: QkvLayout::Fused,
            qkv_bias: true,
            kernel_eps: 1e-6,
            focused_power: 3,
            freq_dim: 256,
            num_timesteps: 1000,
        }
    }

    fn lit(depth: usize, hidden: usize, heads: usize) -> Self {
        ModelConfig {
            attention: AttentionVariant::LinearReluDwc,
            qkv_layout: QkvLayout::QKv,
            qkv_bias: false,
            ..Self::dit(depth, hidden, heads)
        }
    }

    pub fn dit_s() -> Self {
        Self::dit(12, 384, 6)
    }
    pub fn dit_b() -> Self {
        Self::dit(12, 768, 12)
    }
    pub fn dit_l() -> Self {
        Self::dit(24, 1024, 16)
    }
    pub fn dit_xl() -> Self {
        Self::dit(28, 1152, 16)
    }
    pub fn lit_s() -> Self {
        Self::lit(12, 384, 2)
    }
    pub fn lit_b() -> Self {
        Self::lit(12, 768, 3)
    }
    pub fn lit_l() -> Self {
        Self::lit(24, 1024, 4)
    }
    pub fn lit_xl() -> Self {
        Self::lit(28, 1152, 4)
    }

    /// Desk-scale softmax teacher: 4 layers, width 64, 4 heads on 8×8
    /// single-channel images with 4 classes.
    pub fn dit_micro() -> Self {
        ModelConfig {
            in_channels: 1,
            image_size: 8,
            num_classes: 4,
            freq_dim: 64,
            ..Self::dit(4, 64, 4)
        }
    }

    /// Desk-scale linear student matching [`ModelConfig::dit_micro`] with 2 heads.
    pub fn lit_micro() -> Self {
        ModelConfig {
            in_channels: 1,
            image_size: 8,
            num_classes: 4,
            freq_dim: 64,
            ..Self::lit(4, 64, 2)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "dit-s" => Self::dit_s(),
            "dit-b" => Self::dit_b(),
            "dit-l" => Self::dit_l(),
            "dit-xl" => Self::dit_xl(),
            "lit-s" => Self::lit_s(),
            "lit-b" => Self::lit_b(),
            "lit-l" => Self::lit_l(),
            "lit-xl" => Self::lit_xl(),
            "dit-micro" => Self::dit_micro(),
            "lit-micro" => Self::lit_micro(),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        })
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        if self.learn_sigma {
            2 * self.in_channels
        } else {
            self.in_channels
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.hidden,
            num_heads: self.heads,
            variant: self.attention,
            dwc_kernel: self.dwc_kernel,
            kernel_eps: self.kernel_eps,
            focused_power: self.focused_power,
            qkv_layout: self.qkv_layout,
            qkv_bias: self.qkv_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("patch", self.patch),
            ("in_channels", self.in_channels),
            ("image_size", self.image_size),
            ("num_classes", self.num_classes),
            ("mlp_ratio", self.mlp_ratio),
            ("num_timesteps", self.num_timesteps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.hidden % 4 != 0 {
            return Err(Error::Config("hidden size must be divisible by 4 for 2-d position features".into()));
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return Err(Error::Config("timestep frequency width must be even and positive".into()));
        }
        self.attention_config().validate()
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let hd = d / self.heads;
        let p2 = self.patch * self.patch;
        let embed = self.patch_dim() * d + d;
        let temb = self.freq_dim * d + d + d * d + d;
        let yemb = (self.num_classes + 1) * d;
        let attn = 3 * d * d
            + if self.qkv_bias { 3 * d } else { 0 }
            + d * d
            + d
            + if self.attention.has_dwc() {
                hd * self.dwc_kernel * self.dwc_kernel + hd
            } else {
                0
            };
        let hidden_mlp = self.mlp_ratio * d;
        let mlp = d * hidden_mlp + hidden_mlp + hidden_mlp * d + d;
        let ada = d * 6 * d + 6 * d;
        let block = ada + attn + mlp;
        let out = p2 * self.out_channels();
        let fin = d * 2 * d + 2 * d + d * out + out;
        embed + temb + yemb + self.depth * block + fin
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in ["dit-s", "dit-b", "dit-l", "dit-xl", "lit-s", "lit-b", "lit-l", "lit-xl", "dit-micro", "lit-micro"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        let lit = ModelConfig::lit_s();
        assert_eq!((lit.depth, lit.hidden, lit.heads, lit.patch), (12, 384, 2, 2));
        assert_eq!(ModelConfig::dit_s().heads, 6);
        assert_eq!(lit.num_tokens(), 256);
    }

    #[test]
    fn indivisible_image_rejected() {
        let cfg = ModelConfig {
            image_size: 7,
            ..ModelConfig::lit_micro()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn lit_and_dit_differ_only_in_attention_internals() {
        let dit = ModelConfig::dit_s();
        let lit = ModelConfig {
            qkv_bias: true,
            ..ModelConfig::lit_s()
        };
        let hd = lit.hidden / lit.heads;
        let dwc = lit.depth * (hd * 25 + hd);
        assert_eq!(lit.param_count() - dit.param_count(), dwc);
    }
}
