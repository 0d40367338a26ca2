//! Declarative construction of the network from a [`NetworkConfig`]:
//! config validation, the executable layer sequence, whole-frame forward,
//! and checkpoint persistence.

mod builder;
mod checkpoint;

pub use builder::{build_model, crop, pad_reflect, MagicModel, ModelIr, ParamKind, ParamSpec, Step};
pub use checkpoint::{load_checkpoint, load_checkpoint_matching, save_checkpoint};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dpcm::DpcmConfig;
use crate::error::{MagicError, Result};

/// Maximum number of image channels the core processes (e.g. two RGB
/// frames, stereo pairs, or a 6-band multispectral input).
pub const MAX_CHANNELS: usize = 6;

/// One block of the encoder (mirrored in the decoder).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    /// KxK grouped convolution followed by a pointwise convolution.
    GroupConv { groups: usize, k: usize },
    /// Depthwise KxK followed by a pointwise convolution.
    DepthwiseSeparable { k: usize },
    /// 1x3 horizontal depthwise FIR, vertical first-order IIR, pointwise.
    HybridFirIir,
    /// Single pointwise convolution (linear).
    Pointwise,
}

/// One resolution level of the encoder/decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    /// Downsample factor relative to full resolution (1, 4, 16, ...).
    pub factor: usize,
    /// Channel width at this scale.
    pub width: usize,
    /// Wrap each block in a ResNet-like residual connection.
    pub residual: bool,
    pub blocks: Vec<BlockKind>,
}

/// A compressed skip line between encoder and decoder ends of one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipConfig {
    pub from_scale: usize,
    pub to_scale: usize,
    /// Channel count after the pointwise projection onto the skip buffer.
    pub compressed_channels: usize,
    pub dpcm_enabled: bool,
    /// Residual bits when DPCM is enabled.
    pub dpcm_bits: u32,
}

impl SkipConfig {
    /// Codec settings for this skip line, if DPCM is enabled.
    pub fn dpcm_config(&self) -> Option<DpcmConfig> {
        self.dpcm_enabled.then(|| DpcmConfig { input_bits: 12, residual_bits: self.dpcm_bits })
    }
}

/// Declarative topology description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub scales: Vec<ScaleConfig>,
    pub skips: Vec<SkipConfig>,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_channels > MAX_CHANNELS {
            return Err(MagicError::Config(format!(
                "in_channels must be in [1, {MAX_CHANNELS}], got {}",
                self.in_channels
            )));
        }
        if self.out_channels == 0 || self.out_channels > MAX_CHANNELS {
            return Err(MagicError::Config(format!(
                "out_channels must be in [1, {MAX_CHANNELS}], got {}",
                self.out_channels
            )));
        }
        if self.scales.is_empty() {
            return Err(MagicError::Config("at least one scale is required".into()));
        }
        for (i, sc) in self.scales.iter().enumerate() {
            let expect = 4usize.pow(i as u32);
            if sc.factor != expect {
                return Err(MagicError::Config(format!(
                    "scale {i} factor must be {expect} (stride-4 pools between scales), got {}",
                    sc.factor
                )));
            }
            if sc.width == 0 {
                return Err(MagicError::Config(format!("scale {i} width must be positive")));
            }
            if sc.blocks.is_empty() {
                return Err(MagicError::Config(format!("scale {i} has no blocks")));
            }
            for (b, kind) in sc.blocks.iter().enumerate() {
                match kind {
                    BlockKind::GroupConv { groups, k } => {
                        if *groups == 0 || sc.width % groups != 0 {
                            return Err(MagicError::Config(format!(
                                "scale {i} block {b}: groups {groups} must divide width {}",
                                sc.width
                            )));
                        }
                        if k % 2 == 0 || *k == 0 {
                            return Err(MagicError::Config(format!(
                                "scale {i} block {b}: kernel size must be odd, got {k}"
                            )));
                        }
                    }
                    BlockKind::DepthwiseSeparable { k } => {
                        if k % 2 == 0 || *k == 0 {
                            return Err(MagicError::Config(format!(
                                "scale {i} block {b}: kernel size must be odd, got {k}"
                            )));
                        }
                    }
                    BlockKind::HybridFirIir => {
                        if i != self.scales.len() - 1 {
                            return Err(MagicError::Config(format!(
                                "scale {i} block {b}: hybrid FIR-IIR blocks are allowed only \
                                 at the coarsest (bottleneck) scale"
                            )));
                        }
                    }
                    BlockKind::Pointwise => {}
                }
            }
        }
        let mut seen = vec![false; self.scales.len()];
        for (i, sk) in self.skips.iter().enumerate() {
            if sk.from_scale != sk.to_scale {
                return Err(MagicError::Config(format!(
                    "skip {i}: connects scale {} to scale {}, but skips must join encoder \
                     and decoder at the same spatial resolution",
                    sk.from_scale, sk.to_scale
                )));
            }
            if sk.from_scale + 1 >= self.scales.len() {
                return Err(MagicError::Config(format!(
                    "skip {i}: scale {} has no decoder side to connect to",
                    sk.from_scale
                )));
            }
            if seen[sk.from_scale] {
                return Err(MagicError::Config(format!(
                    "skip {i}: scale {} already has a skip line",
                    sk.from_scale
                )));
            }
            seen[sk.from_scale] = true;
            let width = self.scales[sk.from_scale].width;
            if sk.compressed_channels == 0 || sk.compressed_channels > width {
                return Err(MagicError::Config(format!(
                    "skip {i}: compressed_channels {} must be in [1, {width}]",
                    sk.compressed_channels
                )));
            }
            if let Some(cfg) = sk.dpcm_config() {
                cfg.validate()?;
            }
        }
        Ok(())
    }

    /// Spatial divisibility the pooling chain requires of padded inputs.
    pub fn required_divisor(&self) -> usize {
        4usize.pow((self.scales.len() - 1) as u32)
    }

    /// Closed-form parameter count for a valid config.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, groups: usize, kh: usize, kw: usize| {
            cout * (cin / groups) * kh * kw + cout
        };
        let block = |w: usize, kind: &BlockKind| match kind {
            BlockKind::GroupConv { groups, k } => conv(w, w, *groups, *k, *k) + conv(w, w, 1, 1, 1),
            BlockKind::DepthwiseSeparable { k } => conv(w, w, w, *k, *k) + conv(w, w, 1, 1, 1),
            BlockKind::HybridFirIir => conv(w, w, w, 1, 3) + 3 * w + conv(w, w, 1, 1, 1),
            BlockKind::Pointwise => conv(w, w, 1, 1, 1),
        };
        let mut n = conv(self.in_channels, self.scales[0].width, 1, 1, 1); // stem
        for (i, sc) in self.scales.iter().enumerate() {
            for kind in &sc.blocks {
                n += block(sc.width, kind);
            }
            if i + 1 < self.scales.len() {
                if let Some(sk) = self.skip_at(i) {
                    n += conv(sc.width, sk.compressed_channels, 1, 1, 1); // compress
                }
                n += conv(sc.width, self.scales[i + 1].width, 1, 1, 1); // transition down
            }
        }
        for i in (0..self.scales.len().saturating_sub(1)).rev() {
            let w = self.scales[i].width;
            n += conv(self.scales[i + 1].width, w, 1, 1, 1); // transition up
            if let Some(sk) = self.skip_at(i) {
                n += conv(sk.compressed_channels, w, 1, 1, 1); // decompress
                n += conv(2 * w, w, 1, 1, 1); // fuse after concat
            }
            for kind in &self.scales[i].blocks {
                n += block(w, kind);
            }
        }
        n + conv(self.scales[0].width, self.out_channels, 1, 1, 1) // head
    }

    pub fn skip_at(&self, scale: usize) -> Option<&SkipConfig> {
        self.skips.iter().find(|s| s.from_scale == scale)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: NetworkConfig = toml::from_str(s)
            .map_err(|e| MagicError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The reference topology ("MagIC-ref"): three scales at full, quarter and
/// sixteenth resolution with hybrid FIR-IIR blocks in the bottleneck, a
/// DPCM-compressed skip at full resolution and a plain compressed skip at
/// quarter resolution.
pub fn reference_config() -> NetworkConfig {
    NetworkConfig {
        in_channels: 6,
        out_channels: 6,
        scales: vec![
            ScaleConfig {
                factor: 1,
                width: 24,
                residual: true,
                blocks: vec![BlockKind::GroupConv { groups: 3, k: 3 }; 2],
            },
            ScaleConfig {
                factor: 4,
                width: 48,
                residual: true,
                blocks: vec![BlockKind::DepthwiseSeparable { k: 3 }; 2],
            },
            ScaleConfig {
                factor: 16,
                width: 96,
                residual: true,
                blocks: vec![BlockKind::HybridFirIir; 2],
            },
        ],
        skips: vec![
            SkipConfig {
                from_scale: 0,
                to_scale: 0,
                compressed_channels: 4,
                dpcm_enabled: true,
                dpcm_bits: 8,
            },
            SkipConfig {
                from_scale: 1,
                to_scale: 1,
                compressed_channels: 8,
                dpcm_enabled: false,
                dpcm_bits: 8,
            },
        ],
    }
}

/// The ablation variant: bottleneck hybrid FIR-IIR blocks replaced by
/// depthwise separable 3x3 convolutions, everything else unchanged.
pub fn fir_ablation_config() -> NetworkConfig {
    let mut cfg = reference_config();
    let last = cfg.scales.len() - 1;
    for b in &mut cfg.scales[last].blocks {
        *b = BlockKind::DepthwiseSeparable { k: 3 };
    }
    cfg
}

/// Resolve a CLI `--config` value: a builtin name or a TOML file path.
pub fn load_config(spec: &str) -> Result<NetworkConfig> {
    match spec {
        "magic-ref" => Ok(reference_config()),
        "fir-ablation" => Ok(fir_ablation_config()),
        path => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(MagicError::Input(format!(
                    "config '{path}' is neither a builtin name (magic-ref, fir-ablation) \
                     nor an existing file"
                )));
            }
            NetworkConfig::from_toml(&std::fs::read_to_string(p)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_is_valid() {
        reference_config().validate().unwrap();
    }

    #[test]
    fn fir_ablation_is_valid() {
        let cfg = fir_ablation_config();
        cfg.validate().unwrap();
        assert!(cfg.scales[2]
            .blocks
            .iter()
            .all(|b| matches!(b, BlockKind::DepthwiseSeparable { k: 3 })));
    }

    #[test]
    fn hybrid_at_full_resolution_rejected() {
        let mut cfg = reference_config();
        cfg.scales[0].blocks[0] = BlockKind::HybridFirIir;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("coarsest"));
    }

    #[test]
    fn zero_block_scale_rejected() {
        let mut cfg = reference_config();
        cfg.scales[1].blocks.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cross_scale_skip_rejected() {
        let mut cfg = reference_config();
        cfg.skips[0].to_scale = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_pool_chain_rejected() {
        let mut cfg = reference_config();
        cfg.scales[1].factor = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = reference_config();
        let s = cfg.to_toml();
        let back = NetworkConfig::from_toml(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn ablation_changes_param_count_by_predictable_delta() {
        // hybrid block: 1x3 depthwise (96*3+96) + iir (3*96) + pointwise
        // dw-sep block: 3x3 depthwise (96*9+96) + pointwise
        // per-block delta = 96*9 - 96*3 - 3*96 = 288; two blocks = 576
        let a = reference_config().parameter_count();
        let b = fir_ablation_config().parameter_count();
        assert_eq!(b - a, 576);
    }
}
