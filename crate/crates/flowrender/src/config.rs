//! Model architecture configuration shared by every network in the bundle.

use crate::error::{FlowError, Result};
use serde::{Deserialize, Serialize};

/// Architecture hyper-parameters. The defaults are the desk-scale layout the
/// test-suite pins down; everything is still a config value so toy instances
/// (gradient checks, 8x8 smoke tests) can shrink the networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input resolution. Power of two, at least 32.
    pub resolution: usize,
    /// Dimension of the latent motion vector T.
    pub motion_dim: usize,
    /// Number of 1D conv layers in the mapping network.
    pub mapping_layers: usize,
    /// Radius k of the motion-parameter window; windows hold 2k+1 columns.
    pub window_radius: usize,
    /// Depth axis of feature volumes.
    pub vol_depth: usize,
    /// Channel width of the volume right after the 2D->3D reshape.
    pub vol_base: usize,
    /// Levels in the TransUNet encoder/decoder.
    pub unet_depth: usize,
    /// Channel width of the first TransUNet level.
    pub unet_base: usize,
    /// Also inject motion via AdaIN in the TransUNet encoder (default: decoder only).
    pub adain_in_encoder: bool,
    /// Inject motion via AdaIN in the inpainting TransUNet.
    pub adain_in_inpainter: bool,
    /// Stop gradients through the target feature volume of the 3D warp loss.
    pub detach_warp_target: bool,
    /// Diagnostic switch: the flow predictor returns an all-zero field.
    pub zero_flow_stub: bool,
    /// Seed of the fixed perceptual feature extractor.
    pub phi_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 64,
            motion_dim: 256,
            mapping_layers: 3,
            window_radius: 13,
            vol_depth: 8,
            vol_base: 16,
            unet_depth: 4,
            unet_base: 32,
            adain_in_encoder: false,
            adain_in_inpainter: true,
            detach_warp_target: false,
            zero_flow_stub: false,
            phi_seed: 77,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 32 {
            return Err(FlowError::config(format!(
                "resolution {} must be a power of two and at least 32 (divisible by 32)",
                self.resolution
            )));
        }
        if self.resolution % (1 << self.unet_depth) != 0 {
            return Err(FlowError::config(format!(
                "resolution {} not divisible by 2^{} (TransUNet depth)",
                self.resolution, self.unet_depth
            )));
        }
        if self.window_len() < self.mapping_receptive_len() {
            return Err(FlowError::config(format!(
                "window of {} columns is too short for {} mapping layers (needs {})",
                self.window_len(),
                self.mapping_layers,
                self.mapping_receptive_len()
            )));
        }
        if self.motion_dim == 0 || self.vol_depth == 0 || self.vol_base == 0 || self.unet_base == 0
        {
            return Err(FlowError::config("zero-sized dimension in model config".to_string()));
        }
        Ok(())
    }

    /// Columns in one motion-parameter window.
    pub fn window_len(&self) -> usize {
        2 * self.window_radius + 1
    }

    /// Each mapping layer consumes 4 columns (kernel-3 valid conv + one-each-side crop).
    pub fn mapping_receptive_len(&self) -> usize {
        4 * self.mapping_layers + 1
    }

    /// Spatial side of the encoded feature volume.
    pub fn vol_spatial(&self) -> usize {
        self.resolution / 32
    }

    /// Channel widths of the three volume encoder blocks.
    pub fn enc_widths(&self) -> [usize; 3] {
        [2 * self.vol_base, 4 * self.vol_base, 4 * self.vol_base]
    }

    /// Channel count of the encoded feature volume.
    pub fn vol_channels(&self) -> usize {
        4 * self.vol_base
    }

    /// Shape of the encoded feature volume `[C, D, H, W]`.
    pub fn volume_shape(&self) -> [usize; 4] {
        [self.vol_channels(), self.vol_depth, self.vol_spatial(), self.vol_spatial()]
    }

    /// Shape of the dense 3D flow field `[3, D, H, W]`.
    pub fn flow_shape(&self) -> [usize; 4] {
        [3, self.vol_depth, self.vol_spatial(), self.vol_spatial()]
    }

    /// TransUNet channel width at encoder level `l`.
    pub fn unet_width(&self, level: usize) -> usize {
        self.unet_base << level.min(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.window_len(), 27);
        assert_eq!(cfg.mapping_receptive_len(), 13);
        assert_eq!(cfg.volume_shape(), [64, 8, 2, 2]);
        assert_eq!(cfg.flow_shape(), [3, 8, 2, 2]);
    }

    #[test]
    fn odd_resolution_rejected() {
        let cfg = ModelConfig { resolution: 48, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { resolution: 16, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn short_window_rejected() {
        let cfg = ModelConfig { window_radius: 2, mapping_layers: 3, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { window_radius: 2, mapping_layers: 1, ..Default::default() };
        cfg.validate().unwrap();
    }
}
