use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::embedding::DEFAULT_TEXT_DIM;
use crate::scenario::{FUTURE_LEN, HISTORY_LEN};

/// Architecture hyper-parameters of the tri-modal planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Width of the instruction embeddings.
    pub d_text: usize,
    /// Side length of the square camera images fed to the model.
    pub image_size: usize,
    /// Average-pooling factor applied to images before patchifying.
    pub image_downsample: usize,
    pub patch_size: usize,
    /// Width of the patch transformer before projection to `d_model`.
    pub vit_dim: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    pub state_layers: usize,
    pub state_heads: usize,
    pub fusion_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub t_future: usize,
    pub h_hist: usize,
    /// Weight of the risk cross-attention residual.
    pub alpha: f64,
    pub num_cameras: usize,
    /// Learnable gain/bias on the layer norm after risk attention.
    pub risk_norm_affine: bool,
    pub ln_eps: f64,
    /// Append the visual tokens to the decoder memory.
    pub memory_includes_visual_tokens: bool,
    /// Metres per unit of decoder displacement output.
    pub displacement_scale: f64,
    pub init_std: f64,
    /// Per-feature multiplier applied to `[x, y, vx, vy, ax, ay]` before the
    /// state encoder's input layer.
    pub state_input_scale: [f64; 6],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            d_text: DEFAULT_TEXT_DIM,
            image_size: 224,
            image_downsample: 1,
            patch_size: 16,
            vit_dim: 128,
            vit_layers: 2,
            vit_heads: 4,
            state_layers: 2,
            state_heads: 4,
            fusion_heads: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            mlp_ratio: 4,
            t_future: FUTURE_LEN,
            h_hist: HISTORY_LEN,
            alpha: 0.3,
            num_cameras: 8,
            risk_norm_affine: false,
            ln_eps: 1e-5,
            memory_includes_visual_tokens: false,
            displacement_scale: 1.0,
            init_std: 0.02,
            state_input_scale: [0.1, 0.1, 0.1, 0.1, 1.0, 1.0],
        }
    }
}

impl ModelConfig {
    /// Checks every invariant, including `t_future == 20`.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.validate_shapes()?;
        if self.t_future != FUTURE_LEN {
            return Err(ModelError::Config(format!("t_future must be {FUTURE_LEN}, got {}", self.t_future)));
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate) but accepts any positive horizon;
    /// used by reduced test configurations.
    pub fn validate_shapes(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.vit_dim == 0 || self.d_text == 0 {
            return err("widths must be positive".into());
        }
        for (name, dim, heads) in [
            ("vit_heads", self.vit_dim, self.vit_heads),
            ("state_heads", self.d_model, self.state_heads),
            ("fusion_heads", self.d_model, self.fusion_heads),
            ("decoder_heads", self.d_model, self.decoder_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return err(format!("{name}={heads} does not divide width {dim}"));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return err(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if self.h_hist != HISTORY_LEN {
            return err(format!("h_hist must be {HISTORY_LEN}, got {}", self.h_hist));
        }
        if self.t_future == 0 {
            return err("t_future must be positive".into());
        }
        if self.num_cameras == 0 || self.num_cameras > 8 {
            return err(format!("num_cameras must be in 1..=8, got {}", self.num_cameras));
        }
        if self.image_downsample == 0 || !self.image_size.is_multiple_of(self.image_downsample) {
            return err(format!(
                "image_downsample={} does not divide image_size={}",
                self.image_downsample, self.image_size
            ));
        }
        if self.patch_size == 0 || !self.input_side().is_multiple_of(self.patch_size) {
            return err(format!(
                "patch_size={} does not divide the model input side {}",
                self.patch_size,
                self.input_side()
            ));
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        if !(self.ln_eps > 0.0 && self.displacement_scale > 0.0 && self.init_std > 0.0) {
            return err("ln_eps, displacement_scale and init_std must be positive".into());
        }
        if self.state_input_scale.iter().any(|s| !s.is_finite()) {
            return err("state_input_scale must be finite".into());
        }
        Ok(())
    }

    /// Image side after downsampling.
    pub fn input_side(&self) -> usize {
        self.image_size / self.image_downsample.max(1)
    }

    pub fn patches_per_camera(&self) -> usize {
        (self.input_side() / self.patch_size).pow(2)
    }

    /// Number of visual tokens over all cameras.
    pub fn num_visual_tokens(&self) -> usize {
        self.num_cameras * self.patches_per_camera()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Reduced network used by the ablation benchmark and fast runs: 56×56
    /// inputs, 8-pixel patches, width 32, one layer per stack, decoder memory
    /// extended with the visual tokens.
    pub fn bench() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            image_downsample: 4,
            patch_size: 8,
            vit_dim: 32,
            vit_layers: 1,
            state_layers: 1,
            decoder_layers: 1,
            mlp_ratio: 2,
            memory_includes_visual_tokens: true,
            ..Default::default()
        }
    }

    pub fn hidden(&self, dim: usize) -> usize {
        dim * self.mlp_ratio
    }
}

/// Switches that remove one path of the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Drop both instruction embeddings: no scene fusion, no risk attention.
    pub no_instruction: bool,
    /// Skip the intent modulator.
    pub no_intent: bool,
    /// Skip the state encoder and planning-context fusion.
    pub no_state: bool,
}

impl AblationFlags {
    pub const BASE: AblationFlags = AblationFlags {
        no_instruction: false,
        no_intent: false,
        no_state: false,
    };

    /// Short name used for run directories.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_instruction {
            parts.push("no_instruction");
        }
        if self.no_intent {
            parts.push("no_intent");
        }
        if self.no_state {
            parts.push("no_state");
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join("+")
        }
    }

    /// Inverse of [`AblationFlags::name`].
    pub fn from_name(name: &str) -> Option<AblationFlags> {
        let mut f = AblationFlags::BASE;
        if name == "base" {
            return Some(f);
        }
        for part in name.split('+') {
            let slot = match part {
                "no_instruction" => &mut f.no_instruction,
                "no_intent" => &mut f.no_intent,
                "no_state" => &mut f.no_state,
                _ => return None,
            };
            if *slot {
                return None;
            }
            *slot = true;
        }
        Some(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_has_1568_tokens() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_visual_tokens(), 8 * 196);
        assert_eq!(c.alpha, 0.3);
    }

    #[test]
    fn rejects_bad_heads_alpha_and_horizon() {
        let c = ModelConfig { fusion_heads: 3, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { alpha: -0.1, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { t_future: 3, ..Default::default() };
        assert!(c.validate().is_err());
        c.validate_shapes().unwrap();
        let c = ModelConfig { h_hist: 8, ..Default::default() };
        assert!(c.validate_shapes().is_err());
        let c = ModelConfig { image_downsample: 3, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_names_round_trip() {
        for bits in 0..8u8 {
            let f = AblationFlags {
                no_instruction: bits & 1 != 0,
                no_intent: bits & 2 != 0,
                no_state: bits & 4 != 0,
            };
            assert_eq!(AblationFlags::from_name(&f.name()), Some(f));
        }
        assert_eq!(AblationFlags::from_name("no_state+no_state"), None);
        assert_eq!(AblationFlags::from_name("nostate"), None);
    }

    #[test]
    fn config_json_round_trip() {
        let c = ModelConfig { d_model: 32, alpha: 0.7, ..Default::default() };
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: ModelConfig = serde_json::from_str(r#"{"d_model": 64}"#).unwrap();
        assert_eq!(partial.d_model, 64);
        assert_eq!(partial.vit_dim, 128);
    }

    #[test]
    fn ablation_names() {
        assert_eq!(AblationFlags::BASE.name(), "base");
        assert_eq!(AblationFlags { no_state: true, ..Default::default() }.name(), "no_state");
    }
}
