use ndarray::{Array1, Array2};

use super::config::ModelConfig;
use super::layers::{cst, Scalar};
use super::ModelError;
use crate::embedding::InstructionEmbeddings;
use crate::scenario::{DrivingIntent, EgoStateHistory, RgbImage, ScenarioRecord};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Instruction embeddings as model-precision vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionVectors<F> {
    pub scene_emb: Array1<F>,
    pub risk_plan_emb: Array1<F>,
}

impl<F: Scalar> InstructionVectors<F> {
    pub fn from_embeddings(e: &InstructionEmbeddings) -> Self {
        let conv = |v: &[f32]| v.iter().map(|&x| cst::<F>(x as f64)).collect::<Array1<F>>();
        InstructionVectors {
            scene_emb: conv(e.scene_emb.values()),
            risk_plan_emb: conv(e.risk_plan_emb.values()),
        }
    }
}

/// Preprocessed network input for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<F> {
    /// One `[patches_per_camera, 3 * patch_size²]` matrix per camera.
    pub patches: Vec<Array2<F>>,
    /// `[16, 6]` rows of `[x, y, vx, vy, ax, ay]`.
    pub history: Array2<F>,
    pub intent: DrivingIntent,
    pub instructions: Option<InstructionVectors<F>>,
}

impl<F: Scalar> ModelInput<F> {
    /// Normalizes and patchifies the eight views of `record`. Embeddings may
    /// be omitted for runs without the instruction path.
    pub fn from_record(
        record: &ScenarioRecord,
        embeddings: Option<&InstructionEmbeddings>,
        config: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let views = record.frames.views();
        if views.len() != config.num_cameras {
            return Err(ModelError::Shape(format!(
                "{}: expected {} camera views, got {}",
                record.id,
                config.num_cameras,
                views.len()
            )));
        }
        let patches = views
            .iter()
            .map(|v| image_to_patches(v, config))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| match e {
                ModelError::Shape(m) => ModelError::Shape(format!("{}: {m}", record.id)),
                other => other,
            })?;
        let instructions = match embeddings {
            Some(e) => {
                if e.dim() != config.d_text {
                    return Err(ModelError::Shape(format!(
                        "{}: embedding width {} does not match d_text {}",
                        record.id,
                        e.dim(),
                        config.d_text
                    )));
                }
                Some(InstructionVectors::from_embeddings(e))
            }
            None => None,
        };
        Ok(ModelInput {
            patches,
            history: history_matrix(&record.history),
            intent: record.intent,
            instructions,
        })
    }
}

pub fn history_matrix<F: Scalar>(h: &EgoStateHistory) -> Array2<F> {
    let rows = h.states();
    Array2::from_shape_fn((rows.len(), 6), |(t, j)| cst(rows[t].to_array()[j]))
}

/// ImageNet-normalizes `img`, average-pools by `image_downsample` and cuts
/// it into row-major non-overlapping patches. Each patch vector is laid out
/// as `(row, column, channel)`.
pub fn image_to_patches<F: Scalar>(img: &RgbImage, config: &ModelConfig) -> Result<Array2<F>, ModelError> {
    let size = config.image_size;
    if img.width as usize != size || img.height as usize != size {
        return Err(ModelError::Shape(format!(
            "expected {size}x{size} image, got {}x{}",
            img.width, img.height
        )));
    }
    let k = config.image_downsample;
    let side = config.input_side();
    let inv_area = 1.0 / (k * k) as f64;
    // Pooled, normalized planes in (y, x, c) order.
    let mut pooled = vec![0.0f64; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let mut acc = [0.0f64; 3];
            for dy in 0..k {
                for dx in 0..k {
                    let p = img.pixel((x * k + dx) as u32, (y * k + dy) as u32);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            for c in 0..3 {
                let v = acc[c] * inv_area / 255.0;
                pooled[(y * side + x) * 3 + c] = (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
    }
    let ps = config.patch_size;
    let per_side = side / ps;
    let mut out = Array2::zeros((per_side * per_side, config.patch_dim()));
    for py in 0..per_side {
        for px in 0..per_side {
            let mut r = out.row_mut(py * per_side + px);
            let mut i = 0;
            for y in 0..ps {
                for x in 0..ps {
                    let base = ((py * ps + y) * side + px * ps + x) * 3;
                    for c in 0..3 {
                        r[i] = cst(pooled[base + c]);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_layout_and_normalization() {
        let mut img = RgbImage::new(4, 4);
        img.put(2, 0, [255, 0, 0]);
        let cfg = ModelConfig {
            image_size: 4,
            patch_size: 2,
            ..Default::default()
        };
        let p: Array2<f64> = image_to_patches(&img, &cfg).unwrap();
        assert_eq!(p.dim(), (4, 12));
        // pixel (2,0) is the first pixel of patch 1
        assert!((p[[1, 0]] - (1.0 - 0.485) / 0.229).abs() < 1e-12);
        assert!((p[[0, 0]] - (-0.485 / 0.229)).abs() < 1e-12);
    }

    #[test]
    fn downsample_averages_blocks() {
        let mut img = RgbImage::new(4, 4);
        img.put(0, 0, [255, 255, 255]);
        let cfg = ModelConfig {
            image_size: 4,
            image_downsample: 2,
            patch_size: 2,
            ..Default::default()
        };
        let p: Array2<f64> = image_to_patches(&img, &cfg).unwrap();
        assert_eq!(p.dim(), (1, 12));
        assert!((p[[0, 0]] - (0.25 - 0.485) / 0.229).abs() < 1e-12);
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let img = RgbImage::new(8, 8);
        assert!(matches!(
            image_to_patches::<f32>(&img, &ModelConfig::default()),
            Err(ModelError::Shape(_))
        ));
    }
}
