//! Patch-token transformer for cross-view correspondence and view-pair
//! classification, trained with hand-written gradients.
//!
//! Images are cut into `patch_size` tiles, linearly embedded, tagged with a
//! learned view embedding, and processed jointly by pre-norm transformer
//! layers whose attention uses 2D axial rotary encoding. Both views share
//! grid coordinates. Correspondence is read out as the rescaled cosine
//! similarity of final features; classification uses a leading class token.
//! With `layers = 0` the model reduces to patch embedding plus the cosine
//! head, the no-attention baseline.

mod checkpoint;
mod gradcheck;
mod model;
pub mod nn;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use model::{
    bias_matrix, cosine_head, extract_image_patches, extract_patches, MatcherModel, Patches,
    TokenSequence,
};
pub use nn::{attention_scores, bce_loss, biased_attention, mse_loss, rope_encode};
pub use optim::{adam_step, cosine_lr, AdamState};
pub use train::{
    constant_baseline_mse, evaluate_classifier, evaluate_correspondence, load_examples,
    predict_bias, train_classifier, train_correspondence, write_history_csv, EpochRecord, Example,
    TrainResult,
};

/// Where the early-fusion attention bias comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasSource {
    None,
    #[serde(alias = "gt")]
    GroundTruth,
    Predicted,
}

/// How two views are combined for classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// View 1 only.
    Single,
    /// Both views in one sequence with a class token.
    Early,
    /// Each view separately; probabilities averaged.
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Zero gives the no-attention baseline.
    pub layers: usize,
    /// Feed-forward hidden width as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    pub alpha_init: f64,
    pub rope_base: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub bias_source: BiasSource,
    /// Fine-tune only the class token, head, and bias scales.
    pub freeze_trunk: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            patch_size: 8,
            embed_dim: 64,
            heads: 4,
            head_dim: 16,
            layers: 2,
            ffn_mult: 2,
            alpha_init: 1.0,
            rope_base: 100.0,
            lr_pretrain: 1e-4,
            lr_finetune: 1e-5,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            bias_source: BiasSource::None,
            freeze_trunk: false,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_mult", self.ffn_mult),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.embed_dim != self.heads * self.head_dim {
            return Err(Error::invalid(format!(
                "embed_dim {} != heads {} x head_dim {}",
                self.embed_dim, self.heads, self.head_dim
            )));
        }
        if self.head_dim % 4 != 0 {
            return Err(Error::invalid("head_dim must be divisible by 4"));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::invalid("alpha_init must be finite"));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(Error::invalid("rope_base must be > 1"));
        }
        for (name, lr) in [("lr_pretrain", self.lr_pretrain), ("lr_finetune", self.lr_finetune)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn check_image(&self, nu: usize, nv: usize) -> Result<()> {
        if nu % self.patch_size != 0 || nv % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "patch size {} does not divide image {nu}x{nv}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(MatcherConfig::default().validate().is_ok());
        let bad = MatcherConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = MatcherConfig {
            head_dim: 6,
            heads: 2,
            embed_dim: 12,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = MatcherConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(MatcherConfig::default().check_image(64, 60).is_err());
    }

    #[test]
    fn config_json() {
        let c: MatcherConfig =
            serde_json::from_str(r#"{"layers": 0, "bias_source": "gt"}"#).unwrap();
        assert_eq!(c.layers, 0);
        assert_eq!(c.bias_source, BiasSource::GroundTruth);
        assert!(serde_json::from_str::<MatcherConfig>(r#"{"layerz": 1}"#).is_err());
    }
}
