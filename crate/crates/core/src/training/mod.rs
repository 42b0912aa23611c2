//! Composite identity + triplet objective, its analytic gradients, and the
//! PK-sampled optimization loop.

mod fit;
mod grad;
mod loss;
mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::AreaRatios;

pub use fit::{fit, identity_prototypes, pk_batches, BatchRecord, FitOutput};
pub use grad::{loss_gradients, ModelGradients};
pub use loss::{
    batch_triplet_loss, forward, id_loss, softmin_logits, total_loss, triplet_loss_space, Batch, ForwardPass,
    Prototypes,
};
pub use optim::Optimizer;

/// How the identity-classification term is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdLossMode {
    /// Cross-entropy over per-space ArcFace logits, averaged over the spaces.
    #[default]
    ArcfaceCe,
    /// Cross-entropy over `−fused_distance / τ` to per-identity prototypes.
    SoftminDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_id: f64,
    pub lambda_triplet: f64,
    pub triplet_margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub id_loss: IdLossMode,
    pub softmin_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_id: 1.0,
            lambda_triplet: 1.0,
            triplet_margin: 0.3,
            learning_rate: 1e-3,
            epochs: 10,
            batch_p: 8,
            batch_k: 4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            id_loss: IdLossMode::ArcfaceCe,
            softmin_temperature: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda_id >= 0.0 && self.lambda_triplet >= 0.0) {
            return bad("lambda_id and lambda_triplet must be nonnegative".into());
        }
        if self.lambda_id == 0.0 && self.lambda_triplet == 0.0 {
            return bad("lambda_id and lambda_triplet must not both be zero".into());
        }
        if !(self.triplet_margin >= 0.0 && self.triplet_margin.is_finite()) {
            return bad(format!(
                "triplet_margin must be nonnegative, got {}",
                self.triplet_margin
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return bad(format!(
                "batch_p and batch_k must be at least 2, got {}x{}",
                self.batch_p, self.batch_k
            ));
        }
        if !(self.softmin_temperature > 0.0 && self.softmin_temperature.is_finite()) {
            return bad("softmin_temperature must be positive".into());
        }
        Ok(())
    }
}

/// One training image: backbone embedding, label and mask-derived ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image_id: String,
    pub identity: u32,
    pub embedding: Vec<f64>,
    pub area_ratios: AreaRatios,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub id_loss: f64,
    /// Global, front, side, rear.
    pub triplet_loss_per_space: [f64; 4],
    pub triplet_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn compose(id_loss: f64, per_space: [f64; 4], config: &TrainConfig) -> Self {
        let triplet_loss = per_space.iter().sum::<f64>();
        Self {
            id_loss,
            triplet_loss_per_space: per_space,
            triplet_loss,
            total: config.lambda_id * id_loss + config.lambda_triplet * triplet_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.id_loss.is_finite() && self.triplet_loss.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero = TrainConfig {
            lambda_id: 0.0,
            lambda_triplet: 0.0,
            ..Default::default()
        };
        let err = zero.validate().unwrap_err().to_string();
        assert!(err.contains("lambda_id and lambda_triplet"), "{err}");
        assert!(TrainConfig {
            batch_k: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_p: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lambda_id: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn report_composition() {
        let cfg = TrainConfig {
            lambda_id: 0.5,
            lambda_triplet: 2.0,
            ..Default::default()
        };
        let r = LossReport::compose(1.5, [0.1, 0.2, 0.0, 0.3], &cfg);
        assert!((r.triplet_loss - 0.6).abs() < 1e-15);
        assert!((r.total - (0.75 + 1.2)).abs() < 1e-12);
    }
}
