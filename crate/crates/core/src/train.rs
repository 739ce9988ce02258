//! Training bookkeeping shared by the three trainable stages.

use candle_core::Tensor;
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::vars_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch; NaN for the pre-training record.
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-epoch curve. Epoch 0 is the validation loss before any update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn push(&mut self, record: EpochRecord) {
        self.epochs.push(record);
    }

    pub fn initial_val(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |r| r.val_loss)
    }

    pub fn best_val(&self) -> f64 {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch).map_or(f64::NAN, |r| r.val_loss)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "best_epoch": self.best_epoch,
            "initial_val_loss": self.initial_val(),
            "best_val_loss": self.best_val(),
            "curve": self.epochs.iter().map(|r| serde_json::json!({
                "epoch": r.epoch,
                "train_loss": if r.train_loss.is_finite() { Some(r.train_loss) } else { None },
                "val_loss": r.val_loss,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Copy of every parameter value, used to keep the best validation epoch.
pub(crate) struct Snapshot {
    values: Vec<Tensor>,
    pub loss: f64,
}

impl Snapshot {
    pub fn capture(varmap: &VarMap, loss: f64) -> Result<Self> {
        let values = vars_sorted(varmap)
            .iter()
            .map(|v| v.as_tensor().copy())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { values, loss })
    }

    pub fn restore(&self, varmap: &VarMap) -> Result<()> {
        for (var, value) in vars_sorted(varmap).iter().zip(&self.values) {
            var.set(value)?;
        }
        Ok(())
    }
}
