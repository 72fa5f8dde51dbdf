use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean task loss over the epoch's training batches.
    pub train_loss: f64,
    /// Mean distillation term over the epoch, for distilling methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_loss: Option<f64>,
    pub test_mse: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub invoked: u64,
    pub skipped: u64,
}

impl PassCounts {
    pub fn skip_rate(&self) -> f64 {
        let total = self.invoked + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.skipped as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherMetric {
    pub name: String,
    pub test_mse: f64,
}

/// Everything a run produces, serialised as the per-seed JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: String,
    pub committee: Vec<String>,
    pub seed: u64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Train-split MSE before the first update.
    #[serde(with = "nan_as_null")]
    pub initial_train_loss: f64,
    /// Train-split MSE after the last update.
    #[serde(with = "nan_as_null")]
    pub final_train_loss: f64,
    /// Held-out MSE after the last epoch.
    #[serde(with = "nan_as_null")]
    pub final_metric: f64,
    pub epochs: Vec<EpochMetrics>,
    pub teacher_passes: PassCounts,
    /// Distillation steps taken; pass counts cover `n × steps`.
    pub distill_steps: u64,
    /// Mean importance per teacher, one row per epoch.
    pub importance_trace: Vec<Vec<f64>>,
    #[serde(default)]
    pub teacher_metrics: Vec<TeacherMetric>,
    /// Distillation term on the very first step, before any update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_distill_loss: Option<f64>,
    /// Epoch whose weights were kept when training stopped on a validation slice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
    /// Not serialised, so reports stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Metrics that were never computed are stored as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl RunReport {
    pub fn new(method: &str, committee: Vec<String>, seed: u64) -> Self {
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            method: method.to_string(),
            committee,
            seed,
            alpha: None,
            threshold: None,
            initial_train_loss: f64::NAN,
            final_train_loss: f64::NAN,
            final_metric: f64::NAN,
            epochs: Vec::new(),
            teacher_passes: PassCounts::default(),
            distill_steps: 0,
            importance_trace: Vec::new(),
            teacher_metrics: Vec::new(),
            initial_distill_loss: None,
            selected_epoch: None,
            wall_clock_secs: 0.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `epoch,split,metric` rows: train loss and test MSE per epoch.
    pub fn write_epoch_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "split", "metric"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), "train".into(), e.train_loss.to_string()])?;
            w.write_record([e.epoch.to_string(), "test".into(), e.test_mse.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
