//! JSON documents written by the commands and read back by `report`.

use depth_dissect_core::eval::{AttributionReport, CorrectionResult, DepthMetrics};
use serde::{Deserialize, Serialize};

pub const METRICS: &str = "metrics.json";
pub const ATTACK: &str = "attack.json";
pub const BASELINE: &str = "baseline.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

pub fn selectivity_name(layer: &str) -> String {
    format!("selectivity_{layer}.json")
}

pub fn ablation_name(layer: &str) -> String {
    format!("ablation_{layer}.json")
}

pub fn correction_name(layer: &str) -> String {
    format!("correction_{layer}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub model: String,
    pub data: String,
    pub metrics: DepthMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionArtifact {
    pub layer: String,
    pub model: String,
    pub table_data: String,
    pub data: String,
    pub result: CorrectionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackArtifact {
    pub epsilon: f64,
    pub layer: String,
    pub samples: usize,
    pub clean: DepthMetrics,
    pub adversarial: DepthMetrics,
    /// Largest `|x' − x|` over all attacked pixels.
    pub max_perturbation: f64,
    /// Mean over attribution entries of the assigned units' IoU and of the control IoU.
    pub mean_iou: Option<f64>,
    pub mean_control_iou: Option<f64>,
    pub reports: Vec<AttributionReport>,
}

impl AttackArtifact {
    pub fn summarize(reports: &[AttributionReport]) -> (Option<f64>, Option<f64>) {
        let entries = reports.iter().flat_map(|r| &r.entries);
        let (mut iou, mut ctl, mut n, mut nc) = (0.0, 0.0, 0usize, 0usize);
        for e in entries {
            iou += e.mean_iou;
            n += 1;
            if let Some(c) = e.control_iou {
                ctl += c;
                nc += 1;
            }
        }
        (
            (n > 0).then(|| iou / n as f64),
            (nc > 0).then(|| ctl / nc as f64),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineArtifact {
    pub bins: usize,
    pub trials: usize,
    pub b: f64,
    pub seed: u64,
    pub estimate: f64,
}
