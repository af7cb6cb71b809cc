use serde::{Deserialize, Serialize};

use super::server::RoundScores;
use crate::Result;

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub round: usize,
    /// Aggregation weights, on the simplex.
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_entropy: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_cssv: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_cgsv: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothed_entropy: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothed_cssv: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothed_cgsv: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused: Option<Vec<f64>>,
    pub client_loss: Vec<f64>,
    pub global_accuracy: f64,
    /// Correlations of `weights` with standalone client accuracies.
    pub pearson: f64,
    pub spearman: f64,
}

impl RoundRecord {
    pub(crate) fn new(
        round: usize,
        weights: Vec<f64>,
        scores: RoundScores,
        client_loss: Vec<f64>,
        global_accuracy: f64,
        pearson: f64,
        spearman: f64,
    ) -> Self {
        Self {
            round,
            weights,
            raw_entropy: scores.raw_entropy,
            raw_cssv: scores.raw_cssv,
            raw_cgsv: scores.raw_cgsv,
            smoothed_entropy: scores.smoothed_entropy,
            smoothed_cssv: scores.smoothed_cssv,
            smoothed_cgsv: scores.smoothed_cgsv,
            fused: scores.fused,
            client_loss,
            global_accuracy,
            pearson,
            spearman,
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Server-side wall-clock per round, client training excluded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub scoring_ms: f64,
    pub fusion_ms: f64,
    pub aggregation_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub records: Vec<RoundRecord>,
    pub timings: Vec<PhaseTimings>,
    pub standalone: Vec<f64>,
    pub final_accuracy: f64,
    pub free_rider: Option<usize>,
}

impl RunLog {
    /// Mean Pearson correlation over the last quarter of rounds (at least one).
    pub fn final_quarter_pearson(&self) -> f64 {
        let n = self.records.len();
        if n == 0 {
            return 0.0;
        }
        let k = n.div_ceil(4);
        self.records[n - k..].iter().map(|r| r.pearson).sum::<f64>() / k as f64
    }

    pub fn final_pearson(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.pearson)
    }

    /// The run log as JSON lines, one record per round.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_json_line()?);
            out.push('\n');
        }
        Ok(out)
    }
}
