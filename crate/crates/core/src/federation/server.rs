use std::time::Instant;

use rayon::prelude::*;

use super::record::PhaseTimings;
use super::{FederationConfig, Strategy};
use crate::fusion::{Fuser, RankAdaptiveKalman};
use crate::linalg::DenseMatrix;
use crate::nn::{LayerUpdate, ModelParams};
use crate::scoring::{
    self, cgsv_score, cssv, normalize_scores, spectral_entropy, ContributionState, EntropyMode,
    ScoreVector, Signal,
};
use crate::{Error, Result};

/// Raw and smoothed per-client scores of one round; `None` where the
/// strategy does not need a signal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundScores {
    pub raw_entropy: Option<Vec<f64>>,
    pub raw_cssv: Option<Vec<f64>>,
    pub raw_cgsv: Option<Vec<f64>>,
    pub smoothed_entropy: Option<Vec<f64>>,
    pub smoothed_cssv: Option<Vec<f64>>,
    pub smoothed_cgsv: Option<Vec<f64>>,
    pub fused: Option<Vec<f64>>,
}

/// Server-side contribution estimation. Owns the smoothing and filter state
/// for the length of a run.
pub struct Server {
    strategy: Strategy,
    entropy_mode: EntropyMode,
    floor: f64,
    shard_sizes: Vec<usize>,
    contributions: ContributionState,
    fuser: Option<Box<dyn Fuser>>,
}

impl std::fmt::Debug for Server {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Server")
            .field("strategy", &self.strategy)
            .field("entropy_mode", &self.entropy_mode)
            .field("floor", &self.floor)
            .field("contributions", &self.contributions)
            .finish_non_exhaustive()
    }
}

impl Server {
    pub fn new(config: &FederationConfig, shard_sizes: Vec<usize>) -> Result<Self> {
        let n = shard_sizes.len();
        let fuser: Option<Box<dyn Fuser>> = match config.strategy {
            Strategy::SpectralFuse => Some(Box::new(RankAdaptiveKalman::new(n, config.kalman)?)),
            _ => None,
        };
        Ok(Self {
            strategy: config.strategy,
            entropy_mode: config.entropy_mode,
            floor: config.weight_floor,
            shard_sizes,
            contributions: ContributionState::new(n, config.momentum)?,
            fuser,
        })
    }

    /// Replaces the fusion stage of `SpectralFuse`.
    pub fn with_fuser(mut self, fuser: Box<dyn Fuser>) -> Self {
        self.fuser = Some(fuser);
        self
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn contributions(&self) -> &ContributionState {
        &self.contributions
    }

    fn entropies(&self, updates: &[LayerUpdate]) -> Result<Vec<f64>> {
        let mode = self.entropy_mode;
        updates
            .par_iter()
            .map(|u| spectral_entropy(u.final_layer(), mode).map(|s| s.value))
            .collect()
    }

    fn alignments(updates: &[LayerUpdate]) -> Result<Vec<f64>> {
        let aggregate: DenseMatrix = scoring::mean_matrix(updates.iter().map(LayerUpdate::final_layer))?;
        updates
            .par_iter()
            .map(|u| cssv(u.final_layer(), &aggregate))
            .collect()
    }

    fn gradient_similarities(updates: &[LayerUpdate]) -> Result<Vec<f64>> {
        let average = scoring::mean_update(updates)?;
        updates.par_iter().map(|u| cgsv_score(u, &average)).collect()
    }

    /// Scores a round of client updates and derives aggregation weights.
    pub fn weigh(&mut self, updates: &[LayerUpdate]) -> Result<(RoundScores, ScoreVector, PhaseTimings)> {
        let n = self.shard_sizes.len();
        if updates.len() != n {
            return Err(Error::Consistency(format!(
                "{} updates for {n} clients",
                updates.len()
            )));
        }
        let mut scores = RoundScores::default();
        let mut timings = PhaseTimings::default();
        let floor = self.floor;
        let scoring_started = Instant::now();

        let weights = match self.strategy {
            Strategy::FedAvgUniform => ScoreVector::uniform(n),
            Strategy::FedAvgSamples => {
                let total: usize = self.shard_sizes.iter().sum();
                ScoreVector::from_simplex(
                    self.shard_sizes
                        .iter()
                        .map(|&m| m as f64 / total as f64)
                        .collect(),
                )?
            }
            Strategy::Cgsv => {
                let raw = Self::gradient_similarities(updates)?;
                let smoothed = self.contributions.observe(&raw, Signal::Cgsv);
                let w = normalize_scores(&smoothed, floor);
                scores.raw_cgsv = Some(raw);
                scores.smoothed_cgsv = Some(smoothed);
                w
            }
            Strategy::ShapFed => {
                let raw = Self::alignments(updates)?;
                let smoothed = self.contributions.observe(&raw, Signal::Cssv);
                let w = normalize_scores(&smoothed, floor);
                scores.raw_cssv = Some(raw);
                scores.smoothed_cssv = Some(smoothed);
                w
            }
            Strategy::SpectralFed => {
                let raw = self.entropies(updates)?;
                let smoothed = self.contributions.observe(&raw, Signal::Entropy);
                let w = normalize_scores(&smoothed, floor);
                scores.raw_entropy = Some(raw);
                scores.smoothed_entropy = Some(smoothed);
                w
            }
            Strategy::SpectralFuse => {
                let raw_s = self.entropies(updates)?;
                let raw_g = Self::alignments(updates)?;
                let sm_s = self.contributions.observe(&raw_s, Signal::Entropy);
                let sm_g = self.contributions.observe(&raw_g, Signal::Cssv);
                let s = normalize_scores(&sm_s, floor);
                let g = normalize_scores(&sm_g, floor);
                timings.scoring_ms = scoring_started.elapsed().as_secs_f64() * 1e3;

                let fusion_started = Instant::now();
                let fuser = self
                    .fuser
                    .as_mut()
                    .ok_or_else(|| Error::ContractViolation("SpectralFuse without a fuser".into()))?;
                let fused = fuser.fuse(s.as_slice(), g.as_slice())?;
                let w = normalize_scores(&fused, floor);
                timings.fusion_ms = fusion_started.elapsed().as_secs_f64() * 1e3;

                scores.raw_entropy = Some(raw_s);
                scores.raw_cssv = Some(raw_g);
                scores.smoothed_entropy = Some(sm_s);
                scores.smoothed_cssv = Some(sm_g);
                scores.fused = Some(fused);
                return Ok((scores, w, timings));
            }
        };
        timings.scoring_ms = scoring_started.elapsed().as_secs_f64() * 1e3;
        Ok((scores, weights, timings))
    }
}

/// Convex combination `sum_i c_i w_i`, accumulated in client order.
pub fn aggregate(models: &[ModelParams], weights: &ScoreVector) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::InsufficientData("no models to aggregate".into()))?;
    if weights.len() != models.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    if models.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::Dimension("models with different shapes".into()));
    }
    let w = weights.as_slice();
    let sum: f64 = w.iter().sum();
    if w.iter().any(|c| *c < -1e-6) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::ContractViolation(format!("weights {w:?} are off the simplex")));
    }
    let mut out = first.clone();
    for (k, layer) in out.layers_mut().iter_mut().enumerate() {
        let ws = layer.weight.as_mut_slice();
        ws.fill(0.0);
        layer.bias.fill(0.0);
        for (m, c) in models.iter().zip(w) {
            let src = &m.layers()[k];
            for (a, b) in ws.iter_mut().zip(src.weight.as_slice()) {
                *a += c * b;
            }
            for (a, b) in layer.bias.iter_mut().zip(&src.bias) {
                *a += c * b;
            }
        }
    }
    Ok(out)
}
