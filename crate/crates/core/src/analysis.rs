//! Post-hoc analytics over run logs: free-rider flagging, the layer-wise
//! entropy study and (Q, ε) sensitivity grids.

use serde::Serialize;

use crate::federation::{self, Cohort, FederationConfig, RoundRecord, Server, Strategy};
use crate::linalg::{mean, median_mad, pearson, std_dev};
use crate::nn::LayerUpdate;
use crate::scoring::{normalize_scores, spectral_entropy, ContributionState, Signal};
use crate::{Error, Result};

/// Centered log-ratio: `ln w_i - mean(ln w)`.
pub fn clr(weights: &[f64]) -> Result<Vec<f64>> {
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::ContractViolation(format!(
            "clr needs strictly positive weights, got {w}"
        )));
    }
    let logs: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let m = mean(&logs);
    Ok(logs.into_iter().map(|l| l - m).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeRiderReport {
    pub clr: Vec<f64>,
    /// Robust z-scores; all zero when every weight is equal.
    pub z: Vec<f64>,
    pub flagged: Vec<bool>,
    pub tau: f64,
    /// Inclusive round range the report covers.
    pub interval: (usize, usize),
}

impl FreeRiderReport {
    pub fn flagged_clients(&self) -> Vec<usize> {
        (0..self.flagged.len()).filter(|&i| self.flagged[i]).collect()
    }
}

/// Flags clients whose clr-transformed weight sits more than `tau` MADs
/// below the median.
pub fn detect_free_riders(weights: &[f64], tau: f64) -> Result<FreeRiderReport> {
    if weights.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "free-rider detection needs at least 3 clients, got {}",
            weights.len()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("detection.tau", format!("{tau} must be positive")));
    }
    let y = clr(weights)?;
    let (med, mad) = median_mad(&y)?;
    // A majority of tied weights zeroes the MAD; the mean absolute deviation
    // still separates a lone outlier from them.
    let spread = if mad > 0.0 {
        mad
    } else {
        y.iter().map(|v| (v - med).abs()).sum::<f64>() / y.len() as f64
    };
    let z: Vec<f64> = if spread > 1e-12 {
        y.iter().map(|v| (v - med) / spread).collect()
    } else {
        vec![0.0; y.len()]
    };
    let flagged = z.iter().map(|&zi| zi < -tau).collect();
    Ok(FreeRiderReport {
        clr: y,
        z,
        flagged,
        tau,
        interval: (0, 0),
    })
}

/// `k` contiguous, inclusive round ranges covering `1..=rounds`.
pub fn equal_intervals(rounds: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 || rounds < k {
        return Err(Error::invalid(
            "detection.intervals",
            format!("cannot split {rounds} rounds into {k} intervals"),
        ));
    }
    Ok((0..k)
        .map(|j| (j * rounds / k + 1, (j + 1) * rounds / k))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalRates {
    pub start: usize,
    pub end: usize,
    /// Share of rounds in which the true free-rider was flagged.
    pub true_positive: f64,
    /// Per-client share of flagged rounds; `0` at the free-rider's index.
    pub false_positive: Vec<f64>,
}

impl IntervalRates {
    pub fn max_false_positive(&self) -> f64 {
        self.false_positive.iter().copied().fold(0.0, f64::max)
    }
}

/// Per-interval flag frequencies of a run log.
pub fn detection_rate(
    records: &[RoundRecord],
    free_rider: usize,
    intervals: &[(usize, usize)],
    tau: f64,
) -> Result<Vec<IntervalRates>> {
    let n = records
        .first()
        .map(|r| r.weights.len())
        .ok_or_else(|| Error::InsufficientData("empty run log".into()))?;
    if free_rider >= n {
        return Err(Error::invalid("free_rider.client", format!("{free_rider} out of range for {n} clients")));
    }
    let flags: Vec<(usize, Vec<bool>)> = records
        .iter()
        .map(|r| detect_free_riders(&r.weights, tau).map(|rep| (r.round, rep.flagged)))
        .collect::<Result<_>>()?;
    intervals
        .iter()
        .map(|&(start, end)| {
            let window: Vec<&Vec<bool>> = flags
                .iter()
                .filter(|(t, _)| (start..=end).contains(t))
                .map(|(_, f)| f)
                .collect();
            if start == 0 || start > end || window.len() != end - start + 1 {
                return Err(Error::invalid(
                    "detection.intervals",
                    format!("rounds {start}..={end} not covered by the run log"),
                ));
            }
            let len = window.len() as f64;
            let rate = |i: usize| window.iter().filter(|f| f[i]).count() as f64 / len;
            Ok(IntervalRates {
                start,
                end,
                true_positive: rate(free_rider),
                false_positive: (0..n).map(|i| if i == free_rider { 0.0 } else { rate(i) }).collect(),
            })
        })
        .collect()
}

/// Runs `config` (which must name a free-rider) and reports detection rates
/// over `config.detection.intervals` equal intervals.
pub fn free_rider_experiment(config: &FederationConfig) -> Result<(federation::RunLog, Vec<IntervalRates>)> {
    let fr = config
        .free_rider
        .ok_or_else(|| Error::invalid("free_rider.client", "required for free-rider detection"))?;
    let log = federation::run_experiment(config)?;
    let intervals = equal_intervals(config.rounds, config.detection.intervals)?;
    let rates = detection_rate(&log.records, fr.client, &intervals, config.detection.tau)?;
    Ok((log, rates))
}

/// Mean Pearson correlation of each layer's normalized entropy weights with
/// standalone accuracy, averaged over all rounds of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStudy {
    pub seed: u64,
    pub per_layer: Vec<f64>,
}

impl LayerStudy {
    /// Index of the layer with the highest mean correlation.
    pub fn best_layer(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.per_layer.iter().enumerate() {
            if *v > self.per_layer[best] {
                best = i;
            }
        }
        best
    }
}

pub fn layerwise_on_cohort(config: &FederationConfig, cohort: &Cohort) -> Result<LayerStudy> {
    let layers = cohort.initial.layers().len();
    let n = cohort.shards.len();
    if cohort.standalone.len() != n {
        return Err(Error::InsufficientData("cohort lacks standalone accuracies".into()));
    }
    let mut states = (0..layers)
        .map(|_| ContributionState::new(n, config.momentum))
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![0.0; layers];
    let mut rounds = 0usize;
    let standalone = cohort.standalone.clone();
    let mode = config.entropy_mode;
    let floor = config.weight_floor;
    let mut observer = |_round: usize, updates: &[LayerUpdate]| -> Result<()> {
        for (k, state) in states.iter_mut().enumerate() {
            let raw = updates
                .iter()
                .map(|u| spectral_entropy(&u.weights[k], mode).map(|s| s.value))
                .collect::<Result<Vec<_>>>()?;
            let smoothed = state.observe(&raw, Signal::Entropy);
            let w = normalize_scores(&smoothed, floor);
            sums[k] += pearson(w.as_slice(), &standalone)?;
        }
        rounds += 1;
        Ok(())
    };
    let server = Server::new(config, cohort.shard_sizes())?;
    federation::run_federation_observed(config, cohort, server, &mut observer)?;
    Ok(LayerStudy {
        seed: config.seed,
        per_layer: sums.into_iter().map(|s| s / rounds.max(1) as f64).collect(),
    })
}

/// Layer-wise study for one seed (`config.seed`).
pub fn layerwise_entropy_study(config: &FederationConfig) -> Result<LayerStudy> {
    let cohort = federation::prepare_cohort(config)?;
    layerwise_on_cohort(config, &cohort)
}

pub fn layerwise_over_seeds(base: &FederationConfig, seeds: &[u64]) -> Result<Vec<LayerStudy>> {
    seeds
        .iter()
        .map(|&seed| {
            layerwise_entropy_study(&FederationConfig {
                seed,
                ..base.clone()
            })
        })
        .collect()
}

/// Per-layer means across studies.
pub fn mean_per_layer(studies: &[LayerStudy]) -> Vec<f64> {
    let Some(first) = studies.first() else {
        return Vec::new();
    };
    (0..first.per_layer.len())
        .map(|k| studies.iter().map(|s| s.per_layer[k]).sum::<f64>() / studies.len() as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub q: f64,
    pub epsilon: f64,
    /// Final-quarter mean Pearson per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepGrid {
    pub q: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Row-major over `q`, then `epsilon`.
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, qi: usize, ei: usize) -> &SweepCell {
        &self.cells[qi * self.epsilon.len() + ei]
    }

    /// Best minus worst cell mean.
    pub fn spread(&self) -> f64 {
        let means = self.cells.iter().map(|c| c.mean);
        let hi = means.clone().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

/// Runs SpectralFuse for every (Q, ε) cell and seed. Data, partition and
/// standalone baselines are built once per seed and shared by all cells.
pub fn sweep(base: &FederationConfig, qs: &[f64], epsilons: &[f64], seeds: &[u64]) -> Result<SweepGrid> {
    if qs.is_empty() || epsilons.is_empty() || seeds.is_empty() {
        return Err(Error::InsufficientData("sweep needs non-empty Q, ε and seed lists".into()));
    }
    if base.strategy != Strategy::SpectralFuse {
        log::info!("sweep runs spectral_fuse; ignoring strategy {}", base.strategy.name());
    }
    let mut scores = vec![Vec::with_capacity(seeds.len()); qs.len() * epsilons.len()];
    for &seed in seeds {
        let seeded = FederationConfig {
            seed,
            strategy: Strategy::SpectralFuse,
            ..base.clone()
        };
        let cohort = federation::prepare_cohort(&seeded)?;
        for (qi, &q) in qs.iter().enumerate() {
            for (ei, &epsilon) in epsilons.iter().enumerate() {
                let mut cfg = seeded.clone();
                cfg.kalman.q = q;
                cfg.kalman.epsilon = epsilon;
                let log = federation::run_federation(&cfg, &cohort)?;
                scores[qi * epsilons.len() + ei].push(log.final_quarter_pearson());
            }
        }
    }
    let mut cells = Vec::with_capacity(scores.len());
    for (idx, per_seed) in scores.into_iter().enumerate() {
        cells.push(SweepCell {
            q: qs[idx / epsilons.len()],
            epsilon: epsilons[idx % epsilons.len()],
            mean: mean(&per_seed),
            std: std_dev(&per_seed),
            per_seed,
        });
    }
    Ok(SweepGrid {
        q: qs.to_vec(),
        epsilon: epsilons.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    })
}
