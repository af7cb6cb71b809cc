//! Data-free per-round client scores.
//!
//! All scores read a client's weight delta only: the spectral entropy of the
//! final layer's class-space Gram matrix, class-wise cosine alignment with the
//! cohort update (CSSV), and the cosine of the whole flattened update with the
//! cohort mean (CGSV).

use serde::{Deserialize, Serialize};

use crate::linalg::{cosine, gram_smaller_side, sym_eigenvalues, DenseMatrix};
use crate::nn::LayerUpdate;
use crate::{Error, Result};

pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-6;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Eigenvalues of `A / tr(A)`: a probability vector.
    #[default]
    TraceNormalized,
    /// Eigenvalues of `A / ||A||_F`.
    FrobeniusNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyScore {
    /// Natural-log entropy, `0` for degenerate updates.
    pub value: f64,
    /// The update was numerically zero.
    pub degenerate: bool,
}

/// Von Neumann entropy of `M Mᵀ` after normalization.
pub fn spectral_entropy(m: &DenseMatrix, mode: EntropyMode) -> Result<EntropyScore> {
    if m.frobenius_norm() <= DEGENERATE_NORM {
        return Ok(EntropyScore {
            value: 0.0,
            degenerate: true,
        });
    }
    // MMᵀ and MᵀM share nonzero eigenvalues, trace and Frobenius norm
    let gram = gram_smaller_side(m)?;
    let scale = match mode {
        EntropyMode::TraceNormalized => gram.trace(),
        EntropyMode::FrobeniusNormalized => gram.frobenius_norm(),
    };
    if !(scale > 0.0 && scale.is_finite()) {
        return Ok(EntropyScore {
            value: 0.0,
            degenerate: true,
        });
    }
    let spectrum = sym_eigenvalues(&gram.scaled(1.0 / scale))?.clamp_psd()?;
    let value = spectrum
        .eigenvalues()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0);
    Ok(EntropyScore {
        value,
        degenerate: false,
    })
}

/// Class-specific alignment: mean over classes (rows) of the cosine between
/// a client's class vector and the aggregate's.
pub fn cssv(client: &DenseMatrix, aggregate: &DenseMatrix) -> Result<f64> {
    client.check_same_shape(aggregate)?;
    let c = client.rows();
    let mut total = 0.0;
    for j in 0..c {
        total += cosine(client.row(j), aggregate.row(j))?;
    }
    Ok(total / c as f64)
}

/// Cosine between a client's full flattened update and the cohort average.
pub fn cgsv_score(update: &LayerUpdate, average: &LayerUpdate) -> Result<f64> {
    if !update.same_shape(average) {
        return Err(Error::Dimension("updates with different layer shapes".into()));
    }
    cosine(&update.flatten(), &average.flatten())
}

/// Entry-wise mean of several matrices of equal shape.
pub fn mean_matrix<'a>(mats: impl IntoIterator<Item = &'a DenseMatrix>) -> Result<DenseMatrix> {
    let mut iter = mats.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InsufficientData("mean of no matrices".into()))?;
    let mut acc = first.clone();
    let mut n = 1usize;
    for m in iter {
        acc.check_same_shape(m)?;
        for (a, b) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *a += b;
        }
        n += 1;
    }
    Ok(acc.scaled(1.0 / n as f64))
}

/// Entry-wise mean of several updates, summed in order.
pub fn mean_update(updates: &[LayerUpdate]) -> Result<LayerUpdate> {
    let first = updates
        .first()
        .ok_or_else(|| Error::InsufficientData("mean of no updates".into()))?;
    if updates.iter().any(|u| !u.same_shape(first)) {
        return Err(Error::Dimension("updates with different layer shapes".into()));
    }
    let weights = (0..first.num_layers())
        .map(|k| mean_matrix(updates.iter().map(|u| &u.weights[k])))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / updates.len() as f64;
    let biases = (0..first.num_layers())
        .map(|k| {
            let mut acc = vec![0.0; first.biases[k].len()];
            for u in updates {
                for (a, b) in acc.iter_mut().zip(&u.biases[k]) {
                    *a += b;
                }
            }
            acc.iter_mut().for_each(|v| *v *= inv);
            acc
        })
        .collect();
    Ok(LayerUpdate { weights, biases })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Entropy,
    Cssv,
    Cgsv,
}

/// Exponentially smoothed per-client signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionState {
    momentum: f64,
    entropy: Vec<Option<f64>>,
    cssv: Vec<Option<f64>>,
    cgsv: Vec<Option<f64>>,
}

impl ContributionState {
    pub fn new(n_clients: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", format!("{momentum} not in [0, 1)")));
        }
        Ok(Self {
            momentum,
            entropy: vec![None; n_clients],
            cssv: vec![None; n_clients],
            cgsv: vec![None; n_clients],
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    fn slot(&mut self, which: Signal) -> &mut Vec<Option<f64>> {
        match which {
            Signal::Entropy => &mut self.entropy,
            Signal::Cssv => &mut self.cssv,
            Signal::Cgsv => &mut self.cgsv,
        }
    }

    pub fn smoothed(&self, which: Signal, client: usize) -> Option<f64> {
        match which {
            Signal::Entropy => self.entropy[client],
            Signal::Cssv => self.cssv[client],
            Signal::Cgsv => self.cgsv[client],
        }
    }

    /// Feeds one raw observation. The first observation passes through;
    /// later ones blend as `mu * prev + (1 - mu) * raw`. Non-finite input is
    /// dropped and the previous value (or 0) is returned.
    pub fn ema_update(&mut self, client: usize, raw: f64, which: Signal) -> f64 {
        let mu = self.momentum;
        let slot = &mut self.slot(which)[client];
        if !raw.is_finite() {
            log::warn!("ignoring non-finite {which:?} score {raw} for client {client}");
            return slot.unwrap_or(0.0);
        }
        let next = match *slot {
            None => raw,
            Some(prev) => mu * prev + (1.0 - mu) * raw,
        };
        *slot = Some(next);
        next
    }

    /// Smooths a whole round of raw scores, returning the smoothed vector.
    pub fn observe(&mut self, raw: &[f64], which: Signal) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(i, &r)| self.ema_update(i, r, which))
            .collect()
    }
}

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    /// Wraps values already known to lie on the simplex.
    pub fn from_simplex(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if values.is_empty() || values.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::ContractViolation(format!(
                "weights {values:?} are not on the simplex"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Clamps each entry to at least `floor` and rescales to sum to one. If no
/// entry exceeds the floor the result is uniform.
pub fn normalize_scores(values: &[f64], floor: f64) -> ScoreVector {
    let n = values.len();
    if n == 0 {
        return ScoreVector(Vec::new());
    }
    if values.iter().all(|v| !(*v > floor)) {
        return ScoreVector::uniform(n);
    }
    let clamped: Vec<f64> = values
        .iter()
        .map(|&v| if v > floor { v } else { floor })
        .collect();
    let sum: f64 = clamped.iter().sum();
    ScoreVector(clamped.into_iter().map(|v| v / sum).collect())
}
