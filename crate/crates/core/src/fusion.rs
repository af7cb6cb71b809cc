//! Rank-adaptive Kalman filter fusing two contribution signals.
//!
//! Each client carries a scalar latent contribution with a random-walk
//! process model and a two-channel measurement `y = [s, γ]ᵀ = H x + v`,
//! `H = [1, 1]ᵀ`. The measurement covariance is shared by all clients and
//! re-derived every round from how well each signal's ranking agrees with the
//! filter's own predicted ranking: `R = diag(1 - ρ_s + ε, 1 - ρ_γ + ε)`.

use serde::{Deserialize, Serialize};

use crate::linalg::spearman;
use crate::{Error, Result};

pub const DEFAULT_Q: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_P0: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanParams {
    /// Process noise variance.
    pub q: f64,
    /// Measurement variance floor.
    pub epsilon: f64,
    /// Initial state variance.
    pub p0: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            q: DEFAULT_Q,
            epsilon: DEFAULT_EPSILON,
            p0: DEFAULT_P0,
        }
    }
}

impl KalmanParams {
    pub fn validate(&self) -> Result<()> {
        for (key, v, allow_zero) in [
            ("kalman.q", self.q, true),
            ("kalman.epsilon", self.epsilon, false),
            ("kalman.p0", self.p0, false),
        ] {
            let ok = v.is_finite() && if allow_zero { v >= 0.0 } else { v > 0.0 };
            if !ok {
                return Err(Error::invalid(key, format!("{v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Per-client prior for the measurement update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankAdaptation {
    pub rho_s: f64,
    pub rho_gamma: f64,
    /// Diagonal of the shared measurement covariance.
    pub r: [f64; 2],
}

/// Spearman agreement of each signal with the predicted state, mapped to
/// measurement variances.
pub fn rank_adapt(predicted: &[f64], s: &[f64], gamma: &[f64], epsilon: f64) -> Result<RankAdaptation> {
    if predicted.len() != s.len() || predicted.len() != gamma.len() {
        return Err(Error::Dimension(format!(
            "prediction/entropy/alignment lengths {}/{}/{}",
            predicted.len(),
            s.len(),
            gamma.len()
        )));
    }
    let rho_s = spearman(predicted, s)?;
    let rho_gamma = spearman(predicted, gamma)?;
    Ok(RankAdaptation {
        rho_s,
        rho_gamma,
        r: [(1.0 - rho_s) + epsilon, (1.0 - rho_gamma) + epsilon],
    })
}

/// Kalman gain `K = P Hᵀ (H P Hᵀ + R)⁻¹` for the scalar state.
pub fn kalman_gain(p: f64, r: [f64; 2]) -> Result<[f64; 2]> {
    // innovation covariance S = P 11ᵀ + diag(R)
    let s = [[p + r[0], p], [p, p + r[1]]];
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    if !(det > 0.0 && det.is_finite()) {
        return Err(Error::ContractViolation(format!(
            "singular innovation covariance (det {det:e}, R = {r:?})"
        )));
    }
    let inv = [
        [s[1][1] / det, -s[0][1] / det],
        [-s[1][0] / det, s[0][0] / det],
    ];
    // Hᵀ = [1, 1], so P Hᵀ S⁻¹ sums the columns of S⁻¹
    Ok([p * (inv[0][0] + inv[1][0]), p * (inv[0][1] + inv[1][1])])
}

/// Measurement update for one client; returns `(x', P')`.
pub fn update(x: f64, p: f64, y: [f64; 2], r: [f64; 2]) -> Result<(f64, f64)> {
    if !(p > 0.0) {
        return Err(Error::ContractViolation(format!("state variance {p} must be positive")));
    }
    if !(r[0] > 0.0 && r[1] > 0.0) {
        return Err(Error::ContractViolation(format!("measurement variances {r:?} must be positive")));
    }
    let k = kalman_gain(p, r)?;
    let x_next = x + k[0] * (y[0] - x) + k[1] * (y[1] - x);
    let p_next = (1.0 - (k[0] + k[1])) * p;
    Ok((x_next, p_next))
}

/// Turns two normalized signals into one fused per-client estimate.
pub trait Fuser: Send {
    fn fuse(&mut self, s: &[f64], gamma: &[f64]) -> Result<Vec<f64>>;
}

/// Diagnostic snapshot of the last filter step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub adaptation: RankAdaptation,
    pub gains: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAdaptiveKalman {
    params: KalmanParams,
    x: Vec<f64>,
    p: Vec<f64>,
    last: Option<StepReport>,
}

impl RankAdaptiveKalman {
    /// Uniform prior `x = 1/n`, `P = p0`.
    pub fn new(n_clients: usize, params: KalmanParams) -> Result<Self> {
        params.validate()?;
        if n_clients < 2 {
            return Err(Error::InsufficientData(format!(
                "rank adaptation needs at least 2 clients, got {n_clients}"
            )));
        }
        Ok(Self {
            params,
            x: vec![1.0 / n_clients as f64; n_clients],
            p: vec![params.p0; n_clients],
            last: None,
        })
    }

    pub fn from_state(x: Vec<f64>, p: Vec<f64>, params: KalmanParams) -> Result<Self> {
        params.validate()?;
        if x.len() != p.len() || x.len() < 2 {
            return Err(Error::Dimension(format!("state lengths {} and {}", x.len(), p.len())));
        }
        if p.iter().any(|v| !(*v > 0.0)) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::ContractViolation("state must be finite with P > 0".into()));
        }
        Ok(Self {
            params,
            x,
            p,
            last: None,
        })
    }

    pub fn params(&self) -> &KalmanParams {
        &self.params
    }

    pub fn estimates(&self) -> &[f64] {
        &self.x
    }

    pub fn variances(&self) -> &[f64] {
        &self.p
    }

    pub fn last_step(&self) -> Option<&StepReport> {
        self.last.as_ref()
    }

    /// Random-walk prediction: state carried over, variance inflated by Q.
    pub fn predict(&self) -> Prediction {
        Prediction {
            x: self.x.clone(),
            p: self.p.iter().map(|p| p + self.params.q).collect(),
        }
    }

    /// Predict, rank-adapt R, then update every client with the shared R.
    pub fn filter_step(&mut self, s: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.x.len() {
            return Err(Error::Dimension(format!(
                "{} observations for {} clients",
                s.len(),
                self.x.len()
            )));
        }
        let prior = self.predict();
        let adaptation = rank_adapt(&prior.x, s, gamma, self.params.epsilon)?;
        let mut gains = Vec::with_capacity(s.len());
        for i in 0..s.len() {
            gains.push(kalman_gain(prior.p[i], adaptation.r)?);
            let (x, p) = update(prior.x[i], prior.p[i], [s[i], gamma[i]], adaptation.r)?;
            self.x[i] = x;
            self.p[i] = p;
        }
        self.last = Some(StepReport { adaptation, gains });
        Ok(self.x.clone())
    }
}

impl Fuser for RankAdaptiveKalman {
    fn fuse(&mut self, s: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
        self.filter_step(s, gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Information-form update, algebraically independent of the gain route.
    fn info_update(x: f64, p: f64, y: [f64; 2], r: [f64; 2]) -> (f64, f64) {
        let p_next = 1.0 / (1.0 / p + 1.0 / r[0] + 1.0 / r[1]);
        (p_next * (x / p + y[0] / r[0] + y[1] / r[1]), p_next)
    }

    fn params(q: f64) -> KalmanParams {
        KalmanParams {
            q,
            epsilon: 1e-3,
            p0: 0.1,
        }
    }

    #[test]
    fn predict_inflates_variance() {
        let f = RankAdaptiveKalman::from_state(vec![0.2, 0.8], vec![0.01, 0.01], params(1e-4)).unwrap();
        let pr = f.predict();
        assert_eq!(pr.x, vec![0.2, 0.8]);
        assert!((pr.p[0] - 0.0101).abs() < 1e-15);
        let f0 = RankAdaptiveKalman::from_state(vec![0.2, 0.8], vec![0.01, 0.01], params(0.0)).unwrap();
        assert_eq!(f0.predict().p, vec![0.01, 0.01]);
        let twice = RankAdaptiveKalman::from_state(f.predict().x, f.predict().p, params(1e-4))
            .unwrap()
            .predict();
        assert!((twice.p[0] - (0.01 + 2e-4)).abs() < 1e-15);
    }

    #[test]
    fn rank_adapt_extremes() {
        let pred = [0.1, 0.2, 0.3, 0.4];
        let ra = rank_adapt(&pred, &[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0], 1e-3).unwrap();
        assert!((ra.r[0] - 1e-3).abs() < 1e-12 && (ra.r[1] - 2.001).abs() < 1e-12, "{:?}", ra.r);
        let uniform = [0.25; 4];
        let ra = rank_adapt(&uniform, &[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0], 1e-3).unwrap();
        assert!(ra.r.iter().all(|r| (r - 1.001).abs() < 1e-12), "{:?}", ra.r);
        assert!(rank_adapt(&pred, &[1.0], &[1.0], 1e-3).is_err());
    }

    #[test]
    fn update_examples() {
        let (x, _) = update(0.3, 0.05, [0.3, 0.3], [0.2, 0.7]).unwrap();
        assert!((x - 0.3).abs() < 1e-15);

        let (x, p) = update(0.2, 0.01, [0.3, 0.1], [0.5, 0.5]).unwrap();
        assert!((x - 0.2).abs() < 1e-15);
        let (ox, op) = info_update(0.2, 0.01, [0.3, 0.1], [0.5, 0.5]);
        assert!((x - ox).abs() < 1e-15 && (p - op).abs() < 1e-15);

        let (x, p) = update(0.2, 0.01, [0.9, -0.4], [1e9, 1e9]).unwrap();
        assert!((x - 0.2).abs() < 1e-6);
        assert!((p - 0.01).abs() < 1e-9);

        assert!(update(0.2, 0.0, [0.1, 0.1], [1.0, 1.0]).is_err());
        assert!(update(0.2, 0.1, [0.1, 0.1], [0.0, 1.0]).is_err());
    }

    #[test]
    fn gain_matches_information_form() {
        for (p, r) in [(0.1, [0.3, 1.2]), (5.0, [1e-3, 2.0]), (1e-6, [1.0, 1.0])] {
            let k = kalman_gain(p, r).unwrap();
            let p_post = 1.0 / (1.0 / p + 1.0 / r[0] + 1.0 / r[1]);
            assert!((k[0] - p_post / r[0]).abs() < 1e-12);
            assert!((k[1] - p_post / r[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn consistent_measurements_keep_state_and_shrink_variance() {
        let mut f = RankAdaptiveKalman::new(4, params(1e-4)).unwrap();
        let before = f.variances().to_vec();
        let s = vec![0.25; 4];
        let x = f.filter_step(&s, &s).unwrap();
        assert_eq!(x, vec![0.25; 4]);
        for (a, b) in f.variances().iter().zip(&before) {
            assert!(a < b);
        }
    }

    #[test]
    fn large_q_forgets_the_prior() {
        let mut f = RankAdaptiveKalman::new(3, params(1e9)).unwrap();
        let y = [0.5, 0.3, 0.2];
        let x = f.filter_step(&y, &y).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn variance_is_positive_and_monotone() {
        let mut f = RankAdaptiveKalman::new(5, params(1e-4)).unwrap();
        for t in 0..30 {
            let s: Vec<f64> = (0..5).map(|i| ((i * 7 + t * 3) % 11) as f64 + 1.0).collect();
            let g: Vec<f64> = (0..5).map(|i| ((i * 5 + t) % 7) as f64 + 1.0).collect();
            let prior = f.predict();
            for (pp, p) in prior.p.iter().zip(f.variances()) {
                assert!(pp >= p);
            }
            f.filter_step(&s, &g).unwrap();
            for (post, pp) in f.variances().iter().zip(&prior.p) {
                assert!(*post > 0.0 && post <= pp);
            }
        }
    }

    #[test]
    fn client_order_does_not_matter() {
        let s = [0.1, 0.4, 0.2, 0.3];
        let g = [0.3, 0.3, 0.1, 0.3];
        let mut a = RankAdaptiveKalman::new(4, params(1e-4)).unwrap();
        let xa = a.filter_step(&s, &g).unwrap();
        let perm = [2, 0, 3, 1];
        let sp: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
        let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
        let mut b = RankAdaptiveKalman::new(4, params(1e-4)).unwrap();
        let xb = b.filter_step(&sp, &gp).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(xb[j], xa[i]);
        }
    }
}
