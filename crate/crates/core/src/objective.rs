//! Turn-weighted multi-turn preference loss.
//!
//! For a pair with per-turn log-ratios `r_t = log πθ(a_t|s_t) − log πref(a_t|s_t)`,
//! each side is scored as `Σ β·w_t·r_t` with
//!
//! * `φ(t,T) = (1 − γ^(T−t)) / (1 − γ^T)`, the discount-derived turn weight,
//! * `ψ(T) = Σ_t φ(t,T)`, the turn-length normaliser,
//! * `w_t = φ/ψ`, `φ`, or `1` depending on the ablation flags,
//!
//! and the loss is `softplus(−(s_c − s_r − ρ))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("trajectory has no turns")]
    EmptyTrajectory,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("non-finite log-ratio at {side}[{index}]")]
    NonFinite { side: &'static str, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "S: Scalar")]
pub struct LossConfig<S> {
    pub beta: S,
    pub gamma: S,
    pub rho: S,
    pub use_phi: bool,
    pub use_psi: bool,
}

impl<S: Scalar> Default for LossConfig<S> {
    fn default() -> Self {
        Self {
            beta: S::of(0.5),
            gamma: S::of(0.5),
            rho: S::of(2.0),
            use_phi: true,
            use_psi: true,
        }
    }
}

impl<S: Scalar> LossConfig<S> {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.beta > S::zero() && self.beta.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        check_gamma(self.gamma)?;
        if !(self.rho >= S::zero() && self.rho.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!("rho must be non-negative, got {}", self.rho)));
        }
        if self.use_psi && !self.use_phi {
            return Err(ObjectiveError::InvalidConfig("use_psi requires use_phi".into()));
        }
        Ok(())
    }

    /// Named ablation variants: `full`, `no-rho`, `no-psi`, `no-psi-rho`, `no-phi-psi-rho`.
    pub fn variant(name: &str) -> Option<Self> {
        let mut cfg = Self::default();
        match name {
            "full" => {}
            "no-rho" => cfg.rho = S::zero(),
            "no-psi" => cfg.use_psi = false,
            "no-psi-rho" => {
                cfg.use_psi = false;
                cfg.rho = S::zero();
            }
            "no-phi-psi-rho" => {
                cfg.use_phi = false;
                cfg.use_psi = false;
                cfg.rho = S::zero();
            }
            _ => return None,
        }
        Some(cfg)
    }

    pub fn cast<T: Scalar>(&self) -> LossConfig<T> {
        LossConfig {
            beta: T::of(self.beta.to_f64_lossy()),
            gamma: T::of(self.gamma.to_f64_lossy()),
            rho: T::of(self.rho.to_f64_lossy()),
            use_phi: self.use_phi,
            use_psi: self.use_psi,
        }
    }
}

pub const VARIANTS: [&str; 5] = ["no-phi-psi-rho", "no-psi-rho", "no-rho", "no-psi", "full"];

fn check_gamma<S: Scalar>(gamma: S) -> Result<(), ObjectiveError> {
    if gamma >= S::zero() && gamma <= S::one() {
        Ok(())
    } else {
        Err(ObjectiveError::Domain(format!("gamma must lie in [0, 1], got {gamma}")))
    }
}

/// `φ(t, T)`; the γ = 1 case is the limit `(T − t)/T`, γ = 0 gives 1.
pub fn phi<S: Scalar>(t: usize, big_t: usize, gamma: S) -> Result<S, ObjectiveError> {
    check_gamma(gamma)?;
    if t >= big_t {
        return Err(ObjectiveError::Domain(format!("turn index {t} not below length {big_t}")));
    }
    if gamma == S::one() {
        return Ok(S::of_usize(big_t - t) / S::of_usize(big_t));
    }
    if gamma == S::zero() {
        return Ok(S::one());
    }
    // expm1 keeps precision when γ is close to 1.
    let ln_g = gamma.ln();
    Ok((S::of_usize(big_t - t) * ln_g).exp_m1() / (S::of_usize(big_t) * ln_g).exp_m1())
}

/// `ψ(T) = Σ_{t<T} φ(t, T)`.
pub fn psi<S: Scalar>(big_t: usize, gamma: S) -> Result<S, ObjectiveError> {
    if big_t == 0 {
        return Err(ObjectiveError::Domain("trajectory length must be at least 1".into()));
    }
    (0..big_t).map(|t| phi(t, big_t, gamma)).sum()
}

/// Per-turn coefficients `β·w_t` multiplying the log-ratios.
pub fn turn_weights<S: Scalar>(big_t: usize, cfg: &LossConfig<S>) -> Result<Vec<S>, ObjectiveError> {
    if big_t == 0 {
        return Err(ObjectiveError::EmptyTrajectory);
    }
    if !cfg.use_phi {
        return Ok(vec![cfg.beta; big_t]);
    }
    let phis = (0..big_t)
        .map(|t| phi(t, big_t, cfg.gamma))
        .collect::<Result<Vec<S>, _>>()?;
    let norm = if cfg.use_psi {
        phis.iter().copied().sum()
    } else {
        S::one()
    };
    Ok(phis.into_iter().map(|p| cfg.beta * p / norm).collect())
}

pub fn trajectory_score<S: Scalar>(ratios: &[S], cfg: &LossConfig<S>) -> Result<S, ObjectiveError> {
    let w = turn_weights(ratios.len(), cfg)?;
    Ok(w.iter().zip(ratios).map(|(&w, &r)| w * r).sum())
}

/// Per-turn log-ratios of one pair, assistant turns only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TurnLogRatios<S> {
    pub chosen: Vec<S>,
    pub rejected: Vec<S>,
}

impl<S: Scalar> TurnLogRatios<S> {
    pub fn new(chosen: Vec<S>, rejected: Vec<S>) -> Self {
        Self { chosen, rejected }
    }

    fn check(&self) -> Result<(), ObjectiveError> {
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(ObjectiveError::EmptyTrajectory);
        }
        for (side, values) in [("chosen", &self.chosen), ("rejected", &self.rejected)] {
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(ObjectiveError::NonFinite { side, index });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct PairLoss<S> {
    pub loss: S,
    /// Reward gap `g = s_c − s_r − ρ`.
    pub margin: S,
    pub chosen_score: S,
    pub rejected_score: S,
    pub grad_chosen: Vec<S>,
    pub grad_rejected: Vec<S>,
}

/// `log(1 + e^x)` without overflow.
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn diatool_loss<S: Scalar>(
    ratios: &TurnLogRatios<S>,
    cfg: &LossConfig<S>,
) -> Result<PairLoss<S>, ObjectiveError> {
    ratios.check()?;
    let wc = turn_weights(ratios.chosen.len(), cfg)?;
    let wr = turn_weights(ratios.rejected.len(), cfg)?;
    let sc: S = wc.iter().zip(&ratios.chosen).map(|(&w, &r)| w * r).sum();
    let sr: S = wr.iter().zip(&ratios.rejected).map(|(&w, &r)| w * r).sum();
    let g = sc - sr - cfg.rho;
    let s = sigmoid(-g);
    Ok(PairLoss {
        loss: softplus(-g),
        margin: g,
        chosen_score: sc,
        rejected_score: sr,
        grad_chosen: wc.into_iter().map(|w| -s * w).collect(),
        grad_rejected: wr.into_iter().map(|w| s * w).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct BatchLoss<S> {
    pub mean_loss: S,
    /// Per-pair results with gradients already scaled by `1/batch`.
    pub pairs: Vec<PairLoss<S>>,
}

/// Mean loss over a batch. Pairs are evaluated in parallel and reduced in order.
pub fn batch_loss<S: Scalar>(
    batch: &[TurnLogRatios<S>],
    cfg: &LossConfig<S>,
) -> Result<BatchLoss<S>, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let n = S::of_usize(batch.len());
    let mut pairs = batch
        .par_iter()
        .map(|r| diatool_loss(r, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = S::zero();
    for p in &mut pairs {
        total = total + p.loss;
        p.grad_chosen.iter_mut().for_each(|g| *g = *g / n);
        p.grad_rejected.iter_mut().for_each(|g| *g = *g / n);
    }
    Ok(BatchLoss {
        mean_loss: total / n,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// Log-ratio exchange format
// ---------------------------------------------------------------------------

/// One JSONL line: `{"pair_id": ..., "chosen": [...], "rejected": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRatioLine {
    pub pair_id: String,
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLine {
    pub pair_id: String,
    pub loss: f64,
    pub margin: f64,
    pub chosen_score: f64,
    pub rejected_score: f64,
}

#[derive(Debug, Error)]
pub enum ExchangeError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Objective {
        line: usize,
        #[source]
        source: ObjectiveError,
    },
}

pub fn read_log_ratios(text: &str) -> Result<Vec<LogRatioLine>, ExchangeError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| ExchangeError::Parse { line: i + 1, source }))
        .collect()
}

pub fn write_log_ratios(lines: &[LogRatioLine]) -> String {
    lines
        .iter()
        .map(|l| serde_json::to_string(l).expect("plain data serializes") + "\n")
        .collect()
}

/// Scores externally computed log-ratios with the loss in precision `S`.
pub fn score_log_ratios<S: Scalar>(
    lines: &[LogRatioLine],
    cfg: &LossConfig<S>,
) -> Result<Vec<ScoredLine>, ExchangeError> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let ratios = TurnLogRatios::new(
                l.chosen.iter().map(|&v| S::of(v)).collect(),
                l.rejected.iter().map(|&v| S::of(v)).collect(),
            );
            let out = diatool_loss(&ratios, cfg)
                .map_err(|source| ExchangeError::Objective { line: i + 1, source })?;
            Ok(ScoredLine {
                pair_id: l.pair_id.clone(),
                loss: out.loss.to_f64_lossy(),
                margin: out.margin.to_f64_lossy(),
                chosen_score: out.chosen_score.to_f64_lossy(),
                rejected_score: out.rejected_score.to_f64_lossy(),
            })
        })
        .collect()
}
