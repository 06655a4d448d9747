//! SFT → preference-optimization pipeline on the tabular policy.
//!
//! Pairs are encoded once into `(feature key, action)` sequences with the
//! frozen reference log-probabilities attached, so each step only touches
//! the trainable table.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Difficulty, PairRecord};
use crate::dialogue::{ActionKind, QueryType};
use crate::objective::{batch_loss, diatool_loss, LossConfig, ObjectiveError, TurnLogRatios};
use crate::policy::{trajectory_turns, FeatureContext, PolicyError, StateFeatures, ToyPolicy, N_ACTIONS, N_KEYS};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("need at least 2 pairs to split, got {0}")]
    TooFewPairs(usize),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("pair {pair_id}: {source}")]
    Encode { pair_id: String, source: PolicyError },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "S: Scalar")]
pub struct TrainConfig<S> {
    pub loss: LossConfig<S>,
    pub lr: S,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl<S: Scalar> Default for TrainConfig<S> {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            lr: S::of(0.1),
            epochs: 10,
            batch_size: 256,
            val_fraction: 0.05,
            seed: 42,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl<S: Scalar> TrainConfig<S> {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        if !(self.lr >= S::zero() && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

/// Stratified by `(query_type, difficulty)`. The validation size is
/// `round(n · val_fraction)` clamped to `[1, n − 1]`, spread over strata by
/// largest remainder. Both halves keep input order.
pub fn split_train_val(
    pairs: &[PairRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<PairRecord>, Vec<PairRecord>), TrainError> {
    let n = pairs.len();
    if n < 2 {
        return Err(TrainError::TooFewPairs(n));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);

    let mut strata: BTreeMap<(QueryType, Difficulty), Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        strata.entry((p.query_type, p.difficulty)).or_default().push(i);
    }
    let mut quota: Vec<(usize, f64)> = strata
        .values()
        .map(|idx| {
            let exact = idx.len() as f64 * n_val as f64 / n as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut left = n_val - quota.iter().map(|q| q.0).sum::<usize>();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| quota[b].1.total_cmp(&quota[a].1).then(a.cmp(&b)));
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        let size = strata.values().nth(s).map_or(0, Vec::len);
        if quota[s].0 < size {
            quota[s].0 += 1;
            left -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_idx = BTreeSet::new();
    for (idx, (k, _)) in strata.values().zip(&quota) {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        val_idx.extend(idx.into_iter().take(*k));
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (i, p) in pairs.iter().enumerate() {
        if val_idx.contains(&i) {
            val.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSide<S> {
    pub turns: Vec<(StateFeatures, ActionKind)>,
    pub ref_logp: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair<S> {
    pub pair_id: String,
    pub chosen: EncodedSide<S>,
    pub rejected: EncodedSide<S>,
}

impl<S: Scalar> EncodedSide<S> {
    fn log_ratios(&self, policy: &ToyPolicy<S>) -> Vec<S> {
        self.turns
            .iter()
            .zip(&self.ref_logp)
            .map(|(&(f, a), &r)| policy.action_logprob(f, a).logp - r)
            .collect()
    }

    /// Adds `Σ_t coef_t · ∂r_t/∂logits` into `grad`.
    fn backprop(&self, policy: &ToyPolicy<S>, coef: &[S], grad: &mut [[S; N_ACTIONS]]) {
        for (&(f, a), &c) in self.turns.iter().zip(coef) {
            let lp = policy.action_logprob(f, a);
            let row = &mut grad[f.index()];
            for k in 0..N_ACTIONS {
                row[k] = row[k] + c * lp.grad[k];
            }
        }
    }
}

impl<S: Scalar> EncodedPair<S> {
    pub fn log_ratios(&self, policy: &ToyPolicy<S>) -> TurnLogRatios<S> {
        TurnLogRatios::new(self.chosen.log_ratios(policy), self.rejected.log_ratios(policy))
    }

    /// Feature keys either side visits.
    pub fn touched_keys(&self) -> BTreeSet<StateFeatures> {
        self.chosen
            .turns
            .iter()
            .chain(&self.rejected.turns)
            .map(|t| t.0)
            .collect()
    }
}

pub fn encode_pair<S: Scalar>(pair: &PairRecord, reference: &ToyPolicy<S>) -> Result<EncodedPair<S>, TrainError> {
    let ctx = FeatureContext::of_pair(&pair.chosen, &pair.rejected);
    let side = |traj| -> Result<EncodedSide<S>, TrainError> {
        let turns = trajectory_turns(traj, &ctx).map_err(|source| TrainError::Encode {
            pair_id: pair.pair_id.clone(),
            source,
        })?;
        let ref_logp = turns.iter().map(|&(f, a)| reference.action_logprob(f, a).logp).collect();
        Ok(EncodedSide { turns, ref_logp })
    };
    Ok(EncodedPair {
        pair_id: pair.pair_id.clone(),
        chosen: side(&pair.chosen)?,
        rejected: side(&pair.rejected)?,
    })
}

pub fn encode_pairs<S: Scalar>(
    pairs: &[PairRecord],
    reference: &ToyPolicy<S>,
) -> Result<Vec<EncodedPair<S>>, TrainError> {
    pairs.par_iter().map(|p| encode_pair(p, reference)).collect()
}

// ---------------------------------------------------------------------------
// Loss and gradient over the table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval<S> {
    pub mean_loss: S,
    pub margin_mean: S,
    pub chosen_score_mean: S,
    pub rejected_score_mean: S,
    pub grad: Vec<[S; N_ACTIONS]>,
}

/// Mean loss over `batch` and its gradient with respect to every logit.
pub fn batch_gradient<S: Scalar>(
    policy: &ToyPolicy<S>,
    batch: &[&EncodedPair<S>],
    cfg: &LossConfig<S>,
) -> Result<BatchEval<S>, TrainError> {
    let ratios: Vec<TurnLogRatios<S>> = batch.par_iter().map(|p| p.log_ratios(policy)).collect();
    let bl = batch_loss(&ratios, cfg)?;
    let n = S::of_usize(batch.len());
    let mut grad = vec![[S::zero(); N_ACTIONS]; N_KEYS];
    let (mut margin, mut sc, mut sr) = (S::zero(), S::zero(), S::zero());
    for (pair, pl) in batch.iter().zip(&bl.pairs) {
        pair.chosen.backprop(policy, &pl.grad_chosen, &mut grad);
        pair.rejected.backprop(policy, &pl.grad_rejected, &mut grad);
        margin = margin + pl.margin;
        sc = sc + pl.chosen_score;
        sr = sr + pl.rejected_score;
    }
    Ok(BatchEval {
        mean_loss: bl.mean_loss,
        margin_mean: margin / n,
        chosen_score_mean: sc / n,
        rejected_score_mean: sr / n,
        grad,
    })
}

/// Mean loss only, sequential.
pub fn mean_loss<S: Scalar>(
    policy: &ToyPolicy<S>,
    pairs: &[EncodedPair<S>],
    cfg: &LossConfig<S>,
) -> Result<S, TrainError> {
    if pairs.is_empty() {
        return Err(ObjectiveError::EmptyBatch.into());
    }
    let mut total = S::zero();
    for p in pairs {
        total = total + diatool_loss(&p.log_ratios(policy), cfg)?.loss;
    }
    Ok(total / S::of_usize(pairs.len()))
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub margin_mean: f64,
    pub chosen_score_mean: f64,
    pub rejected_score_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the full training set after the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training-set loss before the first step.
    pub initial_loss: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn steps_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.steps {
            w.serialize(s).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    pub fn epochs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes") + "\n"
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct AdamState<S> {
    m: Vec<[S; N_ACTIONS]>,
    v: Vec<[S; N_ACTIONS]>,
    t: i32,
}

fn apply_update<S: Scalar>(
    policy: &mut ToyPolicy<S>,
    grad: &[[S; N_ACTIONS]],
    lr: S,
    opt: Optimizer,
    adam: &mut AdamState<S>,
) {
    match opt {
        Optimizer::Sgd => {
            for (row, g) in policy.logits.iter_mut().zip(grad) {
                for k in 0..N_ACTIONS {
                    row[k] = row[k] - lr * g[k];
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(eps));
            adam.t += 1;
            let c1 = S::one() - b1.powi(adam.t);
            let c2 = S::one() - b2.powi(adam.t);
            for i in 0..N_KEYS {
                for k in 0..N_ACTIONS {
                    let g = grad[i][k];
                    adam.m[i][k] = b1 * adam.m[i][k] + (S::one() - b1) * g;
                    adam.v[i][k] = b2 * adam.v[i][k] + (S::one() - b2) * g * g;
                    let m_hat = adam.m[i][k] / c1;
                    let v_hat = adam.v[i][k] / c2;
                    policy.logits[i][k] = policy.logits[i][k] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Preference optimization of `init` against the frozen `reference`.
/// `val` is scored after every epoch; `on_epoch` sees each epoch's policy.
pub fn train_dpo_with<S: Scalar>(
    init: &ToyPolicy<S>,
    reference: &ToyPolicy<S>,
    train: &[PairRecord],
    val: &[PairRecord],
    cfg: &TrainConfig<S>,
    mut on_epoch: impl FnMut(usize, &ToyPolicy<S>),
) -> Result<(ToyPolicy<S>, TrainHistory), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let enc_train = encode_pairs(train, reference)?;
    let enc_val = encode_pairs(val, reference)?;

    let mut policy = init.clone();
    let mut history = TrainHistory {
        initial_loss: mean_loss(&policy, &enc_train, &cfg.loss)?.to_f64_lossy(),
        ..TrainHistory::default()
    };
    let mut adam = AdamState {
        m: vec![[S::zero(); N_ACTIONS]; N_KEYS],
        v: vec![[S::zero(); N_ACTIONS]; N_KEYS],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..enc_train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedPair<S>> = chunk.iter().map(|&i| &enc_train[i]).collect();
            let eval = batch_gradient(&policy, &batch, &cfg.loss)?;
            if !eval.mean_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            history.steps.push(StepRecord {
                epoch,
                step,
                train_loss: eval.mean_loss.to_f64_lossy(),
                margin_mean: eval.margin_mean.to_f64_lossy(),
                chosen_score_mean: eval.chosen_score_mean.to_f64_lossy(),
                rejected_score_mean: eval.rejected_score_mean.to_f64_lossy(),
            });
            apply_update(&mut policy, &eval.grad, cfg.lr, cfg.optimizer, &mut adam);
            if !policy.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            step += 1;
        }
        let val_loss = if enc_val.is_empty() {
            None
        } else {
            Some(mean_loss(&policy, &enc_val, &cfg.loss)?.to_f64_lossy())
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: mean_loss(&policy, &enc_train, &cfg.loss)?.to_f64_lossy(),
            val_loss,
        });
        on_epoch(epoch, &policy);
    }
    Ok((policy, history))
}

pub fn train_dpo<S: Scalar>(
    init: &ToyPolicy<S>,
    reference: &ToyPolicy<S>,
    train: &[PairRecord],
    cfg: &TrainConfig<S>,
) -> Result<(ToyPolicy<S>, TrainHistory), TrainError> {
    train_dpo_with(init, reference, train, &[], cfg, |_, _| {})
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Denominator floor of the relative error, so near-zero gradients compare
/// by absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// Max over touched logits of `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
/// with central differences of step `h`.
pub fn gradcheck<S: Scalar>(
    policy: &ToyPolicy<S>,
    pair: &EncodedPair<S>,
    cfg: &LossConfig<S>,
    h: S,
) -> Result<f64, TrainError> {
    let analytic = batch_gradient(policy, &[pair], cfg)?.grad;
    let loss_at = |p: &ToyPolicy<S>| -> Result<S, TrainError> { Ok(diatool_loss(&pair.log_ratios(p), cfg)?.loss) };
    let mut worst = 0.0f64;
    let mut probe = policy.clone();
    for f in pair.touched_keys() {
        for k in 0..N_ACTIONS {
            let orig = probe.row(f)[k];
            probe.row_mut(f)[k] = orig + h;
            let up = loss_at(&probe)?;
            probe.row_mut(f)[k] = orig - h;
            let down = loss_at(&probe)?;
            probe.row_mut(f)[k] = orig;
            let numeric = ((up - down) / (h + h)).to_f64_lossy();
            let a = analytic[f.index()][k].to_f64_lossy();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub pairs: usize,
    pub h: f64,
    pub max_rel_error: f64,
    pub worst_pair: usize,
}

fn random_policy(rng: &mut ChaCha8Rng, scale: f64) -> ToyPolicy<f64> {
    let mut p = ToyPolicy::uniform();
    for row in &mut p.logits {
        for v in row.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    p
}

fn random_side(rng: &mut ChaCha8Rng, len: usize, reference: &ToyPolicy<f64>) -> EncodedSide<f64> {
    let turns: Vec<(StateFeatures, ActionKind)> = (0..len)
        .map(|_| {
            let f = StateFeatures::from_index(rng.gen_range(0..N_KEYS)).expect("index in range");
            let a = ActionKind::from_index(rng.gen_range(0..N_ACTIONS)).expect("index in range");
            (f, a)
        })
        .collect();
    let ref_logp = turns.iter().map(|&(f, a)| reference.action_logprob(f, a).logp).collect();
    EncodedSide { turns, ref_logp }
}

/// Gradient check on `n` random pairs: random trainable and reference
/// tables, turn counts in `1..=max_turns` with `T_c ≠ T_r`, and γ cycling
/// through 0.1, 0.2, …, 0.9.
pub fn gradcheck_random(n: usize, max_turns: usize, h: f64, seed: u64) -> Result<GradcheckSummary, TrainError> {
    if max_turns < 2 {
        return Err(TrainError::InvalidConfig("max_turns must be at least 2".into()));
    }
    let results: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let policy = random_policy(&mut rng, 3.0);
            let reference = random_policy(&mut rng, 3.0);
            let tc = rng.gen_range(1..=max_turns);
            let tr = loop {
                let t = rng.gen_range(1..=max_turns);
                if t != tc {
                    break t;
                }
            };
            let pair = EncodedPair {
                pair_id: format!("random-{i}"),
                chosen: random_side(&mut rng, tc, &reference),
                rejected: random_side(&mut rng, tr, &reference),
            };
            let loss = LossConfig {
                gamma: 0.1 * (1 + i % 9) as f64,
                rho: rng.gen_range(0.0..5.0),
                beta: rng.gen_range(0.1..1.0),
                ..LossConfig::default()
            };
            gradcheck(&policy, &pair, &loss, h)
        })
        .collect::<Result<_, _>>()?;
    let (worst_pair, max_rel_error) = results
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradcheckSummary {
        pairs: n,
        h,
        max_rel_error,
        worst_pair,
    })
}
