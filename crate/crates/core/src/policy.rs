//! Tabular softmax policy over abstract assistant actions.
//!
//! Each assistant turn is reduced to a [`StateFeatures`] key (dialogue state,
//! capped count of unfilled required fields, whether the needed tool is in
//! the list) and the policy holds one row of four logits per key.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dialogue::{
    assistant_actions, missing_before, prefix_states, ActionKind,
    DialogueError, DialogueState, Role, TargetCall, Trajectory,
};
use crate::scalar::Scalar;

pub const N_ACTIONS: usize = 4;
pub const N_KEYS: usize = 40;
pub const MAX_MISSING: usize = 3;
pub const POLICY_VERSION: &str = "toy-policy/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("illegal prefix: {0}")]
    IllegalPrefix(String),
    #[error("corpus has no assistant turns")]
    EmptyCorpus,
    #[error("malformed policy file: {0}")]
    Malformed(String),
}

impl From<DialogueError> for PolicyError {
    fn from(e: DialogueError) -> Self {
        PolicyError::IllegalPrefix(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateFeatures {
    pub state: DialogueState,
    pub n_missing: u8,
    pub tool_available: bool,
}

impl StateFeatures {
    pub fn new(state: DialogueState, n_missing: usize, tool_available: bool) -> Self {
        Self {
            state,
            n_missing: n_missing.min(MAX_MISSING) as u8,
            tool_available,
        }
    }

    pub fn index(self) -> usize {
        (usize::from(self.state.code()) - 1) * 8 + usize::from(self.n_missing) * 2 + usize::from(self.tool_available)
    }

    pub fn from_index(index: usize) -> Option<Self> {
        if index >= N_KEYS {
            return None;
        }
        Some(Self {
            state: DialogueState::from_code((index / 8 + 1) as u8)?,
            n_missing: ((index % 8) / 2) as u8,
            tool_available: index % 2 == 1,
        })
    }

    /// `"{state}-{n_missing}-{0|1}"`.
    pub fn key(self) -> String {
        format!("{}-{}-{}", self.state.code(), self.n_missing, u8::from(self.tool_available))
    }

    pub fn parse_key(key: &str) -> Option<Self> {
        let mut it = key.split('-');
        let state = DialogueState::from_code(it.next()?.parse().ok()?)?;
        let n: usize = it.next()?.parse().ok()?;
        let avail = match it.next()? {
            "0" => false,
            "1" => true,
            _ => return None,
        };
        if it.next().is_some() || n > MAX_MISSING {
            return None;
        }
        Some(Self::new(state, n, avail))
    }

    pub fn all() -> impl Iterator<Item = StateFeatures> {
        (0..N_KEYS).filter_map(StateFeatures::from_index)
    }
}

/// What the featurizer knows about the dialogue's need: the call it is
/// about and whether that tool is offered.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureContext {
    pub target: Option<TargetCall>,
    pub tool_available: bool,
}

impl FeatureContext {
    /// Context read off a gold trajectory.
    pub fn of(traj: &Trajectory) -> Self {
        let target = TargetCall::of(traj);
        let tool_available = target.as_ref().is_some_and(|t| traj.has_tool(&t.name));
        Self { target, tool_available }
    }

    /// Shared context of a preference pair: the first call found on either side.
    pub fn of_pair(chosen: &Trajectory, rejected: &Trajectory) -> Self {
        let target = TargetCall::of(chosen).or_else(|| TargetCall::of(rejected));
        let tool_available = target.as_ref().is_some_and(|t| chosen.has_tool(&t.name));
        Self { target, tool_available }
    }

    fn n_missing(&self, traj: &Trajectory, end: usize) -> usize {
        if !self.tool_available {
            return 0;
        }
        missing_before(traj, self.target.as_ref(), end).len()
    }
}

/// Features of the pending assistant turn after `prefix`.
pub fn featurize(prefix: &Trajectory, ctx: &FeatureContext) -> Result<StateFeatures, PolicyError> {
    match prefix.messages.last() {
        None => return Err(PolicyError::IllegalPrefix("empty prefix".into())),
        Some(m) if m.role == Role::Assistant => {
            return Err(PolicyError::IllegalPrefix("prefix already ends with an assistant turn".into()))
        }
        _ => {}
    }
    let states = prefix_states(prefix)?;
    let state = *states.last().expect("prefix_states is never empty");
    if !matches!(
        state,
        DialogueState::Initial | DialogueState::ToolSelectedIncomplete | DialogueState::Complete
    ) {
        return Err(PolicyError::IllegalPrefix(format!("no assistant turn is pending in state {state}")));
    }
    Ok(StateFeatures::new(
        state,
        ctx.n_missing(prefix, prefix.messages.len()),
        ctx.tool_available,
    ))
}

/// `(features, gold action)` for every assistant turn, in order.
pub fn trajectory_turns(
    traj: &Trajectory,
    ctx: &FeatureContext,
) -> Result<Vec<(StateFeatures, ActionKind)>, PolicyError> {
    let states = prefix_states(traj)?;
    Ok(assistant_actions(traj)?
        .into_iter()
        .map(|(i, action)| {
            (
                StateFeatures::new(states[i], ctx.n_missing(traj, i), ctx.tool_available),
                action.kind(),
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy<S> {
    pub version: String,
    pub logits: Vec<[S; N_ACTIONS]>,
}

impl<S: Scalar> Default for ToyPolicy<S> {
    fn default() -> Self {
        Self::uniform()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProb<S> {
    pub logp: S,
    /// `∂ log π(a|s) / ∂ logits[s]`: one-hot(a) − softmax.
    pub grad: [S; N_ACTIONS],
}

impl<S: Scalar> ToyPolicy<S> {
    pub fn uniform() -> Self {
        Self {
            version: POLICY_VERSION.to_string(),
            logits: vec![[S::zero(); N_ACTIONS]; N_KEYS],
        }
    }

    pub fn row(&self, f: StateFeatures) -> &[S; N_ACTIONS] {
        &self.logits[f.index()]
    }

    pub fn row_mut(&mut self, f: StateFeatures) -> &mut [S; N_ACTIONS] {
        &mut self.logits[f.index()]
    }

    pub fn probs(&self, f: StateFeatures) -> [S; N_ACTIONS] {
        softmax(self.row(f))
    }

    pub fn action_logprob(&self, f: StateFeatures, action: ActionKind) -> LogProb<S> {
        let row = self.row(f);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<S>().ln();
        let p = softmax(row);
        let mut grad = [S::zero(); N_ACTIONS];
        for (a, g) in grad.iter_mut().enumerate() {
            *g = if a == action.index() { S::one() } else { S::zero() } - p[a];
        }
        LogProb {
            logp: row[action.index()] - lse,
            grad,
        }
    }

    /// Argmax; ties go to the earlier action in the fixed order.
    pub fn greedy_action(&self, f: StateFeatures) -> ActionKind {
        let row = self.row(f);
        let mut best = 0;
        for a in 1..N_ACTIONS {
            if row[a] > row[best] {
                best = a;
            }
        }
        ActionKind::from_index(best).expect("index below N_ACTIONS")
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().flatten().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ToyPolicy<T> {
        ToyPolicy {
            version: self.version.clone(),
            logits: self
                .logits
                .iter()
                .map(|r| r.map(|v| T::of(v.to_f64_lossy())))
                .collect(),
        }
    }

    /// `{"version": ..., "logits": {"1-0-1": [a, b, c, d], ...}}`.
    pub fn to_json(&self) -> Value {
        let logits: BTreeMap<String, [S; N_ACTIONS]> = StateFeatures::all()
            .map(|f| (f.key(), *self.row(f)))
            .collect();
        serde_json::json!({ "version": self.version, "logits": logits })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("policy serializes") + "\n"
    }

    pub fn from_json(v: &Value) -> Result<Self, PolicyError> {
        #[derive(Deserialize)]
        #[serde(bound = "S: Scalar")]
        struct Raw<S> {
            version: String,
            logits: BTreeMap<String, [S; N_ACTIONS]>,
        }
        let raw: Raw<S> =
            serde_json::from_value(v.clone()).map_err(|e| PolicyError::Malformed(e.to_string()))?;
        let mut policy = Self::uniform();
        policy.version = raw.version;
        for (key, row) in raw.logits {
            let f = StateFeatures::parse_key(&key)
                .ok_or_else(|| PolicyError::Malformed(format!("unknown feature key `{key}`")))?;
            *policy.row_mut(f) = row;
        }
        if !policy.is_finite() {
            return Err(PolicyError::Malformed("non-finite logit".into()));
        }
        Ok(policy)
    }

    pub fn from_json_str(text: &str) -> Result<Self, PolicyError> {
        let v: Value = serde_json::from_str(text).map_err(|e| PolicyError::Malformed(e.to_string()))?;
        Self::from_json(&v)
    }
}

pub fn softmax<S: Scalar>(row: &[S; N_ACTIONS]) -> [S; N_ACTIONS] {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let e = row.map(|l| (l - max).exp());
    let z: S = e.iter().copied().sum();
    e.map(|v| v / z)
}

/// Per-key gold action counts over assistant turns.
pub fn action_counts(
    trajectories: &[Trajectory],
) -> Result<BTreeMap<StateFeatures, [usize; N_ACTIONS]>, PolicyError> {
    let mut counts: BTreeMap<StateFeatures, [usize; N_ACTIONS]> = BTreeMap::new();
    for traj in trajectories {
        for (f, a) in trajectory_turns(traj, &FeatureContext::of(traj))? {
            counts.entry(f).or_default()[a.index()] += 1;
        }
    }
    Ok(counts)
}

/// Maximum-likelihood fit of the gold assistant actions by gradient ascent
/// on the per-key mean log-likelihood. User and tool messages never
/// contribute. Starts from `init` (uniform when `None`).
pub fn sft_fit<S: Scalar>(
    trajectories: &[Trajectory],
    epochs: usize,
    lr: S,
    init: Option<&ToyPolicy<S>>,
) -> Result<ToyPolicy<S>, PolicyError> {
    fit_counts(&action_counts(trajectories)?, epochs, lr, init)
}

/// [`sft_fit`] on already featurized `(features, action)` examples.
pub fn sft_fit_examples<S: Scalar>(
    examples: &[(StateFeatures, ActionKind)],
    epochs: usize,
    lr: S,
    init: Option<&ToyPolicy<S>>,
) -> Result<ToyPolicy<S>, PolicyError> {
    let mut counts: BTreeMap<StateFeatures, [usize; N_ACTIONS]> = BTreeMap::new();
    for &(f, a) in examples {
        counts.entry(f).or_default()[a.index()] += 1;
    }
    fit_counts(&counts, epochs, lr, init)
}

fn fit_counts<S: Scalar>(
    counts: &BTreeMap<StateFeatures, [usize; N_ACTIONS]>,
    epochs: usize,
    lr: S,
    init: Option<&ToyPolicy<S>>,
) -> Result<ToyPolicy<S>, PolicyError> {
    if counts.is_empty() {
        return Err(PolicyError::EmptyCorpus);
    }
    let mut policy = init.cloned().unwrap_or_default();
    let targets: Vec<(StateFeatures, [S; N_ACTIONS])> = counts
        .iter()
        .map(|(&f, c)| {
            let n = S::of_usize(c.iter().sum());
            (f, c.map(|k| S::of_usize(k) / n))
        })
        .collect();
    for _ in 0..epochs {
        for (f, freq) in &targets {
            let p = policy.probs(*f);
            let row = policy.row_mut(*f);
            for a in 0..N_ACTIONS {
                row[a] = row[a] + lr * (freq[a] - p[a]);
            }
        }
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{derive_type3, LanguagePack};
    use crate::dialogue::fixtures::{bmi_type1, bmi_type2};
    use crate::dialogue::Message;

    #[test]
    fn key_space_is_forty() {
        let keys: Vec<String> = StateFeatures::all().map(StateFeatures::key).collect();
        assert_eq!(keys.len(), 40);
        for (i, f) in StateFeatures::all().enumerate() {
            assert_eq!(f.index(), i);
            assert_eq!(StateFeatures::parse_key(&f.key()), Some(f));
        }
    }

    #[test]
    fn featurize_examples() {
        let t2 = bmi_type2();
        let ctx = FeatureContext::of(&t2);
        let prefix = Trajectory::new(t2.messages[..1].to_vec(), t2.tools.clone());
        assert_eq!(
            featurize(&prefix, &ctx).unwrap(),
            StateFeatures::new(DialogueState::Initial, 1, true)
        );
        let prefix = Trajectory::new(t2.messages[..3].to_vec(), t2.tools.clone());
        assert_eq!(
            featurize(&prefix, &ctx).unwrap(),
            StateFeatures::new(DialogueState::ToolSelectedIncomplete, 0, true)
        );
        let prefix = Trajectory::new(t2.messages[..5].to_vec(), t2.tools.clone());
        assert_eq!(
            featurize(&prefix, &ctx).unwrap(),
            StateFeatures::new(DialogueState::Complete, 0, true)
        );

        let t3 = derive_type3(&bmi_type1(), &LanguagePack::default()).unwrap();
        let prefix = Trajectory::new(t3.messages[..1].to_vec(), t3.tools.clone());
        assert_eq!(
            featurize(&prefix, &FeatureContext::of(&t3)).unwrap(),
            StateFeatures::new(DialogueState::Initial, 0, false)
        );

        let bad = Trajectory::new(t2.messages[..2].to_vec(), t2.tools.clone());
        assert!(matches!(featurize(&bad, &ctx), Err(PolicyError::IllegalPrefix(_))));
    }

    #[test]
    fn turns_agree_with_featurize() {
        let t2 = bmi_type2();
        let ctx = FeatureContext::of(&t2);
        let turns = trajectory_turns(&t2, &ctx).unwrap();
        for ((f, _), i) in turns.iter().zip(t2.assistant_indices()) {
            let prefix = Trajectory::new(t2.messages[..i].to_vec(), t2.tools.clone());
            assert_eq!(featurize(&prefix, &ctx).unwrap(), *f);
        }
        let kinds: Vec<ActionKind> = turns.iter().map(|t| t.1).collect();
        assert_eq!(kinds, vec![ActionKind::AskSlot, ActionKind::ToolCall, ActionKind::Complete]);
    }

    #[test]
    fn logprob_examples() {
        let p = ToyPolicy::<f64>::uniform();
        let f = StateFeatures::new(DialogueState::Initial, 0, true);
        for a in ActionKind::ALL {
            let lp = p.action_logprob(f, a);
            assert!((lp.logp - 0.25f64.ln()).abs() < 1e-12);
            assert!(lp.grad.iter().sum::<f64>().abs() < 1e-15);
        }
        let mut p = p;
        *p.row_mut(f) = [10.0, 0.0, 0.0, 0.0];
        let direct = 10.0 - (10f64.exp() + 3.0).ln();
        let lp = p.action_logprob(f, ActionKind::AskSlot);
        assert!((lp.logp - direct).abs() < 1e-15);
        assert!((lp.logp + 1.3619e-4).abs() < 1e-7);
        assert!((p.probs(f).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_tie_break_and_argmax() {
        let mut p = ToyPolicy::<f64>::uniform();
        let f = StateFeatures::new(DialogueState::Initial, 0, true);
        assert_eq!(p.greedy_action(f), ActionKind::AskSlot);
        *p.row_mut(f) = [0.0, 5.0, 0.0, 0.0];
        assert_eq!(p.greedy_action(f), ActionKind::ToolCall);
    }

    #[test]
    fn sft_matches_majority_and_converges() {
        let lang = LanguagePack::default();
        let t3 = derive_type3(&bmi_type1(), &lang).unwrap();
        let corpus = vec![bmi_type1(), bmi_type1(), t3.clone()];
        let p = sft_fit::<f64>(&corpus, 200, 0.5, None).unwrap();
        let call_key = StateFeatures::new(DialogueState::Initial, 0, true);
        let reject_key = StateFeatures::new(DialogueState::Initial, 0, false);
        assert_eq!(p.greedy_action(call_key), ActionKind::ToolCall);
        assert_eq!(p.greedy_action(reject_key), ActionKind::Reject);
        assert!(p.probs(call_key)[ActionKind::ToolCall.index()] > 0.99);
        assert!(p.probs(reject_key)[ActionKind::Reject.index()] > 0.99);

        // Mixed key: 2 calls vs 1 ask → MLE puts 2/3 on the call.
        let mut ask = bmi_type1();
        ask.messages[0] = Message::user("Hi, I need to calculate my BMI. I weigh 70 kg and my height is 1.75 m.");
        ask.messages.insert(1, Message::assistant("Could you confirm your weight?"));
        ask.messages.insert(2, Message::user("70 kg."));
        let p = sft_fit::<f64>(&[bmi_type1(), bmi_type1(), ask], 3000, 0.5, None).unwrap();
        let probs = p.probs(call_key);
        assert!((probs[ActionKind::ToolCall.index()] - 2.0 / 3.0).abs() < 1e-3);
        assert_eq!(p.greedy_action(call_key), ActionKind::ToolCall);

        let one = sft_fit::<f64>(&[bmi_type1()], 1, 0.0, None).unwrap();
        assert_eq!(one, ToyPolicy::uniform());
        assert_eq!(sft_fit::<f64>(&[], 1, 0.1, None), Err(PolicyError::EmptyCorpus));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let p = sft_fit::<f64>(&[bmi_type2()], 37, 0.31, None).unwrap();
        let back = ToyPolicy::<f64>::from_json_str(&p.to_json_string()).unwrap();
        assert_eq!(back, p);
        let p32: ToyPolicy<f32> = p.cast();
        assert_eq!(ToyPolicy::<f32>::from_json_str(&p32.to_json_string()).unwrap(), p32);
        assert!(ToyPolicy::<f64>::from_json_str(r#"{"version":"x","logits":{"9-0-0":[0,0,0,0]}}"#).is_err());
    }
}
