//! Teacher-forced per-turn evaluation with structural judging rules.
//!
//! Every gold assistant turn becomes one [`EvalCase`] conditioned on the
//! gold prefix. A prediction for the turn is judged by the metric its gold
//! action implies: Call, Completion, Slot or Relevance.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{message_json, parse_message, record_from_json, record_to_json, CorpusError};
use crate::dialogue::{
    arguments_equal, assistant_actions, missing_before, value_located, ActionKind, AssistantAction, DialogueError,
    Message, Role, TargetCall, Trajectory,
};
use crate::policy::{trajectory_turns, PolicyError, FeatureContext, StateFeatures, ToyPolicy};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no evaluation cases")]
    NoCases,
    #[error("record {record}: {source}")]
    Dialogue { record: usize, source: DialogueError },
    #[error("transcript line {line}: {message}")]
    Transcript { line: usize, message: String },
    #[error("record {record}: {source}")]
    Policy { record: usize, source: PolicyError },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Call,
    Completion,
    Slot,
    Relevance,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Call, Metric::Completion, Metric::Slot, Metric::Relevance];

    pub fn for_action(kind: ActionKind) -> Metric {
        match kind {
            ActionKind::AskSlot => Metric::Slot,
            ActionKind::ToolCall => Metric::Call,
            ActionKind::Reject => Metric::Relevance,
            ActionKind::Complete => Metric::Completion,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Call => "Call",
            Metric::Completion => "Completion",
            Metric::Slot => "Slot",
            Metric::Relevance => "Relevance",
        }
    }
}

/// One judged assistant turn.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    /// Index of the gold record in the evaluated list.
    pub record: usize,
    /// Message index of the judged assistant turn.
    pub turn: usize,
    pub metric: Metric,
    pub gold: AssistantAction,
    pub features: StateFeatures,
    /// The dialogue's target call, if any.
    pub target: Option<TargetCall>,
    /// Required fields still unstated before the turn.
    pub missing: Vec<String>,
    /// Leaf values of the latest tool response before the turn.
    pub tool_values: Vec<Value>,
}

fn leaf_values(v: &Value, out: &mut Vec<Value>) {
    match v {
        Value::Object(m) => m.values().for_each(|x| leaf_values(x, out)),
        Value::Array(a) => a.iter().for_each(|x| leaf_values(x, out)),
        Value::Null => {}
        other => out.push(other.clone()),
    }
}

fn tool_values_before(traj: &Trajectory, end: usize) -> Vec<Value> {
    let mut out = Vec::new();
    if let Some(m) = traj.messages[..end].iter().rev().find(|m| m.role == Role::Tool) {
        match serde_json::from_str::<Value>(&m.content) {
            Ok(v) => leaf_values(&v, &mut out),
            Err(_) => out.push(Value::String(m.content.clone())),
        }
    }
    out
}

pub fn cases_for(record: usize, traj: &Trajectory) -> Result<Vec<EvalCase>, EvalError> {
    let err = |source| EvalError::Dialogue { record, source };
    let ctx = FeatureContext::of(traj);
    let actions = assistant_actions(traj).map_err(err)?;
    let turns = trajectory_turns(traj, &ctx).map_err(|e| EvalError::Policy { record, source: e })?;
    Ok(actions
        .into_iter()
        .zip(turns)
        .map(|((turn, gold), (features, _))| EvalCase {
            record,
            turn,
            metric: Metric::for_action(gold.kind()),
            missing: missing_before(traj, ctx.target.as_ref(), turn),
            tool_values: tool_values_before(traj, turn),
            target: ctx.target.clone(),
            features,
            gold,
        })
        .collect())
}

/// One case per gold assistant turn, in record then turn order.
pub fn build_eval_cases(trajectories: &[Trajectory]) -> Result<Vec<EvalCase>, EvalError> {
    let per: Vec<Vec<EvalCase>> = trajectories
        .par_iter()
        .enumerate()
        .map(|(i, t)| cases_for(i, t))
        .collect::<Result<_, _>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Pluggable judging. A full-text message is passed when one exists.
pub trait Judge: Send + Sync {
    fn judge(&self, predicted: &AssistantAction, message: Option<&Message>, case: &EvalCase) -> bool;
}

/// Structural rules for the four metrics.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleJudge;

impl Judge for RuleJudge {
    fn judge(&self, predicted: &AssistantAction, message: Option<&Message>, case: &EvalCase) -> bool {
        let ok = judge(predicted, case);
        match (case.metric, message) {
            (Metric::Completion, Some(m)) if ok => case
                .tool_values
                .iter()
                .all(|v| value_located(v, &m.content)),
            _ => ok,
        }
    }
}

/// Rule-based verdict on an abstract action.
pub fn judge(predicted: &AssistantAction, case: &EvalCase) -> bool {
    match (case.metric, predicted) {
        (Metric::Call, AssistantAction::ToolCall { name, arguments }) => match &case.gold {
            AssistantAction::ToolCall {
                name: gold_name,
                arguments: gold_args,
            } => name == gold_name && arguments_equal(arguments, gold_args),
            _ => false,
        },
        (Metric::Completion, AssistantAction::Complete) => true,
        (Metric::Slot, AssistantAction::AskSlot { target_fields }) => {
            !target_fields.is_empty() && target_fields.iter().all(|f| case.missing.contains(f))
        }
        (Metric::Relevance, AssistantAction::Reject) => true,
        _ => false,
    }
}

/// Renders an action kind into a concrete action using the case's gold content.
pub fn render_action(kind: ActionKind, case: &EvalCase) -> AssistantAction {
    match kind {
        ActionKind::AskSlot => AssistantAction::AskSlot {
            target_fields: case.missing.clone(),
        },
        ActionKind::ToolCall => match &case.target {
            Some(t) => AssistantAction::ToolCall {
                name: t.name.clone(),
                arguments: t.arguments.clone(),
            },
            None => AssistantAction::ToolCall {
                name: String::new(),
                arguments: Default::default(),
            },
        },
        ActionKind::Reject => AssistantAction::Reject,
        ActionKind::Complete => AssistantAction::Complete,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub tallies: BTreeMap<Metric, Tally>,
}

impl MetricsReport {
    pub fn from_verdicts(verdicts: impl IntoIterator<Item = (Metric, bool)>) -> Self {
        let mut tallies: BTreeMap<Metric, Tally> = Metric::ALL.iter().map(|&m| (m, Tally::default())).collect();
        for (m, ok) in verdicts {
            let t = tallies.entry(m).or_default();
            t.total += 1;
            t.correct += usize::from(ok);
        }
        Self { tallies }
    }

    pub fn accuracy(&self, m: Metric) -> f64 {
        self.tallies.get(&m).copied().unwrap_or_default().accuracy()
    }

    pub fn total_cases(&self) -> usize {
        self.tallies.values().map(|t| t.total).sum()
    }

    /// Correct over all judged turns.
    pub fn micro(&self) -> f64 {
        let correct: usize = self.tallies.values().map(|t| t.correct).sum();
        let total = self.total_cases();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// Unweighted mean of the four accuracies.
    pub fn macro_avg(&self) -> f64 {
        Metric::ALL.iter().map(|&m| self.accuracy(m)).sum::<f64>() / 4.0
    }

    pub fn to_json(&self) -> Value {
        let mut out = serde_json::Map::new();
        for m in Metric::ALL {
            out.insert(m.as_str().into(), json!(self.accuracy(m)));
        }
        out.insert("Micro Avg.".into(), json!(self.micro()));
        out.insert("Macro Avg.".into(), json!(self.macro_avg()));
        let counts: serde_json::Map<String, Value> = Metric::ALL
            .iter()
            .map(|&m| {
                let t = self.tallies.get(&m).copied().unwrap_or_default();
                (m.as_str().to_string(), json!({"correct": t.correct, "total": t.total}))
            })
            .collect();
        out.insert("counts".into(), Value::Object(counts));
        Value::Object(out)
    }
}

/// Judges `predict(case)` for every case with the rule judge.
pub fn evaluate_predictions(
    cases: &[EvalCase],
    predict: impl Fn(&EvalCase) -> AssistantAction + Sync,
) -> Result<MetricsReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    let verdicts: Vec<(Metric, bool)> = cases
        .par_iter()
        .map(|c| (c.metric, RuleJudge.judge(&predict(c), None, c)))
        .collect();
    Ok(MetricsReport::from_verdicts(verdicts))
}

/// Greedy policy under teacher forcing.
pub fn evaluate<S: Scalar>(policy: &ToyPolicy<S>, trajectories: &[Trajectory]) -> Result<MetricsReport, EvalError> {
    let cases = build_eval_cases(trajectories)?;
    evaluate_cases(policy, &cases)
}

pub fn evaluate_cases<S: Scalar>(policy: &ToyPolicy<S>, cases: &[EvalCase]) -> Result<MetricsReport, EvalError> {
    evaluate_predictions(cases, |c| render_action(policy.greedy_action(c.features), c))
}

// ---------------------------------------------------------------------------
// Transcript mode
// ---------------------------------------------------------------------------

/// Gold record plus one model message per gold assistant turn, produced
/// under the gold prefix. JSONL: `{"gold": <record>, "predicted": [<message>, ...]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptLine {
    pub gold: Trajectory,
    pub predicted: Vec<Message>,
}

pub fn parse_transcripts(text: &str) -> Result<Vec<TranscriptLine>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |message: String| EvalError::Transcript { line: i + 1, message };
        let v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let gold = record_from_json(v.get("gold").ok_or_else(|| bad("missing `gold`".into()))?, i)?;
        let predicted = v
            .get("predicted")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing `predicted` array".into()))?
            .iter()
            .map(parse_message)
            .collect::<Result<Vec<_>, _>>()?;
        out.push(TranscriptLine { gold, predicted });
    }
    Ok(out)
}

pub fn transcript_to_json(t: &TranscriptLine) -> Value {
    json!({
        "gold": record_to_json(&t.gold),
        "predicted": t.predicted.iter().map(message_json).collect::<Vec<_>>(),
    })
}

/// Reads a free-text assistant message as an action in the context of `case`.
/// Plain text is an ask when it names missing fields, a completion after a
/// tool response, otherwise a rejection.
pub fn interpret_message(msg: &Message, case: &EvalCase, traj: &Trajectory) -> AssistantAction {
    if let Some(call) = msg.first_tool_call() {
        return AssistantAction::ToolCall {
            name: call.function_name.clone(),
            arguments: call.parsed_arguments().unwrap_or_default(),
        };
    }
    if traj.messages[..case.turn].iter().any(|m| m.role == Role::Tool) {
        return AssistantAction::Complete;
    }
    let text = msg.content.to_lowercase();
    let tool = case.target.as_ref().and_then(|t| traj.tool(&t.name));
    let named: Vec<String> = case
        .missing
        .iter()
        .filter(|f| {
            let spoken = f.replace('_', " ").to_lowercase();
            text.contains(&spoken)
                || tool.is_some_and(|t| {
                    let d = t.field_description(f).to_lowercase();
                    !d.is_empty() && text.contains(&d)
                })
        })
        .cloned()
        .collect();
    if named.is_empty() && case.metric != Metric::Slot {
        AssistantAction::Reject
    } else {
        AssistantAction::AskSlot { target_fields: named }
    }
}

pub fn evaluate_transcripts(lines: &[TranscriptLine], judge: &dyn Judge) -> Result<MetricsReport, EvalError> {
    let mut verdicts = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let cases = cases_for(i, &line.gold)?;
        if cases.len() != line.predicted.len() {
            return Err(EvalError::Transcript {
                line: i + 1,
                message: format!("{} gold assistant turns but {} predictions", cases.len(), line.predicted.len()),
            });
        }
        for (case, msg) in cases.iter().zip(&line.predicted) {
            let action = interpret_message(msg, case, &line.gold);
            verdicts.push((case.metric, judge.judge(&action, Some(msg), case)));
        }
    }
    if verdicts.is_empty() {
        return Err(EvalError::NoCases);
    }
    Ok(MetricsReport::from_verdicts(verdicts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{derive_type3, LanguagePack};
    use crate::dialogue::fixtures::{bmi_args, bmi_type1, bmi_type2};
    use crate::dialogue::ToolCall;

    fn corpus() -> Vec<Trajectory> {
        vec![bmi_type1(), bmi_type2(), derive_type3(&bmi_type1(), &LanguagePack::default()).unwrap()]
    }

    #[test]
    fn case_counts_per_type() {
        let metrics = |t: &Trajectory| -> Vec<Metric> { cases_for(0, t).unwrap().iter().map(|c| c.metric).collect() };
        let c = corpus();
        assert_eq!(metrics(&c[0]), vec![Metric::Call, Metric::Completion]);
        assert_eq!(metrics(&c[1]), vec![Metric::Slot, Metric::Call, Metric::Completion]);
        assert_eq!(metrics(&c[2]), vec![Metric::Relevance]);
        assert_eq!(build_eval_cases(&c).unwrap().len(), 6);
    }

    #[test]
    fn judge_examples() {
        let cases = build_eval_cases(&corpus()).unwrap();
        let call = &cases[0];
        let args = bmi_args();
        assert!(judge(
            &AssistantAction::ToolCall {
                name: "calculate_bmi".into(),
                arguments: args.clone()
            },
            call
        ));
        let mut wrong = args.clone();
        wrong.insert("weight".into(), json!(71));
        assert!(!judge(
            &AssistantAction::ToolCall {
                name: "calculate_bmi".into(),
                arguments: wrong
            },
            call
        ));

        let slot = &cases[2];
        assert_eq!(slot.missing, vec!["weight".to_string()]);
        assert!(judge(&AssistantAction::AskSlot { target_fields: vec!["weight".into()] }, slot));
        assert!(!judge(&AssistantAction::AskSlot { target_fields: vec!["height".into()] }, slot));
        assert!(!judge(&AssistantAction::AskSlot { target_fields: vec![] }, slot));
        assert!(!judge(&render_action(ActionKind::ToolCall, slot), slot));

        let rel = &cases[5];
        assert!(!judge(&AssistantAction::AskSlot { target_fields: vec!["weight".into()] }, rel));
        assert!(judge(&AssistantAction::Reject, rel));
    }

    #[test]
    fn reference_policies() {
        let c = corpus();
        let cases = build_eval_cases(&c).unwrap();
        let oracle = evaluate_predictions(&cases, |c| c.gold.clone()).unwrap();
        assert_eq!(oracle.macro_avg(), 1.0);
        assert_eq!(oracle.micro(), 1.0);

        let uniform = evaluate(&ToyPolicy::<f64>::uniform(), &c).unwrap();
        assert_eq!(uniform.accuracy(Metric::Slot), 1.0);
        assert_eq!(uniform.accuracy(Metric::Call), 0.0);
        assert_eq!(uniform.accuracy(Metric::Completion), 0.0);
        assert_eq!(uniform.accuracy(Metric::Relevance), 0.0);
        assert_eq!(uniform.macro_avg(), 0.25);
        assert!((uniform.micro() - 1.0 / 6.0).abs() < 1e-15);

        let caller = evaluate_predictions(&cases, |c| render_action(ActionKind::ToolCall, c)).unwrap();
        assert_eq!(caller.accuracy(Metric::Call), 1.0);
        assert_eq!(caller.macro_avg(), 0.25);

        let mut rev = cases.clone();
        rev.reverse();
        let again = evaluate_predictions(&rev, |c| render_action(ActionKind::ToolCall, c)).unwrap();
        assert_eq!(again, caller);
        assert_eq!(evaluate_predictions(&[], |c| c.gold.clone()), Err(EvalError::NoCases));
    }

    #[test]
    fn report_json_uses_table_columns() {
        let r = MetricsReport::from_verdicts([(Metric::Call, true), (Metric::Slot, false)]);
        let v = r.to_json();
        for k in ["Call", "Completion", "Slot", "Relevance", "Micro Avg.", "Macro Avg."] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["Micro Avg."], json!(0.5));
        assert_eq!(v["Macro Avg."], json!(0.25));
    }

    #[test]
    fn transcript_mode() {
        let t2 = bmi_type2();
        let good = TranscriptLine {
            gold: t2.clone(),
            predicted: vec![
                Message::assistant("What is your weight?"),
                Message::assistant_call("", ToolCall::new("calculate_bmi", &bmi_args())),
                Message::assistant("Your BMI is 22.86."),
            ],
        };
        let vague = TranscriptLine {
            gold: t2,
            predicted: vec![
                Message::assistant("Can you tell me more?"),
                Message::assistant_call("", ToolCall::new("calculate_bmi", &bmi_args())),
                Message::assistant("Done."),
            ],
        };
        let text: String = [&good, &vague]
            .iter()
            .map(|t| transcript_to_json(t).to_string() + "\n")
            .collect();
        let lines = parse_transcripts(&text).unwrap();
        assert_eq!(lines[0], good);
        let r = evaluate_transcripts(&lines, &RuleJudge).unwrap();
        assert_eq!(r.tallies[&Metric::Slot], Tally { correct: 1, total: 2 });
        assert_eq!(r.tallies[&Metric::Call], Tally { correct: 2, total: 2 });
        assert_eq!(r.tallies[&Metric::Completion], Tally { correct: 1, total: 2 });

        let short = TranscriptLine {
            gold: bmi_type1(),
            predicted: vec![],
        };
        assert!(matches!(
            evaluate_transcripts(&[short], &RuleJudge),
            Err(EvalError::Transcript { .. })
        ));
    }
}
