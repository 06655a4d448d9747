//! Derive slot-filling (Type 2) and out-of-tools (Type 3) trajectories from
//! complete-information (Type 1) seeds.
//!
//! The default path is a deterministic template augmenter: hidden argument
//! values are deleted from the opening query (whole clauses where possible,
//! bare spans otherwise) and slot-filling exchanges are inserted before the
//! seed's own call. An optional [`GeneratorClient`] can replace the template
//! text with externally generated messages, which are then validated.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{parse_message, record_to_json, Difficulty};
use crate::dialogue::{
    arguments_equal, classify_query_type, turn_count, validate_trajectory, value_located,
    value_spans, CorpusRecord, DialogueError, Message, QueryType, Role, TargetCall, ToolSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("seed is not a Type 1 trajectory (got {0})")]
    NotType1(String),
    #[error("augmentation plan hides no fields")]
    EmptyPlan,
    #[error("field `{0}` is not a required field of the target tool")]
    NotRequired(String),
    #[error("value of field `{0}` cannot be located in the opening query")]
    FieldNotLocatable(String),
    #[error("target tool not found: {0}")]
    ToolNotFound(String),
    #[error("generator output rejected: {0}")]
    GeneratorRejected(String),
    #[error("generator request failed: {0}")]
    GeneratorTransport(String),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
}

impl AugmentError {
    /// Short reason label used in build reports.
    pub fn reason(&self) -> &'static str {
        match self {
            AugmentError::NotType1(_) => "not_type1",
            AugmentError::EmptyPlan => "empty_plan",
            AugmentError::NotRequired(_) => "not_required",
            AugmentError::FieldNotLocatable(_) => "field_not_locatable",
            AugmentError::ToolNotFound(_) => "tool_not_found",
            AugmentError::GeneratorRejected(_) => "generator_rejected",
            AugmentError::GeneratorTransport(_) => "generator_transport",
            AugmentError::Dialogue(_) => "dialogue_error",
        }
    }
}

/// Phrase templates for the template augmenter; one file per language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguagePack {
    pub ask_slot: String,
    pub answer: String,
    pub answer_joiner: String,
    pub reject: String,
    pub fallback_query: String,
    pub list_and: String,
}

impl Default for LanguagePack {
    fn default() -> Self {
        serde_json::from_str(include_str!("../templates/en.json")).expect("bundled language pack")
    }
}

impl LanguagePack {
    fn join_list(&self, items: &[String]) -> String {
        match items {
            [] => String::new(),
            [one] => one.clone(),
            [a, b] => format!("{a} {} {b}", self.list_and),
            [init @ .., last] => format!("{}, {} {last}", init.join(", "), self.list_and),
        }
    }

    /// "Please tell me the weight in kilograms." for the pending fields.
    pub fn ask_text(&self, tool: &ToolSpec, fields: &[String]) -> String {
        let phrases: Vec<String> = fields
            .iter()
            .map(|f| noun_phrase(&tool.field_description(f)))
            .collect();
        self.ask_slot.replace("{fields}", &self.join_list(&phrases))
    }

    pub fn answer_text(&self, answers: &[(String, Value)]) -> String {
        let parts: Vec<String> = answers
            .iter()
            .map(|(field, value)| {
                self.answer
                    .replace("{field}", &capitalize(&field.replace('_', " ")))
                    .replace("{value}", &render_value(value))
            })
            .collect();
        parts.join(&self.answer_joiner)
    }

    pub fn reject_text(&self, removed: &ToolSpec) -> String {
        self.reject.replace("{capability}", &capability(removed))
    }
}

/// "The weight in kilograms" → "the weight in kilograms"; bare nouns get "the".
fn noun_phrase(description: &str) -> String {
    let d = description.trim().trim_end_matches('.');
    let lowered = lower_first(d);
    if lowered.starts_with("the ") || lowered.starts_with("a ") || lowered.starts_with("an ") {
        lowered
    } else {
        format!("the {lowered}")
    }
}

fn capability(tool: &ToolSpec) -> String {
    let d = tool.description.trim().trim_end_matches('.');
    if d.is_empty() {
        tool.name.replace('_', " ")
    } else {
        lower_first(d)
    }
}

fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        // Keep acronyms such as "BMI" intact.
        Some(c) if !chars.clone().next().is_some_and(char::is_uppercase) => {
            c.to_lowercase().chain(chars).collect()
        }
        _ => s.to_string(),
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Text form of an argument value that `value_located` will find again.
pub fn render_value(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render_value).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub difficulty: Difficulty,
    pub fields_to_hide: Vec<String>,
    /// Fields answered by the user after each slot question, in order.
    pub answer_schedule: Vec<Vec<String>>,
}

impl AugmentationPlan {
    pub fn easy(field: impl Into<String>) -> Self {
        let field = field.into();
        Self {
            difficulty: Difficulty::Easy,
            fields_to_hide: vec![field.clone()],
            answer_schedule: vec![vec![field]],
        }
    }

    /// Hides every given field; the user answers the first pending one each turn.
    pub fn hard(fields: Vec<String>) -> Self {
        Self {
            difficulty: Difficulty::Hard,
            answer_schedule: fields.iter().map(|f| vec![f.clone()]).collect(),
            fields_to_hide: fields,
        }
    }

    /// Hard plan whose answer order is a seeded permutation of the hidden fields.
    pub fn hard_shuffled(fields: Vec<String>, rng: &mut impl Rng) -> Self {
        let mut order = fields.clone();
        order.shuffle(rng);
        Self {
            difficulty: Difficulty::Hard,
            answer_schedule: order.into_iter().map(|f| vec![f]).collect(),
            fields_to_hide: fields,
        }
    }

    fn check(&self) -> Result<(), AugmentError> {
        if self.fields_to_hide.is_empty() {
            return Err(AugmentError::EmptyPlan);
        }
        let mut scheduled: Vec<&String> = self.answer_schedule.iter().flatten().collect();
        scheduled.sort();
        let mut hidden: Vec<&String> = self.fields_to_hide.iter().collect();
        hidden.sort();
        if scheduled != hidden || self.answer_schedule.iter().any(Vec::is_empty) {
            return Err(AugmentError::EmptyPlan);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Query rewriting
// ---------------------------------------------------------------------------

fn clause_separators() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[.,;!?]\s+|\s+and\s+").expect("static regex"))
}

fn ends_sentence(sep: &str) -> bool {
    matches!(sep.trim_end().chars().last(), Some('.' | '!' | '?'))
}

/// Removes the hidden values from `query`. Clauses mentioning only hidden
/// values are dropped; a clause that also mentions a kept value loses just
/// the hidden spans.
fn remove_values(query: &str, hidden: &[&Value], kept: &[&Value]) -> String {
    let mut segments: Vec<(String, String)> = Vec::new();
    let mut last = 0;
    let mut sep = String::new();
    for m in clause_separators().find_iter(query) {
        segments.push((sep, query[last..m.start()].to_string()));
        sep = m.as_str().to_string();
        last = m.end();
    }
    segments.push((sep, query[last..].to_string()));

    let mut out: Vec<(String, String)> = Vec::new();
    let mut pending_sep: Option<String> = None;
    let n = segments.len();
    for (i, (sep, clause)) in segments.into_iter().enumerate() {
        let has_hidden = hidden.iter().any(|v| value_located(v, &clause));
        let has_kept = kept.iter().any(|v| value_located(v, &clause));
        let sep = pending_sep.take().unwrap_or(sep);
        if has_hidden && !has_kept {
            // The removed clause may have carried the closing punctuation.
            if i + 1 == n {
                let tail: String = clause
                    .chars()
                    .rev()
                    .take_while(|c| matches!(c, '.' | '!' | '?'))
                    .collect();
                if let Some((_, prev)) = out.last_mut() {
                    if !prev.ends_with(['.', '!', '?']) {
                        prev.push_str(&tail);
                    }
                }
            }
            pending_sep = Some(if out.is_empty() { String::new() } else { sep });
            continue;
        }
        let clause = if has_hidden {
            delete_spans(&clause, hidden)
        } else {
            clause
        };
        out.push((sep, clause));
    }

    let mut text = String::new();
    for (i, (sep, clause)) in out.iter().enumerate() {
        let capital = i == 0 || ends_sentence(sep);
        text.push_str(if i == 0 { "" } else { sep });
        text.push_str(&if capital { capitalize(clause) } else { clause.clone() });
    }
    text
}

fn delete_spans(text: &str, hidden: &[&Value]) -> String {
    let mut spans: Vec<(usize, usize)> = hidden.iter().flat_map(|v| value_spans(v, text)).collect();
    spans.sort_unstable();
    let mut out = String::new();
    let mut cursor = 0;
    for (s, e) in spans {
        if s < cursor {
            continue;
        }
        out.push_str(&text[cursor..s]);
        cursor = e;
    }
    out.push_str(&text[cursor..]);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// Generator client
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRequest {
    pub prompt: String,
    pub source: Value,
}

/// External text generator producing the target `messages` for a seed.
pub trait GeneratorClient: Send + Sync {
    fn generate(&self, request: &GeneratorRequest) -> Result<Vec<Message>, AugmentError>;
}

/// Fills a prompt template for the given seed and plan.
pub fn build_prompt(seed: &CorpusRecord, plan: &AugmentationPlan, language: &str) -> String {
    let source = serde_json::to_string_pretty(&record_to_json(seed)).unwrap_or_default();
    let required = TargetCall::of(seed)
        .and_then(|t| seed.tool(&t.name).map(|tool| tool.required.clone()))
        .unwrap_or_default();
    let template = match plan.difficulty {
        Difficulty::Easy => include_str!("../templates/easy_prompt.txt"),
        Difficulty::Hard => include_str!("../templates/hard_prompt.txt"),
    };
    template
        .replace("{hidden_count}", &plan.fields_to_hide.len().to_string())
        .replace("{hidden_fields}", &plan.fields_to_hide.join(", "))
        .replace("{required_count}", &required.len().to_string())
        .replace("{required_fields}", &required.join(", "))
        .replace("{language}", language)
        .replace("{source}", &source)
}

/// Blocking HTTP client: POST `{prompt, source}`, expects `{messages: [...]}`.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: u32,
    pub bearer_token: Option<String>,
}

/// Environment variable holding the generator bearer token.
pub const GENERATOR_TOKEN_ENV: &str = "DIATOOL_GENERATOR_TOKEN";

impl HttpGenerator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            retries,
            bearer_token: std::env::var(GENERATOR_TOKEN_ENV).ok(),
        }
    }

    fn attempt(&self, agent: &ureq::Agent, body: &str) -> Result<String, String> {
        let mut req = agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.bearer_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }
}

impl GeneratorClient for HttpGenerator {
    fn generate(&self, request: &GeneratorRequest) -> Result<Vec<Message>, AugmentError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = serde_json::to_string(request).expect("request serializes");
        let mut last_err = String::new();
        for _ in 0..=self.retries {
            match self.attempt(&agent, &body) {
                Ok(text) => return parse_generator_response(&text),
                Err(e) => last_err = e,
            }
        }
        Err(AugmentError::GeneratorTransport(last_err))
    }
}

pub fn parse_generator_response(text: &str) -> Result<Vec<Message>, AugmentError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| AugmentError::GeneratorRejected(format!("not JSON: {e}")))?;
    let items = value
        .get("messages")
        .and_then(Value::as_array)
        .ok_or_else(|| AugmentError::GeneratorRejected("missing `messages` array".into()))?;
    items
        .iter()
        .map(|m| parse_message(m).map_err(|e| AugmentError::GeneratorRejected(e.to_string())))
        .collect()
}

// ---------------------------------------------------------------------------
// Derivations
// ---------------------------------------------------------------------------

struct SeedParts<'a> {
    target: TargetCall,
    tool: &'a ToolSpec,
    query: &'a str,
    call_index: usize,
}

fn seed_parts(seed: &CorpusRecord) -> Result<SeedParts<'_>, AugmentError> {
    let qt = classify_query_type(seed)?;
    if qt != QueryType::Type1 {
        return Err(AugmentError::NotType1(qt.to_string()));
    }
    let (call_index, _) = seed
        .first_tool_call()
        .ok_or_else(|| AugmentError::ToolNotFound("no tool call".into()))?;
    let target = TargetCall::of(seed).expect("seed has a call");
    let tool = seed
        .tool(&target.name)
        .ok_or_else(|| AugmentError::ToolNotFound(target.name.clone()))?;
    let query = seed.first_user_query().unwrap_or_default();
    Ok(SeedParts {
        target,
        tool,
        query,
        call_index,
    })
}

/// Turns a Type 1 seed into a Type 2 trajectory following `plan`.
pub fn derive_type2(
    seed: &CorpusRecord,
    plan: &AugmentationPlan,
    generator: Option<&dyn GeneratorClient>,
    lang: &LanguagePack,
) -> Result<CorpusRecord, AugmentError> {
    plan.check()?;
    let parts = seed_parts(seed)?;
    for field in &plan.fields_to_hide {
        if !parts.tool.required.contains(field) {
            return Err(AugmentError::NotRequired(field.clone()));
        }
        let located = parts
            .target
            .arguments
            .get(field)
            .is_some_and(|v| value_located(v, parts.query));
        if !located {
            return Err(AugmentError::FieldNotLocatable(field.clone()));
        }
    }

    let out = match generator {
        Some(client) => {
            let request = GeneratorRequest {
                prompt: build_prompt(seed, plan, "English"),
                source: record_to_json(seed),
            };
            let messages = client.generate(&request)?;
            let out = CorpusRecord {
                messages,
                tools: seed.tools.clone(),
                extra: seed.extra.clone(),
            };
            check_generated(&out, &parts)?;
            out
        }
        None => template_type2(seed, plan, &parts, lang)?,
    };
    Ok(out)
}

fn template_type2(
    seed: &CorpusRecord,
    plan: &AugmentationPlan,
    parts: &SeedParts<'_>,
    lang: &LanguagePack,
) -> Result<CorpusRecord, AugmentError> {
    let args = &parts.target.arguments;
    let hidden: Vec<&Value> = plan.fields_to_hide.iter().filter_map(|f| args.get(f)).collect();
    let kept_fields: Vec<&String> = args
        .keys()
        .filter(|k| !plan.fields_to_hide.contains(k) && value_located(&args[*k], parts.query))
        .collect();
    let kept: Vec<&Value> = kept_fields.iter().map(|k| &args[*k]).collect();

    let mut query = remove_values(parts.query, &hidden, &kept);
    let fallback = lang.fallback_query.replace("{capability}", &capability(parts.tool));
    match query.split_whitespace().count() {
        0 => query = fallback,
        1..=3 => query = format!("{}. {fallback}", query.trim_end_matches(['.', '!', '?', ','])),
        _ => {}
    }
    for field in &plan.fields_to_hide {
        if value_located(&args[field], &query) {
            return Err(AugmentError::FieldNotLocatable(field.clone()));
        }
    }
    for field in &kept_fields {
        if !value_located(&args[*field], &query) {
            return Err(AugmentError::FieldNotLocatable((*field).clone()));
        }
    }

    let mut first = seed.messages[0].clone();
    first.content = query;
    let mut messages = vec![first];
    let mut pending: Vec<String> = parts
        .tool
        .required
        .iter()
        .filter(|f| plan.fields_to_hide.contains(f))
        .cloned()
        .collect();
    for step in &plan.answer_schedule {
        messages.push(Message::assistant(lang.ask_text(parts.tool, &pending)));
        let answers: Vec<(String, Value)> =
            step.iter().map(|f| (f.clone(), args[f].clone())).collect();
        messages.push(Message::user(lang.answer_text(&answers)));
        pending.retain(|f| !step.contains(f));
    }
    messages.extend(seed.messages[parts.call_index..].iter().cloned());

    let out = CorpusRecord {
        messages,
        tools: seed.tools.clone(),
        extra: seed.extra.clone(),
    };
    if classify_query_type(&out)? != QueryType::Type2 || !validate_trajectory(&out).ok {
        return Err(AugmentError::FieldNotLocatable(
            plan.fields_to_hide.join(","),
        ));
    }
    debug_assert_eq!(turn_count(&out), turn_count(seed) + plan.answer_schedule.len());
    Ok(out)
}

fn check_generated(out: &CorpusRecord, parts: &SeedParts<'_>) -> Result<(), AugmentError> {
    let report = validate_trajectory(out);
    if !report.ok {
        let kinds: Vec<&str> = report.violations.iter().map(|v| v.kind.as_str()).collect();
        return Err(AugmentError::GeneratorRejected(kinds.join(", ")));
    }
    match classify_query_type(out) {
        Ok(QueryType::Type2) => {}
        Ok(other) => return Err(AugmentError::GeneratorRejected(format!("classified as {other}"))),
        Err(e) => return Err(AugmentError::GeneratorRejected(e.to_string())),
    }
    let same_call = TargetCall::of(out).is_some_and(|t| {
        t.name == parts.target.name && arguments_equal(&t.arguments, &parts.target.arguments)
    });
    if !same_call {
        return Err(AugmentError::GeneratorRejected("gold call changed".into()));
    }
    Ok(())
}

/// Removes the target tool and replaces the dialogue with query + rejection.
pub fn derive_type3(seed: &CorpusRecord, lang: &LanguagePack) -> Result<CorpusRecord, AugmentError> {
    let target = TargetCall::of(seed).ok_or_else(|| AugmentError::ToolNotFound("no tool call".into()))?;
    let removed = seed
        .tool(&target.name)
        .ok_or_else(|| AugmentError::ToolNotFound(target.name.clone()))?;
    let first = seed
        .messages
        .first()
        .filter(|m| m.role == Role::User)
        .ok_or(DialogueError::Unclassifiable)?;
    Ok(CorpusRecord {
        messages: vec![first.clone(), Message::assistant(lang.reject_text(removed))],
        tools: seed
            .tools
            .iter()
            .filter(|t| t.name != target.name)
            .cloned()
            .collect(),
        extra: seed.extra.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Easy,
    Hard,
    Excluded,
}

/// Assigns a Type 1 seed to a difficulty stratum by its required-field count.
pub fn stratify(seed: &CorpusRecord) -> Stratum {
    let Ok(parts) = seed_parts(seed) else {
        return Stratum::Excluded;
    };
    let stated = parts
        .tool
        .required
        .iter()
        .filter(|f| {
            parts
                .target
                .arguments
                .get(f.as_str())
                .is_some_and(|v| value_located(v, parts.query))
        })
        .count();
    if parts.tool.required.len() >= 3 && stated == parts.tool.required.len() {
        Stratum::Hard
    } else if stated >= 1 {
        Stratum::Easy
    } else {
        Stratum::Excluded
    }
}

// ---------------------------------------------------------------------------
// Triplet construction
// ---------------------------------------------------------------------------

/// Type 1 seed with its derived Type 2 and the two Type 3 variants.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub seed_id: String,
    pub difficulty: Difficulty,
    pub t1: CorpusRecord,
    pub t2: CorpusRecord,
    pub t3_from_t1: CorpusRecord,
    pub t3_from_t2: CorpusRecord,
    /// Number of slot-filling exchanges in `t2`.
    pub n_exchanges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub seed: u64,
    /// Fraction of eligible seeds used per stratum.
    pub sample_rate: f64,
    /// Randomize the Hard answer order instead of answering the first pending field.
    pub shuffle_hard_answers: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            sample_rate: 1.0,
            shuffle_hard_answers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentReport {
    pub seeds: usize,
    pub triplets: BTreeMap<String, usize>,
    pub excluded: usize,
    pub skipped: BTreeMap<String, usize>,
}

fn seed_id(record: &CorpusRecord, index: usize) -> String {
    match record.extra.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("s{index:05}"),
    }
}

fn build_triplet(
    index: usize,
    seed: &CorpusRecord,
    cfg: &AugmentConfig,
    lang: &LanguagePack,
    generator: Option<&dyn GeneratorClient>,
) -> Result<Option<Triplet>, AugmentError> {
    let difficulty = match stratify(seed) {
        Stratum::Excluded => return Ok(None),
        Stratum::Easy => Difficulty::Easy,
        Stratum::Hard => Difficulty::Hard,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    if rng.gen::<f64>() >= cfg.sample_rate {
        return Ok(None);
    }
    let parts = seed_parts(seed)?;
    let stated: Vec<String> = parts
        .tool
        .required
        .iter()
        .filter(|f| {
            parts
                .target
                .arguments
                .get(f.as_str())
                .is_some_and(|v| value_located(v, parts.query))
        })
        .cloned()
        .collect();
    let plan = match difficulty {
        Difficulty::Easy => AugmentationPlan::easy(stated.choose(&mut rng).expect("stated").clone()),
        Difficulty::Hard if cfg.shuffle_hard_answers => AugmentationPlan::hard_shuffled(stated, &mut rng),
        Difficulty::Hard => AugmentationPlan::hard(stated),
    };
    let t2 = derive_type2(seed, &plan, generator, lang)?;
    Ok(Some(Triplet {
        seed_id: seed_id(seed, index),
        difficulty,
        t3_from_t1: derive_type3(seed, lang)?,
        t3_from_t2: derive_type3(&t2, lang)?,
        n_exchanges: plan.answer_schedule.len(),
        t1: seed.clone(),
        t2,
    }))
}

/// Builds triplets for every eligible seed. Unusable seeds are counted in the
/// report by reason rather than failing the build.
pub fn build_triplets(
    seeds: &[CorpusRecord],
    cfg: &AugmentConfig,
    lang: &LanguagePack,
    generator: Option<&dyn GeneratorClient>,
) -> (Vec<Triplet>, AugmentReport) {
    let results: Vec<Result<Option<Triplet>, AugmentError>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, s)| build_triplet(i, s, cfg, lang, generator))
        .collect();
    let mut report = AugmentReport {
        seeds: seeds.len(),
        ..AugmentReport::default()
    };
    let mut triplets = Vec::new();
    for r in results {
        match r {
            Ok(Some(t)) => {
                *report.triplets.entry(t.difficulty.to_string()).or_default() += 1;
                triplets.push(t);
            }
            Ok(None) => report.excluded += 1,
            Err(e) => *report.skipped.entry(e.reason().into()).or_default() += 1,
        }
    }
    (triplets, report)
}

/// JSON view of a triplet, for the `augment` command output.
pub fn triplet_to_json(t: &Triplet) -> Value {
    json!({
        "seed_id": t.seed_id,
        "difficulty": t.difficulty,
        "n_exchanges": t.n_exchanges,
        "t1": record_to_json(&t.t1),
        "t2": record_to_json(&t.t2),
        "t3_from_t1": record_to_json(&t.t3_from_t1),
        "t3_from_t2": record_to_json(&t.t3_from_t2),
    })
}

pub fn triplet_from_json(v: &Value) -> Result<Triplet, crate::corpus::CorpusError> {
    use crate::corpus::{record_from_json, CorpusError};
    let field = |k: &str| {
        v.get(k).ok_or_else(|| CorpusError::Schema {
            record: 0,
            field: k.into(),
            message: "missing".into(),
        })
    };
    let schema = |k: &str, e: serde_json::Error| CorpusError::Schema {
        record: 0,
        field: k.into(),
        message: e.to_string(),
    };
    Ok(Triplet {
        seed_id: field("seed_id")?.as_str().unwrap_or_default().to_string(),
        difficulty: serde_json::from_value(field("difficulty")?.clone())
            .map_err(|e| schema("difficulty", e))?,
        n_exchanges: serde_json::from_value(field("n_exchanges")?.clone())
            .map_err(|e| schema("n_exchanges", e))?,
        t1: record_from_json(field("t1")?, 0)?,
        t2: record_from_json(field("t2")?, 0)?,
        t3_from_t1: record_from_json(field("t3_from_t1")?, 0)?,
        t3_from_t2: record_from_json(field("t3_from_t2")?, 0)?,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::dialogue::{ParamSpec, ToolCall};

    pub fn translate_tool() -> ToolSpec {
        ToolSpec::new("translate_text", "Text translation from one language to another.")
            .with_param("text", ParamSpec::new("string", "Text to translate"), true)
            .with_param("source_language", ParamSpec::new("string", "Source language of the text"), true)
            .with_param("target_language", ParamSpec::new("string", "Target language to translate into"), true)
    }

    pub fn translate_type1() -> CorpusRecord {
        let args = json!({
            "text": "Je suis vraiment heureux de te rencontrer",
            "source_language": "French",
            "target_language": "English"
        });
        CorpusRecord::new(
            vec![
                Message::user(
                    "Hi, please translate this French sentence into English. \"Je suis vraiment heureux de te rencontrer\"",
                ),
                Message::assistant_call(
                    "Translation begins.",
                    ToolCall::new("translate_text", args.as_object().unwrap()),
                ),
                Message::tool("translate_text", r#"{"translated_text": "I'm really happy to meet you"}"#),
                Message::assistant("It translates into \"I'm really happy to meet you\" in English."),
            ],
            vec![translate_tool()],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::dialogue::fixtures::{bmi_args, bmi_tool, bmi_type1};
    use crate::dialogue::{state_string, user_texts_before};

    #[test]
    fn bmi_hide_weight_matches_target_shape() {
        let lang = LanguagePack::default();
        let t2 = derive_type2(&bmi_type1(), &AugmentationPlan::easy("weight"), None, &lang).unwrap();
        assert_eq!(t2.messages[0].content, "Hi, I need to calculate my BMI. My height is 1.75 m.");
        assert_eq!(t2.messages[1].content, "Please tell me the weight in kilograms.");
        assert_eq!(t2.messages[2].content, "Weight is 70.");
        assert_eq!(classify_query_type(&t2).unwrap(), QueryType::Type2);
        assert_eq!(state_string(&t2).unwrap(), "1→2→3→4→5");
        assert_eq!(turn_count(&t2), turn_count(&bmi_type1()) + 1);
        let call = TargetCall::of(&t2).unwrap();
        assert!(arguments_equal(&call.arguments, &bmi_args()));
        assert_eq!(&t2.messages[3..], &bmi_type1().messages[1..]);
    }

    #[test]
    fn translate_hard_three_exchanges() {
        let lang = LanguagePack::default();
        let seed = translate_type1();
        assert_eq!(stratify(&seed), Stratum::Hard);
        let fields = translate_tool().required.clone();
        let t2 = derive_type2(&seed, &AugmentationPlan::hard(fields), None, &lang).unwrap();
        assert_eq!(state_string(&t2).unwrap(), "1→2→2→2→3→4→5");
        assert_eq!(turn_count(&t2), turn_count(&seed) + 3);
        assert_eq!(
            t2.messages[0].content,
            "Hi. I need help with a task: text translation from one language to another."
        );
        assert_eq!(
            t2.messages[1].content,
            "Please tell me the text to translate, the source language of the text, and the target language to translate into."
        );
        assert_eq!(t2.messages[5].content, "Please tell me the target language to translate into.");
        // Nothing about the call is stated before the last answer.
        let target = TargetCall::of(&seed).unwrap();
        assert!(target.stated_args(user_texts_before(&t2, 1)).is_empty());
    }

    #[test]
    fn empty_plan_fails() {
        let plan = AugmentationPlan {
            difficulty: Difficulty::Easy,
            fields_to_hide: vec![],
            answer_schedule: vec![],
        };
        let err = derive_type2(&bmi_type1(), &plan, None, &LanguagePack::default()).unwrap_err();
        assert_eq!(err, AugmentError::EmptyPlan);
    }

    #[test]
    fn unstated_field_is_not_locatable() {
        let mut seed = bmi_type1();
        seed.messages[0].content = "Calculate BMI, weight 70 kg, height one point seven five.".into();
        let err = derive_type2(&seed, &AugmentationPlan::easy("height"), None, &LanguagePack::default())
            .unwrap_err();
        assert!(matches!(err, AugmentError::NotType1(_) | AugmentError::FieldNotLocatable(_)));
    }

    #[test]
    fn type3_removes_tool() {
        let lang = LanguagePack::default();
        let t3 = derive_type3(&bmi_type1(), &lang).unwrap();
        assert!(t3.tools.is_empty());
        assert_eq!(t3.messages.len(), 2);
        assert_eq!(state_string(&t3).unwrap(), "1→1");
        assert_eq!(classify_query_type(&t3).unwrap(), QueryType::Type3);
        assert!(t3.messages[1].content.contains("calculate the Body Mass Index"));
        assert!(matches!(derive_type3(&t3, &lang), Err(AugmentError::ToolNotFound(_))));

        let mut two = bmi_type1();
        two.tools.push(translate_tool());
        let t3 = derive_type3(&two, &lang).unwrap();
        assert_eq!(t3.tools, vec![translate_tool()]);
    }

    #[test]
    fn stratify_by_required_count() {
        assert_eq!(stratify(&bmi_type1()), Stratum::Easy);
        let mut zero = bmi_type1();
        zero.tools = vec![ToolSpec::new("calculate_bmi", "BMI")
            .with_param("weight", crate::dialogue::ParamSpec::new("number", "w"), false)
            .with_param("height", crate::dialogue::ParamSpec::new("number", "h"), false)];
        assert_eq!(stratify(&zero), Stratum::Excluded);
        assert_eq!(bmi_tool().required.len(), 2);
    }

    #[test]
    fn template_is_deterministic() {
        let seeds = vec![bmi_type1(), translate_type1()];
        let cfg = AugmentConfig::default();
        let lang = LanguagePack::default();
        let (a, ra) = build_triplets(&seeds, &cfg, &lang, None);
        let (b, rb) = build_triplets(&seeds, &cfg, &lang, None);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].difficulty, Difficulty::Easy);
        assert_eq!(a[1].difficulty, Difficulty::Hard);
        assert_eq!(a[1].n_exchanges, 3);
        let back = triplet_from_json(&triplet_to_json(&a[1])).unwrap();
        assert_eq!(back, a[1]);
    }

    struct Canned(Vec<Message>);
    impl GeneratorClient for Canned {
        fn generate(&self, _request: &GeneratorRequest) -> Result<Vec<Message>, AugmentError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn generator_output_is_validated() {
        let lang = LanguagePack::default();
        let gold = crate::dialogue::fixtures::bmi_type2();
        let good = Canned(gold.messages.clone());
        let out = derive_type2(&bmi_type1(), &AugmentationPlan::easy("weight"), Some(&good), &lang).unwrap();
        assert_eq!(out.messages, gold.messages);

        // Echoing the source back is Type 1 and must be refused.
        let echo = Canned(bmi_type1().messages);
        let err = derive_type2(&bmi_type1(), &AugmentationPlan::easy("weight"), Some(&echo), &lang)
            .unwrap_err();
        assert!(matches!(err, AugmentError::GeneratorRejected(_)));
    }

    #[test]
    fn prompt_mentions_fields_and_language() {
        let p = build_prompt(&translate_type1(), &AugmentationPlan::hard(translate_tool().required), "English");
        assert!(p.contains("3 required"));
        assert!(p.contains("text, source_language, target_language"));
        assert!(p.contains("in English"));
        assert!(p.contains("\"translate_text\""));
    }
}
