//! Reading and writing tool-call corpora and the paired preference dataset.
//!
//! Records follow the glaive function-calling layout:
//! `{"messages": [...], "tools": [{"type": "function", "function": {...}}]}`.
//! Output is canonical JSON (sorted keys, compact). Keys the model does not
//! know about, and explicit `null`s on optional fields, are carried in side
//! maps so that a parse/write cycle reproduces the input up to key order and
//! whitespace.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dialogue::{
    turn_count, CorpusRecord, JsonMap, Message, ParamSpec, QueryType, Role, ToolCall, ToolSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error in record {record}, field `{field}`: {message}")]
    Schema {
        record: usize,
        field: String,
        message: String,
    },
    #[error("pair `{pair_id}` violates `{rule}`")]
    Invariant { pair_id: String, rule: String },
}

impl CorpusError {
    fn parse_at(line_offset: usize, err: &serde_json::Error) -> Self {
        CorpusError::Parse {
            line: line_offset + err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    JsonArray,
    #[default]
    Jsonl,
}

impl CorpusFormat {
    /// Guesses the format from the first non-whitespace byte.
    pub fn sniff(text: &str) -> Self {
        if text.trim_start().starts_with('[') {
            CorpusFormat::JsonArray
        } else {
            CorpusFormat::Jsonl
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

/// What a pair teaches; one tag per training-data row family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lesson {
    #[serde(rename = "Prevent redundant slot-filling")]
    PreventRedundantSlotFilling,
    #[serde(rename = "Tool call accept")]
    ToolCallAccept,
    #[serde(rename = "Prevent slot hallucination")]
    PreventSlotHallucination,
    #[serde(rename = "Tool call reject")]
    ToolCallReject,
}

impl Lesson {
    pub fn as_str(self) -> &'static str {
        match self {
            Lesson::PreventRedundantSlotFilling => "Prevent redundant slot-filling",
            Lesson::ToolCallAccept => "Tool call accept",
            Lesson::PreventSlotHallucination => "Prevent slot hallucination",
            Lesson::ToolCallReject => "Tool call reject",
        }
    }
}

/// One preference instance: chosen and rejected trajectories sharing the
/// first user turn. There is deliberately no prompt field.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pair_id: String,
    pub query_type: QueryType,
    pub difficulty: Difficulty,
    pub lesson: Lesson,
    /// Pattern label, e.g. `type2/1→(2*M)→3→4→5`.
    pub pattern: String,
    pub chosen: CorpusRecord,
    pub rejected: CorpusRecord,
    pub loss_mask_chosen: Vec<bool>,
    pub loss_mask_rejected: Vec<bool>,
}

/// True exactly on assistant messages.
pub fn loss_mask(record: &CorpusRecord) -> Vec<bool> {
    record
        .messages
        .iter()
        .map(|m| m.role == Role::Assistant)
        .collect()
}

impl PairRecord {
    /// Checks the dataset invariants. Single-turn rejections paired against a
    /// single truncated call are the one legal case of equal turn counts.
    pub fn check_invariants(&self) -> Result<(), CorpusError> {
        let fail = |rule: &str| {
            Err(CorpusError::Invariant {
                pair_id: self.pair_id.clone(),
                rule: rule.to_string(),
            })
        };
        if self.loss_mask_chosen != loss_mask(&self.chosen)
            || self.loss_mask_rejected != loss_mask(&self.rejected)
        {
            return fail("loss_mask");
        }
        match (self.chosen.messages.first(), self.rejected.messages.first()) {
            (Some(c), Some(r)) if c == r => {}
            _ => return fail("shared_first_message"),
        }
        let (tc, tr) = (turn_count(&self.chosen), turn_count(&self.rejected));
        if tc == tr && self.query_type != QueryType::Type3 {
            return fail("turn_count_differs");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON codec
// ---------------------------------------------------------------------------

struct Fault {
    field: String,
    message: String,
}

fn fault(field: &str, message: impl Into<String>) -> Fault {
    Fault {
        field: field.to_string(),
        message: message.into(),
    }
}

fn as_object<'a>(v: &'a Value, field: &str) -> Result<&'a JsonMap, Fault> {
    v.as_object().ok_or_else(|| fault(field, "expected an object"))
}

/// Reads an optional string, moving an explicit null into `extra`.
fn opt_string(obj: &JsonMap, key: &str, extra: &mut JsonMap) -> Result<Option<String>, Fault> {
    match obj.get(key) {
        None => Ok(None),
        Some(Value::Null) => {
            extra.insert(key.into(), Value::Null);
            Ok(None)
        }
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(fault(key, "expected a string")),
    }
}

fn copy_unknown(obj: &JsonMap, known: &[&str], extra: &mut JsonMap) {
    for (k, v) in obj {
        if !known.contains(&k.as_str()) {
            extra.insert(k.clone(), v.clone());
        }
    }
}

fn tool_call_from_json(v: &Value) -> Result<ToolCall, Fault> {
    let obj = as_object(v, "tool_calls")?;
    let mut extra = JsonMap::new();
    let id = opt_string(obj, "id", &mut extra)?;
    let call_type = opt_string(obj, "type", &mut extra)?.unwrap_or_else(|| "function".into());
    let func = as_object(
        obj.get("function").ok_or_else(|| fault("function", "missing"))?,
        "function",
    )?;
    let function_name = func
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| fault("function.name", "missing or not a string"))?
        .to_string();
    let arguments = match func.get("arguments") {
        Some(Value::String(s)) => s.clone(),
        Some(obj @ Value::Object(_)) => obj.to_string(),
        None => "{}".to_string(),
        Some(_) => return Err(fault("function.arguments", "expected a JSON string")),
    };
    let mut function_extra = JsonMap::new();
    copy_unknown(func, &["name", "arguments"], &mut function_extra);
    if !function_extra.is_empty() {
        extra.insert("function".into(), Value::Object(function_extra));
    }
    copy_unknown(obj, &["id", "type", "function"], &mut extra);
    Ok(ToolCall {
        id,
        call_type,
        function_name,
        arguments,
        extra,
    })
}

fn tool_call_to_json(call: &ToolCall) -> Value {
    let mut func = JsonMap::new();
    func.insert("name".into(), Value::String(call.function_name.clone()));
    func.insert("arguments".into(), Value::String(call.arguments.clone()));
    let mut obj = JsonMap::new();
    if let Some(id) = &call.id {
        obj.insert("id".into(), Value::String(id.clone()));
    }
    obj.insert("type".into(), Value::String(call.call_type.clone()));
    for (k, v) in &call.extra {
        if k == "function" {
            if let Value::Object(fe) = v {
                for (fk, fv) in fe {
                    func.entry(fk.clone()).or_insert_with(|| fv.clone());
                }
            }
        } else {
            obj.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
    obj.insert("function".into(), Value::Object(func));
    Value::Object(obj)
}

fn message_from_json(v: &Value) -> Result<Message, Fault> {
    let obj = as_object(v, "messages")?;
    let role = match obj.get("role").and_then(Value::as_str) {
        Some("user") => Role::User,
        Some("assistant") => Role::Assistant,
        Some("tool") => Role::Tool,
        _ => return Err(fault("role", "expected one of user, assistant, tool")),
    };
    let mut extra = JsonMap::new();
    let content = opt_string(obj, "content", &mut extra)?.unwrap_or_default();
    let tool_calls = match obj.get("tool_calls") {
        None => None,
        Some(Value::Null) => {
            extra.insert("tool_calls".into(), Value::Null);
            None
        }
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(tool_call_from_json)
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Some(_) => return Err(fault("tool_calls", "expected an array")),
    };
    let tool_call_id = opt_string(obj, "tool_call_id", &mut extra)?;
    let name = opt_string(obj, "name", &mut extra)?;
    copy_unknown(
        obj,
        &["role", "content", "tool_calls", "tool_call_id", "name"],
        &mut extra,
    );

    if tool_calls.is_some() && role != Role::Assistant {
        return Err(fault("tool_calls", "only assistant messages may carry tool calls"));
    }
    if role == Role::Tool {
        if name.is_none() {
            return Err(fault("name", "tool messages must name the tool"));
        }
        if !matches!(serde_json::from_str::<Value>(&content), Ok(Value::Object(_))) {
            return Err(fault("content", "tool content must be a JSON object"));
        }
    }
    Ok(Message {
        role,
        content,
        tool_calls,
        tool_call_id,
        name,
        extra,
    })
}

fn message_to_json(msg: &Message) -> Value {
    let mut obj = JsonMap::new();
    obj.insert("role".into(), Value::String(msg.role.as_str().into()));
    if !(msg.content.is_empty() && msg.extra.contains_key("content")) {
        obj.insert("content".into(), Value::String(msg.content.clone()));
    }
    if let Some(calls) = &msg.tool_calls {
        obj.insert(
            "tool_calls".into(),
            Value::Array(calls.iter().map(tool_call_to_json).collect()),
        );
    }
    if let Some(id) = &msg.tool_call_id {
        obj.insert("tool_call_id".into(), Value::String(id.clone()));
    }
    if let Some(name) = &msg.name {
        obj.insert("name".into(), Value::String(name.clone()));
    }
    for (k, v) in &msg.extra {
        obj.entry(k.clone()).or_insert_with(|| v.clone());
    }
    Value::Object(obj)
}

fn param_from_json(v: &Value, field: &str) -> Result<ParamSpec, Fault> {
    let obj = as_object(v, field)?;
    let mut extra = JsonMap::new();
    let param_type = opt_string(obj, "type", &mut extra)?;
    let description = opt_string(obj, "description", &mut extra)?;
    copy_unknown(obj, &["type", "description"], &mut extra);
    Ok(ParamSpec {
        param_type,
        description,
        extra,
    })
}

fn param_to_json(p: &ParamSpec) -> Value {
    let mut obj = JsonMap::new();
    if let Some(t) = &p.param_type {
        obj.insert("type".into(), Value::String(t.clone()));
    }
    if let Some(d) = &p.description {
        obj.insert("description".into(), Value::String(d.clone()));
    }
    for (k, v) in &p.extra {
        obj.entry(k.clone()).or_insert_with(|| v.clone());
    }
    Value::Object(obj)
}

fn tool_from_json(v: &Value) -> Result<ToolSpec, Fault> {
    let obj = as_object(v, "tools")?;
    let func = as_object(
        obj.get("function").ok_or_else(|| fault("function", "missing"))?,
        "function",
    )?;
    let name = func
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| fault("function.name", "missing or not a string"))?
        .to_string();
    let mut function_extra = JsonMap::new();
    let description = opt_string(func, "description", &mut function_extra)?.unwrap_or_default();
    copy_unknown(func, &["name", "description", "parameters"], &mut function_extra);

    let mut tool = ToolSpec::new(name, description);
    tool.function_extra = function_extra;
    copy_unknown(obj, &["function"], &mut tool.extra);
    if tool.extra.get("type") == Some(&Value::String("function".into())) {
        tool.extra.remove("type");
    }

    let Some(params) = func.get("parameters") else {
        return Ok(tool);
    };
    let params = as_object(params, "parameters")?;
    tool.required = match params.get("required") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|r| r.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| fault("parameters.required", "expected an array of strings"))?,
        Some(_) => return Err(fault("parameters.required", "expected an array")),
    };
    match params.get("properties") {
        None | Some(Value::Null) => {}
        Some(Value::Object(props)) => {
            for (k, p) in props {
                tool.properties
                    .insert(k.clone(), param_from_json(p, "parameters.properties")?);
            }
        }
        // Array form: entries are named by a `name` key, else by position in `required`.
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                let mut item = as_object(item, "parameters.properties")?.clone();
                let key = match item.remove("name") {
                    Some(Value::String(n)) => n,
                    _ => tool.required.get(i).cloned().ok_or_else(|| {
                        fault("parameters.properties", "unnamed property beyond required list")
                    })?,
                };
                tool.properties.insert(
                    key,
                    param_from_json(&Value::Object(item), "parameters.properties")?,
                );
            }
        }
        Some(_) => return Err(fault("parameters.properties", "expected an object or array")),
    }
    copy_unknown(params, &["required", "properties"], &mut tool.parameters_extra);
    if tool.parameters_extra.get("type") == Some(&Value::String("object".into())) {
        tool.parameters_extra.remove("type");
    }
    Ok(tool)
}

fn tool_to_json(tool: &ToolSpec) -> Value {
    let mut params = JsonMap::new();
    params.insert("type".into(), Value::String("object".into()));
    params.insert(
        "required".into(),
        Value::Array(tool.required.iter().cloned().map(Value::String).collect()),
    );
    params.insert(
        "properties".into(),
        Value::Object(
            tool.properties
                .iter()
                .map(|(k, p)| (k.clone(), param_to_json(p)))
                .collect(),
        ),
    );
    for (k, v) in &tool.parameters_extra {
        params.insert(k.clone(), v.clone());
    }
    let mut func = JsonMap::new();
    func.insert("name".into(), Value::String(tool.name.clone()));
    func.insert("description".into(), Value::String(tool.description.clone()));
    func.insert("parameters".into(), Value::Object(params));
    for (k, v) in &tool.function_extra {
        func.entry(k.clone()).or_insert_with(|| v.clone());
    }
    let mut obj = JsonMap::new();
    obj.insert("type".into(), Value::String("function".into()));
    for (k, v) in &tool.extra {
        obj.insert(k.clone(), v.clone());
    }
    obj.insert("function".into(), Value::Object(func));
    Value::Object(obj)
}

fn record_from_json_inner(v: &Value) -> Result<CorpusRecord, Fault> {
    let obj = as_object(v, "record")?;
    let messages = match obj.get("messages") {
        Some(Value::Array(items)) => items
            .iter()
            .map(message_from_json)
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(fault("messages", "missing or not an array")),
    };
    let tools = match obj.get("tools") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(tool_from_json)
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(fault("tools", "expected an array")),
    };
    let mut record = CorpusRecord::new(messages, tools);
    copy_unknown(obj, &["messages", "tools"], &mut record.extra);
    Ok(record)
}

/// Decodes one record from a JSON value; `index` is used in error messages.
pub fn record_from_json(v: &Value, index: usize) -> Result<CorpusRecord, CorpusError> {
    record_from_json_inner(v).map_err(|f| CorpusError::Schema {
        record: index,
        field: f.field,
        message: f.message,
    })
}

pub fn record_to_json(record: &CorpusRecord) -> Value {
    let mut obj = JsonMap::new();
    obj.insert(
        "messages".into(),
        Value::Array(record.messages.iter().map(message_to_json).collect()),
    );
    obj.insert(
        "tools".into(),
        Value::Array(record.tools.iter().map(tool_to_json).collect()),
    );
    for (k, v) in &record.extra {
        obj.entry(k.clone()).or_insert_with(|| v.clone());
    }
    Value::Object(obj)
}

pub fn tool_spec_to_json(tool: &ToolSpec) -> Value {
    tool_to_json(tool)
}

pub fn tool_spec_from_json(v: &Value) -> Result<ToolSpec, CorpusError> {
    tool_from_json(v).map_err(|f| CorpusError::Schema {
        record: 0,
        field: f.field,
        message: f.message,
    })
}

pub fn message_json(msg: &Message) -> Value {
    message_to_json(msg)
}

pub fn parse_message(v: &Value) -> Result<Message, CorpusError> {
    message_from_json(v).map_err(|f| CorpusError::Schema {
        record: 0,
        field: f.field,
        message: f.message,
    })
}

/// Canonical single-line JSON of a record.
pub fn canonical_record(record: &CorpusRecord) -> String {
    record_to_json(record).to_string()
}

/// Iterates non-empty JSONL lines with their 0-based line offsets.
fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<Vec<CorpusRecord>, CorpusError> {
    match format {
        CorpusFormat::JsonArray => {
            let value: Value =
                serde_json::from_str(text).map_err(|e| CorpusError::parse_at(0, &e))?;
            let items = value.as_array().ok_or_else(|| CorpusError::Schema {
                record: 0,
                field: "<root>".into(),
                message: "expected a JSON array of records".into(),
            })?;
            items
                .iter()
                .enumerate()
                .map(|(i, v)| record_from_json(v, i))
                .collect()
        }
        CorpusFormat::Jsonl => jsonl_lines(text)
            .enumerate()
            .map(|(i, (line_no, line))| {
                let value: Value =
                    serde_json::from_str(line).map_err(|e| CorpusError::parse_at(line_no, &e))?;
                record_from_json(&value, i)
            })
            .collect(),
    }
}

pub fn write_corpus(records: &[CorpusRecord], format: CorpusFormat) -> String {
    match format {
        CorpusFormat::JsonArray => {
            let values: Vec<Value> = records.iter().map(record_to_json).collect();
            let mut out = serde_json::to_string_pretty(&Value::Array(values))
                .expect("JSON values always serialize");
            out.push('\n');
            out
        }
        CorpusFormat::Jsonl => {
            let mut out = String::new();
            for r in records {
                out.push_str(&canonical_record(r));
                out.push('\n');
            }
            out
        }
    }
}

fn expect_enum<T: for<'de> Deserialize<'de>>(obj: &JsonMap, key: &str) -> Result<T, Fault> {
    let v = obj.get(key).ok_or_else(|| fault(key, "missing"))?;
    serde_json::from_value(v.clone()).map_err(|e| fault(key, e.to_string()))
}

fn mask_from_json(obj: &JsonMap, key: &str) -> Result<Vec<bool>, Fault> {
    obj.get(key)
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(Value::as_bool).collect::<Option<Vec<_>>>())
        .ok_or_else(|| fault(key, "expected an array of booleans"))
}

pub fn pair_to_json(pair: &PairRecord) -> Value {
    let mut obj = JsonMap::new();
    obj.insert("pair_id".into(), Value::String(pair.pair_id.clone()));
    obj.insert("query_type".into(), serde_json::to_value(pair.query_type).unwrap());
    obj.insert("difficulty".into(), serde_json::to_value(pair.difficulty).unwrap());
    obj.insert("lesson".into(), Value::String(pair.lesson.as_str().into()));
    obj.insert("pattern".into(), Value::String(pair.pattern.clone()));
    obj.insert("chosen".into(), record_to_json(&pair.chosen));
    obj.insert("rejected".into(), record_to_json(&pair.rejected));
    obj.insert(
        "loss_mask_chosen".into(),
        Value::Array(pair.loss_mask_chosen.iter().map(|&b| Value::Bool(b)).collect()),
    );
    obj.insert(
        "loss_mask_rejected".into(),
        Value::Array(pair.loss_mask_rejected.iter().map(|&b| Value::Bool(b)).collect()),
    );
    Value::Object(obj)
}

fn pair_from_json_inner(obj: &JsonMap) -> Result<PairRecord, Fault> {
    let pair_id = obj
        .get("pair_id")
        .and_then(Value::as_str)
        .ok_or_else(|| fault("pair_id", "missing or not a string"))?
        .to_string();
    let pattern = obj
        .get("pattern")
        .and_then(Value::as_str)
        .ok_or_else(|| fault("pattern", "missing or not a string"))?
        .to_string();
    let chosen = record_from_json_inner(obj.get("chosen").ok_or_else(|| fault("chosen", "missing"))?)
        .map_err(|f| fault(&format!("chosen.{}", f.field), f.message))?;
    let rejected =
        record_from_json_inner(obj.get("rejected").ok_or_else(|| fault("rejected", "missing"))?)
            .map_err(|f| fault(&format!("rejected.{}", f.field), f.message))?;
    Ok(PairRecord {
        pair_id,
        query_type: expect_enum(obj, "query_type")?,
        difficulty: expect_enum(obj, "difficulty")?,
        lesson: expect_enum(obj, "lesson")?,
        pattern,
        chosen,
        rejected,
        loss_mask_chosen: mask_from_json(obj, "loss_mask_chosen")?,
        loss_mask_rejected: mask_from_json(obj, "loss_mask_rejected")?,
    })
}

/// Serializes pairs as JSONL, one canonical pair per line.
pub fn write_pairs(pairs: &[PairRecord]) -> Result<String, CorpusError> {
    let mut out = String::new();
    for pair in pairs {
        pair.check_invariants()?;
        out.push_str(&pair_to_json(pair).to_string());
        out.push('\n');
    }
    Ok(out)
}

pub fn read_pairs(text: &str) -> Result<Vec<PairRecord>, CorpusError> {
    jsonl_lines(text)
        .enumerate()
        .map(|(i, (line_no, line))| {
            let value: Value =
                serde_json::from_str(line).map_err(|e| CorpusError::parse_at(line_no, &e))?;
            let obj = value.as_object().ok_or_else(|| CorpusError::Schema {
                record: i,
                field: "<root>".into(),
                message: "expected an object".into(),
            })?;
            if obj.contains_key("prompt") {
                return Err(CorpusError::Invariant {
                    pair_id: obj
                        .get("pair_id")
                        .and_then(Value::as_str)
                        .unwrap_or("?")
                        .to_string(),
                    rule: "prompt".into(),
                });
            }
            let pair = pair_from_json_inner(obj).map_err(|f| CorpusError::Schema {
                record: i,
                field: f.field,
                message: f.message,
            })?;
            pair.check_invariants()?;
            Ok(pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::fixtures::{bmi_type1, bmi_type2};

    /// The BMI source sample in the exact corpus layout, properties in array form.
    const BMI_SOURCE: &str = r#"{
      "messages": [
        {"role": "user", "content": "Hi, I need to calculate my BMI. I weigh 70 kg and my height is 1.75 m."},
        {"role": "assistant", "content": "Sure, I can help you with that. Let's calculate your BMI.",
         "tool_calls": [{"id": null, "type": "function",
                         "function": {"name": "calculate_bmi", "arguments": "{\"weight\": 70, \"height\": 1.75}"}}]},
        {"role": "tool", "content": "{\"bmi\": 22.86}", "tool_call_id": null, "name": "calculate_bmi"},
        {"role": "assistant", "content": "Your Body Mass Index (BMI) is 22.86. This is considered a healthy weight for your height."}
      ],
      "tools": [
        {"type": "function", "function": {"name": "calculate_bmi", "description": "Calculate the Body Mass Index (BMI)",
          "parameters": {"type": "object", "required": ["weight", "height"],
            "properties": [{"type": "number", "description": "The weight in kilograms"},
                           {"type": "number", "description": "The height in meters"}]}}}
      ]
    }"#;

    #[test]
    fn parses_bmi_source_sample() {
        let records = parse_corpus(&format!("[{BMI_SOURCE}]"), CorpusFormat::JsonArray).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.messages.len(), 4);
        assert_eq!(r.tools.len(), 1);
        assert_eq!(r.tools[0].required, vec!["weight", "height"]);
        assert_eq!(
            r.tools[0].properties["weight"].description.as_deref(),
            Some("The weight in kilograms")
        );
        assert_eq!(r.tools[0].properties, bmi_type1().tools[0].properties);
        let call = r.messages[1].first_tool_call().unwrap();
        assert_eq!(call.arguments, r#"{"weight": 70, "height": 1.75}"#);
        assert!(crate::dialogue::arguments_equal(
            &call.parsed_arguments().unwrap(),
            &crate::dialogue::fixtures::bmi_args()
        ));
        assert_eq!(crate::dialogue::state_string(r).unwrap(), "1→3→4→5");
    }

    #[test]
    fn empty_array_is_empty() {
        assert!(parse_corpus("[]", CorpusFormat::JsonArray).unwrap().is_empty());
        assert!(parse_corpus("\n\n", CorpusFormat::Jsonl).unwrap().is_empty());
    }

    #[test]
    fn tool_message_without_name_is_schema_error() {
        let text = r#"{"messages": [{"role": "user", "content": "x"},
            {"role": "assistant", "content": "", "tool_calls": [{"function": {"name": "f", "arguments": "{}"}}]},
            {"role": "tool", "content": "{}"}], "tools": []}"#
            .replace('\n', " ");
        match parse_corpus(&text, CorpusFormat::Jsonl) {
            Err(CorpusError::Schema { field, .. }) => assert_eq!(field, "name"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn explicit_nulls_and_unknown_fields_survive() {
        let text = r#"{"messages":[{"role":"user","content":"hi","lang":"en"},{"content":"ok","role":"assistant","tool_calls":null}],"source":"glaive","tools":[]}"#;
        let records = parse_corpus(text, CorpusFormat::Jsonl).unwrap();
        let written = write_corpus(&records, CorpusFormat::Jsonl);
        let a: Value = serde_json::from_str(text).unwrap();
        let b: Value = serde_json::from_str(written.trim()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn object_form_round_trips_exactly() {
        let written = write_corpus(&[bmi_type1()], CorpusFormat::Jsonl);
        let reparsed = parse_corpus(&written, CorpusFormat::Jsonl).unwrap();
        assert_eq!(reparsed, vec![bmi_type1()]);
        assert_eq!(write_corpus(&reparsed, CorpusFormat::Jsonl), written);
        let pretty = write_corpus(&reparsed, CorpusFormat::JsonArray);
        assert_eq!(parse_corpus(&pretty, CorpusFormat::JsonArray).unwrap(), reparsed);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let line = canonical_record(&bmi_type1());
        let text = format!("{line}\n{}", &line[..line.len() / 2]);
        match parse_corpus(&text, CorpusFormat::Jsonl) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn sample_pair() -> PairRecord {
        let t2 = bmi_type2();
        let mut rejected = bmi_type1();
        rejected.messages[0] = t2.messages[0].clone();
        PairRecord {
            pair_id: "easy-type2-hallucination-0".into(),
            query_type: QueryType::Type2,
            difficulty: Difficulty::Easy,
            lesson: Lesson::PreventSlotHallucination,
            pattern: "type2/1→3→4→5".into(),
            loss_mask_chosen: loss_mask(&t2),
            loss_mask_rejected: loss_mask(&rejected),
            chosen: t2,
            rejected,
        }
    }

    #[test]
    fn pairs_round_trip_one_line_each() {
        let pair = sample_pair();
        let text = write_pairs(std::slice::from_ref(&pair)).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(text.lines().count(), 1);
        assert_eq!(read_pairs(&text).unwrap(), vec![pair]);
    }

    #[test]
    fn equal_turn_counts_rejected_on_write() {
        let mut pair = sample_pair();
        pair.rejected = pair.chosen.clone();
        pair.loss_mask_rejected = loss_mask(&pair.rejected);
        assert!(matches!(
            write_pairs(&[pair]),
            Err(CorpusError::Invariant { rule, .. }) if rule == "turn_count_differs"
        ));
    }

    #[test]
    fn prompt_field_is_refused() {
        let text = write_pairs(&[sample_pair()]).unwrap();
        let mut v: Value = serde_json::from_str(text.trim()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("prompt".into(), Value::String("hi".into()));
        match read_pairs(&v.to_string()) {
            Err(CorpusError::Invariant { rule, .. }) => assert_eq!(rule, "prompt"),
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn mask_mismatch_is_invariant_error() {
        let mut pair = sample_pair();
        pair.loss_mask_chosen[0] = true;
        assert!(matches!(
            write_pairs(&[pair]),
            Err(CorpusError::Invariant { rule, .. }) if rule == "loss_mask"
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pairs_and_records_round_trip(
                query in "\\PC{0,40}",
                reply in "[ -~]{0,30}",
                bmi in -1e6f64..1e6,
                id in "[a-z0-9-]{1,12}",
            ) {
                let mut pair = sample_pair();
                pair.pair_id = id;
                pair.chosen.messages[0].content = query.clone();
                pair.rejected.messages[0].content = query;
                pair.chosen.messages.last_mut().unwrap().content = reply;
                let n = pair.rejected.messages.len();
                pair.rejected.messages[n - 2].content = serde_json::json!({ "bmi": bmi }).to_string();

                let text = write_pairs(std::slice::from_ref(&pair)).unwrap();
                let back = read_pairs(&text).unwrap();
                prop_assert_eq!(&back, &vec![pair.clone()]);
                prop_assert_eq!(write_pairs(&back).unwrap(), text);

                let records = vec![pair.chosen.clone(), pair.rejected.clone()];
                for format in [CorpusFormat::Jsonl, CorpusFormat::JsonArray] {
                    let written = write_corpus(&records, format);
                    let parsed = parse_corpus(&written, format).unwrap();
                    prop_assert_eq!(&parsed, &records);
                    prop_assert_eq!(write_corpus(&parsed, format), written);
                }
            }
        }
    }
}
