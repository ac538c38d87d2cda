//! Parser for the relaxed plan dialect emitted by planning models.
//!
//! The dialect is a forgiving superset of JSON:
//!
//! ```text
//! value  = string | number | list | object | bareword
//! list   = '[' [ value { ',' value } [','] ] ']'
//! object = '{' [ key ':' value { ',' key ':' value } [','] ] '}'
//! key    = string | bareword
//! string = '"' ... '"' | '\'' ... '\''
//! ```
//!
//! Barewords (`history_steps`, `<resource>-1`, `2h`, `7PM`) run until
//! whitespace or one of `[]{}:,"`. A bareword that reads as a number is a
//! number. Everything else about plans (task lookup, `<resource>-k`
//! promotion, time expressions, folding of stray task-level keys into `args`)
//! happens when the value tree is turned into a [`Plan`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::plan::{ArgValue, Plan, ResourceRef, TaskNode, TaskType, TimeSpec, NO_DEP};

const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ParseError {
    #[error("syntax error at byte {offset}: expected {}, found {found}", .expected.join(" | "))]
    Syntax { offset: usize, expected: Vec<String>, found: String },
    #[error("unknown task type '{name}' at byte {offset}")]
    UnknownTaskType { name: String, offset: usize },
    #[error("no parseable plan found in model output")]
    NoPlanFound,
}

impl ParseError {
    fn syntax(offset: usize, expected: &[&str], found: impl Into<String>) -> Self {
        ParseError::Syntax {
            offset,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: found.into(),
        }
    }
}

/// Loosely-typed value tree produced by the grammar.
#[derive(Debug, Clone, PartialEq)]
pub enum RelaxedValue {
    Str { text: String, quoted: bool },
    Number(f64),
    List(Vec<Spanned>),
    Object(Vec<(String, Spanned)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spanned {
    pub offset: usize,
    pub value: RelaxedValue,
}

impl RelaxedValue {
    /// Plain JSON view; barewords become strings.
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value;
        match self {
            RelaxedValue::Str { text, .. } => Value::String(text.clone()),
            RelaxedValue::Number(n) => crate::plan::number_to_json(*n),
            RelaxedValue::List(items) => Value::Array(items.iter().map(|s| s.value.to_json()).collect()),
            RelaxedValue::Object(pairs) => Value::Object(
                pairs.iter().map(|(k, v)| (k.clone(), v.value.to_json())).collect(),
            ),
        }
    }
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    depth: usize,
}

fn is_delim(c: char) -> bool {
    c.is_whitespace() || matches!(c, '[' | ']' | '{' | '}' | ':' | ',' | '"')
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str, pos: usize) -> Self {
        Self { src, pos, depth: 0 }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn found(&self) -> String {
        match self.peek() {
            None => "end of input".into(),
            Some(c) => format!("'{c}'"),
        }
    }

    fn value(&mut self) -> Result<Spanned, ParseError> {
        self.skip_ws();
        let offset = self.pos;
        let value = match self.peek() {
            Some('[') => self.nested(|c| c.list())?,
            Some('{') => self.nested(|c| c.object())?,
            Some(q @ ('"' | '\'')) => RelaxedValue::Str { text: self.string(q)?, quoted: true },
            Some(c) if !is_delim(c) => {
                let word = self.bareword();
                match parse_number(word) {
                    Some(n) => RelaxedValue::Number(n),
                    None => RelaxedValue::Str { text: word.to_string(), quoted: false },
                }
            }
            _ => return Err(ParseError::syntax(offset, &["value"], self.found())),
        };
        Ok(Spanned { offset, value })
    }

    fn nested(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<RelaxedValue, ParseError>,
    ) -> Result<RelaxedValue, ParseError> {
        if self.depth >= MAX_DEPTH {
            return Err(ParseError::syntax(self.pos, &["shallower nesting"], "nesting too deep"));
        }
        self.depth += 1;
        let out = f(self);
        self.depth -= 1;
        out
    }

    fn bareword(&mut self) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if is_delim(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.src[start..self.pos]
    }

    fn string(&mut self, quote: char) -> Result<String, ParseError> {
        let start = self.pos;
        self.bump();
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(ParseError::syntax(start, &[&format!("closing {quote}")], "end of input")),
                Some(c) if c == quote => return Ok(out),
                Some('\\') => {
                    let esc_at = self.pos - 1;
                    match self.bump() {
                        None => {
                            return Err(ParseError::syntax(esc_at, &["escape sequence"], "end of input"))
                        }
                        Some('n') => out.push('\n'),
                        Some('t') => out.push('\t'),
                        Some('r') => out.push('\r'),
                        Some('b') => out.push('\u{8}'),
                        Some('f') => out.push('\u{c}'),
                        Some('u') => out.push(self.unicode_escape(esc_at)?),
                        Some(other) => out.push(other),
                    }
                }
                Some(c) => out.push(c),
            }
        }
    }

    fn hex4(&mut self, esc_at: usize) -> Result<u32, ParseError> {
        let digits = self.src.get(self.pos..self.pos + 4).filter(|d| d.bytes().all(|b| b.is_ascii_hexdigit()));
        match digits {
            Some(d) => {
                self.pos += 4;
                Ok(u32::from_str_radix(d, 16).expect("hex digits"))
            }
            None => Err(ParseError::syntax(esc_at, &["four hex digits"], self.found())),
        }
    }

    fn unicode_escape(&mut self, esc_at: usize) -> Result<char, ParseError> {
        let hi = self.hex4(esc_at)?;
        if (0xD800..0xDC00).contains(&hi) && self.src[self.pos..].starts_with("\\u") {
            let save = self.pos;
            self.pos += 2;
            let lo = self.hex4(esc_at)?;
            if (0xDC00..0xE000).contains(&lo) {
                let cp = 0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00);
                return Ok(char::from_u32(cp).unwrap_or('\u{FFFD}'));
            }
            self.pos = save;
        }
        Ok(char::from_u32(hi).unwrap_or('\u{FFFD}'))
    }

    fn list(&mut self) -> Result<RelaxedValue, ParseError> {
        self.bump();
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == Some(']') {
                self.bump();
                return Ok(RelaxedValue::List(items));
            }
            items.push(self.value()?);
            self.skip_ws();
            match self.peek() {
                Some(',') => {
                    self.bump();
                }
                Some(']') => {}
                _ => return Err(ParseError::syntax(self.pos, &["','", "']'"], self.found())),
            }
        }
    }

    fn object(&mut self) -> Result<RelaxedValue, ParseError> {
        self.bump();
        let mut pairs: Vec<(String, Spanned)> = Vec::new();
        loop {
            self.skip_ws();
            let key_at = self.pos;
            let key = match self.peek() {
                Some('}') => {
                    self.bump();
                    return Ok(RelaxedValue::Object(pairs));
                }
                Some(q @ ('"' | '\'')) => self.string(q)?,
                Some(c) if !is_delim(c) => self.bareword().to_string(),
                _ => return Err(ParseError::syntax(key_at, &["key", "'}'"], self.found())),
            };
            if pairs.iter().any(|(k, _)| *k == key) {
                return Err(ParseError::syntax(key_at, &["unique key"], format!("duplicate key '{key}'")));
            }
            self.skip_ws();
            if self.peek() != Some(':') {
                return Err(ParseError::syntax(self.pos, &["':'"], self.found()));
            }
            self.bump();
            let value = self.value()?;
            pairs.push((key, value));
            self.skip_ws();
            match self.peek() {
                Some(',') => {
                    self.bump();
                }
                Some('}') => {}
                _ => return Err(ParseError::syntax(self.pos, &["','", "'}'"], self.found())),
            }
        }
    }
}

fn parse_number(word: &str) -> Option<f64> {
    let b = word.as_bytes();
    let mut i = 0;
    if b.first() == Some(&b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    if i == int_start {
        return None;
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == frac_start {
            return None;
        }
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return None;
        }
    }
    if i != b.len() {
        return None;
    }
    word.parse::<f64>().ok().filter(|n| n.is_finite())
}

/// Parses a complete relaxed value; trailing non-whitespace is an error.
pub fn parse_value(text: &str) -> Result<Spanned, ParseError> {
    let mut cur = Cursor::new(text, 0);
    let v = cur.value()?;
    cur.skip_ws();
    if cur.pos != text.len() {
        return Err(ParseError::syntax(cur.pos, &["end of input"], cur.found()));
    }
    Ok(v)
}

/// Parses relaxed plan text into a [`Plan`]. Validation is separate.
pub fn parse_relaxed(text: &str) -> Result<Plan, ParseError> {
    plan_from_value(&parse_value(text)?)
}

/// Returns the first `[`…`]` region of `llm_output` that parses as a plan.
pub fn extract_plan_text(llm_output: &str) -> Result<&str, ParseError> {
    extract_plan(llm_output).map(|(text, _)| text)
}

/// Like [`extract_plan_text`], also returning the parsed plan.
pub fn extract_plan(llm_output: &str) -> Result<(&str, Plan), ParseError> {
    for (start, _) in llm_output.match_indices('[') {
        let mut cur = Cursor::new(llm_output, start);
        let Ok(value) = cur.value() else { continue };
        if let Ok(plan) = plan_from_value(&value) {
            return Ok((&llm_output[start..cur.pos], plan));
        }
    }
    Err(ParseError::NoPlanFound)
}

/// Returns the first `{`…`}` region of `text` that parses as a relaxed object.
pub fn extract_object(text: &str) -> Option<Vec<(String, Spanned)>> {
    text.match_indices('{').find_map(|(start, _)| {
        let mut cur = Cursor::new(text, start);
        match cur.value() {
            Ok(Spanned { value: RelaxedValue::Object(pairs), .. }) => Some(pairs),
            _ => None,
        }
    })
}

fn plan_from_value(v: &Spanned) -> Result<Plan, ParseError> {
    let RelaxedValue::List(items) = &v.value else {
        return Err(ParseError::syntax(v.offset, &["'[' starting a task list"], describe(&v.value)));
    };
    items.iter().map(task_from_value).collect::<Result<Vec<_>, _>>().map(Plan::new)
}

fn describe(v: &RelaxedValue) -> String {
    match v {
        RelaxedValue::Str { text, .. } => format!("string '{text}'"),
        RelaxedValue::Number(n) => format!("number {n}"),
        RelaxedValue::List(_) => "list".into(),
        RelaxedValue::Object(_) => "object".into(),
    }
}

fn as_integer(v: &Spanned) -> Option<i64> {
    match &v.value {
        RelaxedValue::Number(n) if n.fract() == 0.0 && n.abs() < 9.0e15 => Some(*n as i64),
        RelaxedValue::Str { text, .. } => text.trim().parse().ok(),
        _ => None,
    }
}

fn task_from_value(v: &Spanned) -> Result<TaskNode, ParseError> {
    let RelaxedValue::Object(pairs) = &v.value else {
        return Err(ParseError::syntax(v.offset, &["task object"], describe(&v.value)));
    };
    let field = |name: &str| pairs.iter().find(|(k, _)| k == name).map(|(_, v)| v);

    let task_v = field("task").ok_or_else(|| ParseError::syntax(v.offset, &["'task' field"], "object without it"))?;
    let task = match &task_v.value {
        RelaxedValue::Str { text, .. } => TaskType::from_name(text).ok_or_else(|| ParseError::UnknownTaskType {
            name: text.trim().to_string(),
            offset: task_v.offset,
        })?,
        other => return Err(ParseError::syntax(task_v.offset, &["task name"], describe(other))),
    };

    let id_v = field("id").ok_or_else(|| ParseError::syntax(v.offset, &["'id' field"], "object without it"))?;
    let id = as_integer(id_v)
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| ParseError::syntax(id_v.offset, &["non-negative integer id"], describe(&id_v.value)))?;

    let dep = match field("dep") {
        None => vec![NO_DEP],
        Some(d) => match &d.value {
            RelaxedValue::List(items) => items
                .iter()
                .map(|x| {
                    as_integer(x).ok_or_else(|| ParseError::syntax(x.offset, &["integer dep"], describe(&x.value)))
                })
                .collect::<Result<Vec<_>, _>>()?,
            _ => vec![as_integer(d).ok_or_else(|| ParseError::syntax(d.offset, &["dep list"], describe(&d.value)))?],
        },
    };

    let mut args = BTreeMap::new();
    let mut put = |key: &str, value: &Spanned| -> Result<(), ParseError> {
        let converted = arg_from_value(key, value)?;
        if args.insert(key.to_string(), converted).is_some() {
            return Err(ParseError::syntax(value.offset, &["unique argument"], format!("duplicate argument '{key}'")));
        }
        Ok(())
    };
    if let Some(a) = field("args") {
        match &a.value {
            RelaxedValue::Object(items) => {
                for (k, val) in items {
                    put(k, val)?;
                }
            }
            other => return Err(ParseError::syntax(a.offset, &["args object"], describe(other))),
        }
    }
    // Task-level keys outside `args` are folded in.
    for (k, val) in pairs {
        if !matches!(k.as_str(), "task" | "id" | "dep" | "args") {
            put(k, val)?;
        }
    }
    Ok(TaskNode { task, id, dep, args })
}

fn arg_from_value(key: &str, v: &Spanned) -> Result<ArgValue, ParseError> {
    let time_slot = key == "time";
    Ok(match &v.value {
        RelaxedValue::Str { text, .. } => {
            if let Some(r) = ResourceRef::parse(text) {
                if time_slot { ArgValue::Time(TimeSpec::Resource(r)) } else { ArgValue::Ref(r) }
            } else if let Some(t) = TimeSpec::parse(text).filter(|_| time_slot) {
                ArgValue::Time(t)
            } else {
                ArgValue::Text(text.clone())
            }
        }
        RelaxedValue::Number(n) if time_slot && *n == 0.0 => ArgValue::Time(TimeSpec::Now),
        RelaxedValue::Number(n) => ArgValue::Number(*n),
        RelaxedValue::List(items) => {
            let values = items.iter().map(|i| arg_from_value(key, i)).collect::<Result<Vec<_>, _>>()?;
            if values.iter().all(|x| matches!(x, ArgValue::Text(_))) {
                ArgValue::TextList(
                    values
                        .into_iter()
                        .map(|x| match x {
                            ArgValue::Text(s) => s,
                            _ => unreachable!(),
                        })
                        .collect(),
                )
            } else {
                ArgValue::List(values)
            }
        }
        RelaxedValue::Object(_) => {
            return Err(ParseError::syntax(v.offset, &["argument value"], "nested object"));
        }
    })
}

/// Deterministic one-line strict JSON rendering of a plan.
pub fn serialize_strict(plan: &Plan) -> String {
    let mut out = String::from("[");
    for (i, t) in plan.tasks.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let args: serde_json::Map<String, serde_json::Value> =
            t.args.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
        write!(
            out,
            "{{\"task\":\"{}\",\"id\":{},\"dep\":{},\"args\":{}}}",
            t.task.name(),
            t.id,
            serde_json::Value::from(t.dep.clone()),
            serde_json::Value::Object(args)
        )
        .expect("writing to a String");
    }
    out.push(']');
    out
}
