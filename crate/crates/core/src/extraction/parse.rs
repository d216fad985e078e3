//! Lenient parsing of extraction replies.
//!
//! Two reply styles are understood: JSON (an array of entity objects, a
//! single object, or an object wrapping an `entities` / `@graph` array,
//! optionally inside code fences or prose) and indented `key: value` blocks
//! separated by blank lines or `- ` list markers. Blocks that cannot be read
//! as an entity are dropped and reported, never fatal.

use indexmap::IndexMap;
use serde_json::{Map, Value};

use crate::schema::{Entity, PropertyValue};

/// Replies meaning "nothing new".
const EMPTY_SENTINELS: &[&str] = &["[]", "no_new_entities", "no new entities", "none"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseOutcome {
    pub entities: Vec<Entity>,
    /// Raw text of every block that was dropped.
    pub dropped: Vec<String>,
}

pub fn parse_entities(reply: &str) -> Vec<Entity> {
    parse_entities_detailed(reply).entities
}

pub fn parse_entities_detailed(reply: &str) -> ParseOutcome {
    let trimmed = reply.trim();
    if trimmed.is_empty() || EMPTY_SENTINELS.contains(&trimmed.to_lowercase().trim_end_matches('.')) {
        return ParseOutcome::default();
    }
    let values = scan_json(trimmed);
    let mut out = ParseOutcome::default();
    if values.is_empty() {
        parse_key_value_blocks(trimmed, &mut out);
    } else {
        for (raw, v) in values {
            collect_json(v, &raw, &mut out);
        }
        // JSON fragments that failed to parse still count as dropped blocks
        for frag in unparsed_object_fragments(trimmed) {
            out.dropped.push(frag);
        }
    }
    for d in &out.dropped {
        log::warn!("dropped unparseable entity block: {}", d.chars().take(120).collect::<String>());
    }
    out
}

/// First JSON array or object found in `text`.
pub fn find_json(text: &str) -> Option<Value> {
    scan_json(text).into_iter().next().map(|(_, v)| v)
}

/// Every top-level JSON array/object embedded in `text`, in order. A `[`
/// that does not start a valid value is skipped so the objects inside a
/// damaged array are still tried one by one.
fn scan_json(text: &str) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let Some(off) = rest.find(['[', '{']) else { break };
        let start = i + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v)) => {
                let end = start + stream.byte_offset();
                out.push((text[start..end].to_owned(), v));
                i = end;
            }
            _ => i = start + 1,
        }
    }
    out
}

/// `{...}` spans (brace-balanced, string-aware) that are not valid JSON.
fn unparsed_object_fragments(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut start = 0;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    let frag = &text[start..=i];
                    if serde_json::from_str::<Value>(frag).is_err() {
                        out.push(frag.to_owned());
                    }
                }
            }
            _ => {}
        }
    }
    if depth > 0 {
        out.push(text[start..].to_owned());
    }
    out
}

fn collect_json(v: Value, raw: &str, out: &mut ParseOutcome) {
    match v {
        Value::Array(items) => {
            for item in items {
                match item {
                    Value::Object(m) => push_object(m, out),
                    other => out.dropped.push(other.to_string()),
                }
            }
        }
        Value::Object(mut m) => {
            for wrapper in ["entities", "@graph"] {
                if let Some(Value::Array(_)) = m.get(wrapper) {
                    let inner = m.remove(wrapper).unwrap();
                    collect_json(inner, raw, out);
                    return;
                }
            }
            push_object(m, out);
        }
        _ => out.dropped.push(raw.to_owned()),
    }
}

fn push_object(mut m: Map<String, Value>, out: &mut ParseOutcome) {
    let ty = m
        .remove("type")
        .or_else(|| m.remove("@type"))
        .and_then(|t| match t {
            Value::String(s) => Some(s),
            Value::Array(a) => a.into_iter().find_map(|x| x.as_str().map(str::to_owned)),
            _ => None,
        })
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty());
    let Some(ty) = ty else {
        out.dropped.push(Value::Object(m).to_string());
        return;
    };
    m.remove("@context");
    m.remove("provenance");
    let mut properties = IndexMap::new();
    // our own run format nests properties one level down
    if let Some(Value::Object(nested)) = m.remove("properties") {
        for (k, v) in nested {
            properties.insert(k, coerce(v));
        }
    }
    for (k, v) in m {
        properties.insert(k, coerce(v));
    }
    out.entities.push(Entity {
        entity_type: ty,
        properties,
        provenance: None,
    });
}

/// Flattens a JSON value into a string or string list. Nested objects are
/// kept by reference: their `name` when they have one.
fn coerce(v: Value) -> PropertyValue {
    fn scalar(v: Value) -> String {
        match v {
            Value::String(s) => s,
            Value::Null => String::new(),
            Value::Object(ref o) => match o.get("name") {
                Some(Value::String(n)) => n.clone(),
                _ => v.to_string(),
            },
            other => other.to_string(),
        }
    }
    match v {
        Value::Array(items) => PropertyValue::List(items.into_iter().map(scalar).collect()),
        other => PropertyValue::Text(scalar(other)),
    }
}

fn parse_key_value_blocks(text: &str, out: &mut ParseOutcome) {
    let mut blocks: Vec<Vec<&str>> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        if t.is_empty() || t.starts_with("```") {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
            continue;
        }
        if t.starts_with("- ") && !current.is_empty() && !line.starts_with(char::is_whitespace) {
            blocks.push(std::mem::take(&mut current));
        }
        current.push(line);
    }
    if !current.is_empty() {
        blocks.push(current);
    }

    for block in blocks {
        let mut ty = None;
        let mut properties = IndexMap::new();
        let mut ok = true;
        for line in &block {
            let t = line.trim().trim_start_matches("- ").trim();
            let Some((k, v)) = t.split_once(':') else {
                ok = false;
                break;
            };
            let key = k.trim().trim_matches(|c| c == '"' || c == '\'').to_owned();
            let val = v.trim();
            if key.is_empty() {
                ok = false;
                break;
            }
            if key == "type" || key == "@type" {
                ty = Some(val.trim_matches('"').to_owned()).filter(|s| !s.is_empty());
                continue;
            }
            properties.insert(key, kv_value(val));
        }
        match ty {
            Some(entity_type) if ok => out.entities.push(Entity {
                entity_type,
                properties,
                provenance: None,
            }),
            _ => out.dropped.push(block.join("\n")),
        }
    }
}

fn kv_value(val: &str) -> PropertyValue {
    let strip = |s: &str| s.trim().trim_matches(|c| c == '"' || c == '\'').to_owned();
    if let Some(inner) = val.strip_prefix('[').and_then(|v| v.strip_suffix(']')) {
        PropertyValue::List(inner.split(',').map(strip).filter(|s| !s.is_empty()).collect())
    } else {
        PropertyValue::Text(strip(val))
    }
}
