//! Entity-type vocabulary, extracted entities and schema discovery.

use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::gateway::{ChatMessage, GatewayError, LlmGateway, Thread};
use crate::prompts;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("malformed schema file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema has no entity types")]
    NoTypes,
    #[error("empty entity type name")]
    EmptyTypeName,
    #[error("entity type {0:?} declared more than once")]
    DuplicateType(String),
    #[error("entity type {0:?} has no properties")]
    NoProperties(String),
    #[error("entity type {ty:?} declares property {property:?} more than once")]
    DuplicateProperty { ty: String, property: String },
    #[error("entity type {0:?} has a property with an empty name")]
    EmptyPropertyName(String),
}

#[derive(Debug, Error)]
pub enum SuggestError {
    #[error("document is empty")]
    EmptyDocument,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("invalid schema suggestion reply: {0}")]
    InvalidReply(String),
    #[error("relevance {relevance} for type {type_name:?} is outside [0, 1]")]
    RelevanceOutOfRange { type_name: String, relevance: f64 },
}

fn default_required() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub name: String,
    /// Missing required properties make an entity incomplete.
    #[serde(default = "default_required")]
    pub required: bool,
}

impl PropertySpec {
    pub fn required(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            required: true,
        }
    }

    pub fn optional(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            required: false,
        }
    }
}

/// A validated set of entity types, each with an ordered property list.
///
/// Type order is the declaration order of the schema file and is preserved
/// through serialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    name: String,
    types: IndexMap<String, Vec<PropertySpec>>,
}

impl Schema {
    pub fn new(
        name: impl Into<String>,
        types: impl IntoIterator<Item = (String, Vec<PropertySpec>)>,
    ) -> Result<Self, SchemaError> {
        let mut map = IndexMap::new();
        for (ty, props) in types {
            if map.contains_key(&ty) {
                return Err(SchemaError::DuplicateType(ty));
            }
            map.insert(ty, props);
        }
        let schema = Self {
            name: name.into(),
            types: map,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<(), SchemaError> {
        if self.types.is_empty() {
            return Err(SchemaError::NoTypes);
        }
        for (ty, props) in &self.types {
            if ty.trim().is_empty() {
                return Err(SchemaError::EmptyTypeName);
            }
            if props.is_empty() {
                return Err(SchemaError::NoProperties(ty.clone()));
            }
            let mut seen = HashSet::new();
            for p in props {
                if p.name.trim().is_empty() {
                    return Err(SchemaError::EmptyPropertyName(ty.clone()));
                }
                if !seen.insert(p.name.as_str()) {
                    return Err(SchemaError::DuplicateProperty {
                        ty: ty.clone(),
                        property: p.name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn types(&self) -> impl Iterator<Item = (&str, &[PropertySpec])> {
        self.types.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn type_names(&self) -> impl Iterator<Item = &str> {
        self.types.keys().map(String::as_str)
    }

    pub fn properties(&self, entity_type: &str) -> Option<&[PropertySpec]> {
        self.types.get(entity_type).map(Vec::as_slice)
    }

    pub fn contains_type(&self, entity_type: &str) -> bool {
        self.types.contains_key(entity_type)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }
}

/// Parses and validates a schema file.
pub fn load_schema(source: &str) -> Result<Schema, SchemaError> {
    let raw: RawSchema = serde_json::from_str(source)?;
    Schema::new(raw.name, raw.types.0)
}

#[derive(Serialize)]
struct SchemaRef<'a> {
    name: &'a str,
    types: &'a IndexMap<String, Vec<PropertySpec>>,
}

impl Serialize for Schema {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SchemaRef {
            name: &self.name,
            types: &self.types,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawSchema::deserialize(d)?;
        Schema::new(raw.name, raw.types.0).map_err(de::Error::custom)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    name: String,
    types: OrderedEntries,
}

/// JSON object read as an ordered entry list so repeated keys survive
/// deserialization and can be reported instead of silently overwritten.
struct OrderedEntries(Vec<(String, Vec<PropertySpec>)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping type names to property lists")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<PropertySpec>>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }

        d.deserialize_map(EntriesVisitor)
    }
}

/// A property value: a single string or a flat list of strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PropertyValue {
    Text(String),
    List(Vec<String>),
}

/// Explicit "no value" markers produced by extractors.
const UNKNOWN_MARKERS: &[&str] = &["unknown", "n/a", "na", "none", "null", "not specified", "not available"];

impl PropertyValue {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            PropertyValue::Text(s) => Some(s),
            PropertyValue::List(_) => None,
        }
    }

    /// All string items, a single value counting as a one-item list.
    pub fn items(&self) -> Vec<&str> {
        match self {
            PropertyValue::Text(s) => vec![s.as_str()],
            PropertyValue::List(v) => v.iter().map(String::as_str).collect(),
        }
    }

    /// True for empty strings, empty lists and explicit unknown markers.
    pub fn is_unfilled(&self) -> bool {
        let unfilled = |s: &str| {
            let n = s.trim().to_lowercase();
            n.is_empty() || UNKNOWN_MARKERS.contains(&n.as_str())
        };
        match self {
            PropertyValue::Text(s) => unfilled(s),
            PropertyValue::List(v) => v.iter().all(|s| unfilled(s)),
        }
    }

    /// Items joined by ", ".
    pub fn display(&self) -> String {
        self.items().join(", ")
    }
}

impl From<&str> for PropertyValue {
    fn from(s: &str) -> Self {
        PropertyValue::Text(s.to_owned())
    }
}

impl From<String> for PropertyValue {
    fn from(s: String) -> Self {
        PropertyValue::Text(s)
    }
}

impl From<Vec<&str>> for PropertyValue {
    fn from(v: Vec<&str>) -> Self {
        PropertyValue::List(v.into_iter().map(str::to_owned).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub piece: usize,
    pub iteration: usize,
    pub epoch: usize,
}

/// One extracted record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    #[serde(rename = "type")]
    pub entity_type: String,
    pub properties: IndexMap<String, PropertyValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Entity {
    pub fn new(entity_type: impl Into<String>) -> Self {
        Self {
            entity_type: entity_type.into(),
            properties: IndexMap::new(),
            provenance: None,
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<PropertyValue>) -> Self {
        self.properties.insert(key.into(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&PropertyValue> {
        self.properties.get(key)
    }

    /// The value of the property literally named `name`, when it is a
    /// filled single string.
    pub fn name(&self) -> Option<&str> {
        self.property_text("name")
    }

    /// Text of a single-valued property, `None` when absent or unfilled.
    pub fn property_text(&self, key: &str) -> Option<&str> {
        match self.properties.get(key) {
            Some(v) if !v.is_unfilled() => match v {
                PropertyValue::Text(s) => Some(s.as_str()),
                PropertyValue::List(l) => l.first().map(String::as_str),
            },
            _ => None,
        }
    }

    /// Plain-text rendering used by the text scores and name search:
    /// the type followed by every property value.
    pub fn render(&self) -> String {
        let mut parts = vec![self.entity_type.clone()];
        parts.extend(
            self.properties
                .values()
                .filter(|v| !v.is_unfilled())
                .map(PropertyValue::display),
        );
        parts.join(". ")
    }
}

/// Renders a whole entity list as one text, one entity per line.
pub fn render_entities(entities: &[Entity]) -> String {
    entities
        .iter()
        .map(Entity::render)
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationResult {
    pub conforms: bool,
    pub unknown_type: bool,
    pub missing_required: Vec<String>,
}

/// Checks an entity against the schema. Unknown types are flagged, not
/// rejected.
pub fn validate_entity(entity: &Entity, schema: &Schema) -> ValidationResult {
    let Some(props) = schema.properties(&entity.entity_type) else {
        return ValidationResult {
            conforms: false,
            unknown_type: true,
            missing_required: Vec::new(),
        };
    };
    let missing_required: Vec<String> = props
        .iter()
        .filter(|p| p.required)
        .filter(|p| entity.get(&p.name).is_none_or(PropertyValue::is_unfilled))
        .map(|p| p.name.clone())
        .collect();
    ValidationResult {
        conforms: missing_required.is_empty() && !entity.entity_type.is_empty(),
        unknown_type: false,
        missing_required,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSuggestion {
    #[serde(rename = "type")]
    pub type_name: String,
    pub relevance: f64,
    #[serde(default)]
    pub reasoning: String,
}

/// Asks the model which entity types suit `document`, most relevant first.
///
/// The reply must be a JSON array of `{"type", "relevance", "reasoning"}`
/// objects; any relevance outside `[0, 1]` rejects the whole reply.
pub fn suggest_schema(
    gateway: &LlmGateway,
    document: &str,
) -> Result<Vec<SchemaSuggestion>, SuggestError> {
    if document.trim().is_empty() {
        return Err(SuggestError::EmptyDocument);
    }
    let mut thread = Thread::new();
    let prompt = prompts::render(prompts::SCHEMA_SUGGESTION, &[("document", document)]);
    let reply = gateway.send(&mut thread, ChatMessage::user(prompt))?;
    let json = crate::extraction::find_json(&reply.content)
        .ok_or_else(|| SuggestError::InvalidReply("no JSON array found".into()))?;
    let mut suggestions: Vec<SchemaSuggestion> =
        serde_json::from_value(json).map_err(|e| SuggestError::InvalidReply(e.to_string()))?;
    for s in &suggestions {
        if !(0.0..=1.0).contains(&s.relevance) {
            return Err(SuggestError::RelevanceOutOfRange {
                type_name: s.type_name.clone(),
                relevance: s.relevance,
            });
        }
    }
    // stable: equal relevances keep reply order
    suggestions.sort_by(|a, b| b.relevance.total_cmp(&a.relevance));
    Ok(suggestions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, MockBackend};

    const FIG1: &str = r#"{
        "name": "toy",
        "types": {
            "Person": [{"name": "name"}, {"name": "birthDate"}, {"name": "worksFor"}, {"name": "jobTitle"}],
            "Insight": [{"name": "name"}, {"name": "description", "required": false}]
        }
    }"#;

    fn person(birth: Option<&str>) -> Entity {
        let mut e = Entity::new("Person")
            .with("name", "AI Enthusiast")
            .with("worksFor", "Tech Innovations Inc.")
            .with("jobTitle", "Data Scientist");
        if let Some(b) = birth {
            e = e.with("birthDate", b);
        }
        e
    }

    #[test]
    fn loads_two_type_schema() {
        let s = load_schema(FIG1).unwrap();
        assert_eq!(s.type_names().collect::<Vec<_>>(), ["Person", "Insight"]);
        let names: Vec<_> = s.properties("Person").unwrap().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["name", "birthDate", "worksFor", "jobTitle"]);
        assert!(s.properties("Person").unwrap().iter().all(|p| p.required));
        assert!(!s.properties("Insight").unwrap()[1].required);
    }

    #[test]
    fn rejects_empty_and_duplicate_types() {
        assert!(matches!(
            load_schema(r#"{"name":"x","types":{}}"#),
            Err(SchemaError::NoTypes)
        ));
        let dup = r#"{"name":"x","types":{"Person":[{"name":"name"}],"Person":[{"name":"jobTitle"}]}}"#;
        assert!(matches!(load_schema(dup), Err(SchemaError::DuplicateType(t)) if t == "Person"));
        let empty_props = r#"{"name":"x","types":{"Person":[]}}"#;
        assert!(matches!(load_schema(empty_props), Err(SchemaError::NoProperties(_))));
        let dup_prop = r#"{"name":"x","types":{"P":[{"name":"a"},{"name":"a"}]}}"#;
        assert!(matches!(load_schema(dup_prop), Err(SchemaError::DuplicateProperty { .. })));
        assert!(matches!(load_schema("{not json"), Err(SchemaError::Parse(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let s = load_schema(FIG1).unwrap();
        assert_eq!(load_schema(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn validates_entities() {
        let s = load_schema(FIG1).unwrap();
        let full = validate_entity(&person(Some("1990-01-01")), &s);
        assert!(full.conforms && full.missing_required.is_empty());

        let missing = validate_entity(&person(None), &s);
        assert!(!missing.conforms);
        assert_eq!(missing.missing_required, ["birthDate"]);

        let unknown_marker = validate_entity(&person(Some("Unknown")), &s);
        assert_eq!(unknown_marker.missing_required, ["birthDate"]);

        let org = validate_entity(&Entity::new("Organization").with("name", "Tech Innovations Inc."), &s);
        assert!(org.unknown_type);
        assert!(org.missing_required.is_empty());
    }

    fn mock_gateway(reply: &str) -> LlmGateway {
        LlmGateway::new(MockBackend::script([reply]), GatewayConfig::default())
    }

    #[test]
    fn suggestions_sorted_by_relevance() {
        let reply = r#"Here you go:
        [{"type":"Thing","relevance":0.2,"reasoning":"generic parent"},
         {"type":"Article","relevance":1.0,"reasoning":"the page is an article"},
         {"type":"SoftwareApplication","relevance":1.0,"reasoning":"tools mentioned"},
         {"type":"WebSite","relevance":1.0,"reasoning":"wikipedia"},
         {"type":"LearningResource","relevance":0.3,"reasoning":"style"}]"#;
        let out = suggest_schema(&mock_gateway(reply), "Information extraction is ...").unwrap();
        let names: Vec<_> = out.iter().map(|s| s.type_name.as_str()).collect();
        assert_eq!(names, ["Article", "SoftwareApplication", "WebSite", "LearningResource", "Thing"]);
    }

    #[test]
    fn suggestion_preconditions() {
        assert!(matches!(
            suggest_schema(&mock_gateway("[]"), "  "),
            Err(SuggestError::EmptyDocument)
        ));
        let bad = r#"[{"type":"Article","relevance":1.2,"reasoning":""}]"#;
        assert!(matches!(
            suggest_schema(&mock_gateway(bad), "doc"),
            Err(SuggestError::RelevanceOutOfRange { .. })
        ));
    }
}
