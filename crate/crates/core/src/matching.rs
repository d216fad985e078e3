//! Needle identification criteria and the MINEA aggregate.
//!
//! Four criteria decide whether a needle made it into an extraction:
//! exact name (`n`), name substring of the serialized extraction (`ns`),
//! keyword overlap at a threshold (`k0.5`, ...) and an LLM verdict (`llm`).
//! Per type, the MINEA score is the best criterion's success ratio; the
//! overall score weights each type by its needle count.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::forge::Needle;
use crate::gateway::{ChatMessage, GatewayError, LlmGateway, Thread};
use crate::prompts;
use crate::schema::{render_entities, Entity};
use crate::text;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("verdict is neither yes nor no: {0:?}")]
    UnparseableVerdict(String),
    #[error("needle {0} is not annotated")]
    NotAnnotated(String),
    #[error("no result for needle {needle} under criterion {criterion}")]
    MissingPair { needle: String, criterion: Criterion },
    #[error("more than one result for needle {needle} under criterion {criterion}")]
    DuplicatePair { needle: String, criterion: Criterion },
    #[error("result refers to unknown needle {0}")]
    UnknownNeedle(String),
    #[error("duplicate needle id {0}")]
    DuplicateNeedle(String),
    #[error("no needles")]
    NoNeedles,
    #[error("no criteria")]
    NoCriteria,
    #[error("the llm criterion needs a gateway")]
    NoGateway,
    #[error("invalid criterion {0:?}")]
    InvalidCriterion(String),
    #[error("comparison needs at least two reports")]
    TooFewReports,
    #[error("reports were computed over different infusions ({0} vs {1})")]
    FingerprintMismatch(String, String),
    #[error("criterion table: {0}")]
    InvalidTable(String),
}

/// One identification criterion. Keyword thresholds are held in permille so
/// that the comparison `matched / total ≥ t` is exact integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Criterion {
    Name,
    NameSearch,
    Keywords(u16),
    Llm,
}

impl Criterion {
    /// Keyword criterion at threshold `t ∈ (0, 1]`, rounded to permille.
    pub fn keywords(t: f64) -> Result<Self, MatchError> {
        let p = (t * 1000.0).round();
        if !(t > 0.0 && t <= 1.0) || p < 1.0 {
            return Err(MatchError::InvalidCriterion(format!("k{t}")));
        }
        Ok(Criterion::Keywords(p as u16))
    }

    /// The default set: n, ns, k0.5, k0.6, k0.7, llm.
    pub fn standard() -> Vec<Criterion> {
        vec![
            Criterion::Name,
            Criterion::NameSearch,
            Criterion::Keywords(500),
            Criterion::Keywords(600),
            Criterion::Keywords(700),
            Criterion::Llm,
        ]
    }

    /// [`Criterion::standard`] without the LLM verdict.
    pub fn offline() -> Vec<Criterion> {
        Self::standard().into_iter().filter(|c| *c != Criterion::Llm).collect()
    }

    pub fn threshold(&self) -> Option<f64> {
        match self {
            Criterion::Keywords(p) => Some(*p as f64 / 1000.0),
            _ => None,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Criterion::Name => f.write_str("n"),
            Criterion::NameSearch => f.write_str("ns"),
            Criterion::Keywords(p) => {
                let s = format!("{}", *p as f64 / 1000.0);
                write!(f, "k{s}")
            }
            Criterion::Llm => f.write_str("llm"),
        }
    }
}

impl FromStr for Criterion {
    type Err = MatchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "n" => Ok(Criterion::Name),
            "ns" => Ok(Criterion::NameSearch),
            "llm" => Ok(Criterion::Llm),
            k if k.starts_with('k') => k[1..]
                .parse::<f64>()
                .map_err(|_| MatchError::InvalidCriterion(s.to_owned()))
                .and_then(Criterion::keywords),
            _ => Err(MatchError::InvalidCriterion(s.to_owned())),
        }
    }
}

impl Serialize for Criterion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Criterion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    None,
    Entity { index: usize, name: Option<String> },
    Keywords { index: usize, matched: Vec<String> },
    Verdict { reply: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub needle_id: String,
    pub criterion: Criterion,
    pub satisfied: bool,
    pub evidence: Evidence,
}

impl CriterionResult {
    fn new(needle: &Needle, criterion: Criterion, evidence: Evidence) -> Self {
        Self {
            needle_id: needle.id.clone(),
            criterion,
            satisfied: evidence != Evidence::None,
            evidence,
        }
    }
}

/// Exact name criterion: some entity's name equals the needle name after
/// normalization.
pub fn match_n(needle: &Needle, entities: &[Entity]) -> CriterionResult {
    let want = text::normalize(&needle.name);
    let hit = entities
        .iter()
        .enumerate()
        .find(|(_, e)| !want.is_empty() && e.name().is_some_and(|n| text::normalize(n) == want));
    let evidence = hit.map_or(Evidence::None, |(i, e)| Evidence::Entity {
        index: i,
        name: e.name().map(str::to_owned),
    });
    CriterionResult::new(needle, Criterion::Name, evidence)
}

/// Name search criterion: the normalized needle name occurs in the
/// normalized serialization of the whole extraction.
pub fn match_ns(needle: &Needle, entities: &[Entity]) -> CriterionResult {
    let found = text::contains_normalized(&render_entities(entities), &needle.name);
    let evidence = if found {
        let index = entities
            .iter()
            .position(|e| text::contains_normalized(&e.render(), &needle.name))
            .unwrap_or(0);
        Evidence::Entity {
            index,
            name: entities.get(index).and_then(|e| e.name().map(str::to_owned)),
        }
    } else {
        Evidence::None
    };
    CriterionResult::new(needle, Criterion::NameSearch, evidence)
}

/// Normalized value items of every filled property of `entity`.
fn entity_terms(entity: &Entity) -> HashSet<String> {
    entity
        .properties
        .values()
        .filter(|v| !v.is_unfilled())
        .flat_map(|v| v.items().into_iter().map(text::normalize).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Keyword criterion: some entity carries at least `t` of the needle's
/// distinct keywords among its normalized property values.
///
/// Panics if `criterion` is not a keyword criterion.
pub fn match_k(needle: &Needle, entities: &[Entity], criterion: Criterion) -> CriterionResult {
    let Criterion::Keywords(permille) = criterion else {
        panic!("match_k called with {criterion}");
    };
    let keywords: BTreeSet<String> = needle
        .keywords
        .iter()
        .map(|k| text::normalize(k))
        .filter(|k| !k.is_empty())
        .collect();
    let total = keywords.len();
    let mut best: Option<(usize, Vec<String>)> = None;
    if total > 0 {
        for (i, e) in entities.iter().enumerate() {
            let terms = entity_terms(e);
            let matched: Vec<String> = keywords.iter().filter(|k| terms.contains(*k)).cloned().collect();
            if matched.len() * 1000 >= permille as usize * total
                && best.as_ref().is_none_or(|(_, m)| matched.len() > m.len())
            {
                best = Some((i, matched));
            }
        }
    }
    let evidence = best.map_or(Evidence::None, |(index, matched)| Evidence::Keywords { index, matched });
    CriterionResult::new(needle, criterion, evidence)
}

/// Strict yes/no reading of a verdict: the whole reply, ignoring case,
/// surrounding whitespace, quotes and final punctuation, must be one word.
pub fn parse_verdict(reply: &str) -> Result<bool, MatchError> {
    let word = reply
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '*' || c == '`')
        .trim_end_matches(['.', '!'])
        .trim()
        .to_lowercase();
    match word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(MatchError::UnparseableVerdict(reply.to_owned())),
    }
}

fn identification_prompt(needle: &Needle, listing: &str) -> String {
    prompts::render(
        prompts::NEEDLE_IDENTIFICATION,
        &[
            ("name", &needle.name),
            ("entity_type", &needle.entity_type),
            ("description", &needle.description),
            ("keywords", &needle.keywords.join(", ")),
            ("entities", listing),
        ],
    )
}

/// LLM criterion. The entity listing is split into as few batches as the
/// context window allows; the needle counts as found on the first "yes".
pub fn match_llm(gateway: &LlmGateway, needle: &Needle, entities: &[Entity]) -> Result<CriterionResult, MatchError> {
    if !needle.is_annotated() {
        return Err(MatchError::NotAnnotated(needle.id.clone()));
    }
    let cfg = gateway.config();
    let overhead = gateway.estimate_tokens(&identification_prompt(needle, ""));
    let room = cfg.context_window_tokens.saturating_sub(cfg.max_output_tokens + overhead);
    let lines: Vec<String> = entities.iter().enumerate().map(|(i, e)| format!("{}. {}", i + 1, e.render())).collect();
    let mut batches: Vec<String> = Vec::new();
    let mut current = String::new();
    for line in &lines {
        let candidate = if current.is_empty() { line.clone() } else { format!("{current}\n{line}") };
        if !current.is_empty() && gateway.estimate_tokens(&candidate) > room {
            batches.push(std::mem::replace(&mut current, line.clone()));
        } else {
            current = candidate;
        }
    }
    batches.push(current);

    let mut last = String::new();
    let mut found = false;
    for batch in batches {
        let reply = gateway.send(&mut Thread::new(), ChatMessage::user(identification_prompt(needle, &batch)))?;
        found = parse_verdict(&reply.content)?;
        last = reply.content;
        if found {
            break;
        }
    }
    Ok(CriterionResult {
        needle_id: needle.id.clone(),
        criterion: Criterion::Llm,
        satisfied: found,
        evidence: Evidence::Verdict { reply: last },
    })
}

/// Runs every criterion in `criteria` for every needle.
pub fn evaluate(
    gateway: Option<&LlmGateway>,
    needles: &[Needle],
    entities: &[Entity],
    criteria: &[Criterion],
) -> Result<Vec<CriterionResult>, MatchError> {
    let mut out = Vec::with_capacity(needles.len() * criteria.len());
    for needle in needles {
        if !needle.is_annotated() {
            return Err(MatchError::NotAnnotated(needle.id.clone()));
        }
        for &c in criteria {
            out.push(match c {
                Criterion::Name => match_n(needle, entities),
                Criterion::NameSearch => match_ns(needle, entities),
                Criterion::Keywords(_) => match_k(needle, entities, c),
                Criterion::Llm => match_llm(gateway.ok_or(MatchError::NoGateway)?, needle, entities)?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    #[serde(rename = "type")]
    pub entity_type: String,
    pub needles: usize,
    /// Success ratio per criterion label, in criteria order.
    pub ratios: Vec<(Criterion, f64)>,
    pub minea: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineaReport {
    #[serde(default)]
    pub model: Option<String>,
    /// Fingerprint of the infusion the report was computed on.
    #[serde(default)]
    pub fingerprint: Option<String>,
    pub criteria: Vec<Criterion>,
    /// Sorted by type name.
    pub types: Vec<TypeScore>,
    pub overall: f64,
    pub needles: usize,
}

impl MineaReport {
    pub fn type_score(&self, entity_type: &str) -> Option<&TypeScore> {
        self.types.iter().find(|t| t.entity_type == entity_type)
    }

    /// Long-format table: type, criterion, ratio, needles, with a final
    /// MINEA row per type and an overall row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("type,criterion,ratio,needles\n");
        for t in &self.types {
            for (c, r) in &t.ratios {
                out.push_str(&format!("{},{c},{r:.4},{}\n", csv_field(&t.entity_type), t.needles));
            }
            out.push_str(&format!("{},minea,{:.4},{}\n", csv_field(&t.entity_type), t.minea, t.needles));
        }
        out.push_str(&format!("overall,minea,{:.4},{}\n", self.overall, self.needles));
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Aggregates criterion results into per-type and overall MINEA.
pub fn minea(results: &[CriterionResult], needles: &[Needle], criteria: &[Criterion]) -> Result<MineaReport, MatchError> {
    if needles.is_empty() {
        return Err(MatchError::NoNeedles);
    }
    if criteria.is_empty() {
        return Err(MatchError::NoCriteria);
    }
    let mut known: HashMap<&str, &Needle> = HashMap::new();
    for n in needles {
        if known.insert(n.id.as_str(), n).is_some() {
            return Err(MatchError::DuplicateNeedle(n.id.clone()));
        }
    }
    let wanted: HashSet<Criterion> = criteria.iter().copied().collect();
    let mut seen: HashMap<(&str, Criterion), bool> = HashMap::new();
    for r in results {
        if !known.contains_key(r.needle_id.as_str()) {
            return Err(MatchError::UnknownNeedle(r.needle_id.clone()));
        }
        if !wanted.contains(&r.criterion) {
            continue;
        }
        if seen.insert((r.needle_id.as_str(), r.criterion), r.satisfied).is_some() {
            return Err(MatchError::DuplicatePair {
                needle: r.needle_id.clone(),
                criterion: r.criterion,
            });
        }
    }

    // type -> (needles, satisfied per criterion)
    let mut per_type: BTreeMap<&str, (usize, Vec<usize>)> = BTreeMap::new();
    for n in needles {
        let entry = per_type
            .entry(n.entity_type.as_str())
            .or_insert_with(|| (0, vec![0; criteria.len()]));
        entry.0 += 1;
        for (ci, &c) in criteria.iter().enumerate() {
            match seen.get(&(n.id.as_str(), c)) {
                Some(true) => entry.1[ci] += 1,
                Some(false) => {}
                None => {
                    return Err(MatchError::MissingPair {
                        needle: n.id.clone(),
                        criterion: c,
                    })
                }
            }
        }
    }

    let types: Vec<TypeScore> = per_type
        .into_iter()
        .map(|(t, (count, sat))| {
            let ratios: Vec<(Criterion, f64)> = criteria
                .iter()
                .zip(&sat)
                .map(|(&c, &s)| (c, s as f64 / count as f64))
                .collect();
            let minea = ratios.iter().map(|r| r.1).fold(0.0, f64::max);
            TypeScore {
                entity_type: t.to_owned(),
                needles: count,
                ratios,
                minea,
            }
        })
        .collect();
    Ok(MineaReport {
        model: None,
        fingerprint: None,
        criteria: criteria.to_vec(),
        overall: weighted_overall(&types),
        needles: needles.len(),
        types,
    })
}

/// `Σ minea_t · count_t / Σ count_t`. Each `minea_t · count_t` is the
/// integer count of needles found by the type's best criterion, so the sum
/// is taken over exact integers.
fn weighted_overall(types: &[TypeScore]) -> f64 {
    let total: usize = types.iter().map(|t| t.needles).sum();
    if total == 0 {
        return 0.0;
    }
    let found: f64 = types.iter().map(|t| (t.minea * t.needles as f64).round()).sum();
    found / total as f64
}

/// Success ratios in published form: per type, a needle count and one ratio
/// per criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionTable {
    pub criteria: Vec<Criterion>,
    pub rows: Vec<CriterionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionRow {
    #[serde(rename = "type")]
    pub entity_type: String,
    pub needles: usize,
    pub ratios: Vec<f64>,
}

impl CriterionTable {
    /// Expands the table into synthetic needles and criterion results.
    /// Each ratio must be reproducible as `satisfied / needles` to within
    /// half a unit of its third decimal.
    pub fn expand(&self) -> Result<(Vec<Needle>, Vec<CriterionResult>), MatchError> {
        let mut needles = Vec::new();
        let mut results = Vec::new();
        for row in &self.rows {
            if row.needles == 0 || row.ratios.len() != self.criteria.len() {
                return Err(MatchError::InvalidTable(format!(
                    "row {} needs a positive count and {} ratios",
                    row.entity_type,
                    self.criteria.len()
                )));
            }
            let mut satisfied = Vec::with_capacity(row.ratios.len());
            for (&c, &r) in self.criteria.iter().zip(&row.ratios) {
                let s = (r * row.needles as f64).round();
                if !(0.0..=1.0).contains(&r) || (s / row.needles as f64 - r).abs() > 5e-4 {
                    return Err(MatchError::InvalidTable(format!(
                        "{} {c}: {r} is not a ratio over {} needles",
                        row.entity_type, row.needles
                    )));
                }
                satisfied.push(s as usize);
            }
            for i in 0..row.needles {
                let n = Needle::new(&row.entity_type, format!("{} {i}", row.entity_type), String::new());
                for (&c, &s) in self.criteria.iter().zip(&satisfied) {
                    results.push(CriterionResult {
                        needle_id: n.id.clone(),
                        criterion: c,
                        satisfied: i < s,
                        evidence: Evidence::None,
                    });
                }
                needles.push(n);
            }
        }
        Ok((needles, results))
    }

    pub fn minea(&self) -> Result<MineaReport, MatchError> {
        let (needles, results) = self.expand()?;
        minea(&results, &needles, &self.criteria)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub overall: f64,
}

/// Ranks models by overall MINEA, best first; ties keep input order. All
/// reports must come from the same infusion.
pub fn compare_models(reports: &[MineaReport]) -> Result<Vec<ModelScore>, MatchError> {
    if reports.len() < 2 {
        return Err(MatchError::TooFewReports);
    }
    let fp = |r: &MineaReport| r.fingerprint.clone().unwrap_or_else(|| "none".into());
    let first = fp(&reports[0]);
    if let Some(other) = reports.iter().map(fp).find(|f| *f != first) {
        return Err(MatchError::FingerprintMismatch(first, other));
    }
    let mut out: Vec<ModelScore> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| ModelScore {
            model: r.model.clone().unwrap_or_else(|| format!("model-{}", i + 1)),
            overall: r.overall,
        })
        .collect();
    out.sort_by(|a, b| b.overall.total_cmp(&a.overall));
    Ok(out)
}
