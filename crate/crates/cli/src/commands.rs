use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use needlegauge::chunker;
use needlegauge::extraction::extract_document;
use needlegauge::forge::{self, ForgeError, InfusedDocument, Needle};
use needlegauge::litm::{self, LitmResult};
use needlegauge::matching::{self, Criterion, CriterionResult, CriterionTable, MineaReport};
use needlegauge::metrics::{self, ScoreVector};
use needlegauge::schema::{self, Schema};
use needlegauge::{ExtractionRun, LlmGateway};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{self, InfusionManifest, Meta, RunArtifact};
use crate::config::{ensure_file, RunConfig};

/// Runs `f` for every input on the configured pool. Failures are logged
/// and do not stop the other inputs; returns whether all succeeded.
fn for_each_input<T: Sync>(cfg: &RunConfig, items: &[T], name: impl Fn(&T) -> String + Sync, f: impl Fn(&T) -> Result<()> + Sync) -> Result<bool> {
    let outcomes: Vec<Result<()>> = cfg.pool()?.install(|| items.par_iter().map(&f).collect());
    let mut ok = true;
    for (item, outcome) in items.iter().zip(outcomes) {
        if let Err(e) = outcome {
            log::error!("{}: {e:#}", name(item));
            ok = false;
        }
    }
    Ok(ok)
}

fn load_schema(path: &Path) -> Result<Schema> {
    schema::load_schema(&artifacts::read_text(path)?).with_context(|| format!("schema {}", path.display()))
}

#[derive(Serialize)]
struct SuggestionArtifact<'a> {
    meta: Meta,
    source: String,
    suggestions: &'a [schema::SchemaSuggestion],
}

pub fn suggest_schema(cfg: &RunConfig, docs: &[PathBuf], out: &Path) -> Result<bool> {
    let stems = artifacts::stems(docs)?;
    let items: Vec<(&PathBuf, &String)> = docs.iter().zip(&stems).collect();
    for_each_input(cfg, &items, |(p, _)| p.display().to_string(), |(path, stem)| {
        let text = artifacts::read_text(path)?;
        let gw = cfg.gateway(stem)?;
        let suggestions = schema::suggest_schema(&gw, &text)?;
        let artifact = SuggestionArtifact {
            meta: Meta::new(cfg, None),
            source: path.display().to_string(),
            suggestions: &suggestions,
        };
        artifacts::write_json(&out.join(format!("{stem}.suggestion.json")), &artifact)
    })
}

/// Text to extract from an input: a plain document, or the enriched text
/// of an infusion manifest together with its fingerprint.
fn extraction_input(path: &Path) -> Result<(String, Option<String>)> {
    if path.extension().is_some_and(|e| e == "json") {
        let m = InfusionManifest::load(path)?;
        Ok((m.document.enriched_text, m.meta.fingerprint))
    } else {
        Ok((artifacts::read_text(path)?, None))
    }
}

fn pieces(cfg: &RunConfig, gw: &LlmGateway, text: &str) -> Result<Vec<chunker::Piece>> {
    Ok(chunker::split_document_with(text, cfg.extraction.max_piece_tokens, gw.estimator())?)
}

pub fn extract(cfg: &RunConfig, inputs: &[PathBuf], schema_path: &Path, out: &Path, study: bool) -> Result<bool> {
    let schema = load_schema(schema_path)?;
    let stems = artifacts::stems(inputs)?;
    let items: Vec<(&PathBuf, &String)> = inputs.iter().zip(&stems).collect();
    for_each_input(cfg, &items, |(p, _)| p.display().to_string(), |(path, stem)| {
        let (text, fingerprint) = extraction_input(path)?;
        let gw = cfg.gateway(stem)?;
        let run = extract_document(&gw, &text, &schema, &cfg.extraction)?;
        log::info!("{stem}: {} entities in {} calls over {} epoch(s)", run.entities.len(), run.call_count(), run.epochs);
        artifacts::write_atomic(&out.join(format!("{stem}.transcript.jsonl")), run.transcript_jsonl().as_bytes())?;
        if study {
            let pieces = pieces(cfg, &gw, &text)?;
            let columns = (0..=cfg.extraction.iterations_per_piece)
                .map(|i| {
                    let sv = metrics::score_vector(&text, &pieces, &run.up_to_iteration(i), &schema, &cfg.thresholds)
                        .with_context(|| format!("scoring iteration {i}"))?;
                    Ok((i, sv))
                })
                .collect::<Result<Vec<_>>>()?;
            artifacts::write_atomic(
                &out.join(format!("{stem}.iterations.csv")),
                metrics::iteration_table_csv(&columns).as_bytes(),
            )?;
        }
        let artifact = RunArtifact {
            meta: Meta::new(cfg, fingerprint),
            source: path.display().to_string(),
            text_ref: forge::text_ref(&text),
            calls: run.call_count(),
            run,
        };
        artifacts::write_json(&out.join(format!("{stem}.run.json")), &artifact)
    })
}

/// Needle file: a bare array or an object with a `needles` array.
fn read_needles(path: &Path) -> Result<Vec<Needle>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NeedleFile {
        Bare(Vec<Needle>),
        Wrapped { needles: Vec<Needle> },
    }
    let needles = match artifacts::read_json::<NeedleFile>(path)? {
        NeedleFile::Bare(n) | NeedleFile::Wrapped { needles: n } => n,
    };
    Ok(needles.into_iter().map(Needle::with_id).collect())
}

pub fn infuse(cfg: &RunConfig, docs: &[PathBuf], needles_path: Option<&Path>, schema_path: Option<&Path>, out: &Path) -> Result<bool> {
    let given = needles_path.map(read_needles).transpose()?;
    if given.is_none() && cfg.needle_types.is_empty() {
        bail!("no needles: pass --needles or list needle_types in the config");
    }
    if let Some(path) = schema_path {
        let schema = load_schema(path)?;
        let types = given.iter().flatten().map(|n| &n.entity_type).chain(&cfg.needle_types);
        for t in types {
            if !schema.contains_type(t) {
                bail!("needle type {t} is not in schema {}", schema.name());
            }
        }
    }
    let stems = artifacts::stems(docs)?;
    let items: Vec<(&PathBuf, &String)> = docs.iter().zip(&stems).collect();
    for_each_input(cfg, &items, |(p, _)| p.display().to_string(), |(path, stem)| {
        let text = artifacts::read_text(path)?;
        let gw = cfg.gateway(stem)?;
        let raw = match &given {
            Some(n) => n.clone(),
            None => {
                let mut all = Vec::new();
                for t in &cfg.needle_types {
                    all.extend(forge::generate_needles(&gw, &text, t, cfg.needles_per_type)?);
                }
                all
            }
        };
        let needles = raw.iter().map(|n| forge::annotate_needle(&gw, n)).collect::<Result<Vec<_>, _>>()?;
        let seed = artifacts::document_seed(cfg.seed, stem);
        let infused: InfusedDocument = match forge::infuse(&text, &needles, cfg.fill, seed) {
            Ok(d) => d,
            Err(ForgeError::BelowFloor { ratio, min, infused }) => {
                log::warn!("{stem}: needles fill {ratio:.3} of the text, below the {min} floor; proceeding");
                *infused
            }
            Err(e) => return Err(e.into()),
        };
        let placed = forge::placed_needles(&needles, &infused);
        let fingerprint = infused.fingerprint();
        artifacts::write_atomic(&out.join(format!("{stem}.enriched.txt")), infused.enriched_text.as_bytes())?;
        artifacts::write_json(&out.join(format!("{stem}.needles.json")), &placed)?;
        let manifest = InfusionManifest {
            meta: Meta::new(cfg, Some(fingerprint)),
            source: path.display().to_string(),
            document: infused,
            needles: placed,
        };
        artifacts::write_json(&out.join(format!("{stem}.infused.json")), &manifest)
    })
}

#[derive(Serialize)]
struct DocumentScores {
    document: String,
    with_needles: Option<ScoreVector>,
    without_needles: Option<ScoreVector>,
}

#[derive(Serialize)]
struct EvaluationArtifact {
    meta: Meta,
    minea: MineaReport,
    scores: Vec<DocumentScores>,
    results: Vec<CriterionResult>,
}

/// One fingerprint standing for a set of infusions.
fn combined_fingerprint(fps: &[String]) -> String {
    if let [one] = fps {
        return one.clone();
    }
    let mut sorted = fps.to_vec();
    sorted.sort();
    hex::encode(Sha256::digest(sorted.join("\n").as_bytes()))[..16].to_owned()
}

pub struct EvaluateInputs<'a> {
    pub runs: &'a [PathBuf],
    pub infused: &'a [PathBuf],
    pub baselines: &'a [PathBuf],
    pub schema: Option<&'a Path>,
}

pub fn evaluate(cfg: &RunConfig, inputs: EvaluateInputs<'_>, out: &Path) -> Result<bool> {
    if inputs.runs.is_empty() || inputs.runs.len() != inputs.infused.len() {
        bail!("pass one --run per --infused manifest ({} runs, {} manifests)", inputs.runs.len(), inputs.infused.len());
    }
    if !inputs.baselines.is_empty() && inputs.baselines.len() != inputs.runs.len() {
        bail!("pass either no --baseline or one per --run");
    }
    for p in inputs.runs.iter().chain(inputs.infused).chain(inputs.baselines) {
        ensure_file(p)?;
    }
    let schema = inputs.schema.map(load_schema).transpose()?;
    let mut needles = Vec::new();
    let mut results = Vec::new();
    let mut fingerprints = Vec::new();
    let mut scores = Vec::new();
    let mut models = std::collections::BTreeSet::new();
    for (i, (run_path, man_path)) in inputs.runs.iter().zip(inputs.infused).enumerate() {
        let run: RunArtifact = artifacts::read_json(run_path)?;
        let manifest = InfusionManifest::load(man_path)?;
        let stem = artifacts::stem(man_path);
        let fp = manifest.meta.fingerprint.clone().expect("checked on load");
        if run.meta.fingerprint.as_deref() != Some(fp.as_str()) || run.text_ref != manifest.document.enriched_ref {
            return Err(anyhow!(
                "{} was not extracted from the infusion in {} (fingerprint {:?} vs {fp})",
                run_path.display(),
                man_path.display(),
                run.meta.fingerprint
            ));
        }
        models.insert(run.meta.model.clone());
        let doc_needles: Vec<Needle> = manifest
            .needles
            .iter()
            .map(|n| Needle {
                id: format!("{stem}/{}", n.id),
                ..n.clone()
            })
            .collect();
        let judge = if cfg.criteria.contains(&Criterion::Llm) { Some(cfg.gateway(&stem)?) } else { None };
        results.extend(matching::evaluate(judge.as_ref(), &doc_needles, &run.run.entities, &cfg.criteria)?);
        needles.extend(doc_needles);
        fingerprints.push(fp);

        if let Some(schema) = &schema {
            let gw = cfg.gateway(&stem)?;
            let score = |text: &str, run: &ExtractionRun| -> Option<ScoreVector> {
                let pieces = pieces(cfg, &gw, text).ok()?;
                metrics::score_vector(text, &pieces, run, schema, &cfg.thresholds)
                    .map_err(|e| log::warn!("{stem}: cannot score run: {e}"))
                    .ok()
            };
            let with_needles = score(&manifest.document.enriched_text, &run.run);
            let without_needles = match inputs.baselines.get(i) {
                Some(b) => {
                    let base: RunArtifact = artifacts::read_json(b)?;
                    let original = forge::strip_needles(&manifest.document)?;
                    if base.text_ref != forge::text_ref(&original) {
                        bail!("{} was not extracted from the original of {}", b.display(), man_path.display());
                    }
                    score(&original, &base.run)
                }
                None => None,
            };
            scores.push(DocumentScores {
                document: stem.clone(),
                with_needles,
                without_needles,
            });
        }
    }
    let fingerprint = combined_fingerprint(&fingerprints);
    let mut report = matching::minea(&results, &needles, &cfg.criteria)?;
    report.model = Some(match (cfg.model_label.clone(), models.len()) {
        (Some(l), _) => l,
        (None, 1) => models.into_iter().next().expect("one model"),
        (None, _) => cfg.label(),
    });
    report.fingerprint = Some(fingerprint.clone());
    write_report(cfg, report, scores, results, Some(fingerprint), out)?;
    Ok(true)
}

fn write_report(
    cfg: &RunConfig,
    minea: MineaReport,
    scores: Vec<DocumentScores>,
    results: Vec<CriterionResult>,
    fingerprint: Option<String>,
    out: &Path,
) -> Result<()> {
    log::info!("overall MINEA {:.4} over {} needles", minea.overall, minea.needles);
    artifacts::write_atomic(&out.join("minea.csv"), minea.to_csv().as_bytes())?;
    let artifact = EvaluationArtifact {
        meta: Meta::new(cfg, fingerprint),
        minea,
        scores,
        results,
    };
    artifacts::write_json(&out.join("evaluation.json"), &artifact)
}

/// MINEA from published per-criterion ratios instead of runs.
pub fn evaluate_table(cfg: &RunConfig, table: &Path, out: &Path) -> Result<bool> {
    let table: CriterionTable = artifacts::read_json(table)?;
    let mut report = table.minea()?;
    report.model = cfg.model_label.clone();
    write_report(cfg, report, Vec::new(), Vec::new(), None, out)?;
    Ok(true)
}

pub fn probe_litm(cfg: &RunConfig, docs: &[PathBuf], schema_path: &Path, n: usize, positions: Option<&[usize]>, out: &Path) -> Result<bool> {
    let schema = load_schema(schema_path)?;
    let stems = artifacts::stems(docs)?;
    let items: Vec<(&PathBuf, &String)> = docs.iter().zip(&stems).collect();
    let outcomes: Vec<Result<LitmResult>> = cfg.pool()?.install(|| {
        items
            .par_iter()
            .map(|(path, stem)| {
                let text = artifacts::read_text(path)?;
                let gw = cfg.gateway(stem)?;
                Ok(litm::probe(&gw, stem, &text, n, positions, &schema, &cfg.extraction)?)
            })
            .collect()
    });
    let mut ok = true;
    let mut results = Vec::new();
    for ((path, _), outcome) in items.iter().zip(outcomes) {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::error!("{}: {e:#}", path.display());
                ok = false;
            }
        }
    }
    if results.is_empty() {
        bail!("no document could be probed");
    }
    artifacts::write_atomic(&out.join("litm.csv"), litm::litm_csv(&results)?.as_bytes())?;
    #[derive(Serialize)]
    struct LitmArtifact<'a> {
        meta: Meta,
        mean: Vec<Option<f64>>,
        documents: &'a [LitmResult],
    }
    let artifact = LitmArtifact {
        meta: Meta::new(cfg, None),
        mean: litm::aggregate_probes(&results)?,
        documents: &results,
    };
    artifacts::write_json(&out.join("litm.json"), &artifact)?;
    Ok(ok)
}

pub fn compare(cfg: &RunConfig, reports: &[PathBuf], out: &Path) -> Result<bool> {
    #[derive(Deserialize)]
    struct Evaluation {
        minea: MineaReport,
    }
    let mut loaded = Vec::with_capacity(reports.len());
    for path in reports {
        let mut r = artifacts::read_json::<Evaluation>(path)?.minea;
        if r.model.is_none() {
            r.model = Some(artifacts::stem(path));
        }
        loaded.push(r);
    }
    let ranking = matching::compare_models(&loaded)?;
    let mut csv = String::from("model,minea\n");
    for m in &ranking {
        csv.push_str(&format!("{},{:.6}\n", m.model, m.overall));
    }
    artifacts::write_atomic(&out.join("comparison.csv"), csv.as_bytes())?;
    #[derive(Serialize)]
    struct ComparisonArtifact<'a> {
        meta: Meta,
        ranking: &'a [matching::ModelScore],
    }
    let fingerprint = loaded[0].fingerprint.clone();
    artifacts::write_json(
        &out.join("comparison.json"),
        &ComparisonArtifact {
            meta: Meta::new(cfg, fingerprint),
            ranking: &ranking,
        },
    )?;
    Ok(true)
}
