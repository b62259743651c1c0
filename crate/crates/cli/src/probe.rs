//! `fgl probe`: run any subset of the behavior probes against one or more
//! checkpoints. Each checkpoint gets its own JSON report; the projection
//! probe adds one cross-checkpoint report. A probe that fails records its
//! error in the report instead of aborting the rest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use fgl_core::corpus::SequencePair;
use fgl_core::decoding::{generate, DecoderSettings};
use fgl_core::probes::{
    context_sensitivity, default_templates, function_space_vector, knowledge_probe,
    load_templates, load_terms, parameter_space_vector, perplexity, project_2d, ModelResponder,
    ProbeProvenance, ProbeReport, ProjectedCheckpoint,
};
use fgl_core::rng::{self, tag};
use fgl_core::training::{load_checkpoint, Checkpoint};

use crate::config::{Overrides, RunConfig};
use crate::usage;
use crate::workspace::{labels_for, LockGuard, Prepared};

pub const PROBES_DIR: &str = "probes";
pub const PROJECTION_FILE: &str = "projection.json";

const ALL_PROBES: [&str; 5] = ["ppl", "sensitivity", "knowledge", "diversity", "projection"];

/// A per-checkpoint report plus whatever went wrong while assembling it.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeDocument {
    #[serde(flatten)]
    pub report: ProbeReport,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<String, String>,
}

/// The cross-checkpoint projection report.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProjectionDocument {
    pub space: String,
    pub points: Vec<ProjectedCheckpoint>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<String, String>,
}

pub fn run(overrides: &Overrides, checkpoints: &[PathBuf], probes: Option<&str>) -> Result<()> {
    let cfg = RunConfig::resolve(overrides)?;
    let selected = parse_probe_list(probes)?;
    let _lock = LockGuard::acquire(cfg.out_dir())?;
    let prepared = Prepared::load(cfg.out_dir())?;
    let settings = cfg.decoder_settings();

    let split = cfg.probe.eval_split.as_deref().expect("resolved");
    // Data-dependent probes share the eval pairs; a missing cache is
    // reported per probe rather than aborting the run.
    let eval_pairs: Result<Vec<SequencePair>> = prepared.pairs(cfg.out_dir(), split);

    let dir = cfg.out_dir().join(PROBES_DIR);
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;

    let labels = labels_for(checkpoints);
    let mut loaded: Vec<(String, Option<Checkpoint>)> = Vec::new();
    for (path, label) in checkpoints.iter().zip(&labels) {
        let mut doc = ProbeDocument {
            report: ProbeReport::new(ProbeProvenance {
                checkpoint: path.display().to_string(),
                seed: cfg.seed(),
                decoder: settings,
            }),
            errors: BTreeMap::new(),
        };
        let checkpoint = match load_and_verify(path, &prepared) {
            Ok(ck) => Some(ck),
            Err(e) => {
                doc.errors.insert("checkpoint".into(), format!("{e:#}"));
                None
            }
        };
        if let Some(ck) = &checkpoint {
            probe_one(&cfg, &prepared, &settings, &selected, split, &eval_pairs, ck, &mut doc);
        }
        write_json(&dir.join(format!("{label}.json")), &doc)?;
        loaded.push((label.clone(), checkpoint));
    }

    if selected.contains(&"projection") {
        let doc = projection_document(&cfg, &eval_pairs, &loaded);
        write_json(&dir.join(PROJECTION_FILE), &doc)?;
    }
    cfg.persist(&dir)?;
    println!(
        "wrote {} probe report(s) to {}",
        checkpoints.len() + usize::from(selected.contains(&"projection")),
        dir.display()
    );
    Ok(())
}

fn parse_probe_list(arg: Option<&str>) -> Result<Vec<&'static str>> {
    let Some(arg) = arg else {
        return Ok(ALL_PROBES.to_vec());
    };
    let mut out = Vec::new();
    for name in arg.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match ALL_PROBES.iter().find(|p| **p == name) {
            Some(p) => {
                if !out.contains(p) {
                    out.push(*p);
                }
            }
            None => usage!(
                "unknown probe {name:?} (expected a comma-separated subset of {})",
                ALL_PROBES.join(", ")
            ),
        }
    }
    if out.is_empty() {
        usage!("--probes selected nothing");
    }
    Ok(out)
}

fn load_and_verify(path: &Path, prepared: &Prepared) -> Result<Checkpoint> {
    let ck = load_checkpoint(&crate::train::checkpoint_file(path))?;
    if ck.meta.vocab_checksum != prepared.vocab.checksum() {
        anyhow::bail!(
            "checkpoint {} was trained against a different vocabulary",
            path.display()
        );
    }
    Ok(ck)
}

#[allow(clippy::too_many_arguments)]
fn probe_one(
    cfg: &RunConfig,
    prepared: &Prepared,
    settings: &DecoderSettings,
    selected: &[&'static str],
    split: &str,
    eval_pairs: &Result<Vec<SequencePair>>,
    ck: &Checkpoint,
    doc: &mut ProbeDocument,
) {
    let config = &ck.meta.config;
    let params = &ck.params;
    let mut record = |key: &str, err: String| {
        doc.errors.insert(key.to_string(), err);
    };

    if selected.contains(&"ppl") {
        match eval_pairs {
            Ok(pairs) => match perplexity(params, config, pairs) {
                Ok(ppl) => {
                    doc.report.perplexity.insert(split.to_string(), ppl);
                }
                Err(e) => record("ppl", e.to_string()),
            },
            Err(e) => record("ppl", format!("{e:#}")),
        }
    }
    if selected.contains(&"sensitivity") {
        let drop_rate = cfg.probe.drop_rate.expect("resolved");
        match eval_pairs {
            Ok(pairs) => {
                match context_sensitivity(params, config, pairs, drop_rate, cfg.seed()) {
                    Ok(report) => doc.report.sensitivity = Some(report),
                    Err(e) => record("sensitivity", e.to_string()),
                }
            }
            Err(e) => record("sensitivity", format!("{e:#}")),
        }
    }
    if selected.contains(&"knowledge") {
        match knowledge_report(cfg, prepared, settings, ck) {
            Ok(report) => doc.report.knowledge = Some(report),
            Err(e) => record("knowledge", format!("{e:#}")),
        }
    }
    if selected.contains(&"diversity") {
        let budget = cfg.probe.diversity_contexts.expect("resolved");
        let result = eval_pairs
            .as_ref()
            .map_err(|e| anyhow::anyhow!("{e:#}"))
            .and_then(|pairs| {
                let mut rng = rng::stream(cfg.seed(), &[tag::GENERATE]);
                let mut responses = Vec::new();
                for pair in pairs.iter().take(budget) {
                    responses.push(generate(params, config, &pair.context, settings, &mut rng)?);
                }
                Ok(fgl_core::decoding::diversity_metrics(&responses)?)
            });
        match result {
            Ok(report) => doc.report.diversity = Some(report),
            Err(e) => record("diversity", format!("{e:#}")),
        }
    }
}

fn knowledge_report(
    cfg: &RunConfig,
    prepared: &Prepared,
    settings: &DecoderSettings,
    ck: &Checkpoint,
) -> Result<fgl_core::probes::KnowledgeReport> {
    let terms_path = cfg
        .probe
        .terms
        .as_ref()
        .context("no knowledge terms configured (set probe.terms)")?;
    let terms = load_terms(terms_path)?;
    let templates = match &cfg.probe.templates {
        Some(path) => load_templates(path)?,
        None => default_templates(),
    };
    let style = cfg.trigger_style()?;
    let mut responder =
        ModelResponder::new(&ck.params, &ck.meta.config, prepared.codec(), *settings);
    Ok(knowledge_probe(
        &mut responder,
        &terms,
        &templates,
        style,
        cfg.probe.samples_per_trigger.expect("resolved"),
    )?)
}

fn projection_document(
    cfg: &RunConfig,
    eval_pairs: &Result<Vec<SequencePair>>,
    loaded: &[(String, Option<Checkpoint>)],
) -> ProjectionDocument {
    let space = cfg.probe.projection_space.as_deref().expect("resolved");
    let mut doc = ProjectionDocument {
        space: space.to_string(),
        points: Vec::new(),
        errors: BTreeMap::new(),
    };
    let mut labels = Vec::new();
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    for (label, checkpoint) in loaded {
        let Some(ck) = checkpoint else {
            doc.errors
                .insert(label.clone(), "checkpoint failed to load".into());
            continue;
        };
        let vector = match space {
            "parameter" => Ok(parameter_space_vector(&ck.params)),
            "function" => match eval_pairs {
                Ok(pairs) => function_space_vector(
                    &ck.params,
                    &ck.meta.config,
                    &[pairs.as_slice()],
                    cfg.probe.token_budget.expect("resolved"),
                )
                .map_err(|e| anyhow::anyhow!(e)),
                Err(e) => Err(anyhow::anyhow!("{e:#}")),
            },
            other => {
                doc.errors.insert(
                    "projection".into(),
                    format!("unknown projection space {other:?} (expected parameter or function)"),
                );
                return doc;
            }
        };
        match vector {
            Ok(v) => {
                labels.push(label.clone());
                vectors.push(v);
            }
            Err(e) => {
                doc.errors.insert(label.clone(), format!("{e:#}"));
            }
        }
    }
    if vectors.len() >= 2 && vectors.iter().any(|v| v.len() != vectors[0].len()) {
        doc.errors.insert(
            "projection".into(),
            "checkpoints have different parameter shapes; project them in function space".into(),
        );
        return doc;
    }
    match project_2d(&vectors) {
        Ok(points) => {
            doc.points = labels
                .into_iter()
                .zip(points)
                .map(|(label, (x, y))| ProjectedCheckpoint { label, x, y })
                .collect();
        }
        Err(e) => {
            doc.errors.insert("projection".into(), e.to_string());
        }
    }
    doc
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
