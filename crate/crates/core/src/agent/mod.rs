//! Failure analysis, requirement writing and data selection, plus the
//! retrieval-only comparison arm.

mod http;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::forge::lexicon::{self, Category};
use crate::scene::{self, Archetype, BevScene, Dataset, ObjectClass, Provenance, TimeOfDay, Weather};
use crate::taxonomy::{FailureContext, FailureRecord};

pub use http::{HttpAnalyzer, HttpClient, HttpConfig, TranscriptEntry};

pub const REQUIREMENTS_SCHEMA: &str = "corrloop.requirements";
pub const DEFAULT_TAU: f64 = 0.8;
pub const DEFAULT_DELTA: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 5;
/// Contacts this close to a lane edge or crossing count as map-related.
pub const MAP_ADJACENT_M: f32 = 1.0;

/// Vision-language analysis backend.
pub trait Analyzer {
    /// Confidence in `[0, 1]` per taxonomy label.
    fn classify(&self, record: &FailureRecord, labels: &[String]) -> Result<BTreeMap<String, f64>>;
    fn describe(&self, record: &FailureRecord, h_class: &BTreeSet<String>) -> Result<String>;
    /// Single-shot description with no prior classification.
    fn describe_direct(&self, record: &FailureRecord) -> Result<String>;
}

/// Turns an analysis into requirement text and keywords.
pub trait RequirementWriter {
    fn write(&self, h_class: &BTreeSet<String>, h_desc: &str) -> Result<(String, BTreeSet<String>)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    pub text: String,
    pub keywords: BTreeSet<String>,
    pub source_failure: String,
    pub h_class: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub scene_id: String,
    pub caption: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalRequirement {
    pub requirement: Requirement,
    pub selections: Vec<Selection>,
}

/// Rule-table analyzer: weather tags → Weather, a vehicle or pedestrian
/// collider → Foreground, a barrier or a contact near a lane edge or crossing
/// → Background.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockAnalyzer;

fn category_confidence(ctx: &FailureContext, c: Category) -> f64 {
    let hit = match c {
        Category::Weather => ctx.tags.time_of_day == TimeOfDay::Night || ctx.tags.weather == Weather::Rain,
        Category::Foreground => matches!(ctx.collider_class, ObjectClass::Vehicle | ObjectClass::Pedestrian),
        Category::Background => ctx.collider_class == ObjectClass::Barrier || ctx.edge_clearance <= MAP_ADJACENT_M,
    };
    hit as u8 as f64
}

fn clause(ctx: &FailureContext, c: Category) -> String {
    match c {
        Category::Weather => {
            let mut parts = Vec::new();
            if ctx.tags.time_of_day == TimeOfDay::Night {
                parts.push("low-visibility night scene");
            }
            if ctx.tags.weather == Weather::Rain {
                parts.push("rain on a wet road");
            }
            parts.join(", ")
        }
        Category::Foreground => match (ctx.archetype, ctx.collider_class) {
            (Some(Archetype::DenseCutIn), _) => "vehicle cut in with a lane change in dense traffic".into(),
            (_, ObjectClass::Pedestrian) => "pedestrian crossing in front of ego".into(),
            _ => format!("{} ahead", ctx.collider_caption),
        },
        Category::Background => {
            if ctx.collider_class == ObjectClass::Barrier {
                "construction barrier in the lane".into()
            } else if ctx.collider_class == ObjectClass::Pedestrian || ctx.archetype == Some(Archetype::PedestrianCrossing) {
                "collision on the crossing".into()
            } else {
                "collision near the road edge".into()
            }
        }
    }
}

impl Analyzer for MockAnalyzer {
    fn classify(&self, record: &FailureRecord, labels: &[String]) -> Result<BTreeMap<String, f64>> {
        Ok(labels
            .iter()
            .map(|l| (l.clone(), Category::from_label(l).map_or(0.0, |c| category_confidence(&record.context, c))))
            .collect())
    }

    fn describe(&self, record: &FailureRecord, h_class: &BTreeSet<String>) -> Result<String> {
        let ctx = &record.context;
        let mut parts: Vec<String> = Category::ALL
            .iter()
            .filter(|c| h_class.contains(c.label()))
            .map(|&c| clause(ctx, c))
            .filter(|s| !s.is_empty())
            .collect();
        parts.push(format!("planner failed to brake for {} at t={}", ctx.collider_caption, record.collision_time));
        Ok(parts.join("; "))
    }

    fn describe_direct(&self, record: &FailureRecord) -> Result<String> {
        Ok(format!("planner failed to brake for {} at t={}", record.context.collider_caption, record.collision_time))
    }
}

/// Requirement keywords are lexicon matches of the description restricted
/// to the classified categories.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockWriter;

impl RequirementWriter for MockWriter {
    fn write(&self, h_class: &BTreeSet<String>, h_desc: &str) -> Result<(String, BTreeSet<String>)> {
        let cats: Vec<Category> = h_class.iter().filter_map(|l| Category::from_label(l)).collect();
        let keywords = lexicon::extract(h_desc, Some(&cats));
        let phrase: Vec<String> = keywords.iter().map(|k| k.replace('_', " ")).collect();
        Ok((format!("collect scenes with {}", phrase.join(", ")), keywords))
    }
}

pub fn classify_failure(analyzer: &dyn Analyzer, record: &FailureRecord, labels: &[String], tau: f64) -> Result<BTreeSet<String>> {
    let conf = analyzer.classify(record, labels)?;
    Ok(labels.iter().filter(|l| conf.get(*l).is_some_and(|&q| q >= tau)).cloned().collect())
}

pub fn describe_failure(analyzer: &dyn Analyzer, record: &FailureRecord, h_class: &BTreeSet<String>) -> Result<String> {
    if h_class.is_empty() {
        return Err(Error::invalid("describe requires a non-empty class set"));
    }
    analyzer.describe(record, h_class)
}

pub fn generate_requirement(
    h_class: &BTreeSet<String>,
    h_desc: &str,
    writer: &dyn RequirementWriter,
    source_failure: &str,
) -> Result<Requirement> {
    if h_class.is_empty() || h_desc.trim().is_empty() {
        return Err(Error::invalid("requirement needs a class set and a description"));
    }
    let (text, keywords) = writer.write(h_class, h_desc)?;
    if keywords.is_empty() {
        return Err(Error::EmptyRequirement);
    }
    Ok(Requirement { text, keywords, source_failure: source_failure.into(), h_class: h_class.clone() })
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Top-`top_k` train scenes by keyword similarity at or above `delta`,
/// ordered by score then scene id.
pub fn formulate_requirements(req: &Requirement, train: &Dataset, delta: f64, top_k: usize) -> Result<MultimodalRequirement> {
    if train.is_empty() {
        return Err(Error::invalid("train set is empty"));
    }
    let mut scored: Vec<(f64, &BevScene)> =
        train.scenes.iter().map(|s| (jaccard(&s.keywords, &req.keywords), s)).filter(|(sc, _)| *sc >= delta && *sc > 0.0).collect();
    if scored.is_empty() {
        return Err(Error::NoMatches(Box::new(req.clone())));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    scored.truncate(top_k);
    Ok(MultimodalRequirement {
        requirement: req.clone(),
        selections: scored.into_iter().map(|(score, s)| Selection { scene_id: s.id.clone(), caption: s.caption.clone(), score }).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub tau: f64,
    pub delta: f64,
    /// Threshold used for the single relaxed retry when nothing matches.
    pub relaxed_delta: f64,
    pub top_k: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, delta: DEFAULT_DELTA, relaxed_delta: 0.25, top_k: DEFAULT_TOP_K }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub requirements: Vec<MultimodalRequirement>,
    /// Failures with no label above threshold, kept for the next round.
    pub unclassified: Vec<String>,
    /// Requirements no scene satisfied even after relaxing the threshold.
    pub unmet: Vec<Requirement>,
}

impl AgentOutcome {
    pub fn selection_count(&self) -> usize {
        self.requirements.iter().map(|r| r.selections.len()).sum()
    }
}

/// Classify → describe → write → select, for every failure in order.
pub fn run_agent(
    failures: &[FailureRecord],
    labels: &[String],
    analyzer: &dyn Analyzer,
    writer: &dyn RequirementWriter,
    train: &Dataset,
    cfg: &AgentConfig,
) -> Result<AgentOutcome> {
    let mut out = AgentOutcome::default();
    for rec in failures {
        let h_class = classify_failure(analyzer, rec, labels, cfg.tau)?;
        if h_class.is_empty() {
            out.unclassified.push(rec.scene_id.clone());
            continue;
        }
        let desc = describe_failure(analyzer, rec, &h_class)?;
        let req = match generate_requirement(&h_class, &desc, writer, &rec.scene_id) {
            Ok(r) => r,
            Err(Error::EmptyRequirement) => {
                out.unclassified.push(rec.scene_id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        match formulate_requirements(&req, train, cfg.delta, cfg.top_k) {
            Ok(m) => out.requirements.push(m),
            Err(Error::NoMatches(_)) => match formulate_requirements(&req, train, cfg.relaxed_delta, cfg.top_k) {
                Ok(m) => out.requirements.push(m),
                Err(Error::NoMatches(r)) => out.unmet.push(*r),
                Err(e) => return Err(e),
            },
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Category read off a free-text description: the majority lexicon category.
pub fn parse_category(text: &str) -> Option<Category> {
    let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
    for k in lexicon::extract(text, None) {
        if let Some(c) = lexicon::category_of(&k) {
            *counts.entry(c).or_default() += 1;
        }
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(c, _)| c)
}

/// Retrieval-only arm: for each failure, copy the train scenes whose keywords
/// best match the classes of the collider and of missed objects. Copies are
/// taken round-robin across failures until `budget` is reached.
pub fn aide_baseline(failures: &[FailureRecord], train: &Dataset, top_k: usize, budget: usize, tag: &str) -> Dataset {
    let mut per_failure: Vec<Vec<&BevScene>> = Vec::new();
    for f in failures {
        let mut issues: BTreeSet<String> = BTreeSet::new();
        issues.insert(f.context.collider_class.name().to_string());
        for d in f.output.detections.iter().filter(|d| !d.detected) {
            issues.insert(d.class.name().to_string());
        }
        let mut scored: Vec<(f64, &BevScene)> =
            train.scenes.iter().map(|s| (jaccard(&s.keywords, &issues), s)).filter(|(sc, _)| *sc > 0.0).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        per_failure.push(scored.into_iter().take(top_k).map(|(_, s)| s).collect());
    }
    let mut scenes = Vec::new();
    let depth = per_failure.iter().map(Vec::len).max().unwrap_or(0);
    'outer: for rank in 0..depth {
        for list in &per_failure {
            if scenes.len() >= budget {
                break 'outer;
            }
            if let Some(s) = list.get(rank) {
                let mut copy = (*s).clone();
                copy.id = format!("{tag}-{:05}-{}", scenes.len(), s.id);
                scenes.push(copy);
            }
        }
    }
    Dataset { name: tag.to_string(), provenance: Provenance::Retrieved, scenes }
}

pub fn save_requirements(path: &Path, reqs: &[MultimodalRequirement]) -> Result<()> {
    scene::write_jsonl(path, REQUIREMENTS_SCHEMA, json!({}), reqs)
}

pub fn load_requirements(path: &Path) -> Result<Vec<MultimodalRequirement>> {
    Ok(scene::read_jsonl(path, REQUIREMENTS_SCHEMA)?.1)
}
