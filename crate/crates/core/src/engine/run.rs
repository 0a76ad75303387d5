use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::EngineConfig;
use super::distribution::{hellinger, keyword_distribution, vocabulary, KeywordDistribution};
use crate::agent::{
    aide_baseline, run_agent, save_requirements, Analyzer, MockAnalyzer, MockWriter, RequirementWriter,
};
use crate::error::{Error, Result};
use crate::forge::forge_dataset;
use crate::generator::{generate_dataset, load_checkpoint, save_checkpoint, train as train_generator, GenModel, TrainSample};
use crate::planner::{evaluate, KnnPlanner, PlannerModel, PlanningMetrics, DEFAULT_HORIZONS};
use crate::scene::{save_dataset, to_fixed_json, write_jsonl, Dataset, Provenance};
use crate::taxonomy::{
    build_taxonomy, bundled_annotations, detect_failures, Extractor, FailureRecord, MockExtractor, MockSummarizer,
    Summarizer,
};

pub const MANIFEST_SCHEMA: &str = "corrloop.manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const FAILURES_SCHEMA: &str = "corrloop.failures";

/// The analysis back end used by a run.
pub struct Agents<'a> {
    pub analyzer: &'a dyn Analyzer,
    pub writer: &'a dyn RequirementWriter,
    pub extractor: &'a dyn Extractor,
    pub summarizer: &'a dyn Summarizer,
}

impl Agents<'static> {
    pub fn mock() -> Self {
        Self { analyzer: &MockAnalyzer, writer: &MockWriter, extractor: &MockExtractor, summarizer: &MockSummarizer }
    }
}

/// Val failures split against the previous iteration's set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    /// Failing now and at the previous iteration.
    pub old: Vec<String>,
    /// Failing now but not at the previous iteration.
    pub new: Vec<String>,
    pub total: usize,
}

impl Ledger {
    pub fn between(prev: &BTreeSet<String>, cur: &BTreeSet<String>) -> Self {
        let old: Vec<String> = cur.intersection(prev).cloned().collect();
        let new: Vec<String> = cur.difference(prev).cloned().collect();
        Self { total: old.len() + new.len(), old, new }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sizes {
    pub train_base: usize,
    pub generated: usize,
    pub generated_total: usize,
    pub val: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub requirements: usize,
    pub selections: usize,
    pub unclassified: usize,
    pub unmet: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distributions {
    pub generated: KeywordDistribution,
    pub val_failures: KeywordDistribution,
}

/// The retrieval baseline arm, updated in lockstep with the same budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub added: usize,
    pub added_total: usize,
    pub train_failures: usize,
    pub val_failures: usize,
    pub metrics: PlanningMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "error")]
pub enum Status {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub status: Status,
    /// Train failures of the planner produced by this iteration.
    pub train_failures: usize,
    pub val_failures: usize,
    pub ledger: Ledger,
    pub metrics: Option<PlanningMetrics>,
    pub dd: Option<f64>,
    pub distributions: Option<Distributions>,
    pub sizes: Sizes,
    pub agent: AgentSummary,
    pub aide: Option<ArmRecord>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub stop_reason: Option<String>,
}

impl IterationRecord {
    fn failed(iteration: usize, err: &Error) -> Self {
        Self {
            iteration,
            status: Status::Failed(err.to_string()),
            train_failures: 0,
            val_failures: 0,
            ledger: Ledger::default(),
            metrics: None,
            dd: None,
            distributions: None,
            sizes: Sizes::default(),
            agent: AgentSummary::default(),
            aide: None,
            artifacts: Vec::new(),
            stop_reason: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub version: u32,
    pub name: String,
    pub config_digest: String,
    pub vocabulary: Vec<String>,
    pub taxonomy_labels: Vec<String>,
    pub iterations: Vec<IterationRecord>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("{} has no manifest.json", run_dir.display())));
        }
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.schema != MANIFEST_SCHEMA || m.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!("unsupported manifest {} v{}", m.schema, m.version)));
        }
        Ok(m)
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        fs::write(run_dir.join("manifest.json"), to_fixed_json(self)? + "\n")?;
        Ok(())
    }

    pub fn last_ok(&self) -> Option<&IterationRecord> {
        self.iterations.iter().rev().find(|r| r.status == Status::Ok)
    }
}

struct Arm {
    planner: KnnPlanner,
    train_failures: Vec<FailureRecord>,
    val_failures: BTreeSet<String>,
    added_total: usize,
}

struct State {
    train: Dataset,
    val: Dataset,
    labels: Vec<String>,
    vocab: Vec<String>,
    generator: GenModel,
    main: Arm,
    aide: Option<Arm>,
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::Config(format!("run directory {} is in use ({e})", dir.display())))?;
        Ok(Self(path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn rel(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn failure_ids(records: &[FailureRecord]) -> BTreeSet<String> {
    records.iter().map(|r| r.scene_id.clone()).collect()
}

fn arm_record(arm: &Arm, added: usize, metrics: PlanningMetrics) -> ArmRecord {
    ArmRecord {
        added,
        added_total: arm.added_total,
        train_failures: arm.train_failures.len(),
        val_failures: arm.val_failures.len(),
        metrics,
    }
}

/// Evaluates on val and mines train failures for one planner.
fn assess(cfg: &EngineConfig, planner: &KnnPlanner, train: &Dataset, val: &Dataset) -> Result<(PlanningMetrics, Vec<FailureRecord>, BTreeSet<String>)> {
    let eps = cfg.run.epsilon;
    let metrics = evaluate(planner, val, eps, &DEFAULT_HORIZONS)?;
    let val_failures = failure_ids(&detect_failures(planner, val, eps, cfg.planner.t_e2e)?);
    let train_failures = detect_failures(planner, train, eps, cfg.planner.t_e2e)?;
    Ok((metrics, train_failures, val_failures))
}

fn init(cfg: &EngineConfig, dir: &Path, agents: &Agents, timing: &mut Vec<(String, f64)>) -> Result<(State, IterationRecord)> {
    let clock = Instant::now();
    let train = forge_dataset(&cfg.forge.train)?;
    let val = forge_dataset(&cfg.forge.val)?;
    save_dataset(&train, &dir.join("train.jsonl"))?;
    save_dataset(&val, &dir.join("val.jsonl"))?;
    timing.push(("forge".into(), clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let taxonomy = build_taxonomy(&bundled_annotations(), agents.extractor, agents.summarizer, &cfg.taxonomy)?;
    fs::write(dir.join("taxonomy.json"), to_fixed_json(&taxonomy)? + "\n")?;
    timing.push(("taxonomy".into(), clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let generator = match &cfg.generator.checkpoint {
        Some(path) => {
            let g = load_checkpoint(path)?;
            if g.cfg.view != cfg.planner.view || g.cfg.frames != cfg.planner.frames {
                return Err(Error::Config(format!("checkpoint {} has a different sensor geometry", path.display())));
            }
            g
        }
        None => {
            let mut g = GenModel::new(cfg.generator.model.clone())?;
            let samples = train
                .scenes
                .iter()
                .map(|s| TrainSample::from_scene(s, &g, cfg.planner.render_seed))
                .collect::<Result<Vec<_>>>()?;
            let report = train_generator(&mut g, &samples, cfg.generator.epochs, cfg.generator.train_seed)?;
            fs::write(dir.join("generator_losses.json"), to_fixed_json(&report)? + "\n")?;
            g
        }
    };
    save_checkpoint(&generator, &dir.join("generator.ckpt"))?;
    timing.push(("generator".into(), clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let mut planner = KnnPlanner::new(cfg.planner.clone());
    planner.train(&train)?;
    let (metrics, train_failures, val_failures) = assess(cfg, &planner, &train, &val)?;
    timing.push(("evaluate".into(), clock.elapsed().as_secs_f64()));

    let iter_dir = dir.join("iter_0");
    fs::create_dir_all(&iter_dir)?;
    write_jsonl(&iter_dir.join("failures.jsonl"), FAILURES_SCHEMA, json!({ "split": "train" }), &train_failures)?;
    fs::write(iter_dir.join("metrics.json"), to_fixed_json(&json!({ "corrective": metrics }))? + "\n")?;

    let main = Arm { planner, train_failures, val_failures, added_total: 0 };
    let aide = cfg.run.baseline_aide.then(|| Arm {
        planner: main.planner.clone(),
        train_failures: main.train_failures.clone(),
        val_failures: main.val_failures.clone(),
        added_total: 0,
    });
    let record = IterationRecord {
        iteration: 0,
        status: Status::Ok,
        train_failures: main.train_failures.len(),
        val_failures: main.val_failures.len(),
        ledger: Ledger::between(&BTreeSet::new(), &main.val_failures),
        metrics: Some(metrics.clone()),
        dd: None,
        distributions: None,
        sizes: Sizes { train_base: train.len(), generated: 0, generated_total: 0, val: val.len() },
        agent: AgentSummary::default(),
        aide: aide.as_ref().map(|a| arm_record(a, 0, metrics)),
        artifacts: [
            "train.jsonl",
            "val.jsonl",
            "taxonomy.json",
            "generator.ckpt",
            "iter_0/failures.jsonl",
            "iter_0/metrics.json",
            "iter_0/timing.json",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        stop_reason: None,
    };
    let state = State { vocab: vocabulary(&train), train, val, labels: taxonomy.labels, generator, main, aide };
    Ok((state, record))
}

/// One pass of mine → analyze → generate → update → evaluate. On error the
/// state is left untouched.
fn run_iteration(
    cfg: &EngineConfig,
    dir: &Path,
    k: usize,
    state: &mut State,
    agents: &Agents,
    timing: &mut Vec<(String, f64)>,
) -> Result<IterationRecord> {
    let iter_dir = dir.join(format!("iter_{k}"));
    fs::create_dir_all(&iter_dir)?;
    let mut artifacts = Vec::new();
    let failures = &state.main.train_failures;

    let clock = Instant::now();
    let outcome = if failures.is_empty() {
        Default::default()
    } else {
        run_agent(failures, &state.labels, agents.analyzer, agents.writer, &state.train, &cfg.agent)?
    };
    let req_path = iter_dir.join("requirements.jsonl");
    save_requirements(&req_path, &outcome.requirements)?;
    artifacts.push(rel(&req_path, dir));
    timing.push(("agent".into(), clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let tag = format!("gen{k}");
    let seed = cfg.run.seed ^ ((k as u64) << 32);
    let generated = if outcome.requirements.is_empty() {
        Dataset::empty(&tag, Provenance::Generated)
    } else {
        generate_dataset(&state.generator, &outcome.requirements, &state.train, cfg.generator.budget, seed, &tag)?
    };
    let gen_path = iter_dir.join("generated").join("dataset.jsonl");
    save_dataset(&generated, &gen_path)?;
    artifacts.push(rel(&gen_path, dir));
    timing.push(("generate".into(), clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let mut planner = state.main.planner.clone();
    planner.train(&generated)?;
    let (metrics, train_failures, val_failures) = assess(cfg, &planner, &state.train, &state.val)?;
    timing.push(("update".into(), clock.elapsed().as_secs_f64()));

    let val_failure_set = Dataset {
        name: "val-failures".into(),
        provenance: Provenance::Forged,
        scenes: state.val.scenes.iter().filter(|s| val_failures.contains(&s.id)).cloned().collect(),
    };
    let distributions = if generated.is_empty() || val_failure_set.is_empty() {
        None
    } else {
        Some(Distributions {
            generated: keyword_distribution(&generated, &state.vocab)?,
            val_failures: keyword_distribution(&val_failure_set, &state.vocab)?,
        })
    };
    let dd = distributions.as_ref().map(|d| hellinger(&d.generated, &d.val_failures)).transpose()?;

    let clock = Instant::now();
    let aide = match &state.aide {
        Some(arm) => {
            let budget = generated.len();
            let copies = aide_baseline(&arm.train_failures, &state.train, cfg.agent.top_k, budget, &format!("aide{k}"));
            let aide_path = iter_dir.join("aide").join("dataset.jsonl");
            save_dataset(&copies, &aide_path)?;
            artifacts.push(rel(&aide_path, dir));
            let mut p = arm.planner.clone();
            p.train(&copies)?;
            let (m, tf, vf) = assess(cfg, &p, &state.train, &state.val)?;
            let next = Arm { planner: p, train_failures: tf, val_failures: vf, added_total: arm.added_total + copies.len() };
            Some((next, copies.len(), m))
        }
        None => None,
    };
    timing.push(("baseline".into(), clock.elapsed().as_secs_f64()));

    let fail_path = iter_dir.join("failures.jsonl");
    write_jsonl(&fail_path, FAILURES_SCHEMA, json!({ "split": "train" }), &train_failures)?;
    artifacts.push(rel(&fail_path, dir));
    let metrics_path = iter_dir.join("metrics.json");
    let aide_metrics = aide.as_ref().map(|(_, _, m)| m);
    fs::write(&metrics_path, to_fixed_json(&json!({ "corrective": metrics, "aide": aide_metrics, "dd": dd }))? + "\n")?;
    artifacts.push(rel(&metrics_path, dir));
    artifacts.push(format!("iter_{k}/timing.json"));

    let generated_total = state.main.added_total + generated.len();
    let record = IterationRecord {
        iteration: k,
        status: Status::Ok,
        train_failures: train_failures.len(),
        val_failures: val_failures.len(),
        ledger: Ledger::between(&state.main.val_failures, &val_failures),
        metrics: Some(metrics),
        dd,
        distributions,
        sizes: Sizes { train_base: state.train.len(), generated: generated.len(), generated_total, val: state.val.len() },
        agent: AgentSummary {
            requirements: outcome.requirements.len(),
            selections: outcome.selection_count(),
            unclassified: outcome.unclassified.len(),
            unmet: outcome.unmet.len(),
        },
        aide: aide.as_ref().map(|(arm, added, m)| arm_record(arm, *added, m.clone())),
        artifacts,
        stop_reason: None,
    };

    // Commit.
    state.main = Arm { planner, train_failures, val_failures, added_total: generated_total };
    if let Some((arm, _, _)) = aide {
        state.aide = Some(arm);
    }
    Ok(record)
}

fn write_timing(dir: &Path, k: usize, timing: &[(String, f64)]) -> Result<()> {
    let iter_dir = dir.join(format!("iter_{k}"));
    fs::create_dir_all(&iter_dir)?;
    let obj: serde_json::Map<String, serde_json::Value> = timing.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    fs::write(iter_dir.join("timing.json"), serde_json::to_string_pretty(&obj)? + "\n")?;
    Ok(())
}

/// Runs iteration 0 (baseline) plus `cfg.run.iterations` correction rounds
/// into `dir`. The manifest is rewritten after every iteration, so a failed
/// run leaves a partial manifest behind. Wall-clock timings live in
/// `iter_<k>/timing.json`, outside the manifest, which stays a pure function
/// of the configuration.
pub fn run_loop(cfg: &EngineConfig, dir: &Path, agents: &Agents) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let _lock = Lock::acquire(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        version: MANIFEST_VERSION,
        name: cfg.run.name.clone(),
        config_digest: cfg.digest(),
        vocabulary: Vec::new(),
        taxonomy_labels: Vec::new(),
        iterations: Vec::new(),
    };
    let mut timing = Vec::new();
    let (mut state, record) = match init(cfg, dir, agents, &mut timing) {
        Ok(x) => x,
        Err(e) => {
            manifest.iterations.push(IterationRecord::failed(0, &e));
            manifest.save(dir)?;
            return Err(e);
        }
    };
    write_timing(dir, 0, &timing)?;
    manifest.vocabulary = state.vocab.clone();
    manifest.taxonomy_labels = state.labels.clone();
    manifest.iterations.push(record);
    manifest.save(dir)?;
    log::info!("iteration 0: {} train / {} val failures", state.main.train_failures.len(), state.main.val_failures.len());

    for k in 1..=cfg.run.iterations {
        let before = state.main.train_failures.len();
        let mut timing = Vec::new();
        let mut record = match run_iteration(cfg, dir, k, &mut state, agents, &mut timing) {
            Ok(r) => r,
            Err(e) => {
                manifest.iterations.push(IterationRecord::failed(k, &e));
                manifest.save(dir)?;
                return Err(e);
            }
        };
        write_timing(dir, k, &timing)?;
        log::info!(
            "iteration {k}: generated {}, train failures {} -> {}, val failures {}, dd {:?}",
            record.sizes.generated,
            before,
            record.train_failures,
            record.val_failures,
            record.dd
        );
        if cfg.run.early_stop {
            if before == 0 {
                record.stop_reason = Some("no train failures to correct".into());
            } else if record.train_failures == 0 {
                record.stop_reason = Some("train failures reached zero".into());
            } else if ((before as f64 - record.train_failures as f64) / before as f64) < cfg.run.min_improvement {
                record.stop_reason = Some(format!("train failures improved by less than {}", cfg.run.min_improvement));
            }
        }
        let stop = record.stop_reason.is_some();
        manifest.iterations.push(record);
        manifest.save(dir)?;
        if stop {
            break;
        }
    }
    Ok(manifest)
}
