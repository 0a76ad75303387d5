use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use corrloop::agent::{load_requirements, HttpAnalyzer, HttpClient, HttpConfig};
use corrloop::engine::{report, run_loop, Agents, EngineConfig, Status};
use corrloop::forge::{forge_dataset, ForgeSpec};
use corrloop::generator::{generate_dataset, load_checkpoint};
use corrloop::scene::{load_dataset, save_dataset};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "corrloop", version, about = "Closed-loop planner failure correction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalyzerKind {
    Mock,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Aide,
}

#[derive(Subcommand)]
enum Cmd {
    /// Forge synthetic scene datasets from a TOML spec.
    Forge {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the correction loop.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        /// Also run a retrieval baseline arm with the same budget.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, value_enum, default_value = "mock")]
        analyzer: AnalyzerKind,
        /// Run directory; defaults to runs/<run name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate scenes for saved requirements with a trained generator.
    Gen {
        #[arg(long)]
        requirements: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Dataset the selections refer to; defaults to train.jsonl in the
        /// run directory holding the requirements.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Summarize a finished run into report.txt and SVG plots.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// A forge spec file holds either one dataset spec or several named ones.
#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    One(ForgeSpec),
    Many(BTreeMap<String, ForgeSpec>),
}

fn forge(spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let specs = match toml::from_str::<SpecFile>(&text).with_context(|| format!("parsing {}", spec.display()))? {
        SpecFile::One(s) => vec![s],
        SpecFile::Many(m) => m
            .into_iter()
            .map(|(key, mut s)| {
                if s.name == "forged" {
                    s.name = key;
                }
                s
            })
            .collect(),
    };
    fs::create_dir_all(out)?;
    for s in specs {
        let ds = forge_dataset(&s)?;
        let path = out.join(format!("{}.jsonl", s.name));
        save_dataset(&ds, &path)?;
        println!("{}: {} scenes -> {}", s.name, ds.len(), path.display());
    }
    Ok(())
}

fn run(config: &Path, iters: Option<usize>, baseline: Option<Baseline>, analyzer: AnalyzerKind, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = EngineConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(n) = iters {
        cfg.run.iterations = n;
    }
    if baseline.is_some() {
        cfg.run.baseline_aide = true;
    }
    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.run.name));
    let manifest = match analyzer {
        AnalyzerKind::Mock => run_loop(&cfg, &dir, &Agents::mock()),
        AnalyzerKind::Http => {
            let http = HttpAnalyzer::new(HttpClient::new(HttpConfig::from_env()?));
            let agents = Agents { analyzer: &http, writer: &http, extractor: &http, summarizer: &http };
            let result = run_loop(&cfg, &dir, &agents);
            http.client.save_transcript(&dir.join("transcript.jsonl"))?;
            result
        }
    }?;
    for r in &manifest.iterations {
        if let (Status::Ok, Some(m)) = (&r.status, &r.metrics) {
            println!(
                "iter {}: val collision {:.4}, val failures {}, train failures {}, generated {}",
                r.iteration, m.collision.average, r.val_failures, r.train_failures, r.sizes.generated
            );
        }
    }
    println!("run written to {}", dir.display());
    Ok(())
}

fn gen(requirements: &Path, ckpt: &Path, seed: u64, out: &Path, source: Option<PathBuf>, budget: Option<usize>) -> Result<()> {
    let reqs = load_requirements(requirements)?;
    let model = load_checkpoint(ckpt)?;
    let source = match source {
        Some(s) => s,
        None => {
            let run_dir = requirements.parent().and_then(Path::parent).unwrap_or(Path::new("."));
            let guess = run_dir.join("train.jsonl");
            if !guess.exists() {
                bail!("no --source given and {} does not exist", guess.display());
            }
            guess
        }
    };
    let source = load_dataset(&source)?;
    let ds = generate_dataset(&model, &reqs, &source, budget, seed, "gen")?;
    let path = out.join("dataset.jsonl");
    save_dataset(&ds, &path)?;
    println!("{} scenes -> {}", ds.len(), path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Forge { spec, out } => forge(&spec, &out),
        Cmd::Run { config, iters, baseline, analyzer, out } => run(&config, iters, baseline, analyzer, out),
        Cmd::Gen { requirements, ckpt, seed, out, source, budget } => gen(&requirements, &ckpt, seed, &out, source, budget),
        Cmd::Report { run } => {
            for p in report(&run)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}
