use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::AgentConfig;
use crate::collision::DEFAULT_EPSILON;
use crate::error::{Error, Result};
use crate::forge::ForgeSpec;
use crate::generator::GenConfig;
use crate::planner::PlannerConfig;
use crate::scene::Archetype;
use crate::taxonomy::TaxonomyConfig;

const SEED_BENCHMARK: &str = include_str!("../../data/seed_benchmark.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    pub iterations: usize,
    pub epsilon: f64,
    /// Stop when train failures reach zero or improve by less than
    /// `min_improvement` (relative) in one iteration.
    pub early_stop: bool,
    pub min_improvement: f64,
    /// Run the retrieval baseline arm alongside the corrective arm.
    pub baseline_aide: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            iterations: 3,
            epsilon: DEFAULT_EPSILON,
            early_stop: true,
            min_improvement: 0.01,
            baseline_aide: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeSection {
    pub train: ForgeSpec,
    pub val: ForgeSpec,
}

impl Default for ForgeSection {
    fn default() -> Self {
        let hazards = [
            (Archetype::NightLowVisibility, 0.25),
            (Archetype::DenseCutIn, 0.25),
            (Archetype::PedestrianCrossing, 0.25),
            (Archetype::Rain, 0.25),
        ];
        let mut train = ForgeSpec::new(400, &[(Archetype::Nominal, 1.0)], 1);
        train.name = "train".into();
        let mut val = ForgeSpec::new(100, &hazards, 2);
        val.name = "val".into();
        Self { train, val }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSection {
    /// Model hyperparameters. View geometry and frame count are always taken
    /// from the planner so generated rasters are planner-compatible.
    pub model: GenConfig,
    pub epochs: usize,
    pub train_seed: u64,
    /// Cap on generated scenes per iteration.
    pub budget: Option<usize>,
    /// Pretrained checkpoint; when set, no generator training happens.
    pub checkpoint: Option<PathBuf>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self { model: GenConfig::default(), epochs: 10, train_seed: 0, budget: None, checkpoint: None }
    }
}

/// Everything a run depends on; one TOML section per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EngineConfig {
    pub run: RunSection,
    pub forge: ForgeSection,
    pub planner: PlannerConfig,
    pub taxonomy: TaxonomyConfig,
    pub agent: AgentConfig,
    pub generator: GeneratorSection,
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: EngineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(ck) = &cfg.generator.checkpoint {
            if ck.is_relative() {
                cfg.generator.checkpoint = Some(path.parent().unwrap_or(Path::new(".")).join(ck));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The bundled desk-scale benchmark: hazard-sparse train split, hazard-rich val split.
    pub fn seed_benchmark() -> Self {
        Self::from_toml(SEED_BENCHMARK).expect("bundled seed benchmark parses")
    }

    /// Copies the planner's sensor geometry into the generator config.
    pub fn sync(&mut self) {
        self.generator.model.view = self.planner.view.clone();
        self.generator.model.frames = self.planner.frames;
    }

    pub fn validate(&self) -> Result<()> {
        self.forge.train.validate()?;
        self.forge.val.validate()?;
        self.planner.view.validate()?;
        self.generator.model.validate()?;
        if self.generator.model.view != self.planner.view || self.generator.model.frames != self.planner.frames {
            return Err(Error::Config("generator and planner geometry differ".into()));
        }
        for s in [&self.forge.train, &self.forge.val] {
            if s.horizon < self.planner.t_e2e + 1 || s.horizon < self.planner.frames {
                return Err(Error::Config(format!("{} horizon {} too short for the planner", s.name, s.horizon)));
            }
        }
        if !(self.run.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.agent.top_k == 0 || !(0.0..=1.0).contains(&self.agent.delta) || !(0.0..=1.0).contains(&self.agent.tau) {
            return Err(Error::Config("agent thresholds must lie in [0, 1] and top_k >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::planner::hex(&Sha256::digest(json))
    }
}
