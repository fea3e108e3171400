use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AgentConfig, AgentParams, ViewMode};
use crate::citygraph::{generate_city, CityGenConfig, RegionRole};
use crate::env::{EnvConfig, World};
use crate::eval::{evaluate, EvalConfig, EvalReport};

use super::{load_params, run_stage, save_params, write_metrics_csv, StageConfig, StageName, StageReport, TrainError};

/// Network sizes; input shapes come from the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub encoder_hidden: usize,
    pub embed: usize,
    pub locale_hidden: usize,
    pub policy_hidden: usize,
    pub aerial_conv: bool,
    pub feed_prev_action_reward: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: 64,
            embed: 64,
            locale_hidden: 128,
            policy_hidden: 128,
            aerial_conv: false,
            feed_prev_action_reward: false,
        }
    }
}

impl NetConfig {
    pub fn agent_config(&self, world: &World, init_seed: u64) -> AgentConfig {
        AgentConfig {
            encoder_hidden: self.encoder_hidden,
            embed: self.embed,
            locale_hidden: self.locale_hidden,
            policy_hidden: self.policy_hidden,
            aerial_conv: self.aerial_conv,
            feed_prev_action_reward: self.feed_prev_action_reward,
            init_seed,
            ..AgentConfig::for_world(world)
        }
    }
}

/// Outputs of one executed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageName,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub eval: Option<PathBuf>,
    pub env_steps: u64,
    pub updates: u64,
    pub created_locale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// Extra labels such as `no_adapt`.
    pub tags: Vec<String>,
    pub seed: u64,
    pub city_seed: u64,
    pub city: CityGenConfig,
    pub env: EnvConfig,
    pub net: NetConfig,
    pub stages: Vec<StageConfig>,
    /// Zero-shot evaluation written after each stage, on `eval_region`.
    pub eval: Option<EvalConfig>,
    pub eval_region: String,
    pub eval_view: ViewMode,
    /// Start from this checkpoint instead of fresh parameters.
    pub initial_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Filled in by [`run_pipeline`].
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub records: Vec<StageRecord>,
}

fn stage_rank(s: StageName) -> u8 {
    match s {
        StageName::Training => 0,
        StageName::Adaptation => 1,
        StageName::Transfer => 2,
    }
}

impl RunManifest {
    /// Hex sha256 of the JSON of every input field.
    pub fn compute_hash(&self) -> String {
        let mut m = self.clone();
        m.config_hash.clear();
        m.records.clear();
        m.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&m).expect("manifest serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stages.is_empty() {
            return Err(TrainError::InvalidConfig("manifest has no stages".into()));
        }
        for w in self.stages.windows(2) {
            if stage_rank(w[0].name) >= stage_rank(w[1].name) {
                return Err(TrainError::InvalidConfig(format!(
                    "stage {} cannot follow {}",
                    w[1].name.as_str(),
                    w[0].name.as_str()
                )));
            }
        }
        if self.stages[0].name != StageName::Training && self.initial_checkpoint.is_none() {
            return Err(TrainError::InvalidConfig(
                "pipelines without a training stage need an initial checkpoint".into(),
            ));
        }
        for s in &self.stages {
            s.validate()?;
        }
        Ok(())
    }

    pub fn skips_adaptation(&self) -> bool {
        self.stages.iter().any(|s| s.name == StageName::Transfer)
            && !self.stages.iter().any(|s| s.name == StageName::Adaptation)
    }

    pub fn stage_paths(&self, index: usize) -> (PathBuf, PathBuf, PathBuf) {
        let stem = format!("{}_{}", index, self.stages[index].name.as_str());
        (
            self.out_dir.join(format!("{stem}.ckpt")),
            self.out_dir.join(format!("{stem}.csv")),
            self.out_dir.join(format!("{stem}_eval.json")),
        )
    }

    pub fn world(&self) -> Result<std::sync::Arc<World>, TrainError> {
        let graph = generate_city(self.city_seed, &self.city)?;
        Ok(World::new(graph, self.env.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let f = File::open(path)?;
        serde_json::from_reader(f).map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Result of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub manifest: RunManifest,
    pub params: AgentParams<f32>,
    pub reports: Vec<StageReport>,
    pub evals: Vec<Option<EvalReport>>,
}

/// Executes the stages in order; each stage reloads the previous stage's
/// checkpoint from disk.
pub fn run_pipeline(mut manifest: RunManifest) -> Result<PipelineOutput, TrainError> {
    manifest.validate()?;
    let cross_view = manifest.stages[0].view_mode != ViewMode::GroundOnly;
    if cross_view && manifest.skips_adaptation() && !manifest.tags.iter().any(|t| t == "no_adapt") {
        manifest.tags.push("no_adapt".into());
    }
    manifest.config_hash = manifest.compute_hash();
    manifest.records.clear();
    std::fs::create_dir_all(&manifest.out_dir)?;
    let world = manifest.world()?;
    std::fs::write(
        manifest.out_dir.join("city.json"),
        world.graph.to_json(),
    )?;

    let mut prev: Option<PathBuf> = manifest.initial_checkpoint.clone();
    let mut params = match &prev {
        Some(p) => load_params(p)?,
        None => {
            let cfg = manifest.net.agent_config(&world, manifest.seed);
            AgentParams::init(cfg, &world.graph.region_names(RegionRole::Train))
        }
    };
    let mut reports = Vec::new();
    let mut evals = Vec::new();
    for i in 0..manifest.stages.len() {
        if let Some(p) = &prev {
            params = load_params(p)?;
        }
        let cfg = manifest.stages[i].clone();
        let (ckpt, metrics, eval_path) = manifest.stage_paths(i);
        let (next, report) = run_stage(world.clone(), params, &cfg)?;
        params = next;
        save_params(&params, &ckpt)?;
        write_metrics_csv(BufWriter::new(File::create(&metrics)?), &report.metrics)?;

        let eval = match &manifest.eval {
            Some(ec) => {
                let r = evaluate(&params, world.clone(), &manifest.eval_region, manifest.eval_view, ec)
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                let f = BufWriter::new(File::create(&eval_path)?);
                serde_json::to_writer_pretty(f, &r).map_err(|e| TrainError::Config(e.to_string()))?;
                Some(r)
            }
            None => None,
        };
        manifest.records.push(StageRecord {
            stage: cfg.name,
            checkpoint: ckpt.clone(),
            metrics,
            eval: eval.as_ref().map(|_| eval_path),
            env_steps: report.env_steps,
            updates: report.updates,
            created_locale: report.created_locale,
        });
        manifest.save(&manifest.out_dir.join("manifest.json"))?;
        reports.push(report);
        evals.push(eval);
        prev = Some(ckpt);
    }
    Ok(PipelineOutput {
        manifest,
        params,
        reports,
        evals,
    })
}
