//! Three-stage transfer pipeline on a concurrent actor/learner harness.

pub mod actor;
pub mod learner;
pub mod pipeline;

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{bounded, RecvTimeoutError};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{locale_partition, AgentConfig, AgentError, AgentParams, ViewMode};
use crate::citygraph::CityError;
use crate::env::{CurriculumSchedule, World};
use crate::losses::{LossError, LossWeights};
use crate::nn::{lr_schedule, save_checkpoint, NnError, Partition, RmsProp};
use crate::trajectory::{EpisodeSummary, Trajectory};

pub use actor::{Actor, Snapshot};
pub use learner::{batch_gradients, segment_gradients, LossSummary};
pub use pipeline::{run_pipeline, RunManifest, StageRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
    #[error("segment queue starved for {waited:?} after {received} segments")]
    Starvation { waited: Duration, received: u64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("partition `{0}` changed although it is frozen")]
    FreezeViolation(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("actor thread panicked")]
    ActorPanic,
    #[error(transparent)]
    City(#[from] CityError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Training,
    Adaptation,
    Transfer,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Training => "training",
            StageName::Adaptation => "adaptation",
            StageName::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    All,
    Only(Vec<String>),
}

impl TrainableSet {
    fn resolve(&self, params: &AgentParams<f32>) -> Vec<String> {
        match self {
            TrainableSet::All => params.store.partition_names(),
            TrainableSet::Only(names) => names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub name: StageName,
    pub regions: Vec<String>,
    pub view_mode: ViewMode,
    pub trainable: TrainableSet,
    /// Environment-step budget.
    pub steps: u64,
    pub curriculum: CurriculumSchedule,
    pub weights: LossWeights,
    pub actors: usize,
    pub unroll: usize,
    /// Segments per learner update.
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub grad_clip: f64,
    /// Probability that ground logits act under `Both`.
    pub p_ground: f64,
    /// One actor interleaved synchronously with the learner.
    pub deterministic: bool,
    /// Copy this region's locale into a missing target locale instead of a fresh init.
    pub warm_start_locale: Option<String>,
    pub queue_timeout_secs: u64,
    /// Episodes averaged in the reward/success columns.
    pub metrics_window: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            name: StageName::Training,
            regions: vec!["train0".into(), "train1".into()],
            view_mode: ViewMode::Both,
            trainable: TrainableSet::All,
            steps: 2_000_000,
            curriculum: CurriculumSchedule {
                d_start: 200.0,
                d_end: 2000.0,
                ramp_steps: 1000,
                enabled: true,
            },
            weights: LossWeights::default(),
            actors: 8,
            unroll: 50,
            batch: 16,
            seed: 0,
            lr: 0.001,
            rms_decay: 0.99,
            rms_eps: 1e-5,
            grad_clip: 40.0,
            p_ground: 0.5,
            deterministic: false,
            warm_start_locale: None,
            queue_timeout_secs: 300,
            metrics_window: 50,
        }
    }
}

impl StageConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stage config serializes")
    }

    /// Target region of an adaptation or transfer stage.
    pub fn target(&self) -> Option<&str> {
        match self.name {
            StageName::Training => None,
            _ => self.regions.first().map(String::as_str),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.regions.is_empty() {
            return bad("no regions".into());
        }
        if self.steps == 0 || self.unroll == 0 || self.batch == 0 || self.actors == 0 {
            return bad("steps, unroll, batch and actors must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_ground) {
            return bad("p_ground must be in [0, 1]".into());
        }
        if !(self.lr >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr must be >= 0 and grad_clip > 0".into());
        }
        self.weights.validate().map_err(TrainError::InvalidConfig)?;
        match self.name {
            StageName::Training => {
                if self.view_mode == ViewMode::AerialOnly {
                    return bad("training runs under both views (or ground only for the baseline)".into());
                }
                if self.trainable != TrainableSet::All {
                    return bad("training updates every partition".into());
                }
            }
            StageName::Adaptation | StageName::Transfer => {
                let want = if self.name == StageName::Adaptation {
                    ViewMode::AerialOnly
                } else {
                    ViewMode::GroundOnly
                };
                if self.view_mode != want {
                    return bad(format!("{} runs under {want:?}", self.name.as_str()));
                }
                if self.regions.len() != 1 {
                    return bad(format!("{} takes exactly one target region", self.name.as_str()));
                }
                let only = vec![locale_partition(&self.regions[0])];
                if self.trainable != TrainableSet::Only(only) {
                    return bad(format!("{} trains only the target locale", self.name.as_str()));
                }
            }
        }
        Ok(())
    }

    pub fn segments_per_update(&self) -> u64 {
        self.batch as u64
    }

    pub fn steps_per_update(&self) -> u64 {
        (self.batch * self.unroll) as u64
    }

    /// Learner updates needed to consume the step budget (rounded up).
    pub fn total_updates(&self) -> u64 {
        self.steps.div_ceil(self.steps_per_update())
    }
}

/// Linear curriculum over learner updates.
pub fn curriculum_level(update_index: u64, schedule: &CurriculumSchedule) -> f64 {
    schedule.level(update_index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub update: u64,
    pub episodes: usize,
    pub episode_reward_mean: f64,
    pub success_rate: f64,
    pub loss_total: f64,
    pub loss_rl: f64,
    pub loss_embed: f64,
    pub loss_policy: f64,
    pub loss_heading: f64,
    pub policy_term: f64,
    pub value_term: f64,
    pub entropy: f64,
    pub lr: f64,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub grad_norm: f64,
    pub max_goal_distance: f64,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageReport {
    pub metrics: Vec<MetricsRow>,
    pub updates: u64,
    /// Steps in the segments the learner consumed.
    pub env_steps: u64,
    /// Steps each actor produced.
    pub actor_steps: Vec<u64>,
    /// Environment steps per region.
    pub region_steps: BTreeMap<String, u64>,
    /// Episode starts per region, as chosen by the actors' round-robin.
    pub region_visits: BTreeMap<String, u64>,
    pub episodes: Vec<EpisodeSummary>,
    /// True when the stage created the target locale partition.
    pub created_locale: bool,
}

struct Accounting {
    window: VecDeque<EpisodeSummary>,
    cap: usize,
    report: StageReport,
}

impl Accounting {
    fn absorb(&mut self, batch: &[Trajectory]) {
        for t in batch {
            self.report.env_steps += t.len() as u64;
            *self.report.region_steps.entry(t.region.clone()).or_default() += t.len() as u64;
            for e in &t.episodes {
                self.window.push_back(*e);
                if self.window.len() > self.cap {
                    self.window.pop_front();
                }
                self.report.episodes.push(*e);
            }
        }
    }

    fn window_stats(&self) -> (usize, f64, f64) {
        let n = self.window.len();
        if n == 0 {
            return (0, 0.0, 0.0);
        }
        let reward = self.window.iter().map(|e| e.reward).sum::<f64>() / n as f64;
        let done: u64 = self.window.iter().map(|e| e.goals_completed as u64).sum();
        let assigned: u64 = self.window.iter().map(|e| e.goals_assigned as u64).sum();
        let success = if assigned == 0 { 0.0 } else { done as f64 / assigned as f64 };
        (n, reward, success)
    }
}

/// Prepares `params` for a stage: creates missing locales (fresh or warm
/// started) and sets the trainable partitions. Returns whether the target
/// locale was created.
pub fn prepare_params(params: &mut AgentParams<f32>, cfg: &StageConfig) -> Result<bool, TrainError> {
    let mut created = false;
    for r in &cfg.regions {
        if params.has_locale(r) {
            continue;
        }
        match (&cfg.warm_start_locale, cfg.target()) {
            (Some(src), Some(t)) if t == r => params.copy_locale(src, r)?,
            _ => {
                params.ensure_locale(r);
            }
        }
        created = true;
    }
    let trainable = cfg.trainable.resolve(params);
    for name in &trainable {
        if !params.store.has_partition(name) {
            return Err(TrainError::InvalidConfig(format!("unknown partition `{name}`")));
        }
    }
    params.store.set_trainable(trainable);
    Ok(created)
}

struct Learner<'c> {
    cfg: &'c StageConfig,
    opt: RmsProp<f32>,
    total_updates: u64,
    acct: Accounting,
}

impl<'c> Learner<'c> {
    fn update(&mut self, params: &mut AgentParams<f32>, batch: &[Trajectory], update: u64) -> Result<(), TrainError> {
        let (mut grads, loss) = batch_gradients(params, batch, &self.cfg.weights)?;
        grads.mask_to_trainable(&params.store);
        if !grads.is_finite() {
            return Err(TrainError::NonFinite("gradients".into()));
        }
        let grad_norm = grads.clip_global_norm(self.cfg.grad_clip as f32) as f64;
        if !loss.rl_stats.ratio_mean.is_finite() {
            return Err(TrainError::NonFinite("importance ratio".into()));
        }
        let lr = lr_schedule(update, self.cfg.lr, self.total_updates);
        self.opt.step(&mut params.store, &grads, lr as f32);
        self.acct.absorb(batch);
        let (episodes, reward, success) = self.acct.window_stats();
        self.acct.report.metrics.push(MetricsRow {
            step: self.acct.report.env_steps,
            update,
            episodes,
            episode_reward_mean: reward,
            success_rate: success,
            loss_total: loss.total,
            loss_rl: loss.rl,
            loss_embed: loss.embed,
            loss_policy: loss.policy,
            loss_heading: loss.heading,
            policy_term: loss.rl_stats.policy_term,
            value_term: loss.rl_stats.value_term,
            entropy: loss.rl_stats.entropy,
            lr,
            ratio_mean: loss.rl_stats.ratio_mean,
            ratio_min: loss.rl_stats.ratio_min,
            ratio_max: loss.rl_stats.ratio_max,
            grad_norm,
            max_goal_distance: curriculum_level(update, &self.cfg.curriculum),
        });
        self.acct.report.updates = update + 1;
        Ok(())
    }
}

fn actor_seed(stage_seed: u64, i: usize) -> u64 {
    stage_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((i as u64 + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

fn frozen_copy(params: &AgentParams<f32>) -> Vec<Partition<f32>> {
    params
        .store
        .partitions()
        .iter()
        .filter(|p| !params.store.trainable().contains(&p.name))
        .cloned()
        .collect()
}

/// Runs one stage until its step budget is consumed.
///
/// Partitions outside `cfg.trainable` come back bit-identical.
pub fn run_stage(
    world: Arc<World>,
    mut params: AgentParams<f32>,
    cfg: &StageConfig,
) -> Result<(AgentParams<f32>, StageReport), TrainError> {
    cfg.validate()?;
    for r in &cfg.regions {
        world.graph.region(r)?;
    }
    let created = prepare_params(&mut params, cfg)?;
    let frozen = frozen_copy(&params);

    let total_updates = cfg.total_updates();
    let mut learner = Learner {
        cfg,
        opt: RmsProp::new(&params.store, cfg.rms_decay as f32, cfg.rms_eps as f32),
        total_updates,
        acct: Accounting {
            window: VecDeque::new(),
            cap: cfg.metrics_window.max(1),
            report: StageReport {
                created_locale: created,
                ..Default::default()
            },
        },
    };
    let agent_cfg = params.config.clone();
    let actor_count = if cfg.deterministic { 1 } else { cfg.actors };
    let mut actors: Vec<Actor> = (0..actor_count)
        .map(|i| {
            Actor::new(
                world.clone(),
                cfg.regions.clone(),
                i,
                cfg.view_mode,
                cfg.p_ground,
                actor_seed(cfg.seed, i),
                &agent_cfg,
            )
        })
        .collect();

    if cfg.deterministic {
        run_synchronous(&mut learner, &mut params, &mut actors[0], cfg, total_updates)?;
    } else {
        run_threaded(&mut learner, &mut params, &mut actors, cfg, total_updates)?;
    }

    let mut report = learner.acct.report;
    for a in &actors {
        report.actor_steps.push(a.steps_produced());
        for (r, v) in cfg.regions.iter().zip(a.region_visits()) {
            *report.region_visits.entry(r.clone()).or_default() += v;
        }
    }
    for p in &frozen {
        if params.store.partition(&p.name) != Some(p) {
            return Err(TrainError::FreezeViolation(p.name.clone()));
        }
    }
    Ok((params, report))
}

fn snapshot_of(params: &AgentParams<f32>, version: u64, cfg: &StageConfig) -> Snapshot {
    Snapshot {
        version,
        params: params.clone(),
        max_goal_distance: curriculum_level(version, &cfg.curriculum),
    }
}

fn run_synchronous(
    learner: &mut Learner<'_>,
    params: &mut AgentParams<f32>,
    actor: &mut Actor,
    cfg: &StageConfig,
    total_updates: u64,
) -> Result<(), TrainError> {
    for update in 0..total_updates {
        let snapshot = snapshot_of(params, update, cfg);
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            batch.push(actor.run_segment(&snapshot, cfg.unroll)?);
        }
        learner.update(params, &batch, update)?;
    }
    Ok(())
}

fn run_threaded(
    learner: &mut Learner<'_>,
    params: &mut AgentParams<f32>,
    actors: &mut [Actor],
    cfg: &StageConfig,
    total_updates: u64,
) -> Result<(), TrainError> {
    let segments_needed = total_updates * cfg.segments_per_update();
    let budget = AtomicU64::new(segments_needed);
    let stop = AtomicBool::new(false);
    let shared = RwLock::new(Arc::new(snapshot_of(params, 0, cfg)));
    let (tx, rx) = bounded::<Result<Trajectory, TrainError>>(4 * cfg.batch);
    let timeout = Duration::from_secs(cfg.queue_timeout_secs.max(1));

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for actor in actors.iter_mut() {
            let tx = tx.clone();
            let (budget, stop, shared) = (&budget, &stop, &shared);
            handles.push(scope.spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let claimed = budget
                        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
                        .is_ok();
                    if !claimed {
                        break;
                    }
                    let snap = shared.read().clone();
                    let seg = actor.run_segment(&snap, cfg.unroll);
                    let failed = seg.is_err();
                    if tx.send(seg).is_err() || failed {
                        break;
                    }
                }
            }));
        }
        drop(tx);

        let result = (|| {
            let mut received = 0u64;
            for update in 0..total_updates {
                let mut batch = Vec::with_capacity(cfg.batch);
                while batch.len() < cfg.batch {
                    match rx.recv_timeout(timeout) {
                        Ok(seg) => {
                            batch.push(seg?);
                            received += 1;
                        }
                        Err(RecvTimeoutError::Timeout) => {
                            return Err(TrainError::Starvation { waited: timeout, received })
                        }
                        Err(RecvTimeoutError::Disconnected) => return Err(TrainError::ActorPanic),
                    }
                }
                learner.update(params, &batch, update)?;
                *shared.write() = Arc::new(snapshot_of(params, update + 1, cfg));
            }
            Ok(())
        })();
        stop.store(true, Ordering::Relaxed);
        drop(rx);
        let mut panicked = false;
        for h in handles {
            panicked |= h.join().is_err();
        }
        match result {
            Err(e) => Err(e),
            Ok(()) if panicked => Err(TrainError::ActorPanic),
            Ok(()) => Ok(()),
        }
    })
}

/// Saves agent parameters with their config as the architecture record.
pub fn save_params(params: &AgentParams<f32>, path: &Path) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    save_checkpoint(&params.store, &params.arch_json(), path)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<AgentParams<f32>, TrainError> {
    if !path.exists() {
        return Err(TrainError::MissingCheckpoint(path.to_path_buf()));
    }
    let (store, header) = crate::nn::load_checkpoint::<f32>(path)?;
    let config: AgentConfig = serde_json::from_value(header.arch)
        .map_err(|e| NnError::CorruptHeader(format!("architecture record: {e}")))?;
    Ok(AgentParams { config, store })
}
