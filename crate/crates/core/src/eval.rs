//! Zero-shot evaluation and paired comparison of evaluation reports.

use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{self, init_state, AgentError, AgentParams, StepContext, ViewMode};
use crate::citygraph::CityError;
use crate::env::{Action, CourierEnv, StepRecord, World};
use crate::nn::tape::log_softmax_row;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    City(#[from] CityError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("reports are not comparable: {0}")]
    Incomparable(String),
    #[error("evaluation needs at least one seed and one episode")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Episodes per seed.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub greedy: bool,
    pub max_goal_distance: f64,
    /// Ground-logit probability when evaluating under both views.
    pub p_ground: f64,
    /// Keep per-step records for trajectory dumps.
    pub record_steps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            seeds: vec![1, 2, 3, 4, 5],
            greedy: false,
            max_goal_distance: 400.0,
            p_ground: 0.5,
            record_steps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub episode: usize,
    pub reward: f64,
    pub goals_completed: u32,
    pub goals_assigned: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub reward_mean: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub region: String,
    pub view_mode: ViewMode,
    pub greedy: bool,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub reward_mean: f64,
    /// Standard error of the per-seed means.
    pub reward_stderr: f64,
    /// Goals completed over goals assigned, pooled over all episodes.
    pub success_rate: f64,
    pub success_stderr: f64,
    /// The region's locale did not exist and was default-initialized for this run.
    pub fresh_locale: bool,
    pub per_seed: Vec<SeedResult>,
    pub per_episode: Vec<EpisodeResult>,
    #[serde(skip)]
    pub steps: Vec<StepRecord>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn pooled_success(eps: &[EpisodeResult]) -> f64 {
    let done: u64 = eps.iter().map(|e| e.goals_completed as u64).sum();
    let assigned: u64 = eps.iter().map(|e| e.goals_assigned as u64).sum();
    if assigned == 0 {
        0.0
    } else {
        done as f64 / assigned as f64
    }
}

fn run_seed(
    params: &AgentParams<f32>,
    world: &Arc<World>,
    region: &str,
    mode: ViewMode,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(Vec<EpisodeResult>, Vec<StepRecord>), EvalError> {
    let mut env = CourierEnv::new(world.clone(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    let mut results = Vec::with_capacity(cfg.episodes);
    let mut records = Vec::new();
    for episode in 0..cfg.episodes {
        let mut obs = env.reset(region, cfg.max_goal_distance)?;
        let mut states = init_state(&params.config, mode);
        let mut ctx = StepContext::default();
        while !env.is_done() {
            let (out, next) = agent::forward(params, region, &obs, ctx, &states, mode)?;
            let (_, logits) = agent::view_dropout_select(&mut rng, cfg.p_ground, &out, mode)?;
            let a = agent::act(logits, &mut rng, cfg.greedy);
            let pose = env.pose();
            let goal = env.goal();
            let step = env.step(Action::from_index(a).expect("valid action"));
            if cfg.record_steps {
                records.push(StepRecord {
                    seed,
                    episode,
                    t: env.step_count() - 1,
                    node: pose.node,
                    heading: pose.heading,
                    action: a,
                    reward: step.reward,
                    goal,
                    goal_reached: step.info.goal_reached,
                });
            }
            states = next;
            ctx = StepContext {
                prev_action: Some(a),
                prev_reward: step.reward as f32,
            };
            obs = step.observation;
        }
        results.push(EpisodeResult {
            seed,
            episode,
            reward: env.episode_reward(),
            goals_completed: env.goals_completed(),
            goals_assigned: env.goals_assigned(),
        });
    }
    Ok((results, records))
}

/// Runs `cfg.episodes` full episodes per seed with no learning.
///
/// A missing locale for `region` is default-initialized on a private copy
/// and flagged in the report.
pub fn evaluate(
    params: &AgentParams<f32>,
    world: Arc<World>,
    region: &str,
    mode: ViewMode,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if cfg.seeds.is_empty() || cfg.episodes == 0 {
        return Err(EvalError::Empty);
    }
    world.graph.region(region)?;
    let fresh;
    let local;
    let params = if params.has_locale(region) {
        fresh = false;
        params
    } else {
        fresh = true;
        let mut p = params.clone();
        p.ensure_locale(region);
        local = p;
        &local
    };

    let per_seed_runs: Vec<Result<_, EvalError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let world = &world;
                scope.spawn(move || run_seed(params, world, region, mode, cfg, seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });

    let mut per_episode = Vec::new();
    let mut per_seed = Vec::new();
    let mut steps = Vec::new();
    for (run, &seed) in per_seed_runs.into_iter().zip(&cfg.seeds) {
        let (eps, recs) = run?;
        let reward_mean = eps.iter().map(|e| e.reward).sum::<f64>() / eps.len() as f64;
        per_seed.push(SeedResult {
            seed,
            reward_mean,
            success_rate: pooled_success(&eps),
        });
        per_episode.extend(eps);
        steps.extend(recs);
    }
    let rewards: Vec<f64> = per_seed.iter().map(|s| s.reward_mean).collect();
    let successes: Vec<f64> = per_seed.iter().map(|s| s.success_rate).collect();
    let (reward_mean, reward_stderr) = mean_stderr(&rewards);
    let (_, success_stderr) = mean_stderr(&successes);
    Ok(EvalReport {
        region: region.to_string(),
        view_mode: mode,
        greedy: cfg.greedy,
        episodes: per_episode.len(),
        seeds: cfg.seeds.clone(),
        reward_mean,
        reward_stderr,
        success_rate: pooled_success(&per_episode),
        success_stderr,
        fresh_locale: fresh,
        per_seed,
        per_episode,
        steps,
    })
}

/// Recomputes `(reward_mean over episodes, pooled success rate)` from step records.
pub fn replay_summary(records: &[StepRecord]) -> (f64, f64) {
    use std::collections::BTreeMap;
    let mut eps: BTreeMap<(u64, usize), (f64, u32)> = BTreeMap::new();
    for r in records {
        let e = eps.entry((r.seed, r.episode)).or_default();
        e.0 += r.reward;
        e.1 += r.goal_reached as u32;
    }
    if eps.is_empty() {
        return (0.0, 0.0);
    }
    let n = eps.len() as f64;
    let reward = eps.values().map(|e| e.0).sum::<f64>() / n;
    let done: u64 = eps.values().map(|e| e.1 as u64).sum();
    let assigned: u64 = eps.values().map(|e| e.1 as u64 + 1).sum();
    (reward, done as f64 / assigned as f64)
}

/// Mean `KL(p_g || p_a)` between the two views' policies over `states` states
/// visited by the agent itself in fresh episodes, cycling through `regions`.
pub fn mean_policy_kl(
    params: &AgentParams<f32>,
    world: Arc<World>,
    regions: &[String],
    states: usize,
    per_episode: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if regions.is_empty() || states == 0 || per_episode == 0 {
        return Err(EvalError::Empty);
    }
    let mut env = CourierEnv::new(world, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b1d_0c75);
    let mut total = 0.0;
    let mut count = 0;
    let mut episode = 0;
    while count < states {
        let region = &regions[episode % regions.len()];
        episode += 1;
        let mut obs = env.reset(region, f64::INFINITY)?;
        let mut st = init_state(&params.config, ViewMode::Both);
        let mut ctx = StepContext::default();
        for _ in 0..per_episode {
            if count == states || env.is_done() {
                break;
            }
            let (out, next) = agent::forward(params, region, &obs, ctx, &st, ViewMode::Both)?;
            let lg: Vec<f64> = out.logits_ground.as_ref().expect("ground logits").iter().map(|&v| v as f64).collect();
            let la: Vec<f64> = out.logits_aerial.as_ref().expect("aerial logits").iter().map(|&v| v as f64).collect();
            total += kl_divergence(&lg, &la);
            count += 1;
            let (_, logits) = agent::view_dropout_select(&mut rng, 0.5, &out, ViewMode::Both)?;
            let a = agent::act(logits, &mut rng, false);
            let step = env.step(Action::from_index(a).expect("valid action"));
            st = next;
            ctx = StepContext {
                prev_action: Some(a),
                prev_reward: step.reward as f32,
            };
            obs = step.observation;
        }
    }
    Ok(total / count as f64)
}

/// `KL(softmax(p) || softmax(q))` computed with log-softmax.
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax_row(p_logits);
    let lq = log_softmax_row(q_logits);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// One-sided exact binomial sign test: `P(X >= wins)` for `X ~ Bin(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    assert!(wins <= n, "more wins than trials");
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k >= wins {
            p += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    p / 2f64.powi(n as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label_a: String,
    pub label_b: String,
    pub seeds: Vec<u64>,
    /// Per-seed `a - b` of mean episode reward.
    pub differences: Vec<f64>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign test that `a` beats `b`; ties are dropped.
    pub p_value: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_ratio: f64,
    pub success_a: f64,
    pub success_b: f64,
}

impl Comparison {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else if b == 0.0 {
        f64::INFINITY * a.signum()
    } else {
        a / b
    }
}

/// Paired per-seed comparison of two evaluations of the same protocol.
pub fn compare(a: &EvalReport, b: &EvalReport, label_a: &str, label_b: &str) -> Result<Comparison, EvalError> {
    let seeds_a: Vec<u64> = a.per_seed.iter().map(|s| s.seed).collect();
    let seeds_b: Vec<u64> = b.per_seed.iter().map(|s| s.seed).collect();
    if seeds_a != seeds_b {
        return Err(EvalError::Incomparable(format!("seed lists differ: {seeds_a:?} vs {seeds_b:?}")));
    }
    if a.region != b.region {
        return Err(EvalError::Incomparable(format!("regions differ: {} vs {}", a.region, b.region)));
    }
    if seeds_a.is_empty() {
        return Err(EvalError::Empty);
    }
    let xs: Vec<f64> = a.per_seed.iter().map(|s| s.reward_mean).collect();
    let ys: Vec<f64> = b.per_seed.iter().map(|s| s.reward_mean).collect();
    Ok(compare_paired(&xs, &ys, &seeds_a, label_a, label_b, a.success_rate, b.success_rate))
}

/// Sign-test summary over paired per-seed scores.
pub fn compare_paired(
    xs: &[f64],
    ys: &[f64],
    seeds: &[u64],
    label_a: &str,
    label_b: &str,
    success_a: f64,
    success_b: f64,
) -> Comparison {
    assert_eq!(xs.len(), ys.len(), "paired samples differ in length");
    let differences: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let wins = differences.iter().filter(|d| **d > 0.0).count();
    let losses = differences.iter().filter(|d| **d < 0.0).count();
    let ties = differences.len() - wins - losses;
    let mean_a = xs.iter().sum::<f64>() / xs.len() as f64;
    let mean_b = ys.iter().sum::<f64>() / ys.len() as f64;
    Comparison {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        seeds: seeds.to_vec(),
        differences,
        wins,
        losses,
        ties,
        p_value: sign_test_p(wins, wins + losses),
        mean_a,
        mean_b,
        mean_ratio: ratio(mean_a, mean_b),
        success_a,
        success_b,
    }
}

impl std::fmt::Display for Comparison {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} vs {} over seeds {:?}", self.label_a, self.label_b, self.seeds)?;
        writeln!(f, "  mean reward   {:.4} vs {:.4} (ratio {:.4})", self.mean_a, self.mean_b, self.mean_ratio)?;
        writeln!(f, "  success rate  {:.4} vs {:.4}", self.success_a, self.success_b)?;
        writeln!(f, "  wins/losses/ties {}/{}/{}", self.wins, self.losses, self.ties)?;
        write!(f, "  one-sided sign test p = {:.6}", self.p_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_all_wins() {
        for n in 1..10 {
            assert!((sign_test_p(n, n) - 0.5f64.powi(n as i32)).abs() < 1e-15);
        }
        assert_eq!(sign_test_p(0, 0), 1.0);
        assert!((sign_test_p(0, 5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_is_ratio_one() {
        let c = compare_paired(&[1.0, 2.0], &[1.0, 2.0], &[1, 2], "a", "b", 0.1, 0.1);
        assert_eq!(c.mean_ratio, 1.0);
        assert_eq!(c.ties, 2);
        assert_eq!(c.p_value, 1.0);
        assert!(!c.significant(0.1));
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        assert_eq!(mean_stderr(&[3.0]), (3.0, 0.0));
    }
}
