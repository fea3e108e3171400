use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{self, init_state, AgentParams, StepContext, ViewMode, ViewStates};
use crate::env::{Action, CourierEnv, Observation, World};
use crate::trajectory::{EpisodeSummary, Trajectory};

use super::TrainError;

/// Immutable parameter snapshot published by the learner.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub version: u64,
    pub params: AgentParams<f32>,
    pub max_goal_distance: f64,
}

/// One environment plus the recurrent state that carries across segments.
pub struct Actor {
    env: CourierEnv,
    rng: ChaCha8Rng,
    regions: Vec<String>,
    next_region: usize,
    mode: ViewMode,
    p_ground: f64,
    states: ViewStates<f32>,
    obs: Option<Observation>,
    ctx: StepContext,
    region_visits: Vec<u64>,
    steps: u64,
}

impl Actor {
    /// `first_region` offsets the round-robin so concurrent actors spread over regions.
    pub fn new(
        world: Arc<World>,
        regions: Vec<String>,
        first_region: usize,
        mode: ViewMode,
        p_ground: f64,
        seed: u64,
        config: &agent::AgentConfig,
    ) -> Self {
        assert!(!regions.is_empty(), "actor needs at least one region");
        let n = regions.len();
        Self {
            env: CourierEnv::new(world, seed),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            regions,
            next_region: first_region % n,
            mode,
            p_ground,
            states: init_state(config, mode),
            obs: None,
            ctx: StepContext::default(),
            region_visits: vec![0; n],
            steps: 0,
        }
    }

    pub fn region_visits(&self) -> &[u64] {
        &self.region_visits
    }

    /// Environment steps emitted in segments so far.
    pub fn steps_produced(&self) -> u64 {
        self.steps
    }

    fn start_episode(&mut self, snapshot: &Snapshot) -> Result<(), TrainError> {
        let region = self.regions[self.next_region].clone();
        self.region_visits[self.next_region] += 1;
        self.next_region = (self.next_region + 1) % self.regions.len();
        let obs = self.env.reset(&region, snapshot.max_goal_distance)?;
        self.obs = Some(obs);
        self.states = init_state(&snapshot.params.config, self.mode);
        self.ctx = StepContext::default();
        Ok(())
    }

    /// Rolls `unroll` steps under `snapshot`.
    ///
    /// Regions only change when an episode ends exactly on a segment boundary,
    /// so every segment belongs to a single region.
    pub fn run_segment(&mut self, snapshot: &Snapshot, unroll: usize) -> Result<Trajectory, TrainError> {
        if self.obs.is_none() || self.env.is_done() {
            self.start_episode(snapshot)?;
        }
        self.env.set_max_goal_distance(snapshot.max_goal_distance);
        let region = self.env.region().to_string();
        let params = &snapshot.params;
        let mut traj = Trajectory {
            region: region.clone(),
            mode: self.mode,
            snapshot_version: snapshot.version,
            initial_states: self.states.clone(),
            observations: Vec::with_capacity(unroll),
            contexts: Vec::with_capacity(unroll),
            actions: Vec::with_capacity(unroll),
            rewards: Vec::with_capacity(unroll),
            behavior_logits: Vec::with_capacity(unroll),
            views: Vec::with_capacity(unroll),
            values: Vec::with_capacity(unroll),
            episode_end: Vec::with_capacity(unroll),
            bootstrap: 0.0,
            episodes: Vec::new(),
        };
        for _ in 0..unroll {
            if self.env.is_done() {
                // mid-segment reset stays in the segment's region
                let obs = self.env.reset(&region, snapshot.max_goal_distance)?;
                self.obs = Some(obs);
                self.states = init_state(&params.config, self.mode);
                self.ctx = StepContext::default();
            }
            let obs = self.obs.take().expect("observation present");
            let (out, next) = agent::forward(params, &region, &obs, self.ctx, &self.states, self.mode)?;
            let (view, logits) = agent::view_dropout_select(&mut self.rng, self.p_ground, &out, self.mode)?;
            let action = agent::act(logits, &mut self.rng, false);
            let behavior: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
            let step = self.env.step(Action::from_index(action).expect("valid action"));

            traj.observations.push(strip_unused(obs, self.mode));
            traj.contexts.push(self.ctx);
            traj.actions.push(action);
            traj.rewards.push(step.reward);
            self.steps += 1;
            traj.behavior_logits.push(behavior);
            traj.views.push(view);
            traj.values.push(out.value as f64);
            traj.episode_end.push(step.episode_done);
            if step.episode_done {
                traj.episodes.push(EpisodeSummary {
                    reward: self.env.episode_reward(),
                    goals_completed: self.env.goals_completed(),
                    goals_assigned: self.env.goals_assigned(),
                });
            }
            self.states = next;
            self.ctx = StepContext {
                prev_action: Some(action),
                prev_reward: step.reward as f32,
            };
            self.obs = Some(step.observation);
        }
        if !self.env.is_done() {
            let obs = self.obs.as_ref().expect("observation present");
            let (out, _) = agent::forward(params, &region, obs, self.ctx, &self.states, self.mode)?;
            traj.bootstrap = out.value as f64;
        }
        Ok(traj)
    }
}

fn strip_unused(mut obs: Observation, mode: ViewMode) -> Observation {
    match mode {
        ViewMode::Both => {}
        ViewMode::GroundOnly => obs.aerial = Vec::new(),
        ViewMode::AerialOnly => obs.ground = Vec::new(),
    }
    obs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use crate::citygraph::{generate_city, CityGenConfig, RegionRole};
    use crate::env::EnvConfig;

    fn setup() -> (Arc<World>, Snapshot) {
        let cfg = CityGenConfig {
            region_cells: 8,
            ..CityGenConfig::default()
        };
        let world = World::new(generate_city(4, &cfg).unwrap(), EnvConfig::default());
        let mut c = AgentConfig::for_world(&world);
        c.encoder_hidden = 8;
        c.embed = 8;
        c.locale_hidden = 8;
        c.policy_hidden = 8;
        let params = AgentParams::init(c, &world.graph.region_names(RegionRole::Train));
        let snap = Snapshot {
            version: 0,
            params,
            max_goal_distance: 80.0,
        };
        (world, snap)
    }

    fn regions() -> Vec<String> {
        vec!["train0".into(), "train1".into()]
    }

    #[test]
    fn segments_have_fixed_length_and_single_region() {
        let (world, snap) = setup();
        let mut a = Actor::new(world, regions(), 0, ViewMode::Both, 0.5, 1, &snap.params.config);
        for _ in 0..25 {
            let t = a.run_segment(&snap, 50).unwrap();
            assert_eq!(t.len(), 50);
            assert!(t.is_consistent());
        }
        assert_eq!(a.steps_produced(), 1250);
        assert_eq!(a.region_visits(), &[1, 1]);
    }

    #[test]
    fn behavior_logits_match_snapshot_replay() {
        let (world, snap) = setup();
        let mut a = Actor::new(world, regions(), 1, ViewMode::Both, 0.5, 2, &snap.params.config);
        let t = a.run_segment(&snap, 20).unwrap();
        let mut states = t.initial_states.clone();
        for s in 0..t.len() {
            let (out, next) = agent::forward(&snap.params, &t.region, &t.observations[s], t.contexts[s], &states, t.mode).unwrap();
            let replayed: Vec<f64> = out.logits(t.views[s]).unwrap().iter().map(|&v| v as f64).collect();
            assert_eq!(replayed, t.behavior_logits[s]);
            assert_eq!(out.value as f64, t.values[s]);
            states = next;
        }
    }

    #[test]
    fn single_view_segments_strip_the_other_raster() {
        let (world, snap) = setup();
        let mut a = Actor::new(world, regions(), 0, ViewMode::GroundOnly, 0.5, 3, &snap.params.config);
        let t = a.run_segment(&snap, 10).unwrap();
        assert!(t.observations.iter().all(|o| o.aerial.is_empty() && !o.ground.is_empty()));
        assert!(t.views.iter().all(|&v| v == crate::agent::View::Ground));
    }

    #[test]
    fn region_visits_balance_across_actors() {
        let (world, snap) = setup();
        let mut visits = [0u64; 2];
        for i in 0..4 {
            let mut a = Actor::new(world.clone(), regions(), i, ViewMode::GroundOnly, 0.5, 10 + i as u64, &snap.params.config);
            for _ in 0..200 {
                a.run_segment(&snap, 50).unwrap();
            }
            visits[0] += a.region_visits()[0];
            visits[1] += a.region_visits()[1];
        }
        let (lo, hi) = (visits[0].min(visits[1]) as f64, visits[0].max(visits[1]) as f64);
        assert!(hi / lo <= 1.05, "{visits:?}");
    }
}
