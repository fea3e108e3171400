//! The courier task: reach goal coordinates on the street graph as fast as possible.

pub mod render;

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::citygraph::{
    angular_difference, bird_flight_distance, normalize_degrees, Bounds, CityError, CityGraph,
    NodeId, Position,
};
pub use render::{render_aerial, render_ground, RenderConfig, StreetMap};

pub const NUM_ACTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward = 0,
    LeftSmall = 1,
    RightSmall = 2,
    LeftLarge = 3,
    RightLarge = 4,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Forward,
        Action::LeftSmall,
        Action::RightSmall,
        Action::LeftLarge,
        Action::RightLarge,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub goal_tolerance: f64,
    pub early_radius: f64,
    pub early_fraction: f64,
    /// Goal reward per unit of start-to-goal bird-flight distance.
    pub reward_scale: f64,
    pub episode_length: u32,
    pub cone_half_angle: f64,
    pub small_turn: f64,
    pub large_turn: f64,
    pub render: RenderConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            goal_tolerance: 100.0,
            early_radius: 200.0,
            early_fraction: 0.5,
            reward_scale: 0.01,
            episode_length: 1000,
            cone_half_angle: 30.0,
            small_turn: 22.5,
            large_turn: 67.5,
            render: RenderConfig::default(),
        }
    }
}

/// Graph plus its rasterized street map; shared read-only by every environment.
#[derive(Debug)]
pub struct World {
    pub graph: CityGraph,
    pub map: StreetMap,
    pub config: EnvConfig,
    nan_ground: bool,
    nan_aerial: bool,
}

impl World {
    pub fn new(graph: CityGraph, config: EnvConfig) -> Arc<Self> {
        Self::poisoned(graph, config, false, false)
    }

    /// A world whose selected rasters are all NaN, for checking that a view is never read.
    pub fn poisoned(graph: CityGraph, config: EnvConfig, ground: bool, aerial: bool) -> Arc<Self> {
        let map = StreetMap::build(&graph, &config.render);
        Arc::new(Self {
            graph,
            map,
            config,
            nan_ground: ground,
            nan_aerial: aerial,
        })
    }

    pub fn ground_shape(&self) -> (usize, usize) {
        let r = &self.config.render;
        (r.rays, r.ground_channels(self.map.categories))
    }

    pub fn aerial_shape(&self) -> (usize, usize, usize) {
        let r = &self.config.render;
        (r.aerial_size, r.aerial_size, r.aerial_channels(self.map.categories))
    }

    pub fn render_ground(&self, pose: &AgentPose) -> Vec<f32> {
        if self.nan_ground {
            let (r, c) = self.ground_shape();
            return vec![f32::NAN; r * c];
        }
        render_ground(
            &self.map,
            &self.config.render,
            self.graph.position(pose.node),
            normalize_degrees(pose.heading),
        )
    }

    pub fn render_aerial(&self, pose: &AgentPose) -> Vec<f32> {
        if self.nan_aerial {
            let (h, w, c) = self.aerial_shape();
            return vec![f32::NAN; h * w * c];
        }
        render_aerial(
            &self.map,
            &self.config.render,
            self.graph.position(pose.node),
            normalize_degrees(pose.heading),
        )
    }

    pub fn observe(&self, pose: &AgentPose, goal: NodeId, region: &Bounds) -> Observation {
        let h = pose.heading.to_radians();
        Observation {
            ground: self.render_ground(pose),
            aerial: self.render_aerial(pose),
            goal: goal_encoding(self.graph.position(goal), region),
            heading_target: [h.sin() as f32, h.cos() as f32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub node: NodeId,
    /// Degrees clockwise from North, in `[0, 360)`.
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `rays x channels`, row-major.
    pub ground: Vec<f32>,
    /// `size x size x channels`, row-major.
    pub aerial: Vec<f32>,
    pub goal: [f32; 2],
    pub heading_target: [f32; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    pub goal_reached: bool,
    pub goals_completed: u32,
    pub distance_to_goal: f64,
    pub wasted_action: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub episode_done: bool,
    pub info: StepInfo,
}

/// Max goal distance schedule over learner updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub d_start: f64,
    pub d_end: f64,
    pub ramp_steps: u64,
    pub enabled: bool,
}

impl CurriculumSchedule {
    pub fn fixed(d: f64) -> Self {
        Self {
            d_start: d,
            d_end: d,
            ramp_steps: 0,
            enabled: false,
        }
    }

    /// Linear from `d_start` to `d_end` over `ramp_steps`, then flat; `d_end` when disabled.
    pub fn level(&self, update_index: u64) -> f64 {
        if !self.enabled || self.ramp_steps == 0 || update_index >= self.ramp_steps {
            return self.d_end;
        }
        let t = update_index as f64 / self.ramp_steps as f64;
        self.d_start + (self.d_end - self.d_start) * t
    }
}

/// Affine map of a goal position into `[-1, 1]^2` over the region bounds.
pub fn goal_encoding(goal: Position, region: &Bounds) -> [f32; 2] {
    let ex = |v: f64, lo: f64, hi: f64| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0) as f32;
    [
        ex(goal.x, region.min_x, region.max_x),
        ex(goal.y, region.min_y, region.max_y),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub seed: u64,
    pub episode: usize,
    pub t: u32,
    pub node: NodeId,
    pub heading: f64,
    pub action: usize,
    pub reward: f64,
    pub goal: NodeId,
    pub goal_reached: bool,
}

/// One JSON object per line.
pub fn write_trajectory_jsonl<W: Write>(out: &mut W, records: &[StepRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Single-owner courier environment over a shared [`World`].
#[derive(Debug, Clone)]
pub struct CourierEnv {
    world: Arc<World>,
    rng: ChaCha8Rng,
    region: String,
    bounds: Bounds,
    pose: AgentPose,
    goal: NodeId,
    goal_start: Position,
    early_granted: bool,
    max_goal_distance: f64,
    step_count: u32,
    done: bool,
    started: bool,
    goals_completed: u32,
    goals_assigned: u32,
    episode_reward: f64,
    fallback_goals: u64,
}

impl CourierEnv {
    pub fn new(world: Arc<World>, seed: u64) -> Self {
        let first = world
            .graph
            .regions
            .values()
            .next()
            .expect("graph has regions")
            .clone();
        let node = *first.node_ids.iter().next().unwrap();
        Self {
            world,
            rng: ChaCha8Rng::seed_from_u64(seed),
            region: first.name.clone(),
            bounds: first.bounds,
            pose: AgentPose { node, heading: 0.0 },
            goal: node,
            goal_start: Position::new(0.0, 0.0),
            early_granted: false,
            max_goal_distance: 0.0,
            step_count: 0,
            done: true,
            started: false,
            goals_completed: 0,
            goals_assigned: 0,
            episode_reward: 0.0,
            fallback_goals: 0,
        }
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    /// Starts a new episode: uniform node, heading snapped to 22.5 degrees, fresh goal.
    pub fn reset(&mut self, region: &str, max_goal_distance: f64) -> Result<Observation, CityError> {
        let spec = self.world.graph.region(region)?.clone();
        let nodes: Vec<NodeId> = spec.node_ids.iter().copied().collect();
        let node = nodes[self.rng.gen_range(0..nodes.len())];
        let heading = self.rng.gen_range(0..16) as f64 * 22.5;
        self.region = spec.name.clone();
        self.bounds = spec.bounds;
        self.pose = AgentPose { node, heading };
        self.max_goal_distance = max_goal_distance;
        self.step_count = 0;
        self.done = false;
        self.started = true;
        self.goals_completed = 0;
        self.goals_assigned = 0;
        self.episode_reward = 0.0;
        self.assign_goal()?;
        Ok(self.observe())
    }

    /// Applies to goals sampled from now on.
    pub fn set_max_goal_distance(&mut self, d: f64) {
        self.max_goal_distance = d;
    }

    fn assign_goal(&mut self) -> Result<(), CityError> {
        let cfg = &self.world.config;
        let sample = self.world.graph.sample_goal(
            &self.region,
            self.pose.node,
            cfg.goal_tolerance,
            self.max_goal_distance,
            &mut self.rng,
        )?;
        if sample.fallback {
            self.fallback_goals += 1;
        }
        self.goal = sample.node;
        self.goal_start = self.world.graph.position(self.pose.node);
        self.goals_assigned += 1;
        // goals sampled inside the early ring never pay the early reward
        self.early_granted = self.distance_to_goal() <= cfg.early_radius;
        Ok(())
    }

    pub fn observe(&self) -> Observation {
        self.world.observe(&self.pose, self.goal, &self.bounds)
    }

    pub fn distance_to_goal(&self) -> f64 {
        bird_flight_distance(
            self.world.graph.position(self.pose.node),
            self.world.graph.position(self.goal),
        )
    }

    /// Reward paid when the current goal is reached.
    pub fn goal_reward(&self) -> f64 {
        self.world.config.reward_scale
            * bird_flight_distance(self.goal_start, self.world.graph.position(self.goal))
    }

    /// Neighbor FORWARD would move to: inside the facing cone, closest to the
    /// heading, lower bearing on ties.
    pub fn forward_target(&self) -> Option<NodeId> {
        let cone = self.world.config.cone_half_angle;
        self.world
            .graph
            .neighbors(self.pose.node)
            .into_iter()
            .map(|n| (angular_difference(n.bearing, self.pose.heading), n.bearing, n.node))
            .filter(|&(diff, _, _)| diff <= cone)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
            .map(|(_, _, node)| node)
    }

    /// Panics if the episode is finished or was never reset.
    pub fn step(&mut self, action: Action) -> StepResult {
        assert!(self.started, "step() before reset()");
        assert!(!self.done, "step() on a finished episode");
        let world = Arc::clone(&self.world);
        let cfg = &world.config;
        let mut wasted = false;
        match action {
            Action::Forward => match self.forward_target() {
                Some(n) => self.pose.node = n,
                None => wasted = true,
            },
            Action::LeftSmall => self.turn(-cfg.small_turn),
            Action::RightSmall => self.turn(cfg.small_turn),
            Action::LeftLarge => self.turn(-cfg.large_turn),
            Action::RightLarge => self.turn(cfg.large_turn),
        }
        self.step_count += 1;

        let mut reward = 0.0;
        let mut goal_reached = false;
        let dist = self.distance_to_goal();
        if !self.early_granted && dist <= cfg.early_radius {
            reward += cfg.early_fraction * self.goal_reward();
            self.early_granted = true;
        }
        if dist <= cfg.goal_tolerance {
            reward += self.goal_reward();
            self.goals_completed += 1;
            goal_reached = true;
            self.assign_goal()
                .expect("current region was validated at reset");
        }
        self.episode_reward += reward;
        self.done = self.step_count >= cfg.episode_length;
        StepResult {
            observation: self.observe(),
            reward,
            episode_done: self.done,
            info: StepInfo {
                goal_reached,
                goals_completed: self.goals_completed,
                distance_to_goal: self.distance_to_goal(),
                wasted_action: wasted,
            },
        }
    }

    fn turn(&mut self, delta: f64) {
        self.pose.heading = normalize_degrees(self.pose.heading + delta);
    }

    pub fn pose(&self) -> AgentPose {
        self.pose
    }

    /// Places the agent directly; for scripted tests and replays.
    pub fn set_pose(&mut self, pose: AgentPose) {
        self.pose = AgentPose {
            node: pose.node,
            heading: normalize_degrees(pose.heading),
        };
    }

    /// Overrides the current goal as if it had just been sampled at the current pose.
    pub fn set_goal(&mut self, goal: NodeId) {
        self.goal = goal;
        self.goal_start = self.world.graph.position(self.pose.node);
        self.early_granted = self.distance_to_goal() <= self.world.config.early_radius;
    }

    pub fn goal(&self) -> NodeId {
        self.goal
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn step_count(&self) -> u32 {
        self.step_count
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn goals_completed(&self) -> u32 {
        self.goals_completed
    }

    pub fn goals_assigned(&self) -> u32 {
        self.goals_assigned
    }

    pub fn episode_reward(&self) -> f64 {
        self.episode_reward
    }

    /// Goals completed over goals assigned in the current episode.
    pub fn success_rate(&self) -> f64 {
        if self.goals_assigned == 0 {
            0.0
        } else {
            self.goals_completed as f64 / self.goals_assigned as f64
        }
    }

    /// Goal samples that found no eligible node and fell back to the farthest one.
    pub fn fallback_goals(&self) -> u64 {
        self.fallback_goals
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygraph::{generate_city, CityGenConfig};

    fn grid(cells: usize) -> Arc<World> {
        let cfg = CityGenConfig {
            region_cells: cells,
            train_regions: 1,
            landmark_density: 0.0,
            ..CityGenConfig::unjittered()
        };
        World::new(generate_city(5, &cfg).unwrap(), EnvConfig::default())
    }

    /// Node at grid offset `(i, j)` pitches from the south-west corner of `train0`.
    fn node(world: &World, i: usize, j: usize) -> NodeId {
        let b = world.graph.region("train0").unwrap().bounds;
        let p = world.graph.config.pitch;
        let target = Position::new(b.min_x + i as f64 * p, b.min_y + j as f64 * p);
        *world
            .graph
            .region("train0")
            .unwrap()
            .node_ids
            .iter()
            .find(|&&n| bird_flight_distance(world.graph.position(n), target) < 1e-9)
            .unwrap()
    }

    fn env_at(world: &Arc<World>, i: usize, j: usize, heading: f64) -> CourierEnv {
        let mut env = CourierEnv::new(Arc::clone(world), 0);
        env.reset("train0", 400.0).unwrap();
        env.set_pose(AgentPose {
            node: node(world, i, j),
            heading,
        });
        env
    }

    #[test]
    fn turns_move_heading_by_fixed_angles() {
        let w = grid(8);
        let mut env = env_at(&w, 4, 4, 0.0);
        env.set_goal(node(&w, 0, 0));
        env.step(Action::LeftSmall);
        assert_eq!(env.pose().heading, 337.5);
        env.step(Action::RightLarge);
        assert_eq!(env.pose().heading, 45.0);
        env.step(Action::LeftLarge);
        assert_eq!(env.pose().heading, 337.5);
        env.step(Action::RightSmall);
        assert_eq!(env.pose().heading, 0.0);
    }

    #[test]
    fn forward_respects_facing_cone() {
        let w = grid(24);
        let mut env = env_at(&w, 4, 4, 22.5);
        env.set_goal(node(&w, 24, 24));
        let r = env.step(Action::Forward);
        assert_eq!(env.pose().node, node(&w, 4, 5));
        assert!(!r.info.wasted_action);

        let mut env = env_at(&w, 4, 4, 45.0);
        env.set_goal(node(&w, 24, 24));
        let before = env.pose();
        let r = env.step(Action::Forward);
        assert_eq!(env.pose(), before);
        assert!(r.info.wasted_action);
        assert_eq!(r.reward, 0.0);

        let mut env = env_at(&w, 4, 4, 90.0);
        env.set_goal(node(&w, 24, 24));
        env.step(Action::Forward);
        assert_eq!(env.pose().node, node(&w, 5, 4));
    }

    #[test]
    fn forward_blocked_at_region_edge() {
        let w = grid(8);
        let mut env = env_at(&w, 0, 4, 270.0);
        env.set_goal(node(&w, 8, 8));
        assert!(env.step(Action::Forward).info.wasted_action);
    }

    #[test]
    fn walk_to_goal_pays_early_then_full_reward() {
        let w = grid(60);
        let mut env = env_at(&w, 0, 10, 90.0);
        env.set_goal(node(&w, 50, 10));
        let mut rewards = Vec::new();
        let mut reached_at = None;
        for k in 1..=50 {
            let r = env.step(Action::Forward);
            rewards.push(r.reward);
            if r.info.goal_reached {
                reached_at = Some(k);
                break;
            }
        }
        // ring at 200 units is first entered after 30 moves, tolerance at 40
        assert_eq!(reached_at, Some(40));
        let paid: Vec<(usize, f64)> = rewards.iter().copied().enumerate().filter(|&(_, r)| r > 0.0).collect();
        assert_eq!(paid, vec![(29, 2.5), (39, 5.0)]);
        assert_eq!(env.goals_completed(), 1);
        assert_eq!(env.goals_assigned(), 2);
        assert_eq!(env.episode_reward(), 7.5);
    }

    #[test]
    fn goal_reward_proportional_to_start_distance() {
        let w = grid(60);
        for (gi, expect) in [(30, 3.0), (45, 4.5), (60, 6.0)] {
            let mut env = env_at(&w, 0, 0, 90.0);
            env.set_goal(node(&w, gi, 0));
            assert_eq!(env.goal_reward(), expect);
        }
    }

    #[test]
    fn goal_inside_ring_gets_no_early_reward() {
        let w = grid(60);
        let mut env = env_at(&w, 0, 0, 90.0);
        env.set_goal(node(&w, 15, 0));
        let total: f64 = (0..5).map(|_| env.step(Action::Forward).reward).sum();
        assert_eq!(total, 1.5);
    }

    #[test]
    fn episode_ends_exactly_at_step_limit() {
        let w = grid(8);
        let mut env = CourierEnv::new(Arc::clone(&w), 3);
        env.reset("train0", 400.0).unwrap();
        for k in 1..=1000 {
            let r = env.step(Action::LeftSmall);
            assert_eq!(r.episode_done, k == 1000);
        }
        assert!(env.is_done());
    }

    #[test]
    #[should_panic(expected = "finished episode")]
    fn stepping_finished_episode_panics() {
        let w = grid(8);
        let mut env = CourierEnv::new(w, 3);
        env.reset("train0", 400.0).unwrap();
        for _ in 0..1001 {
            env.step(Action::LeftSmall);
        }
    }

    #[test]
    fn reset_is_seeded_and_respects_max_distance() {
        let w = grid(24);
        let mut a = CourierEnv::new(Arc::clone(&w), 9);
        let mut b = CourierEnv::new(Arc::clone(&w), 9);
        for _ in 0..20 {
            let oa = a.reset("train0", 150.0).unwrap();
            let ob = b.reset("train0", 150.0).unwrap();
            assert_eq!(oa, ob);
            assert_eq!((a.pose(), a.goal()), (b.pose(), b.goal()));
            assert!(a.distance_to_goal() <= 150.0 || a.fallback_goals() > 0);
            assert_eq!(a.episode_reward(), 0.0);
            assert_eq!(a.pose().heading % 22.5, 0.0);
        }
    }

    #[test]
    fn goal_encoding_corners_and_center() {
        let b = Bounds {
            min_x: 10.0,
            min_y: 20.0,
            max_x: 30.0,
            max_y: 60.0,
        };
        assert_eq!(goal_encoding(b.center(), &b), [0.0, 0.0]);
        assert_eq!(goal_encoding(Position::new(10.0, 20.0), &b), [-1.0, -1.0]);
        assert_eq!(goal_encoding(Position::new(30.0, 20.0), &b), [1.0, -1.0]);
    }

    #[test]
    fn curriculum_ramps_then_holds() {
        let c = CurriculumSchedule {
            d_start: 150.0,
            d_end: 400.0,
            ramp_steps: 10,
            enabled: true,
        };
        assert_eq!(c.level(0), 150.0);
        assert_eq!(c.level(5), 275.0);
        assert_eq!(c.level(10), 400.0);
        assert_eq!(c.level(99), 400.0);
        assert_eq!(CurriculumSchedule::fixed(300.0).level(0), 300.0);
    }

    #[test]
    fn ground_raster_sees_down_a_straight_street() {
        let w = grid(24);
        let pose = AgentPose {
            node: node(&w, 12, 2),
            heading: 0.0,
        };
        let g = w.render_ground(&pose);
        let (rays, ch) = w.ground_shape();
        let inv: Vec<f32> = (0..rays).map(|r| g[r * ch]).collect();
        let min = inv.iter().cloned().fold(f32::INFINITY, f32::min);
        for r in [rays / 2 - 1, rays / 2] {
            assert_eq!(inv[r], min);
            assert_eq!(g[r * ch + 1], 1.0);
        }
        assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
        let full_turn = AgentPose { heading: 360.0, ..pose };
        assert_eq!(w.render_ground(&full_turn), g);
    }

    #[test]
    fn aerial_raster_rotates_with_heading() {
        let w = grid(24);
        let n = node(&w, 12, 12);
        let a0 = w.render_aerial(&AgentPose { node: n, heading: 0.0 });
        let a90 = w.render_aerial(&AgentPose { node: n, heading: 90.0 });
        let (s, _, ch) = w.aerial_shape();
        let at = |a: &[f32], r: usize, c: usize| a[(r * s + c) * ch];
        for row in 0..s {
            for col in 0..s {
                let v = at(&a90, row, col);
                let (r0, c0) = (col, s - 1 - row);
                let near = (r0.saturating_sub(1)..=(r0 + 1).min(s - 1))
                    .flat_map(|r| (c0.saturating_sub(1)..=(c0 + 1).min(s - 1)).map(move |c| (r, c)))
                    .any(|(r, c)| at(&a0, r, c) == v);
                assert!(near, "cell ({row},{col})");
            }
        }
        let mid = s / 2;
        assert_eq!(a90[(mid * s + mid) * ch + ch - 1], 1.0);
        assert_eq!(a0, w.render_aerial(&AgentPose { node: n, heading: 0.0 }));
    }
}
