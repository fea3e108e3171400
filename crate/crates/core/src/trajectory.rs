use crate::agent::{StepContext, View, ViewMode, ViewStates};
use crate::env::Observation;

/// Summary of an episode that finished inside a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub reward: f64,
    pub goals_completed: u32,
    pub goals_assigned: u32,
}

impl EpisodeSummary {
    pub fn success_rate(&self) -> f64 {
        if self.goals_assigned == 0 {
            0.0
        } else {
            self.goals_completed as f64 / self.goals_assigned as f64
        }
    }
}

/// Fixed-length rollout segment produced by one actor under one snapshot.
///
/// Episode boundaries are flagged inside the segment; they never split it.
/// Observations only carry the rasters of views the mode uses.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub region: String,
    pub mode: ViewMode,
    pub snapshot_version: u64,
    pub initial_states: ViewStates<f32>,
    pub observations: Vec<Observation>,
    pub contexts: Vec<StepContext>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Logits of the view that acted, as computed by the snapshot.
    pub behavior_logits: Vec<Vec<f64>>,
    pub views: Vec<View>,
    pub values: Vec<f64>,
    /// True where the episode ended after this step.
    pub episode_end: Vec<bool>,
    /// Snapshot value of the state following the last step.
    pub bootstrap: f64,
    pub episodes: Vec<EpisodeSummary>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Checks that every per-step sequence has the same length.
    pub fn is_consistent(&self) -> bool {
        let n = self.actions.len();
        self.observations.len() == n
            && self.contexts.len() == n
            && self.rewards.len() == n
            && self.behavior_logits.len() == n
            && self.views.len() == n
            && self.values.len() == n
            && self.episode_end.len() == n
            && self.initial_states.matches(self.mode)
    }

    /// True if the recurrent state must be zeroed before step `t`.
    pub fn starts_episode(&self, t: usize) -> bool {
        t > 0 && self.episode_end[t - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{init_state, AgentConfig};

    #[test]
    fn episode_boundaries_and_consistency() {
        let cfg = AgentConfig {
            ground_rays: 1,
            ground_channels: 1,
            aerial_size: 1,
            aerial_channels: 1,
            encoder_hidden: 2,
            embed: 2,
            locale_hidden: 2,
            policy_hidden: 2,
            aerial_conv: false,
            feed_prev_action_reward: false,
            init_seed: 0,
        };
        let obs = Observation {
            ground: vec![0.0],
            aerial: Vec::new(),
            goal: [0.0, 0.0],
            heading_target: [0.0, 1.0],
        };
        let mut t = Trajectory {
            region: "r".into(),
            mode: ViewMode::GroundOnly,
            snapshot_version: 0,
            initial_states: init_state(&cfg, ViewMode::GroundOnly),
            observations: vec![obs; 3],
            contexts: vec![StepContext::default(); 3],
            actions: vec![0, 1, 2],
            rewards: vec![0.0; 3],
            behavior_logits: vec![vec![0.0; 5]; 3],
            views: vec![View::Ground; 3],
            values: vec![0.0; 3],
            episode_end: vec![false, true, false],
            bootstrap: 0.0,
            episodes: Vec::new(),
        };
        assert!(t.is_consistent());
        assert!(!t.starts_episode(0) && !t.starts_episode(1) && t.starts_episode(2));
        t.rewards.pop();
        assert!(!t.is_consistent());
        let e = EpisodeSummary {
            reward: 1.0,
            goals_completed: 1,
            goals_assigned: 4,
        };
        assert_eq!(e.success_rate(), 0.25);
    }
}
