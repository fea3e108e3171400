use crate::agent::{forward_nodes, init_state, AgentParams, PathwayNodes, ViewMode};
use crate::losses::{
    discounted_returns, embed_loss, heading_loss, kl_policy_loss, rl_loss, total_loss, LossParts, LossWeights,
    RlStats, RlStep,
};
use crate::nn::{Gradients, NodeId, Real, Tape, Tensor};
use crate::trajectory::Trajectory;

use super::TrainError;

/// Loss components averaged over the steps of a segment (or a batch).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSummary {
    pub total: f64,
    pub rl: f64,
    pub embed: f64,
    pub policy: f64,
    pub heading: f64,
    pub rl_stats: RlStats,
}

fn mean_node<T: Real>(tape: &mut Tape<'_, T>, terms: &[NodeId]) -> Option<NodeId> {
    if terms.is_empty() {
        return None;
    }
    let s = tape.add_all(terms);
    Some(tape.scale(s, T::from_f64(1.0 / terms.len() as f64)))
}

/// Replays `traj` under `params` honoring the recorded view choices and
/// returns gradients of the total loss with respect to trainable partitions.
pub fn segment_gradients(
    params: &AgentParams<f32>,
    traj: &Trajectory,
    weights: &LossWeights,
) -> Result<(Gradients<f32>, LossSummary), TrainError> {
    assert!(traj.is_consistent(), "inconsistent trajectory");
    let mode = traj.mode;
    let config = &params.config;
    let mut tape = Tape::trainable_only(&params.store);
    let returns = discounted_returns(&traj.rewards, weights.discount, traj.bootstrap, &traj.episode_end);

    let zero = init_state::<f32>(config, mode);
    let mut states = [
        traj.initial_states.ground.as_ref().map(|s| PathwayNodes::input(&mut tape, s)),
        traj.initial_states.aerial.as_ref().map(|s| PathwayNodes::input(&mut tape, s)),
    ];
    let mut rl_steps = Vec::with_capacity(traj.len());
    let mut embed_terms = Vec::new();
    let mut kl_terms = Vec::new();
    let mut heading_terms = Vec::new();
    for t in 0..traj.len() {
        if traj.starts_episode(t) {
            states = [
                zero.ground.as_ref().map(|s| PathwayNodes::input(&mut tape, s)),
                zero.aerial.as_ref().map(|s| PathwayNodes::input(&mut tape, s)),
            ];
        }
        let obs = &traj.observations[t];
        let f = forward_nodes(&mut tape, config, &traj.region, obs, traj.contexts[t], states, mode)?;
        let logits = f.logits[traj.views[t].index()].expect("recorded view is active");
        rl_steps.push(RlStep {
            logits,
            value: f.value,
            action: traj.actions[t],
            behavior_logits: traj.behavior_logits[t].clone(),
            ret: returns[t],
        });
        if mode == ViewMode::Both {
            let (eg, ea) = (f.embed[0].unwrap(), f.embed[1].unwrap());
            let (lg, la) = (f.logits[0].unwrap(), f.logits[1].unwrap());
            embed_terms.push(embed_loss(&mut tape, eg, ea, weights.squared_embed));
            kl_terms.push(kl_policy_loss(&mut tape, lg, la, weights.stop_ground_grad));
        }
        if weights.heading_coef > 0.0 {
            let target = tape.input(Tensor::row(&[obs.heading_target[0], obs.heading_target[1]]));
            heading_terms.push(heading_loss(&mut tape, f.heading, target));
        }
        states = f.states;
    }
    let (rl, rl_stats) = rl_loss(&mut tape, &rl_steps, weights)?;
    let parts = LossParts {
        rl,
        embed: mean_node(&mut tape, &embed_terms),
        policy: mean_node(&mut tape, &kl_terms),
        heading: mean_node(&mut tape, &heading_terms),
    };
    let total = total_loss(&mut tape, parts, weights, mode);
    let val = |n: Option<NodeId>, tape: &Tape<'_, f32>| n.map(|id| tape.value(id).item() as f64).unwrap_or(0.0);
    let summary = LossSummary {
        total: tape.value(total).item() as f64,
        rl: tape.value(rl).item() as f64,
        embed: val(parts.embed, &tape),
        policy: val(parts.policy, &tape),
        heading: val(parts.heading, &tape),
        rl_stats,
    };
    for (name, v) in [
        ("rl", summary.rl),
        ("embed", summary.embed),
        ("policy", summary.policy),
        ("heading", summary.heading),
    ] {
        if !v.is_finite() {
            return Err(TrainError::NonFinite(format!("loss component `{name}`")));
        }
    }
    let grads = tape
        .backward(total)
        .map_err(|e| TrainError::NonFinite(e.to_string()))?;
    Ok((grads, summary))
}

/// Mean gradients and loss summary over a batch of segments.
pub fn batch_gradients(
    params: &AgentParams<f32>,
    batch: &[Trajectory],
    weights: &LossWeights,
) -> Result<(Gradients<f32>, LossSummary), TrainError> {
    assert!(!batch.is_empty(), "empty batch");
    let mut acc = params.store.zeros_like();
    let mut sum = LossSummary {
        rl_stats: RlStats {
            ratio_min: f64::INFINITY,
            ratio_max: f64::NEG_INFINITY,
            ..Default::default()
        },
        ..Default::default()
    };
    for traj in batch {
        let (g, s) = segment_gradients(params, traj, weights)?;
        acc.accumulate(&g);
        sum.total += s.total;
        sum.rl += s.rl;
        sum.embed += s.embed;
        sum.policy += s.policy;
        sum.heading += s.heading;
        sum.rl_stats.policy_term += s.rl_stats.policy_term;
        sum.rl_stats.value_term += s.rl_stats.value_term;
        sum.rl_stats.entropy += s.rl_stats.entropy;
        sum.rl_stats.ratio_mean += s.rl_stats.ratio_mean;
        sum.rl_stats.ratio_min = sum.rl_stats.ratio_min.min(s.rl_stats.ratio_min);
        sum.rl_stats.ratio_max = sum.rl_stats.ratio_max.max(s.rl_stats.ratio_max);
    }
    let n = batch.len() as f64;
    acc.scale(1.0 / n as f32);
    sum.total /= n;
    sum.rl /= n;
    sum.embed /= n;
    sum.policy /= n;
    sum.heading /= n;
    sum.rl_stats.policy_term /= n;
    sum.rl_stats.value_term /= n;
    sum.rl_stats.entropy /= n;
    sum.rl_stats.ratio_mean /= n;
    Ok((acc, sum))
}
