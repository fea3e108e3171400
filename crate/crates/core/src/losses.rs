//! Training objectives: importance-weighted advantage actor-critic, embedding
//! distance between views, cross-view KL distillation and heading regression.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::ViewMode;
use crate::nn::tape::softmax_row;
use crate::nn::{NodeId, Real, Tape, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("behavior policy gave zero probability to taken action {action} at step {step}")]
    ZeroBehaviorProbability { step: usize, action: usize },
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the embedding distance term.
    pub lambda_embed: f64,
    /// Weight of the cross-view KL term (not the return discount).
    pub gamma_distill: f64,
    /// Return discount.
    pub discount: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub heading_coef: f64,
    /// Cap on the importance ratio.
    pub is_clip: f64,
    pub squared_embed: bool,
    /// Treat ground logits as a fixed teacher in the KL term.
    pub stop_ground_grad: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_embed: 1.0,
            gamma_distill: 1.0,
            discount: 0.99,
            value_coef: 0.5,
            entropy_coef: 0.001,
            heading_coef: 0.0,
            is_clip: 1.0,
            squared_embed: false,
            stop_ground_grad: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let nonneg = [
            ("lambda_embed", self.lambda_embed),
            ("gamma_distill", self.gamma_distill),
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
            ("heading_coef", self.heading_coef),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be >= 0"));
            }
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err("discount must be in (0, 1]".into());
        }
        if !(self.is_clip >= 1.0) {
            return Err("is_clip must be >= 1".into());
        }
        Ok(())
    }
}

/// `R_t = r_t + discount * R_{t+1}`, seeded with `bootstrap` at the end and
/// cut wherever `episode_end[t]` marks the last step of an episode.
pub fn discounted_returns(rewards: &[f64], discount: f64, bootstrap: f64, episode_end: &[bool]) -> Vec<f64> {
    assert_eq!(rewards.len(), episode_end.len(), "rewards and boundaries differ in length");
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap;
    for t in (0..rewards.len()).rev() {
        if episode_end[t] {
            next = 0.0;
        }
        next = rewards[t] + discount * next;
        out[t] = next;
    }
    out
}

/// `||e_g - e_a||_2`, or its square when `squared`.
pub fn embed_loss<T: Real>(tape: &mut Tape<'_, T>, e_g: NodeId, e_a: NodeId, squared: bool) -> NodeId {
    let d = tape.sub(e_g, e_a);
    if squared {
        let sq = tape.mul(d, d);
        tape.sum(sq)
    } else {
        tape.l2_norm(d)
    }
}

/// `KL(p_g || p_a)` over softmax outputs, computed with log-softmax.
pub fn kl_policy_loss<T: Real>(tape: &mut Tape<'_, T>, logits_g: NodeId, logits_a: NodeId, stop_ground_grad: bool) -> NodeId {
    let lg = if stop_ground_grad {
        let v = tape.value(logits_g).clone();
        tape.input(v)
    } else {
        logits_g
    };
    let p_g = tape.softmax(lg);
    let lp_g = tape.log_softmax(lg);
    let lp_a = tape.log_softmax(logits_a);
    let diff = tape.sub(lp_g, lp_a);
    let w = tape.mul(p_g, diff);
    tape.sum(w)
}

/// Squared distance between predicted and true `(sin, cos)` heading.
pub fn heading_loss<T: Real>(tape: &mut Tape<'_, T>, pred: NodeId, target: NodeId) -> NodeId {
    let d = tape.sub(pred, target);
    let sq = tape.mul(d, d);
    tape.sum(sq)
}

/// One replayed step of actor-critic data.
#[derive(Debug, Clone)]
pub struct RlStep {
    /// Current-policy logits on the tape.
    pub logits: NodeId,
    /// Current value estimate on the tape (one element).
    pub value: NodeId,
    pub action: usize,
    /// Logits of the snapshot that chose `action`.
    pub behavior_logits: Vec<f64>,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RlStats {
    pub policy_term: f64,
    pub value_term: f64,
    pub entropy: f64,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

/// Mean over steps of
/// `-rho * log pi(a) * (R - V) + value_coef * (R - V)^2 - entropy_coef * H(pi)`
/// with `rho = min(is_clip, pi(a) / mu(a))`. Both `rho` and the advantage are constants.
pub fn rl_loss<T: Real>(tape: &mut Tape<'_, T>, steps: &[RlStep], w: &LossWeights) -> Result<(NodeId, RlStats), LossError> {
    assert!(!steps.is_empty(), "rl_loss over an empty trajectory");
    let mut terms = Vec::with_capacity(steps.len());
    let mut stats = RlStats {
        ratio_min: f64::INFINITY,
        ratio_max: f64::NEG_INFINITY,
        ..Default::default()
    };
    for (t, s) in steps.iter().enumerate() {
        let cur: Vec<f64> = tape.value(s.logits).to_f64_vec();
        let p_cur = softmax_row(&cur)[s.action];
        let p_beh = softmax_row(&s.behavior_logits)[s.action];
        if p_beh <= 0.0 {
            return Err(LossError::ZeroBehaviorProbability { step: t, action: s.action });
        }
        let rho = (p_cur / p_beh).min(w.is_clip);
        let v = tape.value(s.value).item().as_f64();
        let adv = s.ret - v;

        let logp = tape.log_softmax(s.logits);
        let lp_a = tape.select(logp, s.action);
        let pg = tape.scale(lp_a, T::from_f64(-rho * adv));

        let ret = tape.input(Tensor::new(tape.value(s.value).shape(), vec![T::from_f64(s.ret)]));
        let d = tape.sub(ret, s.value);
        let sq = tape.mul(d, d);
        let sq = tape.sum(sq);
        let vt = tape.scale(sq, T::from_f64(w.value_coef));

        let p = tape.softmax(s.logits);
        let plogp = tape.mul(p, logp);
        let neg_h = tape.sum(plogp);
        let ent = tape.scale(neg_h, T::from_f64(w.entropy_coef));

        let entropy = -tape.value(neg_h).item().as_f64();
        stats.policy_term += -rho * adv * tape.value(lp_a).item().as_f64();
        stats.value_term += w.value_coef * adv * adv;
        stats.entropy += entropy;
        stats.ratio_mean += rho;
        stats.ratio_min = stats.ratio_min.min(rho);
        stats.ratio_max = stats.ratio_max.max(rho);

        terms.push(tape.add_all(&[pg, vt, ent]));
    }
    let n = steps.len() as f64;
    stats.policy_term /= n;
    stats.value_term /= n;
    stats.entropy /= n;
    stats.ratio_mean /= n;
    let total = tape.add_all(&terms);
    Ok((tape.scale(total, T::from_f64(1.0 / n)), stats))
}

/// Per-component losses (already averaged over steps) for [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rl: NodeId,
    pub embed: Option<NodeId>,
    pub policy: Option<NodeId>,
    pub heading: Option<NodeId>,
}

/// `rl + lambda * embed + gamma_distill * policy + heading_coef * heading`.
///
/// Single-view modes have one pathway, so their embed and policy terms are zero.
pub fn total_loss<T: Real>(tape: &mut Tape<'_, T>, parts: LossParts, w: &LossWeights, mode: ViewMode) -> NodeId {
    let mut terms = vec![parts.rl];
    if mode == ViewMode::Both {
        if let Some(e) = parts.embed {
            if w.lambda_embed != 0.0 {
                terms.push(tape.scale(e, T::from_f64(w.lambda_embed)));
            }
        }
        if let Some(p) = parts.policy {
            if w.gamma_distill != 0.0 {
                terms.push(tape.scale(p, T::from_f64(w.gamma_distill)));
            }
        }
    }
    if let Some(h) = parts.heading {
        if w.heading_coef != 0.0 {
            terms.push(tape.scale(h, T::from_f64(w.heading_coef)));
        }
    }
    tape.add_all(&terms)
}
