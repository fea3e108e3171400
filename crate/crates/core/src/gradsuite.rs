//! Finite-difference suite over every differentiable op, layer and loss, at 64-bit.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{forward_nodes, init_state, AgentConfig, AgentParams, PathwayNodes, StepContext, ViewMode};
use crate::env::{Observation, NUM_ACTIONS};
use crate::losses::{embed_loss, heading_loss, kl_policy_loss, rl_loss, total_loss, LossParts, LossWeights, RlStep};
use crate::nn::gradcheck::{check_gradients, check_gradients_against, GradCheck};
use crate::nn::tape::{softmax_row, ConvSpec};
use crate::nn::{Dense, LstmCell, LstmNodes, LstmState, NnError, NodeId, ParamRef, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type Check = fn(&mut ChaCha8Rng, f64) -> Result<GradCheck, NnError>;

pub const OP_CHECKS: &[(&str, Check)] = &[
    ("matmul", check_matmul),
    ("matmul_sparse", check_matmul_sparse),
    ("add", check_add),
    ("sub", check_sub),
    ("mul", check_mul),
    ("scale", check_scale),
    ("concat", check_concat),
    ("slice", check_slice),
    ("reshape", check_reshape),
    ("tanh", check_tanh),
    ("sigmoid", check_sigmoid),
    ("relu", check_relu),
    ("softmax", check_softmax),
    ("log_softmax", check_log_softmax),
    ("l2_norm", check_l2_norm),
    ("mean", check_mean),
    ("sum", check_sum),
    ("select", check_select),
    ("add_all", check_add_all),
    ("conv2d", check_conv2d),
    ("dense", check_dense),
    ("lstm_unroll3", check_lstm_unroll3),
];

pub const LOSS_CHECKS: &[(&str, Check)] = &[
    ("embed_loss", check_embed),
    ("embed_loss_squared", check_embed_squared),
    ("kl_policy_loss", check_kl),
    ("kl_policy_loss_stop_ground", check_kl_stop),
    ("heading_loss", check_heading),
    ("rl_loss", check_rl),
    ("total_loss", check_total),
    ("agent_unroll", check_agent_unroll),
];

/// Runs every check `cfg.instances` times with fresh random instances.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteEntry>, NnError> {
    let mut out = Vec::new();
    for (i, (name, check)) in OP_CHECKS.iter().chain(LOSS_CHECKS).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64 * 7919));
        let mut entry = SuiteEntry {
            name,
            instances: cfg.instances,
            max_rel_error: 0.0,
            failures: 0,
        };
        for _ in 0..cfg.instances {
            let r = check(&mut rng, cfg.step)?;
            entry.max_rel_error = entry.max_rel_error.max(r.rel_error);
            if !r.passes(cfg.tolerance) {
                entry.failures += 1;
            }
        }
        out.push(entry);
    }
    Ok(out)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n, lo, hi))
}

/// Magnitudes in `[0.1, 1)` with random signs, away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v)
}

fn store_with(tensors: Vec<Tensor<f64>>) -> (ParamStore<f64>, Vec<ParamRef>) {
    let mut s = ParamStore::new();
    s.add_partition("p");
    let refs = tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| s.add_tensor("p", &format!("t{i}"), t))
        .collect();
    (s, refs)
}

/// `sum(x * w)` with fixed pseudo-random weights so every output element matters.
fn readout(tape: &mut Tape<'_, f64>, x: NodeId, weights: &[f64]) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    assert!(n <= weights.len(), "readout weights too short");
    let w = tape.input(Tensor::new(&shape, weights[..n].to_vec()));
    let m = tape.mul(x, w);
    tape.sum(m)
}

fn weights(rng: &mut ChaCha8Rng) -> Vec<f64> {
    rand_vec(rng, 512, -1.0, 1.0)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn unary(
    rng: &mut ChaCha8Rng,
    h: f64,
    init: fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>,
    op: fn(&mut Tape<'_, f64>, NodeId) -> NodeId,
) -> Result<GradCheck, NnError> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 6)];
    let (store, r) = store_with(vec![init(rng, &shape)]);
    let w = weights(rng);
    check_gradients(&store, h, |t| {
        let x = t.param(r[0]);
        let y = op(t, x);
        readout(t, y, &w)
    })
}

fn binary(
    rng: &mut ChaCha8Rng,
    h: f64,
    op: fn(&mut Tape<'_, f64>, NodeId, NodeId) -> NodeId,
) -> Result<GradCheck, NnError> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 6)];
    let (store, r) = store_with(vec![rand_tensor(rng, &shape, -1.0, 1.0), rand_tensor(rng, &shape, -1.0, 1.0)]);
    let w = weights(rng);
    check_gradients(&store, h, |t| {
        let a = t.param(r[0]);
        let b = t.param(r[1]);
        let y = op(t, a, b);
        readout(t, y, &w)
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape, -2.0, 2.0)
}

fn check_matmul(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let (n, k, m) = (dim(rng, 1, 3), dim(rng, 1, 6), dim(rng, 1, 6));
    let (store, r) = store_with(vec![rand_tensor(rng, &[n, k], -1.0, 1.0), rand_tensor(rng, &[k, m], -1.0, 1.0)]);
    let w = weights(rng);
    check_gradients(&store, h, |t| {
        let a = t.param(r[0]);
        let b = t.param(r[1]);
        let y = t.matmul(a, b);
        readout(t, y, &w)
    })
}

fn check_matmul_sparse(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let (n, k, m) = (dim(rng, 1, 3), dim(rng, 2, 8), dim(rng, 1, 6));
    let mut a = rand_tensor(rng, &[n, k], -1.0, 1.0);
    for v in a.data_mut() {
        if rng.gen::<f64>() < 0.5 {
            *v = 0.0;
        }
    }
    let x = rand_tensor(rng, &[n, k], -1.0, 1.0).into_data();
    let x: Vec<f64> = x.iter().zip(a.data()).map(|(&v, &z)| if z == 0.0 { 0.0 } else { v }).collect();
    let (store, r) = store_with(vec![rand_tensor(rng, &[k, m], -1.0, 1.0)]);
    let w = weights(rng);
    // sparse constant input times a trainable weight
    check_gradients(&store, h, |t| {
        let a = t.input(Tensor::new(&[n, k], x.clone()));
        let b = t.param(r[0]);
        let y = t.matmul(a, b);
        readout(t, y, &w)
    })
}

fn check_add(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    binary(rng, h, |t, a, b| t.add(a, b))
}

fn check_sub(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    binary(rng, h, |t, a, b| t.sub(a, b))
}

fn check_mul(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    binary(rng, h, |t, a, b| t.mul(a, b))
}

fn check_scale(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let s = rng.gen_range(-3.0..3.0);
    let shape = [dim(rng, 1, 3), dim(rng, 1, 6)];
    let (store, r) = store_with(vec![uniform(rng, &shape)]);
    let w = weights(rng);
    check_gradients(&store, h, |t| {
        let x = t.param(r[0]);
        let y = t.scale(x, s);
        readout(t, y, &w)
    })
}

fn check_concat(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let rows = dim(rng, 1, 3);
    let parts = dim(rng, 2, 3);
    let tensors = (0..parts).map(|_| {
        let c = dim(rng, 1, 4);
        uniform(rng, &[rows, c])
    });
    let (store, r) = store_with(tensors.collect());
    let w = weights(rng);
    check_gradients(&store, h, |t| {
        let ids: Vec<NodeId> = r.iter().map(|&p| t.param(p)).collect();
        let y = t.concat(&ids);
        readout(t, y, &w)
    })
}

fn check_slice(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let (rows, cols) = (dim(rng, 1, 3), dim(rng, 2, 8));
    let start = rng.gen_range(0..cols);
    let len = rng.gen_range(1..=cols - start);
    let (store, r) = store_with(vec![uniform(rng, &[rows, cols])]);
    let w = weights(rng);
    check_gradients(&store, h, |t| {
        let x = t.param(r[0]);
        let y = t.slice(x, start, len);
        let y = t.tanh(y);
        readout(t, y, &w)
    })
}

fn check_reshape(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    let (store, r) = store_with(vec![uniform(rng, &[a, b, c])]);
    let wm = uniform(rng, &[a * b * c, 2]);
    let w = weights(rng);
    check_gradients(&store, h, |t| {
        let x = t.param(r[0]);
        let y = t.reshape(x, &[1, a * b * c]);
        let m = t.input(wm.clone());
        let z = t.matmul(y, m);
        readout(t, z, &w)
    })
}

fn check_tanh(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    unary(rng, h, uniform, |t, x| t.tanh(x))
}

fn check_sigmoid(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    unary(rng, h, uniform, |t, x| t.sigmoid(x))
}

fn check_relu(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    unary(rng, h, away_from_zero, |t, x| t.relu(x))
}

fn check_softmax(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    unary(rng, h, uniform, |t, x| t.softmax(x))
}

fn check_log_softmax(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    unary(rng, h, uniform, |t, x| t.log_softmax(x))
}

fn check_l2_norm(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    unary(rng, h, away_from_zero, |t, x| {
        let n = t.l2_norm(x);
        t.scale(n, 1.7)
    })
}

fn check_mean(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    unary(rng, h, uniform, |t, x| {
        let y = t.tanh(x);
        t.mean(y)
    })
}

fn check_sum(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    unary(rng, h, uniform, |t, x| {
        let y = t.sigmoid(x);
        t.sum(y)
    })
}

fn check_select(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let n = dim(rng, 2, 6);
    let index = rng.gen_range(0..n);
    let (store, r) = store_with(vec![uniform(rng, &[1, n])]);
    check_gradients(&store, h, |t| {
        let x = t.param(r[0]);
        let y = t.log_softmax(x);
        t.select(y, index)
    })
}

fn check_add_all(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let shape = [1, dim(rng, 1, 5)];
    let k = dim(rng, 1, 4);
    let (store, r) = store_with((0..k).map(|_| uniform(rng, &shape)).collect());
    let w = weights(rng);
    check_gradients(&store, h, |t| {
        let ids: Vec<NodeId> = r
            .iter()
            .map(|&p| {
                let x = t.param(p);
                t.tanh(x)
            })
            .collect();
        let y = t.add_all(&ids);
        readout(t, y, &w)
    })
}

fn check_conv2d(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let (c, o) = (dim(rng, 1, 2), dim(rng, 1, 3));
    let k = dim(rng, 1, 3);
    let (hh, ww) = (dim(rng, k, 6), dim(rng, k, 6));
    let stride = dim(rng, 1, 2);
    let (store, r) = store_with(vec![
        uniform(rng, &[c, hh, ww]),
        rand_tensor(rng, &[o, c, k, k], -1.0, 1.0),
        rand_tensor(rng, &[o], -0.5, 0.5),
    ]);
    let w = weights(rng);
    check_gradients(&store, h, |t| {
        let x = t.param(r[0]);
        let kk = t.param(r[1]);
        let b = t.param(r[2]);
        let y = t.conv2d(x, kk, b, ConvSpec { stride });
        readout(t, y, &w)
    })
}

fn check_dense(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let (i, o) = (dim(rng, 1, 6), dim(rng, 1, 6));
    let mut store = ParamStore::new();
    store.add_partition("p");
    let layer = Dense::init(&mut store, "p", "fc", i, o, rng);
    store.get_mut(layer.bias).data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let x = uniform(rng, &[1, i]);
    let w = weights(rng);
    check_gradients(&store, h, |t| {
        let xi = t.input(x.clone());
        let y = layer.forward(t, xi);
        let y = t.tanh(y);
        readout(t, y, &w)
    })
}

fn check_lstm_unroll3(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let (i, hid) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let mut store = ParamStore::new();
    store.add_partition("p");
    let cell = LstmCell::init(&mut store, "p", "lstm", i, hid, rng);
    store.get_mut(cell.bias).data_mut().iter_mut().for_each(|b| *b += rng.gen_range(-0.5..0.5));
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| uniform(rng, &[1, i])).collect();
    let h0 = LstmState {
        hidden: rand_tensor(rng, &[1, hid], -0.5, 0.5),
        cell: rand_tensor(rng, &[1, hid], -0.5, 0.5),
    };
    let (wh, wc) = (weights(rng), weights(rng));
    check_gradients(&store, h, |t| {
        let mut s = LstmNodes::input(t, &h0);
        for x in &xs {
            let xi = t.input(x.clone());
            s = cell.step(t, xi, s);
        }
        let a = readout(t, s.hidden, &wh);
        let b = readout(t, s.cell, &wc);
        t.add(a, b)
    })
}

fn check_embed(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    embed_case(rng, h, false)
}

fn check_embed_squared(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    embed_case(rng, h, true)
}

fn embed_case(rng: &mut ChaCha8Rng, h: f64, squared: bool) -> Result<GradCheck, NnError> {
    let n = dim(rng, 1, 8);
    let (store, r) = store_with(vec![uniform(rng, &[1, n]), uniform(rng, &[1, n])]);
    check_gradients(&store, h, |t| {
        let a = t.param(r[0]);
        let b = t.param(r[1]);
        embed_loss(t, a, b, squared)
    })
}

fn check_kl(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let (store, r) = store_with(vec![uniform(rng, &[1, NUM_ACTIONS]), uniform(rng, &[1, NUM_ACTIONS])]);
    check_gradients(&store, h, |t| {
        let g = t.param(r[0]);
        let a = t.param(r[1]);
        kl_policy_loss(t, g, a, false)
    })
}

fn check_kl_stop(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let (store, r) = store_with(vec![uniform(rng, &[1, NUM_ACTIONS]), uniform(rng, &[1, NUM_ACTIONS])]);
    let g0 = store.get(r[0]).clone();
    check_gradients_against(
        &store,
        h,
        |t| {
            let g = t.param(r[0]);
            let a = t.param(r[1]);
            kl_policy_loss(t, g, a, true)
        },
        |t| {
            let g = t.input(g0.clone());
            let a = t.param(r[1]);
            kl_policy_loss(t, g, a, false)
        },
    )
}

fn check_heading(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let target = Tensor::new(&[1, 2], vec![theta.sin(), theta.cos()]);
    let (store, r) = store_with(vec![uniform(rng, &[1, 2])]);
    check_gradients(&store, h, |t| {
        let p = t.param(r[0]);
        let y = t.input(target.clone());
        heading_loss(t, p, y)
    })
}

struct RlCase {
    store: ParamStore<f64>,
    logits: Vec<ParamRef>,
    values: Vec<ParamRef>,
    actions: Vec<usize>,
    behavior: Vec<Vec<f64>>,
    returns: Vec<f64>,
    weights: LossWeights,
}

fn rl_case(rng: &mut ChaCha8Rng) -> RlCase {
    let steps = dim(rng, 1, 5);
    let mut tensors = Vec::new();
    for _ in 0..steps {
        tensors.push(uniform(rng, &[1, NUM_ACTIONS]));
    }
    for _ in 0..steps {
        tensors.push(uniform(rng, &[1, 1]));
    }
    let (store, r) = store_with(tensors);
    RlCase {
        store,
        logits: r[..steps].to_vec(),
        values: r[steps..].to_vec(),
        actions: (0..steps).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect(),
        behavior: (0..steps).map(|_| rand_vec(rng, NUM_ACTIONS, -2.0, 2.0)).collect(),
        returns: rand_vec(rng, steps, -3.0, 3.0),
        weights: LossWeights {
            value_coef: rng.gen_range(0.1..1.0),
            entropy_coef: rng.gen_range(0.0..0.1),
            is_clip: if rng.gen::<bool>() { 1.0 } else { 5.0 },
            ..Default::default()
        },
    }
}

fn rl_nodes(c: &RlCase, t: &mut Tape<'_, f64>) -> NodeId {
    let steps: Vec<RlStep> = (0..c.logits.len())
        .map(|i| RlStep {
            logits: t.param(c.logits[i]),
            value: t.param(c.values[i]),
            action: c.actions[i],
            behavior_logits: c.behavior[i].clone(),
            ret: c.returns[i],
        })
        .collect();
    rl_loss(t, &steps, &c.weights).expect("finite behavior probabilities").0
}

/// `rl_loss` with the importance weight and advantage frozen at the store's values.
fn rl_surrogate(c: &RlCase, frozen: &[(f64, f64)], t: &mut Tape<'_, f64>) -> NodeId {
    let n = c.logits.len() as f64;
    let mut terms = Vec::new();
    for i in 0..c.logits.len() {
        let (rho, adv) = frozen[i];
        let l = t.param(c.logits[i]);
        let v = t.param(c.values[i]);
        let logp = t.log_softmax(l);
        let la = t.select(logp, c.actions[i]);
        let pg = t.scale(la, -rho * adv);
        let ret = t.input(Tensor::new(&[1, 1], vec![c.returns[i]]));
        let d = t.sub(ret, v);
        let sq = t.mul(d, d);
        let sq = t.sum(sq);
        let vt = t.scale(sq, c.weights.value_coef);
        let p = t.softmax(l);
        let pl = t.mul(p, logp);
        let nh = t.sum(pl);
        let et = t.scale(nh, c.weights.entropy_coef);
        terms.push(t.add_all(&[pg, vt, et]));
    }
    let s = t.add_all(&terms);
    t.scale(s, 1.0 / n)
}

fn frozen_constants(c: &RlCase) -> Vec<(f64, f64)> {
    (0..c.logits.len())
        .map(|i| {
            let cur = c.store.get(c.logits[i]).data().to_vec();
            let a = c.actions[i];
            let rho = (softmax_row(&cur)[a] / softmax_row(&c.behavior[i])[a]).min(c.weights.is_clip);
            let v = c.store.get(c.values[i]).item();
            (rho, c.returns[i] - v)
        })
        .collect()
}

fn check_rl(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let c = rl_case(rng);
    let frozen = frozen_constants(&c);
    check_gradients_against(&c.store, h, |t| rl_nodes(&c, t), |t| rl_surrogate(&c, &frozen, t))
}

fn check_total(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let c = rl_case(rng);
    let frozen = frozen_constants(&c);
    let dim_e = dim(rng, 1, 6);
    let mut store = c.store.clone();
    let eg = store.add_tensor("p", "eg", uniform(rng, &[1, dim_e]));
    let ea = store.add_tensor("p", "ea", uniform(rng, &[1, dim_e]));
    let la = store.add_tensor("p", "la", uniform(rng, &[1, NUM_ACTIONS]));
    let hp = store.add_tensor("p", "hp", uniform(rng, &[1, 2]));
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let target = Tensor::new(&[1, 2], vec![theta.sin(), theta.cos()]);
    let w = LossWeights {
        lambda_embed: rng.gen_range(0.1..2.0),
        gamma_distill: rng.gen_range(0.1..2.0),
        heading_coef: rng.gen_range(0.1..2.0),
        ..c.weights
    };
    let c = RlCase { store, weights: w, ..c };
    let build = |t: &mut Tape<'_, f64>, surrogate: bool| {
        let rl = if surrogate { rl_surrogate(&c, &frozen, t) } else { rl_nodes(&c, t) };
        let (g, a) = (t.param(eg), t.param(ea));
        let embed = embed_loss(t, g, a, false);
        let lg = t.param(c.logits[0]);
        let lav = t.param(la);
        let policy = kl_policy_loss(t, lg, lav, false);
        let hpn = t.param(hp);
        let tg = t.input(target.clone());
        let heading = heading_loss(t, hpn, tg);
        let parts = LossParts {
            rl,
            embed: Some(embed),
            policy: Some(policy),
            heading: Some(heading),
        };
        total_loss(t, parts, &c.weights, ViewMode::Both)
    };
    check_gradients_against(&c.store, h, |t| build(t, false), |t| build(t, true))
}

fn tiny_agent_config(rng: &mut ChaCha8Rng) -> AgentConfig {
    AgentConfig {
        ground_rays: 3,
        ground_channels: 2,
        aerial_size: 7,
        aerial_channels: 2,
        encoder_hidden: 3,
        embed: 3,
        locale_hidden: 3,
        policy_hidden: 3,
        aerial_conv: rng.gen::<bool>(),
        feed_prev_action_reward: rng.gen::<bool>(),
        init_seed: rng.gen(),
    }
}

fn random_obs(rng: &mut ChaCha8Rng, c: &AgentConfig) -> Observation {
    Observation {
        ground: rand_vec(rng, c.ground_inputs(), 0.0, 1.0).into_iter().map(|v| v as f32).collect(),
        aerial: rand_vec(rng, c.aerial_inputs(), 0.0, 1.0).into_iter().map(|v| v as f32).collect(),
        goal: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        heading_target: [0.0, 1.0],
    }
}

fn check_agent_unroll(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheck, NnError> {
    let cfg = tiny_agent_config(rng);
    let mut params = AgentParams::<f64>::init(cfg.clone(), &["r".to_string()]);
    for r in params.store.refs() {
        for v in params.store.get_mut(r).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let obs: Vec<Observation> = (0..2).map(|_| random_obs(rng, &cfg)).collect();
    let ctx = [
        StepContext::default(),
        StepContext {
            prev_action: Some(rng.gen_range(0..NUM_ACTIONS)),
            prev_reward: 0.5,
        },
    ];
    let w = weights(rng);
    let state = init_state::<f64>(&cfg, ViewMode::Both);
    check_gradients(&params.store, h, |t| {
        let mut sn = [
            state.ground.as_ref().map(|s| PathwayNodes::input(t, s)),
            state.aerial.as_ref().map(|s| PathwayNodes::input(t, s)),
        ];
        let mut outs = Vec::new();
        for (o, c) in obs.iter().zip(ctx) {
            let f = forward_nodes(t, &cfg, "r", o, c, sn, ViewMode::Both).expect("forward");
            outs.push(readout(t, f.logits[0].unwrap(), &w[..]));
            outs.push(readout(t, f.logits[1].unwrap(), &w[100..]));
            outs.push(readout(t, f.value, &w[200..]));
            outs.push(readout(t, f.heading, &w[300..]));
            sn = f.states;
        }
        t.add_all(&outs)
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_instances() {
        let cfg = SuiteConfig {
            instances: 2,
            seed: 11,
            ..Default::default()
        };
        let entries = run_suite(&cfg).unwrap();
        assert_eq!(entries.len(), OP_CHECKS.len() + LOSS_CHECKS.len());
        for e in &entries {
            assert!(e.passed(), "{} max rel error {}", e.name, e.max_rel_error);
        }
    }
}
