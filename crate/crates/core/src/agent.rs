//! Dual-pathway recurrent agent.
//!
//! Each view has its own encoder. Both views share one locale LSTM per region
//! and one global policy LSTM, but keep separate recurrent states so the two
//! pathways can run in lockstep.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Observation, World, NUM_ACTIONS};
use crate::nn::tape::{log_softmax_row, softmax_row};
use crate::nn::{Conv2d, Dense, LstmCell, LstmNodes, LstmState, NodeId, ParamStore, Real, Tape, Tensor};

pub const ENCODER_GROUND: &str = "encoder_ground";
pub const ENCODER_AERIAL: &str = "encoder_aerial";
pub const POLICY_CORE: &str = "policy_core";
pub const POLICY_HEAD: &str = "policy_head";
pub const VALUE_HEAD: &str = "value_head";
pub const HEADING_HEAD: &str = "heading_head";

pub fn locale_partition(region: &str) -> String {
    format!("locale.{region}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Both,
    GroundOnly,
    AerialOnly,
}

impl ViewMode {
    pub fn uses(self, view: View) -> bool {
        match self {
            ViewMode::Both => true,
            ViewMode::GroundOnly => view == View::Ground,
            ViewMode::AerialOnly => view == View::Aerial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Ground,
    Aerial,
}

impl View {
    pub fn index(self) -> usize {
        match self {
            View::Ground => 0,
            View::Aerial => 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no locale partition for region {0:?}")]
    MissingLocale(String),
    #[error("states do not match view mode {0:?}")]
    StateMismatch(ViewMode),
    #[error("view mode {0:?} does not provide {1:?} logits")]
    MissingLogits(ViewMode, View),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub ground_rays: usize,
    pub ground_channels: usize,
    pub aerial_size: usize,
    pub aerial_channels: usize,
    pub encoder_hidden: usize,
    pub embed: usize,
    pub locale_hidden: usize,
    pub policy_hidden: usize,
    /// Two strided convolutions in front of the aerial encoder instead of a dense layer.
    pub aerial_conv: bool,
    pub feed_prev_action_reward: bool,
    /// Base seed for deterministic initialization of partitions added later.
    pub init_seed: u64,
}

impl AgentConfig {
    pub fn for_world(world: &World) -> Self {
        let (rays, gc) = world.ground_shape();
        let (w, _, ac) = world.aerial_shape();
        Self {
            ground_rays: rays,
            ground_channels: gc,
            aerial_size: w,
            aerial_channels: ac,
            encoder_hidden: 64,
            embed: 64,
            locale_hidden: 128,
            policy_hidden: 128,
            aerial_conv: false,
            feed_prev_action_reward: false,
            init_seed: 0,
        }
    }

    pub fn ground_inputs(&self) -> usize {
        self.ground_rays * self.ground_channels
    }

    pub fn aerial_inputs(&self) -> usize {
        self.aerial_size * self.aerial_size * self.aerial_channels
    }

    fn policy_inputs(&self) -> usize {
        let extra = if self.feed_prev_action_reward {
            NUM_ACTIONS + 1
        } else {
            0
        };
        self.locale_hidden + self.embed + 2 + extra
    }

    fn conv_dims(&self) -> [(usize, usize); 2] {
        let (h1, w1) = Conv2d::output_hw(self.aerial_size, self.aerial_size, 3, 2);
        let (h2, w2) = Conv2d::output_hw(h1, w1, 3, 2);
        [(h1, w1), (h2, w2)]
    }
}

const CONV1_CHANNELS: usize = 8;
const CONV2_CHANNELS: usize = 16;

/// Agent parameters: a [`ParamStore`] with the partition layout above plus its config.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams<T> {
    pub config: AgentConfig,
    pub store: ParamStore<T>,
}

fn region_seed(base: u64, region: &str) -> u64 {
    // FNV-1a over the region name
    let mut h: u64 = 0xcbf29ce484222325;
    for b in region.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    base ^ h
}

impl<T: Real> AgentParams<T> {
    /// Fresh parameters with one locale partition per listed region.
    pub fn init(config: AgentConfig, regions: &[String]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let c = &config;

        store.add_partition(ENCODER_GROUND);
        Dense::init(&mut store, ENCODER_GROUND, "fc1", c.ground_inputs(), c.encoder_hidden, &mut rng);
        Dense::init(&mut store, ENCODER_GROUND, "fc2", c.encoder_hidden, c.embed, &mut rng);

        store.add_partition(ENCODER_AERIAL);
        if c.aerial_conv {
            let [_, (h2, w2)] = c.conv_dims();
            Conv2d::init(&mut store, ENCODER_AERIAL, "conv1", c.aerial_channels, CONV1_CHANNELS, 3, 2, &mut rng);
            Conv2d::init(&mut store, ENCODER_AERIAL, "conv2", CONV1_CHANNELS, CONV2_CHANNELS, 3, 2, &mut rng);
            Dense::init(&mut store, ENCODER_AERIAL, "fc1", CONV2_CHANNELS * h2 * w2, c.encoder_hidden, &mut rng);
        } else {
            Dense::init(&mut store, ENCODER_AERIAL, "fc1", c.aerial_inputs(), c.encoder_hidden, &mut rng);
        }
        Dense::init(&mut store, ENCODER_AERIAL, "fc2", c.encoder_hidden, c.embed, &mut rng);

        store.add_partition(POLICY_CORE);
        LstmCell::init(&mut store, POLICY_CORE, "lstm", c.policy_inputs(), c.policy_hidden, &mut rng);
        store.add_partition(POLICY_HEAD);
        Dense::init(&mut store, POLICY_HEAD, "logits", c.policy_hidden, NUM_ACTIONS, &mut rng);
        store.add_partition(VALUE_HEAD);
        Dense::init(&mut store, VALUE_HEAD, "value", c.policy_hidden, 1, &mut rng);
        store.add_partition(HEADING_HEAD);
        Dense::init(&mut store, HEADING_HEAD, "heading", c.embed, 2, &mut rng);

        let mut params = Self { config, store };
        for r in regions {
            params.ensure_locale(r);
        }
        params
    }

    /// Adds a default-initialized locale partition for `region` if absent.
    /// Returns true when a partition was created.
    pub fn ensure_locale(&mut self, region: &str) -> bool {
        let name = locale_partition(region);
        if self.store.has_partition(&name) {
            return false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(region_seed(self.config.init_seed, region));
        let was_trainable = self.store.trainable().clone();
        self.store.add_partition(&name);
        LstmCell::init(&mut self.store, &name, "lstm", self.config.embed, self.config.locale_hidden, &mut rng);
        let mut t: Vec<String> = was_trainable.into_iter().collect();
        t.push(name);
        self.store.set_trainable(t);
        true
    }

    /// Copies the locale weights of `from` into `to` (warm start).
    pub fn copy_locale(&mut self, from: &str, to: &str) -> Result<(), AgentError> {
        let src = self
            .store
            .partition(&locale_partition(from))
            .ok_or_else(|| AgentError::MissingLocale(from.to_string()))?
            .clone();
        let mut part = src;
        part.name = locale_partition(to);
        let trainable = self.store.trainable().clone();
        self.store.insert_partition(part);
        let mut t: Vec<String> = trainable.into_iter().collect();
        t.push(locale_partition(to));
        self.store.set_trainable(t);
        Ok(())
    }

    pub fn has_locale(&self, region: &str) -> bool {
        self.store.has_partition(&locale_partition(region))
    }

    pub fn arch_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    pub fn cast<U: Real>(&self) -> AgentParams<U> {
        AgentParams {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }
}

/// Recurrent state of one pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayState<T> {
    pub locale: LstmState<T>,
    pub policy: LstmState<T>,
}

/// Per-view pathway states; a view's slot is filled iff the mode uses it.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewStates<T> {
    pub ground: Option<PathwayState<T>>,
    pub aerial: Option<PathwayState<T>>,
}

impl<T: Real> ViewStates<T> {
    pub fn get(&self, view: View) -> Option<&PathwayState<T>> {
        match view {
            View::Ground => self.ground.as_ref(),
            View::Aerial => self.aerial.as_ref(),
        }
    }

    pub fn matches(&self, mode: ViewMode) -> bool {
        self.ground.is_some() == mode.uses(View::Ground) && self.aerial.is_some() == mode.uses(View::Aerial)
    }
}

/// Zero states for every view the mode uses.
pub fn init_state<T: Real>(config: &AgentConfig, mode: ViewMode) -> ViewStates<T> {
    let fresh = || PathwayState {
        locale: LstmState::zeros(config.locale_hidden),
        policy: LstmState::zeros(config.policy_hidden),
    };
    ViewStates {
        ground: mode.uses(View::Ground).then(fresh),
        aerial: mode.uses(View::Aerial).then(fresh),
    }
}

/// Extra per-step inputs besides the observation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepContext {
    pub prev_action: Option<usize>,
    pub prev_reward: f32,
}

#[derive(Debug, Clone, Copy)]
pub struct PathwayNodes {
    pub locale: LstmNodes,
    pub policy: LstmNodes,
}

impl PathwayNodes {
    pub fn input<T: Real>(tape: &mut Tape<'_, T>, s: &PathwayState<T>) -> Self {
        Self {
            locale: LstmNodes::input(tape, &s.locale),
            policy: LstmNodes::input(tape, &s.policy),
        }
    }

    pub fn read<T: Real>(&self, tape: &Tape<'_, T>) -> PathwayState<T> {
        PathwayState {
            locale: self.locale.read(tape),
            policy: self.policy.read(tape),
        }
    }
}

/// Forward outputs as tape nodes. Index 0 is ground, 1 is aerial.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub logits: [Option<NodeId>; 2],
    pub embed: [Option<NodeId>; 2],
    pub value: NodeId,
    pub heading: NodeId,
    pub states: [Option<PathwayNodes>; 2],
}

/// Forward outputs as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput<T> {
    pub logits_ground: Option<Vec<T>>,
    pub logits_aerial: Option<Vec<T>>,
    pub value: T,
    pub heading_pred: [T; 2],
    pub embed_ground: Option<Vec<T>>,
    pub embed_aerial: Option<Vec<T>>,
}

impl<T: Real> PolicyOutput<T> {
    pub fn logits(&self, view: View) -> Option<&[T]> {
        match view {
            View::Ground => self.logits_ground.as_deref(),
            View::Aerial => self.logits_aerial.as_deref(),
        }
    }
}

fn to_tensor<T: Real>(values: &[f32]) -> Tensor<T> {
    Tensor::row(&values.iter().map(|&v| T::from_f64(v as f64)).collect::<Vec<_>>())
}

fn encode<T: Real>(tape: &mut Tape<'_, T>, config: &AgentConfig, view: View, obs: &Observation) -> NodeId {
    let store = tape.store();
    let (part, x) = match view {
        View::Ground => (ENCODER_GROUND, tape.input(to_tensor(&obs.ground))),
        View::Aerial => {
            if config.aerial_conv {
                // [H, W, C] -> [C, H, W]
                let (w, c) = (config.aerial_size, config.aerial_channels);
                let mut chw = vec![T::zero(); w * w * c];
                for (i, &v) in obs.aerial.iter().enumerate() {
                    let (pix, ch) = (i / c, i % c);
                    chw[ch * w * w + pix] = T::from_f64(v as f64);
                }
                let x = tape.input(Tensor::new(&[c, w, w], chw));
                let c1 = Conv2d::bind(store, ENCODER_AERIAL, "conv1", 2).expect("conv1");
                let c2 = Conv2d::bind(store, ENCODER_AERIAL, "conv2", 2).expect("conv2");
                let h = c1.forward(tape, x);
                let h = tape.relu(h);
                let h = c2.forward(tape, h);
                let h = tape.relu(h);
                let n = tape.value(h).len();
                (ENCODER_AERIAL, tape.reshape(h, &[1, n]))
            } else {
                (ENCODER_AERIAL, tape.input(to_tensor(&obs.aerial)))
            }
        }
    };
    let fc1 = Dense::bind(store, part, "fc1").expect("encoder fc1");
    let fc2 = Dense::bind(store, part, "fc2").expect("encoder fc2");
    let h = fc1.forward(tape, x);
    let h = tape.relu(h);
    let e = fc2.forward(tape, h);
    tape.tanh(e)
}

/// Records one agent step on `tape`.
///
/// Only the views enabled by `mode` are read from `obs`; `states` must hold
/// node handles for exactly those views.
pub fn forward_nodes<T: Real>(
    tape: &mut Tape<'_, T>,
    config: &AgentConfig,
    region: &str,
    obs: &Observation,
    ctx: StepContext,
    states: [Option<PathwayNodes>; 2],
    mode: ViewMode,
) -> Result<ForwardNodes, AgentError> {
    let store = tape.store();
    let locale_name = locale_partition(region);
    let locale = LstmCell::bind(store, &locale_name, "lstm")
        .ok_or_else(|| AgentError::MissingLocale(region.to_string()))?;
    let core = LstmCell::bind(store, POLICY_CORE, "lstm").expect("policy core");
    let head = Dense::bind(store, POLICY_HEAD, "logits").expect("policy head");
    let value_head = Dense::bind(store, VALUE_HEAD, "value").expect("value head");
    let heading_head = Dense::bind(store, HEADING_HEAD, "heading").expect("heading head");

    let goal = tape.input(Tensor::row(&[T::from_f64(obs.goal[0] as f64), T::from_f64(obs.goal[1] as f64)]));
    let extra = config.feed_prev_action_reward.then(|| {
        let mut v = vec![T::zero(); NUM_ACTIONS + 1];
        if let Some(a) = ctx.prev_action {
            v[a] = T::one();
        }
        v[NUM_ACTIONS] = T::from_f64(ctx.prev_reward as f64);
        tape.input(Tensor::row(&v))
    });

    let mut out = ForwardNodes {
        logits: [None; 2],
        embed: [None; 2],
        value: goal,
        heading: goal,
        states: [None; 2],
    };
    let mut hiddens = Vec::new();
    for view in [View::Ground, View::Aerial] {
        if !mode.uses(view) {
            if states[view.index()].is_some() {
                return Err(AgentError::StateMismatch(mode));
            }
            continue;
        }
        let st = states[view.index()].ok_or(AgentError::StateMismatch(mode))?;
        let e = encode(tape, config, view, obs);
        let l = locale.step(tape, e, st.locale);
        let mut parts = vec![l.hidden, e, goal];
        if let Some(x) = extra {
            parts.push(x);
        }
        let pin = tape.concat(&parts);
        let p = core.step(tape, pin, st.policy);
        let logits = head.forward(tape, p.hidden);
        out.logits[view.index()] = Some(logits);
        out.embed[view.index()] = Some(e);
        out.states[view.index()] = Some(PathwayNodes { locale: l, policy: p });
        hiddens.push(p.hidden);
    }
    let h = if hiddens.len() == 2 {
        let s = tape.add(hiddens[0], hiddens[1]);
        tape.scale(s, T::from_f64(0.5))
    } else {
        hiddens[0]
    };
    let v = value_head.forward(tape, h);
    out.value = v;
    let e_head = out.embed[0].or(out.embed[1]).expect("at least one view");
    out.heading = heading_head.forward(tape, e_head);
    Ok(out)
}

/// Pure forward pass: values only, no gradients kept.
pub fn forward<T: Real>(
    params: &AgentParams<T>,
    region: &str,
    obs: &Observation,
    ctx: StepContext,
    states: &ViewStates<T>,
    mode: ViewMode,
) -> Result<(PolicyOutput<T>, ViewStates<T>), AgentError> {
    if !states.matches(mode) {
        return Err(AgentError::StateMismatch(mode));
    }
    let mut tape = Tape::new(&params.store);
    let sn = [
        states.ground.as_ref().map(|s| PathwayNodes::input(&mut tape, s)),
        states.aerial.as_ref().map(|s| PathwayNodes::input(&mut tape, s)),
    ];
    let nodes = forward_nodes(&mut tape, &params.config, region, obs, ctx, sn, mode)?;
    let vec_of = |n: Option<NodeId>| n.map(|id| tape.value(id).data().to_vec());
    let heading = tape.value(nodes.heading).data();
    let output = PolicyOutput {
        logits_ground: vec_of(nodes.logits[0]),
        logits_aerial: vec_of(nodes.logits[1]),
        value: tape.value(nodes.value).item(),
        heading_pred: [heading[0], heading[1]],
        embed_ground: vec_of(nodes.embed[0]),
        embed_aerial: vec_of(nodes.embed[1]),
    };
    let next = ViewStates {
        ground: nodes.states[0].map(|s| s.read(&tape)),
        aerial: nodes.states[1].map(|s| s.read(&tape)),
    };
    Ok((output, next))
}

/// View-dropout gate: under `Both`, ground logits with probability `p_ground`,
/// otherwise aerial; single-view modes return their only view.
pub fn view_dropout_select<'o, T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    p_ground: f64,
    out: &'o PolicyOutput<T>,
    mode: ViewMode,
) -> Result<(View, &'o [T]), AgentError> {
    let view = match mode {
        ViewMode::GroundOnly => View::Ground,
        ViewMode::AerialOnly => View::Aerial,
        ViewMode::Both => {
            if rng.gen::<f64>() < p_ground {
                View::Ground
            } else {
                View::Aerial
            }
        }
    };
    let logits = out.logits(view).ok_or(AgentError::MissingLogits(mode, view))?;
    Ok((view, logits))
}

/// Samples from `softmax(logits)`, or takes the argmax (lowest index on ties) when greedy.
pub fn act<T: Real, R: Rng + ?Sized>(logits: &[T], rng: &mut R, greedy: bool) -> usize {
    if greedy {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let probs = softmax_row(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum: last action with nonzero mass
    probs.iter().rposition(|p| *p > T::zero()).unwrap_or(probs.len() - 1)
}

/// `log pi(a)` under `logits`.
pub fn log_prob<T: Real>(logits: &[T], action: usize) -> T {
    log_softmax_row(logits)[action]
}
