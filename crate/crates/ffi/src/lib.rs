//! C interface to the crossview city, courier environment and checkpoints.
//!
//! Every function returns an [`XvStatus`]. Objects are opaque handles owned by
//! the caller and released with the matching `_free` function. On failure the
//! message is kept per thread and read with [`xv_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use crossview::agent::{AgentParams, ViewMode};
use crossview::citygraph::{generate_city, CityGenConfig, CityGraph};
use crossview::env::{Action, CourierEnv, EnvConfig, Observation, World};
use crossview::eval::{evaluate, EvalConfig};
use crossview::trainer::{load_params, save_params, TrainError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    EpisodeDone = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XvView {
    Ground = 0,
    Aerial = 1,
    Both = 2,
}

impl From<XvView> for ViewMode {
    fn from(v: XvView) -> Self {
        match v {
            XvView::Ground => ViewMode::GroundOnly,
            XvView::Aerial => ViewMode::AerialOnly,
            XvView::Both => ViewMode::Both,
        }
    }
}

/// Generated or loaded street graph.
pub struct XvCity {
    graph: CityGraph,
}

/// Courier environment bound to one city.
pub struct XvEnv {
    env: CourierEnv,
    obs: Option<Observation>,
}

/// Agent parameters loaded from a checkpoint.
pub struct XvParams {
    params: AgentParams<f32>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct XvObservationShape {
    pub ground_len: usize,
    pub aerial_len: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct XvStep {
    pub reward: f64,
    pub episode_done: bool,
    pub goal_reached: bool,
    pub wasted_action: bool,
    pub goals_completed: u32,
    pub distance_to_goal: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct XvEvalSummary {
    pub reward_mean: f64,
    pub reward_stderr: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(XvStatus, String);

impl From<TrainError> for Fail {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFinite(_) => XvStatus::Numeric,
            TrainError::Io(_) | TrainError::MissingCheckpoint(_) | TrainError::Nn(_) | TrainError::Csv(_) => XvStatus::Io,
            _ => XvStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

fn invalid(e: impl std::fmt::Display) -> Fail {
    Fail(XvStatus::InvalidArgument, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> XvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            XvStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(msg);
            XvStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(XvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Last error message on this thread, or null after a successful call.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn xv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn xv_city_generate(seed: u64, region_cells: usize, train_regions: usize, out: *mut *mut XvCity) -> XvStatus {
    guard(|| {
        let mut cfg = CityGenConfig::default();
        if region_cells > 0 {
            cfg.region_cells = region_cells;
        }
        if train_regions > 0 {
            cfg.train_regions = train_regions;
        }
        let graph = generate_city(seed, &cfg).map_err(invalid)?;
        put(out, XvCity { graph })
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` as for [`xv_city_generate`].
#[no_mangle]
pub unsafe extern "C" fn xv_city_load(path: *const c_char, out: *mut *mut XvCity) -> XvStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let text = std::fs::read_to_string(path).map_err(|e| Fail(XvStatus::Io, format!("{path}: {e}")))?;
        let graph = CityGraph::from_json(&text).map_err(|e| Fail(XvStatus::Io, format!("{path}: {e}")))?;
        put(out, XvCity { graph })
    })
}

/// # Safety
/// `city` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn xv_city_save(city: *const XvCity, path: *const c_char) -> XvStatus {
    guard(|| {
        let city = get(city, "city")?;
        let path = str_arg(path, "path")?;
        std::fs::write(path, city.graph.to_json()).map_err(|e| Fail(XvStatus::Io, format!("{path}: {e}")))
    })
}

/// # Safety
/// `city` must be a live handle and `nodes`, `edges` writable.
#[no_mangle]
pub unsafe extern "C" fn xv_city_size(city: *const XvCity, nodes: *mut usize, edges: *mut usize) -> XvStatus {
    guard(|| {
        let city = get(city, "city")?;
        *get_mut(nodes, "nodes")? = city.graph.node_count();
        *get_mut(edges, "edges")? = city.graph.edges.len();
        Ok(())
    })
}

/// # Safety
/// `city` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xv_city_free(city: *mut XvCity) {
    if !city.is_null() {
        drop(Box::from_raw(city));
    }
}

/// Creates an environment with default settings over a copy of `city`.
///
/// # Safety
/// `city` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xv_env_new(city: *const XvCity, seed: u64, out: *mut *mut XvEnv) -> XvStatus {
    guard(|| {
        let city = get(city, "city")?;
        let world = World::new(city.graph.clone(), EnvConfig::default());
        put(
            out,
            XvEnv {
                env: CourierEnv::new(world, seed),
                obs: None,
            },
        )
    })
}

/// # Safety
/// `env` must be a live handle and `shape` writable.
#[no_mangle]
pub unsafe extern "C" fn xv_env_observation_shape(env: *const XvEnv, shape: *mut XvObservationShape) -> XvStatus {
    guard(|| {
        let env = get(env, "env")?;
        let w = env.env.world();
        let (r, c) = w.ground_shape();
        let (a, b, ch) = w.aerial_shape();
        *get_mut(shape, "shape")? = XvObservationShape {
            ground_len: r * c,
            aerial_len: a * b * ch,
        };
        Ok(())
    })
}

/// Starts an episode in `region` with goals at most `max_goal_distance` away
/// (pass infinity for no limit).
///
/// # Safety
/// `env` must be a live handle; `region` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn xv_env_reset(env: *mut XvEnv, region: *const c_char, max_goal_distance: f64) -> XvStatus {
    guard(|| {
        let env = get_mut(env, "env")?;
        let region = str_arg(region, "region")?;
        if !(max_goal_distance > 0.0) {
            return Err(invalid("max_goal_distance must be positive"));
        }
        env.obs = Some(env.env.reset(region, max_goal_distance).map_err(invalid)?);
        Ok(())
    })
}

/// Applies action 0..=4 (forward, left small, right small, left large, right large).
///
/// # Safety
/// `env` must be a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn xv_env_step(env: *mut XvEnv, action: u32, out: *mut XvStep) -> XvStatus {
    guard(|| {
        let env = get_mut(env, "env")?;
        let action = Action::from_index(action as usize).ok_or_else(|| invalid(format!("action {action} out of range")))?;
        if env.obs.is_none() {
            return Err(invalid("reset the environment before stepping"));
        }
        if env.env.is_done() {
            return Err(Fail(XvStatus::EpisodeDone, "episode finished; reset first".into()));
        }
        let r = env.env.step(action);
        let step = XvStep {
            reward: r.reward,
            episode_done: r.episode_done,
            goal_reached: r.info.goal_reached,
            wasted_action: r.info.wasted_action,
            goals_completed: r.info.goals_completed,
            distance_to_goal: r.info.distance_to_goal,
        };
        env.obs = Some(r.observation);
        if let Some(out) = out.as_mut() {
            *out = step;
        }
        Ok(())
    })
}

/// Copies the current observation. Buffer lengths must match
/// [`xv_env_observation_shape`]; any buffer may be null to skip it.
///
/// # Safety
/// Non-null buffers must hold the given number of elements.
#[no_mangle]
pub unsafe extern "C" fn xv_env_observation(
    env: *const XvEnv,
    ground: *mut f32,
    ground_len: usize,
    aerial: *mut f32,
    aerial_len: usize,
    goal: *mut f32,
) -> XvStatus {
    guard(|| {
        let env = get(env, "env")?;
        let obs = env.obs.as_ref().ok_or_else(|| invalid("no observation before reset"))?;
        for (buf, len, src) in [(ground, ground_len, &obs.ground), (aerial, aerial_len, &obs.aerial)] {
            if buf.is_null() {
                continue;
            }
            if len != src.len() {
                return Err(invalid(format!("buffer holds {len} values, observation has {}", src.len())));
            }
            std::slice::from_raw_parts_mut(buf, len).copy_from_slice(src);
        }
        if !goal.is_null() {
            std::slice::from_raw_parts_mut(goal, 2).copy_from_slice(&obs.goal);
        }
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xv_env_free(env: *mut XvEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xv_params_load(path: *const c_char, out: *mut *mut XvParams) -> XvStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let params = load_params(&path)?;
        put(out, XvParams { params })
    })
}

/// # Safety
/// `params` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn xv_params_save(params: *const XvParams, path: *const c_char) -> XvStatus {
    guard(|| {
        let params = get(params, "params")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_params(&params.params, &path)?;
        Ok(())
    })
}

/// # Safety
/// `params` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xv_params_free(params: *mut XvParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Zero-shot evaluation with sampled actions over `seed_count` consecutive
/// seeds starting at `first_seed`. Parameters are never modified.
///
/// # Safety
/// Handles must be live; `region` a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xv_evaluate(
    params: *const XvParams,
    city: *const XvCity,
    region: *const c_char,
    view: XvView,
    episodes: usize,
    first_seed: u64,
    seed_count: usize,
    out: *mut XvEvalSummary,
) -> XvStatus {
    guard(|| {
        let params = get(params, "params")?;
        let city = get(city, "city")?;
        let region = str_arg(region, "region")?;
        let out = get_mut(out, "out")?;
        let cfg = EvalConfig {
            episodes,
            seeds: (0..seed_count as u64).map(|i| first_seed + i).collect(),
            ..EvalConfig::default()
        };
        let world: Arc<World> = World::new(city.graph.clone(), EnvConfig::default());
        let r = evaluate(&params.params, world, region, view.into(), &cfg).map_err(invalid)?;
        *out = XvEvalSummary {
            reward_mean: r.reward_mean,
            reward_stderr: r.reward_stderr,
            success_rate: r.success_rate,
            episodes: r.episodes,
        };
        Ok(())
    })
}
