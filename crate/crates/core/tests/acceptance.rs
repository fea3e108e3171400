//! Acceptance criteria, one PASS/FAIL line each.
//!
//! The multi-seed protocol (criteria 6 to 9) trains every preset on five seeds.
//! Finished runs are kept under the cargo target tmp dir and reused when their
//! manifest hash matches; set `CROSSVIEW_ACCEPT_FRESH=1` to retrain.
//! `CROSSVIEW_ACCEPT_SCALE` multiplies the protocol step budgets.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crossview::agent::{locale_partition, ENCODER_AERIAL, ENCODER_GROUND, POLICY_CORE, POLICY_HEAD, VALUE_HEAD};
use crossview::citygraph::{bird_flight_distance, generate_city, CityGenConfig, NodeId, Position, RegionRole};
use crossview::env::{Action, AgentPose, CourierEnv, EnvConfig, World};
use crossview::eval::{compare_paired, evaluate, mean_policy_kl, Comparison, EvalReport};
use crossview::gradsuite::{run_suite, SuiteConfig};
use crossview::losses::{discounted_returns, embed_loss, kl_policy_loss};
use crossview::nn::{ParamStore, Tape, Tensor};
use crossview::presets::{manifest, Budget, Preset, HELDOUT};
use crossview::trainer::pipeline::NetConfig;
use crossview::trainer::{load_params, run_pipeline, run_stage, RunManifest, TrainableSet};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn tiny_budget() -> Budget {
    let mut b = Budget {
        train_steps: 2400,
        adapt_steps: 800,
        transfer_steps: 800,
        actors: 2,
        unroll: 10,
        batch: 4,
        deterministic: true,
        curriculum_start: 20.0,
        curriculum_end: 60.0,
        net: NetConfig {
            encoder_hidden: 8,
            embed: 8,
            locale_hidden: 8,
            policy_hidden: 8,
            ..NetConfig::default()
        },
        city: CityGenConfig {
            region_cells: 8,
            ..CityGenConfig::default()
        },
        ..Budget::default()
    };
    b.eval.episodes = 1;
    b.eval.seeds = vec![1];
    b
}

// 1
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let entries = run_suite(&SuiteConfig {
        instances: 20,
        seed: 2024,
        ..SuiteConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name).collect();
    check(
        failed.is_empty() && elapsed < Duration::from_secs(60) && entries.iter().all(|e| e.instances >= 20),
        format!("{} checks x 20 instances, max rel error {worst:.2e}, {:.1}s", entries.len(), elapsed.as_secs_f64()),
        format!("failed {failed:?}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn scalar_loss(f: impl FnOnce(&mut Tape<'_, f64>) -> crossview::nn::NodeId) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let n = f(&mut tape);
    tape.value(n).data()[0]
}

// 2
fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.gen_range(1..=16);
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let got = scalar_loss(|t| {
            let x = t.input(Tensor::row(&a));
            let y = t.input(Tensor::row(&b));
            embed_loss(t, x, y, false)
        });
        let want = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        worst = worst.max((got - want).abs());

        let p: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let q: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let got = scalar_loss(|t| {
            let x = t.input(Tensor::row(&p));
            let y = t.input(Tensor::row(&q));
            kl_policy_loss(t, x, y, false)
        });
        let soft = |l: &[f64]| {
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            l.iter().map(|v| v.exp() / z).collect::<Vec<f64>>()
        };
        let (pg, pa) = (soft(&p), soft(&q));
        let want: f64 = pg.iter().zip(&pa).map(|(g, a)| g * (g / a).ln()).sum();
        worst = worst.max((got - want).abs());
        if got < -1e-12 {
            return Err(format!("negative KL {got}"));
        }
    }
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let g = rng.gen_range(0.0..=1.0);
        let fast = discounted_returns(&r, g, 0.0, &vec![false; n]);
        for t in 0..n {
            let slow: f64 = (0..n - t).map(|j| g.powi(j as i32) * r[t + j]).sum();
            worst = worst.max((fast[t] - slow).abs());
        }
    }
    check(
        worst <= 1e-12,
        format!("max abs error {worst:.1e} over 10^3 pairs and returns"),
        format!("max abs error {worst:.3e} exceeds 1e-12"),
    )
}

fn tensor_hashes(path: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let p = load_params(path).map_err(|e| e.to_string())?;
    let mut out = BTreeMap::new();
    for part in p.store.partitions() {
        for (name, t) in &part.tensors {
            let mut h = Sha256::new();
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
            out.insert(format!("{}/{}", part.name, name), h.finalize().to_vec());
        }
    }
    Ok(out)
}

// 3
fn freeze_invariants() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = run_pipeline(manifest(Preset::CrossviewFull, 3, &tiny_budget(), dir.path().to_path_buf())).map_err(|e| e.to_string())?;
    let h: Vec<_> = out.manifest.records.iter().map(|r| tensor_hashes(&r.checkpoint)).collect::<Result<_, _>>()?;
    let target = format!("{}/", locale_partition(HELDOUT));
    let mut changed = Vec::new();
    for (k, v) in &h[1] {
        if h[0].get(k) != Some(v) && !k.starts_with(&target) {
            changed.push(format!("adapt:{k}"));
        }
    }
    let adapted = h[1].iter().filter(|(k, v)| k.starts_with(&target) && h[2].get(*k) != Some(*v)).count();
    let frozen = [ENCODER_GROUND, ENCODER_AERIAL, POLICY_CORE, POLICY_HEAD, VALUE_HEAD];
    let mut checked = 0;
    for (k, v) in &h[2] {
        if frozen.iter().any(|p| k.starts_with(&format!("{p}/"))) {
            checked += 1;
            if h[1].get(k) != Some(v) {
                changed.push(format!("transfer:{k}"));
            }
        }
    }
    let target_trained = h[1].keys().any(|k| k.starts_with(&target)) && !h[0].keys().any(|k| k.starts_with(&target));
    check(
        changed.is_empty() && target_trained && checked > 0 && adapted > 0,
        format!("{} tensors hashed; only the target locale moved; {checked} frozen tensors identical through transfer", h[0].len()),
        format!("unexpected changes {changed:?} (target created {target_trained}, transfer moved {adapted})"),
    )
}

// 4
fn view_mode_soundness() -> Outcome {
    let b = tiny_budget();
    let graph = generate_city(8, &b.city).map_err(|e| e.to_string())?;
    let net = b.net.clone();
    let mut done = Vec::new();
    for (poison_ground, poison_aerial) in [(false, true), (true, false)] {
        let world = World::poisoned(graph.clone(), EnvConfig::default(), poison_ground, poison_aerial);
        let regions = world.graph.region_names(RegionRole::Train);
        let params = crossview::agent::AgentParams::init(net.agent_config(&world, 1), &regions);
        let m = manifest(Preset::Singleview, 8, &b, PathBuf::new());
        let mut cfg = if poison_aerial {
            m.stages[0].clone()
        } else {
            let full = manifest(Preset::CrossviewFull, 8, &b, PathBuf::new());
            full.stages[1].clone()
        };
        if poison_ground {
            cfg.regions = vec![regions[0].clone()];
            cfg.trainable = TrainableSet::Only(vec![locale_partition(&regions[0])]);
        }
        let (params, report) = run_stage(Arc::clone(&world), params, &cfg).map_err(|e| format!("{:?} stage: {e}", cfg.view_mode))?;
        if report.metrics.iter().any(|r| !r.loss_total.is_finite()) {
            return Err(format!("{:?} stage logged non-finite loss", cfg.view_mode));
        }
        let mode = cfg.view_mode;
        let r = evaluate(&params, world, &cfg.regions[0], mode, &b.eval).map_err(|e| e.to_string())?;
        if !r.reward_mean.is_finite() {
            return Err(format!("{mode:?} evaluation not finite"));
        }
        done.push(format!("{mode:?} ({} steps)", report.env_steps));
    }
    Ok(format!("completed with the other view NaN-poisoned: {}", done.join(", ")))
}

// 5
fn determinism() -> Outcome {
    let run = || -> Result<Vec<Vec<u8>>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = run_pipeline(manifest(Preset::CrossviewFull, 4, &tiny_budget(), dir.path().to_path_buf())).map_err(|e| e.to_string())?;
        out.manifest
            .records
            .iter()
            .map(|r| std::fs::read(&r.metrics).map_err(|e| e.to_string()))
            .collect()
    };
    let (a, b) = (run()?, run()?);
    check(
        a == b && a.iter().all(|c| !c.is_empty()),
        format!("{} metrics CSVs byte-identical across two runs", a.len()),
        "metrics CSVs differ between runs".into(),
    )
}

// 10
fn environment_walkthrough() -> Outcome {
    let cfg = CityGenConfig {
        region_cells: 60,
        train_regions: 1,
        landmark_density: 0.0,
        ..CityGenConfig::unjittered()
    };
    let world = World::new(generate_city(5, &cfg).map_err(|e| e.to_string())?, EnvConfig::default());
    let bounds = world.graph.region("train0").map_err(|e| e.to_string())?.bounds;
    let pitch = world.graph.config.pitch;
    let node = |i: usize, j: usize| -> NodeId {
        let target = Position::new(bounds.min_x + i as f64 * pitch, bounds.min_y + j as f64 * pitch);
        *world
            .graph
            .region("train0")
            .unwrap()
            .node_ids
            .iter()
            .find(|&&n| bird_flight_distance(world.graph.position(n), target) < 1e-9)
            .expect("grid node")
    };
    let at = |i, j, heading| {
        let mut env = CourierEnv::new(Arc::clone(&world), 0);
        env.reset("train0", 400.0).unwrap();
        env.set_pose(AgentPose { node: node(i, j), heading });
        env
    };
    let mut fails = Vec::new();

    let mut env = at(30, 30, 0.0);
    env.set_goal(node(0, 0));
    let mut headings = Vec::new();
    for a in [Action::LeftSmall, Action::RightLarge, Action::LeftLarge, Action::RightSmall] {
        env.step(a);
        headings.push(env.pose().heading);
    }
    if headings != [337.5, 45.0, 337.5, 0.0] {
        fails.push(format!("turn headings {headings:?}"));
    }

    for (heading, expect) in [(22.5, Some(node(30, 31))), (45.0, None), (90.0, Some(node(31, 30)))] {
        let mut env = at(30, 30, heading);
        env.set_goal(node(0, 0));
        let r = env.step(Action::Forward);
        let moved = (!r.info.wasted_action).then(|| env.pose().node);
        if moved != expect {
            fails.push(format!("forward at heading {heading}"));
        }
    }

    let mut env = at(0, 10, 90.0);
    env.set_goal(node(50, 10));
    let mut paid = Vec::new();
    for k in 1..=50 {
        let r = env.step(Action::Forward);
        if r.reward > 0.0 {
            paid.push((k, r.reward, r.info.goal_reached));
        }
        if r.info.goal_reached {
            break;
        }
    }
    if paid != [(30, 2.5, false), (40, 5.0, true)] {
        fails.push(format!("early/goal rewards {paid:?}"));
    }

    for (gi, expect) in [(30, 3.0), (45, 4.5), (60, 6.0)] {
        let mut env = at(0, 0, 90.0);
        env.set_goal(node(gi, 0));
        if env.goal_reward() != expect {
            fails.push(format!("goal reward at {gi} pitches"));
        }
    }

    let mut env = CourierEnv::new(Arc::clone(&world), 3);
    env.reset("train0", 400.0).unwrap();
    let ends: Vec<u32> = (1..=1000).filter(|_| env.step(Action::LeftSmall).episode_done).collect();
    if ends != [1000] || !env.is_done() {
        fails.push(format!("episode ended at {ends:?}"));
    }
    check(
        fails.is_empty(),
        "turns, facing cone, 100-unit tolerance, single early reward at 200, 1000-step episodes, proportional reward".into(),
        fails.join("; "),
    )
}

// ---- multi-seed protocol ----

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const PRESETS: [Preset; 4] = [Preset::CrossviewFull, Preset::Singleview, Preset::NoKl, Preset::Distill];

fn protocol_budget() -> Budget {
    let mut b = Budget::default();
    let h = 32;
    b.net.encoder_hidden = h;
    b.net.embed = h;
    b.net.locale_hidden = h;
    b.net.policy_hidden = h;
    b.deterministic = true;
    let scale: f64 = std::env::var("CROSSVIEW_ACCEPT_SCALE").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    if scale != 1.0 {
        b = b.scaled(scale);
    }
    b
}

fn protocol_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

struct Run {
    manifest: RunManifest,
    evals: Vec<EvalReport>,
}

fn cached(fresh: &RunManifest) -> Option<RunManifest> {
    if std::env::var("CROSSVIEW_ACCEPT_FRESH").is_ok_and(|v| v == "1") {
        return None;
    }
    let stored = RunManifest::load(&fresh.out_dir.join("manifest.json")).ok()?;
    let mut s = stored.clone();
    s.records.clear();
    s.config_hash.clear();
    s.tags = fresh.tags.clone();
    let complete = stored.records.len() == stored.stages.len()
        && stored.records.iter().all(|r| r.checkpoint.exists() && r.eval.as_ref().is_some_and(|e| e.exists()));
    (s == *fresh && complete).then_some(stored)
}

fn run_protocol(preset: Preset, seed: u64, budget: &Budget) -> Result<Run, String> {
    let fresh = manifest(preset, seed, budget, protocol_dir().join(format!("{preset}_seed{seed}")));
    let m = match cached(&fresh) {
        Some(m) => m,
        None => {
            let start = Instant::now();
            let out = run_pipeline(fresh).map_err(|e| format!("{preset} seed {seed}: {e}"))?;
            eprintln!("  trained {preset} seed {seed} in {:.0}s", start.elapsed().as_secs_f64());
            out.manifest
        }
    };
    let evals = m
        .records
        .iter()
        .map(|r| {
            let f = std::fs::File::open(r.eval.as_ref().unwrap()).map_err(|e| e.to_string())?;
            serde_json::from_reader(f).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<EvalReport>, String>>()?;
    Ok(Run { manifest: m, evals })
}

struct Protocol {
    runs: HashMap<(Preset, u64), Run>,
    elapsed: Duration,
}

impl Protocol {
    fn rewards(&self, preset: Preset, pick: impl Fn(&Run) -> &EvalReport) -> (Vec<f64>, f64) {
        let reports: Vec<&EvalReport> = SEEDS.iter().map(|s| pick(&self.runs[&(preset, *s)])).collect();
        let rewards = reports.iter().map(|r| r.reward_mean).collect();
        let success = reports.iter().map(|r| r.success_rate).sum::<f64>() / reports.len() as f64;
        (rewards, success)
    }

    fn compare(&self, a: (Preset, fn(&Run) -> &EvalReport), b: (Preset, fn(&Run) -> &EvalReport), la: &str, lb: &str) -> Comparison {
        let (xa, sa) = self.rewards(a.0, a.1);
        let (xb, sb) = self.rewards(b.0, b.1);
        compare_paired(&xa, &xb, &SEEDS, la, lb, sa, sb)
    }
}

fn after_training(r: &Run) -> &EvalReport {
    &r.evals[0]
}

fn after_adaptation(r: &Run) -> &EvalReport {
    &r.evals[1]
}

fn after_transfer(r: &Run) -> &EvalReport {
    r.evals.last().unwrap()
}

fn protocol() -> Result<Protocol, String> {
    let budget = protocol_budget();
    let start = Instant::now();
    let mut runs = HashMap::new();
    for seed in SEEDS {
        for preset in PRESETS {
            runs.insert((preset, seed), run_protocol(preset, seed, &budget)?);
        }
    }
    Ok(Protocol {
        runs,
        elapsed: start.elapsed(),
    })
}

fn summary(c: &Comparison) -> String {
    format!(
        "{} {:.3} vs {} {:.3}, wins {}/{}, p={:.4}, success {:.3} vs {:.3}",
        c.label_a,
        c.mean_a,
        c.label_b,
        c.mean_b,
        c.wins,
        c.differences.len(),
        c.p_value,
        c.success_a,
        c.success_b
    )
}

// 6
fn transfer_claim(p: &Protocol) -> Outcome {
    let c = p.compare(
        (Preset::CrossviewFull, after_adaptation),
        (Preset::Singleview, after_training),
        "crossview",
        "singleview",
    );
    let majority = c.wins * 2 > c.differences.len();
    check(
        majority && c.p_value <= 0.1 && c.success_a > c.success_b,
        format!("{}; protocol {:.0}s", summary(&c), p.elapsed.as_secs_f64()),
        summary(&c),
    )
}

// 7
fn adaptation_ablation(p: &Protocol) -> Outcome {
    // no_adapt shares crossview_full's training stage, so its zero-shot
    // evaluation is the one written right after training.
    let c = p.compare(
        (Preset::CrossviewFull, after_adaptation),
        (Preset::CrossviewFull, after_training),
        "crossview_full",
        "no_adapt",
    );
    check(c.mean_a >= c.mean_b, summary(&c), summary(&c))
}

// 8
fn ablation_ordering(p: &Protocol) -> Outcome {
    let d = p.compare(
        (Preset::CrossviewFull, after_transfer),
        (Preset::Distill, after_transfer),
        "full",
        "distill",
    );
    let k = p.compare(
        (Preset::CrossviewFull, after_transfer),
        (Preset::NoKl, after_transfer),
        "full",
        "no_kl",
    );
    let text = format!("{} | {}", summary(&d), summary(&k));
    check(d.mean_a >= d.mean_b && k.mean_a >= k.mean_b, text.clone(), text)
}

// 9
fn cross_view_consistency(p: &Protocol) -> Outcome {
    let kl = |preset: Preset| -> Result<f64, String> {
        let mut total = 0.0;
        for seed in SEEDS {
            let run = &p.runs[&(preset, seed)];
            let params = load_params(&run.manifest.records[1].checkpoint).map_err(|e| e.to_string())?;
            let world = run.manifest.world().map_err(|e| e.to_string())?;
            total += mean_policy_kl(&params, world, &[HELDOUT.to_string()], 1000, 200, 10_000 + seed).map_err(|e| e.to_string())?;
        }
        Ok(total / SEEDS.len() as f64)
    };
    let full = kl(Preset::CrossviewFull)?;
    let nokl = kl(Preset::NoKl)?;
    check(
        full <= 0.25 * nokl,
        format!("mean KL(p_g||p_a) {full:.3e} vs no_kl {nokl:.3e} (ratio {:.3})", full / nokl),
        format!("mean KL {full:.3e} exceeds 25% of no_kl {nokl:.3e} (ratio {:.3})", full / nokl),
    )
}

fn report(n: usize, name: &str, o: &Outcome) -> bool {
    match o {
        Ok(m) => println!("criterion {n:>2} PASS  {name}: {m}"),
        Err(m) => println!("criterion {n:>2} FAIL  {name}: {m}"),
    }
    o.is_ok()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let filter = args.iter().skip(1).find(|a| !a.starts_with('-')).cloned();
    if let Some(f) = &filter {
        if !"acceptance".contains(f.as_str()) {
            return;
        }
    }

    let mut ok = true;
    ok &= report(1, "gradient correctness", &gradient_suite());
    ok &= report(2, "loss oracles", &loss_oracles());
    ok &= report(3, "freeze invariants", &freeze_invariants());
    ok &= report(4, "view-mode soundness", &view_mode_soundness());
    ok &= report(5, "determinism", &determinism());
    match protocol() {
        Ok(p) => {
            ok &= report(6, "directional transfer", &transfer_claim(&p));
            ok &= report(7, "adaptation ablation", &adaptation_ablation(&p));
            ok &= report(8, "ablation ordering", &ablation_ordering(&p));
            ok &= report(9, "cross-view consistency", &cross_view_consistency(&p));
        }
        Err(e) => {
            for (n, name) in [(6, "directional transfer"), (7, "adaptation ablation"), (8, "ablation ordering"), (9, "cross-view consistency")] {
                ok &= report(n, name, &Err(e.clone()));
            }
        }
    }
    ok &= report(10, "environment conformance", &environment_walkthrough());
    if !ok {
        std::process::exit(1);
    }
}
