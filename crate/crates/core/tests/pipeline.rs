use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

use crossview::citygraph::CityGenConfig;
use crossview::env::StepRecord;
use crossview::eval::{replay_summary, EvalReport};
use crossview::presets::{manifest, Budget, Preset};
use crossview::trainer::pipeline::NetConfig;
use crossview::trainer::{run_pipeline, RunManifest, StageName};

fn tiny_budget() -> Budget {
    let mut b = Budget {
        train_steps: 2400,
        adapt_steps: 400,
        transfer_steps: 400,
        actors: 1,
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
    b.eval.seeds = vec![1, 2];
    b
}

fn tiny(preset: Preset, out: &Path) -> RunManifest {
    manifest(preset, 5, &tiny_budget(), out.to_path_buf())
}

fn sha(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(bytes).to_vec()
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_crossview"))
        .args(args)
        .env("CROSSVIEW_DATA_DIR", std::env::temp_dir())
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_writes_manifest_and_stage_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(tiny(Preset::CrossviewFull, dir.path())).unwrap();
    let names: Vec<StageName> = out.manifest.records.iter().map(|r| r.stage).collect();
    assert_eq!(names, vec![StageName::Training, StageName::Adaptation, StageName::Transfer]);
    for r in &out.manifest.records {
        assert!(r.checkpoint.exists());
        assert!(r.metrics.exists());
        assert!(r.eval.as_ref().unwrap().exists());
    }
    assert_eq!(out.manifest.records[0].env_steps, 2400);
    assert!(dir.path().join("city.json").exists());
    let back = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(back, out.manifest);
    assert_eq!(back.config_hash, back.compute_hash());
    assert!(out.manifest.tags.is_empty());
}

#[test]
fn no_adapt_runs_are_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(tiny(Preset::NoAdapt, dir.path())).unwrap();
    assert_eq!(out.manifest.records.len(), 2);
    assert!(out.manifest.tags.iter().any(|t| t == "no_adapt"));
}

#[test]
fn cli_walkthrough_and_eval_leaves_checkpoint_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mpath = dir.path().join("m.json");
    tiny(Preset::CrossviewFull, &run).save(&mpath).unwrap();

    let o = cli(&["pipeline", "--manifest", p(&mpath)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("manifest"));

    let ckpt = run.join("2_transfer.ckpt");
    let before = sha(&ckpt);
    let traj = dir.path().join("traj.jsonl");
    let report = dir.path().join("report.json");
    let o = cli(&[
        "eval",
        "--city",
        p(&run.join("city.json")),
        "--checkpoint",
        p(&ckpt),
        "--zero-shot",
        "--episodes",
        "2",
        "--seeds",
        "3,4",
        "--dump-trajectories",
        p(&traj),
        "--report",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(sha(&ckpt), before);

    let rep: EvalReport = serde_json::from_reader(std::fs::File::open(&report).unwrap()).unwrap();
    let recs: Vec<StepRecord> = std::fs::read_to_string(&traj)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), 4 * 1000);
    let (reward, success) = replay_summary(&recs);
    assert!((reward - rep.reward_mean).abs() < 1e-9);
    assert!((success - rep.success_rate).abs() < 1e-12);

    let cmp = cli(&["compare", p(&report), p(&report)]);
    assert!(cmp.status.success());

    let svg = dir.path().join("curve.svg");
    let o = cli(&["plot", "--csv", p(&run.join("0_training.csv")), "--out", p(&svg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn cli_exit_codes() {
    assert_eq!(cli(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(cli(&["train", "--steps", "0"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing: PathBuf = dir.path().join("missing.ckpt");
    let o = cli(&["eval", "--checkpoint", p(&missing)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!o.stderr.is_empty());

    let city = dir.path().join("city.json");
    let o = cli(&["gen-city", "--seed", "3", "--region-cells", "8", "--out", p(&city)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(city.exists());
    let o = cli(&["gen-city", "--region-cells", "2", "--out", p(&city)]);
    assert_eq!(o.status.code(), Some(1));

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"XVIEWCK\n\x05").unwrap();
    let o = cli(&["eval", "--city", p(&city), "--checkpoint", p(&bad)]);
    assert_eq!(o.status.code(), Some(3));
}
