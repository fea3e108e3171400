use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use crossview_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = xv_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn city() -> *mut XvCity {
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { xv_city_generate(3, 8, 2, &mut c) }, XvStatus::Ok);
    c
}

#[test]
fn episode_through_the_c_api() {
    unsafe {
        let c = city();
        let (mut nodes, mut edges) = (0, 0);
        assert_eq!(xv_city_size(c, &mut nodes, &mut edges), XvStatus::Ok);
        assert!(nodes > 0 && edges > 0);

        let mut env = ptr::null_mut();
        assert_eq!(xv_env_new(c, 11, &mut env), XvStatus::Ok);
        let mut step = XvStep::default();
        assert_eq!(xv_env_step(env, 0, &mut step), XvStatus::InvalidArgument);

        let region = cstr("train0");
        assert_eq!(xv_env_reset(env, region.as_ptr(), 300.0), XvStatus::Ok);
        let mut shape = XvObservationShape::default();
        assert_eq!(xv_env_observation_shape(env, &mut shape), XvStatus::Ok);
        let mut ground = vec![f32::NAN; shape.ground_len];
        let mut aerial = vec![f32::NAN; shape.aerial_len];
        let mut goal = [f32::NAN; 2];
        assert_eq!(
            xv_env_observation(env, ground.as_mut_ptr(), ground.len(), aerial.as_mut_ptr(), aerial.len(), goal.as_mut_ptr()),
            XvStatus::Ok
        );
        assert!(ground.iter().chain(&aerial).all(|v| (0.0..=1.0).contains(v)));
        assert!(goal.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(
            xv_env_observation(env, ground.as_mut_ptr(), 3, ptr::null_mut(), 0, ptr::null_mut()),
            XvStatus::InvalidArgument
        );

        let mut total = 0.0;
        for t in 0..1000 {
            assert_eq!(xv_env_step(env, (t % 5) as u32, &mut step), XvStatus::Ok);
            assert!(step.reward >= 0.0);
            total += step.reward;
        }
        assert!(step.episode_done);
        assert!(total >= 0.0);
        assert_eq!(xv_env_step(env, 0, &mut step), XvStatus::EpisodeDone);
        assert_eq!(xv_env_step(env, 9, &mut step), XvStatus::InvalidArgument);
        assert!(last_error().contains("action 9"));

        xv_env_free(env);
        xv_city_free(c);
        xv_city_free(ptr::null_mut());
    }
}

#[test]
fn bad_arguments_map_to_status_codes() {
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(xv_city_generate(1, 2, 2, &mut c), XvStatus::InvalidArgument);
        assert!(c.is_null());
        assert_eq!(xv_city_generate(1, 8, 2, ptr::null_mut()), XvStatus::NullPointer);
        assert_eq!(xv_city_load(ptr::null(), &mut c), XvStatus::NullPointer);
        let missing = cstr("/nonexistent/city.json");
        assert_eq!(xv_city_load(missing.as_ptr(), &mut c), XvStatus::Io);
        let mut p = ptr::null_mut();
        assert_eq!(xv_params_load(missing.as_ptr(), &mut p), XvStatus::Io);
        assert!(!last_error().is_empty());

        let c = city();
        let mut env = ptr::null_mut();
        assert_eq!(xv_env_new(c, 1, &mut env), XvStatus::Ok);
        let r = cstr("train0");
        assert_eq!(xv_env_reset(env, r.as_ptr(), -1.0), XvStatus::InvalidArgument);
        let bogus = cstr("bogus");
        assert_eq!(xv_env_reset(env, bogus.as_ptr(), 100.0), XvStatus::InvalidArgument);
        assert_eq!(xv_env_reset(env, r.as_ptr(), 100.0), XvStatus::Ok);
        assert!(xv_last_error().is_null());
        xv_env_free(env);
        xv_city_free(c);
    }
}

#[test]
fn city_and_checkpoint_round_trip() {
    use crossview::agent::AgentParams;
    use crossview::citygraph::RegionRole;
    use crossview::env::{EnvConfig, World};
    use crossview::trainer::pipeline::NetConfig;

    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let c = city();
        let cpath = cstr(dir.path().join("city.json").to_str().unwrap());
        assert_eq!(xv_city_save(c, cpath.as_ptr()), XvStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(xv_city_load(cpath.as_ptr(), &mut back), XvStatus::Ok);

        let text = std::fs::read_to_string(dir.path().join("city.json")).unwrap();
        let graph = crossview::citygraph::CityGraph::from_json(&text).unwrap();
        let world = World::new(graph, EnvConfig::default());
        let net = NetConfig {
            encoder_hidden: 8,
            embed: 8,
            locale_hidden: 8,
            policy_hidden: 8,
            ..NetConfig::default()
        };
        let params = AgentParams::<f32>::init(net.agent_config(&world, 4), &world.graph.region_names(RegionRole::Train));
        let ck: PathBuf = dir.path().join("a.ckpt");
        crossview::trainer::save_params(&params, &ck).unwrap();
        let before = std::fs::read(&ck).unwrap();

        let mut p = ptr::null_mut();
        let ckc = cstr(ck.to_str().unwrap());
        assert_eq!(xv_params_load(ckc.as_ptr(), &mut p), XvStatus::Ok);
        let mut summary = XvEvalSummary::default();
        let region = cstr("heldout");
        assert_eq!(xv_evaluate(p, back, region.as_ptr(), XvView::Ground, 1, 1, 2, &mut summary), XvStatus::Ok);
        assert_eq!(summary.episodes, 2);
        assert!(summary.reward_mean >= 0.0);
        assert!((0.0..=1.0).contains(&summary.success_rate));
        assert_eq!(std::fs::read(&ck).unwrap(), before);

        let copy = cstr(dir.path().join("b.ckpt").to_str().unwrap());
        assert_eq!(xv_params_save(p, copy.as_ptr()), XvStatus::Ok);
        assert_eq!(std::fs::read(dir.path().join("b.ckpt")).unwrap(), before);

        xv_params_free(p);
        xv_city_free(back);
        xv_city_free(c);
    }
}

#[test]
fn c_program_compiles_against_header() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libcrossview_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("smoke");
    let status = Command::new(&cc)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("steps 1000"));
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
