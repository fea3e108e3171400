use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crossview::agent::{AgentParams, ViewMode};
use crossview::citygraph::{generate_city, CityGenConfig, CityGraph, RegionRole};
use crossview::env::{write_trajectory_jsonl, EnvConfig, World};
use crossview::eval::{compare, evaluate, EvalConfig, EvalError, EvalReport};
use crossview::gradsuite::{run_suite, SuiteConfig};
use crossview::nn::NnError;
use crossview::plot::{write_svg, PlotError, Series};
use crossview::presets::{manifest, Budget, Preset, HELDOUT};
use crossview::trainer::{
    load_params, run_pipeline, run_stage, save_params, write_metrics_csv, RunManifest, StageConfig, StageName,
    TrainError,
};

/// Cross-view policy learning: city generation, staged training, evaluation and plots.
///
/// Outputs go under $CROSSVIEW_DATA_DIR (default `runs`) unless a path is given.
#[derive(Parser)]
#[command(name = "crossview", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city and write it as JSON.
    GenCity(GenCityArgs),
    /// Run the training stage (both views, every partition trainable).
    Train(StageArgs),
    /// Run the adaptation stage (aerial only, target locale trainable).
    Adapt(StageArgs),
    /// Run the transfer stage (ground only, target locale trainable).
    Transfer(StageArgs),
    /// Run a preset's full stage sequence with zero-shot evaluations in between.
    Pipeline(PipelineArgs),
    /// Evaluate a checkpoint without any parameter update.
    Eval(EvalArgs),
    /// Compare two evaluation reports with a paired sign test.
    Compare(CompareArgs),
    /// Finite-difference check of every op and loss; nonzero exit on failure.
    Gradcheck(GradcheckArgs),
    /// Plot reward-vs-steps curves from metrics CSVs as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct CityArgs {
    /// City JSON written by `gen-city`; overrides --city-seed.
    #[arg(long)]
    city: Option<PathBuf>,
    /// Seed of a default-configured city.
    #[arg(long, default_value_t = 1)]
    city_seed: u64,
}

impl CityArgs {
    fn load(&self) -> Result<CityGraph, CliError> {
        match &self.city {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                CityGraph::from_json(&text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
            }
            None => generate_city(self.city_seed, &CityGenConfig::default()).map_err(|e| CliError::Usage(e.to_string())),
        }
    }
}

#[derive(Args)]
struct GenCityArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_regions: Option<usize>,
    #[arg(long)]
    region_cells: Option<usize>,
    #[arg(long)]
    pitch: Option<f64>,
    /// Plain grid: no jitter and no removed streets.
    #[arg(long)]
    unjittered: bool,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    city: CityArgs,
    /// Preset supplying loss weights and the stage layout.
    #[arg(long, default_value = "crossview_full")]
    preset: Preset,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Input checkpoint (required for adapt and transfer).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Target region for adapt and transfer.
    #[arg(long, default_value = HELDOUT)]
    region: String,
    /// Environment-step budget.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    actors: Option<usize>,
    /// Single actor interleaved with the learner; exactly reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Copy this region's locale into a missing target locale.
    #[arg(long)]
    warm_start_locale: Option<String>,
    /// Stage config TOML; flags above override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hidden width of every layer for fresh parameters.
    #[arg(long)]
    hidden: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, default_value = "crossview_full")]
    preset: Preset,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Multiply every stage budget by this factor.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long)]
    actors: Option<usize>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',')]
    eval_seeds: Option<Vec<u64>>,
    /// Run this manifest JSON instead of a preset.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Start from this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Write the expanded manifest here and exit without running it.
    #[arg(long)]
    emit_manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Ground,
    Aerial,
    Both,
}

impl From<ViewArg> for ViewMode {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Ground => ViewMode::GroundOnly,
            ViewArg::Aerial => ViewMode::AerialOnly,
            ViewArg::Both => ViewMode::Both,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    city: CityArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = HELDOUT)]
    region: String,
    #[arg(long, value_enum, default_value = "ground")]
    view: ViewArg,
    /// Evaluate without retraining (evaluation never updates parameters).
    #[arg(long)]
    zero_shot: bool,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Argmax actions instead of sampling.
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 400.0)]
    max_goal_distance: f64,
    /// Write per-step records as JSON lines.
    #[arg(long)]
    dump_trajectories: Option<PathBuf>,
    /// Write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value = "a")]
    label_a: String,
    #[arg(long, default_value = "b")]
    label_b: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct PlotArgs {
    /// A metrics CSV plotted as its own series (repeatable).
    #[arg(long)]
    csv: Vec<PathBuf>,
    /// `label=path1,path2,...`: one series with a band over the runs (repeatable).
    #[arg(long)]
    series: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "episode reward")]
    title: String,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let m = e.to_string();
        match e {
            TrainError::NonFinite(_) | TrainError::Nn(NnError::NonFinite { .. }) => CliError::Numeric(m),
            TrainError::Io(_) | TrainError::Csv(_) | TrainError::MissingCheckpoint(_) | TrainError::Nn(_) => {
                CliError::Io(m)
            }
            _ => CliError::Usage(m),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<PlotError> for CliError {
    fn from(e: PlotError) -> Self {
        match e {
            PlotError::Io(_) | PlotError::Read { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("CROSSVIEW_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value).map_err(|e| CliError::Io(e.to_string()))
}

fn gen_city(a: GenCityArgs) -> Result<(), CliError> {
    let mut cfg = if a.unjittered {
        CityGenConfig::unjittered()
    } else {
        CityGenConfig::default()
    };
    if let Some(n) = a.train_regions {
        cfg.train_regions = n;
    }
    if let Some(n) = a.region_cells {
        cfg.region_cells = n;
    }
    if let Some(p) = a.pitch {
        cfg.pitch = p;
    }
    let graph = generate_city(a.seed, &cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let out = a.out.unwrap_or_else(|| data_dir().join(format!("city_{}.json", a.seed)));
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&out, graph.to_json())?;
    println!(
        "city seed {} with {} nodes and {} edges written to {}",
        a.seed,
        graph.nodes.len(),
        graph.edges.len(),
        out.display()
    );
    Ok(())
}

fn budget_with(hidden: Option<usize>, actors: Option<usize>, deterministic: bool) -> Budget {
    let mut b = Budget::default();
    if let Some(h) = hidden {
        b.net.encoder_hidden = h;
        b.net.embed = h;
        b.net.locale_hidden = h;
        b.net.policy_hidden = h;
    }
    if let Some(n) = actors {
        b.actors = n;
    }
    b.deterministic = deterministic;
    b
}

fn stage(name: StageName, a: StageArgs) -> Result<(), CliError> {
    let graph = a.city.load()?;
    let mut budget = budget_with(a.hidden, a.actors, a.deterministic);
    if let Some(s) = a.steps {
        match name {
            StageName::Training => budget.train_steps = s,
            StageName::Adaptation => budget.adapt_steps = s,
            StageName::Transfer => budget.transfer_steps = s,
        }
    }
    let m = manifest(a.preset, a.seed, &budget, PathBuf::new());
    let template = m.stages.iter().find(|s| s.name == name).cloned().ok_or_else(|| {
        CliError::Usage(format!("preset {} has no {} stage", a.preset, name.as_str()))
    })?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            StageConfig::from_toml(&text)?
        }
        None => template,
    };
    cfg.name = name;
    if name != StageName::Training {
        cfg.regions = vec![a.region.clone()];
        cfg.trainable = crossview::trainer::TrainableSet::Only(vec![crossview::agent::locale_partition(&a.region)]);
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(n) = a.actors {
        cfg.actors = n;
    }
    if a.deterministic {
        cfg.deterministic = true;
    }
    if a.warm_start_locale.is_some() {
        cfg.warm_start_locale = a.warm_start_locale.clone();
    }
    cfg.validate()?;

    let world = World::new(graph, EnvConfig::default());
    let params = match &a.checkpoint {
        Some(p) => load_params(p)?,
        None if name == StageName::Training => {
            let ac = budget.net.agent_config(&world, a.seed);
            AgentParams::init(ac, &world.graph.region_names(RegionRole::Train))
        }
        None => return Err(CliError::Usage(format!("{} needs --checkpoint", name.as_str()))),
    };
    let out = a
        .out
        .unwrap_or_else(|| data_dir().join(format!("{}_{}_seed{}", a.preset, name.as_str(), a.seed)));
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("stage.toml"), cfg.to_toml())?;
    let (params, report) = run_stage(world, params, &cfg)?;
    let ckpt = out.join(format!("{}.ckpt", name.as_str()));
    save_params(&params, &ckpt)?;
    let csv = out.join(format!("{}.csv", name.as_str()));
    write_metrics_csv(BufWriter::new(File::create(&csv)?), &report.metrics)?;
    println!(
        "{}: {} updates, {} env steps; checkpoint {}; metrics {}",
        name.as_str(),
        report.updates,
        report.env_steps,
        ckpt.display(),
        csv.display()
    );
    if report.created_locale {
        println!("created a fresh locale for {}", cfg.regions[0]);
    }
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<(), CliError> {
    let mut m = match &a.manifest {
        Some(p) => RunManifest::load(p)?,
        None => {
            if !(a.scale > 0.0) {
                return Err(CliError::Usage("--scale must be positive".into()));
            }
            let mut budget = budget_with(a.hidden, a.actors, a.deterministic).scaled(a.scale);
            if let Some(n) = a.eval_episodes {
                budget.eval.episodes = n;
            }
            if let Some(s) = &a.eval_seeds {
                budget.eval.seeds = s.clone();
            }
            let out = a
                .out
                .clone()
                .unwrap_or_else(|| data_dir().join(format!("{}_seed{}", a.preset, a.seed)));
            manifest(a.preset, a.seed, &budget, out)
        }
    };
    if let Some(init) = &a.init {
        m.initial_checkpoint = Some(init.clone());
    }
    if let Some(p) = &a.emit_manifest {
        m.save(p)?;
        println!("wrote {}", p.display());
        return Ok(());
    }
    let out = run_pipeline(m)?;
    for (rec, eval) in out.manifest.records.iter().zip(&out.evals) {
        print!("{:<10} steps {:>9} ckpt {}", rec.stage.as_str(), rec.env_steps, rec.checkpoint.display());
        if let Some(e) = eval {
            print!("  zero-shot reward {:.3} success {:.3}", e.reward_mean, e.success_rate);
        }
        println!();
    }
    println!("manifest {}", out.manifest.out_dir.join("manifest.json").display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let graph = a.city.load()?;
    let world = World::new(graph, EnvConfig::default());
    let params = load_params(&a.checkpoint)?;
    let cfg = EvalConfig {
        episodes: a.episodes,
        seeds: a.seeds.clone(),
        greedy: a.greedy,
        max_goal_distance: a.max_goal_distance,
        record_steps: a.dump_trajectories.is_some(),
        ..Default::default()
    };
    let report = evaluate(&params, Arc::clone(&world), &a.region, a.view.into(), &cfg)?;
    if report.fresh_locale {
        println!("region {} has no trained locale; evaluated with a fresh one", a.region);
    }
    println!(
        "{}{} over {} episodes: reward {:.4} ± {:.4}, success rate {:.4} ± {:.4}",
        a.region,
        if a.zero_shot { " (zero-shot)" } else { "" },
        report.episodes,
        report.reward_mean,
        report.reward_stderr,
        report.success_rate,
        report.success_stderr
    );
    if let Some(p) = &a.dump_trajectories {
        let mut w = BufWriter::new(File::create(p)?);
        write_trajectory_jsonl(&mut w, &report.steps)?;
        w.flush()?;
    }
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(())
}

fn read_report(p: &Path) -> Result<EvalReport, CliError> {
    let f = File::open(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    serde_json::from_reader(f).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}

fn compare_cmd(a: CompareArgs) -> Result<(), CliError> {
    let (ra, rb) = (read_report(&a.a)?, read_report(&a.b)?);
    let c = compare(&ra, &rb, &a.label_a, &a.label_b)?;
    println!("{c}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let cfg = SuiteConfig {
        instances: a.instances,
        seed: a.seed,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let entries = run_suite(&cfg).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut failed = 0;
    for e in &entries {
        println!(
            "{:<28} {:>3} instances  max rel error {:.3e}  {}",
            e.name,
            e.instances,
            e.max_rel_error,
            if e.passed() { "ok" } else { "FAIL" }
        );
        failed += (!e.passed()) as usize;
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<(), CliError> {
    let mut series = Vec::new();
    for p in &a.csv {
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        series.push(Series::from_csvs(&label, std::slice::from_ref(p))?);
    }
    for s in &a.series {
        let (label, paths) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--series expects label=path,...; got `{s}`")))?;
        let paths: Vec<PathBuf> = paths.split(',').map(PathBuf::from).collect();
        series.push(Series::from_csvs(label, &paths)?);
    }
    write_svg(&series, &a.title, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenCity(a) => gen_city(a),
        Command::Train(a) => stage(StageName::Training, a),
        Command::Adapt(a) => stage(StageName::Adaptation, a),
        Command::Transfer(a) => stage(StageName::Transfer, a),
        Command::Pipeline(a) => pipeline(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
