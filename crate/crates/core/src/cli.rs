//! Command-line front end: run configuration, subcommands and artifacts.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::datagen::{
    audit_scene, extract_windows, read_dataset, read_scenes, simulate_scene, write_dataset, write_scenes, CollisionAudit, DatagenError,
    DatasetHeader, ScenarioConfig, WindowConfig, DATASET_FORMAT,
};
use crate::denoiser::{DenoiserConfig, NormStats};
use crate::diffusion::{moving_average, train, DiffusionError, Model, SamplerConfig, TrainConfig};
use crate::metrics::MetricsError;
use crate::par::parallel_map;
use crate::rollout::{
    evaluate, open_loop_plan, run_ablation_sweep, run_rollouts, GuidanceTemplate, MetricsConfig, RolloutConfig, RolloutError,
    RolloutMode, SceneDump, SweepAxis,
};
use crate::tensor::TensorError;
use crate::world::Scene;

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint does not match the config; differing fields: {}", .0.join(", "))]
    Mismatch(Vec<String>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Mismatch(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Numerical(_) => 4,
            CliError::Data(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Config(m) => CliError::Config(format!("data.scenario: {m}")),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::Config(m) => CliError::Config(m),
            DiffusionError::Guidance(g) => CliError::Config(format!("guidance: {g}")),
            DiffusionError::Json(j) => CliError::Data(j.to_string()),
            DiffusionError::Tensor(TensorError::Checkpoint(m)) => CliError::Data(format!("checkpoint: {m}")),
            DiffusionError::Tensor(TensorError::Io(e)) => CliError::Data(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::Config(m) => CliError::Config(format!("rollout: {m}")),
            RolloutError::Diffusion(d) => d.into(),
            RolloutError::Metrics(MetricsError::Edges) => CliError::Config(format!("metrics.bins: {}", MetricsError::Edges)),
            RolloutError::Metrics(m) => CliError::Config(format!("metrics: {m}")),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

fn default_scenes() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training scenes.
    pub scenes: usize,
    /// Held-out scenes for sampling and evaluation.
    pub eval_scenes: usize,
    /// Window stride (steps).
    pub stride: usize,
    /// Raster resolution (px/m).
    pub resolution: f64,
    pub scenario: ScenarioConfig,
    /// Scenario of the held-out scenes; defaults to `scenario`.
    pub eval_scenario: Option<ScenarioConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: default_scenes(),
            eval_scenes: default_scenes(),
            stride: 10,
            resolution: 4.0,
            scenario: ScenarioConfig::default(),
            eval_scenario: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Denoising steps `K`.
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub mode: RolloutMode,
    pub duration: f64,
    pub replan: f64,
    pub start_step: Option<usize>,
    pub seed: u64,
    pub sweep: SweepAxis,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let r = RolloutConfig::default();
        Self {
            mode: r.mode,
            duration: r.duration,
            replan: r.replan,
            start_step: r.start_step,
            seed: r.seed,
            sweep: SweepAxis::default(),
        }
    }
}

/// Full run description. Every field has a default and unknown keys are
/// rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub training: TrainConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceTemplate,
    pub rollout: RolloutSection,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    /// Parses TOML; errors name the offending field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner().message().trim()))
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_toml(&read_text(p)?),
        }
    }

    /// Sets every seed in the config.
    pub fn reseed(&mut self, seed: u64) {
        self.data.scenario.seed = seed;
        if let Some(s) = &mut self.data.eval_scenario {
            s.seed = seed;
        }
        self.training.seed = seed;
        self.sampler.seed = seed;
        self.rollout.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scenario.validate()?;
        if let Some(s) = &self.data.eval_scenario {
            s.validate().map_err(|e| CliError::Config(format!("data.eval_scenario: {e}")))?;
        }
        if !(self.data.resolution > 0.0) || self.data.stride == 0 {
            return Err(CliError::Config("data: resolution and stride must be positive".into()));
        }
        self.model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        if self.schedule.steps < 2 {
            return Err(CliError::Config("schedule.steps: at least 2 steps required".into()));
        }
        self.training.validate().map_err(|e| CliError::Config(format!("training: {e}")))?;
        if self.sampler.samples == 0 {
            return Err(CliError::Config("sampler.samples: at least one sample required".into()));
        }
        self.metrics.bins.validate().map_err(|e| CliError::Config(format!("metrics.bins: {e}")))?;
        let horizon = self.model.t_f;
        if self.rollout.mode == RolloutMode::ClosedLoop {
            let steps = (self.rollout.replan / self.data.scenario.dt).round() as usize;
            if steps == 0 || steps > horizon {
                return Err(CliError::Config(format!("rollout.replan: must cover 1..={horizon} steps")));
            }
        }
        Ok(())
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            t_p: self.model.t_p,
            t_f: self.model.t_f,
            stride: self.data.stride,
            max_neighbors: self.model.max_neighbors,
            resolution: self.data.resolution,
            crop: self.model.crop,
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            mode: self.rollout.mode,
            duration: self.rollout.duration,
            replan: self.rollout.replan,
            start_step: self.rollout.start_step,
            resolution: self.data.resolution,
            sampler: self.sampler,
            guidance: self.guidance.clone(),
            metrics: self.metrics.clone(),
            seed: self.rollout.seed,
        }
    }

    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Fields of the checkpoint that disagree with this config.
    pub fn checkpoint_mismatch(&self, model: &Model) -> Vec<String> {
        let meta = model.meta();
        let mut out = Vec::new();
        diff_values("model", &serde_json::to_value(&meta.denoiser).unwrap_or_default(), &serde_json::to_value(&self.model).unwrap_or_default(), &mut out);
        if meta.diffusion_steps != self.schedule.steps {
            out.push("schedule.steps".into());
        }
        if meta.dt != self.data.scenario.dt {
            out.push("data.scenario.dt".into());
        }
        out
    }
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                diff_values(&format!("{path}.{k}"), x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

#[derive(Parser, Debug, Clone)]
#[command(name = "crowdiff", version, about = "Guided trajectory diffusion for crowds")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; also the default location of inputs.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Scene-level worker threads (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    W,
    CleanVsNoisy,
    FilterVsGuide,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Simulate scenes and cut training windows.
    GenData,
    /// Train the denoiser on a dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Overrides `training.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample plans for one scene.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Scene index within the scene file.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, allow_hyphen_values = true)]
        w: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        no_guidance: bool,
    },
    /// Open- or closed-loop rollouts over the scene file.
    Rollout {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        closed_loop: bool,
        /// Use only the first N scenes.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Recompute metrics from dumped trajectories.
    Eval {
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Paired ablation sweep along one axis.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    workers: usize,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(name))
    }

    fn artifact(&self, body: Value) -> Value {
        json!({ "version": VERSION, "config": self.cfg.echo(), "result": body })
    }

    fn load_model(&self, path: &Path) -> Result<Model> {
        let f = File::open(path).map_err(|e| io_err(path, e))?;
        let (model, _) = Model::load(BufReader::new(f))?;
        let diff = self.cfg.checkpoint_mismatch(&model);
        if !diff.is_empty() {
            return Err(CliError::Mismatch(diff));
        }
        Ok(model)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Data(e.to_string()))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

fn read_json(path: &Path) -> Result<Value> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_scenes(path: &Path, limit: Option<usize>) -> Result<Vec<Scene>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut scenes = read_scenes(BufReader::new(f))?;
    if let Some(n) = limit {
        scenes.truncate(n);
    }
    Ok(scenes)
}

/// Parses arguments and runs the chosen command.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.reseed(s);
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1);
    let ctx = Ctx { cfg, out: cli.out, workers };
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Train { dataset, steps } => cmd_train(&ctx, dataset, *steps),
        Command::Sample {
            checkpoint,
            scenes,
            scene,
            w,
            samples,
            no_guidance,
        } => cmd_sample(&ctx, checkpoint, scenes, *scene, *w, *samples, *no_guidance),
        Command::Rollout {
            checkpoint,
            scenes,
            closed_loop,
            limit,
        } => cmd_rollout(&ctx, checkpoint, scenes, *closed_loop, *limit),
        Command::Eval { trajectories } => cmd_eval(&ctx, trajectories),
        Command::Sweep {
            checkpoint,
            scenes,
            axis,
            limit,
        } => cmd_sweep(&ctx, checkpoint, scenes, *axis, *limit),
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.data;
    let wc = ctx.cfg.window_config();
    let train_idx: Vec<usize> = (0..d.scenes).collect();
    let train: Vec<Scene> = parallel_map(&train_idx, ctx.workers, |_, &i| simulate_scene(&d.scenario, i))
        .into_iter()
        .collect::<std::result::Result<_, _>>()?;
    // Held-out scenes continue the index sequence so they never repeat a
    // training scene.
    let eval_scenario = d.eval_scenario.as_ref().unwrap_or(&d.scenario);
    let eval_idx: Vec<usize> = (d.scenes..d.scenes + d.eval_scenes).collect();
    let eval: Vec<Scene> = parallel_map(&eval_idx, ctx.workers, |_, &i| simulate_scene(eval_scenario, i))
        .into_iter()
        .collect::<std::result::Result<_, _>>()?;

    let mut windows = Vec::new();
    for (i, s) in train.iter().enumerate() {
        windows.extend(extract_windows(i, s, &wc)?);
    }
    let audit = |scenes: &[Scene]| {
        parallel_map(scenes, ctx.workers, |_, s| audit_scene(s, d.resolution))
            .into_iter()
            .fold(CollisionAudit::default(), CollisionAudit::merge)
    };
    let (train_audit, eval_audit) = (audit(&train), audit(&eval));

    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        dt: d.scenario.dt,
        windows_config: wc,
        scenario: d.scenario.clone(),
        scenes: train.len(),
        windows: windows.len(),
    };
    let mut dataset = Vec::new();
    write_dataset(&mut dataset, &header, &windows)?;
    let mut scene_bytes = Vec::new();
    write_scenes(&mut scene_bytes, &eval)?;
    let mut train_bytes = Vec::new();
    write_scenes(&mut train_bytes, &train)?;
    write_bytes(&ctx.out.join("dataset.jsonl"), &dataset)?;
    write_bytes(&ctx.out.join("scenes.jsonl"), &scene_bytes)?;
    write_bytes(&ctx.out.join("train_scenes.jsonl"), &train_bytes)?;
    let manifest = ctx.artifact(json!({
        "counts": { "train_scenes": train.len(), "eval_scenes": eval.len(), "windows": windows.len() },
        "seed": d.scenario.seed,
        "sha256": {
            "dataset.jsonl": sha256_hex(&dataset),
            "scenes.jsonl": sha256_hex(&scene_bytes),
            "train_scenes.jsonl": sha256_hex(&train_bytes),
        },
        "collision_audit": { "train": train_audit, "eval": eval_audit },
    }));
    write_json(&ctx.out.join("manifest.json"), &manifest)?;
    eprintln!(
        "{} windows from {} scenes; collisions: {} agent, {} obstacle",
        windows.len(),
        train.len(),
        train_audit.agent_collisions + eval_audit.agent_collisions,
        train_audit.obstacle_collisions + eval_audit.obstacle_collisions
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, dataset: &Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    let path = ctx.path(dataset, "dataset.jsonl");
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let (header, windows) = read_dataset(bytes.as_slice())?;
    let cfg = &ctx.cfg;
    let wc = cfg.window_config();
    if header.windows_config.t_p != wc.t_p || header.windows_config.t_f != wc.t_f || header.windows_config.crop != wc.crop {
        return Err(CliError::Config("dataset windows do not match the model section (t_p, t_f or crop)".into()));
    }
    let tc = TrainConfig {
        steps: steps.unwrap_or(cfg.training.steps),
        ..cfg.training
    };
    let mut model = Model::new(cfg.model.clone(), NormStats::from_windows(&windows), cfg.schedule.steps, header.dt, tc.seed)?;
    let start = std::time::Instant::now();
    let records = train(&mut model, &windows, &tc, |r| {
        if r.step % 100 == 0 || r.step == 1 {
            eprintln!("step {:6} loss {:.5} ({:.0?})", r.step, r.loss, start.elapsed());
        }
    })?;
    let skipped = records.iter().filter(|r| r.skipped).count();
    if skipped == records.len() && !records.is_empty() {
        return Err(CliError::Numerical("every training step produced a non-finite loss".into()));
    }
    let mut log = String::from("step,loss,skipped\n");
    for r in &records {
        log.push_str(&format!("{},{},{}\n", r.step, r.loss, r.skipped));
    }
    let n = records.len();
    let summary = json!({
        "steps": n,
        "windows": windows.len(),
        "dataset_sha256": sha256_hex(&bytes),
        "final_loss": records.last().map(|r| r.loss),
        "final_moving_average": moving_average(&records, n, 10.min(n)),
        "step10_moving_average": moving_average(&records, 10.min(n), 10.min(n)),
        "skipped_steps": skipped,
        "parameters": model.net.param_count(),
    });
    let mut ckpt = Vec::new();
    model.save(&mut ckpt, json!({ "version": VERSION, "config": cfg.echo(), "training": summary }))?;
    write_bytes(&ctx.out.join("model.ckpt"), &ckpt)?;
    write_bytes(&ctx.out.join("train_log.csv"), log.as_bytes())?;
    let mut summary = summary;
    summary["checkpoint_sha256"] = json!(sha256_hex(&ckpt));
    write_json(&ctx.out.join("train_summary.json"), &ctx.artifact(summary))?;
    Ok(())
}

fn cmd_sample(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    scenes: &Option<PathBuf>,
    index: usize,
    w: Option<f64>,
    samples: Option<usize>,
    no_guidance: bool,
) -> Result<()> {
    let model = ctx.load_model(&ctx.path(checkpoint, "model.ckpt"))?;
    let scenes = load_scenes(&ctx.path(scenes, "scenes.jsonl"), None)?;
    let scene = scenes
        .get(index)
        .ok_or_else(|| CliError::Config(format!("scene {index} out of range ({} scenes)", scenes.len())))?;
    let mut rc = ctx.cfg.rollout_config();
    rc.mode = RolloutMode::OpenLoop;
    rc.sampler.w = w.unwrap_or(rc.sampler.w);
    rc.sampler.samples = samples.unwrap_or(rc.sampler.samples);
    if no_guidance {
        rc.guidance = GuidanceTemplate::none();
    }
    rc.validate(&model)?;
    let (dump, out) = open_loop_plan(&model, index, scene, &rc)?;
    let body = json!({
        "scene": index,
        "start_step": dump.start_step,
        "w": rc.sampler.w,
        "guided": !rc.guidance.is_empty(),
        "seeds": dump.seeds,
        "objectives": dump.objectives,
        "samples": out,
    });
    let mut artifact = ctx.artifact(body);
    artifact["config"]["sampler"] = serde_json::to_value(rc.sampler).unwrap_or_default();
    artifact["config"]["guidance"] = serde_json::to_value(&rc.guidance).unwrap_or_default();
    write_json(&ctx.out.join("samples.json"), &artifact)
}

fn report_artifacts(ctx: &Ctx, stem: &str, label: &str, report: &crate::rollout::RolloutReport) -> Result<()> {
    write_json(&ctx.out.join(format!("{stem}.json")), &ctx.artifact(serde_json::to_value(report).unwrap_or_default()))?;
    write_bytes(&ctx.out.join(format!("{stem}.csv")), report.metrics.to_csv(label).as_bytes())
}

fn cmd_rollout(ctx: &Ctx, checkpoint: &Option<PathBuf>, scenes: &Option<PathBuf>, closed: bool, limit: Option<usize>) -> Result<()> {
    let model = ctx.load_model(&ctx.path(checkpoint, "model.ckpt"))?;
    let scenes = load_scenes(&ctx.path(scenes, "scenes.jsonl"), limit)?;
    let mut rc = ctx.cfg.rollout_config();
    if closed {
        rc.mode = RolloutMode::ClosedLoop;
    }
    let (report, dumps) = run_rollouts(&model, &scenes, &rc, ctx.workers)?;
    let label = match rc.mode {
        RolloutMode::OpenLoop => "open_loop",
        RolloutMode::ClosedLoop => "closed_loop",
    };
    report_artifacts(ctx, "report", label, &report)?;
    let mut artifact = ctx.artifact(json!({ "mode": rc.mode, "dumps": dumps }));
    artifact["config"]["rollout"]["mode"] = json!(rc.mode);
    write_json(&ctx.out.join("trajectories.json"), &artifact)
}

fn cmd_eval(ctx: &Ctx, trajectories: &Option<PathBuf>) -> Result<()> {
    let path = ctx.path(trajectories, "trajectories.json");
    let v = read_json(&path)?;
    let dumps: Vec<SceneDump> =
        serde_json::from_value(v["result"]["dumps"].clone()).map_err(|e| CliError::Data(format!("{}: dumps: {e}", path.display())))?;
    // The metric selection travels with the trajectories so the numbers
    // match the run that produced them.
    let metrics: MetricsConfig = match v["config"].get("metrics") {
        Some(m) => serde_json::from_value(m.clone()).map_err(|e| CliError::Data(format!("{}: config.metrics: {e}", path.display())))?,
        None => ctx.cfg.metrics.clone(),
    };
    let report = evaluate(&dumps, &metrics)?;
    write_json(&ctx.out.join("eval.json"), &ctx.artifact(serde_json::to_value(&report).unwrap_or_default()))?;
    let mut per_scene = String::from("scene,obstacle_collision_rate,agent_collision_rate\n");
    for m in &report.per_scene {
        per_scene.push_str(&format!("{},{},{}\n", m.scene, m.obstacle_collision_rate, m.agent_collision_rate));
    }
    write_bytes(&ctx.out.join("eval.csv"), report.metrics.to_csv("eval").as_bytes())?;
    write_bytes(&ctx.out.join("eval_scenes.csv"), per_scene.as_bytes())
}

fn cmd_sweep(ctx: &Ctx, checkpoint: &Option<PathBuf>, scenes: &Option<PathBuf>, axis: Option<AxisArg>, limit: Option<usize>) -> Result<()> {
    let model = ctx.load_model(&ctx.path(checkpoint, "model.ckpt"))?;
    let scenes = load_scenes(&ctx.path(scenes, "scenes.jsonl"), limit)?;
    let axis = match axis {
        None => ctx.cfg.rollout.sweep.clone(),
        Some(AxisArg::W) => match &ctx.cfg.rollout.sweep {
            a @ SweepAxis::W { .. } => a.clone(),
            _ => SweepAxis::default(),
        },
        Some(AxisArg::CleanVsNoisy) => SweepAxis::CleanVsNoisy,
        Some(AxisArg::FilterVsGuide) => SweepAxis::FilterVsGuide,
    };
    let report = run_ablation_sweep(&model, &scenes, &ctx.cfg.rollout_config(), &axis, ctx.workers)?;
    if !report.seeds_paired {
        return Err(CliError::Numerical("sweep entries did not share sampler seeds".into()));
    }
    let mut artifact = ctx.artifact(serde_json::to_value(&report).unwrap_or_default());
    artifact["config"]["rollout"]["sweep"] = serde_json::to_value(&axis).unwrap_or_default();
    write_json(&ctx.out.join("sweep.json"), &artifact)?;
    write_bytes(&ctx.out.join("sweep.csv"), report.to_csv().as_bytes())
}

/// Entry point for the binary: runs and converts the outcome into an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            e.exit_code()
        }
    }
}
