use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use worldloop::cache::CacheDump;
use worldloop::camera::Trajectory;
use worldloop::checkpoint::{load_model, save_model, TensorArchive};
use worldloop::engine::{validate_events, SessionTemplate, TimingStats, TurnEvent, TurnLogEntry};
use worldloop::metrics::{aggregate_present, aligned_rpe, read_records_csv, rpe};
use worldloop::model::{ExpertConfig, ModelConfig, WorldModel};
use worldloop::service::{bind_with_checkpoint, ServiceConfig};
use worldloop::train::{
    long_horizon_run, pretrain_flow_matching, tune, write_metrics_csv, LongHorizonConfig, LongHorizonReport,
    MetricsRow, PretrainConfig, ScorePair, TrainerConfig,
};

#[derive(Parser)]
#[command(name = "worldloop", version, about = "Interactive block-autoregressive world model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate blocks offline from a config and an event file.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-forced flow-matching pretraining.
    Pretrain(TrainArgs),
    /// Long-video distillation of a student from a teacher checkpoint.
    Distill(TrainArgs),
    /// Pretrain, tune, and compare long-horizon error over several seeds.
    TuneLong(TrainArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the live session service.
    Serve {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Relative pose error after Sim3 alignment.
    Rpe {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 1)]
        delta: usize,
        /// Skip the Sim3 alignment step.
        #[arg(long)]
        no_align: bool,
    },
    /// Per-category InterBench report from judged records.
    Interbench {
        #[arg(long)]
        records: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct RolloutConfig {
    #[serde(flatten)]
    template: SessionTemplate,
    seed: u64,
    num_blocks: usize,
    /// Model checkpoint; when absent a model is initialised from `model_seed`.
    checkpoint: Option<PathBuf>,
    model: ModelConfig,
    model_seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            template: SessionTemplate::default(),
            seed: 0,
            num_blocks: 8,
            checkpoint: None,
            model: ModelConfig::default(),
            model_seed: 0,
        }
    }
}

#[derive(Serialize)]
struct SessionRecord {
    seed: u64,
    events: Vec<TurnEvent>,
    turn_log: Vec<TurnLogEntry>,
    stats: TimingStats,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct PretrainJob {
    model: ModelConfig,
    model_seed: u64,
    pretrain: PretrainConfig,
    checkpoint_every: Option<usize>,
}

impl Default for PretrainJob {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            model_seed: 0,
            pretrain: PretrainConfig::default(),
            checkpoint_every: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DistillJob {
    teacher: PathBuf,
    #[serde(default)]
    tune: TrainerConfig,
    #[serde(default)]
    checkpoint_every: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct TuneLongJob {
    #[serde(flatten)]
    experiment: LongHorizonConfig,
    seeds: Vec<u64>,
}

impl Default for TuneLongJob {
    fn default() -> Self {
        Self {
            experiment: LongHorizonConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Serialize)]
struct TuneLongSummary {
    runs: Vec<LongHorizonReport>,
    improved: usize,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Relative paths inside a config file are taken relative to that file.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn rollout(config: &Path, events: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: RolloutConfig = read_json(config)?;
    let events: Vec<TurnEvent> = match events {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let model = match &cfg.checkpoint {
        Some(p) => load_model::<f64>(resolve(config, p)).context("loading checkpoint")?,
        None => WorldModel::init(cfg.model, ExpertConfig::default(), cfg.model_seed)?,
    };
    let model = Arc::new(model);
    validate_events(&events)?;
    if cfg.num_blocks == 0 {
        bail!("num_blocks must be at least 1");
    }
    let mut session = cfg.template.start(model, cfg.seed)?;
    let mut pending = events.iter().peekable();
    for b in 0..cfg.num_blocks {
        if let Some(ev) = pending.next_if(|e| e.at_block == b) {
            session.apply_event(ev)?;
        }
        session.rollout_block()?;
    }
    let cache: CacheDump = session.cache().dump();
    let blocks = session.blocks();

    fs::create_dir_all(out)?;
    let mut archive = TensorArchive::new(serde_json::json!({
        "seed": cfg.seed,
        "num_blocks": cfg.num_blocks,
        "frames_per_block": session.frames_per_block(),
    }));
    for block in blocks {
        for (f, frame) in block.frames.iter().enumerate() {
            archive.push_mat(format!("block.{}.frame.{f}", block.block_index), frame)?;
        }
    }
    archive.save(out.join("blocks.wlta"))?;
    session.trajectory().write_csv(fs::File::create(out.join("trajectory.csv"))?)?;
    write_json(
        &out.join("session.json"),
        &SessionRecord {
            seed: cfg.seed,
            events,
            turn_log: session.turn_log().to_vec(),
            stats: session.stats().clone(),
        },
    )?;
    write_json(&out.join("cache.json"), &cache)?;
    println!(
        "{} blocks, {} frames -> {}",
        blocks.len(),
        session.trajectory().len() - 1,
        out.display()
    );
    Ok(())
}

fn checkpoint_dir(out: &Path) -> Result<PathBuf> {
    let dir = out.join("checkpoints");
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn pretrain(args: &TrainArgs) -> Result<()> {
    let job: PretrainJob = read_json(&args.config)?;
    let data = job.pretrain.dataset.build(&job.model)?;
    let mut model = WorldModel::<f64>::init(job.model, ExpertConfig::default(), job.model_seed)?;
    let ckpts = checkpoint_dir(&args.out)?;
    let mut saved = Ok(());
    let records = pretrain_flow_matching(&mut model, &data, &job.pretrain, |r, m| {
        if let Some(every) = job.checkpoint_every.filter(|&e| e > 0) {
            if (r.step + 1) % every == 0 && saved.is_ok() {
                saved = save_model(m, ckpts.join(format!("step_{:06}.wlta", r.step + 1)));
            }
        }
    })?;
    saved?;
    let rows: Vec<MetricsRow> = records.iter().map(MetricsRow::from).collect();
    write_metrics_csv(&args.out.join("metrics.csv"), &rows)?;
    save_model(&model, args.out.join("model.wlta"))?;
    if let Some(last) = records.last() {
        println!("pretrain: {} steps, final loss {:.5}", records.len(), last.loss);
    }
    Ok(())
}

fn distill(args: &TrainArgs) -> Result<()> {
    let job: DistillJob = read_json(&args.config)?;
    let teacher = load_model::<f64>(resolve(&args.config, &job.teacher)).context("loading teacher")?;
    let data = job.tune.dataset.build(&teacher.config)?;
    let mut student = teacher.clone();
    let mut pair = ScorePair::from_teacher(&teacher);
    let ckpts = checkpoint_dir(&args.out)?;
    let mut saved = Ok(());
    let records = tune(&mut student, &mut pair, &data, &job.tune, |r, m| {
        if let Some(every) = job.checkpoint_every.filter(|&e| e > 0) {
            if (r.step + 1) % every == 0 && saved.is_ok() {
                saved = save_model(m, ckpts.join(format!("step_{:06}.wlta", r.step + 1)));
            }
        }
    })?;
    saved?;
    let rows: Vec<MetricsRow> = records.iter().map(MetricsRow::from).collect();
    write_metrics_csv(&args.out.join("metrics.csv"), &rows)?;
    save_model(&student, args.out.join("student.wlta"))?;
    save_model(pair.fake(), args.out.join("fake_score.wlta"))?;
    println!("distill: {} steps", records.len());
    Ok(())
}

fn tune_long(args: &TrainArgs) -> Result<()> {
    let job: TuneLongJob = read_json(&args.config)?;
    if job.seeds.is_empty() {
        bail!("tune-long needs at least one seed");
    }
    let mut runs = Vec::new();
    for &seed in &job.seeds {
        let run = long_horizon_run(&job.experiment, seed)?;
        let dir = args.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir)?;
        let pre: Vec<MetricsRow> = run.pretrain.iter().map(MetricsRow::from).collect();
        write_metrics_csv(&dir.join("pretrain_metrics.csv"), &pre)?;
        let rows: Vec<MetricsRow> = run.tuning.iter().map(MetricsRow::from).collect();
        write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
        save_model(&run.untuned, dir.join("untuned.wlta"))?;
        save_model(&run.tuned, dir.join("tuned.wlta"))?;
        let r = &run.report;
        println!(
            "seed {seed}: untuned {:.5}  tuned {:.5}  (frames > {})",
            r.untuned_error, r.tuned_error, r.horizon
        );
        runs.push(run.report);
    }
    let improved = runs.iter().filter(|r| r.tuned_error < r.untuned_error).count();
    println!("tuned better on {improved} of {} seeds", runs.len());
    write_json(&args.out.join("report.json"), &TuneLongSummary { runs, improved })
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Trajectory::read_csv(std::io::BufReader::new(f))?)
}

fn eval(cmd: &EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Rpe {
            est,
            gt,
            delta,
            no_align,
        } => {
            let (est, gt) = (read_trajectory(est)?, read_trajectory(gt)?);
            let value = if *no_align {
                serde_json::to_value(rpe(&est, &gt, *delta)?)?
            } else {
                let (sim, r) = aligned_rpe(&est, &gt, *delta)?;
                let q = sim.rotation().quaternion();
                let mut v = serde_json::to_value(r)?;
                v["alignment"] = serde_json::json!({
                    "scale": sim.scale(),
                    "rotation": [q.w, q.i, q.j, q.k],
                    "translation": [sim.translation().x, sim.translation().y, sim.translation().z],
                });
                v
            };
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
        EvalCommand::Interbench { records } => {
            let f = fs::File::open(records).with_context(|| format!("opening {}", records.display()))?;
            let report = aggregate_present(&read_records_csv(f)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn serve(addr: &str, ckpt: &Path, config: Option<&Path>) -> Result<()> {
    let cfg: ServiceConfig = match config {
        Some(p) => read_json(p)?,
        None => ServiceConfig::default(),
    };
    let server = bind_with_checkpoint(addr, ckpt, cfg)?;
    eprintln!("listening on {}", server.local_addr()?);
    server.serve()?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Rollout { config, events, out } => rollout(config, events.as_deref(), out),
        Command::Pretrain(a) => pretrain(a),
        Command::Distill(a) => distill(a),
        Command::TuneLong(a) => tune_long(a),
        Command::Eval(c) => eval(c),
        Command::Serve { addr, ckpt, config } => serve(addr, ckpt, config.as_deref()),
    }
}
