use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nwhead::calibration::TemperatureGrid;
use nwhead::checkpoint::Checkpoint;
use nwhead::data::{generate_blobs, generate_rings, load_csv, save_csv, split, write_support_csv, Split};
use nwhead::report::{calibrate, evaluate, influence_report, sweep_k, EmbeddedDataset};
use nwhead::trainer::{train, Head, SupportSampling, TrainConfig, TrainedModel};
use nwhead::{Error, InferenceMode};
use nwhead_inspector::{AppState, Workspace};
use serde::Serialize;

use crate::args::*;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Lib(e) if e.is_numerical() => 4,
            Failure::Lib(Error::InvalidArgument(_) | Error::InvalidTemperature(_) | Error::InvalidGrid(_)) => 2,
            Failure::Lib(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = Result<(), Failure>;

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    seed: Option<u64>,
    artifacts: Vec<String>,
    started_unix: f64,
    wall_clock_seconds: f64,
    version: &'a str,
}

/// Timing and artifact bookkeeping for one command run.
struct Run {
    command: &'static str,
    started: SystemTime,
    clock: Instant,
}

impl Run {
    fn start(command: &'static str) -> Self {
        Self {
            command,
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    /// Writes `<primary>.manifest.json`.
    fn finish<C: Serialize>(&self, config: &C, seed: Option<u64>, primary: &Path, artifacts: &[&Path]) -> Outcome {
        let manifest = Manifest {
            command: self.command,
            config,
            seed,
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
            started_unix: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            wall_clock_seconds: self.clock.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION"),
        };
        write_text(&manifest_path(primary), &to_json(&manifest)?)
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Lib(Error::Io(e.to_string())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Lib(Error::Io(format!("{}: {e}", path.display()))))
}

/// Writes a JSON report to `out` (plus its manifest) or to stdout.
fn emit<T: Serialize, C: Serialize>(run: &Run, report: &T, out: Option<&Path>, config: &C, seed: Option<u64>) -> Outcome {
    let text = to_json(report)?;
    match out {
        Some(path) => {
            write_text(path, &text)?;
            run.finish(config, seed, path, &[path])
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn mode_from(mode: ModeArg, k: Option<usize>, seed: Option<u64>) -> Result<InferenceMode, Failure> {
    if mode == ModeArg::Full {
        return Ok(InferenceMode::Full);
    }
    let k = k.ok_or_else(|| Failure::Usage(format!("--k is required for --mode {}", mode.as_str())))?;
    let seed = seed.ok_or_else(|| Failure::Usage(format!("--seed is required for --mode {}", mode.as_str())))?;
    Ok(InferenceMode::parse(mode.as_str(), k, seed)?)
}

fn split_from(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn load_model(checkpoint: &Path) -> Result<TrainedModel, Failure> {
    Ok(Checkpoint::load(checkpoint)?.to_model()?)
}

fn load_embedded(checkpoint: &Path, data: &Path) -> Result<(TrainedModel, EmbeddedDataset), Failure> {
    let model = load_model(checkpoint)?;
    let raw = load_csv(data)?;
    let embedded = EmbeddedDataset::new(&model, raw)?;
    Ok((model, embedded))
}

pub fn generate(args: &GenerateArgs) -> Outcome {
    let run = Run::start("generate");
    let ds = match args.kind {
        Generator::Blobs => generate_blobs(args.classes, args.per_class, args.dim, args.separation, args.noise, args.seed)?,
        Generator::Rings => generate_rings(args.per_class, args.inner, args.outer, args.noise, args.seed)?,
    };
    let fractions: [f64; 3] = args
        .split
        .as_slice()
        .try_into()
        .map_err(|_| Failure::Usage("--split takes three fractions".into()))?;
    let tagged = split(&ds, fractions, args.seed)?;
    save_csv(&tagged, &args.out)?;
    tracing::info!(examples = tagged.len(), path = %args.out.display(), "dataset written");
    run.finish(args, Some(args.seed), &args.out, &[&args.out])
}

pub fn train_config(args: &TrainArgs) -> TrainConfig {
    TrainConfig {
        head: match args.head {
            HeadArg::Nw => Head::Nw,
            HeadArg::Fc => Head::Fc,
        },
        hidden: args.hidden.clone(),
        embed_dim: args.embed_dim,
        batch_size: args.nb,
        support_size: args.ns,
        temperature: args.tau,
        lr: args.lr,
        momentum: args.momentum,
        weight_decay: args.wd,
        steps: args.steps,
        lr_decay_steps: args.decay_steps.clone(),
        seed: args.seed,
        label_smoothing: args.label_smoothing,
        support_sampling: match args.support_sampling {
            SamplingArg::PerQuery => SupportSampling::PerQuery,
            SamplingArg::PerBatch => SupportSampling::PerBatch,
        },
        log_every: args.log_every,
    }
}

pub fn train_cmd(args: &TrainArgs) -> Outcome {
    let run = Run::start("train");
    let config = train_config(args);
    let data = load_csv(&args.data)?;
    let train_set = data.require(Split::Train)?;
    let val = data.subset(Split::Val);
    let (model, log) = train(&train_set, &val, data.class_count, &config)?;
    Checkpoint::from_model(&model, data.class_count, &config).save(&args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".log.jsonl");
        args.out.with_file_name(name)
    });
    let mut lines = String::new();
    for record in &log {
        let line = serde_json::to_string(record).map_err(|e| Failure::Lib(Error::Io(e.to_string())))?;
        lines.push_str(&line);
        lines.push('\n');
    }
    write_text(&log_path, &lines)?;
    if let Some(last) = log.last() {
        tracing::info!(step = last.step, loss = last.train_loss, val_error = ?last.val_error, "training finished");
    }
    run.finish(&config, Some(args.seed), &args.out, &[&args.out, &log_path])
}

pub fn eval(args: &EvalArgs) -> Outcome {
    let run = Run::start("eval");
    let m = &args.model;
    let mode = mode_from(m.mode, m.k, m.seed)?;
    let (model, data) = load_embedded(&m.checkpoint, &m.data)?;
    let report = evaluate(&model, &data, split_from(args.split), &mode, m.tau, args.bins)?;
    emit(&run, &report, args.out.as_deref(), args, m.seed)
}

pub fn sweep(args: &SweepArgs) -> Outcome {
    let run = Run::start("sweep-k");
    if args.modes.contains(&ModeArg::Full) {
        return Err(Failure::Usage("full mode is always included as the reference row".into()));
    }
    if args.ks.is_empty() {
        return Err(Failure::Usage("--ks needs at least one value".into()));
    }
    let (model, data) = load_embedded(&args.checkpoint, &args.data)?;
    let modes: Vec<&str> = args.modes.iter().map(|m| m.as_str()).collect();
    let report = sweep_k(&model, &data, split_from(args.split), &modes, &args.ks, args.seed, args.tau, args.bins)?;
    emit(&run, &report, args.out.as_deref(), args, Some(args.seed))
}

pub fn influence(args: &InfluenceArgs) -> Outcome {
    let run = Run::start("influence");
    let m = &args.model;
    let mode = mode_from(m.mode, m.k, m.seed)?;
    let (_, data) = load_embedded(&m.checkpoint, &m.data)?;
    let (_, query) = data.find(&args.query_id)?;
    let support = data.support(&mode)?;
    let report = influence_report(query, &support, m.tau, args.top)?;
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    emit(&run, &report, args.out.as_deref(), args, m.seed)
}

pub fn calibrate_cmd(args: &CalibrateArgs) -> Outcome {
    let run = Run::start("calibrate");
    let mode = mode_from(args.mode, args.k, args.seed)?;
    let grid = TemperatureGrid {
        lo: args.grid_lo,
        hi: args.grid_hi,
        steps: args.grid_steps,
    };
    let (_, data) = load_embedded(&args.checkpoint, &args.data)?;
    let report = calibrate(&data, &mode, &grid, args.bins)?;
    emit(&run, &report, args.out.as_deref(), args, args.seed)
}

pub fn support(args: &SupportArgs) -> Outcome {
    let run = Run::start("support");
    let m = &args.model;
    let mode = mode_from(m.mode, m.k, m.seed)?;
    let (_, data) = load_embedded(&m.checkpoint, &m.data)?;
    let support = data.support(&mode)?;
    let file = fs::File::create(&args.out).map_err(|e| Failure::Lib(Error::Io(format!("{}: {e}", args.out.display()))))?;
    write_support_csv(&support, std::io::BufWriter::new(file))?;
    run.finish(args, m.seed, &args.out, &[&args.out])
}

pub fn serve(args: &ServeArgs) -> Outcome {
    if !(args.tau > 0.0 && args.tau.is_finite()) {
        return Err(Error::InvalidTemperature(args.tau).into());
    }
    let addr: std::net::SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| Failure::Usage(format!("bad --host/--port: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Lib(Error::Io(e.to_string())))?;
    runtime.block_on(async {
        let state = AppState::empty(args.tau);
        let loader = state.clone();
        let (checkpoint, data) = (args.checkpoint.clone(), args.data.clone());
        // The API answers 503 until embeddings are ready.
        tokio::task::spawn_blocking(move || match Workspace::load(&checkpoint, &data) {
            Ok(ws) => {
                loader.install(ws);
                tracing::info!("workspace loaded");
            }
            Err(e) => {
                eprintln!("error: {e}");
                std::process::exit(Failure::Lib(e).exit_code() as i32);
            }
        });
        eprintln!("serving on http://{addr}");
        nwhead_inspector::serve(addr, state, args.static_dir.clone())
            .await
            .map_err(|e| Failure::Lib(Error::Io(e.to_string())))
    })
}
