//! `gms`: dataset generation, training, sampling, benchmarking, evaluation
//! and the HTTP service from one binary.

mod manifest;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use gms_core::bench::{run_bench, Algorithm, DiffusionSetup, SearchProblem, DEFAULT_TIMEOUT};
use gms_core::dataset;
use gms_core::daydream::{build_dataset, DaydreamDataset, EvolutionParams, Objectives, DEFAULT_HUMAN_TYPES};
use gms_core::diffusion::{sample, train, write_loss_csv, NoiseSchedule, SampleRequest, TrainConfig, TrainedModel};
use gms_core::domain::{Bounds, CapacityClass, Codec, SkillProfile};
use gms_core::inquiry::{ConditionClass, GrammarBackend, InquiryBackend, RemoteBackend, RemoteConfig};
use gms_core::metrics::{evaluate, EvalSettings};
use gms_core::nn::checkpoint::{self, CheckpointMeta};
use gms_core::nn::{Architecture, DenoiserModel};
use gms_service::decide::{self, Constraints};
use gms_service::{AppState, ServedModel, ServiceConfig};
use manifest::RunManifest;
use serde::Serialize;
use serde_json::json;

/// Like `println!` but quiet when stdout has been closed, as under `| head`.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

const AFTER_HELP: &str = "Desk-scale defaults: T = 100 diffusion steps and a 30 s search timeout. \
The original large-scale settings are T = 400 (train --T 400) and a 300 s timeout (bench --timeout 300).";

#[derive(Parser, Debug)]
#[command(name = "gms", version, about = "Generative manufacturing-system design by guided diffusion", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evolve configurations under random scenarios and archive every individual.
    Daydream(DaydreamArgs),
    /// Train the class-conditional denoiser on a daydream dataset.
    Train(TrainArgs),
    /// Draw configurations for one capacity class and print them ranked as JSON.
    Sample(SampleArgs),
    /// Time the metaheuristic baselines and the sampler against capacity targets.
    Bench(BenchArgs),
    /// Per-class accuracy, MSE, duplication rate and FID of generated samples.
    Eval(EvalArgs),
    /// Run the JSON API and optionally host the UI.
    Serve(ServeArgs),
}

fn parse_class(s: &str) -> Result<CapacityClass, String> {
    let v: u32 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    CapacityClass::new(v).map_err(|e| e.to_string())
}

/// A comma-separated class list, or `all` / `every`.
#[derive(Clone, Debug, Serialize)]
#[serde(transparent)]
struct ClassList(Vec<CapacityClass>);

fn parse_classes(s: &str) -> Result<ClassList, String> {
    match s.trim() {
        "all" => Ok(ClassList(CapacityClass::evaluation_set())),
        "every" => Ok(ClassList(CapacityClass::all().collect())),
        list => list
            .split(',')
            .map(parse_class)
            .collect::<Result<_, _>>()
            .map(ClassList),
    }
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse::<Algorithm>().map_err(|e| e.to_string())
}

fn parse_guidance(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(w) if w >= 0.0 && w.is_finite() => Ok(w),
        _ => Err(format!("{s:?} is not a non-negative number")),
    }
}

#[derive(Args, Debug, Serialize)]
struct DaydreamArgs {
    /// Dataset path; `.gz` compresses.
    #[arg(long)]
    out: PathBuf,
    /// Independent scenarios, one evolution run each.
    #[arg(long, default_value_t = 6)]
    runs: usize,
    #[arg(long, default_value_t = 25)]
    generations: usize,
    #[arg(long, default_value_t = 40)]
    pop: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fitness cost per deployed asset.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Trailing asset types staffed by people.
    #[arg(long, default_value_t = DEFAULT_HUMAN_TYPES)]
    human_types: usize,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Diffusion steps.
    #[arg(long = "T", default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    beta0: f64,
    #[arg(long = "betaT", default_value_t = 0.02)]
    beta_t: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Probability of dropping the class label.
    #[arg(long, default_value_t = 0.1)]
    pu: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Channel widths per U-Net level, outermost first.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    /// Cap every class at this multiple of the median class count; 0 keeps all records.
    #[arg(long, default_value_t = 3.0)]
    balance: f64,
    /// Loss CSV path; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Capacity class: a multiple of 30 in [0, 300].
    #[arg(long, value_parser = parse_class)]
    capacity: CapacityClass,
    #[arg(long, default_value_t = 5)]
    count: usize,
    /// Guidance strength; 0 samples unguided.
    #[arg(long, default_value_t = 2.0, value_parser = parse_guidance)]
    w: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record intermediate grids at these steps.
    #[arg(long, value_delimiter = ',')]
    snapshots: Option<Vec<usize>>,
    /// Draws per returned decision.
    #[arg(long, default_value_t = 1)]
    oversample: usize,
    /// Also write the JSON here, with a manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    /// Needed when `diffusion` is among the algorithms.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_parser = parse_classes, default_value = "0,60,120,180,240,300")]
    targets: ClassList,
    #[arg(long, value_parser = parse_algorithm, value_delimiter = ',', default_value = "pso,ga,de,sa,ica,diffusion")]
    algos: Vec<Algorithm>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Seconds per search.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT)]
    timeout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0, value_parser = parse_guidance)]
    w: f64,
    /// Table CSV path; the table is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Training data: reference for FID and duplication.
    #[arg(long)]
    data: PathBuf,
    /// `all` for the ten reported classes, `every` for all eleven, or a list.
    #[arg(long, value_parser = parse_classes, default_value = "all")]
    classes: ClassList,
    /// Samples per class.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 2.0, value_parser = parse_guidance)]
    w: f64,
    /// Sample with w = 0.
    #[arg(long)]
    unguided: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ServeArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Built UI to host at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Capacity for triples without one.
    #[arg(long)]
    default_capacity: Option<u32>,
    #[arg(long, default_value_t = 4)]
    oversample: usize,
    /// With a remote inquiry backend configured, report its failures instead of
    /// falling back to the grammar.
    #[arg(long)]
    no_fallback: bool,
}

/// Usage errors exit 2, everything else 1.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Daydream(a) => cmd_daydream(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", render_chain(&e));
            ExitCode::from(1)
        }
    }
}

/// Causes joined with ": ", skipping any a previous message already quotes.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn load_model(path: &Path) -> anyhow::Result<(TrainedModel, NoiseSchedule)> {
    let (denoiser, meta) = checkpoint::load::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    let model = TrainedModel { denoiser, meta };
    let schedule = model.schedule()?;
    Ok((model, schedule))
}

fn reference_of(meta: &CheckpointMeta) -> SkillProfile {
    SkillProfile::reference(meta.bounds.asset_types, meta.human_types)
}

fn cmd_daydream(a: DaydreamArgs) -> Result<(), Failure> {
    let params = EvolutionParams {
        generations: a.generations,
        population: a.pop,
        objectives: Objectives {
            asset_penalty: a.lambda,
        },
        ..Default::default()
    };
    if a.human_types > params.bounds.asset_types {
        return Err(usage("--human-types exceeds the number of asset types"));
    }
    params.validate().map_err(|e| usage(e.to_string()))?;
    if a.runs < 1 {
        return Err(usage("--runs must be at least 1"));
    }
    let mut manifest = RunManifest::start("daydream", &a, Some(a.seed));
    let t0 = Instant::now();
    let ds = build_dataset(a.runs, &params, a.seed, a.human_types).map_err(anyhow::Error::from)?;
    dataset::write(&ds, &a.out).map_err(anyhow::Error::from)?;
    let hist = ds.histogram();
    out!("{} records in {:.2?} -> {}", ds.len(), t0.elapsed(), a.out.display());
    out!("{}", hist.render());
    manifest.output(&a.out);
    manifest.summary = json!({ "records": ds.len(), "histogram": hist });
    manifest.finish(&a.out)?;
    Ok(())
}

fn training_records(ds: &DaydreamDataset, balance: f64, seed: u64) -> DaydreamDataset {
    let mut kept = ds.clone();
    if balance > 0.0 {
        kept.balance(balance, seed);
    }
    kept
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = TrainConfig {
        p_uncond: a.pu,
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let schedule = NoiseSchedule::new(a.beta0, a.beta_t, a.steps).map_err(|e| usage(e.to_string()))?;
    let codec = Codec::default();
    let arch = Architecture {
        grid_size: codec.grid_size,
        widths: a.widths.clone(),
        embed_dim: a.embed_dim,
        num_classes: CapacityClass::COUNT,
    };
    arch.validate().map_err(|e| usage(e.to_string()))?;
    if !(a.balance >= 0.0) {
        return Err(usage("--balance must be non-negative"));
    }
    let mut manifest = RunManifest::start("train", &a, Some(a.seed));
    let ds = dataset::read(&a.data).map_err(anyhow::Error::from)?;
    let bounds = ds.bounds();
    if bounds.max_count != codec.max_count || bounds.asset_types > codec.grid_size || bounds.stations > codec.grid_size
    {
        return Err(Failure::Runtime(anyhow!(
            "dataset bounds {bounds:?} do not fit the {}x{} codec with C_max {}",
            codec.grid_size,
            codec.grid_size,
            codec.max_count
        )));
    }
    let kept = training_records(&ds, a.balance, a.seed);
    eprintln!("training on {} of {} records", kept.len(), ds.len());
    let mut model = DenoiserModel::<f32>::new(arch.clone(), a.seed).map_err(anyhow::Error::from)?;
    let t0 = Instant::now();
    let report = train(&mut model, &kept.records, &schedule, &codec, &cfg, |e, loss| {
        eprintln!("epoch {:>3}  loss {loss:.5}  {:.1?}", e + 1, t0.elapsed());
    })
    .map_err(anyhow::Error::from)?;
    let meta = CheckpointMeta {
        architecture: arch,
        steps: a.steps,
        beta0: a.beta0,
        beta_t: a.beta_t,
        classes: CapacityClass::all().map(|c| c.value()).collect(),
        codec,
        bounds,
        human_types: ds.header.human_types,
        notes: json!({
            "data": a.data,
            "records": kept.len(),
            "train": cfg,
        }),
    };
    checkpoint::save(&a.out, &model, &meta).map_err(anyhow::Error::from)?;
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".loss.csv");
        a.out.with_file_name(name)
    });
    write_loss_csv(&loss_csv, &report.epoch_losses).map_err(anyhow::Error::from)?;
    out!(
        "trained {} epochs in {:.1?} -> {}",
        a.epochs,
        t0.elapsed(),
        a.out.display()
    );
    manifest.output(&a.out);
    manifest.output(&loss_csv);
    manifest.summary = json!({
        "records": kept.len(),
        "dataset_records": ds.len(),
        "epoch_losses": report.epoch_losses,
        "optimizer_steps": report.steps,
        "seconds": t0.elapsed().as_secs_f64(),
    });
    manifest.finish(&a.out)?;
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<(), Failure> {
    if a.count < 1 {
        return Err(usage("--count must be at least 1"));
    }
    if a.oversample < 1 {
        return Err(usage("--oversample must be at least 1"));
    }
    let mut manifest = RunManifest::start("sample", &a, Some(a.seed));
    let (model, schedule) = load_model(&a.ckpt)?;
    let steps = a.snapshots.clone().unwrap_or_default();
    if let Some(&t) = steps.iter().find(|&&t| t > schedule.steps()) {
        return Err(usage(format!("snapshot step {t} beyond T = {}", schedule.steps())));
    }
    let meta = &model.meta;
    let req = SampleRequest {
        class: a.capacity,
        w: a.w,
        count: a.count * a.oversample,
        seed: a.seed,
        snapshot_steps: steps,
    };
    let t0 = Instant::now();
    let out = sample(&model, &schedule, &req, &meta.codec, &meta.bounds).map_err(anyhow::Error::from)?;
    let elapsed = t0.elapsed().as_secs_f64();
    let triple = ConditionClass {
        capacity: Some(a.capacity.value()),
        skill: None,
        max_machines: None,
    };
    let constraints = Constraints::new(
        &triple,
        a.capacity,
        reference_of(meta),
        meta.human_types,
        Objectives::default(),
    );
    let decisions = decide::select(&constraints, out.configs, a.count);
    let hits = decisions.iter().filter(|d| d.satisfies.capacity).count();
    let mut doc = json!({
        "class": a.capacity,
        "w": a.w,
        "seed": a.seed,
        "sampled": req.count,
        "seconds": elapsed,
        "in_class": hits,
        "decisions": decisions,
    });
    if !out.snapshots.is_empty() {
        let per: Vec<_> = decisions.iter().map(|d| &out.snapshots[d.id as usize]).collect();
        doc["snapshots"] = serde_json::to_value(per).map_err(anyhow::Error::from)?;
    }
    let text = serde_json::to_string_pretty(&doc).map_err(anyhow::Error::from)?;
    out!("{text}");
    if let Some(path) = &a.out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
        manifest.output(path);
        manifest.summary = json!({ "in_class": hits, "seconds": elapsed });
        manifest.finish(path)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    if a.repeats < 1 {
        return Err(usage("--repeats must be at least 1"));
    }
    if !(a.timeout > 0.0) {
        return Err(usage("--timeout must be positive"));
    }
    let wants_diffusion = a.algos.contains(&Algorithm::Diffusion);
    if wants_diffusion && a.ckpt.is_none() {
        return Err(usage("the diffusion algorithm needs --ckpt"));
    }
    let mut manifest = RunManifest::start("bench", &a, Some(a.seed));
    let loaded = a.ckpt.as_deref().map(load_model).transpose()?;
    let (bounds, skills, codec) = match &loaded {
        Some((m, _)) => (m.meta.bounds, reference_of(&m.meta), m.meta.codec),
        None => (
            Bounds::default(),
            SkillProfile::reference(Bounds::default().asset_types, DEFAULT_HUMAN_TYPES),
            Codec::default(),
        ),
    };
    let setup = loaded.as_ref().map(|(m, s)| DiffusionSetup {
        model: m,
        schedule: s,
        codec,
        w: a.w,
    });
    let base = SearchProblem {
        target: a.targets.0[0],
        skills,
        bounds,
        timeout: a.timeout,
    };
    let table = run_bench(&a.targets.0, &a.algos, a.repeats, &base, setup.as_ref(), a.seed, |r| {
        eprintln!(
            "{:<10} target {:>3}  {}  {:.4}s  {} evaluations",
            r.algorithm.name(),
            r.target,
            if r.success { "ok     " } else { "timeout" },
            r.elapsed,
            r.evaluations
        );
    })
    .map_err(anyhow::Error::from)?;
    let csv = table.to_csv();
    out!("{}", csv.trim_end());
    if let Some(path) = &a.out {
        std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
        manifest.output(path);
        manifest.summary = serde_json::to_value(&table).map_err(anyhow::Error::from)?;
        manifest.finish(path)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    if a.n < 1 {
        return Err(usage("--n must be at least 1"));
    }
    let mut manifest = RunManifest::start("eval", &a, Some(a.seed));
    let (model, schedule) = load_model(&a.ckpt)?;
    let ds = dataset::read(&a.data).map_err(anyhow::Error::from)?;
    if ds.bounds() != model.meta.bounds {
        return Err(anyhow!(
            "dataset bounds {:?} differ from the model's {:?}",
            ds.bounds(),
            model.meta.bounds
        )
        .into());
    }
    let settings = EvalSettings {
        skills: reference_of(&model.meta),
        codec: model.meta.codec,
        seed: a.seed,
    };
    let w = if a.unguided { 0.0 } else { a.w };
    let t0 = Instant::now();
    let report = evaluate(&model, &schedule, &ds, &a.classes.0, a.n, w, &settings).map_err(anyhow::Error::from)?;
    let csv = report.to_csv();
    out!("{}", csv.trim_end());
    eprintln!("mean accuracy {:.1}% in {:.1?}", report.mean_accuracy(), t0.elapsed());
    if let Some(prefix) = &a.out {
        let csv_path = prefix.with_extension("csv");
        let json_path = prefix.with_extension("json");
        std::fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
        let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
        std::fs::write(&json_path, json).with_context(|| format!("writing {}", json_path.display()))?;
        manifest.output(&csv_path);
        manifest.output(&json_path);
        manifest.summary = json!({ "mean_accuracy": report.mean_accuracy() });
        manifest.finish(&csv_path)?;
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<(), Failure> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|_| usage(format!("{}:{} is not a socket address", a.host, a.port)))?;
    if a.oversample < 1 {
        return Err(usage("--oversample must be at least 1"));
    }
    if let Some(dir) = &a.ui_dir {
        if !dir.is_dir() {
            return Err(usage(format!("--ui-dir {} is not a directory", dir.display())));
        }
    }
    let backend: Arc<dyn InquiryBackend> = match RemoteConfig::from_env() {
        Some(cfg) => Arc::new(RemoteBackend::new(cfg, !a.no_fallback)),
        None => Arc::new(GrammarBackend),
    };
    let config = ServiceConfig {
        oversample: a.oversample,
        default_capacity: a.default_capacity,
        ..Default::default()
    };
    let state = AppState::new(config, backend);
    if let Some(path) = &a.ckpt {
        let (model, _) = load_model(path)?;
        let served = ServedModel::new(model, Some(path.clone())).map_err(anyhow::Error::msg)?;
        state.install(served);
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting the async runtime")?;
    eprintln!("listening on http://{addr}");
    runtime
        .block_on(gms_service::serve(addr, state, a.ui_dir))
        .with_context(|| format!("serving on {addr}"))?;
    Ok(())
}
