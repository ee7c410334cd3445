use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alref_core::audit::{read_jsonl, AuditEvent};
use alref_core::backends::factory::{BackendFactory, BackendsConfig};
use alref_core::batch::{run_dataset, RunSetup, SampleStatus};
use alref_core::config::{Preset, RunConfig, Task};
use alref_core::context::ChatCache;
use alref_core::eval::score::{score_predictions, write_csv};
use alref_core::eval::{Dataset, LoadOptions};
use alref_core::prompts::PromptSet;
use alref_core::synth::{write_avs_alternating, write_rvos_fixture, RvosFixture};
use alref_core::types::VideoClip;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "alref", version, about = "Referring video segmentation with chat-model reasoning")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment every sample of a dataset.
    Run(RunArgs),
    /// Score a prediction folder against a dataset's annotations.
    Score(ScoreArgs),
    /// Rebuild every prompt image from an audit log and check its hash.
    Replay(ReplayArgs),
    /// Write a small synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    dataset: PathBuf,
    /// Keep only this split (audio-visual metadata).
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
    /// Run config TOML: preset, templates, cache, [pipeline] and [backends].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backends TOML file, or one endpoint serving every kind.
    #[arg(long)]
    backends: Option<String>,
    /// Overrides the config's preset.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// `frame=gpt|first|middle|last|random` or `box=gpt|topscore|...`; repeatable.
    #[arg(long)]
    ablation: Vec<String>,
    /// Save every prompt image under `out/prompts/`.
    #[arg(long)]
    dump_prompts: bool,
    /// Resolve config, backends and dataset, then stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Run output or prediction folder.
    #[arg(long)]
    pred: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Method name for the CSV row.
    #[arg(long, default_value = "alref")]
    method: String,
    /// Average within annotator groups first.
    #[arg(long)]
    per_annotator: bool,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Run output folder holding `audit.jsonl`.
    #[arg(long)]
    run: PathBuf,
    /// Also save the rebuilt images here.
    #[arg(long)]
    write: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    kind: SynthKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Five bouncing-shape videos with oracle backends.
    Rvos,
    /// One video with a dog and a guitar sounding in turn.
    Avs,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] alref_core::Error),
    #[error("{0} of {1} samples failed")]
    SamplesFailed(usize, usize),
    #[error("{0} of {1} prompt images did not reproduce")]
    ReplayMismatch(usize, usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(alref_core::Error::Config(_) | alref_core::Error::Template(_)) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Score(a) => score(a),
        Command::Replay(a) => replay(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn config_err(msg: String) -> CliError {
    alref_core::Error::Config(msg).into()
}

/// The run config file, split into its `[backends]` table and the rest.
fn load_config(path: Option<&Path>) -> Result<(RunConfig, Option<BackendsConfig>, PathBuf), CliError> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), None, PathBuf::from(".")));
    };
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let backends = table
        .remove("backends")
        .map(|v| v.try_into::<BackendsConfig>())
        .transpose()
        .map_err(|e| config_err(format!("{} [backends]: {e}", path.display())))?;
    let mut run: RunConfig = table
        .try_into()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    run.templates = run.templates.map(|p| base.join(p));
    run.cache = run.cache.map(|p| base.join(p));
    Ok((run, backends, base))
}

/// `--backends` wins over the config's table. A value naming an existing
/// file is read as TOML; anything else is an endpoint for every kind.
fn resolve_backends(
    flag: Option<&str>,
    from_config: Option<BackendsConfig>,
    config_dir: PathBuf,
) -> Result<(BackendsConfig, PathBuf), CliError> {
    match flag {
        Some(value) if Path::new(value).is_file() => {
            let path = Path::new(value);
            let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{value}: {e}")))?;
            let cfg = toml::from_str(&text).map_err(|e| config_err(format!("{value}: {e}")))?;
            Ok((cfg, path.parent().unwrap_or(Path::new(".")).to_path_buf()))
        }
        Some(endpoint) => Ok((BackendsConfig::uniform(endpoint), PathBuf::from("."))),
        None => from_config
            .map(|cfg| (cfg, config_dir))
            .ok_or_else(|| config_err("no backends configured: pass --backends or add [backends] to --config".into())),
    }
}

fn load_dataset(args: &DatasetArgs, require_truth: bool) -> Result<Dataset, CliError> {
    let opts = LoadOptions {
        require_truth,
        split: args.split.clone(),
    };
    let ds = Dataset::load(&args.dataset, args.task, &opts)?;
    for s in &ds.report.skipped {
        log::warn!("skipped {}: {}", s.id, s.reason);
    }
    Ok(ds)
}

fn run(args: RunArgs) -> Result<(), CliError> {
    if args.jobs == 0 {
        return Err(config_err("--jobs must be at least 1".into()));
    }
    let task = args.data.task;
    let (mut run_cfg, cfg_backends, cfg_dir) = load_config(args.config.as_deref())?;
    if args.preset.is_some() {
        run_cfg.preset = args.preset;
    }
    let mut pipeline = run_cfg.pipeline(task)?;
    for switch in &args.ablation {
        pipeline.apply_ablation(switch)?;
    }
    let (backends, base_dir) = resolve_backends(args.backends.as_deref(), cfg_backends, cfg_dir)?;
    let factory = BackendFactory::new(&backends, task, &base_dir)?;
    let prompts = PromptSet::load(run_cfg.templates.as_deref())?;
    let cache = match &run_cfg.cache {
        Some(p) => ChatCache::load(p)?,
        None => ChatCache::default(),
    };
    let ds = load_dataset(&args.data, factory.needs_truth())?;
    eprintln!(
        "{} samples from {} videos ({} skipped)",
        ds.samples.len(),
        ds.videos.len(),
        ds.report.skipped.len()
    );
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&pipeline).map_err(alref_core::Error::from)?);
        return Ok(());
    }
    let setup = RunSetup {
        task,
        pipeline,
        prompts,
        factory,
        cache,
        cache_path: run_cfg.cache.clone(),
        jobs: args.jobs,
        dump_prompts: args.dump_prompts,
    };
    let report = run_dataset(&ds, &setup, &args.out)?;
    for s in &report.samples {
        if let SampleStatus::Failed { error } = &s.status {
            eprintln!("{}: failed: {error}", s.id);
        }
    }
    eprintln!(
        "{} samples, {} failed, {} degraded, {} chat calls; outputs in {}",
        report.samples.len(),
        report.failed,
        report.degraded,
        report.calls.chat,
        args.out.display()
    );
    if report.failed > 0 {
        return Err(CliError::SamplesFailed(report.failed, report.samples.len()));
    }
    Ok(())
}

fn score(args: ScoreArgs) -> Result<(), CliError> {
    let ds = load_dataset(&args.data, true)?;
    let outcome = score_predictions(&ds, &args.pred, args.per_annotator)?;
    let json = serde_json::to_string_pretty(&outcome).map_err(alref_core::Error::from)?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n").map_err(|e| config_err(format!("{}: {e}", path.display())))?,
        None => println!("{json}"),
    }
    if let Some(path) = &args.csv {
        write_csv(path, args.data.task, &args.method, &outcome.report)?;
    }
    let r = &outcome.report;
    match args.data.task {
        Task::Rvos => eprintln!("J&F {:.4}  J {:.4}  F {:.4}  ({} objects)", r.jf, r.j, r.f, r.objects.len()),
        Task::Avs => eprintln!("M_J {:.4}  M_F {:.4}  ({} objects)", r.m_j(), r.m_f(), r.objects.len()),
    }
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<(), CliError> {
    let ds = load_dataset(&args.data, false)?;
    let records = read_jsonl(&args.run.join("audit.jsonl"))?;
    let mut clips: HashMap<usize, VideoClip> = HashMap::new();
    let (mut total, mut bad) = (0, 0);
    for (n, rec) in records.iter().enumerate() {
        let AuditEvent::Chat { images, .. } = &rec.event else {
            continue;
        };
        let sample = ds
            .samples
            .iter()
            .find(|s| s.id == rec.sample)
            .ok_or_else(|| alref_core::Error::Dataset(format!("audit names unknown sample {}", rec.sample)))?;
        if !clips.contains_key(&sample.video) {
            clips.insert(sample.video, ds.video_of(sample).load()?);
        }
        let clip = &clips[&sample.video];
        for (i, recipe) in images.iter().enumerate() {
            total += 1;
            let img = recipe.render(clip)?;
            if !recipe.verify(&img) {
                bad += 1;
                eprintln!("{}: record {} image {i} does not match {}", rec.sample, n + 1, recipe.hash);
            }
            if let Some(dir) = &args.write {
                let dir = dir.join(&rec.sample);
                std::fs::create_dir_all(&dir).map_err(|e| config_err(format!("{}: {e}", dir.display())))?;
                let path = dir.join(format!("{}.png", &recipe.hash[..16.min(recipe.hash.len())]));
                img.save(&path)
                    .map_err(|e| alref_core::Error::Image(format!("{}: {e}", path.display())))?;
            }
        }
    }
    eprintln!("{} of {total} prompt images reproduced", total - bad);
    if bad > 0 {
        return Err(CliError::ReplayMismatch(bad, total));
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    match args.kind {
        SynthKind::Rvos => {
            let n = write_rvos_fixture(&args.out, &RvosFixture::default())?;
            eprintln!("wrote {n} expressions to {}", args.out.display());
        }
        SynthKind::Avs => {
            write_avs_alternating(&args.out)?;
            eprintln!("wrote audio-visual fixture to {}", args.out.display());
        }
    }
    eprintln!("backends: {}", args.out.join("backends.toml").display());
    Ok(())
}
