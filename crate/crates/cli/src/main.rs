//! `idm`: command-line front end for toy corpora, degradation, training,
//! restoration, corpus enhancement and evaluation.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on argument errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use idm_core::config::{RunConfig, RunRecord};
use idm_core::degrade::{degrade_corpus, replay_sidecar, DegradationRanges, DegradationSidecar};
use idm_core::denoiser::{read_checkpoint, write_checkpoint, DenoiserCheckpoint};
use idm_core::diffusion::{restore_stream, train, TrainHooks, TrainPair, TraceRow};
use idm_core::eval::{
    authenticity_test, evaluate_dataset, sidecar_pairs, AuthSeeds, BlurRestorer, DiffusionRestorer, IdentityRestorer,
    OracleRestorer, Restorer,
};
use idm_core::extrinsic::{enhance_with, round_pairs, warm_start, write_toy_corpus, DatasetManifest, Enhancer};
use idm_core::imaging::{load_png, save_png, ImageTensor, ToyFaceSpec, MIN_TOY_SIZE};
use idm_core::schedule::{make_inference_plan, ScheduleConfig};

#[derive(Parser)]
#[command(name = "idm", version, about = "Iterative diffusion restoration toolkit")]
struct Cli {
    /// Upper bound on threads used for per-image work.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    workers: u16,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural toy-face corpus with a round-0 manifest.
    GenToy(GenToyArgs),
    /// Train a denoiser from scratch, or warm-start the next round.
    Train(TrainArgs),
    /// Restore a PNG or every image of a manifest.
    Restore(RestoreArgs),
    /// Degrade a corpus and record a replayable sidecar, or replay one.
    Degrade(DegradeArgs),
    /// Enhance a corpus with a trained model, producing the next-round manifest.
    Enhance(EnhanceArgs),
    /// Run the authenticity test on clean images.
    Authtest(AuthtestArgs),
    /// Restore degraded/clean pairs from a sidecar and score them.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    count: usize,
    #[arg(long, default_value_t = 32, value_parser = parse_size)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 1 (gray) or 3 (RGB).
    #[arg(long, default_value_t = 3, value_parser = parse_channels)]
    channels: usize,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training corpus manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint of the previous round to start from.
    #[arg(long, requires_all = ["round", "original"])]
    init: Option<PathBuf>,
    /// Round being trained; the data manifest must be this round's enhanced corpus.
    #[arg(long, requires = "init", value_parser = clap::value_parser!(u32).range(1..))]
    round: Option<u32>,
    /// Manifest of the corpus the enhanced data was derived from.
    #[arg(long, requires = "init")]
    original: Option<PathBuf>,
}

#[derive(Args)]
struct RestoreArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint path, `identity` or `blur:<sigma>`.
    #[arg(long, value_parser = parse_model)]
    ckpt: ModelSpec,
    /// A PNG file or a manifest JSON.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sampling steps (default: the configuration's, 10 unless set).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    steps: Option<u32>,
}

#[derive(Args)]
struct DegradeArgs {
    #[command(flatten)]
    common: Common,
    /// Clean corpus manifest.
    #[arg(long, conflicts_with = "replay", required_unless_present = "replay")]
    data: Option<PathBuf>,
    /// Degradation ranges JSON (default: the configuration's).
    #[arg(long, conflicts_with = "replay")]
    ranges: Option<PathBuf>,
    /// Sidecar to reproduce exactly.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnhanceArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint path or `identity`.
    #[arg(long, value_parser = parse_model)]
    ckpt: ModelSpec,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    steps: Option<u32>,
}

#[derive(Args)]
struct AuthtestArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint path, `identity`, `blur:<sigma>` or `oracle`.
    #[arg(long, value_parser = parse_model)]
    ckpt: ModelSpec,
    /// Clean corpus manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use only the first N images.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    ranges: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    steps: Option<u32>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint path, `identity`, `blur:<sigma>` or `oracle`.
    #[arg(long, value_parser = parse_model)]
    ckpt: ModelSpec,
    /// Sidecar written by `idm degrade`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    steps: Option<u32>,
}

#[derive(Debug, Clone)]
enum ModelSpec {
    Checkpoint(PathBuf),
    Identity,
    Blur(f64),
    Oracle,
}

fn parse_model(s: &str) -> Result<ModelSpec, String> {
    match s {
        "identity" => Ok(ModelSpec::Identity),
        "oracle" => Ok(ModelSpec::Oracle),
        _ => match s.strip_prefix("blur:") {
            Some(v) => match v.parse::<f64>() {
                Ok(sigma) if sigma > 0.0 && sigma.is_finite() => Ok(ModelSpec::Blur(sigma)),
                _ => Err(format!("blur sigma must be a positive number, got {v:?}")),
            },
            None => Ok(ModelSpec::Checkpoint(PathBuf::from(s))),
        },
    }
}

fn parse_channels(s: &str) -> Result<usize, String> {
    match s {
        "1" => Ok(1),
        "3" => Ok(3),
        _ => Err("channels must be 1 or 3".into()),
    }
}

fn parse_size(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v < MIN_TOY_SIZE {
        return Err(format!("size must be at least {MIN_TOY_SIZE}"));
    }
    Ok(v)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let workers = cli.workers as usize;
    let result = match cli.command {
        Command::GenToy(a) => cmd_gen_toy(a),
        Command::Train(a) => cmd_train(a),
        Command::Restore(a) => cmd_restore(a, workers),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Enhance(a) => cmd_enhance(a, workers),
        Command::Authtest(a) => cmd_authtest(a, workers),
        Command::Eval(a) => cmd_eval(a, workers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Writes `config.json` and `run.json` into `out`.
fn record_run(out: &Path, cfg: &RunConfig, inputs: &[&Path]) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), cfg.resolved_json()?)?;
    let mut rec = RunRecord::new(std::env::args().collect(), cfg.seed, serde_json::to_value(cfg)?);
    for p in inputs {
        rec.add_input(p)?;
    }
    rec.write(out)?;
    Ok(())
}

fn cmd_gen_toy(a: GenToyArgs) -> Result<()> {
    let spec = ToyFaceSpec {
        size: a.size,
        channels: a.channels,
        ..ToyFaceSpec::default()
    };
    let m = write_toy_corpus(&a.out, a.count, &spec, a.seed)?;
    let cfg = RunConfig {
        seed: a.seed,
        ..RunConfig::default()
    };
    record_run(&a.out, &cfg, &[])?;
    std::fs::write(a.out.join("toy_spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    println!("wrote {} toy faces to {}", m.len(), a.out.display());
    Ok(())
}

fn progress(row: &TraceRow) {
    if row.step % 100 == 0 {
        log::info!("step {} loss {:.5} ({:.1} s)", row.step, row.loss, row.wall_ms / 1e3);
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let data = DatasetManifest::load(&a.data)?;
    let schedule = cfg.schedule.build()?;
    let ckpt_dir = a.out.join("checkpoints");
    let mut inputs: Vec<&Path> = vec![&a.data];

    let (pairs, start) = match (a.round, &a.init, &a.original) {
        (Some(round), Some(init), Some(original)) => {
            inputs.extend([init.as_path(), original.as_path()]);
            let orig = DatasetManifest::load(original)?;
            if data.round != round {
                bail!("--data is a round-{} corpus but --round is {round}", data.round);
            }
            let prev = read_checkpoint(init)?;
            if prev.training_round + 1 != round {
                bail!("--init is a round-{} checkpoint; round {round} needs round {}", prev.training_round, round - 1);
            }
            let pairs = round_pairs(&orig, &data, cfg.extrinsic.pairing_mode)?;
            (pairs, warm_start(&prev, round))
        }
        _ => {
            if data.round != 0 {
                bail!("a round-{} corpus needs --init, --round and --original", data.round);
            }
            let pairs: Vec<TrainPair> = data
                .load_images()?
                .into_iter()
                .map(|(id, x)| TrainPair::same(id, x))
                .collect();
            let ckpt = DenoiserCheckpoint::init(&cfg.model, &cfg.schedule, idm_core::RngStream::new(cfg.seed, 0x494e_4954))?;
            (pairs, ckpt)
        }
    };
    let mut start = start;
    start.rng_seed = cfg.train.seed;
    let resume = ckpt_dir.join("last.idmc");
    if resume.exists() {
        let prev = read_checkpoint(&resume)?;
        if prev.config != start.config || prev.training_round != start.training_round {
            bail!("{} belongs to a different run", resume.display());
        }
        log::info!("resuming from step {}", prev.step_count);
        start = prev;
    }
    record_run(&a.out, &cfg, &inputs)?;
    let hooks = TrainHooks {
        checkpoint_dir: Some(ckpt_dir),
        trace_path: Some(a.out.join("trace.csv")),
        progress: Some(progress),
    };
    let out = train(start, &pairs, &cfg.degrade, &schedule, &cfg.train, &cfg.loss, &hooks)?;
    write_checkpoint(&out.checkpoint, a.out.join("final.idmc"))?;
    println!(
        "trained round {} to step {} (checkpoint {})",
        out.checkpoint.training_round,
        out.checkpoint.step_count,
        out.checkpoint.id()
    );
    Ok(())
}

/// Builds the restorer named by `spec` and hands it to `f`.
fn with_restorer<T>(
    spec: &ModelSpec,
    cfg: &RunConfig,
    steps: usize,
    workers: usize,
    truths: Option<Vec<ImageTensor>>,
    f: impl FnOnce(&dyn Restorer) -> Result<T>,
) -> Result<T> {
    let plan_for = |sc: &ScheduleConfig| -> Result<_> { Ok(make_inference_plan(&sc.build()?, steps)?) };
    match spec {
        ModelSpec::Checkpoint(path) => {
            let ckpt = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            let r = DiffusionRestorer {
                plan: plan_for(&ckpt.schedule)?,
                model: &ckpt,
                workers,
                label: format!("checkpoint:{}", ckpt.id()),
            };
            f(&r)
        }
        ModelSpec::Identity => f(&IdentityRestorer),
        ModelSpec::Blur(sigma) => f(&BlurRestorer { sigma: *sigma }),
        ModelSpec::Oracle => match truths {
            Some(truths) => f(&OracleRestorer {
                truths,
                plan: plan_for(&cfg.schedule)?,
            }),
            None => bail!("the oracle needs ground truth and is only available to authtest and eval"),
        },
    }
}

fn spec_inputs(spec: &ModelSpec) -> Vec<&Path> {
    match spec {
        ModelSpec::Checkpoint(p) => vec![p.as_path()],
        _ => Vec::new(),
    }
}

fn steps_or(cfg: &RunConfig, steps: Option<u32>) -> usize {
    steps.map(|s| s as usize).unwrap_or(cfg.infer.steps)
}

fn cmd_restore(a: RestoreArgs, workers: usize) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.infer.steps = steps_or(&cfg, a.steps);
    let is_manifest = a.input.extension().is_some_and(|e| e == "json");
    let items: Vec<(String, ImageTensor)> = if is_manifest {
        DatasetManifest::load(&a.input)?.load_images()?
    } else {
        let id = a
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        vec![(id, load_png(&a.input)?)]
    };
    let mut inputs = spec_inputs(&a.ckpt);
    inputs.push(&a.input);
    record_run(&a.out, &cfg, &inputs)?;
    let images: Vec<ImageTensor> = items.iter().map(|(_, x)| x.clone()).collect();
    let streams: Vec<_> = items.iter().map(|(id, _)| restore_stream(cfg.seed, id)).collect();
    let restored = with_restorer(&a.ckpt, &cfg, cfg.infer.steps, workers, None, |r| {
        Ok(r.restore_all(&images, &streams)?)
    })?;
    for ((id, _), img) in items.iter().zip(&restored) {
        save_png(img, a.out.join(format!("{id}.png")))?;
    }
    println!("restored {} image(s) into {}", restored.len(), a.out.display());
    Ok(())
}

fn cmd_degrade(a: DegradeArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(sidecar_path) = &a.replay {
        let sc = DegradationSidecar::load(sidecar_path)?;
        cfg.degrade = sc.ranges;
        cfg.seed = sc.seed;
        record_run(&a.out, &cfg, &[sidecar_path])?;
        replay_sidecar(&sc, &a.out)?;
        println!("replayed {} degradations into {}", sc.records.len(), a.out.display());
        return Ok(());
    }
    let data = a.data.as_ref().expect("clap requires --data without --replay");
    if let Some(p) = &a.ranges {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.degrade = serde_json::from_str::<DegradationRanges>(&text).with_context(|| format!("parsing {}", p.display()))?;
    }
    let m = DatasetManifest::load(data)?;
    let mut inputs: Vec<&Path> = vec![data];
    if let Some(p) = &a.ranges {
        inputs.push(p);
    }
    record_run(&a.out, &cfg, &inputs)?;
    let sc = degrade_corpus(&m, &cfg.degrade, cfg.seed, &a.out)?;
    println!("degraded {} images into {}", sc.records.len(), a.out.display());
    Ok(())
}

fn cmd_enhance(a: EnhanceArgs, workers: usize) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.steps {
        cfg.extrinsic.steps = s as usize;
    }
    if a.common.seed.is_some() {
        cfg.extrinsic.enhancement_seed = cfg.seed;
    }
    let m = DatasetManifest::load(&a.data)?;
    let mut inputs = spec_inputs(&a.ckpt);
    inputs.push(&a.data);
    record_run(&a.out, &cfg, &inputs)?;
    let out = match &a.ckpt {
        ModelSpec::Checkpoint(p) => {
            let ckpt = read_checkpoint(p)?;
            let schedule = ckpt.schedule.build()?;
            enhance_with(&Enhancer::from(&ckpt), &m, &schedule, &cfg.extrinsic, &a.out, workers)?
        }
        ModelSpec::Identity => {
            let e = Enhancer {
                model: &idm_core::diffusion::IdentityPredictor,
                training_round: m.round,
                checkpoint_id: "identity".into(),
            };
            enhance_with(&e, &m, &cfg.schedule.build()?, &cfg.extrinsic, &a.out, workers)?
        }
        other => bail!("enhance needs a checkpoint or `identity`, got {other:?}"),
    };
    println!("enhanced {} images into round {} at {}", out.len(), out.round, a.out.display());
    Ok(())
}

fn cmd_authtest(a: AuthtestArgs, workers: usize) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.infer.steps = steps_or(&cfg, a.steps);
    if let Some(p) = &a.ranges {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.degrade = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    }
    let m = DatasetManifest::load(&a.data)?;
    let mut clean = m.load_images()?;
    if let Some(n) = a.count {
        clean.truncate(n);
    }
    let mut inputs = spec_inputs(&a.ckpt);
    inputs.push(&a.data);
    record_run(&a.out, &cfg, &inputs)?;
    let truths = clean.iter().map(|(_, x)| x.clone()).collect();
    let seeds = AuthSeeds {
        degrade: cfg.seed,
        restore: cfg.seed,
    };
    let outcome = with_restorer(&a.ckpt, &cfg, cfg.infer.steps, workers, Some(truths), |r| {
        Ok(authenticity_test(r, &clean, &cfg.degrade, seeds, cfg.authenticity)?)
    })?;
    outcome.write(&a.out, &clean)?;
    if let Some(cache) = std::env::var_os("IDM_CACHE_DIR") {
        let dir = Path::new(&cache).join("authtest").join(format!("seed{}", cfg.seed));
        std::fs::create_dir_all(&dir)?;
        for ((id, _), [xd, f1, f2]) in clean.iter().zip(&outcome.images) {
            save_png(xd, dir.join(format!("{id}_degraded.png")))?;
            save_png(f1, dir.join(format!("{id}_f1.png")))?;
            save_png(f2, dir.join(format!("{id}_f2.png")))?;
        }
    }
    println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    Ok(())
}

fn cmd_eval(a: EvalArgs, workers: usize) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.infer.steps = steps_or(&cfg, a.steps);
    let sc = DegradationSidecar::load(&a.pairs)?;
    let dir = a.pairs.parent().unwrap_or(Path::new("."));
    let pairs = sidecar_pairs(&sc, dir)?;
    let mut inputs = spec_inputs(&a.ckpt);
    inputs.push(&a.pairs);
    record_run(&a.out, &cfg, &inputs)?;
    let truths = pairs.iter().map(|p| p.target.clone()).collect();
    let report = with_restorer(&a.ckpt, &cfg, cfg.infer.steps, workers, Some(truths), |r| {
        Ok(evaluate_dataset(r, &pairs, cfg.seed, workers)?)
    })?;
    report.write(&a.out)?;
    println!(
        "mean psnr {:.3} dB (input {:.3} dB), mean ssim {:.4} over {} images",
        report.mean("psnr_db").unwrap_or(f64::NAN),
        report.mean("input_psnr_db").unwrap_or(f64::NAN),
        report.mean("ssim").unwrap_or(f64::NAN),
        report.rows.len()
    );
    Ok(())
}
