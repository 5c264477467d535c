use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sector_outpaint::augment::SIDE_CUTS_DEG;
use sector_outpaint::checkpoint::load_generator;
use sector_outpaint::config::PipelineConfig;
use sector_outpaint::dataset::{build_manifest, make_synthetic_dataset, Manifest, SyntheticConfig};
use sector_outpaint::features::build_feature_model;
use sector_outpaint::geometry::DetectOptions;
use sector_outpaint::losses::build_lpips;
use sector_outpaint::metrics::{evaluate, write_contact_sheets};
use sector_outpaint::outpaint::{batch_outpaint, BatchOptions, CheckpointedGenerator};
use sector_outpaint::stats::{run_study, PermutationMode, StudyOptions, DEFAULT_RESAMPLES};
use sector_outpaint::trainer::{fit, FitOptions};

const RUN_RECORD: &str = "run.json";

/// Lateral field-of-view outpainting for sector-scan ultrasound.
///
/// Exit status: 0 on success, 1 on invalid input or usage, 2 on runtime
/// failure.
#[derive(Debug, Parser)]
#[command(name = "sector-outpaint", version)]
struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural echo-like dataset with its manifest.
    MakeSynthetic(MakeSynthetic),
    /// Scan `<root>/<patient>/<frame>.png`, detect sectors and split by patient.
    PrepareData(PrepareData),
    /// Train the generator and discriminator.
    Train(Train),
    /// Cut every test frame and outpaint it back.
    Outpaint(Outpaint),
    /// Compute the metric table from an outpainting index.
    Evaluate(Evaluate),
    /// Paired area study on ground-truth and generated segmentation masks.
    StatsCompare(StatsCompare),
    /// Per-cut contact sheets (ground truth | input | output).
    Plot(Plot),
}

#[derive(Debug, Args)]
struct MakeSynthetic {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    patients: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    /// Fraction of patients in the train split.
    #[arg(long, default_value_t = 0.8)]
    split_fraction: f64,
}

#[derive(Debug, Args)]
struct PrepareData {
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    split_fraction: f64,
    /// Sector detection threshold on the [0, 1] intensity scale.
    #[arg(long, default_value_t = 1.0 / 255.0)]
    threshold: f32,
}

#[derive(Debug, Args)]
struct Train {
    /// Manifest CSV (train split is used).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Generator width at the first stage.
    #[arg(long)]
    base_width: Option<usize>,
    /// Training resolution as HxW, e.g. 128x128.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<[usize; 2]>,
}

#[derive(Debug, Args)]
struct Outpaint {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Degrees removed from each side (repeatable); default 15, 23, 30, 40.
    #[arg(long = "cut", value_name = "DEG")]
    cuts: Vec<f64>,
    /// Also save the generator output before compositing.
    #[arg(long)]
    save_raw: bool,
}

#[derive(Debug, Args)]
struct Evaluate {
    /// `index.json` written by `outpaint`.
    #[arg(long)]
    index: PathBuf,
    /// Report path (JSON); the text table and run record go next to it.
    #[arg(long)]
    out: PathBuf,
    /// Pretrained VGG16 weights for LPIPS (safetensors).
    #[arg(long)]
    lpips_weights: Option<PathBuf>,
    /// Pretrained Inception weights for FID (safetensors).
    #[arg(long)]
    fid_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsCompare {
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long)]
    gen_dir: PathBuf,
    /// CSV with columns case_id,gt_mask_path,gen_mask_path.
    #[arg(long)]
    pairing: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pixel spacing in mm as ROW,COL; areas are then reported in cm².
    #[arg(long, value_parser = parse_spacing)]
    spacing_mm: Option<(f64, f64)>,
    /// Monte Carlo resample count; only with --monte-carlo.
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: u64,
    /// Always enumerate all sign patterns.
    #[arg(long, conflicts_with = "monte_carlo")]
    exhaustive: bool,
    /// Always resample, whatever the sample size.
    #[arg(long)]
    monte_carlo: bool,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct Plot {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Frames per contact sheet.
    #[arg(long, default_value_t = 8)]
    rows: usize,
}

fn parse_resolution(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW, e.g. 128x128")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok([parse(h)?, parse(w)?])
}

fn parse_spacing(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected ROW,COL in mm, e.g. 0.3,0.3")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

/// Failure with its exit status.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<sector_outpaint::Error> for Failure {
    fn from(e: sector_outpaint::Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    argv: Vec<String>,
    version: &'static str,
    seed: Option<u64>,
    settings: &'a T,
    timestamp: String,
}

fn write_run_record<T: Serialize>(path: &Path, command: &str, seed: Option<u64>, settings: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    let record = RunRecord {
        command,
        argv: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        settings,
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    let text = serde_json::to_string_pretty(&record).map_err(|e| io_failure(path, e))?;
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn make_synthetic(args: &MakeSynthetic, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = SyntheticConfig {
        n_patients: args.patients,
        frames_per_patient: args.frames,
        seed: seed.unwrap_or(0),
        height: args.height,
        width: args.width,
        split_fraction: args.split_fraction,
        ..Default::default()
    };
    write_run_record(&args.out.join(RUN_RECORD), "make-synthetic", Some(cfg.seed), &cfg)?;
    let manifest = make_synthetic_dataset(&cfg, &args.out)?;
    let s = manifest.summary();
    println!(
        "wrote {} frames ({} train / {} test patients) to {}",
        manifest.records.len(),
        s.train_patients,
        s.test_patients,
        args.out.join("manifest.csv").display()
    );
    Ok(())
}

fn prepare_data(args: &PrepareData, seed: Option<u64>) -> Result<(), Failure> {
    #[derive(Serialize)]
    struct Settings<'a> {
        root: &'a Path,
        split_fraction: f64,
        threshold: f32,
    }
    let seed = seed.unwrap_or(0);
    let settings = Settings {
        root: &args.root,
        split_fraction: args.split_fraction,
        threshold: args.threshold,
    };
    write_run_record(&args.out.join(RUN_RECORD), "prepare-data", Some(seed), &settings)?;
    let detect = DetectOptions {
        threshold: args.threshold,
    };
    let manifest = build_manifest(&args.root, args.split_fraction, seed, &detect)?;
    let csv = args.out.join("manifest.csv");
    manifest.write_csv(&csv)?;
    let summary_path = args.out.join("summary.json");
    let summary = serde_json::json!({ "summary": manifest.summary(), "skipped": manifest.skipped });
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("plain JSON"))
        .map_err(|e| io_failure(&summary_path, e))?;
    let s = manifest.summary();
    println!(
        "{} train frames ({} patients), {} test frames ({} patients), {} skipped -> {}",
        s.train_frames,
        s.train_patients,
        s.test_frames,
        s.test_patients,
        s.skipped_files,
        csv.display()
    );
    Ok(())
}

fn train(args: &Train, config: Option<&Path>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    let t = &mut cfg.train;
    if let Some(v) = args.steps {
        t.steps = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr_g {
        t.lr_g = v;
    }
    if let Some(v) = args.lr_d {
        t.lr_d = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = args.resolution {
        t.resolution = v;
    }
    if let Some(v) = seed {
        t.seed = v;
    }
    if let Some(v) = args.base_width {
        cfg.generator.base_width = v;
    }
    cfg.validate()?;
    write_run_record(&args.out.join(RUN_RECORD), "train", Some(cfg.train.seed), &cfg)?;
    let manifest = Manifest::read_csv(&args.manifest)?;
    let outcome = fit(
        &cfg,
        &manifest,
        &args.out,
        &FitOptions {
            resume: args.resume.clone(),
        },
    )?;
    println!(
        "ran {} steps; final checkpoint {}",
        outcome.steps_run,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn outpaint(args: &Outpaint, seed: Option<u64>) -> Result<(), Failure> {
    let cuts = if args.cuts.is_empty() {
        SIDE_CUTS_DEG.to_vec()
    } else {
        args.cuts.clone()
    };
    #[derive(Serialize)]
    struct Settings<'a> {
        manifest: &'a Path,
        checkpoint: &'a Path,
        cuts_deg_per_side: &'a [f64],
        save_raw: bool,
    }
    let settings = Settings {
        manifest: &args.manifest,
        checkpoint: &args.checkpoint,
        cuts_deg_per_side: &cuts,
        save_raw: args.save_raw,
    };
    write_run_record(&args.out.join(RUN_RECORD), "outpaint", seed, &settings)?;
    let manifest = Manifest::read_csv(&args.manifest)?;
    let (generator, _, meta) = load_generator(&args.checkpoint, &Device::Cpu)?;
    let model = CheckpointedGenerator {
        generator: &generator,
        meta: &meta,
        path: &args.checkpoint,
    };
    let index = batch_outpaint(
        &manifest,
        &model,
        &cuts,
        &args.out,
        &BatchOptions {
            save_raw: args.save_raw,
        },
    )?;
    println!(
        "{} outputs, {} failures -> {}",
        index.entries.len(),
        index.failures.len(),
        args.out.join(sector_outpaint::outpaint::INDEX_FILE).display()
    );
    if index.entries.is_empty() {
        return Err(Failure {
            code: 2,
            message: "every frame failed; see the index for details".into(),
        });
    }
    Ok(())
}

fn evaluate_cmd(args: &Evaluate, config: Option<&Path>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(p) = &args.lpips_weights {
        cfg.lpips.weights = Some(p.clone());
    }
    if let Some(p) = &args.fid_weights {
        cfg.fid.weights = Some(p.clone());
    }
    if let Some(s) = seed {
        cfg.fid.stub_seed = s;
    }
    #[derive(Serialize)]
    struct Settings<'a> {
        index: &'a Path,
        lpips: &'a sector_outpaint::losses::LpipsConfig,
        fid: &'a sector_outpaint::features::FeatureModelConfig,
    }
    let settings = Settings {
        index: &args.index,
        lpips: &cfg.lpips,
        fid: &cfg.fid,
    };
    write_run_record(&args.out.with_extension("run.json"), "evaluate", seed, &settings)?;
    let dev = Device::Cpu;
    let lpips = build_lpips(&cfg.lpips, &dev)?;
    let features = build_feature_model(&cfg.fid, &dev)?;
    let report = evaluate(&args.index, &lpips, features.as_ref())?;
    report.save_json(&args.out)?;
    let table = report.to_table();
    let txt = args.out.with_extension("txt");
    std::fs::write(&txt, &table).map_err(|e| io_failure(&txt, e))?;
    print!("{table}");
    if !report.missing.is_empty() {
        eprintln!("{} index entries were skipped (listed in the report)", report.missing.len());
    }
    Ok(())
}

fn stats_compare(args: &StatsCompare, seed: Option<u64>) -> Result<(), Failure> {
    let seed = seed.unwrap_or(0);
    let mode = if args.exhaustive {
        PermutationMode::Exhaustive
    } else if args.monte_carlo {
        PermutationMode::MonteCarlo {
            resamples: args.resamples,
            seed,
        }
    } else if args.resamples != DEFAULT_RESAMPLES {
        return Err(invalid("--resamples only applies together with --monte-carlo"));
    } else {
        PermutationMode::Auto { seed }
    };
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(invalid(format!("--alpha must lie in (0, 1), got {}", args.alpha)));
    }
    #[derive(Serialize)]
    struct Settings<'a> {
        gt_dir: &'a Path,
        gen_dir: &'a Path,
        pairing: &'a Path,
        spacing_mm: Option<(f64, f64)>,
        mode: String,
        alpha: f64,
    }
    let settings = Settings {
        gt_dir: &args.gt_dir,
        gen_dir: &args.gen_dir,
        pairing: &args.pairing,
        spacing_mm: args.spacing_mm,
        mode: format!("{mode:?}"),
        alpha: args.alpha,
    };
    write_run_record(&args.out.join(RUN_RECORD), "stats-compare", Some(seed), &settings)?;
    let opts = StudyOptions {
        pixel_spacing_mm: args.spacing_mm,
        mode,
        alpha: args.alpha,
    };
    let study = run_study(&args.gt_dir, &args.gen_dir, &args.pairing, &opts)?;
    study.save_json(&args.out.join("study.json"))?;
    let summary = study.summary();
    let path = args.out.join("summary.txt");
    std::fs::write(&path, &summary).map_err(|e| io_failure(&path, e))?;
    print!("{summary}");
    Ok(())
}

fn plot(args: &Plot, seed: Option<u64>) -> Result<(), Failure> {
    if args.rows == 0 {
        return Err(invalid("--rows must be >= 1"));
    }
    #[derive(Serialize)]
    struct Settings<'a> {
        index: &'a Path,
        rows: usize,
    }
    let settings = Settings {
        index: &args.index,
        rows: args.rows,
    };
    write_run_record(&args.out.join(RUN_RECORD), "plot", seed, &settings)?;
    for p in write_contact_sheets(&args.index, &args.out, args.rows)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = cli.config.as_deref();
    if config.is_some() && !matches!(cli.command, Command::Train(_) | Command::Evaluate(_)) {
        return Err(invalid("--config applies to train and evaluate only"));
    }
    match &cli.command {
        Command::MakeSynthetic(a) => make_synthetic(a, cli.seed),
        Command::PrepareData(a) => prepare_data(a, cli.seed),
        Command::Train(a) => train(a, config, cli.seed),
        Command::Outpaint(a) => outpaint(a, cli.seed),
        Command::Evaluate(a) => evaluate_cmd(a, config, cli.seed),
        Command::StatsCompare(a) => stats_compare(a, cli.seed),
        Command::Plot(a) => plot(a, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
