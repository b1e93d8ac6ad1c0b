//! Command-line entry point tying generation, training, evaluation,
//! sweeping, benchmarking, and prior inspection into reproducible runs.
//!
//! Exit codes: 0 success, 2 usage/argument errors, 3 generation failure,
//! 4 checkpoint/dataset incompatibility.

mod config;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use broadwave_core::dataset::{
    generate_dataset, read_dataset, write_dataset, GenOptions, Manifest, ScheduleMode,
    StructureMode, WavelengthSchedule,
};
use broadwave_core::eval;
use broadwave_core::fdfd::PmlSpec;
use broadwave_core::model::{
    checkpoint, Activation, Conditioning, Model, ModelConfig, Real,
};
use broadwave_core::prior::{refined_wave_prior, wave_prior};
use broadwave_core::scenes::{SceneKind, SceneParams};
use broadwave_core::training::{train, TrainConfig, SPLIT_TOL};
use broadwave_core::{CoreError, Grid2D};

use config::{parse_grid, parse_list, FileConfig, Resolved};

const EXIT_USAGE: i32 = 2;
const EXIT_GENERATION: i32 = 3;
const EXIT_INCOMPATIBLE: i32 = 4;

struct CliError {
    code: i32,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl From<String> for CliError {
    fn from(msg: String) -> Self {
        CliError::usage(msg)
    }
}

/// Errors while loading checkpoints/datasets for evaluation-style commands:
/// malformed or mismatched artifacts are incompatibilities (4), missing
/// files or bad values are usage errors (2).
fn artifact_error(e: CoreError) -> CliError {
    let code = match &e {
        CoreError::BadMagic { .. }
        | CoreError::VersionMismatch { .. }
        | CoreError::ChecksumMismatch { .. }
        | CoreError::Truncated { .. }
        | CoreError::ShapeMismatch(_)
        | CoreError::Incompatible(_) => EXIT_INCOMPATIBLE,
        _ => EXIT_USAGE,
    };
    CliError {
        code,
        msg: e.to_string(),
    }
}

#[derive(Parser)]
#[command(
    name = "broadwave",
    about = "Broadband 2D field solver and wavelength-conditioned neural surrogate",
    version,
    long_version = concat!(env!("CARGO_PKG_VERSION"), " (formats: WFD1 v1, WFC1 v1)")
)]
struct Cli {
    /// Plain-text key=value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a solved dataset of randomized scenes.
    Gen(GenArgs),
    /// Train the surrogate on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// NMSE versus wavelength over a fixed-structure dense dataset.
    Sweep(SweepArgs),
    /// Time model inference against the reference solver.
    Bench(BenchArgs),
    /// Dump wave-prior channels as images and raw arrays.
    Prior(PriorArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scene family: metalens | splitter | waveguide.
    #[arg(long)]
    scene: Option<String>,
    /// Number of samples (structures, with --fixed-structures).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    wl_start: Option<f64>,
    #[arg(long)]
    wl_end: Option<f64>,
    #[arg(long)]
    wl_step: Option<f64>,
    /// trained_grid | dense_grid.
    #[arg(long)]
    wl_mode: Option<String>,
    /// Grid cells as NXxNZ, e.g. 64x64.
    #[arg(long)]
    grid: Option<String>,
    /// Step size in meters (both axes unless --dl-z is given).
    #[arg(long)]
    dl: Option<f64>,
    #[arg(long)]
    dl_z: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    eps_material: Option<f64>,
    #[arg(long)]
    feature_cells: Option<usize>,
    #[arg(long)]
    fill_density: Option<f64>,
    #[arg(long)]
    layer_count: Option<usize>,
    /// Solve every structure at every schedule wavelength.
    #[arg(long)]
    fixed_structures: bool,
    #[arg(long)]
    pml_thickness: Option<usize>,
    #[arg(long)]
    pml_sigma_max: Option<f64>,
    #[arg(long)]
    pml_poly_order: Option<f64>,
    #[arg(long)]
    source_row: Option<usize>,
    /// Abort when more than this fraction of solves fails.
    #[arg(long)]
    max_skip: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for checkpoints, history and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    modes_v: Option<usize>,
    #[arg(long)]
    modes_h: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    /// wime | concat.
    #[arg(long)]
    conditioning: Option<String>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    val_every: Option<usize>,
    /// f32 | f64.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// all | design: which region the printed aggregates use.
    #[arg(long)]
    region: Option<String>,
    /// Comma-separated trained wavelengths in meters.
    #[arg(long)]
    trained: Option<String>,
    /// Dataset path whose manifest schedule defines the trained set.
    #[arg(long)]
    trained_from: Option<PathBuf>,
    /// Report CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump the error map of one sample near this wavelength (meters).
    #[arg(long)]
    map_lambda: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    trained: Option<String>,
    #[arg(long)]
    trained_from: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated batch sizes, e.g. 1,32.
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    /// Wavelength for the solver comparison (meters).
    #[arg(long)]
    lambda: Option<f64>,
    /// Scene family used for the solver workload.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct PriorArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    dl: Option<f64>,
    #[arg(long)]
    dl_z: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump the permittivity-aware prior of one dataset sample.
    #[arg(long)]
    eps_from: Option<PathBuf>,
    #[arg(long)]
    sample: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let file = match FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(msg) => {
            eprintln!("error: {msg}");
            std::process::exit(EXIT_USAGE);
        }
    };
    let result = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a, &file),
        Cmd::Train(a) => cmd_train(a, &file),
        Cmd::Eval(a) => cmd_eval(a, &file),
        Cmd::Sweep(a) => cmd_sweep(a, &file),
        Cmd::Bench(a) => cmd_bench(a, &file),
        Cmd::Prior(a) => cmd_prior(a, &file),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.msg);
        std::process::exit(e.code);
    }
}

/// flag > file > default.
fn pick<T: std::str::FromStr>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
) -> Result<Option<T>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    Ok(file.get::<T>(key)?)
}

fn require<T>(v: Option<T>, what: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::usage(format!("missing required argument --{what} (or config key)")))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}

fn cmd_gen(a: GenArgs, file: &FileConfig) -> Result<(), CliError> {
    let scene_str = require(
        a.scene.or(file.get_string("scene")),
        "scene",
    )?;
    let kind = SceneKind::parse(&scene_str).map_err(|e| CliError::usage(e.to_string()))?;
    let n = require(pick(a.n, file, "n")?, "n")?;
    if n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let wl_start = require(pick(a.wl_start, file, "wl_start")?, "wl-start")?;
    let wl_end = require(pick(a.wl_end, file, "wl_end")?, "wl-end")?;
    let wl_step = require(pick(a.wl_step, file, "wl_step")?, "wl-step")?;
    let wl_mode = match pick(a.wl_mode, file, "wl_mode")?.as_deref() {
        None => ScheduleMode::TrainedGrid,
        Some(s) => ScheduleMode::parse(s).map_err(|e| CliError::usage(e.to_string()))?,
    };
    let grid_str = require(a.grid.or(file.get_string("grid")), "grid")?;
    let (nx, nz) = parse_grid(&grid_str)?;
    let dl = require(pick(a.dl, file, "dl")?, "dl")?;
    let dl_z = pick(a.dl_z, file, "dl_z")?.unwrap_or(dl);
    let seed = pick(a.seed, file, "seed")?.unwrap_or(0);
    let out = require(a.out.or(file.get_string("out").map(PathBuf::from)), "out")?;

    let grid = Grid2D::new(nx, nz, dl, dl_z).map_err(|e| CliError::usage(e.to_string()))?;
    let mut scene = SceneParams::new(kind, grid, seed);
    if let Some(v) = pick(a.eps_material, file, "eps_material")? {
        scene.eps_material = v;
    }
    if let Some(v) = pick(a.feature_cells, file, "feature_cells")? {
        scene.feature_cells = v;
    }
    if let Some(v) = pick(a.fill_density, file, "fill_density")? {
        scene.fill_density = v;
    }
    if let Some(v) = pick(a.layer_count, file, "layer_count")? {
        scene.layer_count = v;
    }
    let schedule = WavelengthSchedule::new(wl_start, wl_end, wl_step, wl_mode)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let mut opts = GenOptions::default();
    if a.fixed_structures || file.get::<bool>("fixed_structures")?.unwrap_or(false) {
        opts.structure_mode = StructureMode::FixedAcrossGrid;
    }
    if let Some(v) = pick(a.pml_thickness, file, "pml_thickness")? {
        opts.pml.thickness = v;
    }
    if let Some(v) = pick(a.pml_sigma_max, file, "pml_sigma_max")? {
        opts.pml.sigma_max = v;
    }
    if let Some(v) = pick(a.pml_poly_order, file, "pml_poly_order")? {
        opts.pml.poly_order = v;
    }
    if let Some(v) = pick(a.source_row, file, "source_row")? {
        opts.source_row = Some(v);
    }
    if let Some(v) = pick(a.max_skip, file, "max_skip")? {
        opts.max_skip_fraction = v;
    }

    // Argument-level validation (exit 2) before the solve loop (exit 3).
    opts.pml
        .validate(&grid)
        .map_err(|e| CliError::usage(e.to_string()))?;
    grid.check_resolution(schedule.points().first().copied().unwrap_or(wl_start), scene.eps_material)
        .map_err(|e| CliError::usage(e.to_string()))?;
    {
        let mut probe = scene;
        probe.seed = 0;
        broadwave_core::scenes::generate(&probe).map_err(|e| CliError::usage(e.to_string()))?;
    }

    let report = generate_dataset(&scene, &schedule, n, seed, &opts).map_err(|e| CliError {
        code: EXIT_GENERATION,
        msg: e.to_string(),
    })?;
    for (idx, msg) in &report.skipped {
        eprintln!("skipped sample {idx}: {msg}");
    }
    write_dataset(&report.dataset, &out).map_err(|e| CliError::usage(e.to_string()))?;

    let mut resolved = Resolved::new("gen");
    resolved.push("scene", kind.as_str());
    resolved.push("n", n);
    resolved.push("wl_start", wl_start);
    resolved.push("wl_end", wl_end);
    resolved.push("wl_step", wl_step);
    resolved.push("wl_mode", wl_mode.as_str());
    resolved.push("grid", format!("{nx}x{nz}"));
    resolved.push("dl", dl);
    resolved.push("dl_z", dl_z);
    resolved.push("seed", seed);
    resolved.push("eps_material", scene.eps_material);
    resolved.push("feature_cells", scene.feature_cells);
    resolved.push("fill_density", scene.fill_density);
    resolved.push("layer_count", scene.layer_count);
    resolved.push("fixed_structures", opts.structure_mode == StructureMode::FixedAcrossGrid);
    resolved.push("pml_thickness", opts.pml.thickness);
    resolved.push("pml_sigma_max", opts.pml.sigma_max);
    resolved.push("pml_poly_order", opts.pml.poly_order);
    resolved.push("source_row", opts.source_row.unwrap_or(opts.pml.thickness + 2));
    resolved.push("max_skip", opts.max_skip_fraction);
    resolved.push("out", out.display());
    resolved
        .write(&sidecar(&out, ".resolved.cfg"))
        .map_err(|e| CliError::usage(e.to_string()))?;

    println!(
        "wrote {} records ({} skipped) to {}",
        report.dataset.len(),
        report.skipped.len(),
        out.display()
    );
    Ok(())
}

fn model_config_from(args: &TrainArgs, file: &FileConfig) -> Result<ModelConfig, CliError> {
    let mut cfg = ModelConfig::desk_default();
    if let Some(v) = pick(args.channels, file, "channels")? {
        cfg.channels = v;
        cfg.lift_width = v;
    }
    if let Some(v) = file.get::<usize>("lift_width")? {
        cfg.lift_width = v;
    }
    if let Some(v) = pick(args.layers, file, "layers")? {
        cfg.layers = v;
    }
    if let Some(v) = pick(args.modes_v, file, "modes_v")? {
        cfg.modes_v = v;
    }
    if let Some(v) = pick(args.modes_h, file, "modes_h")? {
        cfg.modes_h = v;
    }
    if let Some(v) = pick(args.groups, file, "groups")? {
        cfg.groups = v;
    }
    if let Some(s) = args
        .conditioning
        .clone()
        .or(file.get_string("conditioning"))
    {
        cfg.conditioning = Conditioning::parse(&s).map_err(|e| CliError::usage(e.to_string()))?;
    }
    if let Some(v) = pick(args.model_seed, file, "model_seed")? {
        cfg.seed = v;
    }
    cfg.activation = Activation::Gelu;
    Ok(cfg)
}

fn train_config_from(args: &TrainArgs, file: &FileConfig) -> Result<TrainConfig, CliError> {
    let mut tc = TrainConfig::default();
    if let Some(v) = pick(args.epochs, file, "epochs")? {
        tc.epochs = v;
    }
    if let Some(v) = pick(args.batch_size, file, "batch_size")? {
        tc.batch_size = v;
    }
    if let Some(v) = pick(args.lr, file, "lr")? {
        tc.lr = v;
    }
    if let Some(v) = file.get::<f64>("beta1")? {
        tc.betas.0 = v;
    }
    if let Some(v) = file.get::<f64>("beta2")? {
        tc.betas.1 = v;
    }
    if let Some(v) = file.get::<f64>("eps_opt")? {
        tc.eps_opt = v;
    }
    if let Some(v) = pick(args.weight_decay, file, "weight_decay")? {
        tc.weight_decay = v;
    }
    if let Some(v) = pick(args.lr_min, file, "lr_min")? {
        tc.lr_min = v;
    }
    if let Some(v) = pick(args.train_seed, file, "train_seed")? {
        tc.seed = v;
    }
    if let Some(v) = pick(args.val_every, file, "val_every")? {
        tc.val_every = v;
    }
    if let Some(v) = file.get::<bool>("val_untrained_only")? {
        tc.val_untrained_only = v;
    }
    Ok(tc)
}

fn precision_of(flag: &Option<String>, file: &FileConfig) -> Result<String, CliError> {
    let p = flag
        .clone()
        .or(file.get_string("precision"))
        .unwrap_or_else(|| "f32".to_string());
    if p != "f32" && p != "f64" {
        return Err(CliError::usage(format!(
            "precision must be f32 or f64, got '{p}'"
        )));
    }
    Ok(p)
}

fn run_train_typed<F: Real>(
    cfg: ModelConfig,
    tc: &TrainConfig,
    data: &Path,
    val: &Path,
    out: &Path,
) -> Result<(usize, f64), CliError> {
    let train_ds = read_dataset(data).map_err(artifact_error)?;
    let val_ds = read_dataset(val).map_err(artifact_error)?;
    let eps_max = train_ds
        .manifest
        .as_ref()
        .map(|m| m.eps_max)
        .unwrap_or_else(|| train_ds.eps_max());
    let mut model: Model<F> = Model::new(cfg, train_ds.grid, eps_max).map_err(artifact_error)?;
    let outcome = train(&mut model, &train_ds, &val_ds, tc, Some(out)).map_err(artifact_error)?;
    Ok((outcome.best_epoch, outcome.best_val_nmse))
}

fn cmd_train(a: TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let data = require(
        a.data.clone().or(file.get_string("data").map(PathBuf::from)),
        "data",
    )?;
    let val = require(
        a.val.clone().or(file.get_string("val").map(PathBuf::from)),
        "val",
    )?;
    let out = require(
        a.out.clone().or(file.get_string("out").map(PathBuf::from)),
        "out",
    )?;
    if !data.exists() {
        return Err(CliError::usage(format!(
            "training data '{}' does not exist",
            data.display()
        )));
    }
    if !val.exists() {
        return Err(CliError::usage(format!(
            "validation data '{}' does not exist",
            val.display()
        )));
    }
    let cfg = model_config_from(&a, file)?;
    let tc = train_config_from(&a, file)?;
    let precision = precision_of(&a.precision, file)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::usage(e.to_string()))?;

    let (best_epoch, best_val) = if precision == "f64" {
        run_train_typed::<f64>(cfg, &tc, &data, &val, &out)?
    } else {
        run_train_typed::<f32>(cfg, &tc, &data, &val, &out)?
    };

    let mut resolved = Resolved::new("train");
    resolved.push("data", data.display());
    resolved.push("val", val.display());
    resolved.push("out", out.display());
    resolved.push("channels", cfg.channels);
    resolved.push("layers", cfg.layers);
    resolved.push("modes_v", cfg.modes_v);
    resolved.push("modes_h", cfg.modes_h);
    resolved.push("groups", cfg.groups);
    resolved.push("conditioning", cfg.conditioning.as_str());
    resolved.push("lift_width", cfg.lift_width);
    resolved.push("model_seed", cfg.seed);
    resolved.push("epochs", tc.epochs);
    resolved.push("batch_size", tc.batch_size);
    resolved.push("lr", tc.lr);
    resolved.push("beta1", tc.betas.0);
    resolved.push("beta2", tc.betas.1);
    resolved.push("eps_opt", tc.eps_opt);
    resolved.push("weight_decay", tc.weight_decay);
    resolved.push("lr_min", tc.lr_min);
    resolved.push("train_seed", tc.seed);
    resolved.push("val_every", tc.val_every);
    resolved.push("val_untrained_only", tc.val_untrained_only);
    resolved.push("precision", &precision);
    resolved
        .write(&out.join("resolved.cfg"))
        .map_err(|e| CliError::usage(e.to_string()))?;

    println!(
        "training complete: best untrained-wavelength NMSE {best_val:.6} at epoch {best_epoch}; outputs in {}",
        out.display()
    );
    Ok(())
}

fn trained_set(
    trained: &Option<String>,
    trained_from: &Option<PathBuf>,
    file: &FileConfig,
) -> Result<Vec<f64>, CliError> {
    let trained = trained.clone().or(file.get_string("trained"));
    let trained_from = trained_from
        .clone()
        .or(file.get_string("trained_from").map(PathBuf::from));
    if let Some(list) = trained {
        return Ok(parse_list::<f64>(&list)?);
    }
    if let Some(path) = trained_from {
        let manifest_path = sidecar(&path, ".manifest");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            CliError::usage(format!(
                "cannot read manifest '{}': {e}",
                manifest_path.display()
            ))
        })?;
        let manifest = Manifest::parse(&text).map_err(|e| CliError::usage(e.to_string()))?;
        return Ok(manifest.schedule.points());
    }
    Err(CliError::usage(
        "need --trained <list> or --trained-from <dataset>",
    ))
}

fn print_aggregate(label: &str, agg: &eval::Aggregate, region: &str) {
    let (mean, std) = match region {
        "design" => (agg.mean_design, agg.std_design),
        _ => (agg.mean_all, agg.std_all),
    };
    println!("{label} mean_nmse={mean} std_nmse={std} n={}", agg.count);
}

fn run_eval_typed<F: Real>(a: &EvalArgs, file: &FileConfig) -> Result<(), CliError> {
    let ckpt = require(
        a.ckpt.clone().or(file.get_string("ckpt").map(PathBuf::from)),
        "ckpt",
    )?;
    let data = require(
        a.data.clone().or(file.get_string("data").map(PathBuf::from)),
        "data",
    )?;
    let out = require(
        a.out.clone().or(file.get_string("out").map(PathBuf::from)),
        "out",
    )?;
    let region = a
        .region
        .clone()
        .or(file.get_string("region"))
        .unwrap_or_else(|| "all".to_string());
    if region != "all" && region != "design" {
        return Err(CliError::usage("region must be 'all' or 'design'"));
    }
    let trained = trained_set(&a.trained, &a.trained_from, file)?;
    let model: Model<F> = checkpoint::load_checkpoint(&ckpt).map_err(artifact_error)?;
    let ds = read_dataset(&data).map_err(artifact_error)?;
    let report = eval::evaluate(&model, &ds, &trained, SPLIT_TOL).map_err(artifact_error)?;
    std::fs::write(&out, report.to_csv()).map_err(|e| CliError::usage(e.to_string()))?;
    print_aggregate("trained", &report.trained, &region);
    print_aggregate("untrained", &report.untrained, &region);

    let map_lambda = pick(a.map_lambda, file, "map_lambda")?;
    if let Some(target) = map_lambda {
        let sample = ds
            .samples
            .iter()
            .min_by(|x, y| {
                (x.lambda - target)
                    .abs()
                    .partial_cmp(&(y.lambda - target).abs())
                    .unwrap()
            })
            .ok_or_else(|| CliError::usage("dataset is empty"))?;
        let em = eval::error_map(&model, sample).map_err(artifact_error)?;
        let stem = out.with_extension("");
        let stem = PathBuf::from(format!("{}_map", stem.display()));
        eval::save_error_map(&em, &stem).map_err(|e| CliError::usage(e.to_string()))?;
        println!(
            "error map at {:.1} nm: max {} at ({}, {})",
            sample.lambda * 1e9,
            em.max_err,
            em.max_pos.0,
            em.max_pos.1
        );
    }

    let mut resolved = Resolved::new("eval");
    resolved.push("ckpt", ckpt.display());
    resolved.push("data", data.display());
    resolved.push("region", &region);
    resolved.push(
        "trained",
        trained
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    resolved.push("out", out.display());
    if let Some(v) = map_lambda {
        resolved.push("map_lambda", v);
    }
    resolved
        .write(&sidecar(&out, ".resolved.cfg"))
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, file: &FileConfig) -> Result<(), CliError> {
    match precision_of(&a.precision, file)?.as_str() {
        "f64" => run_eval_typed::<f64>(&a, file),
        _ => run_eval_typed::<f32>(&a, file),
    }
}

fn run_sweep_typed<F: Real>(a: &SweepArgs, file: &FileConfig) -> Result<(), CliError> {
    let ckpt = require(
        a.ckpt.clone().or(file.get_string("ckpt").map(PathBuf::from)),
        "ckpt",
    )?;
    let data = require(
        a.data.clone().or(file.get_string("data").map(PathBuf::from)),
        "data",
    )?;
    let out = require(
        a.out.clone().or(file.get_string("out").map(PathBuf::from)),
        "out",
    )?;
    let trained = trained_set(&a.trained, &a.trained_from, file)?;
    let model: Model<F> = checkpoint::load_checkpoint(&ckpt).map_err(artifact_error)?;
    let ds = read_dataset(&data).map_err(artifact_error)?;
    let rows = eval::sweep(&model, &ds, &trained, SPLIT_TOL).map_err(|e| match e {
        CoreError::InvalidArg(msg) if msg.contains("fixed structures") => CliError {
            code: EXIT_INCOMPATIBLE,
            msg,
        },
        other => artifact_error(other),
    })?;
    std::fs::write(&out, eval::sweep_csv(&rows)).map_err(|e| CliError::usage(e.to_string()))?;
    println!(
        "sweep over {} wavelengths ({} trained markers) written to {}",
        rows.len(),
        rows.iter().filter(|r| r.trained).count(),
        out.display()
    );
    let mut resolved = Resolved::new("sweep");
    resolved.push("ckpt", ckpt.display());
    resolved.push("data", data.display());
    resolved.push(
        "trained",
        trained
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    resolved.push("out", out.display());
    resolved
        .write(&sidecar(&out, ".resolved.cfg"))
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs, file: &FileConfig) -> Result<(), CliError> {
    match precision_of(&a.precision, file)?.as_str() {
        "f64" => run_sweep_typed::<f64>(&a, file),
        _ => run_sweep_typed::<f32>(&a, file),
    }
}

fn run_bench_typed<F: Real>(a: &BenchArgs, file: &FileConfig) -> Result<(), CliError> {
    let ckpt = require(
        a.ckpt.clone().or(file.get_string("ckpt").map(PathBuf::from)),
        "ckpt",
    )?;
    let batches_str = a
        .batch
        .clone()
        .or(file.get_string("batches"))
        .unwrap_or_else(|| "1,32".to_string());
    let batches: Vec<usize> = parse_list(&batches_str)?;
    let trials = pick(a.trials, file, "trials")?.unwrap_or(20);
    let lambda = pick(a.lambda, file, "lambda")?.unwrap_or(500e-9);
    let scene_kind = match a.scene.clone().or(file.get_string("scene")) {
        None => SceneKind::Waveguide,
        Some(s) => SceneKind::parse(&s).map_err(|e| CliError::usage(e.to_string()))?,
    };
    let seed = pick(a.seed, file, "seed")?.unwrap_or(0);
    let out = require(
        a.out.clone().or(file.get_string("out").map(PathBuf::from)),
        "out",
    )?;

    let model: Model<F> = checkpoint::load_checkpoint(&ckpt).map_err(artifact_error)?;
    let scene = SceneParams::new(scene_kind, model.grid, seed);
    let eps = broadwave_core::scenes::generate(&scene).map_err(|e| CliError::usage(e.to_string()))?;
    let pml = PmlSpec::default();
    let result =
        eval::bench(&model, &eps, lambda, &pml, &batches, trials).map_err(artifact_error)?;
    let text = result.to_text();
    std::fs::write(&out, &text).map_err(|e| CliError::usage(e.to_string()))?;
    print!("{text}");
    let mut resolved = Resolved::new("bench");
    resolved.push("ckpt", ckpt.display());
    resolved.push("batches", &batches_str);
    resolved.push("trials", trials);
    resolved.push("lambda", lambda);
    resolved.push("scene", scene_kind.as_str());
    resolved.push("seed", seed);
    resolved.push("out", out.display());
    resolved
        .write(&sidecar(&out, ".resolved.cfg"))
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(())
}

fn cmd_bench(a: BenchArgs, file: &FileConfig) -> Result<(), CliError> {
    match precision_of(&a.precision, file)?.as_str() {
        "f64" => run_bench_typed::<f64>(&a, file),
        _ => run_bench_typed::<f32>(&a, file),
    }
}

fn dump_prior_channels(
    prior: &broadwave_core::WavePrior,
    dir: &Path,
    prefix: &str,
) -> Result<(), CliError> {
    use ndarray::Array2;
    let io = |e: CoreError| CliError::usage(e.to_string());
    let (nx, nz) = (prior.grid.nx, prior.grid.nz);
    let channel = |f: &dyn Fn(usize, usize) -> f64| -> Array2<f64> {
        Array2::from_shape_fn((nx, nz), |(i, k)| f(i, k))
    };
    let parts: Vec<(&str, Array2<f64>)> = vec![
        ("wx_real", channel(&|i, k| prior.wx[[i, k]].re)),
        ("wx_imag", channel(&|i, k| prior.wx[[i, k]].im)),
        ("wz_real", channel(&|i, k| prior.wz[[i, k]].re)),
        ("wz_imag", channel(&|i, k| prior.wz[[i, k]].im)),
        ("wx_phase", channel(&|i, k| prior.wx[[i, k]].arg())),
        ("wz_phase", channel(&|i, k| prior.wz[[i, k]].arg())),
    ];
    for (name, data) in &parts {
        broadwave_core::pgm::write_pgm(&dir.join(format!("{prefix}{name}.pgm")), data)
            .map_err(io)?;
        broadwave_core::pgm::write_f32_raw(&dir.join(format!("{prefix}{name}.f32")), data)
            .map_err(io)?;
    }
    Ok(())
}

fn cmd_prior(a: PriorArgs, file: &FileConfig) -> Result<(), CliError> {
    let lambda = require(pick(a.lambda, file, "lambda")?, "lambda")?;
    let grid_str = require(a.grid.or(file.get_string("grid")), "grid")?;
    let (nx, nz) = parse_grid(&grid_str)?;
    let dl = require(pick(a.dl, file, "dl")?, "dl")?;
    let dl_z = pick(a.dl_z, file, "dl_z")?.unwrap_or(dl);
    let out = a
        .out
        .or(file.get_string("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| CliError::usage(e.to_string()))?;
    let grid = Grid2D::new(nx, nz, dl, dl_z).map_err(|e| CliError::usage(e.to_string()))?;
    let refined = refined_wave_prior(grid, lambda).map_err(|e| CliError::usage(e.to_string()))?;
    dump_prior_channels(&refined, &out, "prior_")?;

    let eps_from = a
        .eps_from
        .clone()
        .or(file.get_string("eps_from").map(PathBuf::from));
    if let Some(path) = eps_from {
        let ds = read_dataset(&path).map_err(artifact_error)?;
        let idx = pick(a.sample, file, "sample")?.unwrap_or(0);
        let sample = ds
            .samples
            .get(idx)
            .ok_or_else(|| CliError::usage(format!("sample index {idx} out of range")))?;
        let wp = wave_prior(&sample.eps, lambda).map_err(|e| CliError::usage(e.to_string()))?;
        dump_prior_channels(&wp, &out, "wave_prior_")?;
    }

    let mut resolved = Resolved::new("prior");
    resolved.push("lambda", lambda);
    resolved.push("grid", format!("{nx}x{nz}"));
    resolved.push("dl", dl);
    resolved.push("dl_z", dl_z);
    resolved.push("out", out.display());
    resolved
        .write(&out.join("resolved.cfg"))
        .map_err(|e| CliError::usage(e.to_string()))?;
    println!("prior channels written to {}", out.display());
    Ok(())
}
