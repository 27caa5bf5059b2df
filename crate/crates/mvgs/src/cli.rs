//! Command-line front end: scene generation, training, rendering, gradient
//! verification, the variance laboratory, and the occupancy benchmark.
//!
//! Every subcommand echoes its effective settings to
//! `<out>/resolved-config.txt` (sorted `key = value` lines) and exits 0 on
//! success, 1 when a computation or tolerance fails, and 2 on usage errors
//! (bad flags, bad config keys or values). All randomness flows from the
//! seed flags; at a fixed worker count, identical argv reproduce CSV outputs
//! byte for byte apart from wall-clock columns.

use crate::batchvar::{
    estimate_grad_variance, lemma1_experiment, BatchError, BatchStrategy, LemmaOneSetup,
    MiniBatchSpec,
};
use crate::config::{resolved_train_config, train_settings, ConfigError, ConfigMap};
use crate::gradients::{gradcheck, CheckLoss, GradError};
use crate::io::{load_scene, read_ppm, save_scene, write_depth, write_ppm, IoError};
use crate::losses::LossError;
use crate::rasterizer::{
    occupancy_report, render, OccupancyReport, RasterSettings, RenderError, RenderMode, RenderPlan,
};
use crate::scene::{make_synthetic_sized, CameraLayout, Gaussian3D, SceneDataset};
use crate::trainer::{self, adc_csv, metrics_csv, Checkpoint, TrainError};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug)]
enum CliError {
    /// Bad flags, files, or config keys/values: exit 2.
    Usage(String),
    /// A computation, tolerance, or file operation failed: exit 1.
    Failed(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<BatchError> for CliError {
    fn from(e: BatchError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<GradError> for CliError {
    fn from(e: GradError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Failed(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mvgs", about = "Multi-view mini-batch 3D gaussian splat training on the CPU")]
struct Cli {
    /// Cap the worker pool (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: scene file, ground-truth PPMs, depth grids.
    MakeSynthetic(MakeSyntheticArgs),
    /// Optimize gaussians against a dataset directory.
    Train(TrainArgs),
    /// Render every view of a scene file to PPM images and depth grids.
    Render(RenderArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Monte-Carlo gradient-variance comparison of batching strategies.
    Variance(VarianceArgs),
    /// Sample-mean variance vs number of mixed distributions, MC vs closed form.
    Lemma1(Lemma1Args),
    /// Occupancy and wall-clock of the three scheduling modes.
    BenchOccupancy(BenchOccupancyArgs),
}

/// Parse argv, dispatch, and map errors to exit codes (0/1/2).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(workers) = cli.workers {
        // A pool may already exist when run() is called twice in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let result = match cli.command {
        Command::MakeSynthetic(args) => cmd_make_synthetic(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Render(args) => cmd_render(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Variance(args) => cmd_variance(&args),
        Command::Lemma1(args) => cmd_lemma1(&args),
        Command::BenchOccupancy(args) => cmd_bench_occupancy(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn write_echo(out: &Path, map: &ConfigMap) -> Result<()> {
    std::fs::write(out.join("resolved-config.txt"), map.render())?;
    Ok(())
}

fn view_name(v: usize, ext: &str) -> String {
    format!("view_{v:03}.{ext}")
}

fn depth_name(v: usize) -> String {
    format!("depth_{v:03}.txt")
}

#[derive(Args)]
struct MakeSyntheticArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    gaussians: usize,
    #[arg(long, default_value_t = 8)]
    cameras: usize,
    /// Camera placement: orbit or random.
    #[arg(long, default_value = "orbit")]
    layout: String,
    #[arg(long, default_value_t = 64)]
    width: u32,
    #[arg(long, default_value_t = 64)]
    height: u32,
    #[arg(long, default_value_t = 16)]
    tile_size: u32,
    #[arg(long)]
    out: PathBuf,
}

fn parse_layout(s: &str) -> Result<CameraLayout> {
    match s {
        "orbit" => Ok(CameraLayout::Orbit),
        "random" => Ok(CameraLayout::Random),
        _ => Err(CliError::Usage(format!(
            "--layout must be orbit or random, got `{s}`"
        ))),
    }
}

fn cmd_make_synthetic(args: &MakeSyntheticArgs) -> Result<()> {
    let layout = parse_layout(&args.layout)?;
    let (gaussians, cameras) = make_synthetic_sized(
        args.seed,
        args.gaussians,
        args.cameras,
        layout,
        args.width,
        args.height,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(&args.out)?;
    save_scene(&gaussians, &cameras, &args.out.join("scene.txt"))?;
    let settings = RasterSettings::default();
    for v in 0..cameras.len() {
        let plan = RenderPlan::full(v as u32, args.width, args.height, args.tile_size);
        let out = render(&plan, &gaussians, &cameras, &settings)?;
        write_ppm(&out.image(0), &args.out.join(view_name(v, "ppm")))?;
        let depth: Vec<f64> = (0..plan.width * plan.height)
            .map(|px| out.depth(0, px as usize))
            .collect();
        write_depth(&depth, args.width, args.height, &args.out.join(depth_name(v)))?;
    }
    let mut echo = ConfigMap::default();
    echo.set("cameras", &args.cameras.to_string());
    echo.set("gaussians", &args.gaussians.to_string());
    echo.set("height", &args.height.to_string());
    echo.set("layout", &args.layout);
    echo.set("seed", &args.seed.to_string());
    echo.set("tile_size", &args.tile_size.to_string());
    echo.set("width", &args.width.to_string());
    write_echo(&args.out, &echo)?;
    println!(
        "wrote {} gaussians, {} views to {}",
        gaussians.len(),
        cameras.len(),
        args.out.display()
    );
    Ok(())
}

/// Scene file plus one ground-truth PPM per camera, as `make-synthetic`
/// lays them out.
fn load_dataset(dir: &Path) -> Result<(Vec<Gaussian3D>, SceneDataset)> {
    let scene = load_scene(&dir.join("scene.txt"))?;
    let mut images = Vec::with_capacity(scene.cameras.len());
    for (v, cam) in scene.cameras.iter().enumerate() {
        let img = read_ppm(&dir.join(view_name(v, "ppm")))?;
        if img.width != cam.width || img.height != cam.height {
            return Err(CliError::Failed(format!(
                "{}: image is {}x{} but camera {v} expects {}x{}",
                dir.join(view_name(v, "ppm")).display(),
                img.width,
                img.height,
                cam.width,
                cam.height
            )));
        }
        images.push(img);
    }
    let dataset = SceneDataset {
        cameras: scene.cameras,
        images,
        name: dir.display().to_string(),
    };
    Ok((scene.gaussians, dataset))
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (scene.txt plus view_NNN.ppm images).
    #[arg(long)]
    data: PathBuf,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set batch.strategy=multi_view.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint file instead of a fresh init.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut map = match &args.config {
        Some(path) => ConfigMap::from_file(path)?,
        None => ConfigMap::default(),
    };
    for pair in &args.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`"))
        })?;
        map.set(key.trim(), value.trim());
    }
    if let Some(seed) = args.seed {
        map.set("seed", &seed.to_string());
    }
    let mut settings = train_settings(&map)?;
    if settings.checkpoint_every > 0 {
        let k = settings.checkpoint_every;
        settings.train.checkpoint_at = (1..=settings.train.iterations / k).map(|i| i * k).collect();
    }
    std::fs::create_dir_all(&args.out)?;
    write_echo(&args.out, &resolved_train_config(&settings))?;

    let (_, dataset) = load_dataset(&args.data)?;
    let result = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            trainer::resume(&settings.train, &dataset, &ckpt)?
        }
        None => {
            let init = make_synthetic_sized(
                settings.train.seed,
                settings.init_gaussians,
                2,
                CameraLayout::Orbit,
                dataset.cameras[0].width,
                dataset.cameras[0].height,
            )
            .map_err(|e| CliError::Usage(e.to_string()))?
            .0;
            trainer::train(&settings.train, &dataset, init)?
        }
    };

    std::fs::write(args.out.join("metrics.csv"), metrics_csv(&result.history))?;
    std::fs::write(args.out.join("adc.csv"), adc_csv(&result.adc_events))?;
    save_scene(&result.gaussians, &dataset.cameras, &args.out.join("trained.txt"))?;
    for ckpt in &result.checkpoints {
        ckpt.save(&args.out.join(format!("checkpoint_{:06}.ckpt", ckpt.iteration)))?;
    }
    for row in &result.history {
        println!(
            "iter {:>6}  loss {:.6}  psnr {:.2}  ssim {:.4}  gaussians {}",
            row.iter, row.loss, row.psnr, row.ssim, row.n_gauss
        );
    }
    Ok(())
}

#[derive(Args)]
struct RenderArgs {
    /// Scene file (gaussians + cameras).
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 16)]
    tile_size: u32,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    std::fs::create_dir_all(&args.out)?;
    let settings = RasterSettings::default();
    for (v, cam) in scene.cameras.iter().enumerate() {
        let plan = RenderPlan::full(v as u32, cam.width, cam.height, args.tile_size);
        let out = render(&plan, &scene.gaussians, &scene.cameras, &settings)?;
        write_ppm(&out.image(0), &args.out.join(view_name(v, "ppm")))?;
        let depth: Vec<f64> = (0..plan.width * plan.height)
            .map(|px| out.depth(0, px as usize))
            .collect();
        write_depth(&depth, cam.width, cam.height, &args.out.join(depth_name(v)))?;
    }
    let mut echo = ConfigMap::default();
    echo.set("scene", &args.scene.display().to_string());
    echo.set("tile_size", &args.tile_size.to_string());
    write_echo(&args.out, &echo)?;
    println!("rendered {} views to {}", scene.cameras.len(), args.out.display());
    Ok(())
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check this many consecutive seeds.
    #[arg(long, default_value_t = 1)]
    runs: u64,
    #[arg(long, default_value_t = 6)]
    gaussians: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 8)]
    size: u32,
    /// l1, l2, dssim, dssim3d, mix, depth_l1, or all.
    #[arg(long, default_value = "all")]
    loss: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let losses: Vec<CheckLoss> = if args.loss == "all" {
        ["l1", "l2", "dssim", "dssim3d", "mix", "depth_l1"]
            .iter()
            .map(|s| CheckLoss::parse(s).unwrap())
            .collect()
    } else {
        vec![CheckLoss::parse(&args.loss).ok_or_else(|| {
            CliError::Usage(format!(
                "--loss must be l1, l2, dssim, dssim3d, mix, depth_l1, or all; got `{}`",
                args.loss
            ))
        })?]
    };
    std::fs::create_dir_all(&args.out)?;
    let mut echo = ConfigMap::default();
    echo.set("gaussians", &args.gaussians.to_string());
    echo.set("loss", &args.loss);
    echo.set("runs", &args.runs.to_string());
    echo.set("seed", &args.seed.to_string());
    echo.set("size", &args.size.to_string());
    write_echo(&args.out, &echo)?;

    let mut worst_failure: Option<crate::gradients::GradCheckReport> = None;
    for run in 0..args.runs {
        let seed = args.seed + run;
        for &loss in &losses {
            let report = gradcheck(seed, args.gaussians, args.size, loss);
            println!(
                "gradcheck seed={seed} loss={} checked={} worst_rel={:.3e} worst_abs={:.3e} param={} {}",
                loss.name(),
                report.checked,
                report.worst_rel,
                report.worst_abs,
                report.worst_param,
                if report.passed { "pass" } else { "FAIL" }
            );
            if !report.passed
                && worst_failure
                    .as_ref()
                    .map_or(true, |w| report.worst_rel > w.worst_rel)
            {
                worst_failure = Some(report);
            }
        }
    }
    match worst_failure {
        None => Ok(()),
        Some(w) => Err(CliError::Failed(format!(
            "gradient check failed: worst parameter {} (loss {}, rel err {:.3e}, abs err {:.3e})",
            w.worst_param,
            w.loss.name(),
            w.worst_rel,
            w.worst_abs
        ))),
    }
}

#[derive(Args)]
struct VarianceArgs {
    /// Dataset directory (scene.txt plus view_NNN.ppm images).
    #[arg(long)]
    data: PathBuf,
    /// Measure at a checkpoint's gaussians instead of the scene file's.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// single_view, multi_view, or both.
    #[arg(long, default_value = "both")]
    strategy: String,
    /// Views per multi-view batch.
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Pixel budget per multi-view batch (0 = one full image).
    #[arg(long, default_value_t = 0)]
    pixels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    tile_size: u32,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_variance(args: &VarianceArgs) -> Result<()> {
    let strategies: Vec<BatchStrategy> = match args.strategy.as_str() {
        "both" => vec![BatchStrategy::SingleView, BatchStrategy::MultiView],
        s => vec![BatchStrategy::parse(s).ok_or_else(|| {
            CliError::Usage(format!(
                "--strategy must be single_view, multi_view, or both; got `{s}`"
            ))
        })?],
    };
    let (mut gaussians, dataset) = load_dataset(&args.data)?;
    if let Some(path) = &args.checkpoint {
        gaussians = Checkpoint::load(path)?.gaussians;
    }
    let budget = if args.pixels == 0 {
        (dataset.cameras[0].width * dataset.cameras[0].height) as usize
    } else {
        args.pixels
    };
    std::fs::create_dir_all(&args.out)?;
    let mut echo = ConfigMap::default();
    echo.set("pixels", &budget.to_string());
    echo.set("samples", &args.samples.to_string());
    echo.set("seed", &args.seed.to_string());
    echo.set("strategy", &args.strategy);
    echo.set("tile_size", &args.tile_size.to_string());
    echo.set("views", &args.views.to_string());
    write_echo(&args.out, &echo)?;

    let settings = RasterSettings::default();
    let mut csv = String::from("strategy,B,seed,n_samples,variance\n");
    for strategy in strategies {
        let spec = match strategy {
            BatchStrategy::SingleView => MiniBatchSpec::single_view(args.seed),
            BatchStrategy::MultiView => MiniBatchSpec::multi_view(args.views, budget, args.seed),
        };
        let report = estimate_grad_variance(
            &gaussians,
            &dataset.cameras,
            &dataset.images,
            &spec,
            &settings,
            args.samples,
        )?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            strategy.name(),
            report.views_per_batch,
            args.seed,
            report.n_samples,
            report.variance
        );
        println!(
            "variance strategy={} B={} samples={} variance={:.6e}",
            strategy.name(),
            report.views_per_batch,
            report.n_samples,
            report.variance
        );
    }
    std::fs::write(args.out.join("variance.csv"), csv)?;
    Ok(())
}

#[derive(Args)]
struct Lemma1Args {
    /// Number of distributions N.
    #[arg(long, default_value_t = 6)]
    n: usize,
    /// Balanced per-distribution sample count K (budget = N·K).
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Comma-separated m values (default: every m dividing N·K).
    #[arg(long)]
    ms: Option<String>,
    #[arg(long, default_value_t = 20000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_lemma1(args: &Lemma1Args) -> Result<()> {
    if args.n < 2 || args.k < 1 {
        return Err(CliError::Usage(format!(
            "--n must be at least 2 and --k at least 1, got n={} k={}",
            args.n, args.k
        )));
    }
    let ms: Vec<usize> = match &args.ms {
        Some(list) => list
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("--ms: bad integer `{t}`")))
            })
            .collect::<Result<_>>()?,
        None => (1..=args.n).filter(|m| (args.n * args.k) % m == 0).collect(),
    };
    // Deterministic two-point setup: distinct means, moderate spreads.
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let means: Vec<f64> = (0..args.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let variances: Vec<f64> = (0..args.n)
        .map(|_| {
            let sigma: f64 = rng.gen_range(0.1..0.5);
            sigma * sigma
        })
        .collect();
    let setup = LemmaOneSetup::new(means, variances, args.k)?;
    let rows = lemma1_experiment(&setup, &ms, args.trials, args.seed)?;

    std::fs::create_dir_all(&args.out)?;
    let mut echo = ConfigMap::default();
    echo.set("k", &args.k.to_string());
    echo.set(
        "ms",
        &ms.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
    );
    echo.set("n", &args.n.to_string());
    echo.set("seed", &args.seed.to_string());
    echo.set("trials", &args.trials.to_string());
    write_echo(&args.out, &echo)?;

    let mut csv = String::from("m,var_mc,var_exact,ci_half\n");
    for row in &rows {
        let exact = row.var_exact.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{}", row.m, row.var_mc, exact, row.ci_half);
        println!(
            "lemma1 m={} var_mc={:.6e} var_exact={} ci_half={:.2e}",
            row.m,
            row.var_mc,
            row.var_exact.map_or("n/a".into(), |v| format!("{v:.6e}")),
            row.ci_half
        );
    }
    std::fs::write(args.out.join("lemma1.csv"), csv)?;
    Ok(())
}

#[derive(Args)]
struct BenchOccupancyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 150)]
    gaussians: usize,
    #[arg(long, default_value_t = 8)]
    cameras: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long, default_value_t = 16)]
    tile_size: u32,
    /// Views per multi-view batch.
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Timing repeats; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_bench_occupancy(args: &BenchOccupancyArgs) -> Result<()> {
    let (gaussians, cameras) = make_synthetic_sized(
        args.seed,
        args.gaussians,
        args.cameras,
        CameraLayout::Orbit,
        args.size,
        args.size,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let settings = RasterSettings::default();
    let budget = (args.size * args.size) as usize;
    let spec = MiniBatchSpec::multi_view(args.views, budget, args.seed);
    let batch_plan = crate::batchvar::sample_batch(&spec, &cameras, args.tile_size, 0)?;

    // (label, views column, plans rendered back to back per measurement)
    let full_single = vec![RenderPlan::full(0, args.size, args.size, args.tile_size)];
    let full_b: Vec<RenderPlan> = (0..args.views as u32)
        .map(|v| RenderPlan::full(v, args.size, args.size, args.tile_size))
        .collect();
    let naive = vec![batch_plan.clone().with_mode(RenderMode::NaiveMasked)];
    let efficient = vec![batch_plan.with_mode(RenderMode::ThreadEfficient)];
    let cases: [(&str, usize, &[RenderPlan]); 4] = [
        ("full", 1, &full_single),
        ("full", args.views, &full_b),
        ("naive_masked", args.views, &naive),
        ("thread_efficient", args.views, &efficient),
    ];

    std::fs::create_dir_all(&args.out)?;
    let mut echo = ConfigMap::default();
    echo.set("cameras", &args.cameras.to_string());
    echo.set("gaussians", &args.gaussians.to_string());
    echo.set("repeat", &args.repeat.to_string());
    echo.set("seed", &args.seed.to_string());
    echo.set("size", &args.size.to_string());
    echo.set("tile_size", &args.tile_size.to_string());
    echo.set("views", &args.views.to_string());
    write_echo(&args.out, &echo)?;

    let mut csv =
        String::from("mode,views,tile_size,threads_launched,threads_active,occupancy,wall_ms\n");
    for (label, views, plans) in cases {
        let mut best_ms = f64::INFINITY;
        let mut reports: Vec<OccupancyReport> = Vec::new();
        for _ in 0..args.repeat.max(1) {
            let mut ms = 0.0;
            reports.clear();
            for plan in plans {
                let out = render(plan, &gaussians, &cameras, &settings)?;
                let report = occupancy_report(&out);
                ms += report.wall_ms;
                reports.push(report);
            }
            best_ms = best_ms.min(ms);
        }
        let launched: u64 = reports.iter().map(|r| r.threads_launched).sum();
        let active: u64 = reports.iter().map(|r| r.threads_active).sum();
        let occupancy = if launched == 0 {
            1.0
        } else {
            active as f64 / launched as f64
        };
        let _ = writeln!(
            csv,
            "{label},{views},{},{launched},{active},{occupancy},{best_ms:.3}",
            args.tile_size
        );
        println!(
            "bench mode={label} views={views} occupancy={occupancy:.4} wall_ms={best_ms:.3}"
        );
    }
    std::fs::write(args.out.join("occupancy.csv"), csv)?;
    Ok(())
}
