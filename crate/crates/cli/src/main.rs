//! Command-line driver for the lifting pipeline: scene generation, training,
//! rendering, lifting, evaluation, mode ablations and feature visualization.
//!
//! Every subcommand is reproducible from its flags: with `--threads 1` and a
//! fixed `--seed`, repeated runs produce bit-identical outputs. Each run
//! writes its fully resolved configuration as `run_config.json` into the
//! output directory. Logging goes to stderr, controlled by the `LIFT3D_LOG`
//! environment variable (`error`, `info` or `debug`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lift3d_core::autodiff::ParamStore;
use lift3d_core::eval::{
    baseline_2d, consistency_of_maps, decode_rendered, evaluate_scene, lift_view, nearest_views,
    pca_viz, BaselineReport, ModeReport,
};
use lift3d_core::geometry::Camera;
use lift3d_core::operators::{make_operator, ViewInput, VisionOperator};
use lift3d_core::renderer::{render_view, RenderConfig, RenderMode, SourcePrepared};
use lift3d_core::scenes::{
    build_scene, load_cached_features, load_scene, near_far, save_scene, view_seed, RenderedScene,
};
use lift3d_core::tensorio::{read_tensor, write_tensor, CameraRecord};
use lift3d_core::training::{train, TrainConfig, TrainPool};
use lift3d_core::Tensor;

#[derive(Parser)]
#[command(
    name = "lift3d",
    version,
    about = "Lift per-view 2D vision operator outputs into view-consistent 3D predictions"
)]
struct Cli {
    /// Worker threads. 1 guarantees bit-reproducible output; more threads
    /// parallelize over rays and may change floating-point reduction order.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view scene directory, optionally caching
    /// operator encodings of every view.
    GenScene(GenSceneArgs),
    /// Optimize pipeline parameters on a directory of scenes.
    Train(TrainArgs),
    /// Render one target view (by index or camera file) from a checkpoint.
    Render(RenderArgs),
    /// Lift an operator across target views: render each view's features,
    /// decode them, and report cross-view consistency.
    Lift(LiftArgs),
    /// Score lifted renders per mode, optionally against the per-view 2D
    /// baseline, into a JSON report.
    Eval(EvalArgs),
    /// Compare render modes by feature error on one scene.
    Ablate(AblateArgs),
    /// Project a feature tensor onto its top principal components as a PNG.
    VizPca(VizPcaArgs),
}

// ---------------------------------------------------------------------------
// flag groups

/// Ray sampling flags shared by every rendering subcommand.
#[derive(Args, Serialize, Clone)]
struct SamplingFlags {
    /// Stratified samples per ray in the coarse pass.
    #[arg(long, default_value_t = 64)]
    n_coarse: usize,
    /// Importance samples per ray in the fine pass.
    #[arg(long, default_value_t = 128)]
    n_fine: usize,
    /// Fine pass decodes "merged" coarse+importance samples or "fine_only".
    #[arg(long, default_value = "merged")]
    fine_pass: String,
    /// Source-map interpolation: "bilinear" or "nearest".
    #[arg(long, default_value = "bilinear")]
    fetch: String,
}

impl SamplingFlags {
    fn to_config(&self, mode: &str) -> Result<RenderConfig> {
        Ok(RenderConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            mode: mode.parse()?,
            fine_pass: self.fine_pass.parse()?,
            fetch: self.fetch.parse()?,
            ..RenderConfig::default()
        })
    }
}

#[derive(Args, Serialize)]
struct GenSceneArgs {
    /// Scene seed; fully determines geometry, cameras and renders.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of rig views.
    #[arg(long, default_value_t = 16)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Operators whose per-view encodings are cached into the scene dir.
    #[arg(long, value_delimiter = ',')]
    operators: Vec<String>,
    /// Seed of the operator instances used for cached encodings.
    #[arg(long, default_value_t = 0)]
    op_seed: u64,
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Directory whose subdirectories each hold one scene (manifest.json).
    #[arg(long)]
    scenes: PathBuf,
    /// Operators to train on; cached features are used when present.
    #[arg(long, value_delimiter = ',', default_value = "colorquant,gradfeat")]
    operators: Vec<String>,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of operator instances when encoding features on demand.
    #[arg(long, default_value_t = 0)]
    op_seed: u64,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 2048)]
    rays_per_step: usize,
    #[arg(long, default_value_t = 8)]
    sources_min: usize,
    #[arg(long, default_value_t = 12)]
    sources_max: usize,
    #[arg(long, default_value_t = 3)]
    pool_k_max: usize,
    /// Peak Adam learning rate, cosine-annealed.
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    lr_final_frac: f64,
    /// Feature-loss weight; defaults to one over the feature width.
    #[arg(long)]
    lambda_feat: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: usize,
    /// Render mode used during training.
    #[arg(long, default_value = "full")]
    mode: String,
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Args, Serialize)]
struct RenderArgs {
    /// Scene directory.
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Operator whose features are lifted and decoded.
    #[arg(long)]
    operator: String,
    /// Target: a view index, or a path to a camera JSON file.
    #[arg(long)]
    target_view: String,
    /// Number of nearest source views.
    #[arg(long, default_value_t = 8)]
    sources: usize,
    /// Ray sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    op_seed: u64,
    #[arg(long, default_value = "full")]
    mode: String,
    #[command(flatten)]
    sampling: SamplingFlags,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct LiftArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    operator: String,
    #[arg(long)]
    checkpoint: PathBuf,
    /// "all" or a comma-separated list of view indices.
    #[arg(long, default_value = "all")]
    targets: String,
    #[arg(long, default_value_t = 8)]
    sources: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    op_seed: u64,
    #[arg(long, default_value = "full")]
    mode: String,
    #[command(flatten)]
    sampling: SamplingFlags,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    operator: String,
    /// "all" or a comma-separated subset of
    /// full,no_correction,single_stage,predict.
    #[arg(long, default_value = "all")]
    modes: String,
    /// Also score the per-view 2D baseline through the same metrics.
    #[arg(long, default_value_t = false)]
    baseline_2d: bool,
    /// "all" or a comma-separated list of view indices.
    #[arg(long, default_value = "all")]
    targets: String,
    #[arg(long, default_value_t = 8)]
    sources: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    op_seed: u64,
    #[command(flatten)]
    sampling: SamplingFlags,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    operator: String,
    /// "all" or a comma-separated subset of modes.
    #[arg(long, default_value = "all")]
    modes: String,
    #[arg(long, default_value = "all")]
    targets: String,
    #[arg(long, default_value_t = 8)]
    sources: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    op_seed: u64,
    #[command(flatten)]
    sampling: SamplingFlags,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct VizPcaArgs {
    /// Feature tensor file ([H, W, D], f32).
    #[arg(long)]
    input: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// entry

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LIFT3D_LOG", "error"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    ensure!(cli.threads >= 1, "--threads must be at least 1");
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("building the thread pool")?;
    let threads = cli.threads;
    match cli.command {
        Command::GenScene(a) => run_gen_scene(a, threads),
        Command::Train(a) => run_train(a, threads),
        Command::Render(a) => run_render(a, threads),
        Command::Lift(a) => run_lift(a, threads),
        Command::Eval(a) => run_eval(a, threads),
        Command::Ablate(a) => run_ablate(a, threads),
        Command::VizPca(a) => run_viz_pca(a, threads),
    }
}

// ---------------------------------------------------------------------------
// subcommands

fn run_gen_scene(a: GenSceneArgs, threads: usize) -> Result<()> {
    ensure!(a.views >= 2, "a scene needs at least 2 views");
    let (_, mut scene) = build_scene(a.seed, a.views, a.width, a.height);
    let mut features = BTreeMap::new();
    for id in dedup(&a.operators) {
        let op = make_operator(&id, a.op_seed)?;
        log::info!("encoding {} views with {id}", scene.views.len());
        features.insert(id.clone(), encode_scene_views(&scene, op.as_ref()));
    }
    save_scene(&a.out, &mut scene, &features)?;
    write_run_config(&a.out, "gen-scene", &a, threads)?;
    println!(
        "wrote scene {} ({} views, {}x{}, operators: {}) to {}",
        scene.manifest.scene_id,
        scene.views.len(),
        a.width,
        a.height,
        if features.is_empty() {
            "none".to_string()
        } else {
            features.keys().cloned().collect::<Vec<_>>().join(",")
        },
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs, threads: usize) -> Result<()> {
    let dirs = scan_scene_dirs(&a.scenes)?;
    ensure!(
        !dirs.is_empty(),
        "no scene directories (manifest.json) under {}",
        a.scenes.display()
    );
    let operators = dedup(&a.operators);
    let mut scenes = Vec::with_capacity(dirs.len());
    for d in &dirs {
        scenes.push(load_scene(d).with_context(|| format!("loading scene {}", d.display()))?);
    }
    let mut feats = BTreeMap::new();
    for id in &operators {
        let per_scene: Vec<Vec<Tensor<f32>>> = dirs
            .iter()
            .zip(&scenes)
            .map(|(d, s)| features_for(d, s, id, a.op_seed))
            .collect::<Result<_>>()?;
        feats.insert(id.clone(), per_scene);
    }
    let pool = TrainPool { scenes, feats };
    let config = TrainConfig {
        seed: a.seed,
        steps: a.steps,
        rays_per_step: a.rays_per_step,
        sources_min: a.sources_min,
        sources_max: a.sources_max,
        pool_k_max: a.pool_k_max,
        lr: a.lr,
        lr_final_frac: a.lr_final_frac,
        lambda_feat: a
            .lambda_feat
            .unwrap_or_else(|| TrainConfig::default().lambda_feat),
        checkpoint_every: a.checkpoint_every,
        operators: operators.clone(),
        render: a.sampling.to_config(&a.mode)?,
    };
    write_run_config(&a.out, "train", &a, threads)?;
    log::info!(
        "training on {} scenes / operators {} for {} steps",
        pool.scenes.len(),
        operators.join(","),
        a.steps
    );
    let report = train(&pool, &config, &a.out, a.resume.as_deref())?;
    let last = report.logs.last().context("no training steps ran")?;
    println!(
        "trained through step {} of {} (rgb_loss {:.6}, feat_loss {:.6}); final checkpoint {}",
        last.step + 1,
        a.steps,
        last.rgb_loss,
        last.feat_loss,
        report.final_checkpoint.display()
    );
    Ok(())
}

fn run_render(a: RenderArgs, threads: usize) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let store: ParamStore<f32> = ParamStore::load(&a.checkpoint)?;
    let op = make_operator(&a.operator, a.op_seed)?;
    let feats = features_for(&a.scene, &scene, &a.operator, a.op_seed)?;
    let config = a.sampling.to_config(&a.mode)?;
    ensure!(a.sources >= 1, "--sources must be at least 1");

    let rendered = match a.target_view.parse::<usize>() {
        Ok(idx) => {
            ensure!(
                idx < scene.views.len(),
                "view index {idx} out of range (scene has {} views)",
                scene.views.len()
            );
            let src = nearest_views(&scene.cameras, idx, a.sources);
            lift_view(&store, &scene, &feats, &src, idx, &config, a.seed)
        }
        Err(_) => {
            let text = fs::read_to_string(&a.target_view)
                .with_context(|| format!("--target-view {}: not an index, and reading it as a camera file failed", a.target_view))?;
            let rec: CameraRecord = serde_json::from_str(&text)
                .with_context(|| format!("parsing camera file {}", a.target_view))?;
            let cam = Camera::from_record(&rec);
            let src = nearest_to_camera(&scene.cameras, &cam, a.sources);
            let sources: Vec<SourcePrepared<f32>> = src
                .iter()
                .map(|&i| SourcePrepared::new(&scene.cameras[i], &scene.views[i].rgb, &feats[i]))
                .collect();
            let (near, far) = near_far(scene.manifest.bound_radius);
            render_view(&store, &sources, &cam, near, far, &config, a.seed)
        }
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_run_config(&a.out, "render", &a, threads)?;
    save_png(&a.out.join("render.png"), &rendered.rgb)?;
    write_tensor(a.out.join("feat.lt3d"), &rendered.feat)?;
    let decoded = decode_rendered(op.as_ref(), &rendered);
    write_decoded(&a.out, "decoded", &decoded)?;
    println!(
        "rendered {}x{} view ({} mode, {} sources) to {}",
        rendered.rgb.dim(1),
        rendered.rgb.dim(0),
        a.mode,
        a.sources,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LiftReport {
    scene_id: String,
    operator_id: String,
    mode: String,
    targets: Vec<usize>,
    n_sources: usize,
    /// Cross-view RMSE of the lifted decoded outputs.
    lifted_rmse_short: Option<f64>,
    lifted_rmse_long: Option<f64>,
    /// Same metric for the operator's own per-view outputs.
    baseline_rmse_short: Option<f64>,
    baseline_rmse_long: Option<f64>,
}

fn run_lift(a: LiftArgs, threads: usize) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let store: ParamStore<f32> = ParamStore::load(&a.checkpoint)?;
    let op = make_operator(&a.operator, a.op_seed)?;
    let feats = features_for(&a.scene, &scene, &a.operator, a.op_seed)?;
    let config = a.sampling.to_config(&a.mode)?;
    let targets = parse_targets(&a.targets, scene.views.len())?;
    ensure!(a.sources >= 1, "--sources must be at least 1");

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_run_config(&a.out, "lift", &a, threads)?;

    let mut lifted_maps = Vec::with_capacity(targets.len());
    let mut baseline_maps = Vec::with_capacity(targets.len());
    for &t in &targets {
        let src = nearest_views(&scene.cameras, t, a.sources);
        let rendered = lift_view(&store, &scene, &feats, &src, t, &config, a.seed);
        let decoded = decode_rendered(op.as_ref(), &rendered);
        write_decoded(&a.out, &format!("decoded_{t:03}"), &decoded)?;
        lifted_maps.push(decoded.map);
        baseline_maps.push(op.decode(&feats[t]).map);
        log::info!("lifted view {t} from sources {src:?}");
    }
    let (lifted_short, lifted_long) = consistency_of_maps(&lifted_maps, &scene, &targets);
    let (base_short, base_long) = consistency_of_maps(&baseline_maps, &scene, &targets);
    let report = LiftReport {
        scene_id: scene.manifest.scene_id.clone(),
        operator_id: a.operator.clone(),
        mode: a.mode.clone(),
        targets: targets.clone(),
        n_sources: a.sources,
        lifted_rmse_short: lifted_short,
        lifted_rmse_long: lifted_long,
        baseline_rmse_short: base_short,
        baseline_rmse_long: base_long,
    };
    write_json(&a.out.join("report.json"), &report)?;
    println!(
        "lifted {} views with {}; consistency rmse short {} long {} (2D baseline {} / {}) -> {}",
        targets.len(),
        a.operator,
        fmt_opt(lifted_short),
        fmt_opt(lifted_long),
        fmt_opt(base_short),
        fmt_opt(base_long),
        a.out.join("report.json").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    scene_id: String,
    operator_id: String,
    targets: Vec<usize>,
    n_sources: usize,
    modes: Vec<ModeReport>,
    baseline_2d: Option<BaselineReport>,
}

fn run_eval(a: EvalArgs, threads: usize) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let store: ParamStore<f32> = ParamStore::load(&a.checkpoint)?;
    let op = make_operator(&a.operator, a.op_seed)?;
    let feats = features_for(&a.scene, &scene, &a.operator, a.op_seed)?;
    let modes = parse_modes(&a.modes)?;
    let targets = parse_targets(&a.targets, scene.views.len())?;
    ensure!(a.sources >= 1, "--sources must be at least 1");
    let config = a.sampling.to_config("full")?;

    let mode_reports = evaluate_scene(
        &store,
        &scene,
        op.as_ref(),
        &feats,
        &modes,
        &targets,
        a.sources,
        &config,
        a.seed,
    )?;
    let baseline = a
        .baseline_2d
        .then(|| baseline_2d(&scene, op.as_ref(), &feats, &targets));
    let report = EvalReport {
        scene_id: scene.manifest.scene_id.clone(),
        operator_id: a.operator.clone(),
        targets,
        n_sources: a.sources,
        modes: mode_reports,
        baseline_2d: baseline,
    };
    let out_dir = parent_dir(&a.out);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_run_config(&out_dir, "eval", &a, threads)?;
    write_json(&a.out, &report)?;
    for m in &report.modes {
        println!(
            "{:>13}: feature_mse {:.6} psnr {:.2} rmse short {} long {} iou {}",
            m.mode,
            m.feature_mse,
            m.psnr,
            fmt_opt(m.rmse_short),
            fmt_opt(m.rmse_long),
            fmt_opt(m.iou),
        );
    }
    if let Some(b) = &report.baseline_2d {
        println!(
            "  2D baseline: rmse short {} long {} iou {}",
            fmt_opt(b.rmse_short),
            fmt_opt(b.rmse_long),
            fmt_opt(b.iou),
        );
    }
    println!("report -> {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct AblateRow {
    mode: String,
    feature_mse: f64,
}

#[derive(Serialize)]
struct AblateReport {
    scene_id: String,
    operator_id: String,
    targets: Vec<usize>,
    n_sources: usize,
    rows: Vec<AblateRow>,
}

fn run_ablate(a: AblateArgs, threads: usize) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let store: ParamStore<f32> = ParamStore::load(&a.checkpoint)?;
    let op = make_operator(&a.operator, a.op_seed)?;
    let feats = features_for(&a.scene, &scene, &a.operator, a.op_seed)?;
    let modes = parse_modes(&a.modes)?;
    let targets = parse_targets(&a.targets, scene.views.len())?;
    ensure!(a.sources >= 1, "--sources must be at least 1");
    let config = a.sampling.to_config("full")?;

    let mode_reports = evaluate_scene(
        &store,
        &scene,
        op.as_ref(),
        &feats,
        &modes,
        &targets,
        a.sources,
        &config,
        a.seed,
    )?;
    let rows: Vec<AblateRow> = mode_reports
        .into_iter()
        .map(|m| AblateRow {
            mode: m.mode,
            feature_mse: m.feature_mse,
        })
        .collect();
    let report = AblateReport {
        scene_id: scene.manifest.scene_id.clone(),
        operator_id: a.operator.clone(),
        targets,
        n_sources: a.sources,
        rows,
    };
    let out_dir = parent_dir(&a.out);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_run_config(&out_dir, "ablate", &a, threads)?;
    write_json(&a.out, &report)?;
    for r in &report.rows {
        println!("{:>13}: feature_mse {:.6}", r.mode, r.feature_mse);
    }
    println!("report -> {}", a.out.display());
    Ok(())
}

fn run_viz_pca(a: VizPcaArgs, threads: usize) -> Result<()> {
    let feat: Tensor<f32> = read_tensor(&a.input)?;
    ensure!(
        feat.rank() == 3,
        "{}: expected a [H, W, D] tensor, got rank {}",
        a.input.display(),
        feat.rank()
    );
    let img = pca_viz(&feat);
    let out_dir = parent_dir(&a.out);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_run_config(&out_dir, "viz-pca", &a, threads)?;
    save_png(&a.out, &img)?;
    println!(
        "projected {}x{}x{} features -> {}",
        feat.dim(0),
        feat.dim(1),
        feat.dim(2),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared plumbing

/// First occurrence of each entry, preserving order.
fn dedup(ids: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for id in ids {
        if !out.contains(id) {
            out.push(id.clone());
        }
    }
    out
}

/// Subdirectories of `dir` that contain a scene manifest, sorted by name.
fn scan_scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(lift3d_core::tensorio::MANIFEST_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for entry in entries {
        let path = entry.with_context(|| format!("reading {}", dir.display()))?.path();
        if path.join(lift3d_core::tensorio::MANIFEST_FILE).is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn encode_scene_views(scene: &RenderedScene, op: &dyn VisionOperator) -> Vec<Tensor<f32>> {
    scene
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let input = ViewInput::new(&v.rgb, &v.labels);
            op.encode(&input, view_seed(scene.manifest.seed, i))
        })
        .collect()
}

/// Per-view feature maps for one operator: the scene's cached tensors when
/// the manifest lists them, otherwise encoded on demand.
fn features_for(
    scene_dir: &Path,
    scene: &RenderedScene,
    operator_id: &str,
    op_seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    let cached = scene
        .manifest
        .views
        .iter()
        .all(|v| v.features.contains_key(operator_id));
    if cached {
        log::info!(
            "using cached {operator_id} features from {}",
            scene_dir.display()
        );
        Ok(load_cached_features(scene_dir, &scene.manifest, operator_id)?)
    } else {
        log::info!(
            "no cached {operator_id} features in {}; encoding on demand",
            scene_dir.display()
        );
        let op = make_operator(operator_id, op_seed)?;
        Ok(encode_scene_views(scene, op.as_ref()))
    }
}

/// Source views ranked by camera-center distance to an arbitrary camera.
fn nearest_to_camera(cameras: &[Camera], target: &Camera, count: usize) -> Vec<usize> {
    let c0 = target.center();
    let mut order: Vec<usize> = (0..cameras.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (cameras[a].center() - c0).norm();
        let db = (cameras[b].center() - c0).norm();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    order.truncate(count);
    order
}

fn parse_targets(spec: &str, n_views: usize) -> Result<Vec<usize>> {
    let list: Vec<usize> = if spec == "all" {
        (0..n_views).collect()
    } else {
        spec.split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .with_context(|| format!("--targets entry '{t}' is not a view index"))
            })
            .collect::<Result<_>>()?
    };
    ensure!(!list.is_empty(), "--targets selected no views");
    for &t in &list {
        ensure!(
            t < n_views,
            "target view {t} out of range (scene has {n_views} views)"
        );
    }
    Ok(list)
}

fn parse_modes(spec: &str) -> Result<Vec<RenderMode>> {
    if spec == "all" {
        return Ok(RenderMode::ALL.to_vec());
    }
    let modes: Vec<RenderMode> = spec
        .split(',')
        .map(|m| m.trim().parse::<RenderMode>().map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    ensure!(!modes.is_empty(), "--modes selected no render modes");
    Ok(modes)
}

/// Decoded operator output: the float map as a tensor, a PNG when it is an
/// RGB map, and hard labels as a separate tensor when present.
fn write_decoded(
    dir: &Path,
    stem: &str,
    decoded: &lift3d_core::operators::DecodedOutput,
) -> Result<()> {
    write_tensor(dir.join(format!("{stem}.lt3d")), &decoded.map)?;
    if decoded.map.rank() == 3 && decoded.map.dim(2) == 3 {
        save_png(&dir.join(format!("{stem}.png")), &decoded.map)?;
    }
    if let Some(labels) = &decoded.labels {
        let (h, w) = (decoded.map.dim(0), decoded.map.dim(1));
        let t = Tensor::from_vec(&[h, w], labels.iter().map(|&l| l as f32).collect());
        write_tensor(dir.join(format!("{stem}.labels.lt3d")), &t)?;
    }
    Ok(())
}

fn save_png(path: &Path, rgb: &Tensor<f32>) -> Result<()> {
    ensure!(
        rgb.rank() == 3 && rgb.dim(2) == 3,
        "PNG output needs an [H, W, 3] map"
    );
    let (h, w) = (rgb.dim(0), rgb.dim(1));
    let data = rgb.data();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) * 3;
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_u8(data[p]), to_u8(data[p + 1]), to_u8(data[p + 2])]),
            );
        }
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).context("serializing report")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Record the fully resolved invocation in the output directory.
fn write_run_config<T: Serialize>(dir: &Path, name: &str, args: &T, threads: usize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let doc = serde_json::json!({
        "subcommand": name,
        "threads": threads,
        "args": args,
    });
    write_json(&dir.join("run_config.json"), &doc)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "n/a".to_string(),
    }
}
