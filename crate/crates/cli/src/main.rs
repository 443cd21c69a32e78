//! `ssc`: drive the scene-completion pipeline from the shell.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ssc_core::checkpoint::load_into_model;
use ssc_core::eval::{build_eval_masks, compute_metrics, EvalReport, RoomBounds};
use ssc_core::formats::{
    read_label_volume, write_atomic, write_dense_volume, write_label_volume, DatasetManifest,
    SceneRecord,
};
use ssc_core::geometry::VoxelGridSpec;
use ssc_core::network::{
    argmax_labels, build_default_model, FusionMode, SscModel, OUTPUT_DOWNSAMPLE,
};
use ssc_core::pipeline::{load_scene, LoadedScene};
use ssc_core::preset::ScalePreset;
use ssc_core::tensor::run_gradcheck;
use ssc_core::train::{gradcheck_loss, train, TrainConfig};
use ssc_core::toy::write_toy_dataset;
use ssc_core::volume::{EncodingScheme, LabelVolume, CLASS_NAMES, NUM_CLASSES};

#[derive(Parser)]
#[command(name = "ssc", version, about = "Volumetric semantic scene completion")]
struct Cli {
    /// Worker threads; falls back to the SSC_THREADS env var, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Pin to one worker thread. Every reduction is already order-fixed, so
    /// results are identical at any thread count; this removes scheduling
    /// variance too.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode one scene's depth + segmentation into network input volumes.
    Encode(EncodeArgs),
    /// Generate a synthetic box-room dataset with rendered views.
    MakeToy(MakeToyArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Run a checkpoint on one scene and write the predicted label volume.
    Predict(PredictArgs),
    /// Score predicted label volumes against ground truth.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every operator gradient and the loss.
    Gradcheck(GradcheckArgs),
    /// Export a label volume as an OBJ mesh with per-class colors.
    ExportObj(ExportObjArgs),
}

/// Run configuration shared by the pipeline commands: a JSON file via
/// `--config`, individual fields overridden by flags. Commands read only
/// the fields they use.
#[derive(Args)]
struct ModelArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid and network scale: full | toy.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<ScalePreset>,
    /// Semantic voxel encoding: one-channel | three-channel | one-hot.
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<EncodingScheme>,
    /// Stream fusion: none | early | after1 | after2 | after5 | late.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Distance truncation in meters.
    #[arg(long)]
    d_max: Option<f64>,
}

impl ModelArgs {
    /// The configuration before step-count resolution, so commands can layer
    /// their own overrides on top.
    fn base_config(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => serde_json::from_str("{}").expect("empty config parses to defaults"),
        };
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        if let Some(s) = self.scheme {
            cfg.scheme = s;
        }
        if let Some(f) = self.fusion {
            cfg.fusion = f;
        }
        if let Some(d) = self.d_max {
            cfg.d_max = d;
        }
        Ok(cfg)
    }

    fn resolve(&self) -> Result<TrainConfig> {
        finalize(self.base_config()?)
    }
}

fn finalize(cfg: TrainConfig) -> Result<TrainConfig> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn parse_preset(s: &str) -> Result<ScalePreset, String> {
    match s {
        "full" => Ok(ScalePreset::Full),
        "toy" => Ok(ScalePreset::Toy),
        other => Err(format!("unknown preset {other:?}; expected full or toy")),
    }
}

fn parse_scheme(s: &str) -> Result<EncodingScheme, String> {
    match s.replace('_', "-").as_str() {
        "one-channel" => Ok(EncodingScheme::one_channel()),
        "three-channel" => Ok(EncodingScheme::three_channel()),
        "one-hot" => Ok(EncodingScheme::one_hot()),
        other => Err(format!(
            "unknown scheme {other:?}; expected one-channel, three-channel or one-hot"
        )),
    }
}

#[derive(Args)]
struct EncodeArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Scene id within the manifest.
    #[arg(long)]
    id: String,
    /// Directory for the encoded volumes.
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write the flipped distance volume ({id}_ftsdf.sscf).
    #[arg(long)]
    ftsdf: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct MakeToyArgs {
    /// Output directory for scenes and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Optimizer steps (0 = preset default).
    #[arg(long)]
    total_steps: Option<usize>,
    /// Step of the single 10x learning-rate drop (0 = preset default).
    #[arg(long)]
    decay_step: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight initialization standard deviation.
    #[arg(long)]
    init_sigma: Option<f64>,
    /// Save an intermediate checkpoint every N steps (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Scene id within the manifest.
    #[arg(long)]
    id: String,
    /// Trained weights (.sscw).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output label volume (.sscv).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Scene id to score; omit to score every scene via --pred-dir.
    #[arg(long)]
    id: Option<String>,
    /// Predicted label volume for --id.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Directory holding {id}_pred.sscv for every manifest scene.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ExportObjArgs {
    /// Label volume (.sscv) to export.
    #[arg(long)]
    labels: PathBuf,
    /// Output OBJ path; a sibling .mtl is written next to it.
    #[arg(long)]
    out: PathBuf,
}

enum Outcome {
    Pass,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads(cli.threads, cli.deterministic) {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads(threads: Option<usize>, deterministic: bool) -> Result<(), String> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("SSC_THREADS") {
            Ok(s) => Some(
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| format!("SSC_THREADS must be an integer, got {s:?}"))?,
            ),
            Err(_) => None,
        },
    };
    let n = match (n, deterministic) {
        (Some(0), _) => return Err("thread count must be positive".into()),
        (Some(n), _) => Some(n),
        (None, true) => Some(1),
        (None, false) => None,
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Encode(args) => run_encode(args)?,
        Command::MakeToy(args) => run_make_toy(args)?,
        Command::Train(args) => run_train(args)?,
        Command::Predict(args) => run_predict(args)?,
        Command::Evaluate(args) => run_evaluate(args)?,
        Command::Gradcheck(args) => return run_gradcheck_cmd(args),
        Command::ExportObj(args) => run_export_obj(args)?,
    }
    Ok(Outcome::Pass)
}

fn find_record<'m>(manifest: &'m DatasetManifest, id: &str) -> Result<&'m SceneRecord> {
    manifest
        .records
        .iter()
        .find(|r| r.id == id)
        .with_context(|| format!("scene {id:?} is not in the manifest"))
}

fn load_for(
    manifest: &DatasetManifest,
    record: &SceneRecord,
    cfg: &TrainConfig,
    want_tsdf: bool,
) -> Result<LoadedScene> {
    let fallback = cfg.preset.grid_spec();
    load_scene(manifest, record, Some(&fallback), &cfg.scheme, want_tsdf, cfg.d_max)
        .with_context(|| format!("loading scene {:?}", record.id))
}

fn run_encode(args: EncodeArgs) -> Result<()> {
    let cfg = args.model.resolve()?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let record = find_record(&manifest, &args.id)?;
    let scene = load_for(&manifest, record, &cfg, args.ftsdf)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let semantic_path = args.out_dir.join(format!("{}_semantic.sscf", args.id));
    write_dense_volume(&semantic_path, &scene.semantic)?;
    println!(
        "wrote {} ({} channels, {:?})",
        semantic_path.display(),
        scene.semantic.channels,
        scene.semantic.spec.dims
    );
    if args.ftsdf {
        let ftsdf = scene
            .ftsdf
            .as_ref()
            .context("the depth map hits no voxel, so there is no distance volume")?;
        let ftsdf_path = args.out_dir.join(format!("{}_ftsdf.sscf", args.id));
        write_dense_volume(&ftsdf_path, ftsdf)?;
        println!("wrote {} (1 channel, {:?})", ftsdf_path.display(), ftsdf.spec.dims);
    }
    Ok(())
}

fn run_make_toy(args: MakeToyArgs) -> Result<()> {
    let manifest = write_toy_dataset(&args.out, args.count, args.seed)?;
    println!(
        "wrote {} scenes to {} (manifest.json)",
        manifest.records.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.model.base_config()?;
    if let Some(v) = args.total_steps {
        cfg.total_steps = v;
    }
    if let Some(v) = args.decay_step {
        cfg.decay_step = v;
    }
    if let Some(v) = args.base_lr {
        cfg.base_lr = v;
    }
    if let Some(v) = args.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.init_sigma {
        cfg.init_sigma = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    let cfg = finalize(cfg)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let result = train(&manifest, &cfg, &args.out)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    println!("scenes: {}  steps: {}", result.scenes_used, result.steps);
    println!("loss: {:.6} -> {:.6}", result.initial_loss, result.final_loss);
    println!("checkpoint: {}", result.final_checkpoint.display());
    println!("log: {}", result.log_path.display());
    Ok(())
}

fn build_model(cfg: &TrainConfig) -> Result<SscModel> {
    Ok(build_default_model(&cfg.scheme, cfg.fusion, &cfg.preset.widths())?)
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let cfg = args.model.resolve()?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let record = find_record(&manifest, &args.id)?;
    let mut model = build_model(&cfg)?;
    load_into_model(&args.checkpoint, &mut model)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let want_tsdf = cfg.fusion != FusionMode::None;
    let scene = load_for(&manifest, record, &cfg, want_tsdf)?;
    let inputs = match &model {
        SscModel::Single(g) => scene.inputs_for(g)?,
        SscModel::TwoStream { .. } => scene.input_refs(),
    };
    let probs = model.predict_probabilities(&inputs)?;
    let labels = argmax_labels(&probs);
    let dims = scene.spec.dims.map(|d| d / OUTPUT_DOWNSAMPLE);
    let out_spec = VoxelGridSpec::new(
        dims,
        scene.spec.voxel_size * OUTPUT_DOWNSAMPLE as f64,
        scene.spec.origin,
    )?;
    let vol = LabelVolume::new(out_spec, labels)?;
    ensure_parent(&args.out)?;
    write_label_volume(&args.out, &vol)?;
    println!("wrote {} ({:?})", args.out.display(), dims);
    Ok(())
}

fn evaluate_scene(
    manifest: &DatasetManifest,
    record: &SceneRecord,
    cfg: &TrainConfig,
    pred_path: &Path,
) -> Result<EvalReport> {
    let scene = load_for(manifest, record, cfg, true)?;
    let tsdf = scene
        .tsdf
        .as_ref()
        .with_context(|| format!("scene {:?} has no surface voxels to evaluate against", record.id))?;
    let bounds = RoomBounds::from_grid(&scene.spec);
    let masks = build_eval_masks(
        &scene.mask,
        tsdf,
        &scene.intr,
        &scene.pose,
        &bounds,
        cfg.d_max,
        OUTPUT_DOWNSAMPLE,
    )?;
    let gt = scene.gt_output(OUTPUT_DOWNSAMPLE)?;
    let pred = read_label_volume(pred_path)
        .with_context(|| format!("reading prediction {}", pred_path.display()))?;
    Ok(compute_metrics(&pred, &gt, &masks)?)
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = args.model.resolve()?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let report = match (&args.id, &args.pred, &args.pred_dir) {
        (Some(id), Some(pred), None) => {
            let record = find_record(&manifest, id)?;
            evaluate_scene(&manifest, record, &cfg, pred)?
        }
        (None, None, Some(dir)) => {
            let mut merged: Option<EvalReport> = None;
            for record in &manifest.records {
                let pred = dir.join(format!("{}_pred.sscv", record.id));
                let report = evaluate_scene(&manifest, record, &cfg, &pred)?;
                match &mut merged {
                    Some(m) => m.merge(&report),
                    None => merged = Some(report),
                }
            }
            merged.context("the manifest lists no scenes")?
        }
        _ => bail!("pass either --id with --pred, or --pred-dir alone"),
    };
    print!("{}", report.render_table());
    if let Some(out) = &args.out {
        ensure_parent(out)?;
        write_atomic(out, report.render_csv().as_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn run_gradcheck_cmd(args: GradcheckArgs) -> Result<Outcome> {
    let mut report = run_gradcheck(args.seed);
    report.cases.push(gradcheck_loss(args.seed));
    println!("{report}");
    if report.passed() {
        Ok(Outcome::Pass)
    } else {
        Ok(Outcome::CheckFailed)
    }
}

/// Kd colors for classes 1..=11, chosen for eyeball contrast.
const CLASS_COLORS: [[f32; 3]; NUM_CLASSES] = [
    [0.90, 0.90, 0.85], // ceiling
    [0.55, 0.40, 0.25], // floor
    [0.80, 0.75, 0.70], // wall
    [0.40, 0.70, 0.95], // window
    [0.90, 0.35, 0.20], // chair
    [0.85, 0.30, 0.60], // bed
    [0.50, 0.25, 0.55], // sofa
    [0.95, 0.70, 0.20], // table
    [0.15, 0.15, 0.20], // tv
    [0.30, 0.60, 0.35], // furniture
    [0.65, 0.65, 0.10], // objects
];

/// Unit-cube corners and outward-facing quads (1-based, CCW from outside).
const CUBE_CORNERS: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 1.0, 1.0],
];
const CUBE_FACES: [[usize; 4]; 6] = [
    [1, 4, 3, 2],
    [5, 6, 7, 8],
    [1, 2, 6, 5],
    [3, 4, 8, 7],
    [1, 5, 8, 4],
    [2, 3, 7, 6],
];

fn run_export_obj(args: ExportObjArgs) -> Result<()> {
    use std::fmt::Write as _;
    let vol = read_label_volume(&args.labels)?;
    let mtl_path = args.out.with_extension("mtl");
    let mtl_name = mtl_path
        .file_name()
        .context("output path has no file name")?
        .to_string_lossy()
        .into_owned();

    let mut mtl = String::new();
    for (c, color) in CLASS_COLORS.iter().enumerate() {
        writeln!(mtl, "newmtl {}", CLASS_NAMES[c + 1]).unwrap();
        writeln!(mtl, "Kd {:.3} {:.3} {:.3}", color[0], color[1], color[2]).unwrap();
    }
    ensure_parent(&args.out)?;
    write_atomic(&mtl_path, mtl.as_bytes())?;

    let spec = vol.spec;
    let vs = spec.voxel_size;
    let mut obj = format!("mtllib {mtl_name}\n");
    let mut next_vertex = 1usize;
    let mut cubes = 0usize;
    for class in 1..=NUM_CLASSES as u8 {
        let mut used = false;
        for i in 0..spec.voxel_count() {
            if vol.get(spec.coords(i)) != class {
                continue;
            }
            if !used {
                writeln!(obj, "usemtl {}", CLASS_NAMES[class as usize]).unwrap();
                used = true;
            }
            let [x, y, z] = spec.coords(i);
            for corner in CUBE_CORNERS {
                writeln!(
                    obj,
                    "v {:.6} {:.6} {:.6}",
                    spec.origin[0] + (x as f64 + corner[0]) * vs,
                    spec.origin[1] + (y as f64 + corner[1]) * vs,
                    spec.origin[2] + (z as f64 + corner[2]) * vs,
                )
                .unwrap();
            }
            for face in CUBE_FACES {
                writeln!(
                    obj,
                    "f {} {} {} {}",
                    next_vertex + face[0] - 1,
                    next_vertex + face[1] - 1,
                    next_vertex + face[2] - 1,
                    next_vertex + face[3] - 1,
                )
                .unwrap();
            }
            next_vertex += 8;
            cubes += 1;
        }
    }
    write_atomic(&args.out, obj.as_bytes())?;
    println!("wrote {} ({cubes} voxels) and {}", args.out.display(), mtl_path.display());
    Ok(())
}
