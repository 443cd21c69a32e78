//! Balanced masked cross-entropy training with momentum SGD.

use crate::checkpoint::save_model;
use crate::error::{Error, Result};
use crate::formats::{write_atomic, DatasetManifest};
use crate::network::{build_default_model, FusionMode, GradientSet, OUTPUT_DOWNSAMPLE, SscModel};
use crate::pipeline::{load_scene, LoadedScene};
use crate::preset::ScalePreset;
use crate::tensor::{Scalar, Tensor};
use crate::tsdf::DEFAULT_D_MAX;
use crate::volume::{EncodingScheme, LabelVolume, NUM_CLASSES, UNKNOWN_LABEL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_scheme() -> EncodingScheme {
    EncodingScheme::three_channel()
}

fn default_fusion() -> FusionMode {
    FusionMode::None
}

fn default_lr() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch() -> usize {
    1
}

fn default_sigma() -> f64 {
    0.01
}

fn default_seed() -> u64 {
    1
}

fn default_d_max() -> f64 {
    DEFAULT_D_MAX
}

fn default_preset() -> ScalePreset {
    ScalePreset::Toy
}

fn zero() -> usize {
    0
}

/// Everything that determines a training run. Serializable so runs can be
/// driven from a JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_preset")]
    pub preset: ScalePreset,
    #[serde(default = "default_scheme")]
    pub scheme: EncodingScheme,
    #[serde(default = "default_fusion")]
    pub fusion: FusionMode,
    /// Optimizer steps; 0 means the preset default.
    #[serde(default = "zero")]
    pub total_steps: usize,
    /// Step at which the learning rate drops once by 10x; 0 means the
    /// preset default.
    #[serde(default = "zero")]
    pub decay_step: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_sigma")]
    pub init_sigma: f64,
    #[serde(default = "default_d_max")]
    pub d_max: f64,
    /// Save an intermediate checkpoint every this many steps (0 = final only).
    #[serde(default = "zero")]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn for_preset(preset: ScalePreset) -> Self {
        Self {
            preset,
            scheme: default_scheme(),
            fusion: default_fusion(),
            total_steps: preset.default_total_steps(),
            decay_step: preset.default_decay_step(),
            base_lr: default_lr(),
            momentum: default_momentum(),
            batch_size: default_batch(),
            seed: default_seed(),
            init_sigma: default_sigma(),
            d_max: default_d_max(),
            checkpoint_every: 0,
        }
    }

    /// Replaces zero step counts with the preset defaults.
    pub fn resolved(mut self) -> Self {
        if self.total_steps == 0 {
            self.total_steps = self.preset.default_total_steps();
        }
        if self.decay_step == 0 {
            self.decay_step = self.preset.default_decay_step();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::invalid("TrainConfig", "total_steps must be positive"));
        }
        if self.decay_step >= self.total_steps {
            return Err(Error::invalid(
                "TrainConfig",
                format!(
                    "decay_step {} must be below total_steps {}",
                    self.decay_step, self.total_steps
                ),
            ));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("TrainConfig", "base_lr must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("TrainConfig", "momentum must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("TrainConfig", "batch_size must be positive"));
        }
        if !(self.init_sigma > 0.0) || !self.init_sigma.is_finite() {
            return Err(Error::invalid("TrainConfig", "init_sigma must be positive and finite"));
        }
        if !(self.d_max > 0.0) || !self.d_max.is_finite() {
            return Err(Error::invalid("TrainConfig", "d_max must be positive and finite"));
        }
        Ok(())
    }

    /// Learning rate at an optimizer step: the base rate, dropping tenfold
    /// once at `decay_step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.decay_step {
            self.base_lr * 0.1
        } else {
            self.base_lr
        }
    }
}

/// Fills weights with N(0, sigma^2) draws from a single seeded stream in
/// canonical parameter order; biases stay zero.
pub fn init_parameters(model: &mut SscModel, seed: u64, sigma: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated positive");
    for graph in model.graphs_mut() {
        graph.visit_parameters_mut(|name, _, data| {
            if name.ends_with(".weight") {
                for v in data {
                    *v = normal.sample(&mut rng) as f32;
                }
            } else {
                data.iter_mut().for_each(|v| *v = 0.0);
            }
        });
    }
}

/// The voxels contributing to one loss evaluation: every occupied voxel
/// plus a random subset of empty voxels, at most twice as many.
#[derive(Debug, Clone)]
pub struct LossMask {
    pub dims: [usize; 3],
    selected: Vec<bool>,
    pub occupied: usize,
    pub empty_sampled: usize,
}

impl LossMask {
    pub fn count(&self) -> usize {
        self.occupied + self.empty_sampled
    }

    pub fn selected(&self) -> &[bool] {
        &self.selected
    }
}

/// Derives a per-step sampling seed from the run seed (splitmix64 step).
pub fn mix_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(step.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Samples the balanced loss mask for one visit of a scene. Unknown voxels
/// never participate. Errors when the scene has no occupied voxels.
pub fn sample_loss_mask(gt: &LabelVolume, seed: u64) -> Result<LossMask> {
    let labels = gt.labels();
    let mut selected = vec![false; labels.len()];
    let mut occupied = 0usize;
    let mut empty: Vec<u32> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            empty.push(i as u32);
        } else if l != UNKNOWN_LABEL {
            selected[i] = true;
            occupied += 1;
        }
    }
    if occupied == 0 {
        return Err(Error::empty(
            "sample_loss_mask",
            "scene has no occupied voxels at output resolution",
        ));
    }
    let take = (2 * occupied).min(empty.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in rand::seq::index::sample(&mut rng, empty.len(), take) {
        selected[empty[k] as usize] = true;
    }
    Ok(LossMask { dims: gt.spec.dims, selected, occupied, empty_sampled: take })
}

/// Mean masked cross entropy and its gradient with respect to the logits.
///
/// `loss = -(1/|mask|) * sum over masked voxels of log softmax(logits)[gt]`,
/// `grad = (softmax(logits) - onehot(gt)) / |mask|` on masked voxels and
/// zero elsewhere.
pub fn softmax_xent_loss<T: Scalar>(
    logits: &Tensor<T>,
    gt: &LabelVolume,
    mask: &LossMask,
) -> Result<(f64, Tensor<T>)> {
    let c_n = logits.channels();
    if c_n != NUM_CLASSES + 1 {
        return Err(Error::shape(
            "softmax_xent_loss",
            format!("{} channels", NUM_CLASSES + 1),
            c_n.to_string(),
        ));
    }
    if logits.spatial() != gt.spec.dims || mask.dims != gt.spec.dims {
        return Err(Error::shape(
            "softmax_xent_loss",
            format!("{:?}", gt.spec.dims),
            format!("logits {:?}, mask {:?}", logits.spatial(), mask.dims),
        ));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::empty("softmax_xent_loss", "empty loss mask"));
    }
    let inv = T::from(1.0 / count as f64).expect("count fits");
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    // Tensor voxels and label voxels share the same x-fastest order.
    for (v, cell) in logits.data().chunks(c_n).enumerate() {
        if !mask.selected[v] {
            continue;
        }
        let label = gt.labels()[v] as usize;
        if label > NUM_CLASSES {
            return Err(Error::invalid(
                "softmax_xent_loss",
                format!("masked voxel {v} has label {label}"),
            ));
        }
        let mut max = cell[0];
        for &l in &cell[1..] {
            if l > max {
                max = l;
            }
        }
        let mut sum = T::zero();
        let g = &mut grad.data_mut()[v * c_n..(v + 1) * c_n];
        for (gc, &l) in g.iter_mut().zip(cell) {
            let e = (l - max).exp();
            *gc = e;
            sum += e;
        }
        let log_z = sum.to_f64().expect("finite").ln();
        loss -= (cell[label] - max).to_f64().expect("finite") - log_z;
        for (c, gc) in g.iter_mut().enumerate() {
            let p = *gc / sum;
            let y = if c == label { T::one() } else { T::zero() };
            *gc = (p - y) * inv;
        }
    }
    Ok((loss / count as f64, grad))
}

/// Momentum buffers, one pair (weights, bias) per conv layer per stream.
pub struct SgdState {
    velocities: Vec<Vec<(Vec<f32>, Vec<f32>)>>,
}

impl SgdState {
    pub fn new(model: &SscModel) -> Self {
        let velocities = model
            .graphs()
            .into_iter()
            .map(|g| {
                g.conv_params()
                    .into_iter()
                    .map(|p| (vec![0.0; p.weights.len()], vec![0.0; p.bias.len()]))
                    .collect()
            })
            .collect();
        Self { velocities }
    }
}

/// One momentum-SGD update: `v = momentum*v - lr*g; w += v`.
/// Non-finite gradients abort with a diagnostic instead of corrupting the
/// parameters.
pub fn sgd_step(
    model: &mut SscModel,
    grads: &[GradientSet],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let n_graphs = model.graphs().len();
    if grads.len() != n_graphs || state.velocities.len() != n_graphs {
        return Err(Error::shape(
            "sgd_step",
            format!("{n_graphs} gradient sets"),
            format!("{} sets, {} velocity groups", grads.len(), state.velocities.len()),
        ));
    }
    // Check everything before touching anything, so a bad gradient can
    // never leave the model half-updated.
    for gset in grads {
        for g in gset.conv_grads() {
            if let Some(bad) = g.weights.iter().chain(g.bias.iter()).find(|v| !v.is_finite()) {
                return Err(Error::non_finite(
                    "sgd_step",
                    format!("gradient value {bad}; aborting before corrupting parameters"),
                ));
            }
        }
    }
    let (lr, mu) = (lr as f32, momentum as f32);
    for ((graph, gset), vels) in model
        .graphs_mut()
        .into_iter()
        .zip(grads)
        .zip(state.velocities.iter_mut())
    {
        let conv_grads = gset.conv_grads();
        let params = graph.conv_params_mut();
        if conv_grads.len() != params.len() || vels.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} conv layers", params.len()),
                format!("{} gradients, {} velocities", conv_grads.len(), vels.len()),
            ));
        }
        for ((p, g), (vw, vb)) in params.into_iter().zip(conv_grads).zip(vels.iter_mut()) {
            for ((w, v), &gr) in p.weights.iter_mut().zip(vw.iter_mut()).zip(&g.weights) {
                *v = mu * *v - lr * gr;
                *w += *v;
            }
            for ((b, v), &gr) in p.bias.iter_mut().zip(vb.iter_mut()).zip(&g.bias) {
                *v = mu * *v - lr * gr;
                *b += *v;
            }
        }
    }
    Ok(())
}

/// Outcome of a training run.
#[derive(Debug)]
pub struct TrainResult {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub scenes_used: usize,
    pub warnings: Vec<String>,
}

struct TrainScene {
    scene: LoadedScene,
    gt: LabelVolume,
}

fn prepare_training_scenes(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    warnings: &mut Vec<String>,
) -> Result<Vec<TrainScene>> {
    let needs_tsdf = config.fusion != FusionMode::None;
    let mut scenes = Vec::new();
    for record in &manifest.records {
        let scene = load_scene(manifest, record, None, &config.scheme, needs_tsdf, config.d_max)?;
        if scene.mask.count() == 0 {
            warnings.push(format!("scene {:?}: depth hits no voxel; skipped", record.id));
            continue;
        }
        for d in scene.spec.dims {
            if d % OUTPUT_DOWNSAMPLE != 0 {
                return Err(Error::invalid(
                    "train",
                    format!(
                        "scene {:?} grid {:?} is not divisible by {OUTPUT_DOWNSAMPLE}",
                        record.id, scene.spec.dims
                    ),
                ));
            }
        }
        let gt = scene.gt_output(OUTPUT_DOWNSAMPLE)?;
        let occupied = gt
            .labels()
            .iter()
            .filter(|&&l| l != 0 && l != UNKNOWN_LABEL)
            .count();
        if occupied == 0 {
            warnings.push(format!(
                "scene {:?}: no occupied voxels at output resolution; skipped",
                record.id
            ));
            continue;
        }
        scenes.push(TrainScene { scene, gt });
    }
    if scenes.is_empty() {
        return Err(Error::empty("train", "no usable scenes in the manifest"));
    }
    Ok(scenes)
}

/// Trains the standard model on the manifest's scenes, round-robin, and
/// writes checkpoints plus a `step,lr,loss` CSV log into `out_dir`.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig, out_dir: &Path) -> Result<TrainResult> {
    let config = config.clone().resolved();
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut warnings = Vec::new();
    let scenes = prepare_training_scenes(manifest, &config, &mut warnings)?;

    let mut model = build_default_model(&config.scheme, config.fusion, &config.preset.widths())?;
    init_parameters(&mut model, config.seed, config.init_sigma);
    let mut sgd = SgdState::new(&model);

    let log_path = out_dir.join("training_log.csv");
    let final_path = out_dir.join("checkpoint_final.sscw");
    let mut log = String::from("step,lr,loss\n");
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    let n_graphs = model.graphs().len();
    for step in 0..config.total_steps {
        let lr = config.lr_at(step);
        let mut step_loss = 0.0f64;
        let mut batch_grads: Vec<Option<GradientSet>> = (0..n_graphs).map(|_| None).collect();
        for k in 0..config.batch_size {
            let visit = step * config.batch_size + k;
            let ts = &scenes[visit % scenes.len()];
            // A fresh empty-voxel sample on every visit.
            let mask = sample_loss_mask(&ts.gt, mix_seed(config.seed, visit as u64))?;
            let graphs = model.graphs();
            let mut visit_loss = 0.0f64;
            let mut visit_grads = Vec::with_capacity(n_graphs);
            for graph in &graphs {
                let inputs = ts.scene.inputs_for(graph)?;
                let trace = graph.forward_trace(&inputs)?;
                let (loss, grad) = softmax_xent_loss(graph.output_from_trace(&trace), &ts.gt, &mask)?;
                visit_grads.push(graph.backward(&trace, grad)?);
                visit_loss += loss;
            }
            step_loss += visit_loss / n_graphs as f64;
            for (slot, g) in batch_grads.iter_mut().zip(visit_grads) {
                match slot {
                    None => *slot = Some(g),
                    Some(acc) => acc.accumulate(&g)?,
                }
            }
        }
        step_loss /= config.batch_size as f64;
        let mut grads: Vec<GradientSet> = batch_grads
            .into_iter()
            .map(|g| g.expect("batch_size >= 1 fills every slot"))
            .collect();
        if config.batch_size > 1 {
            let inv = 1.0 / config.batch_size as f32;
            grads.iter_mut().for_each(|g| g.scale(inv));
        }
        sgd_step(&mut model, &grads, &mut sgd, lr, config.momentum)?;

        log.push_str(&format!("{step},{lr},{step_loss}\n"));
        if step == 0 {
            initial_loss = step_loss;
        }
        final_loss = step_loss;
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            save_model(&out_dir.join(format!("checkpoint_{:06}.sscw", step + 1)), &model)?;
            write_atomic(&log_path, log.as_bytes())?;
        }
    }

    save_model(&final_path, &model)?;
    write_atomic(&log_path, log.as_bytes())?;
    Ok(TrainResult {
        final_checkpoint: final_path,
        log_path,
        initial_loss,
        final_loss,
        steps: config.total_steps,
        scenes_used: scenes.len(),
        warnings,
    })
}

/// FD check of the loss gradient, reported in the same format as the
/// operator checks.
pub fn gradcheck_loss(seed: u64) -> crate::tensor::GradCheckCase {
    use crate::geometry::VoxelGridSpec;
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [3usize, 2, 3];
    let spec = VoxelGridSpec::new(dims, 0.1, [0.0; 3]).unwrap();
    let labels: Vec<u8> = (0..spec.voxel_count())
        .map(|_| match rng.random_range(0..4) {
            0 => 0,
            1 => UNKNOWN_LABEL,
            _ => rng.random_range(1..=NUM_CLASSES as u8),
        })
        .collect();
    let mut gt = LabelVolume::new(spec, labels).unwrap();
    // Guarantee at least one occupied voxel.
    gt.set([0, 0, 0], 3);
    let mask = sample_loss_mask(&gt, seed ^ 0xABCD).unwrap();
    let shape = [NUM_CLASSES + 1, dims[0], dims[1], dims[2]];
    let logits = Tensor::<f64>::from_fn(shape, |_, _| rng.random_range(-2.0..2.0));
    let (_, analytic) = softmax_xent_loss(&logits, &gt, &mask).unwrap();
    let fd = crate::tensor::fd_gradient(
        |v| {
            let probe = Tensor::new(shape, v.to_vec()).unwrap();
            softmax_xent_loss(&probe, &gt, &mask).unwrap().0
        },
        logits.data(),
    );
    crate::tensor::compare_case("softmax cross entropy / logits", analytic.data(), &fd)
}
