//! End-to-end flow on generated scenes: dataset on disk -> loaded volumes ->
//! network -> training -> checkpoint -> prediction -> metrics.

use ssc_core::checkpoint::{load_into_model, save_model};
use ssc_core::eval::{build_eval_masks, compute_metrics, RoomBounds};
use ssc_core::formats::DatasetManifest;
use ssc_core::network::{
    argmax_labels, build_default_model, FusionMode, SscModel, OUTPUT_DOWNSAMPLE,
};
use ssc_core::pipeline::load_scene;
use ssc_core::preset::ScalePreset;
use ssc_core::toy::write_toy_dataset;
use ssc_core::train::{init_parameters, train, TrainConfig};
use ssc_core::volume::EncodingScheme;

fn toy_manifest(dir: &std::path::Path, count: usize, seed: u64) -> DatasetManifest {
    write_toy_dataset(dir, count, seed).expect("toy dataset generates")
}

#[test]
fn loaded_scene_volumes_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_manifest(dir.path(), 1, 21);
    let scene = load_scene(
        &manifest,
        &manifest.records[0],
        None,
        &EncodingScheme::three_channel(),
        true,
        0.24,
    )
    .unwrap();

    assert_eq!(scene.spec.dims, [40, 24, 40]);
    assert_eq!(scene.semantic.channels, 3);
    let ftsdf = scene.ftsdf.as_ref().expect("surface voxels exist");
    assert!(ftsdf.data().iter().all(|v| (-1.0..=1.0).contains(v)));

    // The semantic volume codes exactly the surface voxels.
    let coded: usize = scene
        .semantic
        .data()
        .chunks(3)
        .filter(|c| c.iter().any(|&v| v != 0.0))
        .count();
    assert!(coded > 0 && coded <= scene.mask.count());

    // Rendered depth re-voxelizes inside the ground-truth occupancy.
    let gt = scene.gt_full.as_ref().unwrap();
    for i in 0..scene.spec.voxel_count() {
        let v = scene.spec.coords(i);
        if scene.mask.get(v) {
            assert_ne!(gt.get(v), 0, "surface voxel {v:?} empty in ground truth");
        }
    }
}

#[test]
fn every_fusion_variant_runs_forward_on_a_real_scene() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_manifest(dir.path(), 1, 22);
    let scheme = EncodingScheme::three_channel();
    let widths = ScalePreset::Toy.widths();
    let scene = load_scene(&manifest, &manifest.records[0], None, &scheme, true, 0.24).unwrap();

    for fusion in [
        FusionMode::None,
        FusionMode::Early,
        FusionMode::AfterBlock(1),
        FusionMode::AfterBlock(2),
        FusionMode::AfterBlock(5),
        FusionMode::Late,
    ] {
        let mut model = build_default_model(&scheme, fusion, &widths).unwrap();
        init_parameters(&mut model, 5, 0.01);
        let inputs = match &model {
            SscModel::Single(g) => scene.inputs_for(g).unwrap(),
            SscModel::TwoStream { .. } => scene.input_refs(),
        };
        let probs = model.predict_probabilities(&inputs).unwrap();
        assert_eq!(probs.channels(), 12, "{fusion}");
        assert_eq!(probs.spatial(), [10, 6, 10], "{fusion}");
        assert!(probs.data().iter().all(|p| p.is_finite() && *p >= 0.0), "{fusion}");
        let labels = argmax_labels(&probs);
        assert_eq!(labels.len(), 600, "{fusion}");
    }
}

#[test]
fn checkpoint_roundtrip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_manifest(dir.path(), 1, 23);
    let scheme = EncodingScheme::one_hot();
    let widths = ScalePreset::Toy.widths();
    let scene = load_scene(&manifest, &manifest.records[0], None, &scheme, true, 0.24).unwrap();

    let mut model = build_default_model(&scheme, FusionMode::Late, &widths).unwrap();
    init_parameters(&mut model, 9, 0.01);
    let before = model.predict_probabilities(&scene.input_refs()).unwrap();

    let path = dir.path().join("weights.sscw");
    save_model(&path, &model).unwrap();
    let mut restored = build_default_model(&scheme, FusionMode::Late, &widths).unwrap();
    load_into_model(&path, &mut restored).unwrap();
    let after = restored.predict_probabilities(&scene.input_refs()).unwrap();

    assert_eq!(before.data(), after.data(), "weights round-trip bitwise");
}

#[test]
fn short_training_run_writes_artifacts_and_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = toy_manifest(&data, 2, 24);
    let mut config = TrainConfig::for_preset(ScalePreset::Toy);
    config.total_steps = 30;
    config.decay_step = 25;
    config.seed = 4;
    let out = dir.path().join("run");
    let result = train(&manifest, &config, &out).unwrap();

    assert_eq!(result.scenes_used, 2);
    assert_eq!(result.steps, 30);
    assert!(result.final_loss.is_finite());
    assert!(
        result.final_loss < result.initial_loss,
        "loss {} -> {}",
        result.initial_loss,
        result.final_loss
    );
    let log = std::fs::read_to_string(&result.log_path).unwrap();
    assert_eq!(log.lines().count(), 31, "header + one row per step");

    // The checkpoint drives prediction on its own.
    let mut model = build_default_model(&config.scheme, config.fusion, &config.preset.widths()).unwrap();
    load_into_model(&result.final_checkpoint, &mut model).unwrap();
    let scene =
        load_scene(&manifest, &manifest.records[0], None, &config.scheme, true, 0.24).unwrap();
    let inputs = match &model {
        SscModel::Single(g) => scene.inputs_for(g).unwrap(),
        SscModel::TwoStream { .. } => scene.input_refs(),
    };
    let probs = model.predict_probabilities(&inputs).unwrap();
    assert_eq!(probs.spatial(), [10, 6, 10]);
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_manifest(dir.path(), 1, 25);
    let scene = load_scene(
        &manifest,
        &manifest.records[0],
        None,
        &EncodingScheme::one_channel(),
        true,
        0.24,
    )
    .unwrap();
    let masks = build_eval_masks(
        &scene.mask,
        scene.tsdf.as_ref().unwrap(),
        &scene.intr,
        &scene.pose,
        &RoomBounds::from_grid(&scene.spec),
        0.24,
        OUTPUT_DOWNSAMPLE,
    )
    .unwrap();
    assert!(masks.ssc_count() > 0);
    assert!(masks.sc_count() > 0);

    let gt = scene.gt_output(OUTPUT_DOWNSAMPLE).unwrap();
    let report = compute_metrics(&gt, &gt, &masks).unwrap();
    assert_eq!(report.ssc_avg_iou(), Some(1.0));
    assert_eq!(report.sc.iou(), Some(1.0));
    assert_eq!(report.sc.precision(), Some(1.0));
    assert_eq!(report.sc.recall(), Some(1.0));
}
