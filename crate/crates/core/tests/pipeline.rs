//! Dataset persistence and the experiment runners on small synthetic videos.

use acat_core::acat::{events_csv, FrameMode};
use acat_core::attack::AdversarialPatch;
use acat_core::defense::{DefenseFlags, DefenseParams};
use acat_core::eval::{
    load_dataset, render_video, run_ablation, run_cell, run_layer_sweep, run_period_sweep, standard_ablation_grid,
    write_dataset, ProviderKind, RunSettings, VideoDataset, VideoSpec,
};
use acat_core::net::SlicedNetwork;
use acat_core::AcatError;

fn small_video(frames: usize) -> (VideoDataset, AdversarialPatch) {
    let patch = AdversarialPatch::random(12, 12, 5).unwrap();
    let ds = render_video(&VideoSpec::new(3, frames, 32, 48), &patch).unwrap();
    (ds, patch)
}

fn net() -> SlicedNetwork {
    SlicedNetwork::toy(4, 1)
}

#[test]
fn rendering_is_deterministic() {
    let (a, _) = small_video(4);
    let (b, _) = small_video(4);
    assert_eq!(a, b);
    let other = render_video(&VideoSpec::new(4, 4, 32, 48), &AdversarialPatch::random(12, 12, 5).unwrap()).unwrap();
    assert_ne!(a.frames, other.frames);
}

#[test]
fn ground_truth_marks_the_patch() {
    let (ds, patch) = small_video(6);
    for m in ds.require_gt().unwrap() {
        let n = m.count_zeros();
        assert!(n > 0, "every frame carries the patch");
        assert!(n <= 4 * patch.height() * patch.width(), "patch scale stays bounded");
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let (ds, patch) = small_video(5);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, &patch, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path(), true).unwrap(), ds);
    assert!(dir.path().join("manifest.txt").exists());
    assert_eq!(AdversarialPatch::load_ppm(&dir.path().join("patch.ppm")).unwrap().height(), 12);
}

#[test]
fn missing_masks_only_fail_when_required() {
    let (ds, patch) = small_video(3);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, &patch, dir.path()).unwrap();
    std::fs::remove_dir_all(dir.path().join("masks")).unwrap();
    let loaded = load_dataset(dir.path(), false).unwrap();
    assert!(loaded.gt_masks.is_none());
    assert_eq!(loaded.frames, ds.frames);
    assert!(matches!(load_dataset(dir.path(), true), Err(AcatError::Data(_))));
    assert!(run_ablation(&loaded, &net(), &standard_ablation_grid(ProviderKind::Gt), &RunSettings::default()).is_err());
}

#[test]
fn missing_frames_are_reported() {
    let (ds, patch) = small_video(3);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, &patch, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("frames/000002.ppm")).unwrap();
    let err = load_dataset(dir.path(), false).unwrap_err().to_string();
    assert!(err.contains("000002"), "{err}");
}

#[test]
fn run_cell_is_deterministic() {
    let (ds, _) = small_video(8);
    let net = net();
    let s = RunSettings::default();
    let a = run_cell(&ds, &net, &s.params, ProviderKind::Gt, &s).unwrap();
    let b = run_cell(&ds, &net, &s.params, ProviderKind::Gt, &s).unwrap();
    assert_eq!(events_csv(&a.events), events_csv(&b.events));
    assert_eq!(a.outcomes, b.outcomes);
}

#[test]
fn ground_truth_seeds_only_the_first_frame() {
    let (ds, _) = small_video(10);
    let s = RunSettings::default();
    let rep = run_cell(&ds, &net(), &s.params, ProviderKind::Gt, &s).unwrap();
    assert_eq!(rep.events[0].mode, FrameMode::Detected);
    assert!(rep.events[1..].iter().all(|e| e.mode != FrameMode::Detected));
}

#[test]
fn never_updating_equals_updates_switched_off() {
    let (ds, _) = small_video(8);
    let net = net();
    let s = RunSettings::default();
    let never = DefenseParams {
        update_period: None,
        ..s.params.clone()
    };
    let off = DefenseParams {
        flags: DefenseFlags {
            upd: false,
            ..DefenseFlags::ALL
        },
        ..s.params.clone()
    };
    let a = run_cell(&ds, &net, &never, ProviderKind::Gt, &s).unwrap();
    let b = run_cell(&ds, &net, &off, ProviderKind::Gt, &s).unwrap();
    assert_eq!(events_csv(&a.events), events_csv(&b.events));
}

#[test]
fn sweeps_produce_one_row_per_setting() {
    let (ds, _) = small_video(6);
    let net = net();
    let s = RunSettings::default();
    let grid = standard_ablation_grid(ProviderKind::Gt);
    let rows = run_ablation(&ds, &net, &grid, &s).unwrap();
    assert_eq!(rows.len(), grid.len());
    assert_eq!(rows[0].config, "none");
    assert_eq!(rows.last().unwrap().config, "att+|att-|upd|nf");
    for r in &rows {
        assert_eq!(r.frames, 6);
        assert!((0.0..=1.0).contains(&r.mean_mask_iou));
    }

    let periods = [Some(1), Some(3), None];
    let rows = run_period_sweep(&ds, &net, &periods, ProviderKind::Gt, &s).unwrap();
    assert_eq!(rows.iter().map(|r| r.period).collect::<Vec<_>>(), periods);

    let rows = run_layer_sweep(&ds, &net, &[1, 2, 3], ProviderKind::Gt, &s).unwrap();
    assert_eq!(rows.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![1, 2, 3]);
}

#[test]
fn invalid_layers_are_rejected() {
    let (ds, _) = small_video(2);
    let net = net();
    let s = RunSettings::default();
    for layer in [0, net.num_layers()] {
        let p = DefenseParams::at_layer(layer);
        assert!(run_cell(&ds, &net, &p, ProviderKind::Gt, &s).is_err(), "layer {layer}");
    }
}
