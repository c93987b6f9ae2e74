use hireg::matching::{register, RegisterConfig, StageTimings};
use hireg::metrics::{rotation_error, translation_error};
use hireg::synth::{generate_scene, SceneSpec};
use hireg::{PointCloud64, Stage};

fn scene(overlap: f64, seed: u64) -> hireg::synth::Scene<f64> {
    generate_scene(&SceneSpec { points: 3000, overlap, seed, ..Default::default() }).unwrap()
}

#[test]
fn identity_problem_recovers_identity() {
    let cloud: PointCloud64 = scene(1.0, 3).src;
    let r = register(&cloud, &cloud, &RegisterConfig::default()).unwrap();
    let m = r.transform.rotation() - nalgebra::Matrix3::identity();
    assert!(m.amax() < 1e-6, "rotation off identity by {}", m.amax());
    assert!(r.transform.translation().amax() < 1e-6);
}

#[test]
fn zero_overlap_fails_at_coarse_stage() {
    let s = scene(0.0, 1);
    let err = register(&s.src, &s.tgt, &RegisterConfig::default()).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Coarse));
    assert!(err.is_no_consensus(), "{err}");
}

#[test]
fn overlapping_pair_registers() {
    let s = scene(0.7, 7);
    let r = register(&s.src, &s.tgt, &RegisterConfig { seed: 7, ..Default::default() }).unwrap();
    assert!(rotation_error(&r.transform, &s.gt) < 5.0);
    assert!(translation_error(&r.transform, &s.gt) < 0.1);
    assert!(r.fine.len() >= 3);
    assert!(r.inlier_count >= 3 && r.inlier_count <= r.coarse.len());
    assert_eq!(r.coarse_inliers.iter().filter(|&&m| m).count(), r.inlier_count);
}

#[test]
fn repeated_runs_agree() {
    let s = scene(0.7, 11);
    let cfg = RegisterConfig { seed: 5, ..Default::default() };
    let mut a = register(&s.src, &s.tgt, &cfg).unwrap();
    let mut b = register(&s.src, &s.tgt, &cfg).unwrap();
    a.timings = StageTimings::default();
    b.timings = StageTimings::default();
    assert_eq!(a, b);
}

#[test]
fn invalid_config_is_rejected() {
    let s = scene(0.7, 2);
    let mut cfg = RegisterConfig::default();
    cfg.matching.cell_radius = 0.0;
    assert!(matches!(register(&s.src, &s.tgt, &cfg), Err(hireg::Error::Validation(_))));
}
