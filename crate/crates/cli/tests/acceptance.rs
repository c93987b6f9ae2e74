//! Acceptance criteria. Each prints one PASS/FAIL line; the process exits
//! nonzero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use hireg::descriptors::write_dump;
use hireg::detectors::{sample_keypoints, KeypointSet, ScoreSet};
use hireg::io::{write_cloud, write_transform};
use hireg::matching::{ransac_transform, register, weighted_svd, RansacParams, RegisterConfig, Tier};
use hireg::matching::CorrespondenceSet;
use hireg::metrics::{
    inlier_ratio, registration_recall, repeatability, rotation_error, translation_error, MetricThresholds,
    PairEvaluation,
};
use hireg::synth::{generate_scene, SceneSpec};
use hireg::training::{keypoint_rankings, rating_loss, TargetScores};
use hireg::verify::{check_loss_values, rating_loss_reference, run_loss_checks, GradientFault};
use hireg::{DescriptorSet, Level, PointCloud64, RigidTransform64, SpatialIndex};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOSS_VALUE_TOL: f64 = 1e-10;
const SVD_ROT_TOL_RAD: f64 = 1e-6;
const SVD_TRANS_TOL: f64 = 1e-6;
const RANSAC_RRE_DEG: f64 = 0.5;
const RANSAC_RTE: f64 = 0.02;
const RANSAC_MIN_SUCCESS: usize = 99;
const TREND_PAIRS: u64 = 50;
const TREND_MIN_IR_WINS: f64 = 0.9;
const IR_TAU: f64 = 0.1;
const SAMPLING_SIGMAS: f64 = 3.0;
const ANGLE_TOL_RAD: f64 = 1e-9;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn random_point(rng: &mut ChaCha8Rng, extent: f64) -> Point3<f64> {
    Point3::new(rng.random_range(-extent..extent), rng.random_range(-extent..extent), rng.random_range(-extent..extent))
}

fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform64 {
    let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    RigidTransform64::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI), t).unwrap()
}

fn loss_exactness() -> Verdict {
    let cases = [(false, false, 0, 0), (false, true, 1, 2), (true, false, 2, 1), (true, true, 3, 3)];
    let h: Vec<bool> = cases.iter().map(|c| c.0).collect();
    let l: Vec<bool> = cases.iter().map(|c| c.1).collect();
    let (rh, rl) = keypoint_rankings(&h, &l).unwrap();
    let table_ok = cases.iter().enumerate().all(|(k, c)| rh[k] == c.2 && rl[k] == c.3);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let targets = TargetScores::default();
    let mut rating_gap: f64 = 0.0;
    for _ in 0..100 {
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(-0.5..1.5)).collect();
        let ranks: Vec<u8> = (0..50).map(|_| rng.random_range(0..4u8)).collect();
        let got = rating_loss(&scores, &ranks, &targets).unwrap().loss;
        rating_gap = rating_gap.max((got - rating_loss_reference(&scores, &ranks, &targets)).abs());
    }
    let values = check_loss_values(&mut rng, 100).unwrap();
    let circle_gap = values[0].max(values[1]);
    verdict(
        table_ok && rating_gap < LOSS_VALUE_TOL && circle_gap < LOSS_VALUE_TOL,
        format!("truth table {}, rating gap {rating_gap:.1e}, circle gap {circle_gap:.1e}", if table_ok { "exact" } else { "WRONG" }),
    )
}

fn gradients() -> Verdict {
    let mut worst = String::new();
    let mut all = true;
    let mut max_err: f64 = 0.0;
    for seed in 0..10 {
        for o in run_loss_checks(seed, 1, GradientFault::None).unwrap() {
            if o.name.ends_with("gradient") {
                max_err = max_err.max(o.max_error);
            }
            if !o.passed {
                all = false;
                worst = format!(", seed {seed} {} {:.1e}", o.name, o.max_error);
            }
        }
    }
    verdict(all, format!("max relative gradient error {max_err:.1e}{worst}"))
}

fn geometry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut rot, mut trans): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let gt = random_transform(&mut rng);
        let n = rng.random_range(3..60);
        let src: Vec<Point3<f64>> = (0..n).map(|_| random_point(&mut rng, 1.0)).collect();
        let tgt: Vec<Point3<f64>> = src.iter().map(|p| gt.apply_point(p)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let est = weighted_svd(&src, &tgt, &w).unwrap();
        rot = rot.max(rotation_error(&est, &gt).to_radians());
        trans = trans.max(translation_error(&est, &gt));
    }

    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..400);
        let pts: Vec<Point3<f64>> = (0..n).map(|_| random_point(&mut rng, 1.0)).collect();
        let cloud = PointCloud64::new("c", pts.clone()).unwrap();
        let index = SpatialIndex::new(&cloud).unwrap();
        let q = random_point(&mut rng, 1.2);
        let r = rng.random_range(0.05..0.8);
        let mut got = index.radius_query(&q, r).unwrap();
        got.sort_unstable();
        let want: Vec<usize> = (0..n).filter(|&i| (pts[i] - q).norm() <= r).collect();
        let k = rng.random_range(1..=n);
        let mut knn = index.knn_query(&q, k).unwrap();
        knn.sort_unstable();
        let mut by_dist: Vec<usize> = (0..n).collect();
        by_dist.sort_by(|&a, &b| (pts[a] - q).norm().total_cmp(&(pts[b] - q).norm()));
        let mut want_knn = by_dist[..k].to_vec();
        want_knn.sort_unstable();
        if got != want || knn != want_knn {
            mismatches += 1;
        }
    }
    verdict(
        rot < SVD_ROT_TOL_RAD && trans < SVD_TRANS_TOL && mismatches == 0,
        format!("svd max rotation {rot:.1e} rad, translation {trans:.1e} m; index mismatches {mismatches}/100"),
    )
}

fn robust_matching() -> Verdict {
    let params = RansacParams { max_iterations: 1000, inlier_threshold: 0.05, ..Default::default() };
    let mut ok = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let gt = random_transform(&mut rng);
        let n = 200;
        let n_in = n * 2 / 5;
        let src: Vec<Point3<f64>> = (0..n).map(|_| random_point(&mut rng, 1.0)).collect();
        let tgt: Vec<Point3<f64>> = src
            .iter()
            .enumerate()
            .map(|(i, p)| if i < n_in { gt.apply_point(p) } else { gt.apply_point(&random_point(&mut rng, 1.0)) })
            .collect();
        let corr = CorrespondenceSet::unweighted((0..n).map(|i| (i, i)).collect(), Tier::Coarse);
        let s = PointCloud64::new("s", src).unwrap();
        let t = PointCloud64::new("t", tgt).unwrap();
        if let Ok(out) = ransac_transform(&s, &t, &corr, &RansacParams { seed, ..params }) {
            if rotation_error(&out.transform, &gt) < RANSAC_RRE_DEG && translation_error(&out.transform, &gt) < RANSAC_RTE {
                ok += 1;
            }
        }
    }
    verdict(ok >= RANSAC_MIN_SUCCESS, format!("{ok}/100 trials recovered the transform"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn global_to_local() -> Verdict {
    let (mut ir_wins, mut failures) = (0, 0);
    let (mut coarse_rre, mut fine_rre) = (Vec::new(), Vec::new());
    let (mut coarse_ir, mut fine_ir) = (Vec::new(), Vec::new());
    for seed in 0..TREND_PAIRS {
        let spec = SceneSpec { points: 5000, noise: 0.005, overlap: 0.7, seed, ..Default::default() };
        let s = generate_scene::<f64>(&spec).unwrap();
        match register(&s.src, &s.tgt, &RegisterConfig { seed, ..Default::default() }) {
            Ok(r) => {
                let ci = inlier_ratio(&r.coarse, &s.src, &s.tgt, &s.gt, IR_TAU).unwrap().ratio;
                let fi = inlier_ratio(&r.fine, &s.src, &s.tgt, &s.gt, IR_TAU).unwrap().ratio;
                if fi >= ci {
                    ir_wins += 1;
                }
                coarse_ir.push(ci);
                fine_ir.push(fi);
                coarse_rre.push(rotation_error(&r.coarse_transform, &s.gt));
                fine_rre.push(rotation_error(&r.transform, &s.gt));
            }
            Err(_) => {
                failures += 1;
                coarse_rre.push(f64::INFINITY);
                fine_rre.push(f64::INFINITY);
            }
        }
    }
    let (mc, mf) = (median(coarse_rre), median(fine_rre));
    let share = ir_wins as f64 / TREND_PAIRS as f64;
    verdict(
        share >= TREND_MIN_IR_WINS && mf <= mc,
        format!(
            "fine IR >= coarse IR on {ir_wins}/{TREND_PAIRS} (mean IR {:.3} -> {:.3}); median RRE {mc:.3} -> {mf:.3} deg; {failures} failed",
            coarse_ir.iter().sum::<f64>() / coarse_ir.len().max(1) as f64,
            fine_ir.iter().sum::<f64>() / fine_ir.len().max(1) as f64,
        ),
    )
}

fn detector_sanity() -> Verdict {
    let det = vec![0.1, 0.2, 0.3, 0.4, 1.0, 0.0];
    let total: f64 = det.iter().sum();
    let scores = ScoreSet::from_detection(Level::High, det.clone()).unwrap();
    let draws = 10_000u64;
    let mut counts = vec![0usize; det.len()];
    for seed in 0..draws {
        counts[sample_keypoints(&scores, 1, seed).unwrap().indices[0]] += 1;
    }
    let mut worst_z: f64 = 0.0;
    for (i, &d) in det.iter().enumerate() {
        let p = d / total;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let dev = (counts[i] as f64 - draws as f64 * p).abs();
        worst_z = worst_z.max(if sd > 0.0 { dev / sd } else if dev > 0.0 { f64::INFINITY } else { 0.0 });
    }

    let s = generate_scene::<f64>(&SceneSpec { points: 1000, overlap: 1.0, noise: 0.0, seed: 8, ..Default::default() }).unwrap();
    let kp = KeypointSet { indices: (0..s.src.len()).step_by(7).collect(), level: Level::High, seed: 0, shortfall: 0 };
    let rep = repeatability(&kp, &kp, &s.src, &s.src, &RigidTransform64::identity(), 0.1).unwrap();
    verdict(
        worst_z <= SAMPLING_SIGMAS && rep == 1.0,
        format!("worst frequency deviation {worst_z:.2} sigma; identical-pair repeatability {rep}"),
    )
}

fn metric_analytics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let base = random_transform(&mut rng);
        let delta = RigidTransform64::from_axis_angle(&axis, angle, Vector3::zeros()).unwrap();
        let est = base.compose(&delta);
        worst = worst.max((rotation_error(&est, &base).to_radians() - angle).abs());
    }

    let th = MetricThresholds::KITTI;
    let eval = |rre: f64, rte: f64| PairEvaluation::new(rre, rte, 0.5, 1.0, &th);
    let lists: [(Vec<PairEvaluation>, f64); 3] = [
        (vec![eval(4.9, 1.9), eval(5.0, 1.0), eval(1.0, 2.0), eval(0.1, 0.1), eval(10.0, 0.1)], 0.4),
        (vec![eval(0.0, 0.0), eval(4.99, 1.99)], 1.0),
        (vec![eval(5.0, 2.0), eval(30.0, 0.0), eval(0.0, 7.5), eval(6.0, 3.0)], 0.0),
    ];
    let recall_ok = lists
        .iter()
        .all(|(l, want)| registration_recall(l, th.rre_max_deg, th.rte_max).unwrap() == *want);
    verdict(
        worst < ANGLE_TOL_RAD && recall_ok,
        format!("max angle deviation {worst:.1e} rad; KITTI recall lists {}", if recall_ok { "match" } else { "DIFFER" }),
    )
}

/// Points spaced 0.07 m on a line: each has a local negative neighbor and
/// global negatives further out under the default sampling radii.
fn line(n: usize) -> Vec<Point3<f64>> {
    (0..n).map(|i| Point3::new(0.07 * i as f64, 0.0, 0.0)).collect()
}

fn distinct_rows(n: usize, level: Level, offset: f64) -> DescriptorSet<f64> {
    let data = (0..n).flat_map(|i| [offset + i as f64, (i * i) as f64 * 0.5, 1.0, -(i as f64)]).collect();
    DescriptorSet::new(level, 4, data).unwrap()
}

struct LabelFiles<'a> {
    dir: &'a Path,
    src: PointCloud64,
    tgt: PointCloud64,
    dumps: [DescriptorSet<f64>; 4],
}

fn run_labels(f: &LabelFiles) -> serde_json::Value {
    let path = |name: &str| f.dir.join(name).to_str().unwrap().to_string();
    write_cloud(&f.dir.join("src.xyz"), &f.src).unwrap();
    write_cloud(&f.dir.join("tgt.xyz"), &f.tgt).unwrap();
    write_transform(&f.dir.join("gt.json"), &RigidTransform64::identity()).unwrap();
    let names = ["src_low.bin", "src_high.bin", "tgt_low.bin", "tgt_high.bin"];
    for (set, name) in f.dumps.iter().zip(names) {
        write_dump(&f.dir.join(name), set, None).unwrap();
    }
    let out = Command::new(env!("CARGO_BIN_EXE_hireg"))
        .args(["labels", "--src", &path("src.xyz"), "--tgt", &path("tgt.xyz"), "--gt", &path("gt.json")])
        .args(["--src-low", &path(names[0]), "--src-high", &path(names[1])])
        .args(["--tgt-low", &path(names[2]), "--tgt-high", &path(names[3])])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn ranks_of(report: &serde_json::Value) -> Vec<(u64, u64, u64)> {
    report["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["anchor"].as_u64().unwrap(), r["r_high"].as_u64().unwrap(), r["r_low"].as_u64().unwrap()))
        .collect()
}

fn label_pipeline() -> Verdict {
    let n = 10;
    let dir = tempfile::tempdir().unwrap();

    let cloud = PointCloud64::new("line", line(n)).unwrap();
    let identity = run_labels(&LabelFiles {
        dir: dir.path(),
        src: cloud.clone(),
        tgt: cloud.clone(),
        dumps: [
            distinct_rows(n, Level::Low, 0.0),
            distinct_rows(n, Level::High, 0.0),
            distinct_rows(n, Level::Low, 0.0),
            distinct_rows(n, Level::High, 0.0),
        ],
    });
    let id_ranks = ranks_of(&identity);
    let identity_ok = id_ranks.len() == n && id_ranks.iter().all(|&(_, h, l)| h == 3 && l == 3);

    // A far target point copies anchor 0's high-level descriptor, so anchor 0
    // fails high-level matching while its low-level match stays unique.
    let mut pts = line(n);
    pts.push(Point3::new(5.0, 0.0, 0.0));
    let tgt = PointCloud64::new("line+decoy", pts).unwrap();
    let mut tgt_high = distinct_rows(n + 1, Level::High, 0.0).as_slice().to_vec();
    tgt_high[n * 4..].copy_from_slice(&distinct_rows(n, Level::High, 0.0).as_slice()[..4]);
    let crafted = run_labels(&LabelFiles {
        dir: dir.path(),
        src: cloud,
        tgt,
        dumps: [
            distinct_rows(n, Level::Low, 0.0),
            distinct_rows(n, Level::High, 0.0),
            distinct_rows(n + 1, Level::Low, 0.0),
            DescriptorSet::new(Level::High, 4, tgt_high).unwrap(),
        ],
    });
    let ranks = ranks_of(&crafted);
    let target = ranks.iter().find(|r| r.0 == 0).map(|r| (r.1, r.2));
    let others_ok = ranks.iter().filter(|r| r.0 != 0).all(|r| r.1 == 3 && r.2 == 3);
    verdict(
        identity_ok && target == Some((1, 2)) && others_ok,
        format!("crafted anchor (r_high, r_low) = {target:?}; identity scene all 3s: {identity_ok}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("1 loss and ranking exactness", loss_exactness),
        ("2 loss gradients", gradients),
        ("3 geometry", geometry),
        ("4 robust matching", robust_matching),
        ("5 global-to-local trend", global_to_local),
        ("6 detector sanity", detector_sanity),
        ("7 metric analytics", metric_analytics),
        ("8 label pipeline", label_pipeline),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let v = run();
        let secs = t.elapsed().as_secs_f64();
        println!("{} criterion {name}: {} [{secs:.1}s]", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        if !v.passed {
            failed += 1;
        }
    }
    println!("acceptance: {}/8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
