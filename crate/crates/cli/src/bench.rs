//! `bench`: registration plus metrics over a list of pairs, one report
//! block per coarse keypoint count.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use hireg::io::{read_cloud, read_transform};
use hireg::matching::register;
use hireg::metrics::{
    inlier_ratio, repeatability, rotation_error, translation_error, BenchmarkReport, MetricBlock, PairEvaluation,
};
use hireg::synth::{generate_scene, SceneSpec};
use hireg::{Error, PointCloud64, RigidTransform64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{emit, exit_code, CmdResult, Common, Failure, EXIT_VALIDATION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilePair {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub gt: PathBuf,
}

/// `count` scenes sharing one spec, with seeds `scene.seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Series {
    pub count: usize,
    #[serde(default)]
    pub scene: SceneSpec,
}

/// Benchmark input. Relative file paths resolve against the spec's
/// directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub scenes: Vec<SceneSpec>,
    pub series: Option<Series>,
    pub pairs: Vec<FilePair>,
}

impl BenchSpec {
    pub fn load(path: &Path) -> CmdResult<Self> {
        let text = fs::read_to_string(path).map_err(Error::from)?;
        let mut spec: Self = toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut spec.pairs {
            for f in [&mut p.src, &mut p.tgt, &mut p.gt] {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        Ok(spec)
    }

    fn sources(&self) -> Vec<PairSource> {
        let mut out: Vec<PairSource> = self.scenes.iter().cloned().map(PairSource::Scene).collect();
        if let Some(s) = &self.series {
            out.extend((0..s.count).map(|i| {
                PairSource::Scene(SceneSpec {
                    seed: s.scene.seed.wrapping_add(i as u64),
                    ..s.scene.clone()
                })
            }));
        }
        out.extend(self.pairs.iter().cloned().map(PairSource::Files));
        out
    }
}

#[derive(Debug, Clone)]
enum PairSource {
    Scene(SceneSpec),
    Files(FilePair),
}

impl PairSource {
    fn label(&self) -> String {
        match self {
            PairSource::Scene(s) => format!("scene seed {}", s.seed),
            PairSource::Files(f) => format!("{} -> {}", f.src.display(), f.tgt.display()),
        }
    }

    fn load(&self) -> hireg::Result<(PointCloud64, PointCloud64, RigidTransform64)> {
        match self {
            PairSource::Scene(spec) => {
                let s = generate_scene::<f64>(spec)?;
                Ok((s.src, s.tgt, s.gt))
            }
            PairSource::Files(f) => Ok((read_cloud(&f.src)?, read_cloud(&f.tgt)?, read_transform(&f.gt)?)),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Benchmark spec (TOML) listing scenes and/or file pairs.
    pub spec: PathBuf,
    #[command(flatten)]
    pub common: Common,
    /// Coarse keypoint counts, overriding the configured list.
    #[arg(long, value_delimiter = ',')]
    pub samples: Option<Vec<usize>>,
    /// Record pairs with invalid input as failures instead of aborting.
    #[arg(long)]
    pub keep_going: bool,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Registration and metrics of one pair at one keypoint count.
fn evaluate(
    src: &PointCloud64,
    tgt: &PointCloud64,
    gt: &RigidTransform64,
    cfg: &RunConfig,
) -> hireg::Result<PairEvaluation> {
    let th = &cfg.metrics;
    let r = register(src, tgt, &cfg.register_config())?;
    let ir = inlier_ratio(&r.coarse, src, tgt, gt, th.inlier_tau)?;
    let rep = repeatability(&r.keypoints_src, &r.keypoints_tgt, src, tgt, gt, th.repeatability_radius)?;
    Ok(PairEvaluation::new(
        rotation_error(&r.transform, gt),
        translation_error(&r.transform, gt),
        ir.ratio,
        rep,
        th,
    ))
}

/// A pair that could not be registered is scored as the identity estimate
/// with no inliers and no repeatable keypoints.
fn failed(gt: &RigidTransform64, cfg: &RunConfig) -> PairEvaluation {
    let id = RigidTransform64::identity();
    PairEvaluation::new(rotation_error(&id, gt), translation_error(&id, gt), 0.0, 0.0, &cfg.metrics)
}

pub fn bench(args: &BenchArgs) -> CmdResult<BenchmarkReport> {
    let cfg = args.common.load()?;
    let spec = BenchSpec::load(&args.spec)?;
    let sources = spec.sources();
    if sources.is_empty() {
        return Err(Failure::new(EXIT_VALIDATION, "benchmark spec lists no pairs"));
    }
    let counts = args.samples.clone().unwrap_or_else(|| cfg.bench.sample_counts.clone());
    if counts.is_empty() {
        return Err(Failure::new(EXIT_VALIDATION, "no sample counts given"));
    }

    let loaded: Vec<_> = sources.par_iter().map(|s| s.load()).collect();
    let mut pairs = Vec::with_capacity(loaded.len());
    for (src, l) in sources.iter().zip(loaded) {
        match l {
            Ok(p) => pairs.push(Some(p)),
            Err(e) if args.keep_going => {
                eprintln!("skipping {}: {e}", src.label());
                pairs.push(None);
            }
            Err(e) => return Err(Failure::new(exit_code(&e), format!("{}: {e}", src.label()))),
        }
    }

    let mut blocks = Vec::with_capacity(counts.len());
    for &n in &counts {
        let mut run_cfg = cfg.clone();
        run_cfg.matching.coarse_samples = n;
        run_cfg.validate()?;
        let results: Vec<Option<hireg::Result<PairEvaluation>>> = pairs
            .par_iter()
            .map(|p| p.as_ref().map(|(s, t, gt)| evaluate(s, t, gt, &run_cfg)))
            .collect();
        let mut evals = Vec::new();
        let mut failures = 0;
        for ((src, pair), res) in sources.iter().zip(&pairs).zip(results) {
            match (pair, res) {
                (Some(_), Some(Ok(e))) => evals.push(e),
                (Some((_, _, gt)), Some(Err(e))) => {
                    if exit_code(&e) == EXIT_VALIDATION && !args.keep_going {
                        return Err(Failure::new(EXIT_VALIDATION, format!("{} ({n} samples): {e}", src.label())));
                    }
                    failures += 1;
                    evals.push(failed(gt, &run_cfg));
                }
                _ => failures += 1,
            }
        }
        if evals.is_empty() {
            return Err(Failure::new(EXIT_VALIDATION, "no pair could be evaluated"));
        }
        blocks.push(MetricBlock::from_pairs(n, evals, failures, &cfg.metrics)?);
    }
    let echo = serde_json::to_value(&cfg).expect("config serializes");
    Ok(BenchmarkReport::new(cfg.metrics, blocks, echo))
}

pub fn cmd_bench(args: &BenchArgs) -> CmdResult {
    let report = bench(args)?;
    emit(&report.to_table());
    if let Some(out) = &args.out {
        fs::write(out, report.to_json() + "\n").map_err(|e| Failure::from(Error::from(e)))?;
    }
    Ok(())
}
