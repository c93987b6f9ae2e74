//! The `hireg` command-line harness: argument definitions and the command
//! implementations, kept in a library so they can be driven directly.

pub mod bench;
pub mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hireg::descriptors::{compute_descriptors_with, estimate_normals_indexed, read_dump, DescriptorSet, Level};
use hireg::io::{read_cloud, read_transform, write_cloud, write_transform};
use hireg::matching::{register, RegistrationRecord};
use hireg::metrics::{rotation_error, translation_error};
use hireg::synth::{generate_scene, SceneSpec, Shape};
use hireg::training::{build_sample_batch, keypoint_rankings, matchability_labels, Negatives};
use hireg::verify::{run_loss_checks, GradientFault};
use hireg::{Error, PointCloud64, RigidTransform64, SpatialIndex};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_NO_CONSENSUS: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Exit code for a library error: 2 when the inputs could not be related,
/// 3 for numerical degeneracy, 1 for everything else.
pub fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::NoConsensus { .. } | Error::NoCorrespondence(_) => EXIT_NO_CONSENSUS,
        Error::DegenerateBatch { .. } | Error::DegenerateScores(_) | Error::DegenerateGeometry(_) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::new(exit_code(&e), e.to_string())
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "hireg", version, about = "Hierarchical point cloud registration harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Register a source cloud onto a target cloud.
    Register(RegisterArgs),
    /// Run registration and metrics over a benchmark spec.
    Bench(bench::BenchArgs),
    /// Emit matchability labels and keypoint rankings for a pair.
    Labels(LabelsArgs),
    /// Check loss values and gradients against reference implementations.
    Losscheck(LosscheckArgs),
    /// Write a synthetic scan pair with its ground truth.
    GenScene(GenSceneArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    pub fn load(&self) -> CmdResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

/// A cloud pair from files or from a scene spec.
#[derive(Args, Debug, Clone, Default)]
pub struct PairInput {
    /// Source cloud (.ply or .xyz).
    #[arg(long, required_unless_present = "scene", requires = "tgt")]
    pub src: Option<PathBuf>,
    /// Target cloud (.ply or .xyz).
    #[arg(long, required_unless_present = "scene", requires = "src")]
    pub tgt: Option<PathBuf>,
    /// Ground-truth transform JSON mapping source onto target.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Scene spec (TOML) to generate the pair from instead of files.
    #[arg(long, conflicts_with_all = ["src", "tgt", "gt"])]
    pub scene: Option<PathBuf>,
}

pub struct LoadedPair {
    pub src: PointCloud64,
    pub tgt: PointCloud64,
    pub gt: Option<RigidTransform64>,
}

pub fn read_scene_spec(path: &Path) -> CmdResult<SceneSpec> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())).into())
}

impl PairInput {
    pub fn load(&self) -> CmdResult<LoadedPair> {
        if let Some(path) = &self.scene {
            let scene = generate_scene::<f64>(&read_scene_spec(path)?)?;
            return Ok(LoadedPair {
                src: scene.src,
                tgt: scene.tgt,
                gt: Some(scene.gt),
            });
        }
        let (Some(src), Some(tgt)) = (&self.src, &self.tgt) else {
            return Err(Failure::new(EXIT_VALIDATION, "--src and --tgt are required without --scene"));
        };
        Ok(LoadedPair {
            src: read_cloud(src)?,
            tgt: read_cloud(tgt)?,
            gt: self.gt.as_deref().map(read_transform).transpose()?,
        })
    }
}

/// Writes to stdout; a closed pipe downstream is not an error.
pub(crate) fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(|e| Failure::from(Error::from(e))),
        None => {
            emit(&format!("{text}\n"));
            Ok(())
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub pair: PairInput,
    #[command(flatten)]
    pub common: Common,
    /// Result JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_register(args: &RegisterArgs) -> CmdResult {
    let cfg = args.common.load()?;
    let pair = args.pair.load()?;
    let result = register(&pair.src, &pair.tgt, &cfg.register_config())?;
    eprintln!(
        "coarse pairs {}, inliers {}, fine pairs {}",
        result.coarse.len(),
        result.inlier_count,
        result.fine.len()
    );
    if let Some(gt) = &pair.gt {
        eprintln!(
            "RRE {:.4} deg, RTE {:.4} m",
            rotation_error(&result.transform, gt),
            translation_error(&result.transform, gt)
        );
    }
    write_json(args.out.as_deref(), &RegistrationRecord::from(&result))
}

#[derive(Args, Debug, Clone)]
pub struct LabelsArgs {
    #[command(flatten)]
    pub pair: PairInput,
    #[command(flatten)]
    pub common: Common,
    /// Anchors to draw; overrides the configured count.
    #[arg(long)]
    pub anchors: Option<usize>,
    /// Descriptor dumps used instead of computing descriptors.
    #[arg(long)]
    pub src_low: Option<PathBuf>,
    #[arg(long)]
    pub src_high: Option<PathBuf>,
    #[arg(long)]
    pub tgt_low: Option<PathBuf>,
    #[arg(long)]
    pub tgt_high: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub anchor: usize,
    pub m_high: u8,
    pub m_low: u8,
    pub r_high: u8,
    pub r_low: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedAnchor {
    pub anchor: usize,
    pub skipped_reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelReport {
    pub records: Vec<LabelRecord>,
    pub skipped: Vec<SkippedAnchor>,
}

/// Descriptors of one cloud at both levels, each taken from a dump when
/// given.
fn level_descriptors(
    cloud: &PointCloud64,
    low: Option<&Path>,
    high: Option<&Path>,
    cfg: &RunConfig,
) -> CmdResult<(DescriptorSet<f64>, DescriptorSet<f64>)> {
    let computed = if low.is_none() || high.is_none() {
        let index = SpatialIndex::new(cloud)?;
        let normals = estimate_normals_indexed(&index, cfg.descriptors.normal_radius)?;
        Some((index, normals))
    } else {
        None
    };
    let get = |path: Option<&Path>, level: Level| -> CmdResult<DescriptorSet<f64>> {
        let set = match path {
            Some(p) => read_dump(p)?,
            None => {
                let (index, normals) = computed.as_ref().expect("computed when a dump is missing");
                compute_descriptors_with(index, normals, level, &cfg.descriptors)
            }
        };
        if set.len() != cloud.len() {
            return Err(Failure::new(
                EXIT_VALIDATION,
                format!("{level:?} descriptors hold {} rows for a cloud of {} points", set.len(), cloud.len()),
            ));
        }
        Ok(set)
    };
    Ok((get(low, Level::Low)?, get(high, Level::High)?))
}

pub fn labels(args: &LabelsArgs) -> CmdResult<LabelReport> {
    let cfg = args.common.load()?;
    let pair = args.pair.load()?;
    let gt = pair
        .gt
        .ok_or_else(|| Failure::new(EXIT_VALIDATION, "labels need a ground truth (--gt or --scene)"))?;
    let n = args.anchors.unwrap_or(cfg.labels.anchors);
    let batch = build_sample_batch(&pair.src, &pair.tgt, &gt, &cfg.sampling, n, cfg.seed)?;
    let (src_low, src_high) = level_descriptors(&pair.src, args.src_low.as_deref(), args.src_high.as_deref(), &cfg)?;
    let (tgt_low, tgt_high) = level_descriptors(&pair.tgt, args.tgt_low.as_deref(), args.tgt_high.as_deref(), &cfg)?;
    let m_low = matchability_labels(&src_low, &tgt_low, &batch, Level::Low, cfg.labels.reduction)?;
    let m_high = matchability_labels(&src_high, &tgt_high, &batch, Level::High, cfg.labels.reduction)?;

    let mut report = LabelReport::default();
    let (mut hs, mut ls, mut anchors) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &anchor) in batch.anchors.iter().enumerate() {
        match (m_high[i], m_low[i]) {
            (Some(h), Some(l)) => {
                hs.push(h);
                ls.push(l);
                anchors.push(anchor);
            }
            _ => {
                let reason = batch
                    .skip_reason(i, Negatives::Global)
                    .or(batch.skip_reason(i, Negatives::Local))
                    .expect("unlabeled anchors have a skip reason");
                report.skipped.push(SkippedAnchor {
                    anchor,
                    skipped_reason: reason.to_string(),
                });
            }
        }
    }
    let (r_high, r_low) = keypoint_rankings(&hs, &ls)?;
    for k in 0..anchors.len() {
        report.records.push(LabelRecord {
            anchor: anchors[k],
            m_high: hs[k] as u8,
            m_low: ls[k] as u8,
            r_high: r_high[k],
            r_low: r_low[k],
        });
    }
    Ok(report)
}

pub fn cmd_labels(args: &LabelsArgs) -> CmdResult {
    let report = labels(args)?;
    eprintln!("{} labeled anchors, {} skipped", report.records.len(), report.skipped.len());
    write_json(args.out.as_deref(), &report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    Circle,
    Rating,
    Overlap,
}

#[derive(Args, Debug, Clone)]
pub struct LosscheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per gradient check.
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    /// Test hook: corrupts one analytic gradient.
    #[arg(long, hide = true, value_enum)]
    pub corrupt_gradient: Option<FaultArg>,
}

pub fn cmd_losscheck(args: &LosscheckArgs) -> CmdResult {
    let fault = match args.corrupt_gradient {
        None => GradientFault::None,
        Some(FaultArg::Circle) => GradientFault::Circle,
        Some(FaultArg::Rating) => GradientFault::Rating,
        Some(FaultArg::Overlap) => GradientFault::Overlap,
    };
    let outcomes = run_loss_checks(args.seed, args.rounds, fault)?;
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    for o in &outcomes {
        emit(&format!(
            "{:<width$}  max_rel_err {:.3e}  tol {:.0e}  {}\n",
            o.name,
            o.max_error,
            o.tolerance,
            if o.passed { "ok" } else { "FAIL" }
        ));
    }
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{} ({:.3e} >= {:.0e})", o.name, o.max_error, o.tolerance))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_NUMERICAL, format!("tolerance exceeded: {}", failed.join(", "))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CloudFormat {
    Ply,
    Xyz,
}

#[derive(Args, Debug, Clone)]
pub struct GenSceneArgs {
    /// Scene spec (TOML); flags below override its fields.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub shape: Option<ShapeArg>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub outliers: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "ply")]
    pub format: CloudFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShapeArg {
    Plane,
    Box,
    Room,
}

/// Ground-truth side outputs of `gen-scene`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMasks {
    pub overlap: f64,
    pub src_overlap: Vec<bool>,
    pub tgt_overlap: Vec<bool>,
}

pub fn cmd_gen_scene(args: &GenSceneArgs) -> CmdResult {
    let mut spec = match &args.scene {
        Some(p) => read_scene_spec(p)?,
        None => SceneSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.shape {
        spec.shape = match v {
            ShapeArg::Plane => Shape::Plane,
            ShapeArg::Box => Shape::Box,
            ShapeArg::Room => Shape::Room,
        };
    }
    if let Some(v) = args.points {
        spec.points = v;
    }
    if let Some(v) = args.overlap {
        spec.overlap = v;
    }
    if let Some(v) = args.noise {
        spec.noise = v;
    }
    if let Some(v) = args.outliers {
        spec.outliers = v;
    }
    let scene = generate_scene::<f64>(&spec)?;
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let ext = match args.format {
        CloudFormat::Ply => "ply",
        CloudFormat::Xyz => "xyz",
    };
    write_cloud(&args.out.join(format!("src.{ext}")), &scene.src)?;
    write_cloud(&args.out.join(format!("tgt.{ext}")), &scene.tgt)?;
    write_transform(&args.out.join("gt.json"), &scene.gt)?;
    let masks = SceneMasks {
        overlap: scene.overlap,
        src_overlap: scene.src_overlap,
        tgt_overlap: scene.tgt_overlap,
    };
    write_json(Some(&args.out.join("overlap.json")), &masks)?;
    fs::write(args.out.join("scene.toml"), toml::to_string(&spec).expect("spec serializes")).map_err(Error::from)?;
    emit(&format!(
        "{} source / {} target points, overlap {:.3}, written to {}\n",
        scene.src.len(),
        scene.tgt.len(),
        scene.overlap,
        args.out.display()
    ));
    Ok(())
}

pub fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Bench(a) => bench::cmd_bench(a),
        Command::Labels(a) => cmd_labels(a),
        Command::Losscheck(a) => cmd_losscheck(a),
        Command::GenScene(a) => cmd_gen_scene(a),
    }
}
