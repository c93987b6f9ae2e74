//! The run configuration file: one TOML document with a section per
//! module.

use std::fs;
use std::path::Path;

use hireg::descriptors::DescriptorParams;
use hireg::detectors::DetectorParams;
use hireg::matching::{MatchingParams, RansacParams, RegisterConfig};
use hireg::metrics::MetricThresholds;
use hireg::training::{CircleLossParams, LossWeights, PositiveReduction, SamplingRadii, TargetScores};
use hireg::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelParams {
    /// Anchors drawn per pair.
    pub anchors: usize,
    pub reduction: PositiveReduction,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            anchors: 256,
            reduction: PositiveReduction::Min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    /// Coarse keypoint counts, one report block each.
    pub sample_counts: Vec<usize>,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            sample_counts: vec![250, 500, 1000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub descriptors: DescriptorParams,
    pub detector: DetectorParams,
    pub ransac: RansacParams,
    pub matching: MatchingParams,
    pub sampling: SamplingRadii,
    pub circle: CircleLossParams,
    pub targets: TargetScores,
    pub loss_weights: LossWeights,
    pub labels: LabelParams,
    pub metrics: MetricThresholds,
    pub bench: BenchParams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.register_config().validate()?;
        self.sampling.validate()?;
        self.circle.validate()?;
        self.targets.validate()?;
        self.metrics.validate()?;
        if self.labels.anchors == 0 {
            return Err(Error::Validation("labels.anchors must be >= 1".into()));
        }
        if self.bench.sample_counts.iter().any(|&n| n < 3) {
            return Err(Error::Validation("bench.sample_counts entries must be >= 3".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn register_config(&self) -> RegisterConfig {
        RegisterConfig {
            descriptors: self.descriptors,
            detector: self.detector,
            ransac: self.ransac,
            matching: self.matching,
            seed: self.seed,
        }
    }
}
