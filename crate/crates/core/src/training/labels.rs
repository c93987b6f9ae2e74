use serde::{Deserialize, Serialize};

use crate::descriptors::{distance, DescriptorSet, Level};
use crate::error::{Error, Result};
use crate::scalar::Real;

use super::{Negatives, SampleBatch};

/// How the positive feature distance of an anchor with several positives
/// is reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveReduction {
    #[default]
    Min,
    Mean,
}

/// Binary matchability label per anchor: whether the positive feature
/// distance is strictly below the closest negative feature distance.
///
/// `Low` compares low-level descriptors against local negatives, `High`
/// compares high-level descriptors against global negatives. Anchors lacking
/// positives or negatives get `None`.
pub fn matchability_labels<T: Real>(
    src: &DescriptorSet<T>,
    tgt: &DescriptorSet<T>,
    batch: &SampleBatch,
    level: Level,
    reduction: PositiveReduction,
) -> Result<Vec<Option<bool>>> {
    if src.dim() != tgt.dim() {
        return Err(Error::validation("source and target descriptors differ in dimension"));
    }
    batch.validate_against(src.len(), tgt.len())?;
    let mode = match level {
        Level::Low => Negatives::Local,
        Level::High => Negatives::Global,
    };
    Ok(batch
        .anchors
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if batch.skip_reason(i, mode).is_some() {
                return None;
            }
            let anchor = src.row(a);
            let pos = batch.positives[i].iter().map(|&j| distance(anchor, tgt.row(j)));
            let d_pos = match reduction {
                PositiveReduction::Min => pos.fold(T::max_value().expect("bounded"), T::min),
                PositiveReduction::Mean => {
                    pos.fold(T::zero(), |acc, d| acc + d) / T::of_usize(batch.positives[i].len())
                }
            };
            let d_neg = batch.negatives(mode)[i]
                .iter()
                .map(|&k| distance(anchor, tgt.row(k)))
                .fold(T::max_value().expect("bounded"), T::min);
            Some(d_pos - d_neg < T::zero())
        })
        .collect())
}

/// Dual rankings from the two matchability bits: the high-level ranking
/// reads the bits as the binary number `m_high m_low`, the low-level
/// ranking as `m_low m_high`.
pub fn keypoint_rankings(m_high: &[bool], m_low: &[bool]) -> Result<(Vec<u8>, Vec<u8>)> {
    if m_high.len() != m_low.len() {
        return Err(Error::validation(format!(
            "matchability lists differ in length: {} vs {}",
            m_high.len(),
            m_low.len()
        )));
    }
    Ok(m_high
        .iter()
        .zip(m_low)
        .map(|(&h, &l)| {
            let (h, l) = (u8::from(h), u8::from(l));
            (2 * h + l, 2 * l + h)
        })
        .unzip())
}

/// Matchability bits with their derived rankings, for labeled anchors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSet {
    pub m_high: Vec<bool>,
    pub m_low: Vec<bool>,
    pub r_high: Vec<u8>,
    pub r_low: Vec<u8>,
}

impl LabelSet {
    pub fn from_bits(m_high: Vec<bool>, m_low: Vec<bool>) -> Result<Self> {
        let (r_high, r_low) = keypoint_rankings(&m_high, &m_low)?;
        Ok(Self {
            m_high,
            m_low,
            r_high,
            r_low,
        })
    }

    pub fn len(&self) -> usize {
        self.m_high.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_high.is_empty()
    }
}
