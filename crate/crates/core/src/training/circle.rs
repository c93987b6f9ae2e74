use serde::{Deserialize, Serialize};

use crate::descriptors::{distance, DescriptorSet};
use crate::error::{Error, Result};
use crate::scalar::Real;

use super::{SampleBatch, SkipReason};

/// Which negative set a circle loss contrasts against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Negatives {
    /// Everything beyond the global negative radius (high level).
    Global,
    /// The annulus between the local and global negative radii (low level).
    Local,
}

/// Margins and weighting of the circle loss on feature distances.
///
/// Pair weights are self-paced: `beta_p = gamma * max(0, d - optimum_p)`
/// and `beta_n = gamma * max(0, optimum_n - d)`. With the optima equal to
/// the margins (the default) a term's exponent is
/// `gamma * max(0, d - delta_p)^2`, which is continuously differentiable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircleLossParams {
    pub delta_p: f64,
    pub delta_n: f64,
    pub gamma: f64,
    pub optimum_p: f64,
    pub optimum_n: f64,
}

impl Default for CircleLossParams {
    fn default() -> Self {
        Self {
            delta_p: 0.1,
            delta_n: 1.4,
            gamma: 10.0,
            optimum_p: 0.1,
            optimum_n: 1.4,
        }
    }
}

impl CircleLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_p < self.delta_n) {
            return Err(Error::validation("circle loss needs delta_p < delta_n"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation("circle loss needs gamma > 0"));
        }
        if !(self.optimum_p.is_finite() && self.optimum_n.is_finite()) {
            return Err(Error::validation("circle loss optima must be finite"));
        }
        Ok(())
    }
}

/// Loss value, gradients with respect to every descriptor entry, and the
/// anchors left out of the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleLoss<T: Real> {
    pub loss: T,
    /// Same layout as the source descriptor set.
    pub grad_src: Vec<T>,
    /// Same layout as the target descriptor set.
    pub grad_tgt: Vec<T>,
    pub used_anchors: usize,
    pub skipped: Vec<(usize, SkipReason)>,
}

/// `log(1 + e^x)` without overflow.
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Log-sum-exp of `xs`, writing the softmax weights into `weights`.
fn log_sum_exp<T: Real>(xs: &[T], weights: &mut Vec<T>) -> T {
    let max = xs.iter().copied().fold(xs[0], T::max);
    weights.clear();
    let mut sum = T::zero();
    for &x in xs {
        let e = (x - max).exp();
        weights.push(e);
        sum += e;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    max + sum.ln()
}

/// Mean circle loss over the batch anchors with its exact gradient.
///
/// Anchor `i` contributes
/// `log(1 + sum_j exp(beta_p (d_ij - delta_p)) * sum_k exp(beta_n (delta_n - d_ik)))`
/// where `j` ranges over its positives and `k` over the chosen negatives.
pub fn circle_loss<T: Real>(
    src: &DescriptorSet<T>,
    tgt: &DescriptorSet<T>,
    batch: &SampleBatch,
    negatives: Negatives,
    params: &CircleLossParams,
) -> Result<CircleLoss<T>> {
    params.validate()?;
    if src.dim() != tgt.dim() {
        return Err(Error::validation("source and target descriptors differ in dimension"));
    }
    if batch.is_empty() {
        return Err(Error::validation("sample batch is empty"));
    }
    batch.validate_against(src.len(), tgt.len())?;

    let gamma = T::of(params.gamma);
    let (dp, dn) = (T::of(params.delta_p), T::of(params.delta_n));
    let (op, on) = (T::of(params.optimum_p), T::of(params.optimum_n));
    let zero = T::zero();
    let dim = src.dim();

    let mut skipped = Vec::new();
    let mut grad_src = vec![zero; src.as_slice().len()];
    let mut grad_tgt = vec![zero; tgt.as_slice().len()];
    let mut total = zero;
    let mut used = 0usize;

    // Per-anchor scratch: distances, exponents and d(exponent)/d(distance).
    let (mut pd, mut pe, mut pg) = (Vec::new(), Vec::new(), Vec::new());
    let (mut nd, mut ne, mut ng) = (Vec::new(), Vec::new(), Vec::new());
    let (mut pw, mut nw) = (Vec::new(), Vec::new());
    // Per-anchor dL/d(distance) per pair; applied after the mean is known.
    let mut pending: Vec<(usize, usize, T, T)> = Vec::new();

    for (i, &a) in batch.anchors.iter().enumerate() {
        if let Some(reason) = batch.skip_reason(i, negatives) {
            skipped.push((a, reason));
            continue;
        }
        let pos = &batch.positives[i];
        let neg = &batch.negatives(negatives)[i];
        let anchor = src.row(a);

        pd.clear();
        pe.clear();
        pg.clear();
        for &j in pos {
            let d = distance(anchor, tgt.row(j));
            let w = (d - op).max(zero);
            pd.push(d);
            pe.push(gamma * w * (d - dp));
            let step = if d > op { d - dp } else { zero };
            pg.push(gamma * (step + w));
        }
        nd.clear();
        ne.clear();
        ng.clear();
        for &k in neg {
            let d = distance(anchor, tgt.row(k));
            let w = (on - d).max(zero);
            nd.push(d);
            ne.push(gamma * w * (dn - d));
            let step = if d < on { dn - d } else { zero };
            ng.push(-gamma * (step + w));
        }

        let lse_p = log_sum_exp(&pe, &mut pw);
        let lse_n = log_sum_exp(&ne, &mut nw);
        let z = lse_p + lse_n;
        total += softplus(z);
        used += 1;

        let s = sigmoid(z);
        for (idx, &j) in pos.iter().enumerate() {
            pending.push((a, j, s * pw[idx] * pg[idx], pd[idx]));
        }
        for (idx, &k) in neg.iter().enumerate() {
            pending.push((a, k, s * nw[idx] * ng[idx], nd[idx]));
        }
    }

    if used == 0 {
        return Err(Error::DegenerateBatch {
            anchors: batch.len(),
        });
    }

    let inv = T::one() / T::of_usize(used);
    for (a, j, dl_dd, d) in pending {
        if !(d > zero) || dl_dd == zero {
            continue;
        }
        let scale = dl_dd * inv / d;
        let (xa, yj) = (src.row(a), tgt.row(j));
        for c in 0..dim {
            let g = scale * (xa[c] - yj[c]);
            grad_src[a * dim + c] += g;
            grad_tgt[j * dim + c] -= g;
        }
    }

    Ok(CircleLoss {
        loss: total * inv,
        grad_src,
        grad_tgt,
        used_anchors: used,
        skipped,
    })
}
