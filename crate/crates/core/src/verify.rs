//! Independent oracles for the training losses: direct scalar-loop
//! evaluations and central finite-difference gradient checks.
//!
//! Nothing here calls into the loss implementations' internals; the loss
//! functions are only invoked as black boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::descriptors::{DescriptorSet, Level};
use crate::error::Result;
use crate::training::{
    circle_loss, overlap_loss, rating_loss, CircleLossParams, Negatives, SampleBatch, TargetScores,
};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative error allowed between analytic and finite-difference gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Relative error allowed for the (quadratic) rating loss gradient.
pub const RATING_GRAD_TOLERANCE: f64 = 1e-6;
/// Absolute error allowed between a loss and its scalar-loop evaluation.
pub const VALUE_TOLERANCE: f64 = 1e-10;
/// Coordinates probed per gradient check.
pub const PROBES: usize = 20;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], coord: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[coord] = x[coord] + h;
    let up = f(&xp);
    xp[coord] = x[coord] - h;
    let down = f(&xp);
    (up - down) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        acc += d * d;
    }
    acc.sqrt()
}

/// Direct evaluation of the mean circle loss, without log-sum-exp
/// stabilization. Returns `None` if every anchor lacks a required set.
pub fn circle_loss_reference(
    src: &DescriptorSet<f64>,
    tgt: &DescriptorSet<f64>,
    batch: &SampleBatch,
    negatives: Negatives,
    p: &CircleLossParams,
) -> Option<f64> {
    let negs = match negatives {
        Negatives::Global => &batch.global_negatives,
        Negatives::Local => &batch.local_negatives,
    };
    let mut total = 0.0;
    let mut used = 0;
    for i in 0..batch.anchors.len() {
        if batch.positives[i].is_empty() || negs[i].is_empty() {
            continue;
        }
        let a = src.row(batch.anchors[i]);
        let mut sum_p = 0.0;
        for &j in &batch.positives[i] {
            let d = dist(a, tgt.row(j));
            let beta = p.gamma * f64::max(0.0, d - p.optimum_p);
            sum_p += (beta * (d - p.delta_p)).exp();
        }
        let mut sum_n = 0.0;
        for &k in &negs[i] {
            let d = dist(a, tgt.row(k));
            let beta = p.gamma * f64::max(0.0, p.optimum_n - d);
            sum_n += (beta * (p.delta_n - d)).exp();
        }
        total += (1.0 + sum_p * sum_n).ln();
        used += 1;
    }
    (used > 0).then(|| total / used as f64)
}

pub fn rating_loss_reference(scores: &[f64], ranks: &[u8], t: &TargetScores) -> f64 {
    let table = [t.c0, t.c1, t.c2, t.c3];
    let mut acc = 0.0;
    for i in 0..scores.len() {
        let e = scores[i] - table[ranks[i] as usize];
        acc += e * e;
    }
    acc / scores.len() as f64
}

pub fn overlap_loss_reference(pred: &[f64], labels: &[bool]) -> f64 {
    let mut acc = 0.0;
    for i in 0..pred.len() {
        let q = pred[i].clamp(1e-7, 1.0 - 1e-7);
        acc += if labels[i] { -q.ln() } else { -(1.0 - q).ln() };
    }
    acc / pred.len() as f64
}

/// A random circle-loss problem: `anchors` source rows, each with four
/// positives drawn near it and a dozen negatives of each kind drawn from
/// unrelated rows.
pub fn random_circle_instance(
    rng: &mut ChaCha8Rng,
    anchors: usize,
    dim: usize,
) -> (DescriptorSet<f64>, DescriptorSet<f64>, SampleBatch) {
    const POSITIVES: usize = 4;
    let n_near = anchors * POSITIVES;
    let n_tgt = n_near + anchors * 4;
    let mut src = Vec::with_capacity(anchors * dim);
    for _ in 0..anchors * dim {
        src.push(rng.random_range(-0.6..0.6));
    }
    let mut tgt = Vec::with_capacity(n_tgt * dim);
    for r in 0..n_tgt {
        for c in 0..dim {
            let v = if r < n_near {
                src[(r / POSITIVES) * dim + c] + rng.random_range(-0.2..0.2)
            } else {
                rng.random_range(-0.6..0.6)
            };
            tgt.push(v);
        }
    }
    let mut batch = SampleBatch::default();
    for a in 0..anchors {
        batch.anchors.push(a);
        batch.positives.push((a * POSITIVES..(a + 1) * POSITIVES).collect());
        batch
            .global_negatives
            .push((0..12).map(|_| rng.random_range(n_near..n_tgt)).collect());
        batch
            .local_negatives
            .push((0..12).map(|_| rng.random_range(n_near..n_tgt)).collect());
    }
    (
        DescriptorSet::new(Level::High, dim, src).expect("finite"),
        DescriptorSet::new(Level::High, dim, tgt).expect("finite"),
        batch,
    )
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_error,
            tolerance,
            passed: max_error < tolerance,
        }
    }
}

/// Test hook: scales one loss's analytic gradient before it is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientFault {
    None,
    Circle,
    Rating,
    Overlap,
}

fn kink_distance(d: f64, p: &CircleLossParams) -> f64 {
    [p.delta_p, p.delta_n, p.optimum_p, p.optimum_n]
        .iter()
        .map(|k| (d - k).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Largest relative gradient error of the circle loss over `PROBES`
/// coordinates of one random instance.
pub fn check_circle_gradient(
    rng: &mut ChaCha8Rng,
    negatives: Negatives,
    params: &CircleLossParams,
    fault: bool,
) -> Result<f64> {
    let dim = 4;
    let (src, tgt, batch) = random_circle_instance(rng, 8, dim);
    let out = circle_loss(&src, &tgt, &batch, negatives, params)?;
    let scale = if fault { 1.01 } else { 1.0 };
    let n_src = src.as_slice().len();

    // Every (src row, tgt row) pair that enters the loss.
    let negs = batch.negatives(negatives);
    let mut pairs = Vec::new();
    for (i, &a) in batch.anchors.iter().enumerate() {
        for &j in batch.positives[i].iter().chain(&negs[i]) {
            pairs.push((a, j));
        }
    }

    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let mut attempts = 0;
    while probes < PROBES {
        attempts += 1;
        assert!(attempts < 10_000, "could not find kink-free probe coordinates");
        let (a, j) = pairs[rng.random_range(0..pairs.len())];
        let on_src = rng.random_bool(0.5);
        let c = rng.random_range(0..dim);
        let row = if on_src { a } else { j };
        let touched = pairs.iter().filter(|(pa, pj)| if on_src { *pa == row } else { *pj == row });
        if touched
            .clone()
            .any(|&(pa, pj)| kink_distance(dist(src.row(pa), tgt.row(pj)), params) < 10.0 * FD_STEP)
        {
            continue;
        }
        let analytic = scale
            * if on_src {
                out.grad_src[row * dim + c]
            } else {
                out.grad_tgt[row * dim + c]
            };
        let mut x: Vec<f64> = src.as_slice().to_vec();
        x.extend_from_slice(tgt.as_slice());
        let coord = if on_src { row * dim + c } else { n_src + row * dim + c };
        let f = |v: &[f64]| {
            let s = DescriptorSet::new(Level::High, dim, v[..n_src].to_vec()).expect("finite");
            let t = DescriptorSet::new(Level::High, dim, v[n_src..].to_vec()).expect("finite");
            circle_loss(&s, &t, &batch, negatives, params).expect("valid batch").loss
        };
        let numeric = central_difference(f, &x, coord, FD_STEP);
        worst = worst.max(relative_error(analytic, numeric));
        probes += 1;
    }
    Ok(worst)
}

pub fn check_rating_gradient(rng: &mut ChaCha8Rng, fault: bool) -> Result<f64> {
    let m = 64;
    let targets = TargetScores::default();
    let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let ranks: Vec<u8> = (0..m).map(|_| rng.random_range(0..4u8)).collect();
    let out = rating_loss(&scores, &ranks, &targets)?;
    let scale = if fault { 1.01 } else { 1.0 };
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let i = rng.random_range(0..m);
        let f = |v: &[f64]| rating_loss(v, &ranks, &targets).expect("valid").loss;
        let numeric = central_difference(f, &scores, i, FD_STEP);
        worst = worst.max(relative_error(scale * out.grad[i], numeric));
    }
    Ok(worst)
}

pub fn check_overlap_gradient(rng: &mut ChaCha8Rng, fault: bool) -> Result<f64> {
    let m = 64;
    let pred: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
    let labels: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
    let out = overlap_loss(&pred, &labels)?;
    let scale = if fault { 1.01 } else { 1.0 };
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let i = rng.random_range(0..m);
        let f = |v: &[f64]| overlap_loss(v, &labels).expect("valid").loss;
        let numeric = central_difference(f, &pred, i, FD_STEP);
        worst = worst.max(relative_error(scale * out.grad[i], numeric));
    }
    Ok(worst)
}

/// Largest absolute gap between each loss and its scalar-loop evaluation
/// over `instances` random problems: (circle global, circle local, rating,
/// overlap).
pub fn check_loss_values(rng: &mut ChaCha8Rng, instances: usize) -> Result<[f64; 4]> {
    let params = CircleLossParams::default();
    let targets = TargetScores::default();
    let mut worst = [0.0f64; 4];
    for _ in 0..instances {
        let (src, tgt, batch) = random_circle_instance(rng, 8, 4);
        for (slot, mode) in [(0, Negatives::Global), (1, Negatives::Local)] {
            let got = circle_loss(&src, &tgt, &batch, mode, &params)?.loss;
            let want = circle_loss_reference(&src, &tgt, &batch, mode, &params).expect("anchors used");
            worst[slot] = worst[slot].max((got - want).abs());
        }
        let m = 64;
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(-0.2..1.2)).collect();
        let ranks: Vec<u8> = (0..m).map(|_| rng.random_range(0..4u8)).collect();
        let got = rating_loss(&scores, &ranks, &targets)?.loss;
        worst[2] = worst[2].max((got - rating_loss_reference(&scores, &ranks, &targets)).abs());
        let pred: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        let got = overlap_loss(&pred, &labels)?.loss;
        worst[3] = worst[3].max((got - overlap_loss_reference(&pred, &labels)).abs());
    }
    Ok(worst)
}

/// Runs every value and gradient check over `rounds` random instances
/// derived from `seed`.
pub fn run_loss_checks(seed: u64, rounds: usize, fault: GradientFault) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CircleLossParams::default();
    let values = check_loss_values(&mut rng, rounds.max(1) * 10)?;
    let mut worst = [0.0f64; 4];
    for _ in 0..rounds.max(1) {
        worst[0] = worst[0].max(check_circle_gradient(&mut rng, Negatives::Global, &params, fault == GradientFault::Circle)?);
        worst[1] = worst[1].max(check_circle_gradient(&mut rng, Negatives::Local, &params, fault == GradientFault::Circle)?);
        worst[2] = worst[2].max(check_rating_gradient(&mut rng, fault == GradientFault::Rating)?);
        worst[3] = worst[3].max(check_overlap_gradient(&mut rng, fault == GradientFault::Overlap)?);
    }
    Ok(vec![
        CheckOutcome::new("circle_global_value", values[0], VALUE_TOLERANCE),
        CheckOutcome::new("circle_local_value", values[1], VALUE_TOLERANCE),
        CheckOutcome::new("rating_value", values[2], VALUE_TOLERANCE),
        CheckOutcome::new("overlap_value", values[3], VALUE_TOLERANCE),
        CheckOutcome::new("circle_global_gradient", worst[0], GRAD_TOLERANCE),
        CheckOutcome::new("circle_local_gradient", worst[1], GRAD_TOLERANCE),
        CheckOutcome::new("rating_gradient", worst[2], RATING_GRAD_TOLERANCE),
        CheckOutcome::new("overlap_gradient", worst[3], GRAD_TOLERANCE),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_a_cubic() {
        let f = |v: &[f64]| v[0].powi(3) + 2.0 * v[1];
        let g = central_difference(f, &[2.0, 1.0], 0, 1e-5);
        assert!((g - 12.0).abs() < 1e-8);
    }

    #[test]
    fn all_checks_pass_and_are_reproducible() {
        let a = run_loss_checks(7, 2, GradientFault::None).unwrap();
        assert!(a.iter().all(|c| c.passed), "{a:?}");
        assert_eq!(a, run_loss_checks(7, 2, GradientFault::None).unwrap());
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        for (fault, name) in [
            (GradientFault::Circle, "circle_global_gradient"),
            (GradientFault::Rating, "rating_gradient"),
            (GradientFault::Overlap, "overlap_gradient"),
        ] {
            let out = run_loss_checks(3, 1, fault).unwrap();
            let bad: Vec<_> = out.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            assert!(bad.contains(&name), "{fault:?}: {bad:?}");
        }
    }
}
