//! Evaluation quantities: accuracy, calibration, time-to-accuracy, worst-client
//! accuracy, total gradient variance and simplex loss surfaces.

use rand::RngCore;

use crate::error::{FlocoError, Result};
use crate::model::{Classifier, ModelState};
use crate::numerics::{sample_uniform_simplex, squared_distance, RealMatrix};
use crate::partition::LabeledDataset;
use crate::simplex::SimplexPoint;

pub const DEFAULT_ECE_BINS: usize = 10;

/// Metrics recorded at one evaluation round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_acc: f64,
    pub mean_local_acc: f64,
    pub global_ece: f64,
    pub mean_local_ece: f64,
    pub total_grad_variance: f64,
    pub worst5_local_acc: f64,
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_from_probs(probs: &RealMatrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(FlocoError::Empty("accuracy of an empty dataset".into()));
    }
    if probs.rows() != labels.len() {
        return Err(FlocoError::dims("probability rows vs labels"));
    }
    let correct = probs
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn accuracy<C: Classifier + ?Sized>(predictor: &C, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(FlocoError::Empty("accuracy of an empty dataset".into()));
    }
    accuracy_from_probs(&predictor.predict_proba(data.features())?, data.labels())
}

/// Binned expected calibration error with `bins` equal-width confidence bins
/// over `(0, 1]`, confidence being the top class probability.
pub fn ece(probs: &RealMatrix, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(FlocoError::invalid("ECE needs at least one bin"));
    }
    if labels.is_empty() {
        return Err(FlocoError::Empty("ECE of an empty dataset".into()));
    }
    if probs.rows() != labels.len() {
        return Err(FlocoError::dims("probability rows vs labels"));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for (row, &y) in probs.iter_rows().zip(labels) {
        let valid = row.iter().all(|&p| (0.0..=1.0 + 1e-9).contains(&p))
            && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-6;
        if !valid || y >= row.len() {
            return Err(FlocoError::invalid("row is not a probability vector"));
        }
        let pred = argmax(row);
        let c = row[pred];
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += c;
        if pred == y {
            hits[b] += 1.0;
        }
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n)
        .sum())
}

/// How the method curve relates to the baseline target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtaFlag {
    Reached,
    /// The method's first evaluation already exceeded the target.
    Underlined,
    DidNotReach,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtaOutcome {
    pub improvement: f64,
    pub flag: TtaFlag,
    pub target: f64,
    pub baseline_round: usize,
    pub method_round: Option<usize>,
}

fn first_reaching(curve: &[(usize, f64)], target: f64) -> Option<usize> {
    curve.iter().find(|(_, acc)| *acc >= target).map(|(r, _)| *r)
}

/// Ratio of the rounds the baseline and the method need to reach the
/// baseline's best accuracy. Both curves must share their evaluation rounds.
pub fn tta_improvement(baseline: &[(usize, f64)], method: &[(usize, f64)]) -> Result<TtaOutcome> {
    if baseline.is_empty() || method.is_empty() {
        return Err(FlocoError::Empty("time-to-accuracy of an empty curve".into()));
    }
    if baseline.len() != method.len() || baseline.iter().zip(method).any(|(a, b)| a.0 != b.0) {
        return Err(FlocoError::invalid("curves use different evaluation rounds"));
    }
    let target = baseline.iter().map(|(_, a)| *a).fold(f64::NEG_INFINITY, f64::max);
    let baseline_round = first_reaching(baseline, target).expect("maximum is attained");
    match first_reaching(method, target) {
        None => Ok(TtaOutcome {
            improvement: 0.0,
            flag: TtaFlag::DidNotReach,
            target,
            baseline_round,
            method_round: None,
        }),
        Some(round) => {
            let flag = if method[0].1 > target {
                TtaFlag::Underlined
            } else {
                TtaFlag::Reached
            };
            Ok(TtaOutcome {
                improvement: baseline_round as f64 / round as f64,
                flag,
                target,
                baseline_round,
                method_round: Some(round),
            })
        }
    }
}

/// Mean of the lowest `ceil(fraction * K)` accuracies.
pub fn worst_fraction_accuracy(local_accs: &[f64], fraction: f64) -> Result<f64> {
    if local_accs.is_empty() {
        return Err(FlocoError::Empty("no local accuracies".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FlocoError::invalid(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let k = local_accs.len();
    let take = ((fraction * k as f64 - 1e-9).ceil() as usize).clamp(1, k);
    let mut sorted = local_accs.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[..take].iter().sum::<f64>() / take as f64)
}

fn spread_around_mean(vectors: &[&[f64]]) -> f64 {
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x / n;
        }
    }
    vectors.iter().map(|v| squared_distance(v, &mean)).sum()
}

/// `sum_k ||dw_k - mean(dw)||^2` over per-client flat updates.
pub fn total_gradient_variance_flat(updates: &[Vec<f64>]) -> Result<f64> {
    if updates.len() < 2 {
        return Err(FlocoError::invalid("gradient variance needs at least 2 updates"));
    }
    let len = updates[0].len();
    if updates.iter().any(|u| u.len() != len) {
        return Err(FlocoError::dims("updates have unequal lengths"));
    }
    let refs: Vec<&[f64]> = updates.iter().map(Vec::as_slice).collect();
    Ok(spread_around_mean(&refs))
}

/// Endpoint form: the flat variance of each endpoint's updates, averaged
/// over the `M + 1` endpoints. `updates[k][m]` is client `k`'s update of
/// endpoint `m`.
pub fn total_gradient_variance_endpoints(updates: &[Vec<Vec<f64>>]) -> Result<f64> {
    if updates.len() < 2 {
        return Err(FlocoError::invalid("gradient variance needs at least 2 updates"));
    }
    let endpoints = updates[0].len();
    if endpoints == 0 || updates.iter().any(|u| u.len() != endpoints) {
        return Err(FlocoError::dims("clients report different endpoint counts"));
    }
    let len = updates[0][0].len();
    if updates.iter().flatten().any(|e| e.len() != len) {
        return Err(FlocoError::dims("endpoint updates have unequal lengths"));
    }
    let total: f64 = (0..endpoints)
        .map(|m| {
            let refs: Vec<&[f64]> = updates.iter().map(|u| u[m].as_slice()).collect();
            spread_around_mean(&refs)
        })
        .sum();
    Ok(total / endpoints as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceTag {
    Sample,
    Center,
    Vertex,
}

impl SurfaceTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Sample => "sample",
            Self::Center => "center",
            Self::Vertex => "vertex",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePoint {
    pub alpha: SimplexPoint,
    pub loss: f64,
    pub accuracy: f64,
    pub tag: SurfaceTag,
}

/// Loss and accuracy on `data` at `n_points` uniform simplex draws, followed
/// by the center and then every vertex in order.
pub fn loss_surface_grid<R: RngCore + ?Sized>(
    model: &ModelState,
    data: &LabeledDataset,
    n_points: usize,
    rng: &mut R,
) -> Result<Vec<SurfacePoint>> {
    let dims = model.simplex_dim();
    let mut points: Vec<(SimplexPoint, SurfaceTag)> = (0..n_points)
        .map(|_| (sample_uniform_simplex(dims, rng), SurfaceTag::Sample))
        .collect();
    points.push((SimplexPoint::center(dims), SurfaceTag::Center));
    points.extend((0..=dims).map(|m| (SimplexPoint::vertex(m, dims + 1), SurfaceTag::Vertex)));
    points
        .into_iter()
        .map(|(alpha, tag)| {
            let p = model.predictor(&alpha)?;
            let loss = p.loss(data.features(), data.labels())?;
            let accuracy = accuracy(&p, data)?;
            Ok(SurfacePoint {
                alpha,
                loss,
                accuracy,
                tag,
            })
        })
        .collect()
}
