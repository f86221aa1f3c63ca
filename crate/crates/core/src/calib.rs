//! Prior-driven discrete calibration of support features.
//!
//! Each support feature `x` is normalized (`x̄`), power-transformed (`x̃`),
//! and shifted toward softmax-weighted base prototypes twice: once using
//! its own top-M prototypes (sample-level endpoint `s̄`) and once using the
//! union of every support sample's top-M prototypes in the task (task-level
//! endpoint `t̄`). The calibrated feature is the normalized barycentric
//! combination `(1 - α - β) x̄ + α s̄ + β t̄`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::BasePrototypeSet;
use crate::vector;

/// Slack allowed on `alpha + beta <= 1` for lattice values such as 0.3 + 0.7.
pub const BARYCENTRIC_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub lambda: f64,
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Clamp negative entries to zero before a fractional power instead of
    /// failing. Clamped entries are counted.
    #[serde(default)]
    pub clamp_negative: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            lambda: 0.5,
            m: 5,
            alpha: 0.0,
            beta: 0.0,
            clamp_negative: false,
        }
    }
}

impl CalibConfig {
    pub fn with_weights(self, alpha: f64, beta: f64) -> Self {
        CalibConfig {
            alpha,
            beta,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda {} is not finite",
                self.lambda
            )));
        }
        check_weights(self.alpha, self.beta)
    }
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    let ok = alpha.is_finite()
        && beta.is_finite()
        && alpha >= 0.0
        && beta >= 0.0
        && alpha + beta <= 1.0 + BARYCENTRIC_SLACK;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "alpha={alpha}, beta={beta}: need alpha >= 0, beta >= 0, alpha + beta <= 1"
        )))
    }
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = vector::norm(v);
    if n.is_nan() || n <= 0.0 {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Elementwise `v^λ`, or `ln v` when `λ = 0`. Negative inputs are rejected
/// for fractional exponents.
pub fn tukey_transform(v: &[f32], lambda: f64) -> Result<Vec<f32>> {
    tukey_transform_with(v, lambda, false).map(|(out, _)| out)
}

/// Like [`tukey_transform`], optionally clamping negative entries to zero
/// for fractional exponents. Returns the transformed vector and the number
/// of clamped entries.
pub fn tukey_transform_with(
    v: &[f32],
    lambda: f64,
    clamp_negative: bool,
) -> Result<(Vec<f32>, usize)> {
    if lambda == 0.0 {
        if let Some(pos) = v.iter().position(|&x| x <= 0.0) {
            return Err(Error::Domain(format!(
                "log transform needs positive entries, found {} at coordinate {pos}",
                v[pos]
            )));
        }
        return Ok((v.iter().map(|&x| (x as f64).ln() as f32).collect(), 0));
    }
    if lambda == 1.0 {
        return Ok((v.to_vec(), 0));
    }
    let integral = lambda.fract() == 0.0;
    let mut clamped = 0;
    let mut out = Vec::with_capacity(v.len());
    for (i, &x) in v.iter().enumerate() {
        let mut x = x as f64;
        if x < 0.0 && !integral {
            if !clamp_negative {
                return Err(Error::Domain(format!(
                    "negative entry {x} at coordinate {i} with fractional lambda {lambda}"
                )));
            }
            clamped += 1;
            x = 0.0;
        }
        let y = if lambda == 0.5 {
            x.sqrt()
        } else {
            x.powf(lambda)
        };
        out.push(y as f32);
    }
    Ok((out, clamped))
}

/// Top-M base prototypes for one transformed support feature.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    /// Positions in the [`BasePrototypeSet`], most similar first.
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Inner products of `x` with every prototype.
pub fn similarities(x: &[f32], protos: &BasePrototypeSet) -> Vec<f64> {
    (0..protos.len())
        .map(|j| vector::dot(x, protos.prototype(j)))
        .collect()
}

pub fn top_m_prototypes(x_t: &[f32], protos: &BasePrototypeSet, m: usize) -> NeighborSet {
    top_m_from_similarities(&similarities(x_t, protos), protos, m)
}

/// Selects the `min(m, n_b)` largest similarities. Ties go to the smaller
/// class id, so the result does not depend on prototype order.
pub fn top_m_from_similarities(sims: &[f64], protos: &BasePrototypeSet, m: usize) -> NeighborSet {
    let order = |&a: &usize, &b: &usize| {
        sims[b]
            .total_cmp(&sims[a])
            .then_with(|| protos.class_id(a).cmp(&protos.class_id(b)))
    };
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    let m = m.min(idx.len());
    if m > 0 && m < idx.len() {
        idx.select_nth_unstable_by(m - 1, order);
        idx.truncate(m);
    }
    idx.sort_unstable_by(order);
    idx.truncate(m);
    NeighborSet {
        similarities: idx.iter().map(|&j| sims[j]).collect(),
        indices: idx,
    }
}

/// Softmax of `⟨x̃, p_j⟩` over `subset`, aligned with `subset`.
pub fn softmax_weights(x_t: &[f32], protos: &BasePrototypeSet, subset: &[usize]) -> Vec<f64> {
    let logits: Vec<f64> = subset
        .iter()
        .map(|&j| vector::dot(x_t, protos.prototype(j)))
        .collect();
    vector::softmax(&logits)
}

/// `x̃ + Σ_j w_j p_j` with softmax weights over the given logits.
fn shifted_endpoint(
    x_t: &[f32],
    protos: &BasePrototypeSet,
    indices: &[usize],
    logits: &[f64],
) -> Vec<f64> {
    let weights = vector::softmax(logits);
    let mut acc = vector::to_f64(x_t);
    for (&j, &w) in indices.iter().zip(&weights) {
        vector::accumulate(&mut acc, protos.prototype(j), w);
    }
    acc
}

/// Unnormalized sample-level endpoint `s = x̃ + Σ_{j∈Λ_i} w_ij p_j`.
pub fn sample_level_endpoint(
    x_t: &[f32],
    protos: &BasePrototypeSet,
    neighbors: &NeighborSet,
) -> Vec<f32> {
    let e = shifted_endpoint(x_t, protos, &neighbors.indices, &neighbors.similarities);
    vector::scaled_to_f32(&e, 1.0)
}

/// Union of the neighbor sets of every support sample in a task.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskNeighborUnion {
    /// Sorted, distinct prototype positions.
    pub indices: Vec<usize>,
}

impl TaskNeighborUnion {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

pub fn task_union<'a, I>(neighbor_sets: I) -> TaskNeighborUnion
where
    I: IntoIterator<Item = &'a NeighborSet>,
{
    let set: BTreeSet<usize> = neighbor_sets
        .into_iter()
        .flat_map(|n| n.indices.iter().copied())
        .collect();
    TaskNeighborUnion {
        indices: set.into_iter().collect(),
    }
}

/// Unnormalized task-level endpoint `t = x̃ + Σ_{j∈Λ_T} w_ij p_j`.
pub fn task_level_endpoint(
    x_t: &[f32],
    protos: &BasePrototypeSet,
    union: &TaskNeighborUnion,
) -> Vec<f32> {
    let logits: Vec<f64> = union
        .indices
        .iter()
        .map(|&j| vector::dot(x_t, protos.prototype(j)))
        .collect();
    let e = shifted_endpoint(x_t, protos, &union.indices, &logits);
    vector::scaled_to_f32(&e, 1.0)
}

/// `normalize((1 - α - β) x̄ + α s̄ + β t̄)`.
///
/// The three triangle corners return the matching input unchanged.
pub fn unified_calibrate(
    xbar: &[f32],
    sbar: &[f32],
    tbar: &[f32],
    alpha: f64,
    beta: f64,
) -> Result<Vec<f32>> {
    check_weights(alpha, beta)?;
    match (alpha, beta) {
        (a, b) if a == 0.0 && b == 0.0 => return Ok(xbar.to_vec()),
        (a, b) if a == 1.0 && b == 0.0 => return Ok(sbar.to_vec()),
        (a, b) if a == 0.0 && b == 1.0 => return Ok(tbar.to_vec()),
        _ => {}
    }
    let gamma = 1.0 - alpha - beta;
    let combo: Vec<f64> = xbar
        .iter()
        .zip(sbar)
        .zip(tbar)
        .map(|((&x, &s), &t)| gamma * x as f64 + alpha * s as f64 + beta * t as f64)
        .collect();
    vector::normalize_f64(&combo)
}

/// Every intermediate of calibrating one support sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedSupport {
    pub class_id: u32,
    pub original: Vec<f32>,
    pub normalized: Vec<f32>,
    pub transformed: Vec<f32>,
    pub neighbors: NeighborSet,
    pub sample_endpoint: Vec<f32>,
    pub task_endpoint: Vec<f32>,
    pub calibrated: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedTask {
    pub samples: Vec<CalibratedSupport>,
    pub union: TaskNeighborUnion,
    /// Negative entries clamped by the power transform.
    pub clamped: usize,
}

impl CalibratedTask {
    /// Recomputes the calibrated vectors for new barycentric weights. The
    /// endpoints do not depend on `alpha` and `beta`.
    pub fn recombine(&mut self, alpha: f64, beta: f64) -> Result<()> {
        for (i, s) in self.samples.iter_mut().enumerate() {
            s.calibrated = unified_calibrate(
                &s.normalized,
                &s.sample_endpoint,
                &s.task_endpoint,
                alpha,
                beta,
            )
            .map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    pub fn calibrated(&self) -> impl Iterator<Item = (&[f32], u32)> + '_ {
        self.samples
            .iter()
            .map(|s| (s.calibrated.as_slice(), s.class_id))
    }
}

fn at_sample(index: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Sample {
        index,
        source: Box::new(e),
    }
}

/// Runs the four calibration steps over a task's support set: top-M
/// prototypes per sample, sample-level endpoints, task-level endpoints over
/// the union, and the barycentric combination.
pub fn calibrate_support_set(
    support: &[(&[f32], u32)],
    protos: &BasePrototypeSet,
    cfg: &CalibConfig,
) -> Result<CalibratedTask> {
    cfg.validate()?;
    if support.is_empty() {
        return Err(Error::Precondition("support set is empty".into()));
    }
    if protos.is_empty() {
        return Err(Error::Precondition("base prototype set is empty".into()));
    }

    let mut clamped = 0;
    let mut staged = Vec::with_capacity(support.len());
    for (i, &(x, class_id)) in support.iter().enumerate() {
        if x.len() != protos.dim() {
            return Err(at_sample(i)(Error::Schema(format!(
                "feature length {} does not match prototype dim {}",
                x.len(),
                protos.dim()
            ))));
        }
        let normalized = l2_normalize(x).map_err(at_sample(i))?;
        let (transformed, c) =
            tukey_transform_with(x, cfg.lambda, cfg.clamp_negative).map_err(at_sample(i))?;
        clamped += c;
        let sims = similarities(&transformed, protos);
        let neighbors = top_m_from_similarities(&sims, protos, cfg.m);
        staged.push((class_id, normalized, transformed, sims, neighbors));
    }

    let union = task_union(staged.iter().map(|s| &s.4));

    let mut samples = Vec::with_capacity(staged.len());
    for (i, (class_id, normalized, transformed, sims, neighbors)) in staged.into_iter().enumerate()
    {
        let s = shifted_endpoint(
            &transformed,
            protos,
            &neighbors.indices,
            &neighbors.similarities,
        );
        let sample_endpoint = vector::normalize_f64(&s).map_err(at_sample(i))?;
        let union_logits: Vec<f64> = union.indices.iter().map(|&j| sims[j]).collect();
        let t = shifted_endpoint(&transformed, protos, &union.indices, &union_logits);
        let task_endpoint = vector::normalize_f64(&t).map_err(at_sample(i))?;
        let calibrated = unified_calibrate(
            &normalized,
            &sample_endpoint,
            &task_endpoint,
            cfg.alpha,
            cfg.beta,
        )
        .map_err(at_sample(i))?;
        samples.push(CalibratedSupport {
            class_id,
            original: support[i].0.to_vec(),
            normalized,
            transformed,
            neighbors,
            sample_endpoint,
            task_endpoint,
            calibrated,
        });
    }

    Ok(CalibratedTask {
        samples,
        union,
        clamped,
    })
}
