//! Episode sampling and the evaluation loop.
//!
//! # Reproducibility
//!
//! Task `t` of a run with seed `s` draws from a ChaCha8 generator seeded
//! with `s` (via `SeedableRng::seed_from_u64`) and switched to stream `t`.
//! Within a task, classes are drawn first by a partial Fisher-Yates shuffle
//! of the split's class ids in ascending order; then, for each drawn class
//! in draw order, `k + q` record indices are drawn by a partial Fisher-Yates
//! shuffle of that class's records in file order. The first `k` become
//! support, the next `q` queries. Because every task owns its stream, serial
//! and parallel runs produce identical episodes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib;
use crate::classifier::{PredictMode, TaskModel};
use crate::error::{Error, Result};
use crate::feature_store::{BasePrototypeSet, FeatureDataset};

pub const BUILD_VERSION: &str = env!("P3DC_BUILD_VERSION");

/// z-value for a two-sided 95% interval.
pub const Z95: f64 = 1.96;

pub fn episode_rng(seed: u64, task: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64);
    rng
}

/// One N-way K-shot task. Features stay in the dataset; the episode holds
/// record indices and local labels `0..way`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub support: Vec<(usize, u32)>,
    pub query: Vec<(usize, u32)>,
    /// Local label to original class id.
    pub class_map: Vec<u32>,
}

impl Episode {
    pub fn support_features<'a>(&self, split: &'a FeatureDataset) -> Vec<(&'a [f32], u32)> {
        self.support
            .iter()
            .map(|&(r, l)| (split.feature(r), l))
            .collect()
    }

    pub fn query_features<'a>(&self, split: &'a FeatureDataset) -> Vec<(&'a [f32], u32)> {
        self.query
            .iter()
            .map(|&(r, l)| (split.feature(r), l))
            .collect()
    }
}

fn partial_shuffle<T, R: Rng + ?Sized>(items: &mut [T], amount: usize, rng: &mut R) {
    let len = items.len();
    for i in 0..amount.min(len) {
        let j = rng.random_range(i..len);
        items.swap(i, j);
    }
}

pub fn check_capacity(split: &FeatureDataset, n: usize, k: usize, q: usize) -> Result<()> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidConfig("way and shot must be positive".into()));
    }
    if split.num_classes() < n {
        return Err(Error::Capacity(format!(
            "{n}-way episodes need {n} classes, split `{}` has {} (short by {})",
            split.split(),
            split.num_classes(),
            n - split.num_classes()
        )));
    }
    let need = k + q;
    for (&c, recs) in split.class_index() {
        if recs.len() < need {
            return Err(Error::Capacity(format!(
                "class {c} has {} records, episodes need {need} (short by {})",
                recs.len(),
                need - recs.len()
            )));
        }
    }
    Ok(())
}

pub fn sample_episode<R: Rng + ?Sized>(
    split: &FeatureDataset,
    n: usize,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode> {
    check_capacity(split, n, k, q)?;
    let mut classes: Vec<u32> = split.class_ids().collect();
    partial_shuffle(&mut classes, n, rng);
    classes.truncate(n);

    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * q);
    for (local, &c) in classes.iter().enumerate() {
        let mut recs = split.records_of(c).to_vec();
        partial_shuffle(&mut recs, k + q, rng);
        let local = local as u32;
        support.extend(recs[..k].iter().map(|&r| (r, local)));
        query.extend(recs[k..k + q].iter().map(|&r| (r, local)));
    }
    Ok(Episode {
        way: n,
        shot: k,
        queries_per_class: q,
        support,
        query,
        class_map: classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalParams {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub tasks: usize,
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            way: 5,
            shot: 1,
            queries: 15,
            tasks: 2000,
            seed: 0,
        }
    }
}

/// Episodes for tasks `0..params.tasks`.
pub fn sample_episodes(split: &FeatureDataset, params: &EvalParams) -> Result<Vec<Episode>> {
    check_capacity(split, params.way, params.shot, params.queries)?;
    if params.tasks == 0 {
        return Err(Error::InvalidConfig("task count must be positive".into()));
    }
    (0..params.tasks)
        .into_par_iter()
        .map(|t| {
            let mut rng = episode_rng(params.seed, t);
            sample_episode(split, params.way, params.shot, params.queries, &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskOutcome {
    pub accuracy: f64,
    pub calib_seconds: f64,
    pub classify_seconds: f64,
    pub clamped: usize,
}

/// Classifies every query of an already fitted task.
pub fn score_queries(model: &TaskModel, queries: &[(&[f32], u32)]) -> Result<usize> {
    let mut correct = 0;
    for &(q, label) in queries {
        if model.predict(q)?.class_id == label {
            correct += 1;
        }
    }
    Ok(correct)
}

pub fn run_task(
    split: &FeatureDataset,
    protos: &BasePrototypeSet,
    mode: &PredictMode,
    episode: &Episode,
) -> Result<TaskOutcome> {
    let support = episode.support_features(split);
    let queries = episode.query_features(split);

    let start = Instant::now();
    let model = TaskModel::fit(&support, protos, mode)?;
    let calib_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let correct = score_queries(&model, &queries)?;
    let classify_seconds = start.elapsed().as_secs_f64();

    Ok(TaskOutcome {
        accuracy: correct as f64 / queries.len().max(1) as f64,
        calib_seconds,
        classify_seconds,
        clamped: model.clamped(),
    })
}

fn in_task(task: usize, seed: u64) -> impl Fn(Error) -> Error {
    move |e| Error::Task {
        task,
        seed,
        source: Box::new(e),
    }
}

/// Runs `mode` over pre-sampled episodes. Results are in episode order.
pub fn evaluate_episodes(
    split: &FeatureDataset,
    protos: &BasePrototypeSet,
    mode: &PredictMode,
    episodes: &[Episode],
    seed: u64,
) -> Result<Vec<TaskOutcome>> {
    mode.validate()?;
    episodes
        .par_iter()
        .enumerate()
        .map(|(t, ep)| run_task(split, protos, mode, ep).map_err(in_task(t, seed)))
        .collect()
}

/// Mean and 95% half-width `1.96 * s / sqrt(T)` with the `n - 1` sample
/// standard deviation. A single value has half-width zero.
pub fn confidence_interval(accs: &[f64]) -> Result<(f64, f64)> {
    if accs.is_empty() {
        return Err(Error::Precondition("no accuracies to summarize".into()));
    }
    if accs.iter().all(|&a| a == accs[0]) {
        return Ok((accs[0], 0.0));
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, Z95 * var.sqrt() / n.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub calib_seconds_per_task: f64,
    pub classify_seconds_per_task: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub split: String,
    pub mode: PredictMode,
    pub params: EvalParams,
    pub mean: f64,
    pub ci95_halfwidth: f64,
    /// Negative entries clamped by the power transform over the whole run.
    pub clamped_entries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    pub per_task_accuracy: Vec<f64>,
}

impl EvalReport {
    pub fn from_outcomes(
        split: &FeatureDataset,
        mode: &PredictMode,
        params: &EvalParams,
        outcomes: &[TaskOutcome],
    ) -> Result<Self> {
        let per_task_accuracy: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
        let (mean, ci95_halfwidth) = confidence_interval(&per_task_accuracy)?;
        let t = outcomes.len() as f64;
        Ok(EvalReport {
            version: BUILD_VERSION.to_string(),
            split: split.split().to_string(),
            mode: *mode,
            params: *params,
            mean,
            ci95_halfwidth,
            clamped_entries: outcomes.iter().map(|o| o.clamped).sum(),
            timing: Some(Timing {
                calib_seconds_per_task: outcomes.iter().map(|o| o.calib_seconds).sum::<f64>() / t,
                classify_seconds_per_task: outcomes.iter().map(|o| o.classify_seconds).sum::<f64>()
                    / t,
            }),
            per_task_accuracy,
        })
    }

    pub fn without_timing(mut self) -> Self {
        self.timing = None;
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Samples `params.tasks` episodes from `split` and evaluates `mode` on
/// each. Uses the current rayon pool; results do not depend on its size.
pub fn evaluate(
    split: &FeatureDataset,
    protos: &BasePrototypeSet,
    mode: &PredictMode,
    params: &EvalParams,
) -> Result<EvalReport> {
    mode.validate()?;
    let episodes = sample_episodes(split, params)?;
    let outcomes = evaluate_episodes(split, protos, mode, &episodes, params.seed)?;
    let report = EvalReport::from_outcomes(split, mode, params, &outcomes)?;
    if report.clamped_entries > 0 {
        log::warn!(
            "clamped {} negative feature entries to zero in split `{}`",
            report.clamped_entries,
            split.split()
        );
    }
    Ok(report)
}

/// Mean wall time of calibrating each episode's support set.
pub fn time_calibration(
    split: &FeatureDataset,
    protos: &BasePrototypeSet,
    cfg: &calib::CalibConfig,
    episodes: &[Episode],
) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        let support = ep.support_features(split);
        let start = Instant::now();
        let task = calib::calibrate_support_set(&support, protos, cfg)?;
        total += start.elapsed().as_secs_f64();
        std::hint::black_box(task);
    }
    Ok(total / episodes.len().max(1) as f64)
}
