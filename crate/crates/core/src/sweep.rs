//! Validation sweep over the calibration triangle.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{self, CalibConfig, CalibratedTask};
use crate::classifier::{PredictMode, PrototypeMode, TaskModel, Transform};
use crate::episode::{self, EvalParams};
use crate::error::{Error, Result};
use crate::feature_store::{BasePrototypeSet, FeatureDataset};

const SUM_EPS: f64 = 1e-9;

/// Lattice points `(i/L, j/L)` with `i + j <= L`, where `L = 1/step`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    step: f64,
    levels: usize,
    points: Vec<(f64, f64)>,
}

impl SweepGrid {
    pub fn new(step: f64) -> Result<Self> {
        if !(step > 0.0 && step <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sweep step {step} must be in (0, 1]"
            )));
        }
        let levels = (1.0 / step).round();
        if (levels * step - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "sweep step {step} must divide 1 evenly"
            )));
        }
        let levels = levels as usize;
        let mut points = Vec::with_capacity((levels + 1) * (levels + 2) / 2);
        for i in 0..=levels {
            for j in 0..=levels - i {
                points.push((i as f64 / levels as f64, j as f64 / levels as f64));
            }
        }
        Ok(SweepGrid {
            step,
            levels,
            points,
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid::new(0.1).expect("0.1 divides 1")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub alpha: f64,
    pub beta: f64,
    pub accuracy: f64,
    pub ci95: f64,
    #[serde(skip)]
    pub per_task_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub version: String,
    pub split: String,
    pub step: f64,
    pub lambda: f64,
    pub m: usize,
    pub prototype: PrototypeMode,
    pub params: EvalParams,
    pub entries: Vec<SweepEntry>,
    pub best: (f64, f64),
}

/// Highest accuracy; ties go to the smallest `alpha + beta`, then the
/// smallest `beta`.
pub fn select_best(entries: &[SweepEntry]) -> Result<(f64, f64)> {
    let mut it = entries.iter();
    let mut best = it
        .next()
        .ok_or_else(|| Error::Precondition("sweep has no entries".into()))?;
    for e in it {
        let better = if e.accuracy != best.accuracy {
            e.accuracy > best.accuracy
        } else {
            let (s, bs) = (e.alpha + e.beta, best.alpha + best.beta);
            if (s - bs).abs() > SUM_EPS {
                s < bs
            } else {
                e.beta < best.beta
            }
        };
        if better {
            best = e;
        }
    }
    Ok((best.alpha, best.beta))
}

/// Evaluates every grid point on one shared set of episodes. Endpoints are
/// computed once per episode; only the barycentric combination and
/// classification run per point.
pub fn grid_sweep(
    validation: &FeatureDataset,
    protos: &BasePrototypeSet,
    grid: &SweepGrid,
    calib_cfg: &CalibConfig,
    prototype: PrototypeMode,
    params: &EvalParams,
) -> Result<SweepResult> {
    let base_cfg = calib_cfg.with_weights(0.0, 0.0);
    base_cfg.validate()?;
    let episodes = episode::sample_episodes(validation, params)?;
    let calibrated: Vec<CalibratedTask> = episodes
        .par_iter()
        .enumerate()
        .map(|(t, ep)| {
            calib::calibrate_support_set(&ep.support_features(validation), protos, &base_cfg)
                .map_err(|e| Error::Task {
                    task: t,
                    seed: params.seed,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(grid.len());
    for &(alpha, beta) in grid.points() {
        let mode = PredictMode::new(
            Transform::P3dc(calib_cfg.with_weights(alpha, beta)),
            prototype,
        );
        let per_task_accuracy: Vec<f64> = episodes
            .par_iter()
            .zip(&calibrated)
            .enumerate()
            .map(|(t, (ep, task))| {
                let mut task = task.clone();
                let mut run = || -> Result<f64> {
                    task.recombine(alpha, beta)?;
                    let model = TaskModel::from_calibrated(&task, mode)?;
                    let queries = ep.query_features(validation);
                    let correct = episode::score_queries(&model, &queries)?;
                    Ok(correct as f64 / queries.len().max(1) as f64)
                };
                run().map_err(|e| Error::Task {
                    task: t,
                    seed: params.seed,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        let (accuracy, ci95) = episode::confidence_interval(&per_task_accuracy)?;
        entries.push(SweepEntry {
            alpha,
            beta,
            accuracy,
            ci95,
            per_task_accuracy,
        });
    }
    let best = select_best(&entries)?;
    Ok(SweepResult {
        version: episode::BUILD_VERSION.to_string(),
        split: validation.split().to_string(),
        step: grid.step(),
        lambda: calib_cfg.lambda,
        m: calib_cfg.m,
        prototype,
        params: *params,
        entries,
        best,
    })
}

impl SweepResult {
    pub fn entry(&self, alpha: f64, beta: f64) -> Option<&SweepEntry> {
        self.entries
            .iter()
            .find(|e| (e.alpha - alpha).abs() < SUM_EPS && (e.beta - beta).abs() < SUM_EPS)
    }

    pub fn best_entry(&self) -> &SweepEntry {
        self.entry(self.best.0, self.best.1)
            .expect("best is one of the entries")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sweep result serializes");
        s.push('\n');
        s
    }

    pub fn heatmap_csv(&self) -> String {
        let mut rows: Vec<&SweepEntry> = self.entries.iter().collect();
        rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha).then(a.beta.total_cmp(&b.beta)));
        let mut out = String::from("alpha,beta,accuracy,ci95\n");
        for e in rows {
            writeln!(
                out,
                "{:.4},{:.4},{:.4},{:.4}",
                e.alpha, e.beta, e.accuracy, e.ci95
            )
            .unwrap();
        }
        out
    }
}

pub fn emit_heatmap_csv(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, result.heatmap_csv()).map_err(|e| Error::io(path, e))
}
