//! Random small calibration problems and a library-vs-oracle comparison.

use p3dc_core::classifier::{self, PredictMode, PrototypeMode, TaskModel, Transform};
use p3dc_core::{calibrate_support_set, BasePrototypeSet, CalibConfig};
use rand::seq::SliceRandom;
use rand::Rng;

use super::oracle;

pub struct Instance {
    pub protos: BasePrototypeSet,
    pub proto_pairs: Vec<(u32, Vec<f64>)>,
    pub support: Vec<(Vec<f32>, u32)>,
    pub queries: Vec<Vec<f32>>,
    pub cfg: CalibConfig,
}

fn positive(rng: &mut impl Rng, dim: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..dim).map(|_| rng.random_range(lo..hi)).collect()
}

/// d <= 8, n_b <= 10, N <= 3, K <= 3, alpha + beta <= 1.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let dim = rng.random_range(1..=8);
    let n_b = rng.random_range(1..=10);
    let way = rng.random_range(1..=3);
    let shot = rng.random_range(1..=3);
    let m = rng.random_range(1..=6);

    let mut ids: Vec<u32> = (0..40).collect();
    ids.shuffle(rng);
    let pairs: Vec<(u32, Vec<f32>)> = ids[..n_b]
        .iter()
        .map(|&c| (c, positive(rng, dim, 0.0, 1.5)))
        .collect();
    let protos = BasePrototypeSet::from_parts(dim, pairs.clone(), vec![0.0; dim]).unwrap();
    let proto_pairs = pairs.iter().map(|(c, v)| (*c, oracle::widen(v))).collect();

    let mut support = Vec::new();
    for c in 0..way as u32 {
        for _ in 0..shot {
            support.push((positive(rng, dim, 0.01, 2.0), c));
        }
    }
    let queries = (0..3).map(|_| positive(rng, dim, 0.01, 2.0)).collect();

    let (alpha, beta) = match rng.random_range(0..8) {
        0 => (0.0, 0.0),
        1 => (1.0, 0.0),
        2 => (0.0, 1.0),
        _ => {
            let (mut a, mut b): (f64, f64) = (rng.random(), rng.random());
            if a + b > 1.0 {
                a = 1.0 - a;
                b = 1.0 - b;
            }
            (a, b)
        }
    };
    let lambda = [0.5, 0.5, 0.5, 1.0, 0.0, 0.25][rng.random_range(0..6)];
    Instance {
        protos,
        proto_pairs,
        support,
        queries,
        cfg: CalibConfig {
            lambda,
            m,
            alpha,
            beta,
            clamp_negative: false,
        },
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Comparison {
    pub max_vector_dev: f64,
    pub max_weight_dev: f64,
    pub structural_mismatches: usize,
    pub prediction_mismatches: usize,
    pub predictions_checked: usize,
}

impl Comparison {
    pub fn merge(&mut self, o: Comparison) {
        self.max_vector_dev = self.max_vector_dev.max(o.max_vector_dev);
        self.max_weight_dev = self.max_weight_dev.max(o.max_weight_dev);
        self.structural_mismatches += o.structural_mismatches;
        self.prediction_mismatches += o.prediction_mismatches;
        self.predictions_checked += o.predictions_checked;
    }
}

fn dev(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

pub fn compare(inst: &Instance) -> Comparison {
    let mut out = Comparison::default();
    let cfg = &inst.cfg;
    let support_refs: Vec<(&[f32], u32)> = inst
        .support
        .iter()
        .map(|(v, c)| (v.as_slice(), *c))
        .collect();
    let task = calibrate_support_set(&support_refs, &inst.protos, cfg).unwrap();

    let widened: Vec<Vec<f64>> = inst.support.iter().map(|(v, _)| oracle::widen(v)).collect();
    let (expected, union) = oracle::calibrate(
        &widened,
        &inst.proto_pairs,
        cfg.lambda,
        cfg.m,
        cfg.alpha,
        cfg.beta,
    );

    let lib_union: Vec<u32> = task
        .union
        .indices
        .iter()
        .map(|&j| inst.protos.class_id(j))
        .collect();
    let mut lib_union_sorted = lib_union.clone();
    lib_union_sorted.sort();
    if lib_union_sorted != union {
        out.structural_mismatches += 1;
    }

    for (got, want) in task.samples.iter().zip(&expected) {
        let ids: Vec<u32> = got
            .neighbors
            .indices
            .iter()
            .map(|&j| inst.protos.class_id(j))
            .collect();
        if ids != want.neighbor_ids {
            out.structural_mismatches += 1;
        }
        for (g, w) in [
            (&got.normalized, &want.xbar),
            (&got.transformed, &want.xt),
            (&got.sample_endpoint, &want.sbar),
            (&got.task_endpoint, &want.tbar),
            (&got.calibrated, &want.xc),
        ] {
            out.max_vector_dev = out.max_vector_dev.max(dev(g, w));
        }
    }

    let classes: Vec<u32> = {
        let mut c: Vec<u32> = inst.support.iter().map(|s| s.1).collect();
        c.dedup();
        c
    };
    for proto_mode in [PrototypeMode::Average, PrototypeMode::Attentive] {
        let mode = PredictMode::new(Transform::P3dc(*cfg), proto_mode);
        let model = TaskModel::from_calibrated(&task, mode).unwrap();
        for q in &inst.queries {
            let qw = oracle::widen(q);
            let mut oracle_protos = Vec::new();
            for &c in &classes {
                let members: Vec<Vec<f64>> = expected
                    .iter()
                    .zip(&inst.support)
                    .filter(|(_, s)| s.1 == c)
                    .map(|(e, _)| e.xc.clone())
                    .collect();
                let p = match proto_mode {
                    PrototypeMode::Average => oracle::average(&members),
                    PrototypeMode::Attentive => {
                        let lib_members: Vec<&[f32]> = task
                            .samples
                            .iter()
                            .filter(|s| s.class_id == c)
                            .map(|s| s.calibrated.as_slice())
                            .collect();
                        let got_w = classifier::attention_weights(q, &lib_members);
                        let want_w = oracle::attention(&qw, &members);
                        for (g, w) in got_w.iter().zip(&want_w) {
                            out.max_weight_dev = out.max_weight_dev.max((g - w).abs());
                        }
                        oracle::attentive(&qw, &members)
                    }
                };
                oracle_protos.push((c, p));
            }
            let got = model.prototypes_for(q).unwrap();
            for (g, (c, w)) in got.iter().zip(&oracle_protos) {
                if g.class_id != *c {
                    out.structural_mismatches += 1;
                }
                out.max_vector_dev = out.max_vector_dev.max(dev(&g.vector, w));
            }
            let (want_class, best, runner) = oracle::predict(&qw, &oracle_protos);
            if best - runner > 1e-9 {
                out.predictions_checked += 1;
                if model.predict(q).unwrap().class_id != want_class {
                    out.prediction_mismatches += 1;
                }
            }
        }
    }
    out
}
