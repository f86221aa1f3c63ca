//! Straight-line f64 re-implementation of the calibration and prediction
//! equations, written without reference to the library's code paths.

#![allow(clippy::needless_range_loop)]

use std::collections::HashSet;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[derive(Debug, Clone)]
pub struct OracleSample {
    pub xbar: Vec<f64>,
    pub xt: Vec<f64>,
    /// Class ids of the top-M prototypes, most similar first.
    pub neighbor_ids: Vec<u32>,
    pub sbar: Vec<f64>,
    pub tbar: Vec<f64>,
    pub xc: Vec<f64>,
}

/// `protos` are `(class_id, vector)` pairs in any order.
pub fn calibrate(
    support: &[Vec<f64>],
    protos: &[(u32, Vec<f64>)],
    lambda: f64,
    m: usize,
    alpha: f64,
    beta: f64,
) -> (Vec<OracleSample>, Vec<u32>) {
    let mut staged = Vec::new();
    let mut union: HashSet<u32> = HashSet::new();
    for x in support {
        let xbar = normalize(x);
        let xt: Vec<f64> = x
            .iter()
            .map(|&v| {
                if lambda == 0.0 {
                    v.ln()
                } else {
                    v.powf(lambda)
                }
            })
            .collect();
        let mut scored: Vec<(f64, u32, usize)> = protos
            .iter()
            .enumerate()
            .map(|(pos, (c, p))| (dot(&xt, p), *c, pos))
            .collect();
        // Full sort: similarity descending, then class id ascending.
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top: Vec<(f64, u32, usize)> = scored.into_iter().take(m).collect();
        for t in &top {
            union.insert(t.1);
        }
        staged.push((xbar, xt, top));
    }

    let shift = |xt: &[f64], members: &[usize]| -> Vec<f64> {
        let exps: Vec<f64> = members
            .iter()
            .map(|&p| dot(xt, &protos[p].1).exp())
            .collect();
        let z: f64 = exps.iter().sum();
        let mut out = xt.to_vec();
        for (k, &p) in members.iter().enumerate() {
            for i in 0..out.len() {
                out[i] += exps[k] / z * protos[p].1[i];
            }
        }
        out
    };

    let union_pos: Vec<usize> = protos
        .iter()
        .enumerate()
        .filter(|(_, (c, _))| union.contains(c))
        .map(|(p, _)| p)
        .collect();

    let samples = staged
        .into_iter()
        .map(|(xbar, xt, top)| {
            let own: Vec<usize> = top.iter().map(|t| t.2).collect();
            let sbar = normalize(&shift(&xt, &own));
            let tbar = normalize(&shift(&xt, &union_pos));
            let g = 1.0 - alpha - beta;
            let mix: Vec<f64> = (0..xbar.len())
                .map(|i| g * xbar[i] + alpha * sbar[i] + beta * tbar[i])
                .collect();
            OracleSample {
                neighbor_ids: top.iter().map(|t| t.1).collect(),
                xc: normalize(&mix),
                xbar,
                xt,
                sbar,
                tbar,
            }
        })
        .collect();
    let mut union: Vec<u32> = union.into_iter().collect();
    union.sort();
    (samples, union)
}

pub fn attention(q: &[f64], members: &[Vec<f64>]) -> Vec<f64> {
    let exps: Vec<f64> = members.iter().map(|x| dot(q, x).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

pub fn attentive(q: &[f64], members: &[Vec<f64>]) -> Vec<f64> {
    let a = attention(q, members);
    let mut p = vec![0.0; q.len()];
    for (k, x) in members.iter().enumerate() {
        for i in 0..p.len() {
            p[i] += a[k] * x[i];
        }
    }
    p
}

pub fn average(members: &[Vec<f64>]) -> Vec<f64> {
    let mut p = vec![0.0; members[0].len()];
    for x in members {
        for i in 0..p.len() {
            p[i] += x[i] / members.len() as f64;
        }
    }
    p
}

/// Cosine nearest prototype; returns (class id, best score, runner-up score).
pub fn predict(q: &[f64], prototypes: &[(u32, Vec<f64>)]) -> (u32, f64, f64) {
    let mut scored: Vec<(f64, u32)> = prototypes.iter().map(|(c, p)| (cos(q, p), *c)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let runner = scored.get(1).map(|s| s.0).unwrap_or(f64::NEG_INFINITY);
    (scored[0].1, scored[0].0, runner)
}
