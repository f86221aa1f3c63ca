//! Class prototypes and nearest-prototype prediction.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calib::{self, CalibConfig, CalibratedTask};
use crate::error::{Error, Result};
use crate::feature_store::BasePrototypeSet;
use crate::vector;

/// How support and query features are represented before prototypes are
/// built.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Raw features, scored by inner product.
    RawNn,
    L2n,
    /// Centered on the global base mean, then L2 normalized.
    Cl2n,
    /// Power transform plus the equal-weight mean of the top-M base
    /// prototypes, then L2 normalized.
    DcStyle(CalibConfig),
    P3dc(CalibConfig),
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::RawNn => "nn",
            Transform::L2n => "l2n",
            Transform::Cl2n => "cl2n",
            Transform::DcStyle(_) => "dc",
            Transform::P3dc(_) => "p3dc",
        }
    }

    pub fn calib_config(&self) -> Option<&CalibConfig> {
        match self {
            Transform::DcStyle(c) | Transform::P3dc(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    Average,
    Attentive,
}

impl fmt::Display for PrototypeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrototypeMode::Average => "average",
            PrototypeMode::Attentive => "attentive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictMode {
    pub transform: Transform,
    pub prototype: PrototypeMode,
    /// Use the normalized query for attention logits instead of the raw one.
    #[serde(default)]
    pub normalized_query_attention: bool,
}

impl PredictMode {
    pub fn new(transform: Transform, prototype: PrototypeMode) -> Self {
        PredictMode {
            transform,
            prototype,
            normalized_query_attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.transform.calib_config() {
            Some(c) => c.validate(),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub class_id: u32,
    pub vector: Vec<f32>,
}

pub fn average_prototype(class_id: u32, class_support: &[&[f32]]) -> Result<ClassPrototype> {
    let first = class_support
        .first()
        .ok_or_else(|| Error::Precondition(format!("class {class_id} has no support")))?;
    let mut acc = vec![0.0f64; first.len()];
    for v in class_support {
        vector::accumulate(&mut acc, v, 1.0);
    }
    Ok(ClassPrototype {
        class_id,
        vector: vector::scaled_to_f32(&acc, 1.0 / class_support.len() as f64),
    })
}

/// Softmax over `⟨q, x_k⟩` for the support features of one class.
pub fn attention_weights(q: &[f32], class_support: &[&[f32]]) -> Vec<f64> {
    let logits: Vec<f64> = class_support.iter().map(|x| vector::dot(q, x)).collect();
    vector::softmax(&logits)
}

/// Query-conditioned prototype `Σ_k a_k x_k`.
pub fn attentive_prototype(
    q: &[f32],
    class_id: u32,
    class_support: &[&[f32]],
) -> Result<ClassPrototype> {
    if class_support.is_empty() {
        return Err(Error::Precondition(format!(
            "class {class_id} has no support"
        )));
    }
    if class_support.len() == 1 {
        return Ok(ClassPrototype {
            class_id,
            vector: class_support[0].to_vec(),
        });
    }
    let weights = attention_weights(q, class_support);
    let mut acc = vec![0.0f64; q.len()];
    for (x, &a) in class_support.iter().zip(&weights) {
        vector::accumulate(&mut acc, x, a);
    }
    Ok(ClassPrototype {
        class_id,
        vector: vector::scaled_to_f32(&acc, 1.0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_id: u32,
    /// One score per prototype, in the order given.
    pub scores: Vec<f64>,
}

fn argmax(prototypes: &[ClassPrototype], scores: Vec<f64>) -> Prediction {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let b = scores[best];
        if *s > b || (*s == b && prototypes[i].class_id < prototypes[best].class_id) {
            best = i;
        }
    }
    Prediction {
        class_id: prototypes[best].class_id,
        scores,
    }
}

/// Nearest prototype by cosine similarity. Ties go to the smaller class id.
pub fn classify(q: &[f32], prototypes: &[ClassPrototype]) -> Result<Prediction> {
    if prototypes.is_empty() {
        return Err(Error::Precondition(
            "no prototypes to classify against".into(),
        ));
    }
    let q_bar = calib::l2_normalize(q)?;
    let scores = prototypes
        .iter()
        .map(|p| vector::cosine(&q_bar, &p.vector))
        .collect();
    Ok(argmax(prototypes, scores))
}

/// Nearest prototype by raw inner product.
pub fn classify_inner_product(q: &[f32], prototypes: &[ClassPrototype]) -> Result<Prediction> {
    if prototypes.is_empty() {
        return Err(Error::Precondition(
            "no prototypes to classify against".into(),
        ));
    }
    let scores = prototypes
        .iter()
        .map(|p| vector::dot(q, &p.vector))
        .collect();
    Ok(argmax(prototypes, scores))
}

pub fn cl2n_transform(v: &[f32], base_mean: &[f32]) -> Result<Vec<f32>> {
    let centered: Vec<f64> = v
        .iter()
        .zip(base_mean)
        .map(|(&x, &m)| x as f64 - m as f64)
        .collect();
    vector::normalize_f64(&centered)
        .map_err(|_| Error::Degenerate("feature equals the base mean".into()))
}

/// Power transform, add the unweighted mean of the top-M base prototypes,
/// normalize.
pub fn dc_style_calibrate(
    x: &[f32],
    protos: &BasePrototypeSet,
    cfg: &CalibConfig,
) -> Result<Vec<f32>> {
    dc_style_calibrate_counted(x, protos, cfg).map(|(v, _)| v)
}

fn dc_style_calibrate_counted(
    x: &[f32],
    protos: &BasePrototypeSet,
    cfg: &CalibConfig,
) -> Result<(Vec<f32>, usize)> {
    if protos.is_empty() {
        return Err(Error::Precondition("base prototype set is empty".into()));
    }
    let (x_t, clamped) = calib::tukey_transform_with(x, cfg.lambda, cfg.clamp_negative)?;
    let neighbors = calib::top_m_prototypes(&x_t, protos, cfg.m);
    let mut acc = vector::to_f64(&x_t);
    let w = 1.0 / neighbors.len() as f64;
    for &j in &neighbors.indices {
        vector::accumulate(&mut acc, protos.prototype(j), w);
    }
    Ok((vector::normalize_f64(&acc)?, clamped))
}

/// Support representations of one task, grouped by label, ready to answer
/// queries.
#[derive(Clone, Debug)]
pub struct TaskModel {
    mode: PredictMode,
    base_mean: Option<Vec<f32>>,
    classes: Vec<(u32, Vec<Vec<f32>>)>,
    averages: Vec<ClassPrototype>,
    clamped: usize,
}

impl TaskModel {
    /// Applies the mode's support transform (including calibration).
    pub fn fit(
        support: &[(&[f32], u32)],
        protos: &BasePrototypeSet,
        mode: &PredictMode,
    ) -> Result<Self> {
        mode.validate()?;
        if support.is_empty() {
            return Err(Error::Precondition("support set is empty".into()));
        }
        let at = |i: usize| {
            move |e: Error| Error::Sample {
                index: i,
                source: Box::new(e),
            }
        };
        let mut clamped = 0;
        let reps: Vec<(Vec<f32>, u32)> = match &mode.transform {
            Transform::RawNn => support.iter().map(|&(x, c)| (x.to_vec(), c)).collect(),
            Transform::L2n => support
                .iter()
                .enumerate()
                .map(|(i, &(x, c))| calib::l2_normalize(x).map(|v| (v, c)).map_err(at(i)))
                .collect::<Result<_>>()?,
            Transform::Cl2n => support
                .iter()
                .enumerate()
                .map(|(i, &(x, c))| {
                    cl2n_transform(x, protos.global_mean())
                        .map(|v| (v, c))
                        .map_err(at(i))
                })
                .collect::<Result<_>>()?,
            Transform::DcStyle(cfg) => {
                let mut out = Vec::with_capacity(support.len());
                for (i, &(x, c)) in support.iter().enumerate() {
                    let (v, n) = dc_style_calibrate_counted(x, protos, cfg).map_err(at(i))?;
                    clamped += n;
                    out.push((v, c));
                }
                out
            }
            Transform::P3dc(cfg) => {
                let task = calib::calibrate_support_set(support, protos, cfg)?;
                clamped = task.clamped;
                task.samples
                    .into_iter()
                    .map(|s| (s.calibrated, s.class_id))
                    .collect()
            }
        };
        let base_mean =
            matches!(mode.transform, Transform::Cl2n).then(|| protos.global_mean().to_vec());
        Self::from_representations(reps, *mode, base_mean, clamped)
    }

    /// Builds a model from a task that was already calibrated under `mode`.
    pub fn from_calibrated(task: &CalibratedTask, mode: PredictMode) -> Result<Self> {
        let reps = task.calibrated().map(|(v, c)| (v.to_vec(), c)).collect();
        Self::from_representations(reps, mode, None, task.clamped)
    }

    fn from_representations(
        reps: Vec<(Vec<f32>, u32)>,
        mode: PredictMode,
        base_mean: Option<Vec<f32>>,
        clamped: usize,
    ) -> Result<Self> {
        let mut grouped: BTreeMap<u32, Vec<Vec<f32>>> = BTreeMap::new();
        for (v, c) in reps {
            grouped.entry(c).or_default().push(v);
        }
        let classes: Vec<(u32, Vec<Vec<f32>>)> = grouped.into_iter().collect();
        let averages = classes
            .iter()
            .map(|(c, vs)| {
                let refs: Vec<&[f32]> = vs.iter().map(Vec::as_slice).collect();
                average_prototype(*c, &refs)
            })
            .collect::<Result<_>>()?;
        Ok(TaskModel {
            mode,
            base_mean,
            classes,
            averages,
            clamped,
        })
    }

    pub fn mode(&self) -> &PredictMode {
        &self.mode
    }

    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// Support representations per class, ascending by label.
    pub fn classes(&self) -> &[(u32, Vec<Vec<f32>>)] {
        &self.classes
    }

    fn query_representation(&self, q: &[f32]) -> Vec<f32> {
        match &self.base_mean {
            Some(mean) => q
                .iter()
                .zip(mean)
                .map(|(&x, &m)| (x as f64 - m as f64) as f32)
                .collect(),
            None => q.to_vec(),
        }
    }

    /// Prototypes used for `q`: the class means, or query-conditioned
    /// attentive prototypes.
    pub fn prototypes_for(&self, q: &[f32]) -> Result<Vec<ClassPrototype>> {
        match self.mode.prototype {
            PrototypeMode::Average => Ok(self.averages.clone()),
            PrototypeMode::Attentive => {
                let rep = self.query_representation(q);
                let attn = if self.mode.normalized_query_attention {
                    calib::l2_normalize(&rep)?
                } else {
                    rep
                };
                self.classes
                    .iter()
                    .map(|(c, vs)| {
                        let refs: Vec<&[f32]> = vs.iter().map(Vec::as_slice).collect();
                        attentive_prototype(&attn, *c, &refs)
                    })
                    .collect()
            }
        }
    }

    pub fn predict(&self, q: &[f32]) -> Result<Prediction> {
        let rep = self.query_representation(q);
        match self.mode.prototype {
            PrototypeMode::Average => self.score(&rep, &self.averages),
            PrototypeMode::Attentive => {
                let protos = self.prototypes_for(q)?;
                self.score(&rep, &protos)
            }
        }
    }

    fn score(&self, rep: &[f32], prototypes: &[ClassPrototype]) -> Result<Prediction> {
        match self.mode.transform {
            Transform::RawNn => classify_inner_product(rep, prototypes),
            _ => classify(rep, prototypes),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto(c: u32, v: &[f32]) -> ClassPrototype {
        ClassPrototype {
            class_id: c,
            vector: v.to_vec(),
        }
    }

    #[test]
    fn attentive_singleton_and_identical() {
        let x = [0.6f32, 0.8];
        assert_eq!(
            attentive_prototype(&[5.0, -1.0], 3, &[&x]).unwrap().vector,
            x.to_vec()
        );
        let p = attentive_prototype(&[5.0, -1.0], 3, &[&x, &x, &x]).unwrap();
        assert!(p.vector.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-7));
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        let w = attention_weights(&[2.0, 1.0], &[&a, &b]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1]);
    }

    #[test]
    fn average_examples() {
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        assert_eq!(average_prototype(0, &[&a]).unwrap().vector, a.to_vec());
        assert_eq!(
            average_prototype(0, &[&a, &b]).unwrap().vector,
            vec![0.5, 0.5]
        );
        assert!(average_prototype(0, &[]).is_err());
    }

    #[test]
    fn classify_alignment_and_ties() {
        let ps = [proto(4, &[1.0, 0.0, 0.0]), proto(2, &[0.0, 2.0, 0.0])];
        let p = classify(&[0.0, 5.0, 0.0], &ps).unwrap();
        assert_eq!(p.class_id, 2);
        assert!((p.scores[1] - 1.0).abs() < 1e-12);

        let p = classify(&[0.0, 0.0, 1.0], &ps).unwrap();
        assert_eq!(p.scores, vec![0.0, 0.0]);
        assert_eq!(p.class_id, 2);

        assert!(matches!(
            classify(&[0.0; 3], &ps),
            Err(Error::Degenerate(_))
        ));
        assert!(classify(&[1.0, 0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn inner_product_scoring_is_scale_sensitive() {
        let ps = [proto(0, &[1.0, 0.0]), proto(1, &[3.0, 3.0])];
        assert_eq!(classify(&[1.0, 0.1], &ps).unwrap().class_id, 0);
        assert_eq!(
            classify_inner_product(&[1.0, 0.1], &ps).unwrap().class_id,
            1
        );
    }

    #[test]
    fn cl2n_examples() {
        assert_eq!(
            cl2n_transform(&[2.0, 0.0], &[1.0, 0.0]).unwrap(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            cl2n_transform(&[3.0, 4.0], &[0.0, 0.0]).unwrap(),
            calib::l2_normalize(&[3.0, 4.0]).unwrap()
        );
        assert!(matches!(
            cl2n_transform(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn dc_style_examples() {
        let protos = BasePrototypeSet::from_parts(
            2,
            vec![
                (0, vec![1.0, 0.0]),
                (1, vec![0.0, 1.0]),
                (2, vec![0.0, 0.0]),
            ],
            vec![0.0, 0.0],
        )
        .unwrap();
        let cfg = CalibConfig {
            m: 1,
            ..Default::default()
        };
        let v = dc_style_calibrate(&[4.0, 1.0], &protos, &cfg).unwrap();
        let want = calib::l2_normalize(&[3.0, 1.0]).unwrap();
        assert!(v.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-7));

        let cfg = CalibConfig {
            m: 2,
            ..Default::default()
        };
        let v = dc_style_calibrate(&[1.0, 1.0], &protos, &cfg).unwrap();
        let want = calib::l2_normalize(&[1.5, 1.5]).unwrap();
        assert!(v.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-7));
    }

    #[test]
    fn task_model_matches_free_functions() {
        let protos = BasePrototypeSet::from_parts(
            2,
            vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])],
            vec![0.5, 0.5],
        )
        .unwrap();
        let s = [[1.0f32, 0.2], [0.9, 0.1], [0.1, 1.0]];
        let support: Vec<(&[f32], u32)> = vec![(&s[0], 0), (&s[1], 0), (&s[2], 1)];
        let mode = PredictMode::new(Transform::L2n, PrototypeMode::Attentive);
        let model = TaskModel::fit(&support, &protos, &mode).unwrap();
        let q = [2.0f32, 0.5];
        let a = calib::l2_normalize(&s[0]).unwrap();
        let b = calib::l2_normalize(&s[1]).unwrap();
        let c = calib::l2_normalize(&s[2]).unwrap();
        let want = classify(
            &q,
            &[
                attentive_prototype(&q, 0, &[&a, &b]).unwrap(),
                attentive_prototype(&q, 1, &[&c]).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(model.predict(&q).unwrap(), want);
    }
}
