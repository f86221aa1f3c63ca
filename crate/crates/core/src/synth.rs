//! Synthetic feature stores with controllable base/novel geometry.
//!
//! Base centroids are random directions in the positive orthant scaled to
//! `radius`. Every validation and novel centroid is a convex mixture of
//! `novel_mix_k` distinct base centroids with flat-Dirichlet weights, so
//! novel classes resemble some base classes. Samples are the centroid plus
//! isotropic Gaussian noise, folded by absolute value when `nonneg` is set.
//!
//! For validation and novel classes, each sample is, with probability
//! `boundary_bias`, drawn from the outer shell of the noise distribution:
//! noise vectors are rejected until their squared norm reaches the
//! `1 - shell_fraction` quantile of `stddev² · χ²(dim)`.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::feature_store::{self, FeatureDataset, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub num_base_classes: usize,
    pub num_validation_classes: usize,
    pub num_novel_classes: usize,
    pub samples_per_class: usize,
    pub intra_class_stddev: f64,
    pub novel_mix_k: usize,
    pub boundary_bias: f64,
    pub shell_fraction: f64,
    pub radius: f64,
    pub nonneg: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 64,
            num_base_classes: 20,
            num_validation_classes: 10,
            num_novel_classes: 10,
            samples_per_class: 100,
            intra_class_stddev: 0.1,
            novel_mix_k: 3,
            boundary_bias: 0.0,
            shell_fraction: 0.1,
            radius: 1.0,
            nonneg: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Overlapping classes whose episodic samples sit on the noise shell.
    BoundaryBias,
    /// Tight, well separated classes.
    Separable,
    /// Zero noise and novel classes equal to base classes.
    Degenerate,
}

impl Preset {
    pub fn config(self) -> SynthConfig {
        match self {
            Preset::BoundaryBias => SynthConfig {
                dim: 64,
                num_base_classes: 64,
                num_validation_classes: 16,
                num_novel_classes: 20,
                samples_per_class: 100,
                intra_class_stddev: 0.08,
                novel_mix_k: 3,
                boundary_bias: 1.0,
                shell_fraction: 0.1,
                radius: 1.0,
                nonneg: true,
                seed: PUBLISHED_SEED,
            },
            Preset::Separable => SynthConfig {
                dim: 32,
                num_base_classes: 20,
                num_validation_classes: 8,
                num_novel_classes: 10,
                samples_per_class: 40,
                intra_class_stddev: 0.005,
                novel_mix_k: 1,
                boundary_bias: 0.0,
                shell_fraction: 0.1,
                radius: 1.0,
                nonneg: true,
                seed: PUBLISHED_SEED,
            },
            Preset::Degenerate => SynthConfig {
                dim: 16,
                num_base_classes: 20,
                num_validation_classes: 8,
                num_novel_classes: 8,
                samples_per_class: 20,
                intra_class_stddev: 0.0,
                novel_mix_k: 1,
                boundary_bias: 0.0,
                shell_fraction: 0.1,
                radius: 1.0,
                nonneg: true,
                seed: PUBLISHED_SEED,
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boundary-bias" => Ok(Preset::BoundaryBias),
            "separable" => Ok(Preset::Separable),
            "degenerate" => Ok(Preset::Degenerate),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }
}

/// Seed used by the presets.
pub const PUBLISHED_SEED: u64 = 20230817;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0
            || self.num_base_classes == 0
            || self.num_validation_classes == 0
            || self.num_novel_classes == 0
            || self.samples_per_class == 0
        {
            return bad("dimension and all class/sample counts must be positive".into());
        }
        if !(self.intra_class_stddev >= 0.0 && self.intra_class_stddev.is_finite()) {
            return bad(format!(
                "stddev {} must be finite and >= 0",
                self.intra_class_stddev
            ));
        }
        if self.novel_mix_k == 0 || self.novel_mix_k > self.num_base_classes {
            return bad(format!(
                "novel_mix_k {} must be in 1..={}",
                self.novel_mix_k, self.num_base_classes
            ));
        }
        if !(0.0..=1.0).contains(&self.boundary_bias) {
            return bad(format!(
                "boundary_bias {} must be in [0, 1]",
                self.boundary_bias
            ));
        }
        if !(self.shell_fraction > 0.0 && self.shell_fraction <= 1.0) {
            return bad(format!(
                "shell_fraction {} must be in (0, 1]",
                self.shell_fraction
            ));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad(format!("radius {} must be positive", self.radius));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub config: SynthConfig,
    pub base: FeatureDataset,
    pub validation: FeatureDataset,
    pub novel: FeatureDataset,
    pub base_centroids: Vec<Vec<f32>>,
    pub validation_centroids: Vec<Vec<f32>>,
    pub novel_centroids: Vec<Vec<f32>>,
}

impl SynthOutput {
    pub fn write(&self, root: impl AsRef<Path>, name: &str) -> Result<()> {
        feature_store::write_store(
            root,
            name,
            &[&self.base, &self.validation, &self.novel],
            None,
        )
    }

    pub fn centroids(&self, split: Split) -> &[Vec<f32>] {
        match split {
            Split::Base => &self.base_centroids,
            Split::Validation => &self.validation_centroids,
            Split::Novel => &self.novel_centroids,
        }
    }
}

fn orthant_direction(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                x.abs()
            })
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x * radius / n).collect();
        }
    }
}

fn mixtures(
    rng: &mut ChaCha8Rng,
    base: &[Vec<f64>],
    count: usize,
    k: usize,
    distinct_singletons: &mut Vec<usize>,
) -> Vec<Vec<f64>> {
    let dim = base[0].len();
    (0..count)
        .map(|_| {
            if k == 1 {
                let j = match distinct_singletons.pop() {
                    Some(j) => j,
                    None => rng.random_range(0..base.len()),
                };
                return base[j].clone();
            }
            let picks = index::sample(rng, base.len(), k).into_vec();
            let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
            let z: f64 = raw.iter().sum();
            let mut c = vec![0.0; dim];
            for (&j, w) in picks.iter().zip(raw) {
                for (ci, bi) in c.iter_mut().zip(&base[j]) {
                    *ci += w / z * bi;
                }
            }
            c
        })
        .collect()
}

struct Sampler {
    dim: usize,
    stddev: f64,
    nonneg: bool,
    shell_sq: f64,
}

impl Sampler {
    fn noise(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * self.stddev
            })
            .collect()
    }

    fn sample(&self, rng: &mut ChaCha8Rng, centroid: &[f64], shell: bool) -> Vec<f32> {
        let noise = if shell && self.stddev > 0.0 {
            loop {
                let n = self.noise(rng);
                if n.iter().map(|x| x * x).sum::<f64>() >= self.shell_sq {
                    break n;
                }
            }
        } else {
            self.noise(rng)
        };
        centroid
            .iter()
            .zip(noise)
            .map(|(c, n)| {
                let v = c + n;
                (if self.nonneg { v.abs() } else { v }) as f32
            })
            .collect()
    }
}

fn to_f32(v: &[Vec<f64>]) -> Vec<Vec<f32>> {
    v.iter()
        .map(|c| c.iter().map(|&x| x as f32).collect())
        .collect()
}

/// Generates base, validation, and novel splits. Deterministic per seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let base_c: Vec<Vec<f64>> = (0..cfg.num_base_classes)
        .map(|_| orthant_direction(&mut rng, cfg.dim, cfg.radius))
        .collect();

    let mut singletons = Vec::new();
    if cfg.novel_mix_k == 1
        && cfg.num_validation_classes + cfg.num_novel_classes <= cfg.num_base_classes
    {
        singletons = index::sample(
            &mut rng,
            cfg.num_base_classes,
            cfg.num_validation_classes + cfg.num_novel_classes,
        )
        .into_vec();
    }
    let val_c = mixtures(
        &mut rng,
        &base_c,
        cfg.num_validation_classes,
        cfg.novel_mix_k,
        &mut singletons,
    );
    let novel_c = mixtures(
        &mut rng,
        &base_c,
        cfg.num_novel_classes,
        cfg.novel_mix_k,
        &mut singletons,
    );

    let quantile = ChiSquared::new(cfg.dim as f64)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?
        .inverse_cdf(1.0 - cfg.shell_fraction);
    let sampler = Sampler {
        dim: cfg.dim,
        stddev: cfg.intra_class_stddev,
        nonneg: cfg.nonneg,
        shell_sq: cfg.intra_class_stddev.powi(2) * quantile,
    };

    let mut make = |split: Split, centroids: &[Vec<f64>], bias: f64| -> Result<FeatureDataset> {
        let mut recs = Vec::with_capacity(centroids.len() * cfg.samples_per_class);
        for (c, centroid) in centroids.iter().enumerate() {
            for _ in 0..cfg.samples_per_class {
                let shell = bias > 0.0 && rng.random_bool(bias);
                recs.push((c as u32, sampler.sample(&mut rng, centroid, shell)));
            }
        }
        FeatureDataset::from_records(split, cfg.dim, recs)
    };
    let base = make(Split::Base, &base_c, 0.0)?;
    let validation = make(Split::Validation, &val_c, cfg.boundary_bias)?;
    let novel = make(Split::Novel, &novel_c, cfg.boundary_bias)?;

    Ok(SynthOutput {
        config: cfg.clone(),
        base,
        validation,
        novel,
        base_centroids: to_f32(&base_c),
        validation_centroids: to_f32(&val_c),
        novel_centroids: to_f32(&novel_c),
    })
}
