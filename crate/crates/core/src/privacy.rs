//! Monte-Carlo audit of how much a single sample's statistic survives
//! memory-reduce, measured by correlation and Gaussian mutual information.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::weighted_average;
use crate::error::{Error, Result};
use crate::numerics::{pairwise_sum, rng::tags, SeedStream, Tensor};

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::contract("pearson needs two equal series of length >= 2"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::numeric("zero variance series"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `−½ ln(1 − ρ²)` in nats.
pub fn gaussian_mi(rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::numeric(format!("|rho| = {} gives infinite information", rho.abs())));
    }
    Ok(-0.5 * (-rho * rho).ln_1p())
}

/// `w̃_j σ_j / sqrt(Σ w̃_i² σ_i²)`, the factor bounding the correlation of a
/// component with the weighted average relative to the component itself.
pub fn lemma1_bound(weights: &[f64], stddevs: &[f64], j: usize) -> Result<f64> {
    if weights.len() != stddevs.len() || j >= weights.len() {
        return Err(Error::contract("weights, stddevs and index disagree"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::contract("weights must be non-negative"));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract("weights must sum to 1"));
    }
    if stddevs.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::contract("stddevs must be positive and finite"));
    }
    let denom: f64 = weights.iter().zip(stddevs).map(|(w, s)| w * w * s * s).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::contract("all weight sits on zero-variance components"));
    }
    Ok(weights[j] * stddevs[j] / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    /// Monte-Carlo trials per configuration.
    pub samples: usize,
    /// Dataset sizes for the leakage sweep.
    pub sizes: Vec<usize>,
    pub seed: u64,
    /// Correlation between the raw statistic and its own memory.
    pub rho: f64,
    /// Standard deviation of every memory in the sweep.
    pub sigma: f64,
    /// Randomized configurations for the bound check.
    pub bound_configs: usize,
    /// Trials per memory-reduce call.
    pub chunk: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            sizes: vec![10, 100, 1000],
            seed: 0,
            rho: 0.8,
            sigma: 1.0,
            bound_configs: 100,
            chunk: 10_000,
        }
    }
}

/// Below this the correlation error is too loose for the checks.
pub const MIN_SAMPLES: usize = 10_000;

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::config_key("samples", "must be >= 2"));
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::config_key("sizes", "need positive dataset sizes"));
        }
        if !(self.rho.abs() < 1.0 && self.rho != 0.0) {
            return Err(Error::config_key("rho", "must lie in (-1, 1) and be nonzero"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config_key("sigma", "must be > 0"));
        }
        if self.chunk == 0 {
            return Err(Error::config_key("chunk", "must be >= 1"));
        }
        Ok(())
    }
}

/// A scalar Gaussian model satisfying the bound's hypotheses: memory `j` is
/// `σ_j(ρ X + √(1−ρ²) ε_j) + c Z`, every other memory is `σ_i ε_i + c Z`,
/// with `X, Z, ε` independent standard normals.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianModel {
    pub sigmas: Vec<f64>,
    /// Loading on the shared factor (gives nonnegative cross-covariance).
    pub shared: f64,
    pub rho: f64,
    pub j: usize,
}

impl GaussianModel {
    pub fn stddevs(&self) -> Vec<f64> {
        self.sigmas.iter().map(|s| (s * s + self.shared * self.shared).sqrt()).collect()
    }
}

/// How the reducer weighs the memories.
#[derive(Clone, Debug, PartialEq)]
pub enum Weighting {
    /// Fixed normalized weights, independent of the data.
    Fixed(Vec<f64>),
    /// Per trial `w_i = |Y_i − prev|`, as the dynamic weights do.
    Dynamic { prev: f64 },
}

/// Correlations estimated from one Monte-Carlo run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub rho_own: f64,
    pub rho_reduce: f64,
}

/// Draws `samples` trials of the model and reduces each trial's memories.
pub fn simulate(model: &GaussianModel, weighting: &Weighting, samples: usize, chunk: usize, seeds: &SeedStream) -> Result<Estimate> {
    let n = model.sigmas.len();
    let chunks: Vec<(usize, usize)> = (0..samples)
        .step_by(chunk)
        .map(|s| (s, chunk.min(samples - s)))
        .collect();
    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, &(_, len))| {
            let mut rng = seeds.rng(ci as u64);
            let x: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            let z: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            let mut mems = Vec::with_capacity(n);
            for (i, &s) in model.sigmas.iter().enumerate() {
                let data = (0..len)
                    .map(|t| {
                        let e: f64 = rng.sample(StandardNormal);
                        let u = if i == model.j {
                            model.rho * x[t] + (1.0 - model.rho * model.rho).sqrt() * e
                        } else {
                            e
                        };
                        (s * u + model.shared * z[t]) as f32
                    })
                    .collect();
                mems.push(Tensor::new(&[1, 1, len], data)?);
            }
            let own: Vec<f64> = mems[model.j].data().iter().map(|&v| v as f64).collect();
            let reduced: Vec<f64> = match weighting {
                Weighting::Fixed(w) => weighted_average(&mems, w)?.data().iter().map(|&v| v as f64).collect(),
                Weighting::Dynamic { prev } => {
                    let mut w = vec![0.0; n];
                    let mut wy = vec![0.0; n];
                    (0..len)
                        .map(|t| {
                            for (i, m) in mems.iter().enumerate() {
                                let y = m.data()[t] as f64;
                                w[i] = (y - prev).abs();
                                wy[i] = w[i] * y;
                            }
                            let total = pairwise_sum(&w);
                            if total > 0.0 {
                                pairwise_sum(&wy) / total
                            } else {
                                mems.iter().map(|m| m.data()[t] as f64).sum::<f64>() / n as f64
                            }
                        })
                        .collect()
                }
            };
            Ok((x, own, reduced))
        })
        .collect::<Result<_>>()?;
    let (mut x, mut own, mut red) = (Vec::new(), Vec::new(), Vec::new());
    for (a, b, c) in parts {
        x.extend(a);
        own.extend(b);
        red.extend(c);
    }
    Ok(Estimate {
        rho_own: pearson(&x, &own)?,
        rho_reduce: pearson(&x, &red)?,
    })
}

/// Large-sample standard error of a correlation estimate.
pub fn correlation_se(rho: f64, samples: usize) -> f64 {
    (1.0 - rho * rho) / (samples as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Pass,
    Fail,
    /// Too few samples for the error budget.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub size: usize,
    pub rho_own: f64,
    pub rho_reduce: f64,
    pub bound_factor: f64,
    pub mi_own: f64,
    pub mi_reduce: f64,
    pub mi_ratio: f64,
    /// Ratio bound implied by the correlation bound.
    pub mi_ratio_bound: f64,
    /// Same point with data-dependent weights; descriptive only.
    pub rho_reduce_dynamic: f64,
    pub mi_reduce_dynamic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub configs: usize,
    pub violations: usize,
    /// Worst `(|ρ̂_reduce| − factor·|ρ̂_own|) / σ` seen.
    pub max_excess_sigma: f64,
    /// Configurations where the reduced MI exceeded the own MI beyond 3σ.
    pub dpi_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub status: AuditStatus,
    pub samples: usize,
    pub bound: BoundCheck,
    pub sweep: Vec<SweepPoint>,
    /// Least-squares slope of `ln|ρ̂_reduce|` against `ln|D|`.
    pub slope: f64,
    pub ratios_decreasing: bool,
    pub mi_reduced_everywhere: bool,
}

fn random_config(rng: &mut impl Rng) -> (GaussianModel, Vec<f64>) {
    let n = rng.random_range(1..=40);
    let sigmas = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let shared = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..1.0) };
    let rho = rng.random_range(0.3..0.95) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let j = rng.random_range(0..n);
    let raw: Vec<f64> = if rng.random_bool(0.5) {
        vec![1.0; n]
    } else {
        (0..n).map(|_| rng.random_range(0.05..1.0)).collect()
    };
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    (GaussianModel { sigmas, shared, rho, j }, weights)
}

/// Runs the bound check over random configurations and the `|D|` sweep.
pub fn audit_reduction(cfg: &AuditConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let root = SeedStream::new(cfg.seed).fork(tags::AUDIT);
    let s = cfg.samples;

    let checks: Vec<(f64, bool, bool)> = (0..cfg.bound_configs)
        .into_par_iter()
        .map(|k| {
            let (model, w) = random_config(&mut root.path(&[0, k as u64]).rng(0));
            let est = simulate(&model, &Weighting::Fixed(w.clone()), s, cfg.chunk, &root.path(&[1, k as u64]))?;
            let factor = lemma1_bound(&w, &model.stddevs(), model.j)?;
            let sigma = correlation_se(est.rho_reduce, s) + factor * correlation_se(est.rho_own, s);
            let excess = (est.rho_reduce.abs() - factor * est.rho_own.abs()) / sigma;
            let dpi_ok = est.rho_reduce.abs() <= est.rho_own.abs() + 3.0 * sigma;
            Ok((excess, excess <= 3.0, dpi_ok))
        })
        .collect::<Result<_>>()?;
    let bound = BoundCheck {
        configs: checks.len(),
        violations: checks.iter().filter(|c| !c.1).count(),
        max_excess_sigma: checks.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max),
        dpi_violations: checks.iter().filter(|c| !c.2).count(),
    };

    let mut sweep = Vec::with_capacity(cfg.sizes.len());
    for (k, &size) in cfg.sizes.iter().enumerate() {
        let model = GaussianModel {
            sigmas: vec![cfg.sigma; size],
            shared: 0.0,
            rho: cfg.rho,
            j: 0,
        };
        let w = vec![1.0 / size as f64; size];
        let est = simulate(&model, &Weighting::Fixed(w.clone()), s, cfg.chunk, &root.path(&[2, k as u64]))?;
        let dynamic = simulate(&model, &Weighting::Dynamic { prev: 0.0 }, s, cfg.chunk, &root.path(&[3, k as u64]))?;
        let factor = lemma1_bound(&w, &model.stddevs(), 0)?;
        let mi_own = gaussian_mi(est.rho_own)?;
        let mi_reduce = gaussian_mi(est.rho_reduce)?;
        sweep.push(SweepPoint {
            size,
            rho_own: est.rho_own,
            rho_reduce: est.rho_reduce,
            bound_factor: factor,
            mi_own,
            mi_reduce,
            mi_ratio: mi_reduce / mi_own,
            mi_ratio_bound: gaussian_mi(factor * est.rho_own)? / mi_own,
            rho_reduce_dynamic: dynamic.rho_reduce,
            mi_reduce_dynamic: gaussian_mi(dynamic.rho_reduce)?,
        });
    }
    let ratios_decreasing = sweep.windows(2).all(|p| p[1].mi_ratio < p[0].mi_ratio);
    let mi_reduced_everywhere = sweep.iter().all(|p| p.mi_reduce < p.mi_own || p.size == 1);
    let slope = fit_slope(
        &sweep.iter().map(|p| (p.size as f64).ln()).collect::<Vec<_>>(),
        &sweep.iter().map(|p| p.rho_reduce.abs().max(f64::MIN_POSITIVE).ln()).collect::<Vec<_>>(),
    );
    let ok = bound.violations == 0
        && bound.dpi_violations == 0
        && ratios_decreasing
        && mi_reduced_everywhere
        && (sweep.len() < 2 || slope < 0.0);
    let status = if s < MIN_SAMPLES {
        AuditStatus::Inconclusive
    } else if ok {
        AuditStatus::Pass
    } else {
        AuditStatus::Fail
    };
    Ok(AuditReport {
        status,
        samples: s,
        bound,
        sweep,
        slope,
        ratios_decreasing,
        mi_reduced_everywhere,
    })
}

fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
