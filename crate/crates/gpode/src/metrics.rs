//! Forecast evaluation: mean squared error, mean negative log-likelihood
//! under the sampled predictive distribution, and credible-interval coverage.
//!
//! All three score an ensemble of trajectories against a reference series,
//! restricted to unmasked entries. MNLL treats each scalar entry as a
//! uniform mixture over the ensemble of Gaussians centered at the sampled
//! states with the observation-noise variance, evaluated with log-sum-exp.
//! Coverage checks whether the reference lies inside the noise-inclusive
//! predictive interval, either by empirical quantiles (primary) or by a
//! Gaussian mean-and-standard-deviation approximation.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// Ensemble sizes below this make empirical quantiles unreliable; coverage
/// logs a warning.
pub const COVERAGE_MIN_SAMPLES: usize = 20;

const LN_2PI: f64 = 1.8378770664093453;

fn check_shapes(
    context: &'static str,
    truth: ArrayView2<f64>,
    mask: &Array2<bool>,
) -> Result<()> {
    if mask.shape() != truth.shape() {
        return Err(Error::dim(
            context,
            format!("mask shaped {:?}", truth.shape()),
            format!("{:?}", mask.shape()),
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyData(format!("{context} over zero unmasked entries")));
    }
    Ok(())
}

fn check_ensemble(
    context: &'static str,
    samples: &[ArrayView2<f64>],
    truth: ArrayView2<f64>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyData(format!("{context} over an empty ensemble")));
    }
    for s in samples {
        if s.shape() != truth.shape() {
            return Err(Error::dim(
                context,
                format!("ensemble members shaped {:?}", truth.shape()),
                format!("{:?}", s.shape()),
            ));
        }
    }
    Ok(())
}

fn check_noise(context: &'static str, noise_variances: ArrayView1<f64>, d: usize) -> Result<()> {
    if noise_variances.len() != d || noise_variances.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "{context} needs {d} positive noise variances, got {noise_variances:?}"
        )));
    }
    Ok(())
}

// ======================= mean squared error =======================

/// Mean over unmasked entries of the squared error.
pub fn mse(pred_mean: ArrayView2<f64>, truth: ArrayView2<f64>, mask: &Array2<bool>) -> Result<f64> {
    if pred_mean.shape() != truth.shape() {
        return Err(Error::dim(
            "mse",
            format!("{:?}", truth.shape()),
            format!("{:?}", pred_mean.shape()),
        ));
    }
    check_shapes("mse", truth, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..truth.nrows() {
        for j in 0..truth.ncols() {
            if mask[[i, j]] {
                let diff = pred_mean[[i, j]] - truth[[i, j]];
                total += diff * diff;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Squared error averaged per column. Errors if any column has no unmasked
/// entries.
pub fn mse_per_dim(
    pred_mean: ArrayView2<f64>,
    truth: ArrayView2<f64>,
    mask: &Array2<bool>,
) -> Result<Vec<f64>> {
    mse(pred_mean, truth, mask)?;
    let d = truth.ncols();
    let mut totals = vec![0.0f64; d];
    let mut counts = vec![0usize; d];
    for i in 0..truth.nrows() {
        for j in 0..d {
            if mask[[i, j]] {
                let diff = pred_mean[[i, j]] - truth[[i, j]];
                totals[j] += diff * diff;
                counts[j] += 1;
            }
        }
    }
    totals
        .iter()
        .zip(&counts)
        .map(|(&t, &c)| {
            if c == 0 {
                Err(Error::EmptyData("mse_per_dim column with zero unmasked entries".into()))
            } else {
                Ok(t / c as f64)
            }
        })
        .collect()
}

// ======================= mean negative log-likelihood =======================

fn entry_nll(values: &mut Vec<f64>, y: f64, samples: &[ArrayView2<f64>], i: usize, j: usize, r: f64) -> f64 {
    values.clear();
    for s in samples {
        let diff = y - s[[i, j]];
        values.push(-0.5 * diff * diff / r);
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    -lse + (values.len() as f64).ln() + 0.5 * (LN_2PI + r.ln())
}

/// Mean over unmasked entries of the negative log-likelihood under the
/// per-entry mixture (1/S) sum_s N(y; x_s, R_j), via log-sum-exp.
pub fn mnll(
    samples: &[ArrayView2<f64>],
    truth: ArrayView2<f64>,
    noise_variances: ArrayView1<f64>,
    mask: &Array2<bool>,
) -> Result<f64> {
    check_ensemble("mnll", samples, truth)?;
    check_shapes("mnll", truth, mask)?;
    check_noise("mnll", noise_variances, truth.ncols())?;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut scratch = Vec::with_capacity(samples.len());
    for i in 0..truth.nrows() {
        for j in 0..truth.ncols() {
            if mask[[i, j]] {
                total += entry_nll(&mut scratch, truth[[i, j]], samples, i, j, noise_variances[j]);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-column mean negative log-likelihood. Errors if any column has no
/// unmasked entries.
pub fn mnll_per_dim(
    samples: &[ArrayView2<f64>],
    truth: ArrayView2<f64>,
    noise_variances: ArrayView1<f64>,
    mask: &Array2<bool>,
) -> Result<Vec<f64>> {
    mnll(samples, truth, noise_variances, mask)?;
    let d = truth.ncols();
    let mut totals = vec![0.0f64; d];
    let mut counts = vec![0usize; d];
    let mut scratch = Vec::with_capacity(samples.len());
    for i in 0..truth.nrows() {
        for j in 0..d {
            if mask[[i, j]] {
                totals[j] += entry_nll(&mut scratch, truth[[i, j]], samples, i, j, noise_variances[j]);
                counts[j] += 1;
            }
        }
    }
    totals
        .iter()
        .zip(&counts)
        .map(|(&t, &c)| {
            if c == 0 {
                Err(Error::EmptyData("mnll_per_dim column with zero unmasked entries".into()))
            } else {
                Ok(t / c as f64)
            }
        })
        .collect()
}

// ======================= coverage =======================

/// How the predictive credible interval is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoverageMode {
    /// Empirical quantiles of noise-inclusive predictive samples (primary;
    /// correct for non-Gaussian predictive distributions).
    Quantile,
    /// Gaussian approximation: ensemble mean plus/minus z times the
    /// noise-inclusive standard deviation.
    StdDev,
}

impl FromStr for CoverageMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(CoverageMode::Quantile),
            "stddev" => Ok(CoverageMode::StdDev),
            other => Err(Error::UnknownName {
                kind: "coverage mode",
                name: other.to_string(),
                known: "quantile, stddev".to_string(),
            }),
        }
    }
}

impl std::fmt::Display for CoverageMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CoverageMode::Quantile => "quantile",
            CoverageMode::StdDev => "stddev",
        })
    }
}

/// Inverse standard-normal CDF (Acklam's rational approximation, absolute
/// error below 1e-8 over (0, 1)).
fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Quantile by linear interpolation of order statistics (sorted input).
fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Fraction of unmasked entries whose reference value falls inside the
/// central `level` predictive interval, together with the per-column
/// fractions. The quantile mode adds a fresh observation-noise draw to every
/// (sample, row, column) value before taking quantiles; the stddev mode
/// widens the ensemble standard deviation by the noise variance instead.
pub fn coverage_detailed(
    samples: &[ArrayView2<f64>],
    truth: ArrayView2<f64>,
    noise_variances: ArrayView1<f64>,
    level: f64,
    mode: CoverageMode,
    mask: &Array2<bool>,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>)> {
    check_ensemble("coverage", samples, truth)?;
    check_shapes("coverage", truth, mask)?;
    check_noise("coverage", noise_variances, truth.ncols())?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "coverage level must lie in (0, 1), got {level}"
        )));
    }
    let s = samples.len();
    if s < COVERAGE_MIN_SAMPLES {
        log::warn!("coverage over {s} samples; quantiles are noisy below {COVERAGE_MIN_SAMPLES}");
    }
    let (n, d) = (truth.nrows(), truth.ncols());

    // Observation-noise draws for every (sample, row, column), drawn
    // unconditionally so the stream does not depend on the mask.
    let noisy: Vec<Array2<f64>> = match mode {
        CoverageMode::Quantile => samples
            .iter()
            .map(|x| {
                Array2::from_shape_fn((n, d), |(i, j)| {
                    let eta: f64 = rng.sample(StandardNormal);
                    x[[i, j]] + noise_variances[j].sqrt() * eta
                })
            })
            .collect(),
        CoverageMode::StdDev => Vec::new(),
    };

    let z = inverse_normal_cdf(0.5 * (1.0 + level));
    let lo_q = 0.5 * (1.0 - level);
    let hi_q = 0.5 * (1.0 + level);
    let mut hits = vec![0usize; d];
    let mut counts = vec![0usize; d];
    let mut values = Vec::with_capacity(s);
    for i in 0..n {
        for j in 0..d {
            if !mask[[i, j]] {
                continue;
            }
            let (lo, hi) = match mode {
                CoverageMode::Quantile => {
                    values.clear();
                    values.extend(noisy.iter().map(|x| x[[i, j]]));
                    values.sort_by(|a, b| a.partial_cmp(b).expect("finite predictions"));
                    (
                        interpolated_quantile(&values, lo_q),
                        interpolated_quantile(&values, hi_q),
                    )
                }
                CoverageMode::StdDev => {
                    let mean = samples.iter().map(|x| x[[i, j]]).sum::<f64>() / s as f64;
                    let var = if s > 1 {
                        samples
                            .iter()
                            .map(|x| (x[[i, j]] - mean) * (x[[i, j]] - mean))
                            .sum::<f64>()
                            / (s - 1) as f64
                    } else {
                        0.0
                    };
                    let sd = (var + noise_variances[j]).sqrt();
                    (mean - z * sd, mean + z * sd)
                }
            };
            counts[j] += 1;
            let t = truth[[i, j]];
            if t >= lo && t <= hi {
                hits[j] += 1;
            }
        }
    }
    let total_hits: usize = hits.iter().sum();
    let total_count: usize = counts.iter().sum();
    let per_dim = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { f64::NAN } else { h as f64 / c as f64 })
        .collect();
    Ok((total_hits as f64 / total_count as f64, per_dim))
}

/// Overall coverage fraction; see [`coverage_detailed`].
pub fn coverage(
    samples: &[ArrayView2<f64>],
    truth: ArrayView2<f64>,
    noise_variances: ArrayView1<f64>,
    level: f64,
    mode: CoverageMode,
    mask: &Array2<bool>,
    rng: &mut impl Rng,
) -> Result<f64> {
    coverage_detailed(samples, truth, noise_variances, level, mode, mask, rng).map(|(c, _)| c)
}

// ======================= report =======================

/// Evaluation summary for one trained model on one test set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub mse: f64,
    pub mnll: f64,
    pub coverage: f64,
    /// Predictive samples dropped because their trajectory diverged.
    pub n_divergent: usize,
    pub mse_per_dim: Vec<f64>,
    pub mnll_per_dim: Vec<f64>,
    pub coverage_per_dim: Vec<f64>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        if !(self.mse >= 0.0) {
            return Err(Error::InvalidParameter(format!("mse must be nonnegative, got {}", self.mse)));
        }
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::InvalidParameter(format!(
                "coverage must lie in [0, 1], got {}",
                self.coverage
            )));
        }
        Ok(())
    }

    /// Render as JSON with a fixed key order and 17 significant digits, so
    /// that identical reports serialize to identical bytes.
    pub fn to_json(&self) -> String {
        fn fmt_vec(v: &[f64]) -> String {
            let body: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
            format!("[{}]", body.join(","))
        }
        format!(
            "{{\"schema_version\":{},\"mse\":{:.16e},\"mnll\":{:.16e},\"coverage\":{:.16e},\"n_divergent\":{},\"mse_per_dim\":{},\"mnll_per_dim\":{},\"coverage_per_dim\":{}}}",
            self.schema_version,
            self.mse,
            self.mnll,
            self.coverage,
            self.n_divergent,
            fmt_vec(&self.mse_per_dim),
            fmt_vec(&self.mnll_per_dim),
            fmt_vec(&self.coverage_per_dim),
        )
    }
}
