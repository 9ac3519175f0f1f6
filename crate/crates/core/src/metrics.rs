//! Shape fidelity, exemplar similarity and distributional accuracy.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::score::GaussianMixture;
use crate::tensor::Image;

pub const PSNR_PEAK: f64 = 2.0;
pub const PSNR_CAP_DB: f64 = 100.0;

/// Root-mean-square pixel difference between two single-channel sketches.
pub fn shape_l2(a: &Image, b: &Image) -> Result<f64> {
    if a.channels() != 1 {
        return Err(Error::shape("single-channel sketch", a.shape()));
    }
    a.ensure_same_shape(b)?;
    Ok((a.sq_dist(b)? / a.len() as f64).sqrt())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.sq_dist(b)? / a.len() as f64)
}

/// PSNR in dB for images in [-1, 1] (peak 2); `PSNR_CAP_DB` when MSE < 1e-12.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP_DB
    } else {
        10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
    }
}

/// W1 between two 1-D empirical distributions: the integral of |F_a - F_b|.
/// Works for unequal sample counts; for equal counts it is the mean sorted
/// difference.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain {
            what: "sample count",
            value: 0.0,
            domain: ">= 1".into(),
        });
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

fn check_points(points: &[Vec<f64>], dim: Option<usize>) -> Result<usize> {
    let d = points
        .first()
        .ok_or(Error::Domain {
            what: "sample count",
            value: 0.0,
            domain: ">= 1".into(),
        })?
        .len();
    let d = dim.unwrap_or(d);
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::shape(format!("{d}-dimensional points"), p.len()));
    }
    Ok(d)
}

/// Mean over `projections` random unit directions of the 1-D W1 distance
/// between the projected point sets.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], projections: usize, rng: &mut Stream) -> Result<f64> {
    let d = check_points(a, None)?;
    check_points(b, Some(d))?;
    if projections == 0 {
        return Err(Error::Domain {
            what: "projection count",
            value: 0.0,
            domain: ">= 1".into(),
        });
    }
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir = rng.normals(d);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let proj = |p: &Vec<f64>| p.iter().zip(&dir).map(|(x, u)| x * u).sum::<f64>();
        let pa: Vec<f64> = a.iter().map(proj).collect();
        let pb: Vec<f64> = b.iter().map(proj).collect();
        total += wasserstein_1d(&pa, &pb)?;
    }
    Ok(total / projections as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryStats {
    /// Fraction of samples whose nearest component mean is component k.
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
    /// Mean of the samples assigned to each component (NaN if none).
    pub means: Vec<Vec<f64>>,
    pub sample_mean: Vec<f64>,
    /// Row-major d x d.
    pub sample_covariance: Vec<f64>,
    /// Frobenius norm of sample covariance minus mixture covariance.
    pub covariance_error: f64,
    pub max_weight_error: f64,
    pub max_mean_error: f64,
}

pub fn gmm_recovery_stats(samples: &[Vec<f64>], gm: &GaussianMixture) -> Result<RecoveryStats> {
    let d = check_points(samples, Some(gm.dim()))?;
    let k = gm.components();
    let n = samples.len() as f64;
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; d]; k];
    let mut mean = vec![0.0; d];
    for p in samples {
        let nearest = gm
            .means()
            .iter()
            .map(|m| m.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |(bi, bd), (i, dd)| if dd < bd { (i, dd) } else { (bi, bd) },
            )
            .0;
        counts[nearest] += 1;
        for (s, v) in sums[nearest].iter_mut().zip(p) {
            *s += v;
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for p in samples {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n);
    let truth = gm.covariance();
    let covariance_error = cov
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| if c == 0 { f64::NAN } else { v / c as f64 }).collect())
        .collect();
    let max_weight_error = weights
        .iter()
        .zip(gm.weights())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let max_mean_error = means
        .iter()
        .zip(gm.means())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .fold(0.0, |acc: f64, e| if e.is_nan() { f64::INFINITY } else { acc.max(e) });
    Ok(RecoveryStats {
        weights,
        counts,
        means,
        sample_mean: mean,
        sample_covariance: cov,
        covariance_error,
        max_weight_error,
        max_mean_error,
    })
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for n = 1).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub shape_l2: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean_shape_l2: f64,
    pub std_shape_l2: f64,
    pub mean_psnr: f64,
    pub std_psnr: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let (mean_shape_l2, std_shape_l2) = mean_std(&rows.iter().map(|r| r.shape_l2).collect::<Vec<_>>());
        let (mean_psnr, std_psnr) = mean_std(&rows.iter().map(|r| r.psnr).collect::<Vec<_>>());
        Self {
            rows,
            mean_shape_l2,
            std_shape_l2,
            mean_psnr,
            std_psnr,
        }
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    /// Recompute the aggregates from the rows and compare within `tol`.
    pub fn verify(&self, tol: f64) -> Result<()> {
        let fresh = MetricReport::from_rows(self.rows.clone());
        let pairs = [
            ("mean_shape_l2", self.mean_shape_l2, fresh.mean_shape_l2),
            ("std_shape_l2", self.std_shape_l2, fresh.std_shape_l2),
            ("mean_psnr", self.mean_psnr, fresh.mean_psnr),
            ("std_psnr", self.std_psnr, fresh.std_psnr),
        ];
        for (name, stored, recomputed) in pairs {
            if (stored - recomputed).abs() > tol {
                return Err(Error::Numeric {
                    context: format!("{name}: stored {stored} but rows give {recomputed}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for mean(a - b) < 0.
    pub p_value: f64,
}

/// One-sided paired t-test of the alternative "a is smaller than b".
pub fn paired_t_test_less(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::Domain {
            what: "paired sample count",
            value: a.len() as f64,
            domain: ">= 2".into(),
        });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let (m, sd) = mean_std(&diffs);
    if sd == 0.0 {
        let p_value = if m < 0.0 { 0.0 } else { 1.0 };
        let t = if m == 0.0 { 0.0 } else { m.signum() * f64::INFINITY };
        return Ok(PairedTTest {
            n,
            mean_diff: m,
            t,
            p_value,
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numeric {
        context: format!("t distribution: {e}"),
    })?;
    Ok(PairedTTest {
        n,
        mean_diff: m,
        t,
        p_value: dist.cdf(t),
    })
}
