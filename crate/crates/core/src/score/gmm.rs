use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::sde::SdeSchedule;
use crate::tensor::Image;

use super::ScoreModel;

/// Isotropic Gaussian mixture whose noised marginals, and hence exact scores,
/// are available in closed form for every `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::Config(format!(
                "mixture needs matching non-empty weights/means/variances, got {}/{}/{}",
                k,
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share one non-zero dimension".into()));
        }
        if weights.iter().any(|&w| w.is_nan() || w < 0.0) {
            return Err(Error::Config("mixture weights must be >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("mixture variances must be > 0".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Equal-weight mixture centred on each point (e.g. a set of toy photos).
    pub fn from_points(points: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let k = points.len();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one point".into()));
        }
        let w = vec![1.0 / k as f64; k];
        // equal weights can miss 1 by an ulp or two; renormalise the last one
        let mut w = w;
        let head: f64 = w[..k - 1].iter().sum();
        w[k - 1] = 1.0 - head;
        Self::new(w, points, vec![variance; k])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    fn check_point(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::shape(format!("dimension {}", self.dim()), y.len()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: "mixture score input".into(),
            });
        }
        Ok(())
    }

    /// Per-component log of `w_k N(y; alpha mu_k, (alpha^2 v_k + sigma^2) I)` and
    /// the component variances at time `t`.
    fn component_terms(&self, sched: &SdeSchedule, y: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (a, s) = sched.alpha_sigma(t)?;
        let d = self.dim() as f64;
        let mut logs = Vec::with_capacity(self.components());
        let mut vars = Vec::with_capacity(self.components());
        for ((w, mu), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let var = a * a * v + s * s;
            let sq: f64 = y.iter().zip(mu).map(|(yi, mi)| (yi - a * mi).powi(2)).sum();
            let lw = if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
            logs.push(lw - 0.5 * sq / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln());
            vars.push(var);
        }
        Ok((logs, vars))
    }

    /// `log q_t(y)` of the noised mixture.
    pub fn log_density(&self, sched: &SdeSchedule, y: &[f64], t: f64) -> Result<f64> {
        self.check_point(y)?;
        let (logs, _) = self.component_terms(sched, y, t)?;
        Ok(log_sum_exp(&logs))
    }

    /// Exact score `grad_y log q_t(y)`, responsibilities via log-sum-exp.
    pub fn score(&self, sched: &SdeSchedule, y: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(y)?;
        let (a, _) = sched.alpha_sigma(t)?;
        let (logs, vars) = self.component_terms(sched, y, t)?;
        let lse = log_sum_exp(&logs);
        let mut out = vec![0.0; y.len()];
        for ((l, var), mu) in logs.iter().zip(&vars).zip(&self.means) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for ((o, yi), mi) in out.iter_mut().zip(y).zip(mu) {
                *o -= r * (yi - a * mi) / var;
            }
        }
        Ok(out)
    }

    /// Draw `n` samples from the clean (t = 0) mixture.
    pub fn sample(&self, n: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let u = rng.uniform();
                let mut k = 0;
                let mut acc = self.weights[0];
                while u >= acc && k + 1 < self.components() {
                    k += 1;
                    acc += self.weights[k];
                }
                let sd = self.variances[k].sqrt();
                self.means[k].iter().map(|m| m + sd * rng.normal()).collect()
            })
            .collect()
    }

    /// Mixture covariance `sum_k w_k (v_k I + mu_k mu_k^T) - mu mu^T` (row-major).
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (m, x) in mean.iter_mut().zip(mu) {
                *m += w * x;
            }
        }
        let mut cov = vec![0.0; d * d];
        for ((w, mu), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for i in 0..d {
                cov[i * d + i] += w * v;
                for j in 0..d {
                    cov[i * d + j] += w * mu[i] * mu[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= mean[i] * mean[j];
            }
        }
        cov
    }
}

impl ScoreModel for GaussianMixture {
    fn score(&self, sched: &SdeSchedule, y: &Image, t: f64) -> Result<Image> {
        let s = GaussianMixture::score(self, sched, y.data(), t)?;
        Image::from_vec(y.shape(), s)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
