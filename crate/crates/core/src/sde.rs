//! Variance-preserving forward SDE with a linear noise schedule.
//!
//! `dy = -1/2 beta(t) y dt + sqrt(beta(t)) dw`, whose perturbation kernel is
//! `y_t = alpha(t) y_0 + sigma(t) z` with `alpha(t) = exp(-1/2 int_0^t beta)` and
//! `sigma(t)^2 = 1 - alpha(t)^2`.

use crate::error::{Error, Result};
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdeSchedule {
    beta_min: f64,
    beta_max: f64,
    horizon: f64,
}

impl Default for SdeSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
        }
    }
}

impl SdeSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max.is_finite()) {
            return Err(Error::Config(format!(
                "schedule needs 0 < beta_min < beta_max, got {beta_min}, {beta_max}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon T must be > 0, got {horizon}")));
        }
        Ok(Self {
            beta_min,
            beta_max,
            horizon,
        })
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: format!("[0, {}]", self.horizon),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta_min + (t / self.horizon) * (self.beta_max - self.beta_min))
    }

    /// `int_0^t beta(u) du` in closed form.
    pub fn integrated_beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.horizon)
    }

    /// `(alpha(t), sigma(t))`. `sigma` is evaluated as `sqrt(-expm1(-B))`, which
    /// equals `sqrt(1 - alpha^2)` without cancellation near `t = 0`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let b = self.integrated_beta(t)?;
        Ok(((-0.5 * b).exp(), (-(-b).exp_m1()).sqrt()))
    }

    /// `alpha(t) * y0 + sigma(t) * z`.
    pub fn perturb(&self, y0: &Image, t: f64, z: &Image) -> Result<Image> {
        let (a, s) = self.alpha_sigma(t)?;
        y0.zip_map(z, |y, n| a * y + s * n)
    }

    /// Forward drift `f(y, t) = -1/2 beta(t) y`.
    pub fn drift(&self, y: &Image, t: f64) -> Result<Image> {
        let b = self.beta(t)?;
        Ok(y.scale(-0.5 * b))
    }

    /// Diffusion coefficient `g(t) = sqrt(beta(t))`.
    pub fn diffusion(&self, t: f64) -> Result<f64> {
        Ok(self.beta(t)?.sqrt())
    }

    /// Ratio `alpha(t1) / alpha(t0)` of the forward transition from `t0` to `t1 >= t0`.
    pub fn transition_alpha(&self, t0: f64, t1: f64) -> Result<f64> {
        let b0 = self.integrated_beta(t0)?;
        let b1 = self.integrated_beta(t1)?;
        Ok((-0.5 * (b1 - b0)).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::tensor::Shape;

    fn sched() -> SdeSchedule {
        SdeSchedule::new(0.1, 20.0, 1.0).unwrap()
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = sched();
        assert_eq!(s.beta(0.0).unwrap(), 0.1);
        assert_eq!(s.beta(1.0).unwrap(), 20.0);
        assert!((s.beta(0.5).unwrap() - 10.05).abs() < 1e-12);
        assert!(matches!(s.beta(1.5), Err(Error::Domain { .. })));
        assert!(matches!(s.beta(-1e-9), Err(Error::Domain { .. })));
    }

    #[test]
    fn constructor_rejects_bad_schedules() {
        assert!(SdeSchedule::new(0.0, 20.0, 1.0).is_err());
        assert!(SdeSchedule::new(5.0, 1.0, 1.0).is_err());
        assert!(SdeSchedule::new(0.1, 20.0, 0.0).is_err());
    }

    #[test]
    fn alpha_sigma_values() {
        let s = sched();
        assert_eq!(s.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        // int beta over [0, 1] = 10.05, alpha = exp(-5.025)
        let (a, sg) = s.alpha_sigma(1.0).unwrap();
        assert!((a - (-5.025f64).exp()).abs() < 1e-15);
        // 6.5716e-3; the often-quoted 6.56e-3 is truncated, not rounded
        assert!((a - 6.5716e-3).abs() < 5e-7);
        assert!((a - 6.56e-3).abs() < 2e-5);
        assert!((sg - 0.99998).abs() < 5e-6);
    }

    #[test]
    fn variance_preserving_on_grid() {
        let s = sched();
        for i in 0..1000 {
            let t = i as f64 / 999.0;
            let (a, sg) = s.alpha_sigma(t).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() <= 1e-12, "t = {t}");
        }
    }

    #[test]
    fn perturb_limits() {
        let s = sched();
        let shape = Shape::new(1, 2, 2);
        let y0 = Image::from_vec(shape, vec![0.3, -0.7, 1.0, 0.0]).unwrap();
        let z = Image::from_vec(shape, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        assert_eq!(s.perturb(&y0, 0.0, &z).unwrap(), y0);
        let (a, _) = s.alpha_sigma(0.3).unwrap();
        assert_eq!(s.perturb(&y0, 0.3, &Image::zeros(shape)).unwrap(), y0.scale(a));
        let bad = Image::zeros(Shape::new(1, 1, 4));
        assert!(s.perturb(&y0, 0.3, &bad).is_err());
    }

    #[test]
    fn perturb_is_affine_in_y0() {
        let s = sched();
        let shape = Shape::new(1, 1, 3);
        let y0 = Image::from_vec(shape, vec![0.2, -0.4, 0.9]).unwrap();
        let zero = Image::zeros(shape);
        let lhs = s.perturb(&y0.scale(2.5), 0.6, &zero).unwrap();
        let rhs = s.perturb(&y0, 0.6, &zero).unwrap().scale(2.5);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn perturb_monte_carlo_statistics() {
        let s = sched();
        let shape = Shape::new(1, 1, 4);
        let y0 = Image::from_vec(shape, vec![0.8, -0.5, 0.0, 1.0]).unwrap();
        let t = 0.4;
        let (a, sg) = s.alpha_sigma(t).unwrap();
        let mut rng = Stream::new(11, 0);
        let n = 10_000;
        let mut sum = [0.0; 4];
        let mut sum_sq = [0.0; 4];
        for _ in 0..n {
            let z = Image::from_vec(shape, rng.normals(4)).unwrap();
            let y = s.perturb(&y0, t, &z).unwrap();
            for k in 0..4 {
                sum[k] += y.data()[k];
                sum_sq[k] += y.data()[k] * y.data()[k];
            }
        }
        for k in 0..4 {
            let mean = sum[k] / n as f64;
            let var = (sum_sq[k] - n as f64 * mean * mean) / (n - 1) as f64;
            let se = sg / (n as f64).sqrt();
            assert!((mean - a * y0.data()[k]).abs() < 3.0 * se, "pixel {k} mean {mean}");
            assert!((var / (sg * sg) - 1.0).abs() < 0.05, "pixel {k} var {var}");
        }
    }

    #[test]
    fn drift_and_diffusion() {
        let s = sched();
        let y = Image::vector(vec![2.0, -1.0]);
        assert_eq!(s.drift(&Image::zeros(y.shape()), 0.3).unwrap().sq_norm(), 0.0);
        let d = s.drift(&y, 0.3).unwrap();
        let dn = s.drift(&y.scale(-1.0), 0.3).unwrap();
        assert_eq!(d, dn.scale(-1.0));
        // beta = 1 at t where 0.1 + 19.9 t = 1
        let t1 = 0.9 / 19.9;
        let d1 = s.drift(&Image::vector(vec![2.0]), t1).unwrap();
        assert!((d1.data()[0] + 1.0).abs() < 1e-12);

        assert!((s.diffusion(0.0).unwrap() - 0.1f64.sqrt()).abs() < 1e-15);
        assert!((s.diffusion(0.0).unwrap() - 0.31623).abs() < 1e-5);
        let t4 = 3.9 / 19.9;
        assert!((s.diffusion(t4).unwrap() - 2.0).abs() < 1e-12);
        let mut prev = -1.0;
        for i in 0..=100 {
            let g = s.diffusion(i as f64 / 100.0).unwrap();
            assert!(g > prev);
            prev = g;
        }
    }

    // The closed-form kernel matches the marginal of the discretised forward SDE.
    #[test]
    fn kernel_matches_forward_euler_maruyama() {
        let s = sched();
        let (y0, t, steps, paths) = (1.5, 0.4, 1000, 40_000);
        let h = t / steps as f64;
        let mut rng = Stream::new(5, 1);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..paths {
            let mut y = y0;
            for i in 0..steps {
                let ti = i as f64 * h;
                let b = s.beta(ti).unwrap();
                y += -0.5 * b * y * h + b.sqrt() * h.sqrt() * rng.normal();
            }
            sum += y;
            sum_sq += y * y;
        }
        let mean = sum / paths as f64;
        let var = sum_sq / paths as f64 - mean * mean;
        let (a, sg) = s.alpha_sigma(t).unwrap();
        assert!((mean / (a * y0) - 1.0).abs() < 0.02, "mean {mean} vs {}", a * y0);
        assert!((var / (sg * sg) - 1.0).abs() < 0.02, "var {var} vs {}", sg * sg);
    }

    #[test]
    fn transition_composes() {
        let s = sched();
        let r = s.transition_alpha(0.2, 0.5).unwrap();
        let (a2, _) = s.alpha_sigma(0.2).unwrap();
        let (a5, _) = s.alpha_sigma(0.5).unwrap();
        assert!((r - a5 / a2).abs() < 1e-14);
    }
}
