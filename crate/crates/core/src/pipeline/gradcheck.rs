//! Finite-difference and adjoint-identity checks of every hand-derived
//! gradient and linear operator, as a pass/fail report.

use std::fmt;

use crate::energy::{
    correlate3, correlate3_adjoint, finite_diff_partials, grad_appearance_energy, grad_shape_energy, s_a, s_g,
    EdgeExtractor, EnergyWeights, FeaturePyramid, LowPass, Similarity, SOBEL_X, SOBEL_Y,
};
use crate::error::Result;
use crate::rng::{purpose, Stream};
use crate::score::{benchmark_mixture, weighted_dsm_loss_and_grad, LossWeighting, NetArch, OutputScale, ScoreNet};
use crate::sde::SdeSchedule;
use crate::tensor::{Image, Shape};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Probes per gradient check (random coordinates or random points).
    pub probes: usize,
    pub size: usize,
    pub channels: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            probes: 100,
            size: 16,
            channels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Where the largest error occurred.
    pub worst: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<Check>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22} {:>6} {:>12} {:>9}  result",
            "check", "probes", "max_rel_err", "tol"
        )?;
        for c in &self.checks {
            write!(
                f,
                "{:<22} {:>6} {:>12.3e} {:>9.0e}  {}",
                c.name,
                c.probes,
                c.max_rel_err,
                c.tolerance,
                if c.passed() { "PASS" } else { "FAIL" }
            )?;
            if !c.passed() {
                write!(f, "  worst: {}", c.worst)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Running maximum of a relative error with a description of its location.
struct Worst {
    err: f64,
    at: String,
    probes: usize,
}

impl Worst {
    fn new() -> Self {
        Self {
            err: 0.0,
            at: String::new(),
            probes: 0,
        }
    }

    fn see(&mut self, err: f64, at: impl FnOnce() -> String) {
        self.probes += 1;
        // a NaN sticks as the worst so the check can never pass
        if self.err.is_nan() {
            return;
        }
        if err.is_nan() || err > self.err || self.at.is_empty() {
            self.err = err;
            self.at = at();
        }
    }

    fn finish(self, name: &'static str, tolerance: f64) -> Check {
        Check {
            name,
            probes: self.probes,
            max_rel_err: if self.err.is_nan() { f64::INFINITY } else { self.err },
            tolerance,
            worst: self.at,
        }
    }
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn rand_img(rng: &mut Stream, s: Shape, scale: f64) -> Image {
    Image::from_vec(s, rng.normals(s.len()).into_iter().map(|v| scale * v).collect()).expect("sized")
}

fn coord_name(s: Shape, k: usize) -> String {
    let plane = s.plane();
    format!("(c={}, i={}, j={})", k / plane, (k % plane) / s.width, k % s.width)
}

/// The default suite.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    run_gradcheck_with(opts, &|lp: &LowPass, u: &Image| lp.omega(u))
}

/// As [`run_gradcheck`], with the adjoint of the low-pass operator supplied by
/// the caller (the operator is self-adjoint, so the default is itself).
pub fn run_gradcheck_with(
    opts: &GradcheckOptions,
    omega_adjoint: &dyn Fn(&LowPass, &Image) -> Result<Image>,
) -> Result<GradcheckReport> {
    let mut rng = Stream::for_purpose(opts.seed, purpose::GRADCHECK, 0);
    let sched = SdeSchedule::default();
    let s = Shape::new(opts.channels, opts.size, opts.size);
    let sk_shape = Shape::new(1, opts.size, opts.size);
    let edge = EdgeExtractor::default();
    let lp = LowPass::new(4)?;
    let fp = FeaturePyramid::new(opts.seed, opts.channels)?;
    let mut checks = Vec::new();

    // shape energy
    {
        let y = rand_img(&mut rng, s, 0.5);
        let sk0 = Image::from_vec(sk_shape, (0..sk_shape.len()).map(|_| rng.uniform()).collect())?;
        let noise = rand_img(&mut rng, sk_shape, 1.0);
        let w = EnergyWeights::new(0.1, 0.0)?;
        let t = 0.3;
        let g = grad_shape_energy(&edge, Similarity::L2, &w, &sched, &y, &sk0, t, &noise)?;
        let target = sched.perturb(&sk0, t, &noise)?;
        let f = |z: &Image| w.lambda_g * s_g(&edge, z, &target).unwrap_or(f64::NAN);
        let coords: Vec<usize> = (0..opts.probes).map(|_| rng.below(y.len())).collect();
        let fd = finite_diff_partials(f, &y, 1e-6, &coords)?;
        let floor = 1e-3 * g.max_abs();
        let mut worst = Worst::new();
        for (&k, n) in coords.iter().zip(&fd) {
            let a = g.data()[k];
            worst.see(rel(a, *n, floor), || {
                format!("{} analytic {a:.6e} numeric {n:.6e}", coord_name(s, k))
            });
        }
        checks.push(worst.finish("shape_gradient", 1e-4));
    }

    // appearance energy
    {
        let y = rand_img(&mut rng, s, 0.5);
        let ex = rand_img(&mut rng, s, 0.5);
        let noise = rand_img(&mut rng, s, 1.0);
        let w = EnergyWeights::new(0.0, 2.0)?;
        let t = 0.3;
        let g = grad_appearance_energy(&lp, &fp, &w, &sched, &y, &ex, t, &noise)?;
        let target = sched.perturb(&ex, t, &noise)?;
        let f = |z: &Image| w.lambda_a * s_a(&lp, &fp, z, &target).unwrap_or(f64::NAN);
        let coords: Vec<usize> = (0..opts.probes).map(|_| rng.below(y.len())).collect();
        let fd = finite_diff_partials(f, &y, 1e-3, &coords)?;
        let floor = 1e-3 * g.max_abs();
        let mut worst = Worst::new();
        for (&k, n) in coords.iter().zip(&fd) {
            let a = g.data()[k];
            worst.see(rel(a, *n, floor), || {
                format!("{} analytic {a:.6e} numeric {n:.6e}", coord_name(s, k))
            });
        }
        checks.push(worst.finish("appearance_gradient", 1e-6));
    }

    // low-pass projection
    {
        let mut idem = Worst::new();
        let mut adj = Worst::new();
        for p in 0..10 {
            let x = rand_img(&mut rng, s, 1.0);
            let u = rand_img(&mut rng, s, 1.0);
            let ox = lp.omega(&x)?;
            let e = lp.omega(&ox)?.sq_dist(&ox)?.sqrt() / x.sq_norm().sqrt();
            idem.see(e, || format!("pair {p}"));
            let lhs = ox.dot(&u)?;
            let rhs = x.dot(&omega_adjoint(&lp, &u)?)?;
            adj.see(rel(lhs, rhs, 1.0), || {
                format!("pair {p}: <Ox,u> {lhs:.6e} <x,O'u> {rhs:.6e}")
            });
        }
        checks.push(idem.finish("omega_idempotence", 1e-12));
        checks.push(adj.finish("omega_self_adjoint", 1e-10));
    }

    // pyramid levels
    {
        let mut worst = Worst::new();
        for p in 0..10 {
            let x = rand_img(&mut rng, s, 1.0);
            for (l, f) in fp.psi_features(&x)?.iter().enumerate() {
                let u = rand_img(&mut rng, f.shape(), 1.0);
                let lhs = f.dot(&u)?;
                let rhs = x.dot(&fp.level_adjoint(l + 1, &u)?)?;
                worst.see(rel(lhs, rhs, 1e-300), || {
                    format!("pair {p} level {}: {lhs:.6e} vs {rhs:.6e}", l + 1)
                });
            }
        }
        checks.push(worst.finish("psi_adjoint", 1e-10));
    }

    // Sobel correlation
    {
        let mut worst = Worst::new();
        let (h, w) = (opts.size, opts.size);
        for p in 0..10 {
            let x = rng.normals(h * w);
            let u = rng.normals(h * w);
            for (name, k) in [("x", &SOBEL_X), ("y", &SOBEL_Y)] {
                let lhs: f64 = correlate3(&x, h, w, k).iter().zip(&u).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.iter().zip(&correlate3_adjoint(&u, h, w, k)).map(|(a, b)| a * b).sum();
                worst.see(rel(lhs, rhs, 1.0), || {
                    format!("pair {p} kernel {name}: {lhs:.6e} vs {rhs:.6e}")
                });
            }
        }
        checks.push(worst.finish("sobel_adjoint", 1e-12));
    }

    // mixture score against the log-density gradient
    {
        let gm = benchmark_mixture();
        let h = 1e-5;
        let mut worst = Worst::new();
        for p in 0..opts.probes {
            let y: Vec<f64> = rng.normals(2).into_iter().map(|v| 1.5 * v).collect();
            let t = rng.uniform_range(0.05, 1.0);
            let a = gm.score(&sched, &y, t)?;
            let mut num = Vec::with_capacity(2);
            for i in 0..2 {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[i] += h;
                ym[i] -= h;
                num.push((gm.log_density(&sched, &yp, t)? - gm.log_density(&sched, &ym, t)?) / (2.0 * h));
            }
            let diff = ((a[0] - num[0]).powi(2) + (a[1] - num[1]).powi(2)).sqrt();
            let norm = (a[0] * a[0] + a[1] * a[1])
                .sqrt()
                .max((num[0] * num[0] + num[1] * num[1]).sqrt());
            worst.see(diff / norm.max(1e-8), || {
                format!("probe {p} y={y:?} t={t:.4}: {a:?} vs {num:?}")
            });
        }
        checks.push(worst.finish("gmm_score", 1e-6));
    }

    // score-network parameter gradient of the training loss
    {
        let arch = NetArch {
            shape: Shape::new(1, 1, 3),
            hidden: 16,
            time_features: 8,
            output: OutputScale::Denoiser,
        };
        let net = ScoreNet::new(arch, opts.seed);
        let data: Vec<Vec<f64>> = (0..6).map(|_| rng.normals(3)).collect();
        let zs: Vec<Vec<f64>> = (0..6).map(|_| rng.normals(3)).collect();
        let ts: Vec<f64> = (0..6).map(|_| rng.uniform_range(0.05, 1.0)).collect();
        let b: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let z: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let wt = LossWeighting::DataSpace;
        let (_, g) = weighted_dsm_loss_and_grad(&net, &sched, &b, &ts, &z, wt)?;
        let flat = g.flat();
        let h = 1e-6;
        let mut worst = Worst::new();
        for _ in 0..opts.probes.min(40) {
            let i = rng.below(net.param_count());
            let mut p = net.clone();
            let mut m = net.clone();
            p.set_param(i, net.param(i) + h);
            m.set_param(i, net.param(i) - h);
            let lp = weighted_dsm_loss_and_grad(&p, &sched, &b, &ts, &z, wt)?.0;
            let lm = weighted_dsm_loss_and_grad(&m, &sched, &b, &ts, &z, wt)?.0;
            let fd = (lp - lm) / (2.0 * h);
            worst.see(rel(flat[i], fd, 1e-6), || {
                format!("param {i}: analytic {:.6e} numeric {fd:.6e}", flat[i])
            });
        }
        checks.push(worst.finish("score_net_gradient", 1e-4));
    }

    Ok(GradcheckReport { checks })
}
