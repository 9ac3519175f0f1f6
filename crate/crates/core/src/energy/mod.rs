//! Shape and appearance energies and their exact gradients w.r.t. the sample.
//!
//! Shape: `S_g(y, x_sk_t) = |phi(y) - x_sk_t|^2` (or the L1 variant), with
//! `phi` the Sobel sketch proxy. Appearance:
//! `S_a(y, x_ex_t) = |Omega(y) - Omega(x_ex_t)|^2 + sum_l |Psi_l(y) - Psi_l(x_ex_t)|^2`.
//! Both targets are perturbed to the current time before comparison, one draw
//! per evaluation.

mod edge;
mod lowpass;
mod pyramid;

pub use edge::{correlate3, correlate3_adjoint, EdgeExtractor, EdgeForward, SOBEL_X, SOBEL_Y};
pub use lowpass::LowPass;
pub use pyramid::{FeaturePyramid, PYRAMID_CHANNELS, PYRAMID_LEVELS};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sde::SdeSchedule;
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyWeights {
    pub lambda_g: f64,
    pub lambda_a: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            lambda_g: 0.1,
            lambda_a: 2.0,
        }
    }
}

impl EnergyWeights {
    pub fn new(lambda_g: f64, lambda_a: f64) -> Result<Self> {
        let w = Self { lambda_g, lambda_a };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_g", self.lambda_g), ("lambda_a", self.lambda_a)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Distance used inside the shape energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Similarity {
    #[default]
    L2,
    L1,
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::L2 => "l2",
            Similarity::L1 => "l1",
        })
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Similarity::L2),
            "l1" => Ok(Similarity::L1),
            other => Err(Error::Config(format!("unknown similarity `{other}` (l2|l1)"))),
        }
    }
}

fn check_sketch_target(y: &Image, target: &Image) -> Result<()> {
    if target.channels() != 1 || target.height() != y.height() || target.width() != y.width() {
        return Err(Error::shape(
            format!("1x{}x{} sketch", y.height(), y.width()),
            target.shape(),
        ));
    }
    Ok(())
}

/// Shape similarity between `phi(y)` and a (perturbed) sketch.
pub fn shape_similarity(ext: &EdgeExtractor, sim: Similarity, y: &Image, x_sk_t: &Image) -> Result<f64> {
    check_sketch_target(y, x_sk_t)?;
    let sk = ext.phi_sketch(y)?;
    let d = sk.data().iter().zip(x_sk_t.data()).map(|(a, b)| a - b);
    Ok(match sim {
        Similarity::L2 => d.map(|v| v * v).sum(),
        Similarity::L1 => d.map(f64::abs).sum(),
    })
}

/// `S_g`: squared L2 distance between `phi(y)` and `x_sk_t`.
pub fn s_g(ext: &EdgeExtractor, y: &Image, x_sk_t: &Image) -> Result<f64> {
    shape_similarity(ext, Similarity::L2, y, x_sk_t)
}

/// Gradient of [`shape_similarity`] w.r.t. `y` (a subgradient for L1).
pub fn shape_similarity_grad(ext: &EdgeExtractor, sim: Similarity, y: &Image, x_sk_t: &Image) -> Result<Image> {
    check_sketch_target(y, x_sk_t)?;
    let fwd = ext.forward(y)?;
    let g = fwd.sketch.zip_map(x_sk_t, |a, b| match sim {
        Similarity::L2 => 2.0 * (a - b),
        Similarity::L1 => {
            let d = a - b;
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
    })?;
    ext.vjp(&fwd, y.shape(), &g)
}

/// Pixel and feature terms of `S_a`, separately.
pub fn appearance_terms(lp: &LowPass, fp: &FeaturePyramid, y: &Image, x_ex_t: &Image) -> Result<(f64, f64)> {
    y.ensure_same_shape(x_ex_t)?;
    let pixel = lp.omega(y)?.sq_dist(&lp.omega(x_ex_t)?)?;
    let fy = fp.psi_features(y)?;
    let fx = fp.psi_features(x_ex_t)?;
    let mut feature = 0.0;
    for (a, b) in fy.iter().zip(&fx) {
        feature += a.sq_dist(b)?;
    }
    Ok((pixel, feature))
}

/// `S_a`: pixel-level low-pass distance plus feature-level pyramid distance.
pub fn s_a(lp: &LowPass, fp: &FeaturePyramid, y: &Image, x_ex_t: &Image) -> Result<f64> {
    let (p, f) = appearance_terms(lp, fp, y, x_ex_t)?;
    Ok(p + f)
}

/// `grad_y S_a = 2 Omega(y - x) + 2 sum_l Psi_l^T (Psi_l(y) - Psi_l(x))`.
pub fn appearance_grad(lp: &LowPass, fp: &FeaturePyramid, y: &Image, x_ex_t: &Image) -> Result<Image> {
    let diff = y.sub(x_ex_t)?;
    let mut g = lp.omega(&diff)?.scale(2.0);
    let fd: Vec<Image> = fp.psi_features(&diff)?.into_iter().map(|f| f.scale(2.0)).collect();
    g.axpy(1.0, &fp.adjoint_sum(&fd)?)?;
    Ok(g)
}

/// `lambda_g * grad_y S_g(y, x_sk_t)` with `x_sk_t = perturb(x_sk_0, t, noise)`.
#[allow(clippy::too_many_arguments)]
pub fn grad_shape_energy(
    ext: &EdgeExtractor,
    sim: Similarity,
    w: &EnergyWeights,
    sched: &SdeSchedule,
    y: &Image,
    x_sk_0: &Image,
    t: f64,
    noise: &Image,
) -> Result<Image> {
    check_sketch_target(y, x_sk_0)?;
    if w.lambda_g == 0.0 {
        return Ok(Image::zeros(y.shape()));
    }
    let x_sk_t = sched.perturb(x_sk_0, t, noise)?;
    Ok(shape_similarity_grad(ext, sim, y, &x_sk_t)?.scale(w.lambda_g))
}

/// `lambda_a * grad_y S_a(y, x_ex_t)` with `x_ex_t = perturb(x_ex_0, t, noise)`.
#[allow(clippy::too_many_arguments)]
pub fn grad_appearance_energy(
    lp: &LowPass,
    fp: &FeaturePyramid,
    w: &EnergyWeights,
    sched: &SdeSchedule,
    y: &Image,
    x_ex_0: &Image,
    t: f64,
    noise: &Image,
) -> Result<Image> {
    y.ensure_same_shape(x_ex_0)?;
    if w.lambda_a == 0.0 {
        return Ok(Image::zeros(y.shape()));
    }
    let x_ex_t = sched.perturb(x_ex_0, t, noise)?;
    Ok(appearance_grad(lp, fp, y, &x_ex_t)?.scale(w.lambda_a))
}

/// The extractors shared by both inversion stages.
#[derive(Clone, Debug)]
pub struct EnergySuite {
    pub edge: EdgeExtractor,
    pub lowpass: LowPass,
    pub pyramid: FeaturePyramid,
    pub similarity: Similarity,
}

impl EnergySuite {
    /// Default extractors for `channels x height x width` images.
    pub fn for_shape(channels: usize, height: usize, pyramid_seed: u64) -> Result<Self> {
        Ok(Self {
            edge: EdgeExtractor::default(),
            lowpass: LowPass::for_height(height),
            pyramid: FeaturePyramid::new(pyramid_seed, channels)?,
            similarity: Similarity::L2,
        })
    }
}

/// Central-difference gradient of `f` at every coordinate of `y`.
pub fn finite_diff_gradient(f: impl Fn(&Image) -> f64, y: &Image, step: f64) -> Result<Image> {
    let coords: Vec<usize> = (0..y.len()).collect();
    let partials = finite_diff_partials(f, y, step, &coords)?;
    Image::from_vec(y.shape(), partials)
}

/// Central differences at a subset of coordinates, in the given order.
pub fn finite_diff_partials(f: impl Fn(&Image) -> f64, y: &Image, step: f64, coords: &[usize]) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Domain {
            what: "step",
            value: step,
            domain: "(0, inf)".into(),
        });
    }
    let mut probe = y.clone();
    coords
        .iter()
        .map(|&k| {
            if k >= y.len() {
                return Err(Error::shape(format!("coordinate < {}", y.len()), k));
            }
            let orig = probe.data()[k];
            probe.data_mut()[k] = orig + step;
            let fp = f(&probe);
            probe.data_mut()[k] = orig - step;
            let fm = f(&probe);
            probe.data_mut()[k] = orig;
            Ok((fp - fm) / (2.0 * step))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::tensor::Shape;

    fn rand_img(rng: &mut Stream, s: Shape, scale: f64) -> Image {
        Image::from_vec(s, rng.normals(s.len()).into_iter().map(|v| scale * v).collect()).unwrap()
    }

    fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(floor)
    }

    fn suite() -> EnergySuite {
        EnergySuite {
            edge: EdgeExtractor::default(),
            lowpass: LowPass::new(4).unwrap(),
            pyramid: FeaturePyramid::new(13, 3).unwrap(),
            similarity: Similarity::L2,
        }
    }

    #[test]
    fn shape_similarity_values() {
        let ext = EdgeExtractor::default();
        let mut rng = Stream::new(1, 0);
        let y = rand_img(&mut rng, Shape::new(3, 8, 8), 0.5);
        let sk = ext.phi_sketch(&y).unwrap();
        assert_eq!(s_g(&ext, &y, &sk).unwrap(), 0.0);

        let flat = Image::zeros(Shape::new(3, 4, 4));
        let zeros = Image::zeros(Shape::new(1, 4, 4));
        assert_eq!(s_g(&ext, &flat, &zeros).unwrap(), 16.0);

        let target = rand_img(&mut rng, Shape::new(1, 8, 8), 1.0);
        let mut brute = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                brute += (sk.at(0, i, j) - target.at(0, i, j)).powi(2);
            }
        }
        assert!((s_g(&ext, &y, &target).unwrap() - brute).abs() < 1e-12 * brute);
        assert!(s_g(&ext, &y, &Image::zeros(Shape::new(1, 8, 7))).is_err());
        assert!(s_g(&ext, &y, &Image::zeros(Shape::new(3, 8, 8))).is_err());
    }

    #[test]
    fn appearance_values() {
        let en = suite();
        let mut rng = Stream::new(2, 0);
        let s = Shape::new(3, 8, 8);
        let y = rand_img(&mut rng, s, 0.5);
        assert_eq!(s_a(&en.lowpass, &en.pyramid, &y, &y).unwrap(), 0.0);

        // zero-mean change inside one 4x4 block leaves the pixel term at zero
        let mut x = y.clone();
        x.data_mut()[y.idx(1, 0, 0)] += 0.3;
        x.data_mut()[y.idx(1, 3, 2)] -= 0.3;
        let (pixel, feature) = appearance_terms(&en.lowpass, &en.pyramid, &y, &x).unwrap();
        assert!(pixel.abs() < 1e-24, "{pixel}");
        assert!(feature > 0.0);

        let x = rand_img(&mut rng, s, 0.5);
        let oy = en.lowpass.omega(&y).unwrap();
        let ox = en.lowpass.omega(&x).unwrap();
        let mut brute: f64 = oy.data().iter().zip(ox.data()).map(|(a, b)| (a - b).powi(2)).sum();
        for (a, b) in en
            .pyramid
            .psi_features(&y)
            .unwrap()
            .iter()
            .zip(&en.pyramid.psi_features(&x).unwrap())
        {
            brute += a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        }
        let v = s_a(&en.lowpass, &en.pyramid, &y, &x).unwrap();
        assert!((v - brute).abs() <= 1e-12 * brute);
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let en = suite();
        let sched = SdeSchedule::default();
        let mut rng = Stream::new(3, 0);
        let s = Shape::new(3, 8, 8);
        let y = rand_img(&mut rng, s, 0.5);
        let sk = rand_img(&mut rng, Shape::new(1, 8, 8), 0.5);
        let ex = rand_img(&mut rng, s, 0.5);
        let w = EnergyWeights::new(0.0, 0.0).unwrap();
        let gs = grad_shape_energy(&en.edge, en.similarity, &w, &sched, &y, &sk, 0.3, &sk).unwrap();
        let ga = grad_appearance_energy(&en.lowpass, &en.pyramid, &w, &sched, &y, &ex, 0.3, &ex).unwrap();
        assert_eq!(gs.sq_norm(), 0.0);
        assert_eq!(ga.sq_norm(), 0.0);
    }

    #[test]
    fn appearance_gradient_vanishes_at_target() {
        let en = suite();
        let sched = SdeSchedule::default();
        let mut rng = Stream::new(4, 0);
        let s = Shape::new(3, 8, 8);
        let ex = rand_img(&mut rng, s, 0.5);
        let noise = rand_img(&mut rng, s, 1.0);
        let t = 0.25;
        let y = sched.perturb(&ex, t, &noise).unwrap();
        let w = EnergyWeights::default();
        let g = grad_appearance_energy(&en.lowpass, &en.pyramid, &w, &sched, &y, &ex, t, &noise).unwrap();
        assert_eq!(g.sq_norm(), 0.0);
    }

    #[test]
    fn shape_gradient_matches_finite_differences() {
        let en = suite();
        let sched = SdeSchedule::default();
        let mut rng = Stream::new(5, 0);
        let s = Shape::new(3, 8, 8);
        let y = rand_img(&mut rng, s, 0.5);
        let sk0 = rand_img(&mut rng, Shape::new(1, 8, 8), 0.3).map(|v| v + 0.7);
        let noise = rand_img(&mut rng, Shape::new(1, 8, 8), 1.0);
        let w = EnergyWeights::new(0.1, 0.0).unwrap();
        let t = 0.3;
        let g = grad_shape_energy(&en.edge, en.similarity, &w, &sched, &y, &sk0, t, &noise).unwrap();
        let target = sched.perturb(&sk0, t, &noise).unwrap();
        let f = |z: &Image| w.lambda_g * s_g(&en.edge, z, &target).unwrap();
        let coords: Vec<usize> = (0..20).map(|_| rng.below(y.len())).collect();
        let fd = finite_diff_partials(f, &y, 1e-6, &coords).unwrap();
        let floor = 1e-3 * g.max_abs();
        for (&k, n) in coords.iter().zip(&fd) {
            assert!(
                rel_err(g.data()[k], *n, floor) <= 1e-4,
                "coord {k}: {} vs {n}",
                g.data()[k]
            );
        }
    }

    #[test]
    fn shape_gradient_ignores_constant_offset() {
        let en = suite();
        let sched = SdeSchedule::default();
        let mut rng = Stream::new(6, 0);
        let y = rand_img(&mut rng, Shape::new(3, 8, 8), 0.5);
        let sk0 = rand_img(&mut rng, Shape::new(1, 8, 8), 0.5);
        let noise = rand_img(&mut rng, Shape::new(1, 8, 8), 1.0);
        let w = EnergyWeights::default();
        let a = grad_shape_energy(&en.edge, en.similarity, &w, &sched, &y, &sk0, 0.2, &noise).unwrap();
        let b = grad_shape_energy(
            &en.edge,
            en.similarity,
            &w,
            &sched,
            &y.map(|v| v - 0.4),
            &sk0,
            0.2,
            &noise,
        )
        .unwrap();
        assert!(a.sq_dist(&b).unwrap().sqrt() <= 1e-10 * a.sq_norm().sqrt());
    }

    #[test]
    fn appearance_gradient_matches_finite_differences() {
        let en = suite();
        let sched = SdeSchedule::default();
        let mut rng = Stream::new(7, 0);
        let s = Shape::new(3, 8, 8);
        let y = rand_img(&mut rng, s, 0.5);
        let ex = rand_img(&mut rng, s, 0.5);
        let noise = rand_img(&mut rng, s, 1.0);
        let w = EnergyWeights::new(0.0, 2.0).unwrap();
        let t = 0.3;
        let g = grad_appearance_energy(&en.lowpass, &en.pyramid, &w, &sched, &y, &ex, t, &noise).unwrap();
        let target = sched.perturb(&ex, t, &noise).unwrap();
        let f = |z: &Image| w.lambda_a * s_a(&en.lowpass, &en.pyramid, z, &target).unwrap();
        let coords: Vec<usize> = (0..20).map(|_| rng.below(y.len())).collect();
        let fd = finite_diff_partials(f, &y, 1e-3, &coords).unwrap();
        let floor = 1e-3 * g.max_abs();
        for (&k, n) in coords.iter().zip(&fd) {
            assert!(
                rel_err(g.data()[k], *n, floor) <= 1e-6,
                "coord {k}: {} vs {n}",
                g.data()[k]
            );
        }
    }

    #[test]
    fn l1_subgradient_matches_away_from_ties() {
        let en = suite();
        let mut rng = Stream::new(8, 0);
        let y = rand_img(&mut rng, Shape::new(3, 8, 8), 0.5);
        let sk = en.edge.phi_sketch(&y).unwrap();
        // keep every |phi(y) - target| above 1e-3
        let target = sk.map(|v| if v > 0.5 { v - 0.2 } else { v + 0.2 });
        let g = shape_similarity_grad(&en.edge, Similarity::L1, &y, &target).unwrap();
        let f = |z: &Image| shape_similarity(&en.edge, Similarity::L1, z, &target).unwrap();
        let coords: Vec<usize> = (0..20).map(|_| rng.below(y.len())).collect();
        let fd = finite_diff_partials(f, &y, 1e-7, &coords).unwrap();
        let floor = 1e-3 * g.max_abs();
        for (&k, n) in coords.iter().zip(&fd) {
            assert!(
                rel_err(g.data()[k], *n, floor) <= 1e-4,
                "coord {k}: {} vs {n}",
                g.data()[k]
            );
        }
    }

    #[test]
    fn finite_differences_on_simple_functions() {
        let mut rng = Stream::new(9, 0);
        let y = rand_img(&mut rng, Shape::new(1, 3, 3), 1.0);
        let g = finite_diff_gradient(|z| 0.5 * z.sq_norm(), &y, 1e-4).unwrap();
        for (a, b) in g.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-8);
        }
        let a = rand_img(&mut rng, Shape::new(1, 3, 3), 1.0);
        let g = finite_diff_gradient(|z| z.dot(&a).unwrap(), &y, 1e-3).unwrap();
        for (p, q) in g.data().iter().zip(a.data()) {
            assert!((p - q).abs() < 1e-10);
        }
        assert!(finite_diff_gradient(|z| z.sq_norm(), &y, 0.0).is_err());
    }

    #[test]
    fn energies_are_non_negative() {
        let en = suite();
        let mut rng = Stream::new(10, 0);
        for _ in 0..20 {
            let y = rand_img(&mut rng, Shape::new(3, 8, 8), 1.0);
            let x = rand_img(&mut rng, Shape::new(3, 8, 8), 1.0);
            let sk = rand_img(&mut rng, Shape::new(1, 8, 8), 1.0);
            assert!(s_g(&en.edge, &y, &sk).unwrap() >= 0.0);
            assert!(s_a(&en.lowpass, &en.pyramid, &y, &x).unwrap() >= 0.0);
        }
    }

    #[test]
    fn weights_validate() {
        assert!(EnergyWeights::new(-1.0, 0.0).is_err());
        assert!(EnergyWeights::new(0.0, f64::NAN).is_err());
        assert_eq!("l1".parse::<Similarity>().unwrap(), Similarity::L1);
        assert!("l3".parse::<Similarity>().is_err());
    }
}
