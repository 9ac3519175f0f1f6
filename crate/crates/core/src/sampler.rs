//! Energy-guided reverse-SDE sampling.
//!
//! One stage starts from `perturb(input, M, z)` and runs `N` Euler-Maruyama
//! steps of
//!
//! ```text
//! y <- y + [-f(y, s) + g(s)^2 score(y, s) - guidance(y, s)] h + g(s) sqrt(h) z
//! ```
//!
//! for `s = M i / N`, `i = N..1`, with `z = 0` on the last step. The two-stage
//! pipeline runs a shape-guided stage on the sketch, then a shape- and
//! appearance-guided stage on its output.
//!
//! Noise discipline: stage `k` of a run with seed `seed` draws from five
//! independent counter-based streams `(seed, purpose << 32 | k)`, one per
//! purpose in [`crate::rng::purpose`] (start point, step noise, sketch
//! perturbation, exemplar perturbation, repeat re-noising). Dropping a guidance
//! term therefore never shifts the noise seen by any other part of the run.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::energy::{grad_appearance_energy, grad_shape_energy, s_a, shape_similarity, EnergySuite, EnergyWeights};
use crate::error::{Error, Result};
use crate::rng::{purpose, Stream};
use crate::score::ScoreModel;
use crate::sde::SdeSchedule;
use crate::tensor::{Image, Shape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StageMode {
    #[default]
    TwoStage,
    /// Full-control inversion straight from the sketch.
    Variant1,
    /// Full-control inversion from a sketch/exemplar blend.
    Variant2,
    /// Unguided partial inversion of the sketch.
    Sdedit,
}

impl StageMode {
    pub const ALL: [StageMode; 4] = [
        StageMode::TwoStage,
        StageMode::Variant1,
        StageMode::Variant2,
        StageMode::Sdedit,
    ];

    /// Whether the mode reads the exemplar at all.
    pub fn uses_exemplar(self) -> bool {
        self != StageMode::Sdedit
    }
}

impl fmt::Display for StageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageMode::TwoStage => "two_stage",
            StageMode::Variant1 => "variant1",
            StageMode::Variant2 => "variant2",
            StageMode::Sdedit => "sdedit",
        })
    }
}

impl FromStr for StageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_stage" => Ok(StageMode::TwoStage),
            "variant1" | "variant1_direct_full_control" => Ok(StageMode::Variant1),
            "variant2" | "variant2_mixup" => Ok(StageMode::Variant2),
            "sdedit" | "unguided_sdedit" => Ok(StageMode::Sdedit),
            other => Err(Error::Config(format!(
                "unknown sampler mode `{other}` (two_stage|variant1|variant2|sdedit)"
            ))),
        }
    }
}

/// Sign applied to the appearance gradient in the full-control drift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AppearanceSign {
    /// Both energies are minimised.
    #[default]
    Minimize,
    /// `lambda_g E_g - lambda_a E_a`, as literally printed in the algorithm listing.
    Literal,
}

impl fmt::Display for AppearanceSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AppearanceSign::Minimize => "minimize",
            AppearanceSign::Literal => "literal",
        })
    }
}

impl FromStr for AppearanceSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimize" => Ok(AppearanceSign::Minimize),
            "literal" => Ok(AppearanceSign::Literal),
            other => Err(Error::Config(format!(
                "unknown appearance sign `{other}` (minimize|literal)"
            ))),
        }
    }
}

/// Start time (as a fraction of T) and step count of one inversion stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub m_frac: f64,
    pub steps: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            m_frac: 0.4,
            steps: 200,
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_frac > 0.0 && self.m_frac <= 1.0) {
            return Err(Error::Config(format!("m_frac must be in (0, 1], got {}", self.m_frac)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub stage1: StagePlan,
    pub stage2: StagePlan,
    /// K: updates per time step, with re-noising back to `s` between them.
    pub repeats: usize,
    pub weights: EnergyWeights,
    pub seed: u64,
    pub mode: StageMode,
    pub mixup_ratio: f64,
    pub appearance_sign: AppearanceSign,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            stage1: StagePlan::default(),
            stage2: StagePlan::default(),
            repeats: 1,
            weights: EnergyWeights::default(),
            seed: 0,
            mode: StageMode::TwoStage,
            mixup_ratio: 0.7,
            appearance_sign: AppearanceSign::Minimize,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.weights.validate()?;
        if self.repeats == 0 {
            return Err(Error::Config("repeat count K must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mixup_ratio) {
            return Err(Error::Config(format!(
                "mixup_ratio must be in [0, 1], got {}",
                self.mixup_ratio
            )));
        }
        Ok(())
    }
}

/// Energies observed at one step (unweighted similarities).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub stage: u32,
    pub step: usize,
    pub time: f64,
    pub shape: Option<f64>,
    pub appearance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: SamplerConfig,
    pub stage1: Option<Image>,
    pub output: Image,
    pub stage_seconds: Vec<f64>,
    pub trace: Vec<TracePoint>,
}

/// One guided Euler-Maruyama step of the reverse SDE from `s` to `s - h`.
/// `guidance` is the energy gradient to subtract from the drift; `z = None`
/// means a noise-free step.
pub fn reverse_step(
    sched: &SdeSchedule,
    score: &dyn ScoreModel,
    y: &Image,
    s: f64,
    h: f64,
    guidance: Option<&Image>,
    z: Option<&Image>,
) -> Result<Image> {
    if s - h < -1e-12 * sched.horizon() || h <= 0.0 {
        return Err(Error::TimeUnderflow { s, h });
    }
    let beta = sched.beta(s)?;
    let g = beta.sqrt();
    let sc = score.score(sched, y, s)?;
    y.ensure_same_shape(&sc)?;
    if let Some(gd) = guidance {
        y.ensure_same_shape(gd)?;
    }
    if let Some(z) = z {
        y.ensure_same_shape(z)?;
    }
    let noise_scale = g * h.sqrt();
    let mut out = y.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let yk = y.data()[k];
        // -f(y, s) = +beta/2 y
        let mut drift = 0.5 * beta * yk + beta * sc.data()[k];
        if let Some(gd) = guidance {
            drift -= gd.data()[k];
        }
        *v = yk + drift * h;
        if let Some(z) = z {
            *v += noise_scale * z.data()[k];
        }
    }
    Ok(out)
}

/// The per-stage noise streams.
struct StageStreams {
    start: Stream,
    step: Stream,
    sketch: Stream,
    exemplar: Stream,
    repeat: Stream,
}

impl StageStreams {
    fn new(seed: u64, stage: u32) -> Self {
        Self {
            start: Stream::for_purpose(seed, purpose::START_POINT, stage),
            step: Stream::for_purpose(seed, purpose::STEP_NOISE, stage),
            sketch: Stream::for_purpose(seed, purpose::SKETCH_PERTURB, stage),
            exemplar: Stream::for_purpose(seed, purpose::EXEMPLAR_PERTURB, stage),
            repeat: Stream::for_purpose(seed, purpose::REPEAT_NOISE, stage),
        }
    }
}

fn normal_image(rng: &mut Stream, shape: Shape) -> Image {
    Image::from_vec(shape, rng.normals(shape.len())).expect("shape-sized buffer")
}

fn stage_name(stage: u32) -> &'static str {
    match stage {
        1 => "stage 1",
        _ => "stage 2",
    }
}

/// Shared integrator. `guidance(y, s, streams)` returns the gradient to
/// subtract, if any.
#[allow(clippy::too_many_arguments)]
fn integrate_stage(
    sched: &SdeSchedule,
    score: &dyn ScoreModel,
    start: &Image,
    stage: u32,
    plan: StagePlan,
    repeats: usize,
    seed: u64,
    mut guidance: impl FnMut(&Image, f64, usize, &mut StageStreams) -> Result<Option<Image>>,
) -> Result<Image> {
    plan.validate()?;
    let mut streams = StageStreams::new(seed, stage);
    let m = plan.m_frac * sched.horizon();
    let n = plan.steps;
    let h = m / n as f64;
    let z0 = normal_image(&mut streams.start, start.shape());
    let mut y = sched.perturb(start, m, &z0)?;
    for i in (1..=n).rev() {
        let s = m * i as f64 / n as f64;
        for k in 0..repeats {
            let gd = guidance(&y, s, i, &mut streams)?;
            let z = (i > 1).then(|| normal_image(&mut streams.step, y.shape()));
            y = reverse_step(sched, score, &y, s, h, gd.as_ref(), z.as_ref())?;
            if !y.all_finite() {
                return Err(Error::Diverged {
                    stage: stage_name(stage),
                    step: i,
                });
            }
            if k + 1 < repeats {
                let r = sched.transition_alpha((s - h).max(0.0), s)?;
                let sd = (1.0 - r * r).max(0.0).sqrt();
                let zr = normal_image(&mut streams.repeat, y.shape());
                y = y.zip_map(&zr, |a, b| r * a + sd * b)?;
            }
        }
    }
    Ok(y)
}

/// Unguided reverse SDE from `perturb(input, M, z)` down to t = 0, without
/// the final clamp. With `m_frac = 1` this samples the score model's
/// distribution from (almost) pure noise.
pub fn reverse_sample(
    sched: &SdeSchedule,
    score: &dyn ScoreModel,
    input: &Image,
    stage: u32,
    plan: StagePlan,
    repeats: usize,
    seed: u64,
) -> Result<Image> {
    integrate_stage(sched, score, input, stage, plan, repeats, seed, |_, _, _, _| Ok(None))
}

/// Unguided partial inversion (SDEdit): noise `input` to `M`, denoise to 0,
/// clamp to [-1, 1].
pub fn unguided_partial_inversion(
    sched: &SdeSchedule,
    score: &dyn ScoreModel,
    input: &Image,
    stage: u32,
    plan: StagePlan,
    repeats: usize,
    seed: u64,
) -> Result<Image> {
    Ok(reverse_sample(sched, score, input, stage, plan, repeats, seed)?.clamped(-1.0, 1.0))
}

/// Sketch in [0, 1] (white background) lifted to a `channels`-channel image in
/// [-1, 1]: `2 s - 1`, replicated.
pub fn lift_sketch(x_sk: &Image, channels: usize) -> Result<Image> {
    x_sk.map(|v| 2.0 * v - 1.0).broadcast_channels(channels)
}

pub struct Sampler<'a> {
    pub sched: &'a SdeSchedule,
    pub score: &'a dyn ScoreModel,
    pub energies: &'a EnergySuite,
}

impl<'a> Sampler<'a> {
    pub fn new(sched: &'a SdeSchedule, score: &'a dyn ScoreModel, energies: &'a EnergySuite) -> Self {
        Self { sched, score, energies }
    }

    fn photo_channels(&self) -> usize {
        self.energies.pyramid.in_channels()
    }

    fn check_sketch(&self, x_sk: &Image) -> Result<()> {
        if x_sk.channels() != 1 {
            return Err(Error::shape("single-channel sketch", x_sk.shape()));
        }
        Ok(())
    }

    fn check_pair(&self, x_sk: &Image, x_ex: &Image) -> Result<()> {
        self.check_sketch(x_sk)?;
        let want = Shape::new(self.photo_channels(), x_sk.height(), x_sk.width());
        if x_ex.shape() != want {
            return Err(Error::shape(want, x_ex.shape()));
        }
        Ok(())
    }

    fn shape_stage(
        &self,
        start: &Image,
        x_sk: &Image,
        stage: u32,
        plan: StagePlan,
        cfg: &SamplerConfig,
        trace: &mut Option<&mut Vec<TracePoint>>,
    ) -> Result<Image> {
        let en = self.energies;
        let sched = self.sched;
        let sk_shape = x_sk.shape();
        integrate_stage(
            sched,
            self.score,
            start,
            stage,
            plan,
            cfg.repeats,
            cfg.seed,
            |y, s, i, st| {
                let noise =
                    (cfg.weights.lambda_g > 0.0 || trace.is_some()).then(|| normal_image(&mut st.sketch, sk_shape));
                if let (Some(tr), Some(nz)) = (trace.as_deref_mut(), noise.as_ref()) {
                    let target = sched.perturb(x_sk, s, nz)?;
                    tr.push(TracePoint {
                        stage,
                        step: i,
                        time: s,
                        shape: Some(shape_similarity(&en.edge, en.similarity, y, &target)?),
                        appearance: None,
                    });
                }
                if cfg.weights.lambda_g == 0.0 {
                    return Ok(None);
                }
                let nz = noise.expect("drawn when lambda_g > 0");
                let w = EnergyWeights {
                    lambda_g: cfg.weights.lambda_g,
                    lambda_a: 0.0,
                };
                grad_shape_energy(&en.edge, en.similarity, &w, sched, y, x_sk, s, &nz).map(Some)
            },
        )
        .map(|y| y.clamped(-1.0, 1.0))
    }

    #[allow(clippy::too_many_arguments)]
    fn full_stage(
        &self,
        start: &Image,
        x_sk: &Image,
        x_ex: &Image,
        stage: u32,
        plan: StagePlan,
        cfg: &SamplerConfig,
        trace: &mut Option<&mut Vec<TracePoint>>,
    ) -> Result<Image> {
        let en = self.energies;
        let sched = self.sched;
        let w = cfg.weights;
        let sign = match cfg.appearance_sign {
            AppearanceSign::Minimize => 1.0,
            AppearanceSign::Literal => -1.0,
        };
        integrate_stage(
            sched,
            self.score,
            start,
            stage,
            plan,
            cfg.repeats,
            cfg.seed,
            |y, s, i, st| {
                let tracing = trace.is_some();
                let sk_noise = (w.lambda_g > 0.0 || tracing).then(|| normal_image(&mut st.sketch, x_sk.shape()));
                let ex_noise = (w.lambda_a > 0.0 || tracing).then(|| normal_image(&mut st.exemplar, x_ex.shape()));
                if let Some(tr) = trace.as_deref_mut() {
                    let sk_t = sched.perturb(x_sk, s, sk_noise.as_ref().expect("drawn when tracing"))?;
                    let ex_t = sched.perturb(x_ex, s, ex_noise.as_ref().expect("drawn when tracing"))?;
                    tr.push(TracePoint {
                        stage,
                        step: i,
                        time: s,
                        shape: Some(shape_similarity(&en.edge, en.similarity, y, &sk_t)?),
                        appearance: Some(s_a(&en.lowpass, &en.pyramid, y, &ex_t)?),
                    });
                }
                let mut total: Option<Image> = None;
                if w.lambda_g > 0.0 {
                    let nz = sk_noise.as_ref().expect("drawn when lambda_g > 0");
                    total = Some(grad_shape_energy(&en.edge, en.similarity, &w, sched, y, x_sk, s, nz)?);
                }
                if w.lambda_a > 0.0 {
                    let nz = ex_noise.as_ref().expect("drawn when lambda_a > 0");
                    let ga = grad_appearance_energy(&en.lowpass, &en.pyramid, &w, sched, y, x_ex, s, nz)?;
                    total = Some(match total {
                        Some(mut t) => {
                            t.axpy(sign, &ga)?;
                            t
                        }
                        None => ga.scale(sign),
                    });
                }
                Ok(total)
            },
        )
        .map(|y| y.clamped(-1.0, 1.0))
    }

    /// Stage 1: noise the lifted sketch to `M`, denoise with shape guidance only.
    pub fn shape_enhancing_inversion(&self, x_sk: &Image, cfg: &SamplerConfig) -> Result<Image> {
        cfg.validate()?;
        self.check_sketch(x_sk)?;
        let start = lift_sketch(x_sk, self.photo_channels())?;
        self.shape_stage(&start, x_sk, 1, cfg.stage1, cfg, &mut None)
    }

    /// Stage 2: noise `y_uncolored` to `M`, denoise with shape and appearance guidance.
    pub fn full_control_inversion(
        &self,
        y_uncolored: &Image,
        x_sk: &Image,
        x_ex: &Image,
        cfg: &SamplerConfig,
    ) -> Result<Image> {
        cfg.validate()?;
        self.check_pair(x_sk, x_ex)?;
        x_ex.ensure_same_shape(y_uncolored)?;
        self.full_stage(y_uncolored, x_sk, x_ex, 2, cfg.stage2, cfg, &mut None)
    }

    /// Both stages, recording the intermediate uncolored photo.
    pub fn inversion_by_inversion(
        &self,
        x_sk: &Image,
        x_ex: &Image,
        cfg: &SamplerConfig,
        trace_energy: bool,
    ) -> Result<RunRecord> {
        cfg.validate()?;
        self.check_pair(x_sk, x_ex)?;
        let mut trace_buf = Vec::new();
        let mut trace = trace_energy.then_some(&mut trace_buf);
        let start = lift_sketch(x_sk, self.photo_channels())?;
        let t0 = Instant::now();
        let stage1 = self.shape_stage(&start, x_sk, 1, cfg.stage1, cfg, &mut trace)?;
        let t1 = Instant::now();
        let output = self.full_stage(&stage1, x_sk, x_ex, 2, cfg.stage2, cfg, &mut trace)?;
        let t2 = Instant::now();
        Ok(RunRecord {
            config: cfg.clone(),
            stage1: Some(stage1),
            output,
            stage_seconds: vec![(t1 - t0).as_secs_f64(), (t2 - t1).as_secs_f64()],
            trace: trace_buf,
        })
    }

    /// Run whichever pipeline `cfg.mode` selects.
    pub fn run_variant(
        &self,
        x_sk: &Image,
        x_ex: &Image,
        cfg: &SamplerConfig,
        trace_energy: bool,
    ) -> Result<RunRecord> {
        if cfg.mode == StageMode::TwoStage {
            return self.inversion_by_inversion(x_sk, x_ex, cfg, trace_energy);
        }
        cfg.validate()?;
        self.check_pair(x_sk, x_ex)?;
        let mut trace_buf = Vec::new();
        let mut trace = trace_energy.then_some(&mut trace_buf);
        let lifted = lift_sketch(x_sk, self.photo_channels())?;
        let t0 = Instant::now();
        let output = match cfg.mode {
            StageMode::Variant1 => self.full_stage(&lifted, x_sk, x_ex, 2, cfg.stage2, cfg, &mut trace)?,
            StageMode::Variant2 => {
                let r = cfg.mixup_ratio;
                let mix = lifted.zip_map(x_ex, |a, b| r * a + (1.0 - r) * b)?;
                self.full_stage(&mix, x_sk, x_ex, 2, cfg.stage2, cfg, &mut trace)?
            }
            StageMode::Sdedit => {
                unguided_partial_inversion(self.sched, self.score, &lifted, 1, cfg.stage1, cfg.repeats, cfg.seed)?
            }
            StageMode::TwoStage => unreachable!("handled above"),
        };
        Ok(RunRecord {
            config: cfg.clone(),
            stage1: None,
            output,
            stage_seconds: vec![t0.elapsed().as_secs_f64()],
            trace: trace_buf,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::GaussianMixture;

    struct MinusY;

    impl ScoreModel for MinusY {
        fn score(&self, _: &SdeSchedule, y: &Image, _: f64) -> Result<Image> {
            Ok(y.scale(-1.0))
        }
    }

    #[test]
    fn hand_computed_one_d_step() {
        let sched = SdeSchedule::default();
        // beta(s) = 1
        let s = 0.9 / 19.9;
        let y = Image::vector(vec![2.0]);
        let next = reverse_step(&sched, &MinusY, &y, s, 0.01, None, None).unwrap();
        assert!((next.data()[0] - 1.99).abs() < 1e-12, "{}", next.data()[0]);
    }

    #[test]
    fn step_rejects_crossing_zero() {
        let sched = SdeSchedule::default();
        let y = Image::vector(vec![0.0]);
        let err = reverse_step(&sched, &MinusY, &y, 0.01, 0.02, None, None).unwrap_err();
        assert!(matches!(err, Error::TimeUnderflow { .. }));
    }

    #[test]
    fn guidance_enters_with_minus_sign() {
        let sched = SdeSchedule::default();
        let y = Image::vector(vec![0.5, -0.5]);
        let gd = Image::vector(vec![1.0, 2.0]);
        let a = reverse_step(&sched, &MinusY, &y, 0.3, 0.01, None, None).unwrap();
        let b = reverse_step(&sched, &MinusY, &y, 0.3, 0.01, Some(&gd), None).unwrap();
        assert!((a.data()[0] - b.data()[0] - 0.01).abs() < 1e-15);
        assert!((a.data()[1] - b.data()[1] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn zero_guidance_matches_unguided_bitwise() {
        let sched = SdeSchedule::default();
        let y = Image::vector(vec![0.25, -1.5, 3.0]);
        let z = Image::vector(vec![0.1, 0.2, -0.3]);
        let zero = Image::zeros(y.shape());
        let a = reverse_step(&sched, &MinusY, &y, 0.5, 0.01, None, Some(&z)).unwrap();
        let b = reverse_step(&sched, &MinusY, &y, 0.5, 0.01, Some(&zero), Some(&z)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in StageMode::ALL {
            assert_eq!(m.to_string().parse::<StageMode>().unwrap(), m);
        }
        assert!("variant3".parse::<StageMode>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::default();
        assert!(c.validate().is_ok());
        c.repeats = 0;
        assert!(c.validate().is_err());
        let c = SamplerConfig {
            stage1: StagePlan { m_frac: 0.0, steps: 10 },
            ..SamplerConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SamplerConfig {
            mixup_ratio: 1.5,
            ..SamplerConfig::default()
        };
        assert!(c.validate().is_err());
    }

    struct Toy {
        sched: SdeSchedule,
        gm: GaussianMixture,
        en: EnergySuite,
        sketch: Image,
        exemplar: Image,
        other_exemplar: Image,
    }

    fn toy() -> Toy {
        let s = Shape::new(3, 8, 8);
        let mut rng = Stream::new(21, 0);
        let photos: Vec<Vec<f64>> = (0..5)
            .map(|_| rng.normals(s.len()).into_iter().map(|v| 0.4 * v).collect())
            .collect();
        let sketch = Image::from_vec(Shape::new(1, 8, 8), (0..64).map(|_| rng.uniform()).collect()).unwrap();
        let exemplar = Image::from_vec(s, photos[0].clone()).unwrap();
        let other_exemplar = Image::from_vec(s, photos[1].clone()).unwrap();
        Toy {
            sched: SdeSchedule::default(),
            gm: GaussianMixture::from_points(photos, 0.05).unwrap(),
            en: EnergySuite::for_shape(3, 8, 2).unwrap(),
            sketch,
            exemplar,
            other_exemplar,
        }
    }

    fn small_cfg(lg: f64, la: f64) -> SamplerConfig {
        SamplerConfig {
            stage1: StagePlan { m_frac: 0.4, steps: 12 },
            stage2: StagePlan { m_frac: 0.3, steps: 9 },
            weights: EnergyWeights::new(lg, la).unwrap(),
            seed: 5,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn unguided_two_stage_is_double_sdedit() {
        let t = toy();
        let smp = Sampler::new(&t.sched, &t.gm, &t.en);
        let cfg = small_cfg(0.0, 0.0);
        let r = smp.inversion_by_inversion(&t.sketch, &t.exemplar, &cfg, false).unwrap();
        let lifted = lift_sketch(&t.sketch, 3).unwrap();
        let a = unguided_partial_inversion(&t.sched, &t.gm, &lifted, 1, cfg.stage1, 1, cfg.seed).unwrap();
        let b = unguided_partial_inversion(&t.sched, &t.gm, &a, 2, cfg.stage2, 1, cfg.seed).unwrap();
        assert!(r.stage1.as_ref().unwrap().bit_eq(&a));
        assert!(r.output.bit_eq(&b));
        let sd = smp
            .run_variant(
                &t.sketch,
                &t.exemplar,
                &SamplerConfig {
                    mode: StageMode::Sdedit,
                    ..cfg
                },
                false,
            )
            .unwrap();
        assert!(sd.output.bit_eq(&a));
    }

    #[test]
    fn zero_appearance_weight_ignores_the_exemplar() {
        let t = toy();
        let smp = Sampler::new(&t.sched, &t.gm, &t.en);
        let cfg = small_cfg(0.3, 0.0);
        let a = smp.inversion_by_inversion(&t.sketch, &t.exemplar, &cfg, false).unwrap();
        let b = smp
            .inversion_by_inversion(&t.sketch, &t.other_exemplar, &cfg, false)
            .unwrap();
        assert!(a.output.bit_eq(&b.output));
        let cfg = small_cfg(0.3, 2.0);
        let c = smp.inversion_by_inversion(&t.sketch, &t.exemplar, &cfg, false).unwrap();
        assert!(c.stage1.as_ref().unwrap().bit_eq(a.stage1.as_ref().unwrap()));
        assert!(!c.output.bit_eq(&a.output));
    }

    #[test]
    fn full_mixup_ratio_is_variant1() {
        let t = toy();
        let smp = Sampler::new(&t.sched, &t.gm, &t.en);
        let base = small_cfg(0.2, 1.0);
        let v1 = smp
            .run_variant(
                &t.sketch,
                &t.exemplar,
                &SamplerConfig {
                    mode: StageMode::Variant1,
                    ..base.clone()
                },
                false,
            )
            .unwrap();
        let v2 = SamplerConfig {
            mode: StageMode::Variant2,
            mixup_ratio: 1.0,
            ..base.clone()
        };
        let v2 = smp.run_variant(&t.sketch, &t.exemplar, &v2, false).unwrap();
        assert!(v1.output.bit_eq(&v2.output));
        let mixed = SamplerConfig {
            mode: StageMode::Variant2,
            mixup_ratio: 0.7,
            ..base
        };
        let mixed = smp.run_variant(&t.sketch, &t.exemplar, &mixed, false).unwrap();
        assert!(!mixed.output.bit_eq(&v1.output));
    }

    #[test]
    fn stages_compose_and_runs_are_deterministic() {
        let t = toy();
        let smp = Sampler::new(&t.sched, &t.gm, &t.en);
        let cfg = small_cfg(0.1, 2.0);
        let r = smp.inversion_by_inversion(&t.sketch, &t.exemplar, &cfg, false).unwrap();
        let s1 = smp.shape_enhancing_inversion(&t.sketch, &cfg).unwrap();
        assert!(r.stage1.as_ref().unwrap().bit_eq(&s1));
        let out = smp.full_control_inversion(&s1, &t.sketch, &t.exemplar, &cfg).unwrap();
        assert!(r.output.bit_eq(&out));
        let again = smp.run_variant(&t.sketch, &t.exemplar, &cfg, false).unwrap();
        assert!(again.output.bit_eq(&r.output));
        assert!(r.output.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let other = smp
            .run_variant(&t.sketch, &t.exemplar, &SamplerConfig { seed: 6, ..cfg }, false)
            .unwrap();
        assert!(!other.output.bit_eq(&r.output));
    }

    #[test]
    fn tracing_does_not_change_the_output() {
        let t = toy();
        let smp = Sampler::new(&t.sched, &t.gm, &t.en);
        for (lg, la) in [(0.0, 0.0), (0.2, 0.0), (0.2, 1.0)] {
            let cfg = small_cfg(lg, la);
            let plain = smp.inversion_by_inversion(&t.sketch, &t.exemplar, &cfg, false).unwrap();
            let traced = smp.inversion_by_inversion(&t.sketch, &t.exemplar, &cfg, true).unwrap();
            assert!(plain.output.bit_eq(&traced.output));
            assert!(plain.trace.is_empty());
            assert_eq!(traced.trace.len(), cfg.stage1.steps + cfg.stage2.steps);
            assert!(traced.trace[..cfg.stage1.steps]
                .iter()
                .all(|p| p.stage == 1 && p.appearance.is_none()));
            assert!(traced.trace[cfg.stage1.steps..]
                .iter()
                .all(|p| p.stage == 2 && p.appearance.is_some()));
        }
    }

    #[test]
    fn repeats_change_the_path_but_stay_finite() {
        let t = toy();
        let smp = Sampler::new(&t.sched, &t.gm, &t.en);
        let one = smp
            .inversion_by_inversion(&t.sketch, &t.exemplar, &small_cfg(0.1, 1.0), false)
            .unwrap();
        let cfg = SamplerConfig {
            repeats: 3,
            ..small_cfg(0.1, 1.0)
        };
        let three = smp.inversion_by_inversion(&t.sketch, &t.exemplar, &cfg, false).unwrap();
        assert!(three.output.all_finite());
        assert!(!three.output.bit_eq(&one.output));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let t = toy();
        let smp = Sampler::new(&t.sched, &t.gm, &t.en);
        let cfg = small_cfg(0.1, 1.0);
        let rgb_sketch = lift_sketch(&t.sketch, 3).unwrap();
        assert!(smp
            .inversion_by_inversion(&rgb_sketch, &t.exemplar, &cfg, false)
            .is_err());
        let small = Image::zeros(Shape::new(3, 4, 4));
        assert!(smp.inversion_by_inversion(&t.sketch, &small, &cfg, false).is_err());
    }

    #[test]
    fn standard_normal_is_preserved_by_the_exact_score() {
        // N(0, 1) data has score -y at every t
        let sched = SdeSchedule::default();
        let plan = StagePlan {
            m_frac: 1.0,
            steps: 100,
        };
        let n = 2000;
        let xs: Vec<f64> = (0..n)
            .map(|j| {
                let start = Image::vector(vec![0.0]);
                reverse_sample(&sched, &MinusY, &start, 1, plan, 1, j as u64)
                    .unwrap()
                    .data()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "{mean}");
        assert!((var - 1.0).abs() < 0.1, "{var}");
    }
}
