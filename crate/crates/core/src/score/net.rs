//! A two-hidden-layer MLP score network trained by denoising score matching,
//! with hand-written backpropagation.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::{purpose, Stream};
use crate::sde::SdeSchedule;
use crate::tensor::{Image, Shape};

use super::ScoreModel;

const MAX_TIME_FREQ: f64 = 200.0;

/// How the last layer's output becomes a score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputScale {
    /// The output is the score.
    Direct,
    /// The output is divided by `sigma(t)`, so the network only has to
    /// predict `-z` (unit scale) instead of `-z / sigma`.
    InverseSigma,
    /// The output `D` is a denoised estimate of the clean sample and the
    /// score is `(alpha D - y) / sigma^2`. A narrow hidden layer cannot carry
    /// the near-identity map that noise prediction needs in high dimension,
    /// but a clean estimate is low-complexity.
    #[default]
    Denoiser,
}

impl std::fmt::Display for OutputScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OutputScale::Direct => "direct",
            OutputScale::InverseSigma => "inverse_sigma",
            OutputScale::Denoiser => "denoiser",
        })
    }
}

impl std::str::FromStr for OutputScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(OutputScale::Direct),
            "inverse_sigma" => Ok(OutputScale::InverseSigma),
            "denoiser" => Ok(OutputScale::Denoiser),
            other => Err(Error::Config(format!("unknown output scale `{other}`"))),
        }
    }
}

/// Floor on `sigma(t)` when dividing by it, so `t = 0` stays finite.
const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetArch {
    pub shape: Shape,
    pub hidden: usize,
    pub time_features: usize,
    pub output: OutputScale,
}

impl NetArch {
    pub fn for_shape(shape: Shape) -> Self {
        Self {
            shape,
            hidden: 256,
            time_features: 32,
            output: OutputScale::Denoiser,
        }
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dim() + self.time_features
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    arch: NetArch,
    seed: u64,
    sched: SdeSchedule,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

struct Cache {
    a0: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    out_scale: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

impl Grads {
    pub fn flat(&self) -> Vec<f64> {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
        .concat()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn init_matrix(rows: usize, cols: usize, rng: &mut Stream) -> Array2<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| scale * rng.normal())
}

impl ScoreNet {
    /// Fresh network, weights `N(0, 1/fan_in)` and zero biases.
    pub fn new(arch: NetArch, seed: u64) -> Self {
        let mut rng = Stream::for_purpose(seed, purpose::NET_INIT, 0);
        let (d, h) = (arch.dim(), arch.hidden);
        Self {
            arch,
            seed,
            sched: SdeSchedule::default(),
            w1: init_matrix(h, arch.input_dim(), &mut rng),
            b1: Array1::zeros(h),
            w2: init_matrix(h, h, &mut rng),
            b2: Array1::zeros(h),
            w3: init_matrix(d, h, &mut rng),
            b3: Array1::zeros(d),
        }
    }

    pub fn arch(&self) -> NetArch {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The schedule whose `sigma(t)` scales the output.
    pub fn with_schedule(mut self, sched: SdeSchedule) -> Self {
        self.sched = sched;
        self
    }

    pub fn schedule(&self) -> &SdeSchedule {
        &self.sched
    }

    fn check_schedule(&self, sched: &SdeSchedule) -> Result<()> {
        if self.arch.output != OutputScale::Direct && *sched != self.sched {
            return Err(Error::Config(format!(
                "score network was built for schedule {:?}, used with {:?}",
                self.sched, sched
            )));
        }
        Ok(())
    }

    /// Per-row `(a, b)` with `score = a * raw + b * y`.
    fn output_scales(&self, ts: &[f64]) -> Vec<(f64, f64)> {
        ts.iter()
            .map(|&t| {
                let t = t.clamp(0.0, self.sched.horizon());
                let (al, sg) = self.sched.alpha_sigma(t).expect("clamped time");
                let sg = sg.max(SIGMA_FLOOR);
                match self.arch.output {
                    OutputScale::Direct => (1.0, 0.0),
                    OutputScale::InverseSigma => (1.0 / sg, 0.0),
                    OutputScale::Denoiser => (al / (sg * sg), -1.0 / (sg * sg)),
                }
            })
            .collect()
    }

    /// Sinusoidal time features: `[sin(w_k t), cos(w_k t)]` with `w_k`
    /// log-spaced on `[1, 200]`.
    pub fn time_features(&self, t: f64) -> Vec<f64> {
        let half = self.arch.time_features / 2;
        let mut out = Vec::with_capacity(self.arch.time_features);
        for k in 0..half {
            let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            let w = (frac * MAX_TIME_FREQ.ln()).exp();
            out.push((w * t).sin());
        }
        for k in 0..half {
            let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            let w = (frac * MAX_TIME_FREQ.ln()).exp();
            out.push((w * t).cos());
        }
        out
    }

    fn input_matrix(&self, ys: ArrayView2<f64>, ts: &[f64]) -> Array2<f64> {
        let d = self.arch.dim();
        let mut a0 = Array2::zeros((ys.nrows(), self.arch.input_dim()));
        a0.slice_mut(s![.., ..d]).assign(&ys);
        for (b, &t) in ts.iter().enumerate() {
            for (k, f) in self.time_features(t).into_iter().enumerate() {
                a0[[b, d + k]] = f;
            }
        }
        a0
    }

    fn forward_cached(&self, ys: ArrayView2<f64>, ts: &[f64]) -> (Array2<f64>, Cache) {
        let a0 = self.input_matrix(ys, ts);
        let z1 = a0.dot(&self.w1.t()) + &self.b1;
        let h1 = z1.mapv(silu);
        let z2 = h1.dot(&self.w2.t()) + &self.b2;
        let h2 = z2.mapv(silu);
        let mut out = h2.dot(&self.w3.t()) + &self.b3;
        let out_scale = self.output_scales(ts);
        for ((mut row, y), &(a, b)) in out.rows_mut().into_iter().zip(ys.rows()).zip(&out_scale) {
            row *= a;
            if b != 0.0 {
                row.scaled_add(b, &y);
            }
        }
        (
            out,
            Cache {
                a0,
                z1,
                h1,
                z2,
                h2,
                out_scale,
            },
        )
    }

    /// Batched forward pass: one flattened image per row.
    pub fn forward(&self, ys: ArrayView2<f64>, ts: &[f64]) -> Array2<f64> {
        self.forward_cached(ys, ts).0
    }

    fn backward(&self, cache: &Cache, g_out: &Array2<f64>) -> Grads {
        let mut g_out = g_out.clone();
        for (mut row, &(a, _)) in g_out.rows_mut().into_iter().zip(&cache.out_scale) {
            row *= a;
        }
        let w3 = g_out.t().dot(&cache.h2);
        let b3 = g_out.sum_axis(Axis(0));
        let mut dz2 = g_out.dot(&self.w3);
        dz2.zip_mut_with(&cache.z2, |g, &z| *g *= silu_prime(z));
        let w2 = dz2.t().dot(&cache.h1);
        let b2 = dz2.sum_axis(Axis(0));
        let mut dz1 = dz2.dot(&self.w2);
        dz1.zip_mut_with(&cache.z1, |g, &z| *g *= silu_prime(z));
        let w1 = dz1.t().dot(&cache.a0);
        let b1 = dz1.sum_axis(Axis(0));
        Grads { w1, b1, w2, b2, w3, b3 }
    }

    pub fn net_score(&self, y: &Image, t: f64) -> Result<Image> {
        if y.shape() != self.arch.shape {
            return Err(Error::shape(self.arch.shape, y.shape()));
        }
        let row = ArrayView2::from_shape((1, y.len()), y.data()).expect("contiguous image");
        let out = self.forward(row, &[t]);
        Image::from_vec(y.shape(), out.into_raw_vec_and_offset().0)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }

    /// Parameter `i` in the flat order `w1, b1, w2, b2, w3, b3` (row-major).
    pub fn param(&self, i: usize) -> f64 {
        let mut i = i;
        for blk in self.blocks() {
            if i < blk.len() {
                return blk[i];
            }
            i -= blk.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let mut i = i;
        for blk in self.blocks_mut() {
            if i < blk.len() {
                blk[i] = v;
                return;
            }
            i -= blk.len();
        }
        panic!("parameter index out of range");
    }

    fn blocks(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    fn sgd_step(&mut self, g: &Grads, lr: f64) {
        self.w1.scaled_add(-lr, &g.w1);
        self.b1.scaled_add(-lr, &g.b1);
        self.w2.scaled_add(-lr, &g.w2);
        self.b2.scaled_add(-lr, &g.b2);
        self.w3.scaled_add(-lr, &g.w3);
        self.b3.scaled_add(-lr, &g.b3);
    }

    /// Named parameter blocks with their dims, for persistence.
    pub fn blocks_named(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        vec![
            ("w1", self.w1.shape().to_vec(), self.w1.as_slice().unwrap()),
            ("b1", self.b1.shape().to_vec(), self.b1.as_slice().unwrap()),
            ("w2", self.w2.shape().to_vec(), self.w2.as_slice().unwrap()),
            ("b2", self.b2.shape().to_vec(), self.b2.as_slice().unwrap()),
            ("w3", self.w3.shape().to_vec(), self.w3.as_slice().unwrap()),
            ("b3", self.b3.shape().to_vec(), self.b3.as_slice().unwrap()),
        ]
    }

    /// Rebuild from blocks in `blocks_named` order.
    pub fn from_blocks(arch: NetArch, seed: u64, blocks: Vec<(Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut net = ScoreNet::new_uninit(arch, seed);
        let expected: Vec<Vec<usize>> = net.blocks_named().iter().map(|(_, d, _)| d.clone()).collect();
        if blocks.len() != expected.len() {
            return Err(Error::shape(
                format!("{} parameter blocks", expected.len()),
                blocks.len(),
            ));
        }
        for ((dims, data), (want, dst)) in blocks.into_iter().zip(expected.iter().zip(net.blocks_mut())) {
            if &dims != want || data.len() != dst.len() {
                return Err(Error::shape(format!("{want:?}"), format!("{dims:?}")));
            }
            dst.copy_from_slice(&data);
        }
        Ok(net)
    }

    fn new_uninit(arch: NetArch, seed: u64) -> Self {
        let (d, h) = (arch.dim(), arch.hidden);
        Self {
            arch,
            seed,
            sched: SdeSchedule::default(),
            w1: Array2::zeros((h, arch.input_dim())),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, h)),
            b2: Array1::zeros(h),
            w3: Array2::zeros((d, h)),
            b3: Array1::zeros(d),
        }
    }
}

impl ScoreModel for ScoreNet {
    fn score(&self, sched: &SdeSchedule, y: &Image, t: f64) -> Result<Image> {
        self.check_schedule(sched)?;
        self.net_score(y, t)
    }
}

fn batch_matrix(net: &ScoreNet, rows: &[&[f64]]) -> Result<Array2<f64>> {
    let d = net.arch.dim();
    let mut m = Array2::zeros((rows.len(), d));
    for (b, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::shape(format!("{d} values"), r.len()));
        }
        m.row_mut(b).assign(&ndarray::ArrayView1::from(*r));
    }
    Ok(m)
}

fn noised_batch(
    net: &ScoreNet,
    sched: &SdeSchedule,
    batch: &[&[f64]],
    ts: &[f64],
    zs: &[&[f64]],
) -> Result<(Array2<f64>, Array2<f64>)> {
    if batch.is_empty() || batch.len() != ts.len() || batch.len() != zs.len() {
        return Err(Error::Config(format!(
            "dsm batch needs matching non-empty inputs, got {}/{}/{}",
            batch.len(),
            ts.len(),
            zs.len()
        )));
    }
    net.check_schedule(sched)?;
    let y0 = batch_matrix(net, batch)?;
    let z = batch_matrix(net, zs)?;
    let mut noised = Array2::zeros(y0.raw_dim());
    // target -z / sigma, stored so that the residual is `out + z/sigma`
    let mut z_over_sigma = Array2::zeros(y0.raw_dim());
    for (b, &t) in ts.iter().enumerate() {
        let (a, s) = sched.alpha_sigma(t)?;
        if s == 0.0 {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: "(0, T] (sigma(t) must be > 0)".into(),
            });
        }
        for k in 0..y0.ncols() {
            noised[[b, k]] = a * y0[[b, k]] + s * z[[b, k]];
            z_over_sigma[[b, k]] = z[[b, k]] / s;
        }
    }
    Ok((noised, z_over_sigma))
}

/// Mean over the batch of `|net(alpha y0 + sigma z, t) + z / sigma|^2`.
pub fn dsm_loss(net: &ScoreNet, sched: &SdeSchedule, batch: &[&[f64]], ts: &[f64], zs: &[&[f64]]) -> Result<f64> {
    let (noised, target) = noised_batch(net, sched, batch, ts, zs)?;
    let out = net.forward(noised.view(), ts);
    let resid = out + &target;
    Ok(resid.mapv(|v| v * v).sum() / batch.len() as f64)
}

pub fn dsm_loss_and_grad(
    net: &ScoreNet,
    sched: &SdeSchedule,
    batch: &[&[f64]],
    ts: &[f64],
    zs: &[&[f64]],
) -> Result<(f64, Grads)> {
    weighted_dsm_loss_and_grad(net, sched, batch, ts, zs, LossWeighting::Unweighted)
}

/// Per-example weight on the DSM residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossWeighting {
    /// `|s + z/sigma|^2`.
    Unweighted,
    /// `sigma^2 |s + z/sigma|^2 = |sigma s + z|^2`, which keeps small-t draws
    /// from dominating the gradient.
    SigmaSquared,
    /// `(sigma^2/alpha)^2 |s + z/sigma|^2`; for a [`OutputScale::Denoiser`]
    /// network this is `|D - y0|^2`.
    #[default]
    DataSpace,
}

impl LossWeighting {
    /// Multiplier applied to the residual `s + z/sigma` at time `t`.
    fn residual_scale(self, sched: &SdeSchedule, t: f64) -> Result<f64> {
        let (al, sg) = sched.alpha_sigma(t)?;
        Ok(match self {
            LossWeighting::Unweighted => 1.0,
            LossWeighting::SigmaSquared => sg,
            LossWeighting::DataSpace => sg * sg / al,
        })
    }
}

impl std::fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossWeighting::Unweighted => "unweighted",
            LossWeighting::SigmaSquared => "sigma_squared",
            LossWeighting::DataSpace => "data_space",
        })
    }
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unweighted" => Ok(LossWeighting::Unweighted),
            "sigma_squared" => Ok(LossWeighting::SigmaSquared),
            "data_space" => Ok(LossWeighting::DataSpace),
            other => Err(Error::Config(format!("unknown loss weighting `{other}`"))),
        }
    }
}

pub fn weighted_dsm_loss_and_grad(
    net: &ScoreNet,
    sched: &SdeSchedule,
    batch: &[&[f64]],
    ts: &[f64],
    zs: &[&[f64]],
    weighting: LossWeighting,
) -> Result<(f64, Grads)> {
    let (noised, target) = noised_batch(net, sched, batch, ts, zs)?;
    let (out, cache) = net.forward_cached(noised.view(), ts);
    let mut resid = out + &target;
    let scales: Vec<f64> = ts
        .iter()
        .map(|&t| weighting.residual_scale(sched, t))
        .collect::<Result<_>>()?;
    if weighting != LossWeighting::Unweighted {
        for (mut row, &k) in resid.rows_mut().into_iter().zip(&scales) {
            row *= k;
        }
    }
    let n = batch.len() as f64;
    let loss = resid.mapv(|v| v * v).sum() / n;
    let mut g_out = resid * (2.0 / n);
    if weighting != LossWeighting::Unweighted {
        for (mut row, &k) in g_out.rows_mut().into_iter().zip(&scales) {
            row *= k;
        }
    }
    Ok((loss, net.backward(&cache, &g_out)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Lower end of the uniform time draw as a fraction of T.
    pub t_min_frac: f64,
    pub seed: u64,
    pub log_interval: usize,
    pub weighting: LossWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 128,
            iterations: 20_000,
            t_min_frac: 0.01,
            seed: 0,
            log_interval: 100,
            weighting: LossWeighting::DataSpace,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min_frac > 0.0 && self.t_min_frac < 1.0) {
            return Err(Error::Config(format!(
                "t_min must be in (0, T), got {}·T",
                self.t_min_frac
            )));
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch_size and log_interval must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Mean minibatch loss over one logging interval ending at `iteration`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
}

/// Plain minibatch SGD on the DSM objective. Draw order per iteration is:
/// batch indices, then times, then noise, all from one seeded stream.
pub fn train_dsm(
    net: &mut ScoreNet,
    sched: &SdeSchedule,
    dataset: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<Vec<LossPoint>> {
    train_dsm_with(net, sched, dataset, cfg, |_, _| {})
}

/// As [`train_dsm`], calling `on_log(iteration, net)` at every logging point.
pub fn train_dsm_with(
    net: &mut ScoreNet,
    sched: &SdeSchedule,
    dataset: &[Vec<f64>],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(usize, &ScoreNet),
) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let d = net.arch.dim();
    if let Some(bad) = dataset.iter().find(|x| x.len() != d) {
        return Err(Error::shape(format!("{d} values per example"), bad.len()));
    }
    let mut rng = Stream::for_purpose(cfg.seed, purpose::TRAIN_BATCH, 0);
    let t_lo = cfg.t_min_frac * sched.horizon();
    let mut log = Vec::with_capacity(cfg.iterations / cfg.log_interval);
    let mut acc = 0.0;
    for it in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(dataset.len())).collect();
        let ts: Vec<f64> = (0..cfg.batch_size)
            .map(|_| rng.uniform_range(t_lo, sched.horizon()))
            .collect();
        let zs: Vec<Vec<f64>> = (0..cfg.batch_size).map(|_| rng.normals(d)).collect();
        let batch: Vec<&[f64]> = idx.iter().map(|&i| dataset[i].as_slice()).collect();
        let zrefs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let (loss, grads) = weighted_dsm_loss_and_grad(net, sched, &batch, &ts, &zrefs, cfg.weighting)?;
        if !loss.is_finite() {
            return Err(Error::Training { iteration: it, loss });
        }
        net.sgd_step(&grads, cfg.learning_rate);
        acc += loss;
        if (it + 1) % cfg.log_interval == 0 {
            log.push(LossPoint {
                iteration: it + 1,
                loss: acc / cfg.log_interval as f64,
            });
            acc = 0.0;
            on_log(it + 1, net);
        }
    }
    if net.blocks().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
        return Err(Error::Training {
            iteration: cfg.iterations,
            loss: f64::NAN,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(d: usize) -> NetArch {
        NetArch {
            shape: Shape::new(1, 1, d),
            hidden: 16,
            time_features: 8,
            output: OutputScale::Direct,
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_shape_preserving() {
        let net = ScoreNet::new(NetArch::for_shape(Shape::new(3, 4, 4)), 9);
        let mut rng = Stream::new(1, 0);
        let y = Image::from_vec(Shape::new(3, 4, 4), rng.normals(48)).unwrap();
        let a = net.net_score(&y, 0.37).unwrap();
        let b = net.net_score(&y, 0.37).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), y.shape());
        assert!(net.net_score(&Image::zeros(Shape::new(3, 4, 5)), 0.3).is_err());
    }

    #[test]
    fn zero_predictor_loss_is_chi_square() {
        let arch = tiny_arch(4);
        let mut net = ScoreNet::new(arch, 1);
        for i in 0..net.param_count() {
            net.set_param(i, 0.0);
        }
        let sched = SdeSchedule::default();
        let mut rng = Stream::new(77, 0);
        let n = 4000;
        let t = 0.3;
        let data: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(4)).collect();
        let zs: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(4)).collect();
        let b: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let z: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let loss = dsm_loss(&net, &sched, &b, &vec![t; n], &z).unwrap();
        let (_, s) = sched.alpha_sigma(t).unwrap();
        let expect = 4.0 / (s * s);
        assert!((loss / expect - 1.0).abs() < 0.05, "{loss} vs {expect}");
    }

    #[test]
    fn loss_rejects_zero_sigma() {
        let net = ScoreNet::new(tiny_arch(2), 1);
        let sched = SdeSchedule::default();
        let x = [0.1, 0.2];
        let err = dsm_loss(&net, &sched, &[&x], &[0.0], &[&x]).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        for output in [OutputScale::Direct, OutputScale::InverseSigma, OutputScale::Denoiser] {
            gradient_check(NetArch { output, ..tiny_arch(3) });
        }
    }

    #[test]
    fn inverse_sigma_output_scales_by_sigma() {
        let direct = ScoreNet::new(tiny_arch(3), 4);
        let scaled = ScoreNet::new(
            NetArch {
                output: OutputScale::InverseSigma,
                ..tiny_arch(3)
            },
            4,
        );
        let y = Image::vector(vec![0.3, -0.2, 1.0]);
        let sched = SdeSchedule::default();
        let (_, sg) = sched.alpha_sigma(0.4).unwrap();
        let a = direct.net_score(&y, 0.4).unwrap();
        let b = scaled.score(&sched, &y, 0.4).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p / sg - q).abs() < 1e-12);
        }
        let other = SdeSchedule::new(0.1, 10.0, 1.0).unwrap();
        assert!(scaled.score(&other, &y, 0.4).is_err());
        assert!(scaled.with_schedule(other).score(&other, &y, 0.4).is_ok());
    }

    #[test]
    fn denoiser_output_is_tweedie_score() {
        let direct = ScoreNet::new(tiny_arch(3), 4);
        let den = ScoreNet::new(
            NetArch {
                output: OutputScale::Denoiser,
                ..tiny_arch(3)
            },
            4,
        );
        let y = Image::vector(vec![0.3, -0.2, 1.0]);
        let sched = SdeSchedule::default();
        let t = 0.3;
        let (al, sg) = sched.alpha_sigma(t).unwrap();
        let d = direct.net_score(&y, t).unwrap();
        let s = den.score(&sched, &y, t).unwrap();
        for ((p, q), yv) in d.data().iter().zip(s.data()).zip(y.data()) {
            assert!(((al * p - yv) / (sg * sg) - q).abs() < 1e-12);
        }
        // data-space weighting turns the DSM residual into |D - y0|^2
        let x0 = [0.5, -0.1, 0.2];
        let z = [0.7, 0.3, -1.2];
        let noised: Vec<f64> = x0.iter().zip(&z).map(|(x, e)| al * x + sg * e).collect();
        let raw = direct.net_score(&Image::vector(noised), t).unwrap();
        let want: f64 = raw.data().iter().zip(&x0).map(|(p, x)| (p - x).powi(2)).sum();
        let (loss, _) =
            weighted_dsm_loss_and_grad(&den, &sched, &[&x0], &[t], &[&z], LossWeighting::DataSpace).unwrap();
        assert!((loss - want).abs() < 1e-9 * want.max(1.0), "{loss} vs {want}");
    }

    #[test]
    fn weighted_loss_gradient_matches_finite_differences() {
        for (output, w) in [
            (OutputScale::InverseSigma, LossWeighting::SigmaSquared),
            (OutputScale::Denoiser, LossWeighting::DataSpace),
        ] {
            weighted_gradient_check(NetArch { output, ..tiny_arch(2) }, w);
        }
    }

    fn weighted_gradient_check(arch: NetArch, w: LossWeighting) {
        let net = ScoreNet::new(arch, 6);
        let sched = SdeSchedule::default();
        let mut rng = Stream::new(9, 0);
        let data: Vec<Vec<f64>> = (0..4).map(|_| rng.normals(2)).collect();
        let zs: Vec<Vec<f64>> = (0..4).map(|_| rng.normals(2)).collect();
        let ts: Vec<f64> = (0..4).map(|_| rng.uniform_range(0.05, 1.0)).collect();
        let b: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let z: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let (loss, g) = weighted_dsm_loss_and_grad(&net, &sched, &b, &ts, &z, w).unwrap();
        let plain = dsm_loss(&net, &sched, &b, &ts, &z).unwrap();
        assert!(loss < plain);
        let flat = g.flat();
        let h = 1e-6;
        for k in 0..10 {
            let i = (k * 31) % net.param_count();
            let mut p = net.clone();
            let mut m = net.clone();
            p.set_param(i, net.param(i) + h);
            m.set_param(i, net.param(i) - h);
            let lp = weighted_dsm_loss_and_grad(&p, &sched, &b, &ts, &z, w).unwrap().0;
            let lm = weighted_dsm_loss_and_grad(&m, &sched, &b, &ts, &z, w).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let denom = flat[i].abs().max(fd.abs()).max(1e-8);
            assert!((flat[i] - fd).abs() / denom <= 1e-4, "param {i}: {} vs {fd}", flat[i]);
        }
    }

    fn gradient_check(arch: NetArch) {
        let net = ScoreNet::new(arch, 4);
        let sched = SdeSchedule::default();
        let mut rng = Stream::new(8, 0);
        let data: Vec<Vec<f64>> = (0..5).map(|_| rng.normals(3)).collect();
        let zs: Vec<Vec<f64>> = (0..5).map(|_| rng.normals(3)).collect();
        let ts: Vec<f64> = (0..5).map(|_| rng.uniform_range(0.1, 1.0)).collect();
        let b: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let z: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let (_, g) = dsm_loss_and_grad(&net, &sched, &b, &ts, &z).unwrap();
        let flat = g.flat();
        let n = net.param_count();
        let h = 1e-6;
        for k in 0..10 {
            let i = (k * 7919) % n;
            let mut p = net.clone();
            let mut m = net.clone();
            p.set_param(i, net.param(i) + h);
            m.set_param(i, net.param(i) - h);
            let fd =
                (dsm_loss(&p, &sched, &b, &ts, &z).unwrap() - dsm_loss(&m, &sched, &b, &ts, &z).unwrap()) / (2.0 * h);
            let denom = flat[i].abs().max(fd.abs()).max(1e-8);
            assert!((flat[i] - fd).abs() / denom <= 1e-4, "param {i}: {} vs {fd}", flat[i]);
        }
    }

    #[test]
    fn training_is_reproducible_and_rejects_bad_input() {
        let sched = SdeSchedule::default();
        let mut rng = Stream::new(3, 0);
        let data: Vec<Vec<f64>> = (0..32).map(|_| rng.normals(2)).collect();
        let cfg = TrainConfig {
            iterations: 40,
            batch_size: 16,
            log_interval: 10,
            seed: 5,
            ..TrainConfig::default()
        };
        let arch = NetArch {
            output: OutputScale::Denoiser,
            ..tiny_arch(2)
        };
        let mut a = ScoreNet::new(arch, 1);
        let mut b = ScoreNet::new(arch, 1);
        let la = train_dsm(&mut a, &sched, &data, &cfg).unwrap();
        let lb = train_dsm(&mut b, &sched, &data, &cfg).unwrap();
        assert_eq!(la.len(), 4);
        assert_eq!(la, lb);
        assert!((0..a.param_count()).all(|i| a.param(i).to_bits() == b.param(i).to_bits()));

        assert!(train_dsm(&mut a, &sched, &[], &cfg).is_err());
        let bad = TrainConfig {
            t_min_frac: 0.0,
            ..cfg.clone()
        };
        assert!(train_dsm(&mut a, &sched, &data, &bad).is_err());
    }

    #[test]
    fn divergence_reports_iteration() {
        let sched = SdeSchedule::default();
        let data = vec![vec![1e150, -1e150]];
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 2,
            log_interval: 1,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let mut net = ScoreNet::new(tiny_arch(2), 1);
        let err = train_dsm(&mut net, &sched, &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err}");
    }

    #[test]
    fn blocks_round_trip() {
        let net = ScoreNet::new(tiny_arch(3), 12);
        let blocks = net
            .blocks_named()
            .into_iter()
            .map(|(_, d, v)| (d, v.to_vec()))
            .collect();
        let back = ScoreNet::from_blocks(net.arch(), net.seed(), blocks).unwrap();
        assert_eq!(back, net);
    }
}
