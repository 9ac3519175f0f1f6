//! Frozen random convolution pyramid used as a multi-scale feature extractor.
//!
//! Level `l` applies a 3x3 zero-padded convolution bank followed by 2x2 average
//! pooling to level `l - 1` (level 0 is the image). Everything is linear, so
//! each level has an exact adjoint.

use crate::error::{Error, Result};
use crate::rng::{purpose, Stream};
use crate::tensor::{Image, Shape};

pub const PYRAMID_LEVELS: usize = 2;
pub const PYRAMID_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
struct ConvBank {
    c_in: usize,
    c_out: usize,
    /// `[c_out][c_in][3][3]`, flattened.
    weights: Vec<f64>,
}

impl ConvBank {
    fn w(&self, o: usize, i: usize, di: usize, dj: usize) -> f64 {
        self.weights[((o * self.c_in + i) * 3 + di) * 3 + dj]
    }

    fn apply(&self, x: &Image) -> Image {
        let (h, w) = (x.height(), x.width());
        let mut out = Image::zeros(Shape::new(self.c_out, h, w));
        let plane = h * w;
        for o in 0..self.c_out {
            for ci in 0..self.c_in {
                let src = x.channel(ci);
                for di in 0..3 {
                    for dj in 0..3 {
                        let k = self.w(o, ci, di, dj);
                        let dst = &mut out.data_mut()[o * plane..(o + 1) * plane];
                        for i in 0..h {
                            let ii = i as isize + di as isize - 1;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let row = ii as usize * w;
                            for j in 0..w {
                                let jj = j as isize + dj as isize - 1;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                dst[i * w + j] += k * src[row + jj as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn adjoint(&self, u: &Image) -> Image {
        let (h, w) = (u.height(), u.width());
        let mut out = Image::zeros(Shape::new(self.c_in, h, w));
        let plane = h * w;
        for o in 0..self.c_out {
            let src = u.channel(o);
            for ci in 0..self.c_in {
                for di in 0..3 {
                    for dj in 0..3 {
                        let k = self.w(o, ci, di, dj);
                        let dst = &mut out.data_mut()[ci * plane..(ci + 1) * plane];
                        for i in 0..h {
                            let ii = i as isize + di as isize - 1;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let row = ii as usize * w;
                            for j in 0..w {
                                let jj = j as isize + dj as isize - 1;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                dst[row + jj as usize] += k * src[i * w + j];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn avg_pool2(x: &Image) -> Image {
    let (h, w) = (x.height() / 2, x.width() / 2);
    let mut out = Image::zeros(Shape::new(x.channels(), h, w));
    for c in 0..x.channels() {
        for i in 0..h {
            for j in 0..w {
                let v = x.at(c, 2 * i, 2 * j)
                    + x.at(c, 2 * i, 2 * j + 1)
                    + x.at(c, 2 * i + 1, 2 * j)
                    + x.at(c, 2 * i + 1, 2 * j + 1);
                let k = out.idx(c, i, j);
                out.data_mut()[k] = 0.25 * v;
            }
        }
    }
    out
}

fn avg_pool2_adjoint(u: &Image) -> Image {
    let (h, w) = (u.height() * 2, u.width() * 2);
    let mut out = Image::zeros(Shape::new(u.channels(), h, w));
    for c in 0..u.channels() {
        for i in 0..h {
            for j in 0..w {
                let k = out.idx(c, i, j);
                out.data_mut()[k] = 0.25 * u.at(c, i / 2, j / 2);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    seed: u64,
    in_channels: usize,
    banks: Vec<ConvBank>,
}

impl FeaturePyramid {
    /// Weights are unit normals from the seeded stream, scaled by
    /// `1/sqrt(9 c_in)` so every level has roughly unit gain.
    pub fn new(seed: u64, in_channels: usize) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::Config("pyramid needs at least one input channel".into()));
        }
        let mut banks = Vec::with_capacity(PYRAMID_LEVELS);
        let mut c_in = in_channels;
        for level in 0..PYRAMID_LEVELS {
            let mut rng = Stream::for_purpose(seed, purpose::PYRAMID_WEIGHTS, level as u32);
            let scale = 1.0 / ((9 * c_in) as f64).sqrt();
            let weights = (0..PYRAMID_CHANNELS * c_in * 9).map(|_| scale * rng.normal()).collect();
            banks.push(ConvBank {
                c_in,
                c_out: PYRAMID_CHANNELS,
                weights,
            });
            c_in = PYRAMID_CHANNELS;
        }
        Ok(Self {
            seed,
            in_channels,
            banks,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn levels(&self) -> usize {
        self.banks.len()
    }

    pub fn check(&self, y: &Image) -> Result<()> {
        let m = 1 << self.levels();
        if y.channels() != self.in_channels || !y.height().is_multiple_of(m) || !y.width().is_multiple_of(m) {
            return Err(Error::shape(
                format!("{} channels, H and W divisible by {m}", self.in_channels),
                y.shape(),
            ));
        }
        Ok(())
    }

    pub fn psi_features(&self, y: &Image) -> Result<Vec<Image>> {
        self.check(y)?;
        let mut feats = Vec::with_capacity(self.levels());
        let mut cur = y.clone();
        for bank in &self.banks {
            cur = avg_pool2(&bank.apply(&cur));
            feats.push(cur.clone());
        }
        Ok(feats)
    }

    /// Adjoint of the map from the image to level `level` (1-based).
    pub fn level_adjoint(&self, level: usize, u: &Image) -> Result<Image> {
        if level == 0 || level > self.levels() {
            return Err(Error::Config(format!(
                "pyramid level {level} out of 1..={}",
                self.levels()
            )));
        }
        let mut cur = u.clone();
        for bank in self.banks[..level].iter().rev() {
            if cur.channels() != bank.c_out {
                return Err(Error::shape(format!("{} channels", bank.c_out), cur.shape()));
            }
            cur = bank.adjoint(&avg_pool2_adjoint(&cur));
        }
        Ok(cur)
    }

    /// `sum_l Psi_l^T u_l` for one cotangent per level, sharing the backward chain.
    pub fn adjoint_sum(&self, us: &[Image]) -> Result<Image> {
        if us.len() != self.levels() {
            return Err(Error::shape(format!("{} levels", self.levels()), us.len()));
        }
        let mut acc: Option<Image> = None;
        for (bank, u) in self.banks.iter().zip(us).rev() {
            let g = match acc {
                Some(a) => a.add(u)?,
                None => u.clone(),
            };
            acc = Some(bank.adjoint(&avg_pool2_adjoint(&g)));
        }
        Ok(acc.expect("at least one level"))
    }
}
