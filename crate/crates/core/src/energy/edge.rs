//! Differentiable photo-to-sketch proxy: inverted, max-normalised Sobel edge
//! magnitude of the luminance.

use crate::error::{Error, Result};
use crate::tensor::{luminance_weights, Image, Shape};

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// 3x3 correlation with replicate boundary handling.
pub fn correlate3(plane: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (di, row) in k.iter().enumerate() {
                let ii = clamp_idx(i as isize + di as isize - 1, h);
                for (dj, &kv) in row.iter().enumerate() {
                    let jj = clamp_idx(j as isize + dj as isize - 1, w);
                    acc += kv * plane[ii * w + jj];
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Adjoint of [`correlate3`]: scatters each output back onto the taps it read.
pub fn correlate3_adjoint(u: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let g = u[i * w + j];
            if g == 0.0 {
                continue;
            }
            for (di, row) in k.iter().enumerate() {
                let ii = clamp_idx(i as isize + di as isize - 1, h);
                for (dj, &kv) in row.iter().enumerate() {
                    let jj = clamp_idx(j as isize + dj as isize - 1, w);
                    out[ii * w + jj] += kv * g;
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeExtractor {
    epsilon: f64,
}

impl Default for EdgeExtractor {
    fn default() -> Self {
        Self { epsilon: 1e-6 }
    }
}

/// Intermediate values of one sketch evaluation, kept for the backward pass.
pub struct EdgeForward {
    pub sketch: Image,
    gx: Vec<f64>,
    gy: Vec<f64>,
    mag: Vec<f64>,
    max_mag: f64,
    argmax: usize,
    flat: bool,
}

impl EdgeExtractor {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("edge epsilon must be > 0, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn check(&self, y: &Image) -> Result<()> {
        if y.channels() == 0 || y.height() < 3 || y.width() < 3 {
            return Err(Error::shape(">= 1 channel and H, W >= 3", y.shape()));
        }
        Ok(())
    }

    pub fn luminance(y: &Image) -> Vec<f64> {
        let w = luminance_weights(y.channels());
        let mut lum = vec![0.0; y.shape().plane()];
        for (c, wc) in w.iter().enumerate() {
            for (l, v) in lum.iter_mut().zip(y.channel(c)) {
                *l += wc * v;
            }
        }
        lum
    }

    pub fn forward(&self, y: &Image) -> Result<EdgeForward> {
        self.check(y)?;
        let (h, w) = (y.height(), y.width());
        let lum = Self::luminance(y);
        let gx = correlate3(&lum, h, w, &SOBEL_X);
        let gy = correlate3(&lum, h, w, &SOBEL_Y);
        let mut max_g2 = 0.0f64;
        let mag: Vec<f64> = gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| {
                let g2 = a * a + b * b;
                max_g2 = max_g2.max(g2);
                (g2 + self.epsilon).sqrt()
            })
            .collect();
        let shape = Shape::new(1, h, w);
        // a gradient field at the epsilon floor means a constant image
        if max_g2 <= 1e-6 * self.epsilon {
            return Ok(EdgeForward {
                sketch: Image::filled(shape, 1.0),
                gx,
                gy,
                mag,
                max_mag: self.epsilon.sqrt(),
                argmax: 0,
                flat: true,
            });
        }
        let (argmax, max_mag) =
            mag.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |(bi, bm), (i, &m)| if m > bm { (i, m) } else { (bi, bm) },
            );
        let sketch = Image::from_vec(shape, mag.iter().map(|m| 1.0 - m / max_mag).collect())?;
        Ok(EdgeForward {
            sketch,
            gx,
            gy,
            mag,
            max_mag,
            argmax,
            flat: false,
        })
    }

    /// Single-channel sketch `1 - m / max(m)`, dark strokes on white.
    pub fn phi_sketch(&self, y: &Image) -> Result<Image> {
        Ok(self.forward(y)?.sketch)
    }

    /// Pull a gradient w.r.t. the sketch back to the input image.
    pub fn vjp(&self, fwd: &EdgeForward, input_shape: Shape, g_sketch: &Image) -> Result<Image> {
        if g_sketch.shape() != fwd.sketch.shape() {
            return Err(Error::shape(fwd.sketch.shape(), g_sketch.shape()));
        }
        let mut out = Image::zeros(input_shape);
        if fwd.flat {
            return Ok(out);
        }
        let (h, w) = (input_shape.height, input_shape.width);
        let inv = 1.0 / fwd.max_mag;
        let g = g_sketch.data();
        // d(1 - m_p / M)/dm_q = -delta_pq / M + [q = argmax] m_p / M^2
        let through_max: f64 = g.iter().zip(&fwd.mag).map(|(r, m)| r * m).sum::<f64>() * inv * inv;
        let mut g_gx = vec![0.0; h * w];
        let mut g_gy = vec![0.0; h * w];
        for q in 0..h * w {
            let mut gm = -g[q] * inv;
            if q == fwd.argmax {
                gm += through_max;
            }
            g_gx[q] = gm * fwd.gx[q] / fwd.mag[q];
            g_gy[q] = gm * fwd.gy[q] / fwd.mag[q];
        }
        let a = correlate3_adjoint(&g_gx, h, w, &SOBEL_X);
        let b = correlate3_adjoint(&g_gy, h, w, &SOBEL_Y);
        let weights = luminance_weights(input_shape.channels);
        let plane = input_shape.plane();
        let data = out.data_mut();
        for (c, wc) in weights.iter().enumerate() {
            for p in 0..plane {
                data[c * plane + p] = wc * (a[p] + b[p]);
            }
        }
        Ok(out)
    }
}
