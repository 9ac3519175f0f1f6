use crate::error::{Error, Result};
use crate::tensor::Image;

/// Block-mean projection: average-pool by `factor`, then nearest-neighbour
/// upsample back. Idempotent and self-adjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LowPass {
    factor: usize,
}

impl LowPass {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("low-pass factor must be >= 1".into()));
        }
        Ok(Self { factor })
    }

    /// Factor 64 at 256 px, scaled linearly with image height (minimum 2).
    pub fn for_height(height: usize) -> Self {
        let f = (64.0 * height as f64 / 256.0).round() as usize;
        Self { factor: f.max(2) }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn check(&self, y: &Image) -> Result<()> {
        if !y.height().is_multiple_of(self.factor) || !y.width().is_multiple_of(self.factor) {
            return Err(Error::shape(format!("H and W divisible by {}", self.factor), y.shape()));
        }
        Ok(())
    }

    pub fn omega(&self, y: &Image) -> Result<Image> {
        self.check(y)?;
        let (h, w, n) = (y.height(), y.width(), self.factor);
        let inv = 1.0 / (n * n) as f64;
        let mut out = Image::zeros(y.shape());
        let plane = h * w;
        for c in 0..y.channels() {
            let src = y.channel(c);
            let dst = &mut out.data_mut()[c * plane..(c + 1) * plane];
            for bi in 0..h / n {
                for bj in 0..w / n {
                    let mut acc = 0.0;
                    for i in bi * n..(bi + 1) * n {
                        for j in bj * n..(bj + 1) * n {
                            acc += src[i * w + j];
                        }
                    }
                    let mean = acc * inv;
                    for i in bi * n..(bi + 1) * n {
                        for j in bj * n..(bj + 1) * n {
                            dst[i * w + j] = mean;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
