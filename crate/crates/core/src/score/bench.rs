//! The 2-D mixture used to check the sampler and the trained network against
//! the analytic score.

use crate::error::Result;
use crate::sde::SdeSchedule;
use crate::tensor::Image;

use super::{GaussianMixture, ScoreModel};

/// Three unequal, well-separated components with variance 0.1.
pub fn benchmark_mixture() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.5, 0.3, 0.2],
        vec![vec![-1.5, 0.0], vec![1.5, 0.5], vec![0.0, -1.5]],
        vec![0.1, 0.1, 0.1],
    )
    .expect("valid benchmark mixture")
}

pub const GRID_POINTS: usize = 21;
pub const GRID_HALF_WIDTH: f64 = 2.5;
pub const GRID_TIMES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridError {
    /// Mean over grid points and times of the squared score error.
    pub mse: f64,
    /// Mean squared norm of the oracle score over the same points.
    pub oracle_sq_norm: f64,
}

impl GridError {
    pub fn ratio(&self) -> f64 {
        self.mse / self.oracle_sq_norm
    }
}

/// Compare `model` with the mixture's exact score on a 21 x 21 grid over
/// [-2.5, 2.5]^2 at `GRID_TIMES` (fractions of T).
pub fn grid_score_error(model: &dyn ScoreModel, oracle: &GaussianMixture, sched: &SdeSchedule) -> Result<GridError> {
    let mut err = 0.0;
    let mut norm = 0.0;
    let mut n = 0usize;
    let step = 2.0 * GRID_HALF_WIDTH / (GRID_POINTS - 1) as f64;
    for &tf in &GRID_TIMES {
        let t = tf * sched.horizon();
        for i in 0..GRID_POINTS {
            for j in 0..GRID_POINTS {
                let y = vec![-GRID_HALF_WIDTH + i as f64 * step, -GRID_HALF_WIDTH + j as f64 * step];
                let truth = oracle.score(sched, &y, t)?;
                let got = model.score(sched, &Image::vector(y), t)?;
                for (a, b) in got.data().iter().zip(&truth) {
                    err += (a - b) * (a - b);
                    norm += b * b;
                }
                n += 1;
            }
        }
    }
    Ok(GridError {
        mse: err / n as f64,
        oracle_sq_norm: norm / n as f64,
    })
}
