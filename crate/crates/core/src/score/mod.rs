//! Score functions `s(y, t) ~ grad_y log q_t(y)` for the reverse SDE.

mod bench;
mod gmm;
mod net;

pub use bench::{benchmark_mixture, grid_score_error, GridError};
pub use gmm::GaussianMixture;
pub use net::{
    dsm_loss, dsm_loss_and_grad, train_dsm, train_dsm_with, weighted_dsm_loss_and_grad, Grads, LossPoint,
    LossWeighting, NetArch, OutputScale, ScoreNet, TrainConfig,
};

use crate::error::Result;
use crate::sde::SdeSchedule;
use crate::tensor::Image;

/// Anything that can evaluate the score of the noised data distribution.
pub trait ScoreModel: Send + Sync {
    fn score(&self, sched: &SdeSchedule, y: &Image, t: f64) -> Result<Image>;
}

impl<T: ScoreModel + ?Sized> ScoreModel for Box<T> {
    fn score(&self, sched: &SdeSchedule, y: &Image, t: f64) -> Result<Image> {
        (**self).score(sched, y, t)
    }
}
