//! Gradient plumbing, Adam, and the loss stack.

pub mod adam;
pub mod loss;
pub mod residual;
pub mod tape;

pub use adam::{AdamState, ParamGroup, ParamStore};
pub use loss::{
    edge_weight, loss_cache, loss_data, loss_l1, loss_light_smooth, loss_light_white, loss_mask, loss_smooth,
    write_loss_csv, LossReport, LossWeights, SmoothPair,
};
pub use residual::{loss_residual, residual_light_indices, ResidualOutput, ResidualPoint};
pub use tape::{Gradients, Tape, Var};
