//! Neural estimator: layers, model, losses, optimizer, MAC accounting and
//! checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod macs;
pub mod model;

pub use adam::{adam_step, sgd_step, AdamConfig, AdamState};
pub use layers::{FeatureMap, LayerStats, Probe};
pub use loss::{classification_loss, estimation_loss, pack, unpack};
pub use macs::{mac_count, MacReport};
pub use model::{
    compute_gradients, route_groups, ArchConfig, Batch, BatchStats, GateOutput, Gating, Gradients, Mode,
    ModelParams, Objective, ParamGroup,
};
