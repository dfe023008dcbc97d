//! The forecasting network: learnable frequency enhancement, per-modality
//! patch encoders with reversible instance normalization applied to their
//! representations, a channel-mixing projection, a trend head and a Gaussian
//! residual head, and fixed band filters on the outputs.

mod config;
mod fef;
mod forecast;
mod network;
mod revin;

pub use config::{collapsed_cutoff, Ablation, Ablations, ModelConfig, LOGVAR_FLOOR, LOGVAR_MAX, LOGVAR_MIN};
pub use fef::{Fef, EXPERT_INIT_NOISE};
pub use forecast::{sample_residual, ForecastDistribution};
pub use network::{mask_for_pretraining, FdnModel, Loss, Outputs, MODALITIES, Q0_ENCODER, SHARED_ENCODER};
pub use revin::{revin_invert, revin_norm, REVIN_EPS};
