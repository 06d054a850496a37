//! The EEG-EMG network: band attention, multi-scale fusion, ICSCM, SE gating,
//! the EMG residual branch and the attention fuse module.

mod config;
pub mod layers;
mod network;
mod params;

pub use config::{ablate, param_count, variant_name, Ablation, ModelConfig, EMG_KERNEL};
pub use network::{
    argmax, forward, forward_bands, logits_from_bands, prepare_eeg, Denoiser, ForwardOutput,
    ForwardTrace, PassThrough,
};
pub use params::{param_specs, BoundParams, ModelParams, ParamSpec};
