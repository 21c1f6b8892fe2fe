//! Layer primitives: parameter storage, spectral normalization, the shared
//! convolution block, and attention-augmented convolution.

mod attention;
mod conv;
mod params;
mod spectral;

pub use attention::{
    attention_augmented_conv, multi_head_self_attention, self_attention, AttentionOutput,
    AttentionParams, AttentionProjections, HeadSpec,
};
pub use conv::{Activation, ConvBlock, ConvSpec, Resample, Upsampling};
pub use params::{Bound, Builder, ParamId, ParamStore, INIT_STD};
pub use spectral::{power_iteration_step, spectral_normalize, SpectralState};
