//! Layout-conditioned video diffusion at desk scale: condition encoders,
//! cross-attention injection, a zero-initialized control branch, multi-view
//! attention, rectified-flow training and multi-condition guidance.

mod audit;
mod model;
mod net;
mod train;

pub use audit::{gradient_check, random_bundle, GradCheck};
pub use model::{
    fingerprint, load_checkpoint, save_checkpoint, ConditionBundle, GenConfig, GenModel, NullFlags, Param,
    CHECKPOINT_MAGIC,
};
pub use net::{
    encode_conditions, forward, fourier_embed, mva, mva_shape, mva_tensor, patchify, positional_encoding, spatial_attention,
    unpatchify, Encoded, Leaves,
};
pub use train::{
    draw_nulls, extend_video, DivergenceGuard, generate_dataset, guided_velocity, sample, sample_with_trace, stitch, train,
    velocity, Guidance, NullDraw, SampleTrace, TrainReport, TrainSample,
};
