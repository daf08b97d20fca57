//! Reward-guided latent steering over cross-attention maps.
//!
//! A scene is a list of prompt tokens, boxes for the object tokens and links
//! from attribute tokens to their objects. During a (toy) denoising loop the
//! latent is pushed along the gradient of two rewards read from the
//! attention maps: an object-generation reward that concentrates each
//! object's attention inside its box, and an attribute-binding reward that
//! pulls each attribute's in-box distribution toward its object's.

pub mod ablation;
pub mod attention;
pub mod cli;
pub mod config;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod guidance;
pub mod layout;
pub mod metrics;
pub mod rewards;
pub mod seeding;

pub use attention::{
    attention_jacobian_vector, compute_attention, AttentionStack, Latent, NoiseSchedule,
    SamplerState, TokenEmbedding,
};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use guidance::{
    guided_update, reward_gradient, run_guided_sampling, GuidanceConfig, GuidanceTrace, GuidedRun,
};
pub use layout::{
    parse_layout, rasterize_mask, sample_sliding_boxes, BoundingBox, GridMask, LayoutSpec,
    ObjectMasks,
};
pub use metrics::RunMetrics;
pub use rewards::{
    attribute_reward, masked_mean, normalize_masked, object_reward, soft_iou, total_reward,
    RewardReport, RewardWeights,
};
