//! Grounding-aware inversion and region-constrained editing for masked
//! discrete diffusion over token grids.
//!
//! The pipeline for one edit is: ground a region, invert the source grid
//! inside it into a [`ResidualStack`], replay the stack under a target
//! prompt, then refine. Denoisers plug in through the [`Denoiser`] trait;
//! two deterministic synthetic ones are provided.

pub mod bench;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod grounding;
pub mod inversion;
pub mod masking;
pub mod metrics;
pub mod refinement;
pub mod rng;
pub mod types;

pub use denoiser::{confidence_map, AttentionStack, Denoiser, DenoiserSpec, Timestep};
pub use error::{Error, Result};
pub use grounding::{attention_heatmap, ground, top_k_points, Heatmap, SpatialPrompt};
pub use inversion::{edit, fuse_logits, invert, lai_rectify, FusionParams};
pub use masking::{apply_mask, constrain_scores, generate_mask, schedule_size, stochastic_confidence, ScheduleParams};
pub use refinement::{intrinsic_refine, recover_residual, relax_mask, residual_mask, RefinementParams, RelaxMode};
pub use rng::{gumbel_from_uniform, gumbel_max_sample, gumbel_trunc_sample, RngState};
pub use types::{
    ConfidenceMap, Conditioning, GroundingMask, LogitField, ResidualStack, Role, ScoreField, TokenGrid,
};
