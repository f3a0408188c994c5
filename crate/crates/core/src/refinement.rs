//! Post-edit refinement: resampling low-confidence tokens of the new entity,
//! inpainting the region the source object vacated, and bounding-box mask
//! relaxation.
//!
//! Both resampling passes reuse the stage-2 reverse loop with no residual
//! (`λ = 0`), over a nested mask trajectory confined to the target region.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, Timestep};
use crate::error::{Error, Result};
use crate::inversion::{mask_trajectory, reverse_step, DEFAULT_TEMPERATURE};
use crate::masking::ScheduleParams;
use crate::rng::{RngState, Stage};
use crate::types::{ConfidenceMap, Conditioning, GroundingMask, TokenGrid};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.5;
pub const DEFAULT_REFINE_STEPS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelaxMode {
    #[default]
    Tight,
    BoundingBox,
}

fn default_threshold() -> f64 {
    DEFAULT_CONF_THRESHOLD
}

fn default_steps() -> usize {
    DEFAULT_REFINE_STEPS
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementParams {
    #[serde(default = "default_threshold")]
    pub conf_threshold: f64,
    #[serde(default = "default_steps")]
    pub refine_steps: usize,
    #[serde(default)]
    pub relax_mode: RelaxMode,
}

impl Default for RefinementParams {
    fn default() -> Self {
        RefinementParams {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            refine_steps: DEFAULT_REFINE_STEPS,
            relax_mode: RelaxMode::Tight,
        }
    }
}

impl RefinementParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return Err(Error::validation(format!(
                "confidence threshold must lie in (0, 1), got {}",
                self.conf_threshold
            )));
        }
        if self.refine_steps == 0 {
            return Err(Error::validation("refine_steps must be at least 1"));
        }
        Ok(())
    }
}

/// `M_src \ M_tgt`.
pub fn residual_mask(source: &GroundingMask, target: &GroundingMask) -> Result<GroundingMask> {
    source.diff(target)
}

/// `{C < τ} ∩ M_tgt`.
pub fn confidence_mask(conf: &ConfidenceMap, target: &GroundingMask, threshold: f64) -> Result<GroundingMask> {
    if conf.shape() != target.shape() {
        return Err(Error::dims(
            format!("{}x{}", target.height(), target.width()),
            format!("{}x{}", conf.height(), conf.width()),
        ));
    }
    Ok(GroundingMask::from_indices(
        target.height(),
        target.width(),
        target.indices().filter(|&i| conf.values()[i] < threshold),
    ))
}

/// Filled bounding box of a non-empty mask.
pub fn relax_mask(source: &GroundingMask) -> Result<GroundingMask> {
    let (y0, x0, y1, x1) = source
        .bounding_box()
        .ok_or_else(|| Error::validation("cannot relax an empty mask"))?;
    Ok(GroundingMask::from_fn(source.height(), source.width(), |y, x| {
        (y0..=y1).contains(&y) && (x0..=x1).contains(&x)
    }))
}

/// Masked regeneration confined to `region`: a `steps`-long nested mask
/// trajectory, then the reverse loop with pure Gumbel resampling.
pub fn resample_region(
    grid: &TokenGrid,
    region: &GroundingMask,
    steps: usize,
    cond: &Conditioning,
    denoiser: &dyn Denoiser,
    stage: Stage,
    rng: &RngState,
) -> Result<TokenGrid> {
    region.check_grid(grid)?;
    if region.is_empty() {
        return Ok(grid.clone());
    }
    let schedule = ScheduleParams::new(steps, 0.0)?;
    let masks = mask_trajectory(grid, region, &schedule, cond, denoiser, rng)?;
    let mut x = grid.clone();
    for t in (1..=steps).rev() {
        x = reverse_step(
            &x,
            &masks[t - 1],
            cond,
            denoiser,
            Timestep::new(t, steps)?,
            DEFAULT_TEMPERATURE,
            stage,
            rng,
            |_| Ok(None),
        )?;
    }
    Ok(x)
}

/// Resample the unstable part of the newly generated entity.
#[allow(clippy::too_many_arguments)]
pub fn intrinsic_refine(
    edited: &TokenGrid,
    conf: &ConfidenceMap,
    target: &GroundingMask,
    params: &RefinementParams,
    cond_tgt: &Conditioning,
    denoiser: &dyn Denoiser,
    rng: &RngState,
) -> Result<TokenGrid> {
    params.validate()?;
    target.check_grid(edited)?;
    let unstable = confidence_mask(conf, target, params.conf_threshold)?;
    resample_region(edited, &unstable, params.refine_steps, cond_tgt, denoiser, Stage::Refine, rng)
}

/// Inpaint the residual region under the background conditioning.
pub fn recover_residual(
    edited: &TokenGrid,
    residual: &GroundingMask,
    cond_bg: &Conditioning,
    steps: usize,
    denoiser: &dyn Denoiser,
    rng: &RngState,
) -> Result<TokenGrid> {
    if steps == 0 {
        return Err(Error::validation("refine_steps must be at least 1"));
    }
    resample_region(edited, residual, steps, cond_bg, denoiser, Stage::Recover, rng)
}
