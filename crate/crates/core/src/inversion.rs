//! Two-stage grounding-aware inversion and editing.
//!
//! Stage 1 ([`invert`]) walks `t = 1..T`, growing a nested mask inside the
//! grounding region, and records at each masked position the residual
//! between rectified and predicted logits. Stage 2 ([`edit`]) replays those
//! masks from `t = T` down to 1 under a new prompt, adding the residual and
//! Gumbel noise to the predicted logits before taking the argmax.
//!
//! Tokens outside the grounding mask are never written. With the source
//! prompt, `λ = 1` and `τ = 1` the replay returns the source grid exactly,
//! because the rectified logits put the source token ahead of every other
//! entry by at least the margin.

use serde::{Deserialize, Serialize};

use crate::denoiser::{confidence_map, Denoiser, Timestep};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, constrain_scores, generate_mask, stochastic_confidence, ScheduleParams};
use crate::rng::{argmax, gumbel_from_uniform, gumbel_trunc_sample, RngState, Stage, DEFAULT_EPSILON};
use crate::types::{Conditioning, GroundingMask, LogitField, ResidualStack, ResidualStep, TokenGrid};

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_LAI_MARGIN: f64 = 1.0;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_margin() -> f64 {
    DEFAULT_LAI_MARGIN
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionParams {
    /// Weight of the inversion residual; `1 − λ` weights the Gumbel noise.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_margin")]
    pub lai_margin: f64,
    /// Divides the denoiser logits only.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Optional per-position λ (row-major, grid-sized) overriding `lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_map: Option<Vec<f64>>,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            lambda: DEFAULT_LAMBDA,
            lai_margin: DEFAULT_LAI_MARGIN,
            temperature: DEFAULT_TEMPERATURE,
            lambda_map: None,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

impl FusionParams {
    pub fn with_lambda(lambda: f64) -> Self {
        FusionParams {
            lambda,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.lai_margin > 0.0 && self.lai_margin.is_finite()) {
            return Err(Error::validation(format!("LAI margin must be positive, got {}", self.lai_margin)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::validation(format!("temperature must be positive, got {}", self.temperature)));
        }
        if let Some(map) = &self.lambda_map {
            for &l in map {
                check_lambda(l)?;
            }
        }
        Ok(())
    }

    fn lambda_at(&self, index: usize) -> f64 {
        self.lambda_map.as_ref().map_or(self.lambda, |m| m[index])
    }
}

/// Rectified logits for one position: a Gumbel sample located at the
/// predicted logit of `target`, and for every other entry a Gumbel sample
/// located at its predicted logit and truncated below `target_value − margin`.
///
/// Draw 0 of `rng` feeds the target entry; draw `1 + v` feeds entry `v`.
pub fn lai_row(predicted: &[f64], target: usize, margin: f64, rng: &RngState) -> Vec<f64> {
    let mut uniforms = rng.uniforms();
    let u_target = uniforms.next().expect("infinite stream");
    let top = predicted[target] + gumbel_from_uniform(u_target, DEFAULT_EPSILON);
    let trunc = top - margin;
    predicted
        .iter()
        .zip(uniforms)
        .enumerate()
        .map(|(v, (&p, u))| if v == target { top } else { gumbel_trunc_sample(p, trunc, u) })
        .collect()
}

/// Location-aware argmax inversion over a whole field. Position `i` at step
/// `t` draws from the substream `(lai, t, i)`.
pub fn lai_rectify(
    x_t: &TokenGrid,
    predicted: &LogitField,
    x0: &TokenGrid,
    margin: f64,
    rng: &RngState,
    t: usize,
) -> Result<LogitField> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::validation(format!("LAI margin must be positive, got {margin}")));
    }
    predicted.check_grid(x0)?;
    predicted.check_grid(x_t)?;
    if x0.contains_mask_token() {
        return Err(Error::validation("source grid for LAI contains mask tokens"));
    }
    let mut values = Vec::with_capacity(predicted.values().len());
    for i in 0..x0.len() {
        let sub = rng.substream(Stage::Lai, t as u64, i as u64);
        values.extend(lai_row(predicted.row(i), x0.tokens()[i] as usize, margin, &sub));
    }
    LogitField::new(x0.height(), x0.width(), x0.vocab_size(), values)
}

/// `y − ŷ`, adjusted by at most a few ulps so that `ŷ + z` reproduces `y`
/// bit-exactly when such a `z` exists.
pub fn exact_residual(rectified: f64, predicted: f64) -> f64 {
    let z = rectified - predicted;
    if predicted + z == rectified {
        return z;
    }
    let (mut up, mut down) = (z, z);
    for _ in 0..4 {
        up = up.next_up();
        down = down.next_down();
        if predicted + up == rectified {
            return up;
        }
        if predicted + down == rectified {
            return down;
        }
    }
    z
}

/// Nested masks `m_1 ⊆ … ⊆ m_T ⊆ region` following the sinusoidal schedule.
///
/// At step `t` the current state (the source with `m_{t−1}` applied) is
/// scored by the denoiser's confidence in the held tokens, perturbed by
/// `τ_mask`-scaled Gumbel noise, constrained to the region with previously
/// masked positions forced in, and the top `n_t` positions are taken.
pub fn mask_trajectory(
    x0: &TokenGrid,
    region: &GroundingMask,
    schedule: &ScheduleParams,
    cond: &Conditioning,
    denoiser: &dyn Denoiser,
    rng: &RngState,
) -> Result<Vec<GroundingMask>> {
    schedule.validate()?;
    region.check_grid(x0)?;
    let total = schedule.timesteps;
    let sizes = schedule.sizes(region.count())?;
    let mut prev = GroundingMask::empty(x0.height(), x0.width());
    let mut masks = Vec::with_capacity(total);
    for (k, &n_t) in sizes.iter().enumerate() {
        let t = k + 1;
        // with n_t = |m_{t-1}| the +∞ entries fill the whole selection
        if n_t != prev.count() {
            let current = apply_mask(x0, &prev)?;
            let logits = denoiser.predict_logits(&current, cond, Timestep::new(t, total)?)?;
            let conf = confidence_map(&logits, &current)?;
            let scores = stochastic_confidence(&conf, schedule.mask_temperature, rng, t);
            let constrained = constrain_scores(&scores, &prev, region)?;
            prev = generate_mask(&constrained, n_t)?;
        }
        masks.push(prev.clone());
    }
    Ok(masks)
}

/// Stage 1: record the mask trajectory and the residuals `z_t = y_t − ŷ_t`
/// at the masked positions of each step.
pub fn invert(
    x0: &TokenGrid,
    region: &GroundingMask,
    schedule: &ScheduleParams,
    cond_src: &Conditioning,
    denoiser: &dyn Denoiser,
    fusion: &FusionParams,
    rng: &RngState,
) -> Result<ResidualStack> {
    fusion.validate()?;
    check_vocab(x0, denoiser)?;
    region.check_grid(x0)?;
    if region.indices().any(|i| x0.is_masked_at(i)) {
        return Err(Error::validation("source grid holds mask tokens inside the grounding mask"));
    }
    let total = schedule.timesteps;
    let masks = mask_trajectory(x0, region, schedule, cond_src, denoiser, rng)?;
    let mut steps = Vec::with_capacity(total);
    for (k, m_t) in masks.into_iter().enumerate() {
        let t = k + 1;
        let mut residuals = Vec::with_capacity(m_t.count());
        if !m_t.is_empty() {
            let x_t = apply_mask(x0, &m_t)?;
            let predicted = denoiser.predict_logits(&x_t, cond_src, Timestep::new(t, total)?)?;
            for i in m_t.indices() {
                let sub = rng.substream(Stage::Lai, t as u64, i as u64);
                let row = predicted.row(i);
                let rectified = lai_row(row, x0.tokens()[i] as usize, fusion.lai_margin, &sub);
                let z = rectified.iter().zip(row).map(|(&y, &p)| exact_residual(y, p)).collect();
                residuals.push((i, z));
            }
        }
        steps.push(ResidualStep { t, mask: m_t, residuals });
    }
    ResidualStack::new(total, region.clone(), x0.checksum(), steps)
}

/// `ŷ + λz + (1 − λ)g` on single vectors.
pub fn fuse_row(target: &[f64], residual: &[f64], lambda: f64, gumbel: &[f64]) -> Vec<f64> {
    target
        .iter()
        .zip(residual)
        .zip(gumbel)
        .map(|((&y, &z), &g)| y + lambda * z + (1.0 - lambda) * g)
        .collect()
}

/// `ỹ = ŷ′ + λz + (1 − λ)g` over whole fields.
pub fn fuse_logits(target: &LogitField, residual: &LogitField, lambda: f64, gumbel: &LogitField) -> Result<LogitField> {
    check_lambda(lambda)?;
    target.check_same_shape(residual)?;
    target.check_same_shape(gumbel)?;
    let values = fuse_row(target.values(), residual.values(), lambda, gumbel.values());
    LogitField::new(target.height(), target.width(), target.vocab_size(), values)
}

fn check_vocab(grid: &TokenGrid, denoiser: &dyn Denoiser) -> Result<()> {
    if grid.vocab_size() != denoiser.vocab_size() {
        return Err(Error::validation(format!(
            "denoiser vocab_size {} does not match grid vocab_size {}",
            denoiser.vocab_size(),
            grid.vocab_size()
        )));
    }
    Ok(())
}

/// One reverse step: mask `mask` on `x`, predict under `cond`, and write the
/// argmax of `ŷ/τ + λz + (1 − λ)g` at each masked position. `residual(i)`
/// supplies `(z, λ)` for position `i`; `None` means pure resampling
/// (`λ = 0`). Noise for position `i` comes from the substream `(stage, t, i)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn reverse_step<'a>(
    x: &TokenGrid,
    mask: &GroundingMask,
    cond: &Conditioning,
    denoiser: &dyn Denoiser,
    step: Timestep,
    temperature: f64,
    stage: Stage,
    rng: &RngState,
    residual: impl Fn(usize) -> Result<Option<(&'a [f64], f64)>>,
) -> Result<TokenGrid> {
    if mask.is_empty() {
        return Ok(x.clone());
    }
    let x_t = apply_mask(x, mask)?;
    let predicted = denoiser.predict_logits(&x_t, cond, step)?;
    let d = x.vocab_size();
    let mut tokens = x_t.tokens().to_vec();
    for i in mask.indices() {
        let g = rng.substream(stage, step.t as u64, i as u64).gumbel(d, DEFAULT_EPSILON);
        let scaled: Vec<f64> = predicted.row(i).iter().map(|l| l / temperature).collect();
        let fused = match residual(i)? {
            Some((z, lambda)) => fuse_row(&scaled, z, lambda, &g),
            None => fuse_row(&scaled, &vec![0.0; d], 0.0, &g),
        };
        tokens[i] = argmax(&fused) as u32;
    }
    x.with_tokens(tokens)
}

/// Stage 2: replay the recorded masks from `t = T` down to 1 under the
/// target prompt.
pub fn edit(
    x0: &TokenGrid,
    stack: &ResidualStack,
    cond_tgt: &Conditioning,
    fusion: &FusionParams,
    denoiser: &dyn Denoiser,
    rng: &RngState,
) -> Result<TokenGrid> {
    fusion.validate()?;
    let actual = x0.checksum();
    if actual != stack.source_checksum() {
        return Err(Error::ChecksumMismatch {
            expected: stack.source_checksum().to_string(),
            actual: actual.to_string(),
        });
    }
    stack.mask().check_grid(x0)?;
    check_vocab(x0, denoiser)?;
    if let Some(d) = stack.residual_len() {
        if d != x0.vocab_size() {
            return Err(Error::validation(format!(
                "residual vectors have length {d}, grid vocab_size is {}",
                x0.vocab_size()
            )));
        }
    }
    if let Some(map) = &fusion.lambda_map {
        if map.len() != x0.len() {
            return Err(Error::dims(format!("lambda map of {} entries", x0.len()), map.len()));
        }
    }
    let total = stack.timesteps();
    let mut x = x0.clone();
    for t in (1..=total).rev() {
        let step = stack.step(t);
        x = reverse_step(
            &x,
            &step.mask,
            cond_tgt,
            denoiser,
            Timestep::new(t, total)?,
            fusion.temperature,
            Stage::Edit,
            rng,
            |i| {
                step.residual_at(i)
                    .map(|z| Some((z, fusion.lambda_at(i))))
                    .ok_or_else(|| Error::validation(format!("missing residual at step {t}, index {i}")))
            },
        )?;
    }
    Ok(x)
}
