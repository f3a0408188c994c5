//! MSE, PSNR and SSIM restricted to a region of an 8-bit intensity grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{GroundingMask, TokenGrid};

pub const MAX_INTENSITY: f64 = 255.0;
/// PSNR reported when the MSE is (numerically) zero.
pub const PSNR_CAP: f64 = 100.0;
/// Side of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;
const C1: f64 = (0.01 * MAX_INTENSITY) * (0.01 * MAX_INTENSITY);
const C2: f64 = (0.03 * MAX_INTENSITY) * (0.03 * MAX_INTENSITY);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl IntensityGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let g = IntensityGrid { height, width, values };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.height * self.width {
            return Err(Error::validation(format!(
                "intensity grid has {} values, expected {}",
                self.values.len(),
                self.height * self.width
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=MAX_INTENSITY).contains(*v)) {
            return Err(Error::validation(format!("intensity {v} outside [0, 255]")));
        }
        Ok(())
    }

    /// `⌊token · 255 / (d − 1)⌋` per position.
    pub fn from_tokens(grid: &TokenGrid) -> Result<Self> {
        if grid.contains_mask_token() {
            return Err(Error::validation("cannot render a grid that still holds mask tokens"));
        }
        let top = grid.vocab_size().saturating_sub(1).max(1) as u64;
        let values = grid
            .tokens()
            .iter()
            .map(|&t| (u64::from(t) * 255 / top) as f64)
            .collect();
        Self::new(grid.height(), grid.width(), values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MAX_INTENSITY * MAX_INTENSITY * 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (MAX_INTENSITY * MAX_INTENSITY / mse).log10()).min(PSNR_CAP)
    }
}

/// SSIM of the window centred at `(cy, cx)`, clipped to the grid.
fn local_ssim(a: &IntensityGrid, b: &IntensityGrid, cy: usize, cx: usize) -> f64 {
    let r = SSIM_WINDOW / 2;
    let (y0, y1) = (cy.saturating_sub(r), (cy + r).min(a.height - 1));
    let (x0, x1) = (cx.saturating_sub(r), (cx + r).min(a.width - 1));
    let n = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            sa += a.values[y * a.width + x];
            sb += b.values[y * b.width + x];
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let da = a.values[y * a.width + x] - ma;
            let db = b.values[y * b.width + x] - mb;
            vaa += da * da;
            vbb += db * db;
            vab += da * db;
        }
    }
    let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
    ((2.0 * ma * mb + C1) * (2.0 * vab + C2)) / ((ma * ma + mb * mb + C1) * (vaa + vbb + C2))
}

pub fn region_metrics(reference: &IntensityGrid, candidate: &IntensityGrid, region: &GroundingMask) -> Result<RegionMetrics> {
    reference.validate()?;
    candidate.validate()?;
    let shape = (reference.height, reference.width);
    if (candidate.height, candidate.width) != shape || region.shape() != shape {
        return Err(Error::dims(
            format!("{}x{}", shape.0, shape.1),
            format!(
                "candidate {}x{}, region {}x{}",
                candidate.height,
                candidate.width,
                region.height(),
                region.width()
            ),
        ));
    }
    let count = region.count();
    if count == 0 {
        return Err(Error::validation("metric region is empty"));
    }
    let mut sq = 0.0;
    let mut ssim = 0.0;
    for (y, x) in region.positions() {
        let i = y * shape.1 + x;
        let d = reference.values[i] - candidate.values[i];
        sq += d * d;
        ssim += local_ssim(reference, candidate, y, x);
    }
    let mse = sq / count as f64;
    Ok(RegionMetrics {
        mse,
        psnr: psnr_from_mse(mse),
        ssim: ssim / count as f64,
    })
}
