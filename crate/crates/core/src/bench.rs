//! Compositional editing benchmark at grid scale.
//!
//! Cases hold a source grid and two sub-instructions over disjoint regions.
//! Each sub-instruction is grounded against the source grid's annotations,
//! inverted, edited, refined and recovered in turn. Background preservation
//! is scored with pixel metrics on the complement of the operation-typed
//! edited region, and order invariance is checked by replaying the
//! sub-instructions in reverse.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{confidence_map, Denoiser, DenoiserSpec, Timestep};
use crate::error::{Error, Result};
use crate::grounding::{ground, SpatialPrompt};
use crate::inversion::{edit, invert, FusionParams};
use crate::masking::ScheduleParams;
use crate::metrics::{region_metrics, IntensityGrid, RegionMetrics, SSIM_WINDOW};
use crate::refinement::{intrinsic_refine, recover_residual, relax_mask, residual_mask, RefinementParams, RelaxMode};
use crate::rng::{RngState, Stage};
use crate::types::{Conditioning, GroundingMask, Pos, TokenGrid};

/// Positions whose whole 3×3 neighbourhood lies in the mask, row-major.
/// Grid-border positions never qualify.
pub fn interior_pixels(mask: &GroundingMask) -> Vec<Pos> {
    let (h, w) = mask.shape();
    let mut out = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| mask.get(yy, xx))) {
                out.push((y, x));
            }
        }
    }
    out
}

fn dist(a: Pos, b: (f64, f64)) -> f64 {
    let dy = a.0 as f64 - b.0;
    let dx = a.1 as f64 - b.1;
    (dy * dy + dx * dx).sqrt()
}

fn as_f(p: Pos) -> (f64, f64) {
    (p.0 as f64, p.1 as f64)
}

/// `K` spatially spread interior points.
///
/// The interior set is split into quadrants around its centroid (rows with
/// `y < c_y` above, `x < c_x` left; quadrant order top-left, top-right,
/// bottom-left, bottom-right) and each non-empty quadrant contributes its
/// point farthest from the centroid. Remaining slots go greedily to the
/// point with the largest summed distance to those already chosen. All ties
/// go to the earlier row-major position.
pub fn sample_diverse_points(mask: &GroundingMask, k: usize) -> Result<Vec<Pos>> {
    let interior = interior_pixels(mask);
    if interior.len() < k {
        return Err(Error::Infeasible(format!(
            "need {k} interior pixels, mask has {}",
            interior.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let n = interior.len() as f64;
    let centroid = (
        interior.iter().map(|p| p.0 as f64).sum::<f64>() / n,
        interior.iter().map(|p| p.1 as f64).sum::<f64>() / n,
    );
    let quadrant = |p: Pos| 2 * usize::from(p.0 as f64 >= centroid.0) + usize::from(p.1 as f64 >= centroid.1);
    let mut chosen = Vec::with_capacity(k);
    for q in 0..4 {
        let mut best: Option<(Pos, f64)> = None;
        for &p in interior.iter().filter(|&&p| quadrant(p) == q) {
            let d = dist(p, centroid);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((p, d));
            }
        }
        if let Some((p, _)) = best {
            chosen.push(p);
        }
    }
    chosen.truncate(k);
    while chosen.len() < k {
        let mut best: Option<(Pos, f64)> = None;
        for &p in interior.iter().filter(|p| !chosen.contains(p)) {
            let spread: f64 = chosen.iter().map(|&s| dist(p, as_f(s))).sum();
            if best.is_none_or(|(_, bs)| spread > bs) {
                best = Some((p, spread));
            }
        }
        chosen.push(best.expect("enough interior points").0);
    }
    Ok(chosen)
}

/// Minimal enclosing box `(y0, x0, y1, x1)`, inclusive.
pub fn bounding_box(mask: &GroundingMask) -> Result<(usize, usize, usize, usize)> {
    mask.bounding_box()
        .ok_or_else(|| Error::validation("bounding box of an empty mask"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Add,
    Remove,
    Replace,
}

/// The region an operation is judged on: source ∪ target for replace, the
/// target for add, the source for remove.
pub fn edited_region(op: EditOp, source: &GroundingMask, target: &GroundingMask) -> Result<GroundingMask> {
    source.check_same_shape(target)?;
    Ok(match op {
        EditOp::Replace => source.or(target)?,
        EditOp::Add => target.clone(),
        EditOp::Remove => source.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Point,
    Box,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubInstruction {
    pub op: EditOp,
    /// Grounded on the source grid; the region is the union over prompts.
    pub prompts: Vec<SpatialPrompt>,
    pub source_concept: u32,
    pub target_concept: u32,
}

impl SubInstruction {
    pub fn region(&self, source: &TokenGrid) -> Result<GroundingMask> {
        let mut m = GroundingMask::empty(source.height(), source.width());
        for p in &self.prompts {
            m = m.or(&ground(source, p)?)?;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditCase {
    pub id: String,
    pub modality: Modality,
    pub source: TokenGrid,
    pub instructions: Vec<SubInstruction>,
}

impl EditCase {
    pub fn validate(&self) -> Result<()> {
        if self.instructions.len() != 2 {
            return Err(Error::validation(format!(
                "case {} has {} sub-instructions, expected 2",
                self.id,
                self.instructions.len()
            )));
        }
        let regions = self
            .instructions
            .iter()
            .map(|s| s.region(&self.source))
            .collect::<Result<Vec<_>>>()?;
        for (a, ra) in regions.iter().enumerate() {
            for rb in &regions[a + 1..] {
                if !ra.is_disjoint(rb) {
                    return Err(Error::validation(format!("case {}: sub-instruction regions overlap", self.id)));
                }
            }
        }
        Ok(())
    }
}

fn default_grid_side() -> usize {
    24
}

fn default_vocab() -> usize {
    32
}

fn default_gap() -> usize {
    3
}

fn default_attempts() -> usize {
    100
}

/// Shape of generated cases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseGenParams {
    #[serde(default = "default_grid_side")]
    pub height: usize,
    #[serde(default = "default_grid_side")]
    pub width: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Minimum number of background cells between the two regions.
    #[serde(default = "default_gap")]
    pub min_gap: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

impl Default for CaseGenParams {
    fn default() -> Self {
        CaseGenParams {
            height: default_grid_side(),
            width: default_grid_side(),
            vocab_size: default_vocab(),
            min_gap: default_gap(),
            max_attempts: default_attempts(),
        }
    }
}

/// Tokens `0..BACKGROUND_TOKENS` paint the background; the rest are objects.
pub const BACKGROUND_TOKENS: u32 = 8;
const BLOB_MIN: usize = 4;
const BLOB_MAX: usize = 6;

type Rect = (usize, usize, usize, usize);

/// Cells strictly between two rectangles along the separating axis.
pub fn rect_gap(a: Rect, b: Rect) -> usize {
    let gy = b.0.saturating_sub(a.2 + 1).max(a.0.saturating_sub(b.2 + 1));
    let gx = b.1.saturating_sub(a.3 + 1).max(a.1.saturating_sub(b.3 + 1));
    let overlap_y = a.0 <= b.2 && b.0 <= a.2;
    let overlap_x = a.1 <= b.3 && b.1 <= a.3;
    if overlap_y && overlap_x {
        0
    } else {
        gy.max(gx)
    }
}

struct Draws {
    rng: RngState,
    next: u64,
}

impl Draws {
    fn below(&mut self, n: usize) -> usize {
        let v = self.rng.below_at(self.next, n as u64) as usize;
        self.next += 1;
        v
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }
}

pub fn generate_case(seed: u64) -> Result<EditCase> {
    generate_case_with(seed, &CaseGenParams::default())
}

/// A reproducible two-instruction case: a striped background with two
/// rectangular object blobs at least `min_gap` cells apart, operations drawn
/// uniformly, modality chosen round-robin by seed.
pub fn generate_case_with(seed: u64, params: &CaseGenParams) -> Result<EditCase> {
    let (h, w, d) = (params.height, params.width, params.vocab_size);
    if d < BACKGROUND_TOKENS as usize + 4 {
        return Err(Error::validation(format!(
            "case generation needs vocab_size >= {}",
            BACKGROUND_TOKENS + 4
        )));
    }
    let mut draws = Draws {
        rng: RngState::from_seed(seed).substream(Stage::CaseGen, 0, 0),
        next: 0,
    };

    let mut tokens = vec![0u32; h * w];
    let mut y = 0;
    while y < h {
        let band = draws.range(2, 4);
        let t = draws.below(BACKGROUND_TOKENS as usize) as u32;
        for yy in y..(y + band).min(h) {
            tokens[yy * w..(yy + 1) * w].fill(t);
        }
        y += band;
    }

    let mut rects: Option<[Rect; 2]> = None;
    for _ in 0..params.max_attempts {
        let mut pick = || -> Option<Rect> {
            let (bh, bw) = (draws.range(BLOB_MIN, BLOB_MAX), draws.range(BLOB_MIN, BLOB_MAX));
            if h < bh + 2 || w < bw + 2 {
                return None;
            }
            let (y0, x0) = (draws.range(1, h - bh - 1), draws.range(1, w - bw - 1));
            Some((y0, x0, y0 + bh - 1, x0 + bw - 1))
        };
        if let (Some(a), Some(b)) = (pick(), pick()) {
            if rect_gap(a, b) >= params.min_gap {
                rects = Some([a, b]);
                break;
            }
        }
    }
    let rects = rects.ok_or_else(|| {
        Error::Infeasible(format!(
            "seed {seed}: could not place two regions {}+ cells apart on a {h}x{w} grid in {} attempts",
            params.min_gap, params.max_attempts
        ))
    })?;

    // four distinct object tokens: two sources, two targets
    let objects = d - BACKGROUND_TOKENS as usize;
    let mut concepts: Vec<u32> = Vec::with_capacity(4);
    while concepts.len() < 4 {
        let t = BACKGROUND_TOKENS + draws.below(objects) as u32;
        if !concepts.contains(&t) {
            concepts.push(t);
        }
    }
    for (k, &(y0, x0, y1, x1)) in rects.iter().enumerate() {
        for yy in y0..=y1 {
            tokens[yy * w + x0..=yy * w + x1].fill(concepts[k]);
        }
    }
    let source = TokenGrid::new(h, w, d, tokens)?;

    let modality = [Modality::Point, Modality::Box, Modality::Text][(seed % 3) as usize];
    let mut instructions = Vec::with_capacity(2);
    for (k, &(y0, x0, y1, x1)) in rects.iter().enumerate() {
        let op = [EditOp::Add, EditOp::Remove, EditOp::Replace][draws.below(3)];
        let blob = GroundingMask::from_fn(h, w, |y, x| (y0..=y1).contains(&y) && (x0..=x1).contains(&x));
        let prompts = match modality {
            Modality::Point => sample_diverse_points(&blob, 4)?
                .into_iter()
                .map(|(y, x)| SpatialPrompt::point(y, x))
                .collect(),
            Modality::Box => {
                let (a, b, c, e) = bounding_box(&blob)?;
                vec![SpatialPrompt::bbox(a, b, c, e)]
            }
            Modality::Text => vec![SpatialPrompt::text(vec![concepts[k]])],
        };
        let target_concept = match op {
            EditOp::Remove => draws.below(BACKGROUND_TOKENS as usize) as u32,
            _ => concepts[2 + k],
        };
        instructions.push(SubInstruction {
            op,
            prompts,
            source_concept: concepts[k],
            target_concept,
        });
    }
    let case = EditCase {
        id: format!("case-{seed:06}"),
        modality,
        source,
        instructions,
    };
    case.validate()?;
    Ok(case)
}

/// Everything needed to run a case besides the case itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub fusion: FusionParams,
    #[serde(default)]
    pub refinement: RefinementParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub order_check: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.schedule.validate()?;
        self.fusion.validate()?;
        self.refinement.validate()
    }
}

/// Region bookkeeping for one executed sub-instruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProvenance {
    pub op: EditOp,
    pub source_pixels: usize,
    pub target_pixels: usize,
    pub edited_pixels: usize,
}

struct AppliedEdit {
    op: EditOp,
    source: GroundingMask,
    target: GroundingMask,
}

/// Full pipeline for one sub-instruction on the current grid `x`:
/// ground → (relax) → invert → edit → intrinsic refinement → recovery.
pub fn apply_instruction(
    x: &TokenGrid,
    annotated: &TokenGrid,
    instr: &SubInstruction,
    config: &PipelineConfig,
) -> Result<(TokenGrid, GroundingMask, GroundingMask)> {
    let den: &dyn Denoiser = &config.denoiser;
    let rng = RngState::from_seed(config.seed);
    let mut m_src = instr.region(annotated)?;
    if config.refinement.relax_mode == RelaxMode::BoundingBox && !m_src.is_empty() {
        m_src = relax_mask(&m_src)?;
    }
    let cond_src = Conditioning::source(vec![instr.source_concept]);
    let cond_tgt = Conditioning::target(vec![instr.target_concept]);
    let stack = invert(x, &m_src, &config.schedule, &cond_src, den, &config.fusion, &rng)?;
    let edited = edit(x, &stack, &cond_tgt, &config.fusion, den, &rng)?;
    let m_tgt = match instr.op {
        EditOp::Add => m_src.clone(),
        EditOp::Remove => GroundingMask::empty(x.height(), x.width()),
        EditOp::Replace => GroundingMask::from_indices(
            x.height(),
            x.width(),
            m_src.indices().filter(|&i| edited.tokens()[i] == instr.target_concept),
        ),
    };
    let logits = den.predict_logits(&edited, &cond_tgt, Timestep::new(1, 1)?)?;
    let conf = confidence_map(&logits, &edited)?;
    let refined = intrinsic_refine(&edited, &conf, &m_tgt, &config.refinement, &cond_tgt, den, &rng)?;
    let m_res = residual_mask(&m_src, &m_tgt)?;
    let recovered = recover_residual(
        &refined,
        &m_res,
        &Conditioning::neutral(),
        config.refinement.refine_steps,
        den,
        &rng,
    )?;
    Ok((recovered, m_src, m_tgt))
}

fn execute(case: &EditCase, order: &[usize], config: &PipelineConfig) -> Result<(TokenGrid, Vec<AppliedEdit>)> {
    let mut x = case.source.clone();
    let mut applied = Vec::with_capacity(order.len());
    for &k in order {
        let instr = &case.instructions[k];
        let (next, source, target) = apply_instruction(&x, &case.source, instr, config)?;
        x = next;
        applied.push(AppliedEdit {
            op: instr.op,
            source,
            target,
        });
    }
    Ok((x, applied))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    pub modality: Modality,
    pub regions: Vec<RegionProvenance>,
    pub edited_pixels: usize,
    pub non_edited_pixels: usize,
    pub non_edit: RegionMetrics,
    pub output_checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_invariant: Option<bool>,
    /// Semantic-correctness score from an external judge; never populated
    /// here. When present, `pq <= sc` must hold.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pq: Option<f64>,
}

/// Run one case end to end and score its non-edited region against the source.
pub fn run_case(case: &EditCase, config: &PipelineConfig) -> Result<CaseReport> {
    let inner = || -> Result<CaseReport> {
        config.validate()?;
        case.validate()?;
        let forward: Vec<usize> = (0..case.instructions.len()).collect();
        let (output, applied) = execute(case, &forward, config)?;
        let (h, w) = case.source.shape();
        let mut edited = GroundingMask::empty(h, w);
        let mut regions = Vec::with_capacity(applied.len());
        for a in &applied {
            let r = edited_region(a.op, &a.source, &a.target)?;
            regions.push(RegionProvenance {
                op: a.op,
                source_pixels: a.source.count(),
                target_pixels: a.target.count(),
                edited_pixels: r.count(),
            });
            edited = edited.or(&r)?;
        }
        let keep = edited.complement();
        let non_edit = region_metrics(
            &IntensityGrid::from_tokens(&case.source)?,
            &IntensityGrid::from_tokens(&output)?,
            &keep,
        )?;
        let order_invariant = if config.order_check {
            let reverse: Vec<usize> = forward.iter().rev().copied().collect();
            let (swapped, _) = execute(case, &reverse, config)?;
            Some(swapped == output)
        } else {
            None
        };
        Ok(CaseReport {
            id: case.id.clone(),
            modality: case.modality,
            regions,
            edited_pixels: edited.count(),
            non_edited_pixels: keep.count(),
            non_edit,
            output_checksum: output.checksum().to_string(),
            order_invariant,
            sc: None,
            pq: None,
        })
    };
    inner().map_err(|e| e.in_case(case.id.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub grid: CaseGenParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CaseSource {
    /// JSON file holding an array of cases.
    Path(PathBuf),
    Generate { generate: GenerateSpec },
}

fn default_bench_denoiser() -> DenoiserSpec {
    DenoiserSpec::local_hash(default_vocab(), 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub cases: CaseSource,
    #[serde(default = "default_bench_denoiser")]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub fusion: FusionParams,
    #[serde(default)]
    pub refinement: RefinementParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub order_check: bool,
}

impl BenchConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            denoiser: self.denoiser.clone(),
            schedule: self.schedule,
            fusion: self.fusion.clone(),
            refinement: self.refinement,
            seed: self.seed,
            order_check: self.order_check,
        }
    }

    /// Load or generate the cases. Relative case paths resolve against `base`.
    pub fn load_cases(&self, base: &Path) -> Result<Vec<EditCase>> {
        match &self.cases {
            CaseSource::Path(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                crate::types::parse_json(&text)
            }
            CaseSource::Generate { generate } => (0..generate.count as u64)
                .map(|k| generate_case_with(generate.seed.wrapping_add(k), &generate.grid))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_invariant_rate: Option<f64>,
    pub ssim_window: String,
    pub alignment: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cases: Vec<CaseReport>,
    pub aggregate: Aggregate,
}

pub fn aggregate(cases: &[CaseReport]) -> Aggregate {
    let n = cases.len().max(1) as f64;
    let mean = |f: fn(&CaseReport) -> f64| cases.iter().map(f).sum::<f64>() / n;
    let checked: Vec<bool> = cases.iter().filter_map(|c| c.order_invariant).collect();
    Aggregate {
        cases: cases.len(),
        mean_mse: mean(|c| c.non_edit.mse),
        mean_psnr: mean(|c| c.non_edit.psnr),
        mean_ssim: mean(|c| c.non_edit.ssim),
        order_invariant_rate: (!checked.is_empty())
            .then(|| checked.iter().filter(|&&b| b).count() as f64 / checked.len() as f64),
        ssim_window: format!("uniform-{SSIM_WINDOW}x{SSIM_WINDOW}"),
        alignment: "identity".into(),
    }
}

/// Run every case (in parallel), calling `progress` as each finishes.
/// Report entries are ordered by case id.
pub fn run_bench(
    cases: &[EditCase],
    config: &PipelineConfig,
    progress: impl Fn(&CaseReport) + Sync,
) -> Result<BenchReport> {
    let mut reports = cases
        .par_iter()
        .map(|c| {
            let r = run_case(c, config)?;
            progress(&r);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| a.id.cmp(&b.id));
    let aggregate = aggregate(&reports);
    Ok(BenchReport {
        cases: reports,
        aggregate,
    })
}
