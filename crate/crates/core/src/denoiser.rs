//! The denoiser contract and two deterministic, training-free implementations.
//!
//! A denoiser maps `(grid, conditioning, timestep)` to per-position logits over
//! the vocabulary and to a stack of cross-attention maps. The mask token is an
//! ordinary input symbol; logits are produced at every position and callers
//! pick the positions they need.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ConfidenceMap, Conditioning, LogitField, TokenGrid};

/// Step `t` of a `total`-step schedule, `1 ≤ t ≤ total`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Timestep {
    pub t: usize,
    pub total: usize,
}

impl Timestep {
    pub fn new(t: usize, total: usize) -> Result<Self> {
        if total == 0 || t == 0 || t > total {
            return Err(Error::validation(format!("timestep {t} outside 1..={total}")));
        }
        Ok(Timestep { t, total })
    }

    /// Coarse phase `⌊4t/T⌋`, in `0..=4`.
    pub fn bucket(&self) -> usize {
        4 * self.t / self.total
    }
}

/// Cross-attention mass from each visual position to the prompt, one map per
/// `(layer, head)`, stored layer-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    height: usize,
    width: usize,
    maps: Vec<Vec<f64>>,
}

impl AttentionStack {
    pub fn new(height: usize, width: usize, maps: Vec<Vec<f64>>) -> Result<Self> {
        for (k, m) in maps.iter().enumerate() {
            if m.len() != height * width {
                return Err(Error::dims(
                    format!("attention map of {} entries", height * width),
                    format!("map {k} with {}", m.len()),
                ));
            }
            if m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::validation(format!("attention map {k} has a negative or non-finite entry")));
            }
        }
        Ok(AttentionStack { height, width, maps })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn maps(&self) -> &[Vec<f64>] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Stack `other`'s maps after `self`'s.
    pub fn concat(&self, other: &AttentionStack) -> Result<AttentionStack> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dims(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        let mut maps = self.maps.clone();
        maps.extend(other.maps.iter().cloned());
        Ok(AttentionStack {
            height: self.height,
            width: self.width,
            maps,
        })
    }
}

/// The denoiser interface. Implementations must be pure functions of their
/// inputs and must return finite logits.
pub trait Denoiser: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Chebyshev radius outside which tokens cannot influence a position's
    /// logits, when such a bound exists.
    fn locality_radius(&self) -> Option<usize>;

    fn predict_logits(&self, grid: &TokenGrid, cond: &Conditioning, step: Timestep) -> Result<LogitField>;

    fn predict_attention(&self, grid: &TokenGrid, cond: &Conditioning, step: Timestep) -> Result<AttentionStack>;
}

pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_HEADS: usize = 4;

fn default_layers() -> usize {
    DEFAULT_LAYERS
}

fn default_heads() -> usize {
    DEFAULT_HEADS
}

fn default_radius() -> usize {
    1
}

/// Serializable description of a synthetic denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// Hash of the local neighbourhood, the prompt and a coarse timestep.
    LocalHash {
        vocab_size: usize,
        #[serde(default = "default_radius")]
        locality_radius: usize,
        #[serde(default = "default_layers")]
        attention_layers: usize,
        #[serde(default = "default_heads")]
        attention_heads: usize,
    },
    /// Smoothed conditional frequencies of a token given its neighbourhood
    /// class. `table[class][token]` holds raw counts; class `vocab_size`
    /// stands for "no unmasked in-bounds neighbour".
    Empirical {
        vocab_size: usize,
        table: Vec<Vec<u64>>,
        #[serde(default = "default_layers")]
        attention_layers: usize,
        #[serde(default = "default_heads")]
        attention_heads: usize,
    },
}

/// Logit range of the hashed base scores.
const HASH_SPAN: f64 = 4.0;
/// Bonus added to the preferred token where the neighbourhood matches.
const PROMPT_BONUS: f64 = 6.0;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn prompt_hash(cond: &Conditioning) -> u64 {
    cond.prompt()
        .iter()
        .fold(mix64(cond.prompt().len() as u64), |h, &t| mix64(h ^ u64::from(t)))
}

/// Most frequent unmasked token among `cells`, smallest id on ties.
fn majority(cells: impl Iterator<Item = u32>, mask_token: u32, vocab: usize) -> Option<u32> {
    let mut counts = vec![0u32; vocab];
    for t in cells {
        if t != mask_token && (t as usize) < vocab {
            counts[t as usize] += 1;
        }
    }
    let (best, &n) = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (n > 0).then_some(best as u32)
}

/// Tokens within Chebyshev radius `r` of `(y, x)`, clipped to the grid.
fn neighbourhood(grid: &TokenGrid, y: usize, x: usize, r: usize) -> impl Iterator<Item = u32> + '_ {
    let (h, w) = grid.shape();
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
    (y0..=y1).flat_map(move |yy| (x0..=x1).map(move |xx| grid.get(yy, xx)))
}

/// The 8 surrounding cells (excluding the centre), clipped to the grid.
fn ring(grid: &TokenGrid, y: usize, x: usize) -> impl Iterator<Item = u32> + '_ {
    let (h, w) = grid.shape();
    let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
    let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
    (y0..=y1)
        .flat_map(move |yy| (x0..=x1).map(move |xx| (yy, xx)))
        .filter(move |&(yy, xx)| (yy, xx) != (y, x))
        .map(move |(yy, xx)| grid.get(yy, xx))
}

/// Attention affinity of a token to a concept set: `1 / (1 + min |token − c|)`,
/// zero for the mask token or an empty set.
fn affinity(token: u32, mask_token: u32, concepts: &[u32]) -> f64 {
    if token == mask_token {
        return 0.0;
    }
    concepts
        .iter()
        .map(|&c| 1.0 / (1.0 + (i64::from(token) - i64::from(c)).unsigned_abs() as f64))
        .fold(0.0, f64::max)
}

fn head_weight(layer: usize, head: usize) -> f64 {
    0.5 + 0.5 * unit(mix64(((layer as u64) << 32) ^ head as u64 ^ 0xa77e_17e5))
}

impl DenoiserSpec {
    pub fn local_hash(vocab_size: usize, locality_radius: usize) -> Self {
        DenoiserSpec::LocalHash {
            vocab_size,
            locality_radius,
            attention_layers: DEFAULT_LAYERS,
            attention_heads: DEFAULT_HEADS,
        }
    }

    /// Count `(neighbourhood class, token)` pairs over a corpus.
    pub fn fit_empirical(vocab_size: usize, corpus: &[TokenGrid]) -> Result<Self> {
        let mut table = vec![vec![0u64; vocab_size]; vocab_size + 1];
        for grid in corpus {
            if grid.vocab_size() != vocab_size {
                return Err(Error::validation(format!(
                    "corpus grid has vocab_size {}, expected {vocab_size}",
                    grid.vocab_size()
                )));
            }
            for y in 0..grid.height() {
                for x in 0..grid.width() {
                    let t = grid.get(y, x);
                    if t == grid.mask_token() {
                        continue;
                    }
                    let class = majority(ring(grid, y, x), grid.mask_token(), vocab_size)
                        .map_or(vocab_size, |c| c as usize);
                    table[class][t as usize] += 1;
                }
            }
        }
        Ok(DenoiserSpec::Empirical {
            vocab_size,
            table,
            attention_layers: DEFAULT_LAYERS,
            attention_heads: DEFAULT_HEADS,
        })
    }

    /// Fit on every `*.json` token grid in a directory, in file-name order.
    pub fn fit_empirical_dir(vocab_size: usize, dir: &Path) -> Result<Self> {
        let io = |e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let mut corpus = Vec::with_capacity(paths.len());
        for p in &paths {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            corpus.push(TokenGrid::from_json(&text)?);
        }
        Self::fit_empirical(vocab_size, &corpus)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DenoiserSpec::LocalHash {
                vocab_size,
                attention_layers,
                attention_heads,
                ..
            } => {
                if *vocab_size == 0 || *attention_layers == 0 || *attention_heads == 0 {
                    return Err(Error::validation("denoiser sizes must be positive"));
                }
            }
            DenoiserSpec::Empirical {
                vocab_size,
                table,
                attention_layers,
                attention_heads,
            } => {
                if *vocab_size == 0 || *attention_layers == 0 || *attention_heads == 0 {
                    return Err(Error::validation("denoiser sizes must be positive"));
                }
                if table.len() != vocab_size + 1 || table.iter().any(|row| row.len() != *vocab_size) {
                    return Err(Error::validation(format!(
                        "empirical table must be {}x{vocab_size}",
                        vocab_size + 1
                    )));
                }
            }
        }
        Ok(())
    }

    fn attention_shape(&self) -> (usize, usize) {
        match self {
            DenoiserSpec::LocalHash {
                attention_layers,
                attention_heads,
                ..
            }
            | DenoiserSpec::Empirical {
                attention_layers,
                attention_heads,
                ..
            } => (*attention_layers, *attention_heads),
        }
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.vocab_size() != self.vocab_size() {
            return Err(Error::validation(format!(
                "denoiser vocab_size {} does not match grid vocab_size {}",
                self.vocab_size(),
                grid.vocab_size()
            )));
        }
        Ok(())
    }

    fn local_hash_logits(&self, grid: &TokenGrid, cond: &Conditioning, step: Timestep, radius: usize) -> Vec<f64> {
        let d = grid.vocab_size();
        let mask = grid.mask_token();
        let base = mix64(prompt_hash(cond) ^ mix64(step.bucket() as u64));
        let preferred = cond.preferred_token().filter(|&p| (p as usize) < d);
        let mut out = Vec::with_capacity(grid.len() * d);
        for y in 0..grid.height() {
            for x in 0..grid.width() {
                // clipped cells hash as a sentinel so the window shape is part of the key
                let mut key = mix64(base ^ ((y + x) % 2) as u64);
                for dy in -(radius as isize)..=radius as isize {
                    for dx in -(radius as isize)..=radius as isize {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        let cell = if yy < 0 || xx < 0 || yy >= grid.height() as isize || xx >= grid.width() as isize {
                            u64::MAX
                        } else {
                            u64::from(grid.get(yy as usize, xx as usize))
                        };
                        key = mix64(key ^ cell);
                    }
                }
                let start = out.len();
                out.extend((0..d as u64).map(|v| HASH_SPAN * (2.0 * unit(mix64(key ^ v.wrapping_mul(0x2545_f491_4f6c_dd1d))) - 1.0)));
                let bonus = match preferred {
                    Some(p) => neighbourhood(grid, y, x, radius)
                        .any(|t| t == mask || cond.concepts().contains(&t))
                        .then_some(p),
                    None => majority(neighbourhood(grid, y, x, radius), mask, d),
                };
                if let Some(p) = bonus {
                    out[start + p as usize] += PROMPT_BONUS;
                }
            }
        }
        out
    }

    fn empirical_logits(&self, grid: &TokenGrid, table: &[Vec<u64>]) -> Vec<f64> {
        let d = grid.vocab_size();
        let rows: Vec<Vec<f64>> = table
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                let denom = (total + d as u64) as f64;
                row.iter().map(|&c| ((c + 1) as f64 / denom).ln()).collect()
            })
            .collect();
        let mut out = Vec::with_capacity(grid.len() * d);
        for y in 0..grid.height() {
            for x in 0..grid.width() {
                let class = majority(ring(grid, y, x), grid.mask_token(), d).map_or(d, |c| c as usize);
                out.extend_from_slice(&rows[class]);
            }
        }
        out
    }
}

impl Denoiser for DenoiserSpec {
    fn vocab_size(&self) -> usize {
        match self {
            DenoiserSpec::LocalHash { vocab_size, .. } | DenoiserSpec::Empirical { vocab_size, .. } => *vocab_size,
        }
    }

    fn locality_radius(&self) -> Option<usize> {
        match self {
            DenoiserSpec::LocalHash { locality_radius, .. } => Some(*locality_radius),
            DenoiserSpec::Empirical { .. } => Some(1),
        }
    }

    /// Local-hash: every vocabulary entry gets a hashed score in `[−4, 4]` keyed
    /// by the window of tokens within the locality radius, the prompt, the
    /// timestep bucket and the position's checkerboard parity. The prompt's
    /// first token then gets `+6` wherever the window holds a concept token or
    /// a mask token. An empty prompt instead boosts the window's majority
    /// token, which makes the neutral prompt continue its surroundings.
    ///
    /// Empirical: add-one-smoothed log frequencies of the token given the
    /// majority class of its eight neighbours. Ignores the prompt.
    fn predict_logits(&self, grid: &TokenGrid, cond: &Conditioning, step: Timestep) -> Result<LogitField> {
        self.validate()?;
        self.check_grid(grid)?;
        let values = match self {
            DenoiserSpec::LocalHash { locality_radius, .. } => {
                self.local_hash_logits(grid, cond, step, *locality_radius)
            }
            DenoiserSpec::Empirical { table, .. } => self.empirical_logits(grid, table),
        };
        LogitField::new(grid.height(), grid.width(), grid.vocab_size(), values)
    }

    fn predict_attention(&self, grid: &TokenGrid, cond: &Conditioning, _step: Timestep) -> Result<AttentionStack> {
        self.validate()?;
        self.check_grid(grid)?;
        let (layers, heads) = self.attention_shape();
        let base: Vec<f64> = grid
            .tokens()
            .iter()
            .map(|&t| affinity(t, grid.mask_token(), cond.concepts()))
            .collect();
        let mut maps = Vec::with_capacity(layers * heads);
        for l in 0..layers {
            for k in 0..heads {
                let w = head_weight(l, k);
                maps.push(base.iter().map(|a| a * w).collect());
            }
        }
        AttentionStack::new(grid.height(), grid.width(), maps)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax probability of the token held at each position; for mask-token
/// positions, the largest softmax probability.
pub fn confidence_map(field: &LogitField, grid: &TokenGrid) -> Result<ConfidenceMap> {
    field.check_grid(grid)?;
    let values = (0..grid.len())
        .map(|i| {
            let p = softmax(field.row(i));
            let t = grid.tokens()[i];
            if t == grid.mask_token() {
                p.into_iter().fold(0.0, f64::max)
            } else {
                p[t as usize]
            }
        })
        .map(|c| c.clamp(0.0, 1.0))
        .collect();
    ConfidenceMap::new(grid.height(), grid.width(), values)
}
