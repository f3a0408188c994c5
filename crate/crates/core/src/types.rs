//! Value types shared by every stage: token grids, binary masks, logit and
//! score fields, conditioning, and the inversion residual record.
//!
//! All grids are row-major with `(y, x)` indexing and origin at the top-left.
//! Values are immutable once built; constructors enforce the invariants and
//! deserialization goes through the same checks.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{from_json, Error, Result};
use crate::masking::schedule_size;

/// A position on a grid, `(y, x)`.
pub type Pos = (usize, usize);

/// Grid of vocabulary indices plus the out-of-vocabulary mask token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTokenGrid")]
pub struct TokenGrid {
    height: usize,
    width: usize,
    vocab_size: usize,
    mask_token: u32,
    tokens: Vec<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTokenGrid {
    height: usize,
    width: usize,
    vocab_size: usize,
    mask_token: u32,
    tokens: Vec<u32>,
}

impl TryFrom<RawTokenGrid> for TokenGrid {
    type Error = Error;

    fn try_from(raw: RawTokenGrid) -> Result<Self> {
        TokenGrid::with_mask_token(raw.height, raw.width, raw.vocab_size, raw.mask_token, raw.tokens)
    }
}

impl TokenGrid {
    /// Build a grid whose mask token is `vocab_size`.
    pub fn new(height: usize, width: usize, vocab_size: usize, tokens: Vec<u32>) -> Result<Self> {
        let mask_token = u32::try_from(vocab_size)
            .map_err(|_| Error::validation(format!("vocab_size {vocab_size} does not fit a token id")))?;
        Self::with_mask_token(height, width, vocab_size, mask_token, tokens)
    }

    pub fn with_mask_token(
        height: usize,
        width: usize,
        vocab_size: usize,
        mask_token: u32,
        tokens: Vec<u32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation(format!("grid dimensions must be positive, got {height}x{width}")));
        }
        if vocab_size == 0 {
            return Err(Error::validation("vocab_size must be positive"));
        }
        if (mask_token as usize) < vocab_size {
            return Err(Error::validation(format!(
                "mask_token {mask_token} lies inside the vocabulary (vocab_size {vocab_size})"
            )));
        }
        if tokens.len() != height * width {
            return Err(Error::validation(format!(
                "tokens has length {}, expected height*width = {}",
                tokens.len(),
                height * width
            )));
        }
        if let Some((i, &t)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| (t as usize) >= vocab_size && t != mask_token)
        {
            return Err(Error::validation(format!(
                "token {t} at index {i} is neither in the vocabulary (size {vocab_size}) nor the mask token {mask_token}"
            )));
        }
        Ok(TokenGrid {
            height,
            width,
            vocab_size,
            mask_token,
            tokens,
        })
    }

    /// Grid filled with a single token.
    pub fn filled(height: usize, width: usize, vocab_size: usize, token: u32) -> Result<Self> {
        Self::new(height, width, vocab_size, vec![token; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn mask_token(&self) -> u32 {
        self.mask_token
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.tokens[y * self.width + x]
    }

    pub fn is_masked_at(&self, index: usize) -> bool {
        self.tokens[index] == self.mask_token
    }

    pub fn contains_mask_token(&self) -> bool {
        self.tokens.contains(&self.mask_token)
    }

    /// Same metadata, new token array.
    pub fn with_tokens(&self, tokens: Vec<u32>) -> Result<Self> {
        Self::with_mask_token(self.height, self.width, self.vocab_size, self.mask_token, tokens)
    }

    /// 64-bit FNV-1a over the token array (little-endian u32 words).
    pub fn checksum(&self) -> Checksum {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut hash = OFFSET;
        for t in &self.tokens {
            for b in t.to_le_bytes() {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(PRIME);
            }
        }
        Checksum(hash)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("token grid serializes")
    }

    /// Parse and validate. Syntax problems become [`Error::Parse`], broken
    /// invariants become [`Error::Validation`].
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawTokenGrid = parse_json(text)?;
        raw.try_into()
    }
}

/// Deserialize with the JSON path of the failure reported as the field.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        let mut e = from_json(inner);
        if let Error::Parse { field, .. } = &mut e {
            if path != "." {
                *field = path;
            }
        }
        e
    })
}

/// FNV-1a digest of a source grid, rendered as 16 lowercase hex digits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Checksum(pub u64);

impl fmt::Display for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl std::str::FromStr for Checksum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        u64::from_str_radix(s, 16)
            .map(Checksum)
            .map_err(|e| Error::Parse {
                field: "source_checksum".into(),
                message: format!("`{s}` is not a hex checksum: {e}"),
            })
    }
}

impl Serialize for Checksum {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Checksum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Binary H×W mask. Serialized with `bits` as 0/1 integers.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GroundingMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for GroundingMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "GroundingMask {}x{} ({} set)", self.height, self.width, self.count())?;
        for row in self.bits.chunks(self.width) {
            let line: String = row.iter().map(|&b| if b { '#' } else { '.' }).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Serialize for GroundingMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| u8::from(b)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GroundingMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawMask::deserialize(d)?;
        GroundingMask::try_from(raw).map_err(serde::de::Error::custom)
    }
}

impl TryFrom<RawMask> for GroundingMask {
    type Error = Error;

    fn try_from(raw: RawMask) -> Result<Self> {
        if raw.height == 0 || raw.width == 0 {
            return Err(Error::validation("mask dimensions must be positive"));
        }
        if raw.bits.len() != raw.height * raw.width {
            return Err(Error::validation(format!(
                "bits has length {}, expected {}",
                raw.bits.len(),
                raw.height * raw.width
            )));
        }
        if let Some(i) = raw.bits.iter().position(|&b| b > 1) {
            return Err(Error::validation(format!("bits[{i}] = {} is not 0 or 1", raw.bits[i])));
        }
        Ok(GroundingMask {
            height: raw.height,
            width: raw.width,
            bits: raw.bits.into_iter().map(|b| b == 1).collect(),
        })
    }
}

impl GroundingMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("mask dimensions must be positive"));
        }
        if bits.len() != height * width {
            return Err(Error::validation(format!(
                "bits has length {}, expected {}",
                bits.len(),
                height * width
            )));
        }
        Ok(GroundingMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        GroundingMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        GroundingMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        GroundingMask { height, width, bits }
    }

    pub fn from_indices(height: usize, width: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::empty(height, width);
        for i in indices {
            m.bits[i] = true;
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn at(&self, index: usize) -> bool {
        self.bits[index]
    }

    /// ‖M‖₁, the number of set bits.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Row-major indices of the set bits.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// `(y, x)` of the set bits in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = Pos> + '_ {
        let w = self.width;
        self.indices().map(move |i| (i / w, i % w))
    }

    /// Inclusive `(min y, min x, max y, max x)` of the set bits.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        self.positions().fold(None, |acc, (y, x)| {
            Some(match acc {
                None => (y, x, y, x),
                Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
            })
        })
    }

    pub fn check_same_shape(&self, other: &GroundingMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if self.shape() != grid.shape() {
            return Err(Error::dims(
                format!("mask {}x{}", grid.height(), grid.width()),
                format!("mask {}x{}", self.height, self.width),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &GroundingMask, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(GroundingMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn and(&self, other: &GroundingMask) -> Result<Self> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &GroundingMask) -> Result<Self> {
        self.zip_with(other, |a, b| a || b)
    }

    /// `self ∧ ¬other`.
    pub fn diff(&self, other: &GroundingMask) -> Result<Self> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> Self {
        GroundingMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &GroundingMask) -> bool {
        self.shape() == other.shape() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &GroundingMask) -> bool {
        self.shape() == other.shape() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !(a && b))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawMask = parse_json(text)?;
        raw.try_into()
    }
}

pub fn mask_and(a: &GroundingMask, b: &GroundingMask) -> Result<GroundingMask> {
    a.and(b)
}

pub fn mask_or(a: &GroundingMask, b: &GroundingMask) -> Result<GroundingMask> {
    a.or(b)
}

pub fn mask_diff(a: &GroundingMask, b: &GroundingMask) -> Result<GroundingMask> {
    a.diff(b)
}

pub fn mask_complement(a: &GroundingMask) -> GroundingMask {
    a.complement()
}

/// H×W×|V| finite logits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogitField {
    height: usize,
    width: usize,
    vocab_size: usize,
    values: Vec<f64>,
}

impl LogitField {
    pub fn new(height: usize, width: usize, vocab_size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * vocab_size {
            return Err(Error::validation(format!(
                "logit field has {} values, expected {}",
                values.len(),
                height * width * vocab_size
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("logit value {} at index {i} is not finite", values[i])));
        }
        Ok(LogitField {
            height,
            width,
            vocab_size,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, vocab_size: usize) -> Self {
        LogitField {
            height,
            width,
            vocab_size,
            values: vec![0.0; height * width * vocab_size],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The vocabulary-length logit vector at row-major position `index`.
    pub fn row(&self, index: usize) -> &[f64] {
        let d = self.vocab_size;
        &self.values[index * d..(index + 1) * d]
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.row(y * self.width + x)
    }

    pub fn check_same_shape(&self, other: &LogitField) -> Result<()> {
        if (self.height, self.width, self.vocab_size) != (other.height, other.width, other.vocab_size) {
            return Err(Error::dims(
                format!("{}x{}x{}", self.height, self.width, self.vocab_size),
                format!("{}x{}x{}", other.height, other.width, other.vocab_size),
            ));
        }
        Ok(())
    }

    pub fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if self.shape() != grid.shape() || self.vocab_size != grid.vocab_size() {
            return Err(Error::dims(
                format!("{}x{}x{}", grid.height(), grid.width(), grid.vocab_size()),
                format!("{}x{}x{}", self.height, self.width, self.vocab_size),
            ));
        }
        Ok(())
    }
}

/// Extended-real per-position scores. `+∞` and `−∞` act as sentinels for
/// forced inclusion and exclusion during mask selection.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScoreField {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::validation(format!(
                "score field has {} values, expected {}",
                values.len(),
                height * width
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::validation("score field contains NaN"));
        }
        Ok(ScoreField { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-position confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::validation(format!(
                "confidence map has {} values, expected {}",
                values.len(),
                height * width
            )));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!("confidence {} at index {i} outside [0, 1]", values[i])));
        }
        Ok(ConfidenceMap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

/// A prompt as seen by the denoiser: an opaque token sequence. The synthetic
/// denoisers read the first token as the preferred output token and the whole
/// sequence as the concept set. The role is bookkeeping only and never
/// influences predictions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conditioning {
    prompt: Vec<u32>,
    role: Role,
}

impl Conditioning {
    pub fn new(prompt: Vec<u32>, role: Role) -> Self {
        Conditioning { prompt, role }
    }

    pub fn source(prompt: Vec<u32>) -> Self {
        Self::new(prompt, Role::Source)
    }

    pub fn target(prompt: Vec<u32>) -> Self {
        Self::new(prompt, Role::Target)
    }

    /// The reserved background conditioning: an empty prompt.
    pub fn neutral() -> Self {
        Self::new(Vec::new(), Role::Target)
    }

    pub fn prompt(&self) -> &[u32] {
        &self.prompt
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn preferred_token(&self) -> Option<u32> {
        self.prompt.first().copied()
    }

    pub fn concepts(&self) -> &[u32] {
        &self.prompt
    }

    /// Same prompt, different role.
    pub fn with_role(&self, role: Role) -> Self {
        Self::new(self.prompt.clone(), role)
    }
}

/// One inversion step: the mask applied at step `t` and the residual logit
/// vectors at its set positions, keyed by row-major index in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStep {
    pub t: usize,
    pub mask: GroundingMask,
    pub residuals: Vec<(usize, Vec<f64>)>,
}

impl ResidualStep {
    pub fn residual_at(&self, index: usize) -> Option<&[f64]> {
        self.residuals
            .binary_search_by_key(&index, |(i, _)| *i)
            .ok()
            .map(|k| self.residuals[k].1.as_slice())
    }
}

/// Everything stage 2 needs from stage 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStack {
    timesteps: usize,
    mask: GroundingMask,
    source_checksum: Checksum,
    steps: Vec<ResidualStep>,
}

impl ResidualStack {
    /// Build and validate.
    pub fn new(
        timesteps: usize,
        mask: GroundingMask,
        source_checksum: Checksum,
        steps: Vec<ResidualStep>,
    ) -> Result<Self> {
        let stack = ResidualStack {
            timesteps,
            mask,
            source_checksum,
            steps,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn mask(&self) -> &GroundingMask {
        &self.mask
    }

    pub fn source_checksum(&self) -> Checksum {
        self.source_checksum
    }

    pub fn steps(&self) -> &[ResidualStep] {
        &self.steps
    }

    /// Step record for `t` in `1..=T`.
    pub fn step(&self, t: usize) -> &ResidualStep {
        &self.steps[t - 1]
    }

    /// Linear scan of every structural invariant: one entry per step in
    /// order, nested masks inside the grounding mask, schedule cardinality,
    /// residuals exactly at masked positions with a common finite length.
    pub fn validate(&self) -> Result<()> {
        let t_total = self.timesteps;
        if t_total == 0 {
            return Err(Error::validation("residual stack must have at least one timestep"));
        }
        if self.steps.len() != t_total {
            return Err(Error::validation(format!(
                "residual stack has {} steps, expected {t_total}",
                self.steps.len()
            )));
        }
        let n = self.mask.count();
        let mut vec_len: Option<usize> = None;
        for (k, step) in self.steps.iter().enumerate() {
            let t = k + 1;
            if step.t != t {
                return Err(Error::validation(format!("step {k} has t = {}, expected {t}", step.t)));
            }
            self.mask.check_same_shape(&step.mask)?;
            if !step.mask.is_subset_of(&self.mask) {
                return Err(Error::validation(format!("m_{t} is not contained in the grounding mask")));
            }
            if k > 0 && !self.steps[k - 1].mask.is_subset_of(&step.mask) {
                return Err(Error::validation(format!("m_{} is not contained in m_{t}", t - 1)));
            }
            let expected = schedule_size(t, t_total, n)?;
            if step.mask.count() != expected {
                return Err(Error::validation(format!(
                    "|m_{t}| = {}, schedule requires {expected}",
                    step.mask.count()
                )));
            }
            if step.residuals.len() != expected
                || !step.residuals.windows(2).all(|w| w[0].0 < w[1].0)
                || !step.residuals.iter().map(|(i, _)| *i).eq(step.mask.indices())
            {
                return Err(Error::validation(format!(
                    "residuals at step {t} do not match the positions of m_{t}"
                )));
            }
            for (i, v) in &step.residuals {
                match vec_len {
                    None => vec_len = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(Error::validation(format!(
                            "residual at step {t} index {i} has length {}, expected {d}",
                            v.len()
                        )))
                    }
                    _ => {}
                }
                if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::validation(format!(
                        "residual at step {t} index {i} is empty or not finite"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Length of the stored residual vectors, if any are stored.
    pub fn residual_len(&self) -> Option<usize> {
        self.steps
            .iter()
            .flat_map(|s| s.residuals.first())
            .map(|(_, v)| v.len())
            .next()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("residual stack serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawStack = parse_json(text)?;
        raw.try_into()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    pos: [usize; 2],
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    t: usize,
    m: GroundingMask,
    z: Vec<RawEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStack {
    timesteps: usize,
    mask: GroundingMask,
    source_checksum: Checksum,
    steps: Vec<RawStep>,
}

impl TryFrom<RawStack> for ResidualStack {
    type Error = Error;

    fn try_from(raw: RawStack) -> Result<Self> {
        let (h, w) = raw.mask.shape();
        let mut steps = Vec::with_capacity(raw.steps.len());
        for s in raw.steps {
            let mut residuals = Vec::with_capacity(s.z.len());
            for e in s.z {
                let [y, x] = e.pos;
                if y >= h || x >= w {
                    return Err(Error::OutOfBounds(format!(
                        "residual position ({y}, {x}) at step {} outside {h}x{w}",
                        s.t
                    )));
                }
                residuals.push((y * w + x, e.v));
            }
            steps.push(ResidualStep {
                t: s.t,
                mask: s.m,
                residuals,
            });
        }
        ResidualStack::new(raw.timesteps, raw.mask, raw.source_checksum, steps)
    }
}

impl Serialize for ResidualStack {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let w = self.mask.width();
        RawStack {
            timesteps: self.timesteps,
            mask: self.mask.clone(),
            source_checksum: self.source_checksum,
            steps: self
                .steps
                .iter()
                .map(|st| RawStep {
                    t: st.t,
                    m: st.mask.clone(),
                    z: st
                        .residuals
                        .iter()
                        .map(|(i, v)| RawEntry {
                            pos: [i / w, i % w],
                            v: v.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ResidualStack {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawStack::deserialize(d)?;
        ResidualStack::try_from(raw).map_err(serde::de::Error::custom)
    }
}

/// Serialize a token grid to JSON bytes.
pub fn serialize_grid(grid: &TokenGrid) -> Vec<u8> {
    grid.to_json().into_bytes()
}

/// Parse JSON bytes into a validated token grid.
pub fn deserialize_grid(bytes: &[u8]) -> Result<TokenGrid> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    TokenGrid::from_json(text)
}
