//! Counter-based random streams and the Gumbel primitives.
//!
//! Every draw is a pure function of `(seed, stream_id, draw index)`. Streams
//! are ChaCha8 keystreams: the seed expands to the key, the stream id selects
//! the nonce, and the draw index selects the block position. Pipelines derive
//! one substream per `(stage, timestep, position)` so results never depend on
//! evaluation order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Guard added inside both logarithms of the Gumbel transform.
pub const DEFAULT_EPSILON: f64 = 1e-20;

/// Which part of the pipeline a substream belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stage {
    General = 0,
    MaskScore = 1,
    Lai = 2,
    Edit = 3,
    Refine = 4,
    Recover = 5,
    CaseGen = 6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngState { seed, stream_id }
    }

    /// The root stream for a seed.
    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    /// Derive the substream keyed by `(stage, step, position)`.
    pub fn substream(&self, stage: Stage, step: u64, position: u64) -> RngState {
        let mut h = mix64(self.stream_id ^ 0x9e37_79b9_7f4a_7c15);
        for part in [stage as u64, step, position] {
            h = mix64(h ^ part.wrapping_add(0x9e37_79b9_7f4a_7c15));
        }
        RngState {
            seed: self.seed,
            stream_id: h,
        }
    }

    fn engine(&self, start: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        // two 32-bit words per u64 draw
        rng.set_word_pos(u128::from(start) * 2);
        rng
    }

    /// Iterator of uniforms in the open interval (0, 1), starting at draw 0.
    pub fn uniforms(&self) -> Uniforms {
        Uniforms { engine: self.engine(0) }
    }

    /// The `index`-th uniform of this stream.
    pub fn uniform_at(&self, index: u64) -> f64 {
        to_open_unit(self.engine(index).next_u64())
    }

    pub fn uniform(&self, count: usize) -> Vec<f64> {
        self.uniforms().take(count).collect()
    }

    /// `count` standard Gumbel draws (via [`gumbel_from_uniform`]).
    pub fn gumbel(&self, count: usize, epsilon: f64) -> Vec<f64> {
        self.uniforms().take(count).map(|u| gumbel_from_uniform(u, epsilon)).collect()
    }

    /// Uniform integer in `0..n` (n > 0), from draw `index`. Small modulo bias
    /// is irrelevant for test-case generation, which is its only use.
    pub fn below_at(&self, index: u64, n: u64) -> u64 {
        self.engine(index).next_u64() % n
    }
}

/// 52 random mantissa bits, centred in their cell, so 0 and 1 are unreachable.
fn to_open_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

pub struct Uniforms {
    engine: ChaCha8Rng,
}

impl Iterator for Uniforms {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(to_open_unit(self.engine.next_u64()))
    }
}

/// `count` uniforms in (0, 1) from the start of `rng`'s stream.
pub fn uniform(rng: &RngState, count: usize) -> Vec<f64> {
    rng.uniform(count)
}

/// Probability integral transform `−log(−log(u + ε) + ε)`.
pub fn gumbel_from_uniform(u: f64, epsilon: f64) -> f64 {
    -(-(u + epsilon).ln() + epsilon).ln()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled Gumbel-Max: `argmax_j (logits_j / τ + noise_j)`.
pub fn gumbel_max_sample(logits: &[f64], temperature: f64, noise: &[f64]) -> Result<usize> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::validation(format!("temperature must be positive, got {temperature}")));
    }
    if logits.is_empty() || logits.len() != noise.len() {
        return Err(Error::dims(
            format!("noise of length {}", logits.len()),
            format!("length {}", noise.len()),
        ));
    }
    let perturbed: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| l / temperature + g).collect();
    Ok(argmax(&perturbed))
}

/// Truncated Gumbel with location `φ`, bounded above by `T`:
/// `φ − log(exp(φ − T) − log u)`.
///
/// Evaluated as `T − log1p(−log u · exp(T − φ))` when `φ > T` so that large
/// gaps do not overflow. The result is strictly below `trunc`; when the exact
/// value sits within rounding distance of `trunc` the next float below it is
/// returned.
pub fn gumbel_trunc_sample(location: f64, trunc: f64, u: f64) -> f64 {
    let gap = location - trunc;
    let penalty = -u.ln();
    let value = if gap > 0.0 {
        trunc - (penalty * (-gap).exp()).ln_1p()
    } else {
        location - (gap.exp() + penalty).ln()
    };
    if value < trunc {
        value
    } else {
        trunc.next_down()
    }
}
