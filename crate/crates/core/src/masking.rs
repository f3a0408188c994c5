//! Grounding-constrained mask schedule: how many tokens to mask at each
//! step, which ones, and how masks are applied.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gumbel_from_uniform, RngState, Stage, DEFAULT_EPSILON};
use crate::types::{ConfidenceMap, GroundingMask, ScoreField, TokenGrid};

pub const DEFAULT_TIMESTEPS: usize = 64;

/// Probabilities are clamped to this floor before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-30;

fn default_timesteps() -> usize {
    DEFAULT_TIMESTEPS
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    /// Scale of the Gumbel perturbation on mask scores; 0 masks deterministically.
    #[serde(default)]
    pub mask_temperature: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            timesteps: DEFAULT_TIMESTEPS,
            mask_temperature: 0.0,
        }
    }
}

impl ScheduleParams {
    pub fn new(timesteps: usize, mask_temperature: f64) -> Result<Self> {
        let p = ScheduleParams {
            timesteps,
            mask_temperature,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::validation("timesteps must be at least 1"));
        }
        if !(self.mask_temperature >= 0.0 && self.mask_temperature.is_finite()) {
            return Err(Error::validation(format!(
                "mask temperature must be finite and non-negative, got {}",
                self.mask_temperature
            )));
        }
        Ok(())
    }

    /// `n_t` for every `t` in `1..=T`.
    pub fn sizes(&self, n: usize) -> Result<Vec<usize>> {
        (1..=self.timesteps).map(|t| schedule_size(t, self.timesteps, n)).collect()
    }
}

/// `⌊N · sin(πt / 2T)⌋`.
///
/// The sine is rational at these angles only for `t = T` (1) and `3t = T`
/// (1/2); both are computed exactly so rounding in `sin` cannot drop a token.
pub fn schedule_size(t: usize, total: usize, n: usize) -> Result<usize> {
    if total == 0 || t == 0 || t > total {
        return Err(Error::validation(format!("timestep {t} outside 1..={total}")));
    }
    if t == total {
        return Ok(n);
    }
    if 3 * t == total {
        return Ok(n / 2);
    }
    let s = (PI * t as f64 / (2 * total) as f64).sin();
    Ok(((n as f64) * s).floor() as usize)
}

/// `log p + τ_mask · G` per position, with `G` drawn from the substream
/// `(mask-score, t, position)`.
pub fn stochastic_confidence(
    probabilities: &ConfidenceMap,
    mask_temperature: f64,
    rng: &RngState,
    t: usize,
) -> ScoreField {
    let values = probabilities
        .values()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let log_p = p.max(PROBABILITY_FLOOR).ln();
            if mask_temperature == 0.0 {
                log_p
            } else {
                let u = rng.substream(Stage::MaskScore, t as u64, i as u64).uniform_at(0);
                log_p + mask_temperature * gumbel_from_uniform(u, DEFAULT_EPSILON)
            }
        })
        .collect();
    ScoreField::new(probabilities.height(), probabilities.width(), values).expect("shape preserved")
}

/// Force previously masked positions to `+∞` and positions outside the
/// grounding mask to `−∞`.
pub fn constrain_scores(scores: &ScoreField, prev_mask: &GroundingMask, region: &GroundingMask) -> Result<ScoreField> {
    region.check_same_shape(prev_mask)?;
    if scores.shape() != region.shape() {
        return Err(Error::dims(
            format!("{}x{}", region.height(), region.width()),
            format!("{}x{}", scores.height(), scores.width()),
        ));
    }
    if !prev_mask.is_subset_of(region) {
        return Err(Error::validation("previous mask is not contained in the grounding mask"));
    }
    let values = scores
        .values()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if prev_mask.at(i) {
                f64::INFINITY
            } else if !region.at(i) {
                f64::NEG_INFINITY
            } else {
                s
            }
        })
        .collect();
    ScoreField::new(scores.height(), scores.width(), values)
}

/// Select the `n` highest scores (ties to the earlier row-major position).
/// Positions scored `−∞` are never eligible.
pub fn generate_mask(scores: &ScoreField, n: usize) -> Result<GroundingMask> {
    let mut eligible: Vec<usize> = (0..scores.values().len())
        .filter(|&i| scores.values()[i] > f64::NEG_INFINITY)
        .collect();
    if eligible.len() < n {
        return Err(Error::Infeasible(format!(
            "cannot mask {n} positions: only {} are eligible",
            eligible.len()
        )));
    }
    let v = scores.values();
    eligible.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).expect("scores are not NaN").then(a.cmp(&b)));
    Ok(GroundingMask::from_indices(
        scores.height(),
        scores.width(),
        eligible.into_iter().take(n),
    ))
}

/// `x ⊙ (1 − m) + k_mask · m`.
pub fn apply_mask(grid: &TokenGrid, mask: &GroundingMask) -> Result<TokenGrid> {
    mask.check_grid(grid)?;
    let k = grid.mask_token();
    let tokens = grid
        .tokens()
        .iter()
        .zip(mask.bits())
        .map(|(&t, &m)| if m { k } else { t })
        .collect();
    grid.with_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> u64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            s >> 33
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_size(64, 64, 100).unwrap(), 100);
        assert_eq!(schedule_size(32, 64, 100).unwrap(), 70);
        assert_eq!(schedule_size(1, 64, 100).unwrap(), 2);
        assert_eq!(schedule_size(1, 3, 100).unwrap(), 50);
        assert!(schedule_size(0, 4, 10).is_err());
        assert!(schedule_size(5, 4, 10).is_err());
        assert_eq!(ScheduleParams::default().sizes(0).unwrap(), vec![0; 64]);
    }

    #[test]
    fn stochastic_confidence_zero_noise() {
        let p = ConfidenceMap::new(2, 2, vec![0.1, 0.5, 1.0, 0.0]).unwrap();
        let s = stochastic_confidence(&p, 0.0, &RngState::from_seed(1), 3);
        assert_eq!(s.values()[0], 0.1f64.ln());
        assert_eq!(s.values()[2], 0.0);
        assert_eq!(s.values()[3], PROBABILITY_FLOOR.ln());
        let ones = ConfidenceMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert!(stochastic_confidence(&ones, 0.0, &RngState::from_seed(1), 1)
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn stochastic_confidence_repeatable() {
        let p = ConfidenceMap::new(3, 3, vec![0.3; 9]).unwrap();
        let r = RngState::from_seed(11);
        let a = stochastic_confidence(&p, 1.0, &r, 2);
        assert_eq!(a, stochastic_confidence(&p, 1.0, &r, 2));
        assert_ne!(a, stochastic_confidence(&p, 1.0, &r, 3));
    }

    #[test]
    fn constrain_trivial_cases() {
        let s = ScoreField::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let none = GroundingMask::empty(2, 2);
        assert_eq!(constrain_scores(&s, &none, &GroundingMask::full(2, 2)).unwrap(), s);
        let c = constrain_scores(&s, &none, &none).unwrap();
        assert!(c.values().iter().all(|&v| v == f64::NEG_INFINITY));
        let bad = GroundingMask::from_indices(2, 2, [0]);
        assert!(constrain_scores(&s, &bad, &none).is_err());
    }

    #[test]
    fn constrain_matches_three_way_oracle() {
        for seed in 0..10 {
            let mut r = lcg(seed);
            let region = GroundingMask::from_fn(4, 4, |_, _| r() % 3 != 0);
            let prev = GroundingMask::from_fn(4, 4, |y, x| region.get(y, x) && r() % 2 == 0);
            let raw: Vec<f64> = (0..16).map(|_| r() as f64 / 1e6).collect();
            let s = ScoreField::new(4, 4, raw.clone()).unwrap();
            let c = constrain_scores(&s, &prev, &region).unwrap();
            for i in 0..16 {
                let (y, x) = (i / 4, i % 4);
                let expected = if prev.get(y, x) {
                    f64::INFINITY
                } else if region.get(y, x) {
                    raw[i]
                } else {
                    f64::NEG_INFINITY
                };
                assert_eq!(c.values()[i], expected);
            }
        }
    }

    #[test]
    fn generate_mask_basics() {
        let s = ScoreField::new(2, 2, vec![f64::INFINITY, 0.5, f64::INFINITY, f64::NEG_INFINITY]).unwrap();
        assert!(generate_mask(&s, 0).unwrap().is_empty());
        assert_eq!(generate_mask(&s, 2).unwrap(), GroundingMask::from_indices(2, 2, [0, 2]));
        assert_eq!(generate_mask(&s, 3).unwrap().count(), 3);
        assert!(matches!(generate_mask(&s, 4), Err(Error::Infeasible(_))));
    }

    #[test]
    fn generate_mask_matches_sort_oracle_with_ties() {
        for seed in 0..20 {
            let mut r = lcg(seed);
            let raw: Vec<f64> = (0..36).map(|_| (r() % 5) as f64).collect();
            let s = ScoreField::new(6, 6, raw.clone()).unwrap();
            let n = (r() % 37) as usize;
            let m = generate_mask(&s, n).unwrap();
            // oracle: a position is selected iff fewer than n positions beat it
            // under (score desc, index asc)
            for i in 0..36 {
                let ahead = (0..36)
                    .filter(|&j| raw[j] > raw[i] || (raw[j] == raw[i] && j < i))
                    .count();
                assert_eq!(m.at(i), ahead < n, "seed {seed} i {i}");
            }
        }
    }

    #[test]
    fn apply_mask_select() {
        let g = TokenGrid::new(2, 3, 5, vec![0, 1, 2, 3, 4, 0]).unwrap();
        assert_eq!(apply_mask(&g, &GroundingMask::empty(2, 3)).unwrap(), g);
        let all = apply_mask(&g, &GroundingMask::full(2, 3)).unwrap();
        assert!(all.tokens().iter().all(|&t| t == 5));
        for seed in 0..10 {
            let mut r = lcg(seed);
            let m = GroundingMask::from_fn(2, 3, |_, _| r() % 2 == 0);
            let out = apply_mask(&g, &m).unwrap();
            for i in 0..6 {
                assert_eq!(out.tokens()[i], if m.at(i) { 5 } else { g.tokens()[i] });
            }
        }
        assert!(apply_mask(&g, &GroundingMask::empty(3, 2)).is_err());
    }
}
