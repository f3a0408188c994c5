//! Prompt-driven grounding on token grids and attention-guided point
//! extraction.
//!
//! The grounder treats each token id as a concept class and works on
//! 4-connected components of equal tokens. Any segmentation backend with the
//! same `(grid, prompt) -> mask` signature can replace it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionStack, Denoiser, Timestep};
use crate::error::{Error, Result};
use crate::types::{Conditioning, GroundingMask, Pos, TokenGrid};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SpatialPrompt {
    Point {
        point: [usize; 2],
    },
    /// Inclusive corners `[y0, x0, y1, x1]`.
    Box {
        #[serde(rename = "box")]
        bounds: [usize; 4],
    },
    Text {
        concept: Vec<u32>,
    },
}

impl SpatialPrompt {
    pub fn point(y: usize, x: usize) -> Self {
        SpatialPrompt::Point { point: [y, x] }
    }

    pub fn bbox(y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        SpatialPrompt::Box {
            bounds: [y0, x0, y1, x1],
        }
    }

    pub fn text(concept: Vec<u32>) -> Self {
        SpatialPrompt::Text { concept }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        match self {
            SpatialPrompt::Point { point: [y, x] } => {
                if *y >= height || *x >= width {
                    return Err(Error::OutOfBounds(format!(
                        "point ({y}, {x}) outside {height}x{width} grid"
                    )));
                }
            }
            SpatialPrompt::Box {
                bounds: [y0, x0, y1, x1],
            } => {
                if y0 > y1 || x0 > x1 {
                    return Err(Error::validation(format!("box corners out of order: [{y0}, {x0}, {y1}, {x1}]")));
                }
                if *y1 >= height || *x1 >= width {
                    return Err(Error::OutOfBounds(format!(
                        "box corner ({y1}, {x1}) outside {height}x{width} grid"
                    )));
                }
            }
            SpatialPrompt::Text { .. } => {}
        }
        Ok(())
    }
}

/// 4-connected labelling of equal-token regions. Labels are assigned in
/// row-major order of each component's first pixel.
pub struct Components {
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    pub tokens: Vec<u32>,
}

pub fn label_components(grid: &TokenGrid) -> Components {
    let (h, w) = grid.shape();
    let mut labels = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut tokens = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if labels[start] != usize::MAX {
            continue;
        }
        let label = sizes.len();
        let token = grid.tokens()[start];
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let neighbours = [
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
            ];
            for j in neighbours.into_iter().flatten() {
                if labels[j] == usize::MAX && grid.tokens()[j] == token {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
        tokens.push(token);
    }
    Components { labels, sizes, tokens }
}

/// `M = G(grid, prompt)`.
///
/// * point: the component containing the point;
/// * box: every component with a strict majority of its pixels in the box;
/// * text: every position whose token is in the concept set.
pub fn ground(grid: &TokenGrid, prompt: &SpatialPrompt) -> Result<GroundingMask> {
    let (h, w) = grid.shape();
    prompt.validate(h, w)?;
    let mask = match prompt {
        SpatialPrompt::Point { point: [y, x] } => {
            let comps = label_components(grid);
            let label = comps.labels[y * w + x];
            GroundingMask::from_indices(h, w, (0..h * w).filter(|&i| comps.labels[i] == label))
        }
        SpatialPrompt::Box {
            bounds: [y0, x0, y1, x1],
        } => {
            let comps = label_components(grid);
            let mut inside = vec![0usize; comps.sizes.len()];
            for y in *y0..=*y1 {
                for x in *x0..=*x1 {
                    inside[comps.labels[y * w + x]] += 1;
                }
            }
            let keep: Vec<bool> = inside.iter().zip(&comps.sizes).map(|(&a, &s)| 2 * a > s).collect();
            GroundingMask::from_indices(h, w, (0..h * w).filter(|&i| keep[comps.labels[i]]))
        }
        SpatialPrompt::Text { concept } => {
            GroundingMask::from_indices(h, w, (0..h * w).filter(|&i| concept.contains(&grid.tokens()[i])))
        }
    };
    Ok(mask)
}

/// Real-valued H×W map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// `H = (1/LK) Σ A^(l,k)`.
pub fn attention_heatmap(stack: &AttentionStack) -> Result<Heatmap> {
    if stack.is_empty() {
        return Err(Error::validation("attention stack is empty"));
    }
    let n = stack.height() * stack.width();
    let mut values = vec![0.0; n];
    for map in stack.maps() {
        for (acc, v) in values.iter_mut().zip(map) {
            *acc += v;
        }
    }
    let count = stack.len() as f64;
    values.iter_mut().for_each(|v| *v /= count);
    Ok(Heatmap {
        height: stack.height(),
        width: stack.width(),
        values,
    })
}

/// The `k` highest-valued positions, largest first, ties in row-major order.
pub fn top_k_points(heatmap: &Heatmap, k: usize) -> Result<Vec<Pos>> {
    let n = heatmap.values.len();
    if k == 0 || k > n {
        return Err(Error::validation(format!("k = {k} must lie in 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let v = &heatmap.values;
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| (i / heatmap.width, i % heatmap.width))
        .collect())
}

/// Attention-guided grounding: average the denoiser's attention to `cond`,
/// take the top-`k` points and ground each as a point prompt.
pub fn ground_by_attention(
    grid: &TokenGrid,
    cond: &Conditioning,
    denoiser: &dyn Denoiser,
    k: usize,
) -> Result<GroundingMask> {
    let stack = denoiser.predict_attention(grid, cond, Timestep::new(1, 1)?)?;
    let heat = attention_heatmap(&stack)?;
    let mut mask = GroundingMask::empty(grid.height(), grid.width());
    for (y, x) in top_k_points(&heat, k)? {
        mask = mask.or(&ground(grid, &SpatialPrompt::point(y, x))?)?;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserSpec;

    /// 12×12 background 0 with a 3×3 blob of 5 at (1,1) and a 2×4 blob of 5
    /// at (7,6).
    fn two_blobs() -> TokenGrid {
        let mut t = vec![0u32; 144];
        for y in 1..4 {
            for x in 1..4 {
                t[y * 12 + x] = 5;
            }
        }
        for y in 7..9 {
            for x in 6..10 {
                t[y * 12 + x] = 5;
            }
        }
        TokenGrid::new(12, 12, 8, t).unwrap()
    }

    /// Independent flood fill from a seed, by repeated relaxation.
    fn flood_oracle(grid: &TokenGrid, seed: (usize, usize)) -> GroundingMask {
        let (h, w) = grid.shape();
        let target = grid.get(seed.0, seed.1);
        let mut m = vec![false; h * w];
        m[seed.0 * w + seed.1] = true;
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    if m[y * w + x] || grid.get(y, x) != target {
                        continue;
                    }
                    let near = (y > 0 && m[(y - 1) * w + x])
                        || (y + 1 < h && m[(y + 1) * w + x])
                        || (x > 0 && m[y * w + x - 1])
                        || (x + 1 < w && m[y * w + x + 1]);
                    if near {
                        m[y * w + x] = true;
                        changed = true;
                    }
                }
            }
            if !changed {
                return GroundingMask::new(h, w, m).unwrap();
            }
        }
    }

    #[test]
    fn singleton_point() {
        let mut t = vec![0u32; 9];
        t[4] = 3;
        let g = TokenGrid::new(3, 3, 4, t).unwrap();
        assert_eq!(
            ground(&g, &SpatialPrompt::point(1, 1)).unwrap(),
            GroundingMask::from_indices(3, 3, [4])
        );
    }

    #[test]
    fn absent_concept() {
        let g = two_blobs();
        assert!(ground(&g, &SpatialPrompt::text(vec![7])).unwrap().is_empty());
        assert_eq!(ground(&g, &SpatialPrompt::text(vec![5])).unwrap().count(), 17);
    }

    #[test]
    fn box_selects_one_blob() {
        let g = two_blobs();
        let m = ground(&g, &SpatialPrompt::bbox(0, 0, 4, 4)).unwrap();
        assert_eq!(m, flood_oracle(&g, (2, 2)));
        let m = ground(&g, &SpatialPrompt::bbox(7, 6, 8, 9)).unwrap();
        assert_eq!(m, flood_oracle(&g, (7, 6)));
    }

    #[test]
    fn point_matches_flood_oracle() {
        let g = two_blobs();
        for (y, x) in [(2, 2), (8, 9), (0, 0), (5, 5)] {
            let m = ground(&g, &SpatialPrompt::point(y, x)).unwrap();
            assert!(m.get(y, x));
            assert_eq!(m, flood_oracle(&g, (y, x)));
        }
    }

    #[test]
    fn out_of_bounds_prompts() {
        let g = two_blobs();
        assert!(matches!(ground(&g, &SpatialPrompt::point(12, 0)), Err(Error::OutOfBounds(_))));
        assert!(ground(&g, &SpatialPrompt::bbox(0, 0, 3, 12)).is_err());
        assert!(ground(&g, &SpatialPrompt::bbox(3, 0, 2, 1)).is_err());
    }

    #[test]
    fn prompt_json_shapes() {
        let p: SpatialPrompt = serde_json::from_str(r#"{"kind":"box","box":[0,1,2,3]}"#).unwrap();
        assert_eq!(p, SpatialPrompt::bbox(0, 1, 2, 3));
        let p: SpatialPrompt = serde_json::from_str(r#"{"kind":"point","point":[4,5]}"#).unwrap();
        assert_eq!(p, SpatialPrompt::point(4, 5));
        let p: SpatialPrompt = serde_json::from_str(r#"{"kind":"text","concept":[1,2]}"#).unwrap();
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"kind":"text","concept":[1,2]}"#);
    }

    #[test]
    fn heatmap_means() {
        let single = AttentionStack::new(1, 2, vec![vec![0.25, 3.0]]).unwrap();
        assert_eq!(attention_heatmap(&single).unwrap().values, vec![0.25, 3.0]);
        let two = AttentionStack::new(2, 2, vec![vec![0.0, 1.0, 1.0, 0.0], vec![2.0, 1.0, 1.0, 2.0]]).unwrap();
        assert_eq!(attention_heatmap(&two).unwrap().values, vec![1.0; 4]);
        assert!(attention_heatmap(&AttentionStack::new(1, 1, vec![]).unwrap()).is_err());
    }

    #[test]
    fn heatmap_matches_accumulation_oracle() {
        let r = crate::rng::RngState::from_seed(4);
        let maps: Vec<Vec<f64>> = (0..12).map(|k| r.substream(crate::rng::Stage::General, k, 0).uniform(20)).collect();
        let stack = AttentionStack::new(4, 5, maps.clone()).unwrap();
        let h = attention_heatmap(&stack).unwrap();
        for p in 0..20 {
            let mut s = 0.0;
            for l in 0..3 {
                for k in 0..4 {
                    s += maps[l * 4 + k][p];
                }
            }
            assert!((h.values[p] - s / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_examples() {
        let h = Heatmap {
            height: 2,
            width: 2,
            values: vec![0.0, 3.0, 2.0, 1.0],
        };
        assert_eq!(top_k_points(&h, 1).unwrap(), vec![(0, 1)]);
        let flat = Heatmap {
            height: 2,
            width: 2,
            values: vec![1.0; 4],
        };
        assert_eq!(top_k_points(&flat, 2).unwrap(), vec![(0, 0), (0, 1)]);
        assert!(top_k_points(&flat, 5).is_err());
        assert!(top_k_points(&flat, 0).is_err());
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let r = crate::rng::RngState::from_seed(10);
        let values: Vec<f64> = (0..100).map(|i| (r.below_at(i, 7)) as f64).collect();
        let h = Heatmap {
            height: 10,
            width: 10,
            values: values.clone(),
        };
        let got = top_k_points(&h, 5).unwrap();
        let mut pairs: Vec<(i64, usize)> = values.iter().enumerate().map(|(i, v)| (-(*v as i64), i)).collect();
        pairs.sort();
        let want: Vec<Pos> = pairs[..5].iter().map(|&(_, i)| (i / 10, i % 10)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn attention_grounding_finds_concept_blob() {
        let g = two_blobs();
        let den = DenoiserSpec::local_hash(8, 1);
        let m = ground_by_attention(&g, &Conditioning::target(vec![5]), &den, 1).unwrap();
        assert_eq!(m, flood_oracle(&g, (1, 1)));
    }
}
