//! Cosine-similarity region growing over pixel trajectories, pseudo-seed
//! extraction and iterative densification.
//!
//! Growth is a FIFO breadth-first expansion with 4-connectivity, neighbours
//! visited north, south, west, east. Seeds are claimed in input order and a
//! pixel keeps the first class that reaches it. A pixel joins when its
//! trajectory has cosine similarity strictly above `tau` with the trajectory
//! of the seed its region grew from.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, SparsePointSet, TimeSeriesCube, UNLABELED};
use crate::error::{Error, Result};

/// Neighbour offsets in visiting order: N, S, W, E.
pub const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowParams {
    pub tau: f64,
    pub confidence: f64,
    /// Chebyshev radius of growth around pseudo seeds.
    pub radius: usize,
}

impl Default for GrowParams {
    fn default() -> Self {
        Self {
            tau: 0.90,
            confidence: 0.95,
            radius: 16,
        }
    }
}

impl GrowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > -1.0 && self.tau <= 1.0) {
            return Err(Error::config(format!("tau {} outside (-1, 1]", self.tau)));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::config(format!(
                "confidence {} outside (0, 1)",
                self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedOrigin {
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seed {
    pub row: usize,
    pub col: usize,
    pub class: u8,
    /// Reference trajectory, `T * C`.
    pub profile: Vec<f32>,
    pub origin: SeedOrigin,
}

/// Cosine of the angle between two profiles; 0 when either has zero norm.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Pixel-major copy of every trajectory in a cube.
#[derive(Debug, Clone)]
pub struct ProfileTable {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl ProfileTable {
    pub fn new(cube: &TimeSeriesCube) -> Self {
        let (h, w, t_len, ch) = (cube.height(), cube.width(), cube.len_t(), cube.channels());
        let dim = t_len * ch;
        let mut data = vec![0.0f32; h * w * dim];
        for t in 0..t_len {
            let frame = cube.frame(t);
            for p in 0..h * w {
                data[p * dim + t * ch..p * dim + (t + 1) * ch]
                    .copy_from_slice(&frame[p * ch..(p + 1) * ch]);
            }
        }
        Self {
            height: h,
            width: w,
            dim,
            data,
        }
    }

    pub fn profile(&self, row: usize, col: usize) -> &[f32] {
        let p = row * self.width + col;
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// Ground-truth seeds carrying their own pixel trajectories, in point order.
pub fn seeds_from_points(points: &SparsePointSet, cube: &TimeSeriesCube) -> Result<Vec<Seed>> {
    if points.height() != cube.height() || points.width() != cube.width() {
        return Err(Error::Dimension {
            op: "seeds",
            lhs: vec![points.height(), points.width()],
            rhs: vec![cube.height(), cube.width()],
        });
    }
    Ok(points
        .points()
        .iter()
        .map(|p| Seed {
            row: p.row,
            col: p.col,
            class: p.class,
            profile: cube.profile(p.row, p.col),
            origin: SeedOrigin::GroundTruth,
        })
        .collect())
}

/// Claims seed pixels that are still unlabeled, then grows from them into
/// unlabeled pixels. `radius` bounds growth to a Chebyshev ball around each
/// pixel's originating seed.
fn grow_into(
    labels: &mut LabelMap,
    seeds: &[Seed],
    table: &ProfileTable,
    tau: f64,
    radius: Option<usize>,
) -> Result<()> {
    let (h, w) = (labels.height(), labels.width());
    let mut origin = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    for (i, s) in seeds.iter().enumerate() {
        if s.row >= h || s.col >= w {
            return Err(Error::config(format!(
                "seed ({}, {}) outside {h}x{w} canvas",
                s.row, s.col
            )));
        }
        if s.profile.len() != table.dim {
            return Err(Error::Length {
                expected: table.dim,
                found: s.profile.len(),
            });
        }
        if labels.is_labeled(s.row, s.col) {
            continue;
        }
        labels.set(s.row, s.col, s.class);
        origin[s.row * w + s.col] = i;
        queue.push_back((s.row, s.col));
    }
    while let Some((r, c)) = queue.pop_front() {
        let seed = &seeds[origin[r * w + c]];
        for (dr, dc) in NEIGHBOURS {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if labels.is_labeled(nr, nc) {
                continue;
            }
            if let Some(rad) = radius {
                if nr.abs_diff(seed.row) > rad || nc.abs_diff(seed.col) > rad {
                    continue;
                }
            }
            if cosine_similarity(table.profile(nr, nc), &seed.profile) > tau {
                labels.set(nr, nc, seed.class);
                origin[nr * w + nc] = origin[r * w + c];
                queue.push_back((nr, nc));
            }
        }
    }
    Ok(())
}

/// Grows every seed over the cube; unreached pixels stay unlabeled.
pub fn grow(seeds: &[Seed], cube: &TimeSeriesCube, tau: f64) -> Result<LabelMap> {
    grow_with_table(seeds, &ProfileTable::new(cube), tau)
}

pub fn grow_with_table(seeds: &[Seed], table: &ProfileTable, tau: f64) -> Result<LabelMap> {
    let mut labels = LabelMap::unlabeled(table.height, table.width);
    grow_into(&mut labels, seeds, table, tau, None)?;
    Ok(labels)
}

/// Arg-max class per pixel of a `H * W * K` probability buffer (first maximum wins).
pub fn argmax_map(probs: &[f32], height: usize, width: usize, classes: usize) -> LabelMap {
    let labels = probs
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::from_labels(height, width, labels).expect("probability buffer matches canvas")
}

/// Unlabeled pixels whose top class probability strictly exceeds
/// `confidence`, in raster order, with their own trajectories as profiles.
pub fn extract_pseudo_seeds(
    probs: &[f32],
    classes: usize,
    current: &LabelMap,
    table: &ProfileTable,
    confidence: f64,
) -> Vec<Seed> {
    let w = current.width();
    probs
        .chunks_exact(classes)
        .enumerate()
        .filter(|&(p, _)| current.labels()[p] == UNLABELED)
        .filter_map(|(p, row)| {
            let (k, &best) = row
                .iter()
                .enumerate()
                .reduce(|a, b| if b.1 > a.1 { b } else { a })?;
            (best as f64 > confidence).then(|| Seed {
                row: p / w,
                col: p % w,
                class: k as u8,
                profile: table.profile(p / w, p % w).to_vec(),
                origin: SeedOrigin::Pseudo,
            })
        })
        .collect()
}

/// Keeps candidates whose class is the arg-max of a strict majority of their
/// 3x3 window (the window shrinks at the canvas border).
pub fn neighborhood_filter(candidates: Vec<Seed>, argmax: &LabelMap) -> Vec<Seed> {
    let (h, w) = (argmax.height(), argmax.width());
    candidates
        .into_iter()
        .filter(|s| {
            let (mut agree, mut total) = (0usize, 0usize);
            for r in s.row.saturating_sub(1)..=(s.row + 1).min(h - 1) {
                for c in s.col.saturating_sub(1)..=(s.col + 1).min(w - 1) {
                    total += 1;
                    agree += usize::from(argmax.get(r, c) == s.class);
                }
            }
            2 * agree > total
        })
        .collect()
}

/// Next pseudo-label map: ground-truth growth, previous labels kept where
/// still unlabeled, then local growth from the pseudo seeds.
pub fn densify(
    prev: &LabelMap,
    gt_seeds: &[Seed],
    pseudo_seeds: &[Seed],
    table: &ProfileTable,
    tau: f64,
    radius: usize,
) -> Result<LabelMap> {
    let mut labels = grow_with_table(gt_seeds, table, tau)?;
    if prev.height() != labels.height() || prev.width() != labels.width() {
        return Err(Error::Dimension {
            op: "densify",
            lhs: vec![prev.height(), prev.width()],
            rhs: vec![labels.height(), labels.width()],
        });
    }
    for (dst, &src) in labels.labels_mut().iter_mut().zip(prev.labels()) {
        if *dst == UNLABELED {
            *dst = src;
        }
    }
    grow_into(&mut labels, pseudo_seeds, table, tau, Some(radius))?;
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Point;

    fn cube_from(h: usize, w: usize, profiles: &[Vec<f32>]) -> TimeSeriesCube {
        let t_len = profiles[0].len();
        let mut values = vec![0.0; t_len * h * w];
        for (p, prof) in profiles.iter().enumerate() {
            for t in 0..t_len {
                values[t * h * w + p] = prof[t];
            }
        }
        TimeSeriesCube::new((0..t_len as i32).collect(), h, w, 1, values).unwrap()
    }

    fn gt(cube: &TimeSeriesCube, pts: &[(usize, usize, u8)], k: usize) -> Vec<Seed> {
        let set = SparsePointSet::new(
            cube.height(),
            cube.width(),
            k,
            pts.iter()
                .map(|&(row, col, class)| Point { row, col, class })
                .collect(),
        )
        .unwrap();
        seeds_from_points(&set, cube).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let x = [0.3f32, 0.1, 0.7];
        assert!((cosine_similarity(&x, &x) - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&x, &[0.6, 0.2, 1.4]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn uniform_cube_fills_canvas() {
        let cube = cube_from(5, 6, &vec![vec![0.2, 0.4, 0.1]; 30]);
        let map = grow(&gt(&cube, &[(2, 3, 1)], 2), &cube, 0.5).unwrap();
        assert!(map.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn disconnected_blobs_do_not_leak() {
        // columns 0..3 trend up, column 3 is a barrier, 4..7 trend down
        let (h, w) = (4, 7);
        let profiles: Vec<Vec<f32>> = (0..h * w)
            .map(|p| match p % w {
                0..=2 => vec![0.1, 0.5, 0.9],
                3 => vec![0.9, 0.0, 0.0],
                _ => vec![0.9, 0.5, 0.1],
            })
            .collect();
        let cube = cube_from(h, w, &profiles);
        let map = grow(&gt(&cube, &[(0, 0, 0), (3, 6, 2)], 3), &cube, 0.95).unwrap();
        for r in 0..h {
            for c in 0..w {
                let expect = match c {
                    0..=2 => 0,
                    3 => UNLABELED,
                    _ => 2,
                };
                assert_eq!(map.get(r, c), expect);
            }
        }
    }

    #[test]
    fn first_claim_follows_seed_order() {
        let cube = cube_from(1, 3, &vec![vec![1.0, 1.0]; 3]);
        let map = grow(&gt(&cube, &[(0, 0, 0), (0, 2, 1)], 2), &cube, 0.5).unwrap();
        // both fronts reach the centre at level 1; seed 0 is dequeued first
        assert_eq!(map.labels(), &[0, 0, 1]);
    }

    #[test]
    fn out_of_bounds_seed_is_an_error() {
        let cube = cube_from(2, 2, &vec![vec![1.0]; 4]);
        let seed = Seed {
            row: 5,
            col: 0,
            class: 0,
            profile: vec![1.0],
            origin: SeedOrigin::GroundTruth,
        };
        assert!(grow(&[seed], &cube, 0.5).is_err());
    }

    fn probs(rows: &[[f32; 4]]) -> Vec<f32> {
        rows.iter().flatten().copied().collect()
    }

    #[test]
    fn pseudo_seed_extraction() {
        let cube = cube_from(1, 3, &vec![vec![1.0]; 3]);
        let table = ProfileTable::new(&cube);
        let empty = LabelMap::unlabeled(1, 3);
        let uniform = probs(&[[0.25; 4]; 3]);
        assert!(extract_pseudo_seeds(&uniform, 4, &empty, &table, 0.95).is_empty());
        let p = probs(&[[0.97, 0.01, 0.01, 0.01], [0.95, 0.05, 0.0, 0.0], [0.25; 4]]);
        let seeds = extract_pseudo_seeds(&p, 4, &empty, &table, 0.95);
        assert_eq!(seeds.len(), 1);
        assert_eq!((seeds[0].col, seeds[0].class), (0, 0));
        let mut labeled = empty.clone();
        labeled.set(0, 0, 2);
        assert!(extract_pseudo_seeds(&p, 4, &labeled, &table, 0.95).is_empty());
    }

    fn seed_at(row: usize, col: usize, class: u8) -> Seed {
        Seed {
            row,
            col,
            class,
            profile: vec![1.0],
            origin: SeedOrigin::Pseudo,
        }
    }

    #[test]
    fn filter_keeps_consistent_and_drops_isolated() {
        let mut am = LabelMap::from_labels(3, 3, vec![1; 9]).unwrap();
        assert_eq!(neighborhood_filter(vec![seed_at(1, 1, 1)], &am).len(), 1);
        am.labels_mut().fill(2);
        am.set(1, 1, 1);
        assert!(neighborhood_filter(vec![seed_at(1, 1, 1)], &am).is_empty());
    }

    #[test]
    fn filter_corner_window_majority() {
        // corner window {(0,0),(0,1),(1,0),(1,1)}, 3 of 4 agree
        let am = LabelMap::from_labels(3, 3, vec![1, 1, 0, 1, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(neighborhood_filter(vec![seed_at(0, 0, 1)], &am).len(), 1);
        // 2 of 4 is not a majority
        let am = LabelMap::from_labels(3, 3, vec![1, 1, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        assert!(neighborhood_filter(vec![seed_at(0, 0, 1)], &am).is_empty());
    }

    #[test]
    fn densify_without_pseudo_seeds_is_fixed_point() {
        let profiles: Vec<Vec<f32>> = (0..16)
            .map(|p| if p % 4 < 2 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let cube = cube_from(4, 4, &profiles);
        let table = ProfileTable::new(&cube);
        let seeds = gt(&cube, &[(0, 0, 0)], 2);
        let m0 = grow_with_table(&seeds, &table, 0.9).unwrap();
        let m1 = densify(&m0, &seeds, &[], &table, 0.9, 16).unwrap();
        assert_eq!(m0, m1);
        // a pseudo seed in the labeled region changes nothing
        let inside = Seed {
            row: 1,
            col: 1,
            class: 0,
            profile: vec![1.0, 0.0],
            origin: SeedOrigin::Pseudo,
        };
        assert_eq!(densify(&m0, &seeds, &[inside], &table, 0.9, 16).unwrap(), m0);
        // a pseudo seed in the other region grows within its radius only
        let other = Seed {
            row: 0,
            col: 3,
            class: 1,
            profile: vec![0.0, 1.0],
            origin: SeedOrigin::Pseudo,
        };
        let m2 = densify(&m0, &seeds, &[other], &table, 0.9, 1).unwrap();
        assert_eq!(m2.get(0, 2), 1);
        assert_eq!(m2.get(1, 3), 1);
        assert_eq!(m2.get(2, 3), UNLABELED);
        assert!(m2.labeled_count() > m0.labeled_count());
    }
}
