//! Synthetic wetland scenes whose classes differ in the phase of a seasonal
//! cycle. A smooth multiplicative gain field varies brightness across the
//! canvas, so a single date is ambiguous while the trajectory shape is not.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Point, SparsePointSet, TimeSeriesCube};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Truth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    /// Per-channel baseline reflectance.
    pub baseline: Vec<f64>,
    pub amplitude: f64,
    /// Radians.
    pub phase: f64,
    /// Chance per date that the whole class region is hit by an event.
    pub event_prob: f64,
    /// Additive reflectance change during an event.
    pub event_magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub timesteps: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub blobs_per_class: usize,
    pub blob_radius: f64,
    /// Amplitude of the smooth field that roughens blob boundaries.
    pub boundary_noise: f64,
    /// Smoothing length of that field, in pixels.
    pub boundary_scale: f64,
    pub noise_sigma: f64,
    pub gain_min: f64,
    pub gain_max: f64,
    /// Smoothing length of the gain field, in pixels.
    pub gain_scale: f64,
    /// Range of a per-blob gain applied on top of the field.
    pub blob_gain_min: f64,
    pub blob_gain_max: f64,
    pub points_per_class: usize,
    /// One entry per class; empty selects [`default_profiles`].
    pub profiles: Vec<ClassProfile>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            timesteps: 12,
            channels: 3,
            num_classes: 4,
            blobs_per_class: 2,
            blob_radius: 20.0,
            boundary_noise: 0.15,
            boundary_scale: 16.0,
            noise_sigma: 0.02,
            gain_min: 0.65,
            gain_max: 1.35,
            gain_scale: 20.0,
            blob_gain_min: 1.0,
            blob_gain_max: 1.0,
            points_per_class: 100,
            profiles: Vec::new(),
            seed: 0,
        }
    }
}

/// Equal baselines and amplitudes; phases evenly spaced around the cycle.
pub fn default_profiles(num_classes: usize, channels: usize) -> Vec<ClassProfile> {
    (0..num_classes)
        .map(|k| ClassProfile {
            baseline: vec![0.10; channels],
            amplitude: 0.04,
            phase: PI / 4.0 + 2.0 * PI * k as f64 / num_classes as f64,
            event_prob: 0.0,
            event_magnitude: 0.0,
        })
        .collect()
}

impl SceneConfig {
    pub fn resolved_profiles(&self) -> Vec<ClassProfile> {
        if self.profiles.is_empty() {
            default_profiles(self.num_classes, self.channels)
        } else {
            self.profiles.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 4 {
            return Err(Error::config(format!(
                "scene needs 1..=4 classes, got {}",
                self.num_classes
            )));
        }
        if self.height == 0 || self.width == 0 || self.timesteps == 0 || self.channels == 0 {
            return Err(Error::config("scene dimensions must be positive"));
        }
        if !self.profiles.is_empty() {
            if self.profiles.len() != self.num_classes {
                return Err(Error::config(format!(
                    "{} profiles for {} classes",
                    self.profiles.len(),
                    self.num_classes
                )));
            }
            if let Some(p) = self.profiles.iter().find(|p| p.baseline.len() != self.channels) {
                return Err(Error::config(format!(
                    "profile baseline has {} channels, scene has {}",
                    p.baseline.len(),
                    self.channels
                )));
            }
        }
        if self.blobs_per_class == 0 || self.blob_radius <= 0.0 {
            return Err(Error::config("need at least one blob of positive radius"));
        }
        let blob_area = (self.num_classes * self.blobs_per_class) as f64 * PI * self.blob_radius.powi(2);
        if 2.0 * self.blob_radius > self.height.min(self.width) as f64
            || blob_area > (self.height * self.width) as f64
        {
            return Err(Error::config(format!(
                "blob layout ({} x {} blobs of radius {}) exceeds the {}x{} canvas",
                self.num_classes, self.blobs_per_class, self.blob_radius, self.height, self.width
            )));
        }
        if !(self.noise_sigma >= 0.0)
            || !(self.gain_min > 0.0 && self.gain_min <= self.gain_max)
            || !(self.blob_gain_min > 0.0 && self.blob_gain_min <= self.blob_gain_max)
        {
            return Err(Error::config("invalid noise or gain range"));
        }
        if self.points_per_class == 0 {
            return Err(Error::config("points_per_class must be positive"));
        }
        Ok(())
    }
}

/// Generated cube with its dense truth and sampled annotations.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cube: TimeSeriesCube,
    pub truth: LabelMap,
    pub points: SparsePointSet,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// White noise blurred by a separable Gaussian (clamped edges), standardized.
fn smooth_field(h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<f64> = (0..h * w).map(|_| normal.sample(rng)).collect();
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * noise[y * w + clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / std);
    out
}

/// Class label and blob index (`class * blobs_per_class + blob`) per pixel.
fn layout(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<usize>) {
    let (h, w) = (cfg.height, cfg.width);
    let mut best = vec![f64::NEG_INFINITY; h * w];
    let mut labels = vec![0u8; h * w];
    let mut blobs = vec![0usize; h * w];
    let r2 = 2.0 * cfg.blob_radius * cfg.blob_radius;
    for k in 0..cfg.num_classes {
        let centers: Vec<(f64, f64)> = (0..cfg.blobs_per_class)
            .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
            .collect();
        let rough = smooth_field(h, w, cfg.boundary_scale, rng);
        for y in 0..h {
            for x in 0..w {
                let (blob, bump) = centers
                    .iter()
                    .map(|&(cy, cx)| (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / r2).exp())
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                let score = bump + cfg.boundary_noise * rough[y * w + x];
                if score > best[y * w + x] {
                    best[y * w + x] = score;
                    labels[y * w + x] = k as u8;
                    blobs[y * w + x] = k * cfg.blobs_per_class + blob;
                }
            }
        }
    }
    (labels, blobs)
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let profiles = cfg.resolved_profiles();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w, t_len, ch) = (cfg.height, cfg.width, cfg.timesteps, cfg.channels);
    let (labels, blobs) = layout(cfg, &mut rng);
    // every class gets the same evenly spaced gains, shuffled over its blobs
    let nb = cfg.blobs_per_class;
    let mut blob_gain = Vec::with_capacity(cfg.num_classes * nb);
    for _ in 0..cfg.num_classes {
        let mut levels: Vec<f64> = (0..nb)
            .map(|j| cfg.blob_gain_min + (cfg.blob_gain_max - cfg.blob_gain_min) * (j as f64 + 0.5) / nb as f64)
            .collect();
        levels.shuffle(&mut rng);
        blob_gain.extend(levels);
    }
    let gain: Vec<f64> = smooth_field(h, w, cfg.gain_scale, &mut rng)
        .into_iter()
        .zip(&blobs)
        .map(|(z, &b)| blob_gain[b] * (cfg.gain_min + (cfg.gain_max - cfg.gain_min) * 0.5 * (1.0 + z.tanh())))
        .collect();
    let events: Vec<Vec<bool>> = profiles
        .iter()
        .map(|p| (0..t_len).map(|_| rng.gen_bool(p.event_prob.clamp(0.0, 1.0))).collect())
        .collect();
    let normal = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut values = Vec::with_capacity(t_len * h * w * ch);
    for t in 0..t_len {
        let angle = 2.0 * PI * (t + 1) as f64 / t_len as f64;
        for (p, &k) in labels.iter().enumerate() {
            let prof = &profiles[k as usize];
            let season = prof.amplitude * (angle + prof.phase).sin();
            let event = if events[k as usize][t] { prof.event_magnitude } else { 0.0 };
            for c in 0..ch {
                let noise = if cfg.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                let v = gain[p] * (prof.baseline[c] + season) + event + noise;
                values.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let cube = TimeSeriesCube::new((1..=t_len as i32).collect(), h, w, ch, values)?;
    let truth = LabelMap::from_labels(h, w, labels)?;
    let mut points = Vec::new();
    for k in 0..cfg.num_classes {
        let pixels: Vec<usize> = (0..h * w).filter(|&p| truth.labels()[p] == k as u8).collect();
        if pixels.is_empty() {
            return Err(Error::config(format!("class {k} received no pixels in the layout")));
        }
        let n = cfg.points_per_class.min(pixels.len());
        for i in sample(&mut rng, pixels.len(), n) {
            let p = pixels[i];
            points.push(Point {
                row: p / w,
                col: p % w,
                class: k as u8,
            });
        }
    }
    points.sort();
    let points = SparsePointSet::new(h, w, cfg.num_classes, points)?;
    Ok(Scene { cube, truth, points })
}

/// Reassigns `floor(noise_ratio * N)` points to a uniformly drawn different class.
pub fn corrupt_labels(points: &SparsePointSet, noise_ratio: f64, seed: u64) -> Result<SparsePointSet> {
    if !(0.0..1.0).contains(&noise_ratio) {
        return Err(Error::config(format!("noise ratio {noise_ratio} outside [0, 1)")));
    }
    let n = (noise_ratio * points.len() as f64).floor() as usize;
    if n == 0 {
        return Ok(points.clone());
    }
    let k = points.num_classes();
    if k < 2 {
        return Err(Error::config("label noise needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = points.points().to_vec();
    for i in sample(&mut rng, pts.len(), n) {
        let draw = rng.gen_range(0..k - 1) as u8;
        pts[i].class = if draw >= pts[i].class { draw + 1 } else { draw };
    }
    points.with_points(pts)
}

/// Keeps `ceil(keep_ratio * N_class)` points of every class.
pub fn subsample_labels(points: &SparsePointSet, keep_ratio: f64, seed: u64) -> Result<SparsePointSet> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::config(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for k in 0..points.num_classes() {
        let members: Vec<Point> = points.points().iter().copied().filter(|p| p.class as usize == k).collect();
        if members.is_empty() {
            return Err(Error::config(format!("class {k} has no points to subsample")));
        }
        let n = ((keep_ratio * members.len() as f64).ceil() as usize).clamp(1, members.len());
        kept.extend(sample(&mut rng, members.len(), n).into_iter().map(|i| members[i]));
    }
    kept.sort();
    points.with_points(kept)
}

/// Macro-F1 of a nearest-centroid classifier over all truth pixels, using the
/// features observed at `times` (all channels). Centroids come from the truth.
pub fn nearest_centroid_f1(cube: &TimeSeriesCube, truth: &LabelMap, times: &[usize], num_classes: usize) -> Result<f64> {
    let (h, w, ch) = (cube.height(), cube.width(), cube.channels());
    let dim = times.len() * ch;
    let feature = |p: usize| -> Vec<f64> {
        times
            .iter()
            .flat_map(|&t| (0..ch).map(move |c| cube.get(t, p / w, p % w, c) as f64))
            .collect()
    };
    let mut centroids = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for p in 0..h * w {
        let k = truth.labels()[p] as usize;
        if k < num_classes {
            counts[k] += 1;
            for (acc, v) in centroids[k].iter_mut().zip(feature(p)) {
                *acc += v;
            }
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let mut pred = LabelMap::unlabeled(h, w);
    for p in 0..h * w {
        let f = feature(p);
        let best = (0..num_classes)
            .filter(|&k| counts[k] > 0)
            .map(|k| (k, centroids[k].iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        pred.labels_mut()[p] = best as u8;
    }
    Ok(evaluate(&pred, Truth::Dense(truth), num_classes)?.macro_f1)
}
