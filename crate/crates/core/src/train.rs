//! Patching, splitting, augmentation and the training loop with periodic
//! pseudo-label refresh.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{LabelMap, Point, SparsePointSet, TimeSeriesCube, UNLABELED};
use crate::error::{Error, Result};
use crate::grow::{
    argmax_map, densify, extract_pseudo_seeds, grow_with_table, neighborhood_filter, seeds_from_points, ProfileTable,
    Seed,
};
use crate::losses::{alignment_mse, lovasz_softmax, point_ce, total_loss};
use crate::metrics::{evaluate, EvalReport, Truth};
use crate::nn::Model;
use crate::optim::{AdamW, AdamWConfig, StepOutcome};
use crate::tape::Tape;

/// One square tile of the canvas.
#[derive(Debug, Clone)]
pub struct Sample {
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
    /// Zero-padded and marked invalid beyond the canvas.
    pub cube: TimeSeriesCube,
    /// Points inside the tile, in tile coordinates.
    pub points: Vec<Point>,
}

impl Sample {
    /// The tile's slice of a canvas-sized label map.
    pub fn labels(&self, map: &LabelMap) -> LabelMap {
        map.window(self.row0, self.col0, self.size)
    }
}

/// Non-overlapping `patch × patch` tiles in raster order; the last row and
/// column of tiles are padded when the canvas is not a multiple of `patch`.
pub fn patchify(cube: &TimeSeriesCube, points: &[Point], patch: usize) -> Result<Vec<Sample>> {
    if patch == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    let (h, w) = (cube.height(), cube.width());
    let mut out = Vec::new();
    for row0 in (0..h).step_by(patch) {
        for col0 in (0..w).step_by(patch) {
            let local = points
                .iter()
                .filter(|p| (row0..row0 + patch).contains(&p.row) && (col0..col0 + patch).contains(&p.col))
                .map(|p| Point {
                    row: p.row - row0,
                    col: p.col - col0,
                    class: p.class,
                })
                .collect();
            out.push(Sample {
                row0,
                col0,
                size: patch,
                cube: cube.window(row0, col0, patch),
                points: local,
            });
        }
    }
    Ok(out)
}

/// Shuffles indices `0..n` with `seed` and cuts them at `round(ratio · n)`,
/// keeping at least one index on each side.
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::config(format!("need at least 2 patches to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(cut);
    Ok((idx, val))
}

/// Square symmetries used for augmentation. Time is never permuted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dihedral {
    Identity,
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
}

impl Dihedral {
    pub const ALL: [Dihedral; 6] = [
        Dihedral::Identity,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
    ];

    pub fn draw(rng: &mut impl Rng) -> Self {
        Self::ALL[rng.gen_range(0..Self::ALL.len())]
    }

    /// Destination of pixel `(r, c)` in a `p × p` tile. Rotations are clockwise.
    pub fn map(self, r: usize, c: usize, p: usize) -> (usize, usize) {
        match self {
            Dihedral::Identity => (r, c),
            Dihedral::FlipH => (r, p - 1 - c),
            Dihedral::FlipV => (p - 1 - r, c),
            Dihedral::Rot90 => (c, p - 1 - r),
            Dihedral::Rot180 => (p - 1 - r, p - 1 - c),
            Dihedral::Rot270 => (p - 1 - c, r),
        }
    }

    pub fn apply_cube(self, cube: &TimeSeriesCube) -> Result<TimeSeriesCube> {
        let p = cube.height();
        if cube.width() != p {
            return Err(Error::config("augmentation needs a square tile"));
        }
        let c = cube.channels();
        let mut values = vec![0.0; cube.values().len()];
        let mut valid = vec![false; cube.validity().len()];
        for t in 0..cube.len_t() {
            for r in 0..p {
                for col in 0..p {
                    let (dr, dc) = self.map(r, col, p);
                    let src = cube.index(t, r, col);
                    let dst = cube.index(t, dr, dc);
                    values[dst..dst + c].copy_from_slice(&cube.values()[src..src + c]);
                    valid[(t * p + dr) * p + dc] = cube.is_valid(t, r, col);
                }
            }
        }
        TimeSeriesCube::with_validity(cube.timestamps().to_vec(), p, p, c, values, valid)
    }

    pub fn apply_labels(self, map: &LabelMap) -> LabelMap {
        let p = map.height();
        let mut out = LabelMap::unlabeled(p, map.width());
        for r in 0..p {
            for c in 0..map.width() {
                let (dr, dc) = self.map(r, c, p);
                out.set(dr, dc, map.get(r, c));
            }
        }
        out
    }

    pub fn apply_points(self, points: &[Point], p: usize) -> Vec<Point> {
        points
            .iter()
            .map(|pt| {
                let (row, col) = self.map(pt.row, pt.col, p);
                Point { row, col, class: pt.class }
            })
            .collect()
    }
}

/// Mean losses of one epoch over samples with a finite total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_t: f64,
    pub l_s: f64,
    pub l_a: f64,
    pub l_total: f64,
    /// Pseudo-label map index used as spatial supervision.
    pub pseudo_iteration: usize,
    pub skipped_steps: u64,
    pub clipped_steps: u64,
    pub val_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    /// Epoch before which the map was built; 0 is the initial growth.
    pub epoch: usize,
    pub iteration: usize,
    pub pseudo_seeds: usize,
    pub labeled_fraction: f64,
    /// Agreement of labeled pixels with the dense truth, when known.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub config: Config,
    pub train_patches: Vec<(usize, usize)>,
    pub val_patches: Vec<(usize, usize)>,
    pub epochs: Vec<EpochRecord>,
    pub refreshes: Vec<RefreshRecord>,
    pub optimizer_steps: u64,
    pub validation: Option<EvalReport>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

pub struct TrainOutput {
    pub model: Model<f32>,
    pub manifest: RunManifest,
    /// Spatial supervision after the last refresh.
    pub pseudo_labels: LabelMap,
}

struct SampleResult {
    grads: Vec<Vec<f32>>,
    losses: [f64; 4],
}

/// `prompts` condition the decoder; `points` are the supervised targets.
fn sample_gradient(
    model: &Model<f32>,
    cube: &TimeSeriesCube,
    points: &[Point],
    prompts: &[Point],
    labels: &LabelMap,
    cfg: &Config,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, cube, prompts)?;
    let w = cube.width();
    let targets: Vec<(usize, u8)> = points.iter().map(|pt| (pt.row * w + pt.col, pt.class)).collect();
    let lt = point_ce(&mut tape, out.p_temp, &targets)?;
    let ls = lovasz_softmax(&mut tape, out.p_spat, labels.labels())?;
    let la = alignment_mse(&mut tape, out.p_temp, out.p_spat)?;
    let ls_w = tape.scale(ls, cfg.train.lambda_s as f32);
    let total = total_loss(&mut tape, lt, ls_w, la, cfg.train.lambda_a)?;
    let value = |v| tape.value(v).data()[0] as f64;
    let losses = [value(lt), value(ls), value(la), value(total)];
    tape.backward(total)?;
    Ok(SampleResult {
        grads: model.store.collect_grads(&tape, &p),
        losses,
    })
}

/// Temporal-head probabilities over the whole canvas, `[H * W * K]`.
pub fn predict_canvas(model: &Model<f32>, samples: &[Sample], height: usize, width: usize) -> Result<Vec<f32>> {
    let k = model.cfg.num_classes;
    let tiles: Vec<Vec<f32>> = samples
        .par_iter()
        .map(|s| model.predict(&s.cube, &s.points).map(|(pt, _)| pt))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0f32; height * width * k];
    for (s, probs) in samples.iter().zip(&tiles) {
        stitch(&mut out, probs, s, height, width, k);
    }
    Ok(out)
}

fn stitch(canvas: &mut [f32], tile: &[f32], s: &Sample, height: usize, width: usize, k: usize) {
    for r in 0..s.size.min(height - s.row0) {
        let rows = s.size.min(width - s.col0);
        let src = r * s.size * k;
        let dst = ((s.row0 + r) * width + s.col0) * k;
        canvas[dst..dst + rows * k].copy_from_slice(&tile[src..src + rows * k]);
    }
}

/// Fraction of labeled pixels whose label matches `truth`.
pub fn label_precision(map: &LabelMap, truth: &LabelMap) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (&a, &b) in map.labels().iter().zip(truth.labels()) {
        if a != UNLABELED && b != UNLABELED {
            n += 1;
            hit += usize::from(a == b);
        }
    }
    if n == 0 {
        1.0
    } else {
        hit as f64 / n as f64
    }
}

struct Refresher<'a> {
    table: ProfileTable,
    gt_seeds: Vec<Seed>,
    cfg: &'a Config,
}

impl Refresher<'_> {
    fn initial(&self) -> Result<LabelMap> {
        grow_with_table(&self.gt_seeds, &self.table, self.cfg.grow.tau)
    }

    /// Returns the next map and the number of pseudo seeds that survived filtering.
    fn refresh(&self, prev: &LabelMap, probs: &[f32], k: usize) -> Result<(LabelMap, usize)> {
        let g = &self.cfg.grow;
        let candidates = extract_pseudo_seeds(probs, k, prev, &self.table, g.confidence);
        let argmax = argmax_map(probs, prev.height(), prev.width(), k);
        let seeds = neighborhood_filter(candidates, &argmax);
        let next = densify(prev, &self.gt_seeds, &seeds, &self.table, g.tau, g.radius)?;
        Ok((next, seeds.len()))
    }
}

/// Scores held-out tiles, predicted without prompts, against `truth` or
/// else against the points that fall inside them.
fn validation_report(
    model: &Model<f32>,
    samples: &[Sample],
    val: &[usize],
    points: &SparsePointSet,
    truth: Option<&LabelMap>,
    height: usize,
    width: usize,
) -> Result<EvalReport> {
    let k = model.cfg.num_classes;
    let subset: Vec<Sample> = val.iter().map(|&i| samples[i].clone()).collect();
    let tiles: Vec<Vec<f32>> = subset
        .par_iter()
        .map(|s| model.predict(&s.cube, &[]).map(|(pt, _)| pt))
        .collect::<Result<_>>()?;
    let mut pred = LabelMap::unlabeled(height, width);
    let mut inside = vec![false; height * width];
    for (s, probs) in subset.iter().zip(&tiles) {
        let tile = argmax_map(probs, s.size, s.size, k);
        for r in 0..s.size.min(height - s.row0) {
            for c in 0..s.size.min(width - s.col0) {
                pred.set(s.row0 + r, s.col0 + c, tile.get(r, c));
                inside[(s.row0 + r) * width + s.col0 + c] = true;
            }
        }
    }
    match truth {
        Some(t) => {
            let mut masked = t.clone();
            for (l, &keep) in masked.labels_mut().iter_mut().zip(&inside) {
                if !keep {
                    *l = UNLABELED;
                }
            }
            evaluate(&pred, Truth::Dense(&masked), k)
        }
        None => {
            let kept: Vec<Point> = points
                .points()
                .iter()
                .filter(|p| inside[p.row * width + p.col])
                .copied()
                .collect();
            evaluate(&pred, Truth::Points(&points.with_points(kept)?), k)
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains a model on `cube` with point supervision. `truth`, when given,
/// is used only for validation scores and pseudo-label precision.
pub fn train(
    cfg: &Config,
    cube: &TimeSeriesCube,
    points: &SparsePointSet,
    truth: Option<&LabelMap>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cube.channels() != cfg.model.channels {
        return Err(Error::config(format!(
            "cube has {} channels, model expects {}",
            cube.channels(),
            cfg.model.channels
        )));
    }
    if points.num_classes() > cfg.model.num_classes {
        return Err(Error::config(format!(
            "points use {} classes, model has {}",
            points.num_classes(),
            cfg.model.num_classes
        )));
    }
    if points.height() != cube.height() || points.width() != cube.width() {
        return Err(Error::config("points and cube cover different canvases"));
    }
    let threads = if cfg.train.deterministic { 1 } else { cfg.train.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    pool.install(|| train_inner(cfg, cube, points, truth))
}

fn train_inner(
    cfg: &Config,
    cube: &TimeSeriesCube,
    points: &SparsePointSet,
    truth: Option<&LabelMap>,
) -> Result<TrainOutput> {
    let tc = &cfg.train;
    let (h, w) = (cube.height(), cube.width());
    let k = cfg.model.num_classes;
    let mut model = Model::<f32>::new(cfg.model, cube.len_t(), tc.seed)?;
    model.set_input_stats(cube);

    // points inside held-out tiles are never seen by training
    let all_samples = patchify(cube, points.points(), tc.patch_size)?;
    let (train_idx, val_idx) = split(all_samples.len(), tc.split, tc.seed)?;
    let train_points = points.with_points(
        train_idx
            .iter()
            .flat_map(|&i| {
                let s = &all_samples[i];
                s.points.iter().map(move |p| Point {
                    row: p.row + s.row0,
                    col: p.col + s.col0,
                    class: p.class,
                })
            })
            .collect(),
    )?;
    let samples = patchify(cube, train_points.points(), tc.patch_size)?;

    let refresher = Refresher {
        table: ProfileTable::new(cube),
        gt_seeds: seeds_from_points(&train_points, cube)?,
        cfg,
    };
    let mut pseudo = refresher.initial()?;
    let mut iteration = 0usize;
    let mut refreshes = vec![RefreshRecord {
        epoch: 0,
        iteration,
        pseudo_seeds: 0,
        labeled_fraction: pseudo.labeled_fraction(),
        precision: truth.map(|t| label_precision(&pseudo, t)),
    }];

    let mut opt = AdamW::new(
        AdamWConfig {
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            clip_norm: (tc.clip_norm > 0.0).then_some(tc.clip_norm),
            ..AdamWConfig::default()
        },
        &model.store,
    );

    let mut epochs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        if tc.densify && epoch > 0 && epoch % tc.refresh_k == 0 {
            let probs = predict_canvas(&model, &samples, h, w)?;
            let (next, n_seeds) = refresher.refresh(&pseudo, &probs, k)?;
            pseudo = next;
            iteration += 1;
            refreshes.push(RefreshRecord {
                epoch,
                iteration,
                pseudo_seeds: n_seeds,
                labeled_fraction: pseudo.labeled_fraction(),
                precision: truth.map(|t| label_precision(&pseudo, t)),
            });
        }

        let mut rng = epoch_rng(tc.seed, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let transforms: Vec<(Dihedral, bool)> = order
            .iter()
            .map(|_| {
                let t = if tc.augment { Dihedral::draw(&mut rng) } else { Dihedral::Identity };
                (t, tc.prompt_dropout > 0.0 && rng.gen_bool(tc.prompt_dropout))
            })
            .collect();
        let (skipped0, clipped0) = (opt.skipped(), opt.clipped());
        let mut sums = [0.0f64; 4];
        let mut finite = 0usize;
        for (batch, tf) in order.chunks(tc.batch).zip(transforms.chunks(tc.batch)) {
            let results: Vec<SampleResult> = batch
                .par_iter()
                .zip(tf)
                .map(|(&i, &(t, hide))| {
                    let s = &samples[i];
                    let c = t.apply_cube(&s.cube)?;
                    let pts = t.apply_points(&s.points, s.size);
                    let labels = t.apply_labels(&s.labels(&pseudo));
                    let prompts: &[Point] = if hide { &[] } else { &pts };
                    sample_gradient(&model, &c, &pts, prompts, &labels, cfg)
                })
                .collect::<Result<_>>()?;
            let mut grads: Vec<Vec<f32>> = results[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
            let scale = 1.0 / results.len() as f32;
            for r in &results {
                if r.losses[3].is_finite() {
                    finite += 1;
                    sums.iter_mut().zip(&r.losses).for_each(|(s, l)| *s += l);
                }
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
                }
            }
            if let StepOutcome::Applied { clipped: true, grad_norm } = opt.step(&mut model.store, &grads) {
                log::debug!("epoch {epoch}: gradient norm {grad_norm:.3} clipped");
            }
        }
        if finite == 0 && !order.is_empty() {
            return Err(Error::Divergence(format!("every loss in epoch {epoch} was non-finite")));
        }
        let n = finite.max(1) as f64;
        let val_macro_f1 = if tc.val_every > 0 && (epoch + 1) % tc.val_every == 0 {
            Some(validation_report(&model, &samples, &val_idx, points, truth, h, w)?.macro_f1)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            l_t: sums[0] / n,
            l_s: sums[1] / n,
            l_a: sums[2] / n,
            l_total: sums[3] / n,
            pseudo_iteration: iteration,
            skipped_steps: opt.skipped() - skipped0,
            clipped_steps: opt.clipped() - clipped0,
            val_macro_f1,
        };
        log::info!(
            "epoch {epoch}: L_t {:.4} L_s {:.4} L_a {:.4} total {:.4}{}",
            record.l_t,
            record.l_s,
            record.l_a,
            record.l_total,
            val_macro_f1.map(|f| format!(" val F1 {f:.4}")).unwrap_or_default()
        );
        epochs.push(record);
    }

    let validation = Some(validation_report(&model, &samples, &val_idx, points, truth, h, w)?);
    let origin = |i: &usize| (samples[*i].row0, samples[*i].col0);
    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: tc.seed,
        config: cfg.clone(),
        train_patches: train_idx.iter().map(origin).collect(),
        val_patches: val_idx.iter().map(origin).collect(),
        epochs,
        refreshes,
        optimizer_steps: opt.steps(),
        validation,
    };
    Ok(TrainOutput {
        model,
        manifest,
        pseudo_labels: pseudo,
    })
}

/// Temporal-head probabilities and arg-max labels for a whole cube, tiled
/// like training. `points` are optional prompts; pass none for unseen areas.
pub fn predict(model: &Model<f32>, cube: &TimeSeriesCube, points: &[Point], patch: usize) -> Result<(LabelMap, Vec<f32>)> {
    let samples = patchify(cube, points, patch)?;
    let probs = predict_canvas(model, &samples, cube.height(), cube.width())?;
    let labels = argmax_map(&probs, cube.height(), cube.width(), model.cfg.num_classes);
    Ok((labels, probs))
}
