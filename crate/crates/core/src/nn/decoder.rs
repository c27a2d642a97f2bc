use super::{attend, Linear, ModelConfig, Norm};
use crate::data::Point;
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{sc, Scalar, Tensor};

/// 2-D sinusoidal embedding of a location normalised by the patch extent:
/// the first half encodes the row, the second half the column.
pub fn point_embedding(row: usize, col: usize, size: usize, d: usize, scale: f64) -> Vec<f64> {
    let half = d / 2;
    let mut e = vec![0.0; d];
    for (axis, coord) in [row, col].into_iter().enumerate() {
        let u = scale * coord as f64 / size.max(1) as f64;
        for i in 0..half / 2 {
            let angle = u / 10000f64.powf(2.0 * i as f64 / half as f64);
            e[axis * half + 2 * i] = angle.sin();
            e[axis * half + 2 * i + 1] = angle.cos();
        }
    }
    e
}

/// Class-aware point tokens pooled into a fixed set of context tokens by
/// learned latent queries.
#[derive(Debug, Clone)]
pub struct PromptPool {
    classes: ParamId,
    norm: Norm,
    latents: ParamId,
    key: Linear,
    value: Linear,
    proj: Linear,
    width: usize,
    scale: f64,
}

impl PromptPool {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        Self {
            classes: store.add("prompt.classes", &[cfg.num_classes, d], Init::Uniform(1.0), true),
            norm: Norm::new(store, "prompt.norm", d),
            latents: store.add("prompt.latents", &[cfg.latents, d], Init::Uniform(1.0), true),
            key: Linear::new(store, "prompt.key", d, d, false),
            value: Linear::new(store, "prompt.value", d, d, false),
            proj: Linear::new(store, "prompt.proj", d, cfg.fused_width(), false),
            width: d,
            scale: cfg.point_scale,
        }
    }

    /// One layer-normalised token per point, `[N, D]`; `None` without points.
    pub fn tokens<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, points: &[Point], size: usize) -> Result<Option<Var>> {
        if points.is_empty() {
            return Ok(None);
        }
        let d = self.width;
        let pos: Vec<F> = points
            .iter()
            .flat_map(|pt| point_embedding(pt.row, pt.col, size, d, self.scale))
            .map(sc)
            .collect();
        let pos = tape.constant(Tensor::new(vec![points.len(), d], pos)?);
        let idx: Vec<usize> = points.iter().map(|pt| pt.class as usize).collect();
        let cls = tape.gather_rows(p.var(self.classes), &idx)?;
        let sum = tape.add(pos, cls)?;
        Ok(Some(self.norm.forward(tape, p, sum)?))
    }

    /// Context tokens `[M, 2D]`: latents attend over the tokens, then the
    /// output projection. Without tokens the latents are projected directly.
    pub fn pool<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, tokens: Option<Var>) -> Result<Var> {
        let z = p.var(self.latents);
        let pooled = match tokens {
            None => z,
            Some(q) => {
                let k = self.key.forward(tape, p, q)?;
                let v = self.value.forward(tape, p, q)?;
                attend(tape, z, k, v)?
            }
        };
        self.proj.forward(tape, p, pooled)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: Norm,
    mlp1: Linear,
    mlp2: Linear,
}

/// Pre-norm cross-attention blocks: grid positions attend over the context
/// tokens, each sub-layer added residually with a zero-initialised output.
#[derive(Debug, Clone)]
pub struct Decoder {
    blocks: Vec<Block>,
}

impl Decoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Self {
        let d = cfg.fused_width();
        let blocks = (0..cfg.decoder_blocks)
            .map(|i| {
                let n = format!("decoder.{i}");
                Block {
                    norm1: Norm::new(store, &format!("{n}.norm1"), d),
                    query: Linear::new(store, &format!("{n}.query"), d, d, false),
                    key: Linear::new(store, &format!("{n}.key"), d, d, false),
                    value: Linear::new(store, &format!("{n}.value"), d, d, false),
                    out: Linear::new(store, &format!("{n}.out"), d, d, true),
                    norm2: Norm::new(store, &format!("{n}.norm2"), d),
                    mlp1: Linear::new(store, &format!("{n}.mlp1"), d, d, false),
                    mlp2: Linear::new(store, &format!("{n}.mlp2"), d, d, true),
                }
            })
            .collect();
        Self { blocks }
    }

    /// `fused: [P, 2D]`, `context: [M, 2D]` to `[P, 2D]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, fused: Var, context: Var) -> Result<Var> {
        let mut x = fused;
        for b in &self.blocks {
            let h = b.norm1.forward(tape, p, x)?;
            let q = b.query.forward(tape, p, h)?;
            let k = b.key.forward(tape, p, context)?;
            let v = b.value.forward(tape, p, context)?;
            let a = attend(tape, q, k, v)?;
            let a = b.out.forward(tape, p, a)?;
            x = tape.add(x, a)?;
            let h = b.norm2.forward(tape, p, x)?;
            let m = b.mlp1.forward(tape, p, h)?;
            let m = tape.relu(m);
            let m = b.mlp2.forward(tape, p, m)?;
            x = tape.add(x, m)?;
        }
        Ok(x)
    }
}

/// Independent temporal and spatial 1x1 classifiers.
#[derive(Debug, Clone)]
pub struct Heads {
    pub temporal: Linear,
    pub spatial: Linear,
}

impl Heads {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Self {
        let d = cfg.fused_width();
        Self {
            temporal: Linear::new(store, "head.temporal", d, cfg.num_classes, false),
            spatial: Linear::new(store, "head.spatial", d, cfg.num_classes, false),
        }
    }

    /// Full-resolution class probabilities `[(gh*s) * (gw*s), K]` from
    /// decoded features `[gh*gw, 2D]`: logits are upsampled bilinearly by
    /// `s`, then normalised.
    pub fn probabilities<F: Scalar>(
        tape: &mut Tape<F>,
        p: &Bound,
        head: &Linear,
        decoded: Var,
        grid: (usize, usize),
        s: usize,
    ) -> Result<Var> {
        let logits = head.forward(tape, p, decoded)?;
        let k = tape.value(logits).last_dim();
        let logits = tape.reshape(logits, &[grid.0, grid.1, k])?;
        let up = if s == 1 { logits } else { tape.upsample_bilinear(logits, s)? };
        let flat = tape.reshape(up, &[grid.0 * s * grid.1 * s, k])?;
        tape.softmax(flat, 1)
    }
}
