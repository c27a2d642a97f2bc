use super::{Decoder, Encoder, Heads, ModelConfig, PromptPool, Temporal};
use crate::data::{Point, TimeSeriesCube};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{sc, Scalar, Tensor};

/// Nodes produced by one forward pass over a patch.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// `[P, 2D]` temporal summary per grid position.
    pub fused: Var,
    /// `[P, 2D]` decoder output.
    pub decoded: Var,
    /// `[size * size, K]` probabilities of the temporal head.
    pub p_temp: Var,
    /// `[size * size, K]` probabilities of the spatial head.
    pub p_spat: Var,
}

/// The full network and its parameters.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    input_mean: ParamId,
    input_std: ParamId,
    pub encoder: Encoder,
    pub temporal: Temporal,
    pub prompt: PromptPool,
    pub decoder: Decoder,
    pub heads: Heads,
}

impl<F: Scalar> Model<F> {
    /// Builds a model for sequences of `t_len` timestamps. Trainable
    /// parameters are drawn from `seed`; the frozen encoder is fixed.
    pub fn new(cfg: ModelConfig, t_len: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let input_mean = store.add("input.mean", &[cfg.channels], Init::Zeros, false);
        let input_std = store.add("input.std", &[cfg.channels], Init::Ones, false);
        let encoder = Encoder::new(&mut store, &cfg);
        let temporal = Temporal::new(&mut store, &cfg, cfg.kernel_for(t_len));
        let prompt = PromptPool::new(&mut store, &cfg);
        let decoder = Decoder::new(&mut store, &cfg);
        let heads = Heads::new(&mut store, &cfg);
        Ok(Self {
            cfg,
            store,
            input_mean,
            input_std,
            encoder,
            temporal,
            prompt,
            decoder,
            heads,
        })
    }

    /// Sets the frozen per-channel input standardisation from valid cube entries.
    pub fn set_input_stats(&mut self, cube: &TimeSeriesCube) {
        let c = self.cfg.channels;
        let (mut sum, mut sq, mut n) = (vec![0.0f64; c], vec![0.0f64; c], 0usize);
        let pixels = cube.height() * cube.width();
        for t in 0..cube.len_t() {
            let frame = cube.frame(t);
            for p in 0..pixels {
                if !cube.validity()[t * pixels + p] {
                    continue;
                }
                n += 1;
                for ch in 0..c {
                    let v = frame[p * c + ch] as f64;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<F> = sum.iter().map(|s| sc(s / n)).collect();
        let std: Vec<F> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| sc((q / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-6)))
            .collect();
        self.store.get_mut(self.input_mean).tensor.data_mut().copy_from_slice(&mean);
        self.store.get_mut(self.input_std).tensor.data_mut().copy_from_slice(&std);
    }

    /// Standardised `[H, W, C]` image of frame `t`.
    fn image(&self, cube: &TimeSeriesCube, t: usize) -> Result<Tensor<F>> {
        let c = self.cfg.channels;
        if cube.channels() != c {
            return Err(Error::Dimension {
                op: "model input",
                lhs: vec![cube.height(), cube.width(), cube.channels()],
                rhs: vec![c],
            });
        }
        let mean = self.store.get(self.input_mean).tensor.data();
        let std = self.store.get(self.input_std).tensor.data();
        let data: Vec<F> = cube
            .frame(t)
            .iter()
            .enumerate()
            .map(|(i, &v)| (sc::<F>(v as f64) - mean[i % c]) / std[i % c])
            .collect();
        Tensor::new(vec![cube.height(), cube.width(), c], data)
    }

    /// Per-timestep adapted features with time embedding, each `[P, D]`.
    pub fn frames(&self, tape: &mut Tape<F>, p: &Bound, cube: &TimeSeriesCube) -> Result<Vec<Var>> {
        let mut frames = Vec::with_capacity(cube.len_t());
        for t in 0..cube.len_t() {
            let img = tape.constant(self.image(cube, t)?);
            let f = self.encoder.forward(tape, p, img)?;
            let s = tape.shape(f).to_vec();
            frames.push(tape.reshape(f, &[s[0] * s[1], s[2]])?);
        }
        Temporal::add_time(tape, &frames, cube.timestamps())
    }

    /// Full forward pass over a square patch with its local prompts.
    pub fn forward(&self, tape: &mut Tape<F>, p: &Bound, cube: &TimeSeriesCube, points: &[Point]) -> Result<ForwardOut> {
        let (h, w) = (cube.height(), cube.width());
        let s = ModelConfig::STRIDE;
        let frames = self.frames(tape, p, cube)?;
        let fused = self.temporal.forward(tape, p, &frames)?.fused;
        let tokens = self.prompt.tokens(tape, p, points, h.max(w))?;
        let context = self.prompt.pool(tape, p, tokens)?;
        let decoded = self.decoder.forward(tape, p, fused, context)?;
        let grid = (h / s, w / s);
        let p_temp = Heads::probabilities(tape, p, &self.heads.temporal, decoded, grid, s)?;
        let p_spat = Heads::probabilities(tape, p, &self.heads.spatial, decoded, grid, s)?;
        Ok(ForwardOut {
            fused,
            decoded,
            p_temp,
            p_spat,
        })
    }

    /// Inference without gradient bookkeeping: `(p_temp, p_spat)`, each
    /// `[H * W * K]` row-major.
    pub fn predict(&self, cube: &TimeSeriesCube, points: &[Point]) -> Result<(Vec<F>, Vec<F>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind_constants(&mut tape);
        let out = self.forward(&mut tape, &bound, cube, points)?;
        Ok((
            tape.value(out.p_temp).data().to_vec(),
            tape.value(out.p_spat).data().to_vec(),
        ))
    }
}
