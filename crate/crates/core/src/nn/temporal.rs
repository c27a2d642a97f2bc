use super::{Linear, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{sc, Scalar, Tensor};

/// Sinusoidal embedding: component `2i` is `sin(t / 10000^(2i/d))`,
/// component `2i + 1` the matching cosine.
pub fn time_embedding(t: f64, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::config(format!("time embedding width {d} must be even")));
    }
    let mut e = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = t / 10000f64.powf(2.0 * i as f64 / d as f64);
        e[2 * i] = angle.sin();
        e[2 * i + 1] = angle.cos();
    }
    Ok(e)
}

/// Trend/event decomposition of a per-position feature sequence, a GRU over
/// the trend and query attention over the residual.
#[derive(Debug, Clone)]
pub struct Temporal {
    smooth: ParamId,
    kernel: usize,
    wz: Linear,
    wr: Linear,
    wh: Linear,
    uz: ParamId,
    ur: ParamId,
    uh: ParamId,
    key: Linear,
    value: Linear,
    queries: ParamId,
    heads: usize,
}

/// Intermediate products of [`Temporal::forward`].
#[derive(Debug, Clone, Copy)]
pub struct TemporalOut {
    pub trend: Var,
    pub events: Var,
    pub f_low: Var,
    pub f_high: Var,
    pub fused: Var,
}

impl Temporal {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig, kernel: usize) -> Self {
        let d = cfg.width;
        let rec = |store: &mut ParamStore<F>, n: &str| {
            store.add(
                &format!("temporal.gru.{n}"),
                &[d, d],
                Init::Glorot { fan_in: d, fan_out: d },
                true,
            )
        };
        let smooth = store.add(
            "temporal.smooth",
            &[kernel, d],
            Init::Constant(1.0 / kernel as f64),
            true,
        );
        let wz = Linear::new(store, "temporal.gru.wz", d, d, false);
        let wr = Linear::new(store, "temporal.gru.wr", d, d, false);
        let wh = Linear::new(store, "temporal.gru.wh", d, d, false);
        let (uz, ur, uh) = (rec(store, "uz"), rec(store, "ur"), rec(store, "uh"));
        let dk = d / cfg.heads;
        Self {
            smooth,
            kernel,
            wz,
            wr,
            wh,
            uz,
            ur,
            uh,
            key: Linear::new(store, "temporal.event.key", d, d, false),
            value: Linear::new(store, "temporal.event.value", d, d, false),
            queries: store.add(
                "temporal.event.queries",
                &[cfg.heads, dk],
                Init::Glorot {
                    fan_in: dk,
                    fan_out: cfg.heads,
                },
                true,
            ),
            heads: cfg.heads,
        }
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// Adds `E_t` to every row of each `[P, D]` frame.
    pub fn add_time<F: Scalar>(tape: &mut Tape<F>, frames: &[Var], timestamps: &[i32]) -> Result<Vec<Var>> {
        if frames.len() != timestamps.len() {
            return Err(Error::Length {
                expected: timestamps.len(),
                found: frames.len(),
            });
        }
        frames
            .iter()
            .zip(timestamps)
            .map(|(&f, &t)| {
                let d = tape.value(f).last_dim();
                let e: Vec<F> = time_embedding(t as f64, d)?.into_iter().map(sc).collect();
                let e = tape.constant(Tensor::new(vec![d], e)?);
                tape.add_row(f, e)
            })
            .collect()
    }

    /// Splits `seq: [P, T, D]` into smoothed trend and residual.
    pub fn decompose<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, seq: Var) -> Result<(Var, Var)> {
        let trend = tape.depthwise_conv1d(seq, p.var(self.smooth))?;
        let events = tape.sub(seq, trend)?;
        Ok((trend, events))
    }

    /// Final hidden state of the GRU run over `seq: [P, T, D]`, from `h0 = 0`.
    pub fn gru<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, seq: Var) -> Result<Var> {
        let shape = tape.shape(seq).to_vec();
        let (rows, t_len, d) = (shape[0], shape[1], shape[2]);
        let mut h = tape.constant(Tensor::zeros(&[rows, d]));
        for t in 0..t_len {
            let x = tape.select_time(seq, t)?;
            let hz = tape.matmul(h, p.var(self.uz))?;
            let xz = self.wz.forward(tape, p, x)?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let hr = tape.matmul(h, p.var(self.ur))?;
            let xr = self.wr.forward(tape, p, x)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, h)?;
            let hh = tape.matmul(rh, p.var(self.uh))?;
            let xh = self.wh.forward(tape, p, x)?;
            let cand = tape.add(xh, hh)?;
            let cand = tape.tanh(cand);
            let delta = tape.sub(cand, h)?;
            let step = tape.mul(z, delta)?;
            h = tape.add(h, step)?;
        }
        Ok(h)
    }

    /// Multi-head attention pooling of `events: [P, T, D]`, giving `[P, D]`.
    pub fn event_attention<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, events: Var) -> Result<Var> {
        let k = self.key.forward(tape, p, events)?;
        let v = self.value.forward(tape, p, events)?;
        tape.query_pool(k, v, p.var(self.queries))
    }

    /// Attention weights `[P, H, T]` of [`Temporal::event_attention`].
    pub fn event_weights<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, events: Var) -> Result<Vec<F>> {
        let k = self.key.forward(tape, p, events)?;
        let s = tape.shape(k).to_vec();
        let dk = s[2] / self.heads;
        Ok(crate::ops::query_pool_weights(
            tape.value(k).data(),
            tape.value(p.var(self.queries)).data(),
            s[0],
            s[1],
            self.heads,
            dk,
        ))
    }

    /// `frames`: per-timestep `[P, D]` features (time already added).
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, frames: &[Var]) -> Result<TemporalOut> {
        let seq = tape.stack_time(frames)?;
        let (trend, events) = self.decompose(tape, p, seq)?;
        let f_low = self.gru(tape, p, trend)?;
        let f_high = self.event_attention(tape, p, events)?;
        let fused = tape.concat_last(f_low, f_high)?;
        Ok(TemporalOut {
            trend,
            events,
            f_low,
            f_high,
            fused,
        })
    }
}
