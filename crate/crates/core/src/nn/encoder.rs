use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{attend, Linear, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{sc, Scalar, Tensor};

/// Seed of the frozen encoder weights, shared by every model instance.
pub const ENCODER_SEED: u64 = 0x5EED_0E1C;

/// Frozen three-block convolutional encoder (stride 2, 2, 1) with a shallow
/// adapter after block 1 and a deep adapter after block 3.
#[derive(Debug, Clone)]
pub struct Encoder {
    convs: [(ParamId, ParamId); 3],
    pub shallow: ShallowAdapter,
    pub deep: DeepAdapter,
    width: usize,
}

fn frozen_conv<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
) -> (ParamId, ParamId) {
    let limit = (6.0 / (9 * cin + 9 * cout) as f64).sqrt();
    let kernel: Vec<F> = (0..9 * cin * cout)
        .map(|_| sc(rng.gen_range(-limit..=limit)))
        .collect();
    let bias: Vec<F> = (0..cout).map(|_| sc(rng.gen_range(0.0..0.1))).collect();
    (
        store.insert(
            &format!("{name}.kernel"),
            Tensor::new(vec![3, 3, cin, cout], kernel).expect("kernel shape"),
            false,
        ),
        store.insert(
            &format!("{name}.bias"),
            Tensor::new(vec![cout], bias).expect("bias shape"),
            false,
        ),
    )
}

impl Encoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED);
        let d = cfg.width;
        let convs = [
            frozen_conv(store, &mut rng, "encoder.block1", cfg.channels, d),
            frozen_conv(store, &mut rng, "encoder.block2", d, d),
            frozen_conv(store, &mut rng, "encoder.block3", d, d),
        ];
        Self {
            convs,
            shallow: ShallowAdapter::new(store, "adapter.shallow", d, cfg.bottleneck_ratio),
            deep: DeepAdapter::new(store, "adapter.deep", d),
            width: d,
        }
    }

    fn block<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, i: usize, x: Var, stride: usize) -> Result<Var> {
        let (k, b) = self.convs[i];
        let y = tape.conv2d(x, p.var(k), Some(p.var(b)), stride)?;
        Ok(tape.relu(y))
    }

    /// Base features of an `[H, W, C]` image before any adapter, `[H/4, W/4, D]`.
    pub fn base<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, image: Var) -> Result<Var> {
        self.check(tape, image)?;
        let x = self.block(tape, p, 0, image, 2)?;
        let x = self.block(tape, p, 1, x, 2)?;
        self.block(tape, p, 2, x, 1)
    }

    /// Adapted features of an `[H, W, C]` image, `[H/4, W/4, D]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, image: Var) -> Result<Var> {
        self.check(tape, image)?;
        let x = self.block(tape, p, 0, image, 2)?;
        let x = self.shallow.forward(tape, p, x)?;
        let x = self.block(tape, p, 1, x, 2)?;
        let x = self.block(tape, p, 2, x, 1)?;
        self.deep.forward(tape, p, x)
    }

    fn check<F: Scalar>(&self, tape: &Tape<F>, image: Var) -> Result<()> {
        let s = tape.shape(image);
        let stride = ModelConfig::STRIDE;
        if s.len() != 3 || s[0] < stride || s[1] < stride || s[0] % stride != 0 || s[1] % stride != 0 {
            return Err(Error::Config(format!(
                "image {s:?} must be [H, W, C] with H, W positive multiples of {stride}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Channel gating from two small MLPs on the pooled vector, a 5x5 context
/// convolution of the pooled map and a bottleneck branch. The last layer of
/// each residual branch starts at zero.
#[derive(Debug, Clone)]
pub struct ShallowAdapter {
    gate1: Linear,
    gate2: Linear,
    context: ParamId,
    down: Linear,
    up: Linear,
}

impl ShallowAdapter {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, ratio: usize) -> Self {
        let r = (d / ratio).max(1);
        Self {
            gate1: Linear::new(store, &format!("{name}.gate1"), d, r, false),
            gate2: Linear::new(store, &format!("{name}.gate2"), r, d, false),
            context: store.add(&format!("{name}.context"), &[5, 5, d, d], Init::Zeros, true),
            down: Linear::new(store, &format!("{name}.down"), d, r, false),
            up: Linear::new(store, &format!("{name}.up"), r, d, true),
        }
    }

    /// `f: [H, W, D]` to `[H, W, D]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, f: Var) -> Result<Var> {
        let (h, w) = (tape.shape(f)[0], tape.shape(f)[1]);
        let pooled = tape.mean_rows(f);
        let a = self.gate1.forward(tape, p, pooled)?;
        let a = tape.relu(a);
        let a = self.gate2.forward(tape, p, a)?;
        let weights = tape.sigmoid(a);
        let g = tape.mul_row(f, weights)?;
        let ctx = tape.broadcast_conv2d(pooled, p.var(self.context), h, w)?;
        let b = self.down.forward(tape, p, g)?;
        let b = tape.relu(b);
        let b = self.up.forward(tape, p, b)?;
        let out = tape.add(g, ctx)?;
        tape.add(out, b)
    }
}

/// 3x3 convolution followed by scaled dot-product self-attention over grid
/// positions; the projected result is added to the input.
#[derive(Debug, Clone)]
pub struct DeepAdapter {
    conv: (ParamId, ParamId),
    query: Linear,
    key: Linear,
    out: Linear,
}

impl DeepAdapter {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        Self {
            conv: (
                store.add(
                    &format!("{name}.conv.kernel"),
                    &[3, 3, d, d],
                    Init::Glorot {
                        fan_in: 9 * d,
                        fan_out: 9 * d,
                    },
                    true,
                ),
                store.add(&format!("{name}.conv.bias"), &[d], Init::Zeros, true),
            ),
            query: Linear::new(store, &format!("{name}.query"), d, d, false),
            key: Linear::new(store, &format!("{name}.key"), d, d, false),
            out: Linear::new(store, &format!("{name}.out"), d, d, true),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, f: Var) -> Result<Var> {
        let shape = tape.shape(f).to_vec();
        let g = tape.conv2d(f, p.var(self.conv.0), Some(p.var(self.conv.1)), 1)?;
        let g = tape.reshape(g, &[shape[0] * shape[1], shape[2]])?;
        let q = self.query.forward(tape, p, g)?;
        let k = self.key.forward(tape, p, g)?;
        let a = attend(tape, q, k, g)?;
        let a = self.out.forward(tape, p, a)?;
        let a = tape.reshape(a, &shape)?;
        tape.add(f, a)
    }
}
