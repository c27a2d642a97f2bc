//! Binary checkpoint: magic `WSCK`, format version, sequence length, the
//! run configuration as TOML, then every named parameter tensor.
//!
//! All integers are little-endian; tensors are stored as `f32`.

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::params::Parameter;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    /// Timestamps per sequence the model was built for.
    pub t_len: usize,
    pub params: Vec<Parameter<f32>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Length {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, config: &Config, t_len: usize) -> Self {
        Self {
            config: Config {
                model: model.cfg,
                ..config.clone()
            },
            t_len,
            params: model.store.iter().cloned().collect(),
        }
    }

    /// Rebuilds the model and loads the stored parameters into it.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.config.model, self.t_len, self.config.train.seed)?;
        model.store.load_from(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.t_len as u64).to_le_bytes());
        put_str(&mut out, &self.config.to_toml());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.push(u8::from(p.trainable));
            let shape = p.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let t_len = r.len()?;
        let config = Config::from_toml(&r.string()?)?;
        let count = r.len()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("bad trainable flag {b}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(Parameter {
                name,
                tensor: Tensor::new(shape, data)?,
                trainable,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, t_len, params })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use proptest::prelude::*;

    fn small() -> ModelConfig {
        ModelConfig {
            width: 8,
            heads: 2,
            latents: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn model_round_trip() {
        let model = Model::<f32>::new(small(), 6, 3).unwrap();
        let ck = Checkpoint::from_model(&model, &Config::default(), 6);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.to_model().unwrap();
        for (a, b) in rebuilt.store.iter().zip(model.store.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::<f32>::new(small(), 3, 0).unwrap();
        let bytes = Checkpoint::from_model(&model, &Config::default(), 3).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn arbitrary_tensors_round_trip(
            tensors in prop::collection::vec(
                (prop::collection::vec(1usize..4, 0..3), any::<bool>(), any::<u32>()),
                0..5,
            ),
            t_len in 1usize..20,
        ) {
            let params: Vec<Parameter<f32>> = tensors
                .into_iter()
                .enumerate()
                .map(|(i, (shape, trainable, bits))| {
                    let n: usize = shape.iter().product();
                    // arbitrary bit patterns, NaN payloads included
                    let data = (0..n).map(|j| f32::from_bits(bits.wrapping_add((j as u32).wrapping_mul(2_654_435_761)))).collect();
                    Parameter { name: format!("p{i}"), tensor: Tensor::new(shape, data).unwrap(), trainable }
                })
                .collect();
            let ck = Checkpoint { config: Config::default(), t_len, params };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for (a, b) in back.params.iter().zip(&ck.params) {
                let bits = |p: &Parameter<f32>| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a), bits(b));
                prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
            }
        }
    }
}
