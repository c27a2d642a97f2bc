use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"WSTC";
pub const CUBE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 4;

/// A `T × H × W × C` stack of co-registered reflectance images.
///
/// Values are stored t-major then row-major with channels innermost. Each
/// `(t, row, col)` carries a validity flag; invalid entries still hold a
/// finite value (for example a gap-filled composite).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesCube {
    timestamps: Vec<i32>,
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl TimeSeriesCube {
    pub fn new(
        timestamps: Vec<i32>,
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let n = timestamps.len() * height * width;
        Self::with_validity(timestamps, height, width, channels, values, vec![true; n])
    }

    pub fn with_validity(
        timestamps: Vec<i32>,
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let t = timestamps.len();
        if t == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::config(format!(
                "empty cube dimensions {t}x{height}x{width}x{channels}"
            )));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "timestamps must be strictly increasing: {timestamps:?}"
            )));
        }
        let expected = t * height * width * channels;
        if values.len() != expected {
            return Err(Error::Dimension {
                op: "cube",
                lhs: vec![t, height, width, channels],
                rhs: vec![values.len()],
            });
        }
        if valid.len() != t * height * width {
            return Err(Error::Dimension {
                op: "cube validity",
                lhs: vec![t, height, width],
                rhs: vec![valid.len()],
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("non-finite cube value at index {i}")));
        }
        Ok(Self {
            timestamps,
            height,
            width,
            channels,
            values,
            valid,
        })
    }

    pub fn len_t(&self) -> usize {
        self.timestamps.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn timestamps(&self) -> &[i32] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn index(&self, t: usize, row: usize, col: usize) -> usize {
        ((t * self.height + row) * self.width + col) * self.channels
    }

    pub fn get(&self, t: usize, row: usize, col: usize, ch: usize) -> f32 {
        self.values[self.index(t, row, col) + ch]
    }

    pub fn is_valid(&self, t: usize, row: usize, col: usize) -> bool {
        self.valid[(t * self.height + row) * self.width + col]
    }

    /// Image at timestamp index `t` as `[H, W, C]` row-major values.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * self.channels;
        &self.values[t * n..(t + 1) * n]
    }

    /// Temporal profile of one pixel, flattened to `T·C` (time-major).
    pub fn profile(&self, row: usize, col: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len_t() * self.channels);
        for t in 0..self.len_t() {
            let i = self.index(t, row, col);
            out.extend_from_slice(&self.values[i..i + self.channels]);
        }
        out
    }

    /// `size × size` window at `(row0, col0)`. Areas beyond the canvas are
    /// zero-filled and marked invalid.
    pub fn window(&self, row0: usize, col0: usize, size: usize) -> TimeSeriesCube {
        let t_len = self.len_t();
        let c = self.channels;
        let mut values = vec![0.0; t_len * size * size * c];
        let mut valid = vec![false; t_len * size * size];
        for t in 0..t_len {
            for r in 0..size {
                let sr = row0 + r;
                if sr >= self.height {
                    continue;
                }
                for col in 0..size {
                    let sc = col0 + col;
                    if sc >= self.width {
                        continue;
                    }
                    let src = self.index(t, sr, sc);
                    let dst = ((t * size + r) * size + col) * c;
                    values[dst..dst + c].copy_from_slice(&self.values[src..src + c]);
                    valid[(t * size + r) * size + col] = self.is_valid(t, sr, sc);
                }
            }
        }
        TimeSeriesCube {
            timestamps: self.timestamps.clone(),
            height: size,
            width: size,
            channels: c,
            values,
            valid,
        }
    }

    /// Keeps only the timestamps at the given (increasing) indices.
    pub fn select_times(&self, indices: &[usize]) -> Result<TimeSeriesCube> {
        if indices.is_empty() || indices.iter().any(|&i| i >= self.len_t()) {
            return Err(Error::config(format!(
                "invalid timestamp selection {indices:?} for T={}",
                self.len_t()
            )));
        }
        let frame = self.height * self.width;
        let mut values = Vec::with_capacity(indices.len() * frame * self.channels);
        let mut valid = Vec::with_capacity(indices.len() * frame);
        for &i in indices {
            values.extend_from_slice(self.frame(i));
            valid.extend_from_slice(&self.valid[i * frame..(i + 1) * frame]);
        }
        TimeSeriesCube::with_validity(
            indices.iter().map(|&i| self.timestamps[i]).collect(),
            self.height,
            self.width,
            self.channels,
            values,
            valid,
        )
    }

    /// Serialises to the `WSTC` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let t = self.len_t();
        let frame = t * self.height * self.width;
        let mut out =
            Vec::with_capacity(HEADER_LEN + 4 * t + 4 * self.values.len() + frame.div_ceil(8));
        out.extend_from_slice(CUBE_MAGIC);
        out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
        for d in [t, self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for ts in &self.timestamps {
            out.extend_from_slice(&ts.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(pack_bits(&self.valid));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != CUBE_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"WSTC\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CUBE_VERSION {
            return Err(Error::Format(format!("unsupported cube version {version}")));
        }
        let dim = |i: usize| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        };
        let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
        let count = t
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Format("cube dimensions overflow".into()))?;
        let nvals = count
            .checked_mul(c)
            .ok_or_else(|| Error::Format("cube dimensions overflow".into()))?;
        let expected = HEADER_LEN + 4 * t + 4 * nvals + count.div_ceil(8);
        if bytes.len() != expected {
            return Err(Error::Length {
                expected,
                found: bytes.len(),
            });
        }
        let mut off = HEADER_LEN;
        let timestamps = bytes[off..off + 4 * t]
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        off += 4 * t;
        let values = bytes[off..off + 4 * nvals]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        off += 4 * nvals;
        let valid = unpack_bits(&bytes[off..], count);
        Self::with_validity(timestamps, h, w, c, values, valid)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Validity bits, least significant bit first.
fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

pub fn write_cube(cube: &TimeSeriesCube, path: impl AsRef<Path>) -> Result<()> {
    cube.write(path)
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<TimeSeriesCube> {
    TimeSeriesCube::read(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TimeSeriesCube {
        let values: Vec<f32> = (0..2 * 3 * 4 * 2).map(|v| v as f32 / 48.0).collect();
        let mut valid = vec![true; 24];
        valid[5] = false;
        TimeSeriesCube::with_validity(vec![1, 4], 3, 4, 2, values, valid).unwrap()
    }

    #[test]
    fn header_and_payload_length() {
        let cube = TimeSeriesCube::new(
            (1..=12).collect(),
            64,
            64,
            3,
            vec![0.5; 12 * 64 * 64 * 3],
        )
        .unwrap();
        let bytes = cube.to_bytes();
        let payload = 12 * 64 * 64 * 3 * 4;
        assert_eq!(
            bytes.len(),
            HEADER_LEN + 12 * 4 + payload + (12 * 64 * 64usize).div_ceil(8)
        );
        assert_eq!(&bytes[..4], b"WSTC");
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            TimeSeriesCube::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_version_is_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            TimeSeriesCube::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_is_length_error() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            TimeSeriesCube::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Length { .. })
        ));
        assert!(matches!(
            TimeSeriesCube::from_bytes(&bytes[..10]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn timestamps_must_increase() {
        let err = TimeSeriesCube::new(vec![2, 2], 1, 1, 1, vec![0.0, 0.0]);
        assert!(err.is_err());
    }

    #[test]
    fn window_pads_invalid() {
        let cube = sample();
        let w = cube.window(2, 3, 2);
        assert_eq!(w.get(0, 0, 0, 1), cube.get(0, 2, 3, 1));
        assert!(!w.is_valid(0, 1, 1));
        assert_eq!(w.get(1, 1, 1, 0), 0.0);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            t in 1usize..4, h in 1usize..6, w in 1usize..6, c in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..t * h * w * c).map(|_| rng.gen()).collect();
            let valid: Vec<bool> = (0..t * h * w).map(|_| rng.gen()).collect();
            let ts: Vec<i32> = (0..t as i32).map(|i| i * 3 - 1).collect();
            let cube = TimeSeriesCube::with_validity(ts, h, w, c, values, valid).unwrap();
            let bytes = cube.to_bytes();
            let back = TimeSeriesCube::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, cube);
        }
    }
}
