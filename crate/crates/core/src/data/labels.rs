use std::path::Path;

use super::cube::TimeSeriesCube;
use crate::error::{Error, Result};

/// Marker for pixels without a label.
pub const UNLABELED: u8 = 255;

/// Dense per-pixel class map; [`UNLABELED`] marks missing entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![UNLABELED; height * width],
        }
    }

    pub fn from_labels(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension {
                op: "label map",
                lhs: vec![height, width],
                rhs: vec![labels.len()],
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.labels[row * self.width + col] = class;
    }

    pub fn is_labeled(&self, row: usize, col: usize) -> bool {
        self.get(row, col) != UNLABELED
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNLABELED).count()
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled_count() as f64 / self.labels.len().max(1) as f64
    }

    /// `size × size` window; out-of-canvas pixels are unlabeled.
    pub fn window(&self, row0: usize, col0: usize, size: usize) -> LabelMap {
        let mut out = LabelMap::unlabeled(size, size);
        for r in 0..size.min(self.height.saturating_sub(row0)) {
            for c in 0..size.min(self.width.saturating_sub(col0)) {
                out.set(r, c, self.get(row0 + r, col0 + c));
            }
        }
        out
    }

    /// Label-map container: a `T=1, C=1` cube whose timestamp carries
    /// `iteration` and whose values are the labels cast to f32.
    pub fn to_cube(&self, iteration: i32) -> TimeSeriesCube {
        TimeSeriesCube::new(
            vec![iteration],
            self.height,
            self.width,
            1,
            self.labels.iter().map(|&l| l as f32).collect(),
        )
        .expect("label maps are non-empty")
    }

    pub fn from_cube(cube: &TimeSeriesCube) -> Result<(Self, i32)> {
        if cube.len_t() != 1 || cube.channels() != 1 {
            return Err(Error::Format(format!(
                "label map needs T=1, C=1; found T={}, C={}",
                cube.len_t(),
                cube.channels()
            )));
        }
        let mut labels = Vec::with_capacity(cube.values().len());
        for &v in cube.values() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::Format(format!("label value {v} is not a u8")));
            }
            labels.push(v as u8);
        }
        Ok((
            Self::from_labels(cube.height(), cube.width(), labels)?,
            cube.timestamps()[0],
        ))
    }

    pub fn write(&self, path: impl AsRef<Path>, iteration: i32) -> Result<()> {
        self.to_cube(iteration).write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Self, i32)> {
        Self::from_cube(&TimeSeriesCube::read(path)?)
    }
}

/// Pseudo-label supervision produced at refresh iteration `iteration`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub map: LabelMap,
    pub iteration: usize,
}

impl PseudoLabelMap {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.map.write(path, self.iteration as i32)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (map, it) = LabelMap::read(path)?;
        Ok(Self {
            map,
            iteration: it.max(0) as usize,
        })
    }
}
