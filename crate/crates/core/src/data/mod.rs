//! Cube, point and label-map data model with their on-disk formats.

mod cube;
mod ingest;
mod labels;
mod points;

pub use cube::{read_cube, write_cube, TimeSeriesCube, CUBE_MAGIC, CUBE_VERSION};
pub use ingest::{
    apply_cloud_mask, median, median_composite, MaskedImage, RawImage, RawScene,
    DEFAULT_SCENE_THRESHOLD, QA_CIRRUS_BIT, QA_CLOUD_BIT,
};
pub use labels::{LabelMap, PseudoLabelMap, UNLABELED};
pub use points::{read_points, Point, SparsePointSet};
