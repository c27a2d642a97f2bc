use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    pub row: usize,
    pub col: usize,
    pub class: u8,
}

/// Sparse class annotations on an `H × W` grid with `num_classes` labels
/// (`0..num_classes`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsePointSet {
    height: usize,
    width: usize,
    num_classes: usize,
    points: Vec<Point>,
}

impl SparsePointSet {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        points: Vec<Point>,
    ) -> Result<Self> {
        if num_classes == 0 || num_classes > 255 {
            return Err(Error::config(format!(
                "class count must be in 1..=255, got {num_classes}"
            )));
        }
        let mut seen = HashSet::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if p.row >= height || p.col >= width {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!(
                        "point ({}, {}) outside {height}x{width} grid",
                        p.row, p.col
                    ),
                });
            }
            if p.class as usize >= num_classes {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("class {} outside 0..{num_classes}", p.class),
                });
            }
            if !seen.insert((p.row, p.col)) {
                return Err(Error::DuplicatePoint {
                    row: p.row,
                    col: p.col,
                    line: i + 1,
                });
            }
        }
        let set = Self {
            height,
            width,
            num_classes,
            points,
        };
        set.warn_if_dense();
        Ok(set)
    }

    fn warn_if_dense(&self) {
        if self.points.len() as f64 > 0.05 * (self.height * self.width) as f64 {
            warn!(
                "{} points on a {}x{} grid exceed 5% of pixels",
                self.points.len(),
                self.height,
                self.width
            );
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for p in &self.points {
            counts[p.class as usize] += 1;
        }
        counts
    }

    /// Replaces the point list, keeping grid and class count.
    pub fn with_points(&self, points: Vec<Point>) -> Result<Self> {
        Self::new(self.height, self.width, self.num_classes, points)
    }

    /// Parses `row,col,class_id` records. Blank lines and `#` comments are
    /// skipped; line numbers in errors are 1-based file lines.
    pub fn parse(text: &str, height: usize, width: usize, num_classes: usize) -> Result<Self> {
        let mut points = Vec::new();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected row,col,class_id, got {content:?}"),
                });
            }
            let num = |s: &str, what: &str| {
                s.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    message: format!("invalid {what} {s:?}"),
                })
            };
            let (row, col, class) = (
                num(fields[0], "row")?,
                num(fields[1], "col")?,
                num(fields[2], "class_id")?,
            );
            if row >= height || col >= width {
                return Err(Error::Parse {
                    line,
                    message: format!("point ({row}, {col}) outside {height}x{width} grid"),
                });
            }
            if class >= num_classes {
                return Err(Error::Parse {
                    line,
                    message: format!("class {class} outside 0..{num_classes}"),
                });
            }
            if !seen.insert((row, col)) {
                return Err(Error::DuplicatePoint { row, col, line });
            }
            points.push(Point {
                row,
                col,
                class: class as u8,
            });
        }
        Self::new(height, width, num_classes, points)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# row,col,class_id\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.row, p.col, p.class);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn read_points(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<SparsePointSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SparsePointSet::parse(&text, height, width, num_classes)
}
