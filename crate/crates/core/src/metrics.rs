//! Per-class and macro precision / recall / F1.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, SparsePointSet, UNLABELED};
use crate::error::{Error, Result};

/// Reference labels for [`evaluate`].
#[derive(Debug, Clone, Copy)]
pub enum Truth<'a> {
    Dense(&'a LabelMap),
    Points(&'a SparsePointSet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Truth pixels of this class.
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub evaluated_pixels: u64,
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores `pred` on every pixel with known truth. Unlabeled predictions count
/// as misses. Classes absent from the truth are reported but left out of the
/// macro averages.
pub fn evaluate(pred: &LabelMap, truth: Truth<'_>, num_classes: usize) -> Result<EvalReport> {
    let pairs: Vec<(u8, u8)> = match truth {
        Truth::Dense(t) => {
            if t.height() != pred.height() || t.width() != pred.width() {
                return Err(Error::Dimension {
                    op: "evaluate",
                    lhs: vec![pred.height(), pred.width()],
                    rhs: vec![t.height(), t.width()],
                });
            }
            t.labels()
                .iter()
                .zip(pred.labels())
                .filter(|(&t, _)| t != UNLABELED)
                .map(|(&t, &p)| (t, p))
                .collect()
        }
        Truth::Points(pts) => {
            if pts.height() != pred.height() || pts.width() != pred.width() {
                return Err(Error::Dimension {
                    op: "evaluate",
                    lhs: vec![pred.height(), pred.width()],
                    rhs: vec![pts.height(), pts.width()],
                });
            }
            pts.points()
                .iter()
                .map(|p| (p.class, pred.get(p.row, p.col)))
                .collect()
        }
    };
    if pairs.is_empty() {
        return Err(Error::Evaluation("no truth pixels to evaluate".into()));
    }
    let (mut tp, mut fp, mut fn_, mut support) = (
        vec![0u64; num_classes],
        vec![0u64; num_classes],
        vec![0u64; num_classes],
        vec![0u64; num_classes],
    );
    for &(t, p) in &pairs {
        let t = t as usize;
        if t >= num_classes {
            return Err(Error::Evaluation(format!(
                "truth class {t} outside 0..{num_classes}"
            )));
        }
        support[t] += 1;
        if p as usize == t {
            tp[t] += 1;
        } else {
            fn_[t] += 1;
            if (p as usize) < num_classes {
                fp[p as usize] += 1;
            }
        }
    }
    let classes: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| ClassMetrics {
            class: c,
            tp: tp[c],
            fp: fp[c],
            fn_: fn_[c],
            support: support[c],
            precision: ratio(tp[c], tp[c] + fp[c]),
            recall: ratio(tp[c], tp[c] + fn_[c]),
            f1: ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn_[c]),
        })
        .collect();
    let present: Vec<&ClassMetrics> = classes.iter().filter(|m| m.support > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64;
    Ok(EvalReport {
        evaluated_pixels: pairs.len() as u64,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        classes,
    })
}

impl EvalReport {
    /// Flat `key=value` lines, one per metric.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "evaluated_pixels={}", self.evaluated_pixels);
        for m in &self.classes {
            let c = m.class;
            let _ = writeln!(s, "class.{c}.support={}", m.support);
            let _ = writeln!(s, "class.{c}.tp={}", m.tp);
            let _ = writeln!(s, "class.{c}.fp={}", m.fp);
            let _ = writeln!(s, "class.{c}.fn={}", m.fn_);
            let _ = writeln!(s, "class.{c}.precision={:.6}", m.precision);
            let _ = writeln!(s, "class.{c}.recall={:.6}", m.recall);
            let _ = writeln!(s, "class.{c}.f1={:.6}", m.f1);
        }
        let _ = writeln!(s, "macro.precision={:.6}", self.macro_precision);
        let _ = writeln!(s, "macro.recall={:.6}", self.macro_recall);
        let _ = writeln!(s, "macro.f1={:.6}", self.macro_f1);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<stem>.txt` and `<stem>.json` next to each other.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let txt = stem.with_extension("txt");
        let json = stem.with_extension("json");
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}
