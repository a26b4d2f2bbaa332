//! Confusion matrices, per-class and macro accuracy, ablation tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classes::{ClassLabel, NUM_CLASSES};
use crate::imaging::{ImageError, RgbImage};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("{preds} predictions for {truths} truths")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("class id {0} outside the {1}-class scheme")]
    ClassOutOfRange(usize, usize),
    #[error("report {name} has {found} classes, expected {expected}")]
    InconsistentScheme { name: String, expected: usize, found: usize },
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Vec<Vec<u64>>,
    /// `None` for classes absent from the truths.
    pub class_accuracy: Vec<Option<f64>>,
    /// Unweighted mean of the present classes' accuracies.
    pub overall: f64,
    pub sample_count: u64,
    pub absent_classes: Vec<usize>,
}

/// Mean over the classes that have an accuracy.
pub fn macro_mean(class_accuracy: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = class_accuracy.iter().flatten().copied().collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

impl EvalReport {
    /// Report over an arbitrary number of classes given by id.
    pub fn from_ids(preds: &[usize], truths: &[usize], n_classes: usize) -> Result<Self, EvalError> {
        if preds.len() != truths.len() {
            return Err(EvalError::LengthMismatch {
                preds: preds.len(),
                truths: truths.len(),
            });
        }
        if truths.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        for (&p, &t) in preds.iter().zip(truths) {
            for id in [p, t] {
                if id >= n_classes {
                    return Err(EvalError::ClassOutOfRange(id, n_classes));
                }
            }
            confusion[t][p] += 1;
        }
        let class_accuracy: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row[i] as f64 / total as f64)
            })
            .collect();
        let absent_classes = class_accuracy
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            overall: macro_mean(&class_accuracy),
            confusion,
            class_accuracy,
            sample_count: truths.len() as u64,
            absent_classes,
        })
    }

    /// Summary of an external evaluation known only by its class accuracies.
    pub fn from_class_accuracies(class_accuracy: &[f64]) -> Self {
        let class_accuracy: Vec<Option<f64>> = class_accuracy.iter().map(|&a| Some(a)).collect();
        Self {
            overall: macro_mean(&class_accuracy),
            confusion: Vec::new(),
            class_accuracy,
            sample_count: 0,
            absent_classes: Vec::new(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_accuracy.len()
    }

    /// Fraction of samples on the diagonal.
    pub fn micro_accuracy(&self) -> f64 {
        let hits: u64 = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        hits as f64 / self.sample_count.max(1) as f64
    }

    /// Readable matrix plus per-class accuracies.
    pub fn to_text(&self) -> String {
        let names = scheme_names(self.class_count());
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        if !self.confusion.is_empty() {
            let _ = write!(out, "{:width$}", "true\\pred");
            for n in &names {
                let _ = write!(out, " {n:>width$}");
            }
            out.push('\n');
            for (n, row) in names.iter().zip(&self.confusion) {
                let _ = write!(out, "{n:width$}");
                for v in row {
                    let _ = write!(out, " {v:>width$}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        for (n, a) in names.iter().zip(&self.class_accuracy) {
            let _ = writeln!(out, "{n:width$} {}", fmt_acc(*a));
        }
        let _ = writeln!(out, "{:width$} {:.4}", "overall", self.overall);
        if !self.absent_classes.is_empty() {
            let absent: Vec<_> = self.absent_classes.iter().map(|&i| names[i].clone()).collect();
            let _ = writeln!(out, "absent from truths: {}", absent.join(", "));
        }
        out
    }

    /// Row-normalized heat map, `cell_px` pixels per matrix cell.
    pub fn heatmap(&self, cell_px: u32) -> RgbImage {
        let n = self.confusion.len() as u32;
        let mut img = RgbImage::new(n * cell_px, n * cell_px);
        for (t, row) in self.confusion.iter().enumerate() {
            let total: u64 = row.iter().sum();
            for (p, &v) in row.iter().enumerate() {
                let frac = if total == 0 { 0.0 } else { v as f64 / total as f64 };
                let shade = (255.0 * (1.0 - frac)).round() as u8;
                let color = [shade, shade, 255];
                for dy in 0..cell_px {
                    for dx in 0..cell_px {
                        img.set(p as u32 * cell_px + dx, t as u32 * cell_px + dy, color);
                    }
                }
            }
        }
        img
    }

    pub fn write_heatmap(&self, path: impl AsRef<std::path::Path>, cell_px: u32) -> Result<(), ImageError> {
        self.heatmap(cell_px).write_png(path)
    }
}

fn scheme_names(n: usize) -> Vec<String> {
    if n == NUM_CLASSES {
        ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect()
    } else {
        (0..n).map(|i| format!("class{i}")).collect()
    }
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Evaluation of six-class predictions.
pub fn confusion(preds: &[ClassLabel], truths: &[ClassLabel]) -> Result<EvalReport, EvalError> {
    let p: Vec<usize> = preds.iter().map(|c| c.id()).collect();
    let t: Vec<usize> = truths.iter().map(|c| c.id()).collect();
    EvalReport::from_ids(&p, &t, NUM_CLASSES)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub class_accuracy: Vec<Option<f64>>,
    pub overall: f64,
}

/// Table with one row per model and one column per class plus overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub class_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

pub fn ablation_report(reports: &[(String, EvalReport)]) -> Result<AblationTable, EvalError> {
    let n = reports.first().map_or(NUM_CLASSES, |(_, r)| r.class_count());
    let mut rows = Vec::with_capacity(reports.len());
    for (name, r) in reports {
        if r.class_count() != n {
            return Err(EvalError::InconsistentScheme {
                name: name.clone(),
                expected: n,
                found: r.class_count(),
            });
        }
        rows.push(AblationRow {
            name: name.clone(),
            class_accuracy: r.class_accuracy.clone(),
            overall: r.overall,
        });
    }
    Ok(AblationTable {
        class_names: scheme_names(n),
        rows,
    })
}

impl AblationTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["model".to_string()];
        h.extend(self.class_names.iter().cloned());
        h.push("overall".into());
        h
    }

    fn cells(&self, row: &AblationRow) -> Vec<String> {
        let mut cells = vec![row.name.clone()];
        cells.extend(row.class_accuracy.iter().map(|a| fmt_acc(*a)));
        cells.push(format!("{:.4}", row.overall));
        cells
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header()).expect("in-memory write");
        for row in &self.rows {
            w.write_record(self.cells(row)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn to_text(&self) -> String {
        let mut table = vec![self.header()];
        table.extend(self.rows.iter().map(|r| self.cells(r)));
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, &w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LATE: [f64; 6] = [0.9167, 0.9615, 0.8824, 0.9630, 0.8636, 1.0];
    const RGB_TRACK: [f64; 6] = [0.8889, 0.9872, 0.7843, 0.9630, 0.6364, 0.6667];

    #[test]
    fn table_rows_reproduce_overall() {
        assert_eq!(format!("{:.4}", EvalReport::from_class_accuracies(&LATE).overall), "0.9312");
        let table = ablation_report(&[("rgb".into(), EvalReport::from_class_accuracies(&RGB_TRACK))]).unwrap();
        let csv = table.to_csv();
        let last = csv.lines().nth(1).unwrap().rsplit(',').next().unwrap();
        assert_eq!(last, "0.8211");
    }

    #[test]
    fn hand_case_two_classes() {
        let r = EvalReport::from_ids(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(r.class_accuracy, vec![Some(0.5), Some(1.0)]);
        assert_eq!(r.overall, 0.75);
    }

    #[test]
    fn perfect_predictions() {
        let labels: Vec<ClassLabel> = ClassLabel::ALL.iter().cycle().take(20).copied().collect();
        let r = confusion(&labels, &labels).unwrap();
        assert_eq!(r.overall, 1.0);
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!(i == j || v == 0);
            }
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(confusion(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(
            confusion(&[ClassLabel::Bog], &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
        let a = EvalReport::from_class_accuracies(&LATE);
        let b = EvalReport::from_ids(&[0], &[0], 2).unwrap();
        assert!(matches!(
            ablation_report(&[("a".into(), a), ("b".into(), b)]),
            Err(EvalError::InconsistentScheme { .. })
        ));
    }

    #[test]
    fn absent_classes_flagged_and_excluded() {
        let r = confusion(&[ClassLabel::Water, ClassLabel::Bog], &[ClassLabel::Water, ClassLabel::Water]).unwrap();
        assert_eq!(r.absent_classes, vec![1, 2, 3, 4, 5]);
        assert_eq!(r.overall, 0.5);
        assert!(r.to_text().contains("absent from truths: bog"));
    }

    #[test]
    fn columns_follow_class_order() {
        let table = ablation_report(&[("x".into(), EvalReport::from_class_accuracies(&LATE))]).unwrap();
        assert_eq!(
            table.header(),
            vec!["model", "water", "bog", "channel_fen", "forest_dense", "forest_sparse", "wetland", "overall"]
        );
    }

    #[test]
    fn heatmap_shades_rows() {
        let r = EvalReport::from_ids(&[0, 0, 1], &[0, 0, 1], 2).unwrap();
        let img = r.heatmap(2);
        assert_eq!((img.width, img.height), (4, 4));
        assert_eq!(img.pixel(0, 0), [0, 0, 255]);
        assert_eq!(img.pixel(3, 0), [255, 255, 255]);
    }

    fn label() -> impl Strategy<Value = ClassLabel> {
        (0usize..6).prop_map(|i| ClassLabel::from_id(i).unwrap())
    }

    proptest! {
        #[test]
        fn counts_and_macro_invariance(
            pairs in proptest::collection::vec((label(), label()), 1..80),
            dup_class in 0usize..6,
        ) {
            let (preds, truths): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let r = confusion(&preds, &truths).unwrap();
            let total: u64 = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total, r.sample_count);
            for (i, row) in r.confusion.iter().enumerate() {
                let n = truths.iter().filter(|t| t.id() == i).count() as u64;
                prop_assert_eq!(row.iter().sum::<u64>(), n);
            }
            let mut p2 = preds.clone();
            let mut t2 = truths.clone();
            for (p, t) in pairs.iter().filter(|(_, t)| t.id() == dup_class) {
                p2.push(*p);
                t2.push(*t);
            }
            let r2 = confusion(&p2, &t2).unwrap();
            prop_assert_eq!(&r2.class_accuracy, &r.class_accuracy);
            prop_assert!((r2.overall - r.overall).abs() <= 1e-12);
        }
    }
}
