//! Intersection-over-union scoring and reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::taxonomy::{self, Mode};

/// Predicted and ground-truth masks of one image.
#[derive(Clone, Copy, Debug)]
pub struct SegPair<'a> {
    pub predicted: &'a LabelMask,
    pub truth: &'a LabelMask,
}

impl<'a> SegPair<'a> {
    pub fn new(predicted: &'a LabelMask, truth: &'a LabelMask) -> Result<Self> {
        if predicted.height() != truth.height() || predicted.width() != truth.width() {
            return Err(Error::shape(
                "iou",
                format!(
                    "prediction {}×{} vs truth {}×{}",
                    predicted.height(),
                    predicted.width(),
                    truth.height(),
                    truth.width()
                ),
            ));
        }
        Ok(Self { predicted, truth })
    }

    /// `(|P_j ∩ G_j|, |P_j ∪ G_j|)`.
    pub fn counts(&self, label: usize) -> (u64, u64) {
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &g) in self.predicted.data().iter().zip(self.truth.data()) {
            let (p, g) = (p as usize == label, g as usize == label);
            inter += (p && g) as u64;
            union += (p || g) as u64;
        }
        (inter, union)
    }
}

/// IoU of one class; `None` when the class is absent from both masks.
pub fn iou(pair: SegPair<'_>, label: usize) -> Option<f64> {
    let (i, u) = pair.counts(label);
    (u > 0).then(|| i as f64 / u as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub label: usize,
    pub intersection: u64,
    pub union: u64,
}

impl ClassIou {
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

/// Counts pooled over all pairs for each class.
pub fn class_ious(pairs: &[SegPair<'_>], classes: &[usize]) -> Vec<ClassIou> {
    classes
        .iter()
        .map(|&label| {
            let (mut intersection, mut union) = (0, 0);
            for p in pairs {
                let (i, u) = p.counts(label);
                intersection += i;
                union += u;
            }
            ClassIou {
                label,
                intersection,
                union,
            }
        })
        .collect()
}

/// Mean of the defined IoUs in a table.
pub fn mean_defined(rows: &[ClassIou]) -> Result<f64> {
    let defined: Vec<f64> = rows.iter().filter_map(ClassIou::iou).collect();
    if defined.is_empty() {
        return Err(Error::invalid(
            "miou",
            "no class occurs in any prediction or ground truth",
        ));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean pooled IoU over the classes that occur somewhere in the pairs.
pub fn miou(pairs: &[SegPair<'_>], classes: &[usize]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("miou", "no mask pairs"));
    }
    mean_defined(&class_ious(pairs, classes))
}

/// One CSV row of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub class_code: String,
    pub mode: String,
    pub intersection: u64,
    pub union: u64,
    /// Rounded to 4 decimals; `None` prints as `undefined`.
    pub iou: Option<f64>,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

pub fn report_rows(rows: &[ClassIou]) -> Result<Vec<ReportRow>> {
    rows.iter()
        .map(|r| {
            Ok(ReportRow {
                class_code: taxonomy::code_of(r.label)?.to_string(),
                mode: taxonomy::mode_tag(r.label).to_string(),
                intersection: r.intersection,
                union: r.union,
                iou: r.iou().map(round4),
            })
        })
        .collect()
}

pub const REPORT_HEADER: [&str; 5] = ["class_code", "mode", "intersection", "union", "iou"];

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = REPORT_HEADER.join(",");
    out.push('\n');
    for r in rows {
        let iou = r.iou.map_or_else(|| "undefined".to_string(), |v| format!("{:.4}", v));
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.class_code, r.mode, r.intersection, r.union, iou
        );
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let head = reader.headers().map_err(|e| Error::Data(e.to_string()))?;
    if head.iter().ne(REPORT_HEADER.iter().copied()) {
        return Err(Error::Data(format!("unexpected report header {:?}", head)));
    }
    let mut out = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let bad = |what: &str| Error::Data(format!("report line {}: bad {}", line, what));
        let rec = rec.map_err(|e| Error::Data(format!("report line {}: {}", line, e)))?;
        let iou = match &rec[4] {
            "undefined" => None,
            v => Some(v.parse::<f64>().map_err(|_| bad("iou"))?),
        };
        out.push(ReportRow {
            class_code: rec[0].to_string(),
            mode: rec[1].to_string(),
            intersection: rec[2].parse().map_err(|_| bad("intersection"))?,
            union: rec[3].parse().map_err(|_| bad("union"))?,
            iou,
        });
    }
    Ok(out)
}

pub fn load_report(path: &Path) -> Result<Vec<ReportRow>> {
    parse_report_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Headline figures of an evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub miou_morph: Option<f64>,
    pub miou_func: Option<f64>,
    /// Patch-level accuracy in percent, when known.
    pub accuracy: Option<f64>,
}

impl Summary {
    pub fn set_miou(&mut self, mode: Mode, value: f64) {
        match mode {
            Mode::Morphological => self.miou_morph = Some(value),
            Mode::Functional => self.miou_func = Some(value),
        }
    }

    /// `key: value` lines with 4-decimal floats.
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{:.4}", v));
        format!(
            "miou_morph: {}\nmiou_func: {}\naccuracy: {}\n",
            f(self.miou_morph),
            f(self.miou_func),
            f(self.accuracy)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[u8]) -> LabelMask {
        LabelMask::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn iou_fixtures() {
        let (p, g) = (mask(&[1, 1, 0, 0]), mask(&[0, 1, 1, 0]));
        let pair = SegPair::new(&p, &g).unwrap();
        assert_eq!(iou(pair, 1), Some(1.0 / 3.0));
        assert_eq!(iou(SegPair::new(&p, &p).unwrap(), 1), Some(1.0));
        assert_eq!(iou(pair, 5), None);
        let (a, b) = (mask(&[2, 2, 0]), mask(&[0, 0, 2]));
        assert_eq!(iou(SegPair::new(&a, &b).unwrap(), 2), Some(0.0));
        assert!(SegPair::new(&p, &mask(&[0])).is_err());
    }

    #[test]
    fn miou_averages_defined_classes() {
        let rows = vec![
            ClassIou {
                label: 0,
                intersection: 1,
                union: 5,
            },
            ClassIou {
                label: 1,
                intersection: 3,
                union: 5,
            },
            ClassIou {
                label: 2,
                intersection: 0,
                union: 0,
            },
        ];
        assert!((mean_defined(&rows).unwrap() - 0.4).abs() < 1e-12);
        assert!(mean_defined(&rows[2..]).is_err());
        assert!(miou(&[], &[0]).is_err());
    }

    #[test]
    fn report_marks_undefined_and_round_trips() {
        let rows = report_rows(&[
            ClassIou {
                label: 0,
                intersection: 2,
                union: 3,
            },
            ClassIou {
                label: taxonomy::BACKGROUND,
                intersection: 0,
                union: 0,
            },
        ])
        .unwrap();
        let text = report_csv(&rows);
        assert!(text.contains("E.M.S,morph,2,3,0.6667"));
        assert!(text.contains("Background,both,0,0,undefined"));
        let back = parse_report_csv(&text).unwrap();
        assert_eq!(back, rows);
        assert_eq!(report_csv(&back), text);
    }

    #[test]
    fn summary_text() {
        let mut s = Summary::default();
        s.set_miou(Mode::Morphological, 1.0);
        assert!(s.to_text().contains("miou_morph: 1.0000"));
        assert!(s.to_text().contains("miou_func: undefined"));
    }
}
