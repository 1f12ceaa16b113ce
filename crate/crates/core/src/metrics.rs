//! Confusion matrices and the long-tailed metric suite.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pointcloud::{ClassPartition, Group};

/// `C x C` counts; entry `(g, p)` is the number of points of ground truth `g`
/// predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::domain(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn from_predictions(classes: usize, labels: &[u16], predictions: &[u16]) -> Result<Self> {
        let mut m = ConfusionMatrix::new(classes);
        m.accumulate(labels, predictions)?;
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn accumulate(&mut self, labels: &[u16], predictions: &[u16]) -> Result<()> {
        if labels.len() != predictions.len() {
            return Err(Error::domain(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let c = self.classes;
        if let Some(bad) = labels.iter().chain(predictions).find(|&&v| v as usize >= c) {
            return Err(Error::domain(format!("class id {bad} outside 0..{c}")));
        }
        for (&g, &p) in labels.iter().zip(predictions) {
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Element-wise sum with another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::domain("cannot merge matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum::<u64>() - self.get(c, c)
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - self.get(c, c)
    }

    pub fn support(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    /// Per-class IoU; `None` for classes absent from both ground truth and
    /// predictions.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.true_positives(c);
                let denom = tp + self.false_positives(c) + self.false_negatives(c);
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over `subset`, skipping absent classes; `None` if nothing is left.
    pub fn miou<'a>(&self, subset: impl IntoIterator<Item = &'a usize>) -> Option<f64> {
        let ious = self.iou_per_class();
        let vals: Vec<f64> = subset
            .into_iter()
            .filter_map(|&c| ious.get(c).copied().flatten())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn miou_all(&self) -> Option<f64> {
        let all: Vec<usize> = (0..self.classes).collect();
        self.miou(&all)
    }

    /// Trace over total; `None` for an empty matrix.
    pub fn overall_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0)
            .then(|| (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64)
    }

    /// `truth\pred` header followed by one row per ground-truth class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\pred");
        for p in 0..self.classes {
            write!(out, ",{p}").unwrap();
        }
        out.push('\n');
        for g in 0..self.classes {
            write!(out, "{g}").unwrap();
            for p in 0..self.classes {
                write!(out, ",{}", self.get(g, p)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::parse_line(1, "empty confusion matrix"))?;
        let classes = header.split(',').count() - 1;
        let mut counts = Vec::with_capacity(classes * classes);
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != classes + 1 {
                return Err(Error::parse_line(i + 2, "wrong number of columns"));
            }
            for f in &fields[1..] {
                counts.push(
                    f.trim()
                        .parse()
                        .map_err(|_| Error::parse_line(i + 2, format!("bad count '{f}'")))?,
                );
            }
        }
        ConfusionMatrix::from_counts(classes, counts)
    }
}

/// Harmonic mean of head and tail mIoU; 0 when either is 0.
pub fn h_iou(miou_head: f64, miou_tail: f64) -> f64 {
    if miou_head <= 0.0 || miou_tail <= 0.0 {
        return 0.0;
    }
    2.0 * miou_head * miou_tail / (miou_head + miou_tail)
}

/// Everything reported for one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub iou: Vec<Option<f64>>,
    pub groups: Vec<Option<Group>>,
    pub overall_accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub miou_head: Option<f64>,
    pub miou_common: Option<f64>,
    pub miou_tail: Option<f64>,
    pub h_iou: Option<f64>,
}

impl MetricReport {
    pub fn new(matrix: &ConfusionMatrix, partition: &ClassPartition) -> Self {
        let miou_head = matrix.miou(partition.head());
        let miou_tail = matrix.miou(partition.tail());
        MetricReport {
            iou: matrix.iou_per_class(),
            groups: (0..matrix.classes())
                .map(|c| partition.group_of(c))
                .collect(),
            overall_accuracy: matrix.overall_accuracy(),
            miou: matrix.miou_all(),
            miou_head,
            miou_common: matrix.miou(partition.common()),
            miou_tail,
            h_iou: miou_head.zip(miou_tail).map(|(h, t)| h_iou(h, t)),
        }
    }

    /// One `class` row per class, then `summary` rows for OA, mIoU, the three
    /// group mIoUs and H-IoU. Undefined values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("kind,name,value,group\n");
        for (c, (iou, g)) in self.iou.iter().zip(&self.groups).enumerate() {
            let g = g.map_or("none", |g| g.as_str());
            writeln!(out, "class,{c},{},{g}", fmt(*iou)).unwrap();
        }
        let rows = [
            ("oa", self.overall_accuracy),
            ("miou", self.miou),
            ("miou_head", self.miou_head),
            ("miou_common", self.miou_common),
            ("miou_tail", self.miou_tail),
            ("h_iou", self.h_iou),
        ];
        for (name, v) in rows {
            writeln!(out, "summary,{name},{},", fmt(v)).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m22() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(2, vec![5, 1, 2, 4]).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let m = ConfusionMatrix::from_predictions(3, &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(m.get(g, p) > 0, g == p);
            }
        }
        let m = ConfusionMatrix::from_predictions(2, &[0, 0, 1], &[0, 1, 1]).unwrap();
        assert_eq!(
            (m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1)),
            (1, 1, 0, 1)
        );
        assert!(ConfusionMatrix::from_predictions(2, &[0, 2], &[0, 1]).is_err());
        assert!(ConfusionMatrix::from_predictions(2, &[0], &[0, 1]).is_err());
    }

    #[test]
    fn iou_examples() {
        let ious = m22().iou_per_class();
        assert_eq!(ious[0], Some(0.625));
        assert!((ious[1].unwrap() - 4.0 / 7.0).abs() < 1e-15);
        let mean = m22().miou_all().unwrap();
        assert!((mean - 0.5982).abs() < 1e-4);

        let diag = ConfusionMatrix::from_counts(3, vec![3, 0, 0, 0, 0, 0, 0, 0, 7]).unwrap();
        assert_eq!(diag.iou_per_class(), vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(diag.miou_all(), Some(1.0));

        // Present in ground truth, never predicted correctly.
        let miss = ConfusionMatrix::from_counts(2, vec![5, 0, 3, 0]).unwrap();
        assert_eq!(miss.iou_per_class()[1], Some(0.0));
        assert_eq!(ConfusionMatrix::new(2).miou_all(), None);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(m22().overall_accuracy(), Some(0.75));
        let wrong = ConfusionMatrix::from_counts(2, vec![0, 3, 4, 0]).unwrap();
        assert_eq!(wrong.overall_accuracy(), Some(0.0));
        assert_eq!(ConfusionMatrix::new(3).overall_accuracy(), None);
    }

    #[test]
    fn h_iou_examples() {
        assert!((h_iou(87.28, 24.32) - 38.04).abs() < 0.01);
        assert!((h_iou(88.14, 29.59) - 44.31).abs() < 0.01);
        assert!((h_iou(0.4, 0.4) - 0.4).abs() < 1e-15);
        assert_eq!(h_iou(0.0, 0.0), 0.0);
        assert_eq!(h_iou(0.5, 0.0), 0.0);
    }

    #[test]
    fn table_regrouping() {
        let head = (91.08 + 78.32 + 95.02) / 3.0;
        assert!((head - 88.14f64).abs() < 0.01);
    }

    #[test]
    fn report_rows_and_csv_roundtrip() {
        let p = ClassPartition::new(2, [0], [], [1]).unwrap();
        let r = MetricReport::new(&m22(), &p);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 + 6);
        assert!(csv.contains("summary,miou_common,NA,"));
        let m = ConfusionMatrix::from_csv(&m22().to_csv()).unwrap();
        assert_eq!(m, m22());
    }

    proptest! {
        #[test]
        fn split_accumulation_is_associative(
            pairs in proptest::collection::vec((0u16..4, 0u16..4), 0..200),
            cut in 0usize..200,
        ) {
            let (g, p): (Vec<u16>, Vec<u16>) = pairs.iter().copied().unzip();
            let whole = ConfusionMatrix::from_predictions(4, &g, &p).unwrap();
            let cut = cut.min(g.len());
            let mut a = ConfusionMatrix::from_predictions(4, &g[..cut], &p[..cut]).unwrap();
            let b = ConfusionMatrix::from_predictions(4, &g[cut..], &p[cut..]).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(&a, &whole);
            prop_assert_eq!(whole.total(), g.len() as u64);
            for c in 0..4 {
                prop_assert_eq!(whole.support(c), g.iter().filter(|&&x| x as usize == c).count() as u64);
                if let Some(iou) = whole.iou_per_class()[c] {
                    let tp = whole.true_positives(c) as f64;
                    let recall = tp / whole.support(c).max(1) as f64;
                    let predicted = tp + whole.false_positives(c) as f64;
                    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
                    prop_assert!(iou <= recall + 1e-15 || whole.support(c) == 0);
                    prop_assert!(iou <= precision + 1e-15 || predicted == 0.0);
                }
            }
        }

        #[test]
        fn h_iou_bounds(h in 0.0f64..1.0, t in 0.0f64..1.0) {
            let v = h_iou(h, t);
            prop_assert!(v >= 0.0);
            prop_assert!(v <= (h + t) / 2.0 + 1e-15);
            prop_assert!(v <= 2.0 * h.min(t) + 1e-15);
        }
    }
}
