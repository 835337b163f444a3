//! Scene-completion metrics: occupancy IoU, per-class IoU and mIoU.
//!
//! Voxels are pooled across frames. Ground-truth unknown (255) voxels are
//! skipped; every other voxel counts, observed or occluded.

use std::fmt::Write as _;

use thiserror::Error;

use crate::voxel::{LabelGrid, CLASS_NAMES, NUM_CLASSES, NUM_SEMANTIC, UNKNOWN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("grid dims differ: prediction {pred:?}, ground truth {gt:?}")]
    DimMismatch { pred: [usize; 3], gt: [usize; 3] },
    #[error("invalid prediction {value} at voxel {index}; predictions must be 0..=11")]
    InvalidPrediction { index: usize, value: u8 },
}

/// Counts indexed `(gt, pred)` over labels 0..=11.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt][pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn counted(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<(), MetricsError> {
        let (pd, gd) = (pred.spec().dims(), gt.spec().dims());
        if pd != gd {
            return Err(MetricsError::DimMismatch { pred: pd, gt: gd });
        }
        self.accumulate_labels(pred.labels(), gt.labels())
    }

    /// Validates the whole prediction before touching any count. Predictions
    /// under unknown ground truth are ignored, whatever their value.
    pub fn accumulate_labels(&mut self, pred: &[u8], gt: &[u8]) -> Result<(), MetricsError> {
        assert_eq!(pred.len(), gt.len(), "label slices must have equal length");
        if let Some((index, &value)) = pred
            .iter()
            .zip(gt)
            .enumerate()
            .find(|(_, (&p, &g))| g != UNKNOWN && p as usize >= NUM_CLASSES)
            .map(|(i, (p, _))| (i, p))
        {
            return Err(MetricsError::InvalidPrediction { index, value });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == UNKNOWN {
                self.ignored += 1;
            } else {
                self.counts[g as usize][p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
        self.ignored += other.ignored;
    }

    /// IoU of label `c`; `None` when the class is absent from both prediction and ground truth.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let tp = self.counts[c][c];
        let fp: u64 = (0..NUM_CLASSES)
            .filter(|&g| g != c)
            .map(|g| self.counts[g][c])
            .sum();
        let fn_: u64 = (0..NUM_CLASSES)
            .filter(|&p| p != c)
            .map(|p| self.counts[c][p])
            .sum();
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// Mean over the 11 semantic classes with a fixed denominator; undefined classes add 0.
    pub fn miou(&self) -> f64 {
        let sum: f64 = (1..=NUM_SEMANTIC).filter_map(|c| self.class_iou(c)).sum();
        sum / NUM_SEMANTIC as f64
    }

    /// IoU of the occupied (semantic) set against free space.
    pub fn occupancy_iou(&self) -> Option<f64> {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                let n = self.counts[g][p];
                match (g != 0, p != 0) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fn_ += n,
                    (false, false) => {}
                }
            }
        }
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }
}

/// One table row: a method's scores as fractions in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub name: String,
    pub iou: Option<f64>,
    pub class_iou: [Option<f64>; NUM_SEMANTIC],
    pub miou: f64,
}

impl MethodResult {
    pub fn from_confusion(name: impl Into<String>, conf: &ConfusionMatrix) -> Self {
        Self {
            name: name.into(),
            iou: conf.occupancy_iou(),
            class_iou: std::array::from_fn(|i| conf.class_iou(i + 1)),
            miou: conf.miou(),
        }
    }

    fn cells(&self, undefined: &str) -> Vec<String> {
        let pct = |x: Option<f64>| {
            x.map_or_else(|| undefined.to_string(), |v| format!("{:.2}", 100.0 * v))
        };
        std::iter::once(pct(self.iou))
            .chain(self.class_iou.iter().map(|&c| pct(c)))
            .chain(std::iter::once(pct(Some(self.miou))))
            .collect()
    }
}

/// Column headers after the method name.
pub fn report_columns() -> Vec<&'static str> {
    std::iter::once("IoU")
        .chain(CLASS_NAMES)
        .chain(std::iter::once("mIoU"))
        .collect()
}

/// Right-aligned text table; percentages with two decimals, `—` for undefined.
pub fn format_table(rows: &[MethodResult]) -> String {
    let header: Vec<String> = std::iter::once("Method".to_string())
        .chain(report_columns().into_iter().map(String::from))
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            std::iter::once(r.name.clone())
                .chain(r.cells("—"))
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&body) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| {
                let pad = w - cell.chars().count();
                if i == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
    }
    out
}

/// Same values as [`format_table`], comma separated; undefined cells are empty.
pub fn format_csv(rows: &[MethodResult]) -> String {
    let mut out = String::from("method");
    for c in report_columns() {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.name.replace(',', ";"));
        for cell in r.cells("") {
            out.push(',');
            out.push_str(&cell);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::GridSpec;
    use proptest::prelude::*;

    fn grid(labels: &[u8]) -> LabelGrid {
        LabelGrid::new(
            GridSpec::new([1, 1, labels.len()], [0.0; 3], 1.0).unwrap(),
            labels.to_vec(),
        )
        .unwrap()
    }

    fn hand_fixture() -> ConfusionMatrix {
        let mut conf = ConfusionMatrix::new();
        conf.accumulate(&grid(&[1, 0, 0, 0]), &grid(&[1, 1, 0, 255]))
            .unwrap();
        conf
    }

    #[test]
    fn hand_fixture_counts() {
        let conf = hand_fixture();
        assert_eq!(conf.count(1, 1), 1);
        assert_eq!(conf.count(1, 0), 1);
        assert_eq!(conf.count(0, 0), 1);
        assert_eq!(conf.counted(), 3);
        assert_eq!(conf.ignored(), 1);
        assert_eq!(conf.class_iou(1), Some(0.5));
        assert_eq!(conf.class_iou(2), None);
        assert_eq!(conf.occupancy_iou(), Some(0.5));
        assert!((conf.miou() - 0.5 / 11.0).abs() < 1e-15);
        assert!((conf.miou() - 0.04545).abs() < 1e-5);
    }

    #[test]
    fn perfect_prediction() {
        let labels: Vec<u8> = (0..=11).chain([255, 3]).collect();
        let mut conf = ConfusionMatrix::new();
        conf.accumulate(
            &grid(
                &labels
                    .iter()
                    .map(|&l| if l == 255 { 0 } else { l })
                    .collect::<Vec<_>>(),
            ),
            &grid(&labels),
        )
        .unwrap();
        for c in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                if c != p {
                    assert_eq!(conf.count(c, p), 0);
                }
            }
        }
        for c in 1..=11 {
            assert_eq!(conf.class_iou(c), Some(1.0));
        }
        assert_eq!(conf.miou(), 1.0);
        assert_eq!(conf.occupancy_iou(), Some(1.0));
        let row = MethodResult::from_confusion("oracle", &conf);
        let csv = format_csv(&[row]);
        let values: Vec<&str> = csv.lines().nth(1).unwrap().split(',').skip(1).collect();
        assert_eq!(values, vec!["100.00"; 13]);
    }

    #[test]
    fn all_free_occupancy_undefined() {
        let mut conf = ConfusionMatrix::new();
        conf.accumulate(&grid(&[0, 0]), &grid(&[0, 0])).unwrap();
        assert_eq!(conf.occupancy_iou(), None);
        assert_eq!(conf.miou(), 0.0);
    }

    #[test]
    fn errors() {
        let mut conf = ConfusionMatrix::new();
        assert!(matches!(
            conf.accumulate(&grid(&[0, 255]), &grid(&[0, 0])),
            Err(MetricsError::InvalidPrediction {
                index: 1,
                value: 255
            })
        ));
        assert_eq!(conf, ConfusionMatrix::new());
        conf.accumulate(&grid(&[0, 255]), &grid(&[0, 255])).unwrap();
        assert_eq!((conf.counted(), conf.ignored()), (1, 1));
        assert!(matches!(
            conf.accumulate(&grid(&[0]), &grid(&[0, 0])),
            Err(MetricsError::DimMismatch { .. })
        ));
    }

    #[test]
    fn column_order() {
        assert_eq!(
            report_columns(),
            vec![
                "IoU",
                "ceiling",
                "floor",
                "wall",
                "window",
                "chair",
                "bed",
                "sofa",
                "table",
                "tvs",
                "furniture",
                "objects",
                "mIoU"
            ]
        );
    }

    #[test]
    fn table_and_csv_agree() {
        let conf = hand_fixture();
        let rows = [MethodResult::from_confusion("hand", &conf)];
        let table = format_table(&rows);
        let csv = format_csv(&rows);
        let t_cells: Vec<&str> = table
            .lines()
            .nth(1)
            .unwrap()
            .split_whitespace()
            .skip(1)
            .collect();
        let c_cells: Vec<&str> = csv.lines().nth(1).unwrap().split(',').skip(1).collect();
        assert_eq!(t_cells.len(), 13);
        for (t, c) in t_cells.iter().zip(&c_cells) {
            if c.is_empty() {
                assert_eq!(*t, "—");
            } else {
                assert_eq!(t.parse::<f64>().unwrap(), c.parse::<f64>().unwrap());
            }
        }
        assert_eq!(t_cells[0], "50.00");
        assert_eq!(t_cells[1], "50.00");
        assert_eq!(t_cells[12], "4.55");
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1usize..64).prop_flat_map(|n| {
            let gt = prop::collection::vec(
                prop::sample::select((0u8..=11).chain([255]).collect::<Vec<_>>()),
                n,
            );
            let pred = prop::collection::vec(0u8..=11, n);
            (pred, gt)
        })
    }

    proptest! {
        #[test]
        fn accumulation_is_additive((p1, g1) in arb_pair(), (p2, g2) in arb_pair()) {
            let mut a = ConfusionMatrix::new();
            a.accumulate_labels(&p1, &g1).unwrap();
            let mut b = ConfusionMatrix::new();
            b.accumulate_labels(&p2, &g2).unwrap();
            let mut joint = ConfusionMatrix::new();
            joint.accumulate_labels(&[p1.clone(), p2.clone()].concat(), &[g1.clone(), g2.clone()].concat()).unwrap();
            let mut ab = a;
            ab.merge(&b);
            let mut ba = b;
            ba.merge(&a);
            prop_assert_eq!(ab, joint);
            prop_assert_eq!(ba, joint);
            prop_assert_eq!(joint.counted() + joint.ignored(), (p1.len() + p2.len()) as u64);
        }

        #[test]
        fn iou_symmetric_and_bounded(pred in prop::collection::vec(0u8..=11, 40), gt in prop::collection::vec(0u8..=11, 40)) {
            let mut fwd = ConfusionMatrix::new();
            fwd.accumulate_labels(&pred, &gt).unwrap();
            let mut rev = ConfusionMatrix::new();
            rev.accumulate_labels(&gt, &pred).unwrap();
            for c in 0..NUM_CLASSES {
                prop_assert_eq!(fwd.class_iou(c), rev.class_iou(c));
                if let Some(v) = fwd.class_iou(c) {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            prop_assert!((0.0..=1.0).contains(&fwd.miou()));
            prop_assert_eq!(fwd.occupancy_iou(), rev.occupancy_iou());
        }

        #[test]
        fn predictions_at_unknown_gt_ignored((pred, gt) in arb_pair(), alt in prop::collection::vec(0u8..=11, 64)) {
            let mut changed = pred.clone();
            for (i, g) in gt.iter().enumerate() {
                if *g == UNKNOWN {
                    changed[i] = alt[i];
                }
            }
            let mut a = ConfusionMatrix::new();
            a.accumulate_labels(&pred, &gt).unwrap();
            let mut b = ConfusionMatrix::new();
            b.accumulate_labels(&changed, &gt).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
