//! Confusion matrix and intersection-over-union scores.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kitti_io::{CLASS_NAMES, IGNORE, NUM_CLASSES};

/// `counts[g][p]`: points with ground truth `g` predicted as `p`.
/// Labeled points predicted IGNORE are kept in a separate per-class tally
/// so they count as misses without becoming false positives of any class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub unassigned: [u64; NUM_CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        ConfusionMatrix {
            counts: [[0; NUM_CLASSES]; NUM_CLASSES],
            unassigned: [0; NUM_CLASSES],
        }
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels(preds: &[u8], gts: &[u8]) -> Result<Self> {
        let mut cm = Self::new();
        cm.update(preds, gts)?;
        Ok(cm)
    }

    pub fn update(&mut self, preds: &[u8], gts: &[u8]) -> Result<()> {
        if preds.len() != gts.len() {
            return Err(Error::argument(format!(
                "{} predictions for {} ground-truth labels",
                preds.len(),
                gts.len()
            )));
        }
        for (i, (&p, &g)) in preds.iter().zip(gts).enumerate() {
            if g == IGNORE {
                continue;
            }
            let gi = usize::from(g);
            if gi >= NUM_CLASSES {
                return Err(Error::Data {
                    index: i,
                    message: format!("ground-truth id {g} out of range"),
                });
            }
            if p == IGNORE {
                self.unassigned[gi] += 1;
            } else if usize::from(p) < NUM_CLASSES {
                self.counts[gi][usize::from(p)] += 1;
            } else {
                return Err(Error::Data {
                    index: i,
                    message: format!("predicted id {p} out of range"),
                });
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.counts[g][p] += other.counts[g][p];
            }
            self.unassigned[g] += other.unassigned[g];
        }
    }

    /// Number of evaluated points.
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unassigned.iter().sum::<u64>()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..NUM_CLASSES).map(|g| self.counts[g][c]).sum::<u64>() - self.counts[c][c]
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() - self.counts[c][c] + self.unassigned[c]
    }

    /// Per-class IoU; `None` for classes absent from both ground truth and
    /// predictions.
    pub fn iou(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|c| {
            let tp = self.true_positives(c);
            let denom = tp + self.false_positives(c) + self.false_negatives(c);
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
    }

    /// Mean over the defined classes; `None` when no class is defined.
    pub fn miou(&self) -> Option<f64> {
        mean_defined(&self.iou())
    }

    /// Fraction of evaluated points predicted correctly.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum::<u64>() as f64 / total as f64)
    }

    pub fn to_text_table(&self) -> String {
        let iou = self.iou();
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8}", "class", "iou");
        for (c, v) in iou.iter().enumerate() {
            let cell = v.map_or("n/a".to_string(), |v| format!("{:.4}", v));
            let _ = writeln!(s, "{:<16} {:>8}", CLASS_NAMES[c], cell);
        }
        let m = self.miou().map_or("n/a".to_string(), |v| format!("{:.4}", v));
        let _ = writeln!(s, "{:<16} {:>8}", "mIoU", m);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou\n");
        for (c, v) in self.iou().iter().enumerate() {
            let _ = writeln!(s, "{},{}", CLASS_NAMES[c], v.map_or(String::new(), |v| v.to_string()));
        }
        let _ = writeln!(s, "mIoU,{}", self.miou().map_or(String::new(), |v| v.to_string()));
        s
    }
}

pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}
