//! Intersection-over-union over the two segmentation classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;

/// `counts[gt][pred]` pixel counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Confusion {
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim("miou", &[pred.len()], &[gt.len()]));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p as usize >= NUM_CLASSES || g as usize >= NUM_CLASSES {
                return Err(Error::Index {
                    op: "miou",
                    index: p.max(g) as usize,
                    bound: NUM_CLASSES,
                });
            }
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.counts[g][p] += other.counts[g][p];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// IoU of class `c`; a class absent from both prediction and ground
    /// truth scores 1.
    pub fn iou(&self, c: usize) -> f64 {
        let tp = self.counts[c][c];
        let gt_total: u64 = self.counts[c].iter().sum();
        let pred_total: u64 = (0..NUM_CLASSES).map(|g| self.counts[g][c]).sum();
        let union = gt_total + pred_total - tp;
        if union == 0 {
            1.0
        } else {
            tp as f64 / union as f64
        }
    }

    pub fn report(&self, samples: usize) -> IoUReport {
        let per_class = [self.iou(0), self.iou(1)];
        IoUReport {
            per_class,
            miou: per_class.iter().sum::<f64>() / NUM_CLASSES as f64,
            confusion: *self,
            samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_class: [f64; NUM_CLASSES],
    pub miou: f64,
    pub confusion: Confusion,
    pub samples: usize,
}

/// Dataset-level IoU: intersections and unions are summed over every pixel
/// of every sample before dividing.
pub fn miou<'a, I>(pairs: I) -> Result<IoUReport>
where
    I: IntoIterator<Item = (&'a [u8], &'a [u8])>,
{
    let mut confusion = Confusion::default();
    let mut samples = 0;
    for (pred, gt) in pairs {
        confusion.add(pred, gt)?;
        samples += 1;
    }
    Ok(confusion.report(samples))
}
