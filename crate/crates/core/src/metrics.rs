//! Rank@1 at IoU thresholds and mean IoU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{iou, Moment};

fn check_aligned(preds: &[Moment], gts: &[Moment]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth moments",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions to evaluate".into()));
    }
    Ok(())
}

/// Percentage of queries whose prediction has IoU strictly above `m`.
pub fn rank1_at_iou(preds: &[Moment], gts: &[Moment], m: f64) -> Result<f64> {
    check_aligned(preds, gts)?;
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold {m} outside (0, 1)")));
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| iou(p, g) > m).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Mean IoU as a percentage.
pub fn mean_iou(preds: &[Moment], gts: &[Moment]) -> Result<f64> {
    check_aligned(preds, gts)?;
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| iou(p, g)).sum();
    Ok(100.0 * total / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub queries: usize,
    /// `(threshold, Rank@1 %)` in the order requested.
    pub rank1: Vec<(f64, f64)>,
    pub miou: f64,
}

impl EvalReport {
    pub fn compute(preds: &[Moment], gts: &[Moment], thresholds: &[f64], strategy: &str) -> Result<Self> {
        let rank1 = thresholds
            .iter()
            .map(|&m| rank1_at_iou(preds, gts, m).map(|r| (m, r)))
            .collect::<Result<_>>()?;
        Ok(Self {
            strategy: strategy.to_string(),
            queries: preds.len(),
            rank1,
            miou: mean_iou(preds, gts)?,
        })
    }

    pub fn rank1_at(&self, m: f64) -> Option<f64> {
        self.rank1.iter().find(|(t, _)| (t - m).abs() < 1e-12).map(|r| r.1)
    }

    /// Two-line table: a header with one `R@1,IoU=m` column per threshold
    /// followed by `mIoU`, then the values.
    pub fn to_table(&self) -> String {
        let mut head = format!("{:<10}", "method");
        let mut row = format!("{:<10}", self.strategy);
        for (m, r) in &self.rank1 {
            let _ = write!(head, " {:>12}", format!("R@1,IoU={m}"));
            let _ = write!(row, " {:>12.2}", r);
        }
        let _ = write!(head, " {:>8}", "mIoU");
        let _ = write!(row, " {:>8.2}", self.miou);
        format!("{head}\n{row}\n")
    }
}
