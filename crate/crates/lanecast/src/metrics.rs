//! ADE / FDE computation at 1..6 s horizons and report emission.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;

/// Evaluated horizons, seconds.
pub const HORIZONS_S: [usize; 6] = [1, 2, 3, 4, 5, 6];
/// Frames per second of horizon at the 2 Hz annotation rate.
pub const FRAMES_PER_SECOND: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("horizon of {requested} frames exceeds trajectory length {available}")]
    HorizonTooLong { requested: usize, available: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

/// Mean Euclidean error over predicted frames `1..=h_frames`.
pub fn ade(pred: &[Point2], gt: &[Point2], h_frames: usize) -> Result<f64, MetricsError> {
    check_horizon(pred, gt, h_frames)?;
    let sum: f64 = pred[..h_frames]
        .iter()
        .zip(&gt[..h_frames])
        .map(|(p, q)| p.distance(q))
        .sum();
    Ok(sum / h_frames as f64)
}

/// Euclidean error of the predicted position at frame `h_frames`.
pub fn fde(pred: &[Point2], gt: &[Point2], h_frames: usize) -> Result<f64, MetricsError> {
    check_horizon(pred, gt, h_frames)?;
    Ok(pred[h_frames - 1].distance(&gt[h_frames - 1]))
}

fn check_horizon(pred: &[Point2], gt: &[Point2], h_frames: usize) -> Result<(), MetricsError> {
    let available = pred.len().min(gt.len());
    if h_frames == 0 || h_frames > available {
        return Err(MetricsError::HorizonTooLong {
            requested: h_frames,
            available,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct HorizonErrors {
    pub ade: f64,
    pub fde: f64,
}

/// Mean ADE/FDE over all evaluated agents, one entry per horizon second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizons: [HorizonErrors; 6],
    pub agent_count: usize,
}

impl HorizonReport {
    /// Average the per-agent errors of `(predicted, ground truth)` pairs.
    /// Each trajectory must cover the full 6 s horizon (12 frames).
    pub fn from_pairs(pairs: &[(Vec<Point2>, Vec<Point2>)]) -> Result<HorizonReport, MetricsError> {
        if pairs.is_empty() {
            return Err(MetricsError::EmptyDataset);
        }
        let mut horizons = [HorizonErrors::default(); 6];
        for (pred, gt) in pairs {
            for (i, h) in HORIZONS_S.iter().enumerate() {
                let frames = h * FRAMES_PER_SECOND;
                horizons[i].ade += ade(pred, gt, frames)?;
                horizons[i].fde += fde(pred, gt, frames)?;
            }
        }
        let n = pairs.len() as f64;
        for h in &mut horizons {
            h.ade /= n;
            h.fde /= n;
        }
        Ok(HorizonReport {
            horizons,
            agent_count: pairs.len(),
        })
    }

    pub fn ade_at(&self, seconds: usize) -> f64 {
        self.horizons[seconds - 1].ade
    }

    pub fn fde_at(&self, seconds: usize) -> f64 {
        self.horizons[seconds - 1].fde
    }

    /// CSV header matching `csv_rows`.
    pub fn csv_header() -> String {
        let cols: Vec<String> = HORIZONS_S.iter().map(|h| format!("{h}s")).collect();
        format!("variant,metric,{}\n", cols.join(","))
    }

    /// Two comma-separated rows (ADE and FDE), columns 1s..6s.
    pub fn csv_rows(&self, variant: &str) -> String {
        let fmt = |f: fn(&HorizonErrors) -> f64| {
            self.horizons
                .iter()
                .map(|h| format!("{:.4}", f(h)))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{variant},ADE,{}\n{variant},FDE,{}\n",
            fmt(|h| h.ade),
            fmt(|h| h.fde)
        )
    }
}
