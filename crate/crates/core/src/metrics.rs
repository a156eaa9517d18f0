//! Displacement errors, drivable-area compliance and batch reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::geo::{from_ego_frame, Trajectory};
use crate::model::CvaeModel;
use crate::scene::SemanticGrid;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trajectory lengths differ: prediction {pred}, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("k = {k} is outside 1..={len}")]
    BadK { k: usize, len: usize },
    #[error("cannot evaluate an empty dataset")]
    Empty,
    #[error("sample {0} has no grid to score compliance against")]
    NoGrid(usize),
    #[error("prediction count {preds} does not match sample count {samples}")]
    PredictionCount { preds: usize, samples: usize },
    #[error("model: {0}")]
    Model(String),
}

fn check(pred: &Trajectory, gt: &Trajectory) -> Result<(), MetricsError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

fn distances<'a>(pred: &'a Trajectory, gt: &'a Trajectory) -> impl Iterator<Item = f64> + 'a {
    pred.waypoints
        .iter()
        .zip(&gt.waypoints)
        .map(|(a, b)| a.distance(*b))
}

/// Mean Euclidean distance over the first `k` waypoint pairs.
pub fn ade(pred: &Trajectory, gt: &Trajectory, k: usize) -> Result<f64, MetricsError> {
    check(pred, gt)?;
    if k == 0 || k > pred.len() {
        return Err(MetricsError::BadK { k, len: pred.len() });
    }
    Ok(distances(pred, gt).take(k).sum::<f64>() / k as f64)
}

/// Distance between the final waypoints.
pub fn fde(pred: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    check(pred, gt)?;
    Ok(distances(pred, gt).last().unwrap_or(0.0))
}

/// Largest waypoint distance along the trajectory.
pub fn mde(pred: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    check(pred, gt)?;
    Ok(distances(pred, gt).fold(0.0, f64::max))
}

/// A trajectory is compliant unless one of its first `k` waypoints falls on
/// a sidewalk or vegetation cell. Unknown and out-of-grid cells are neutral.
/// `pred` must be in the grid's map frame.
pub fn dac(pred: &Trajectory, grid: &SemanticGrid, k: usize) -> bool {
    pred.waypoints
        .iter()
        .take(k)
        .all(|p| !grid.class_at(*p).is_off_road())
}

/// `floor(H / 2)` waypoints.
pub fn half(h: usize) -> usize {
    h / 2
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub ade_full: f64,
    pub ade_half: f64,
    pub fde: f64,
    pub mde: f64,
    pub dac_full: bool,
    pub dac_half: bool,
}

impl SampleMetrics {
    /// Metrics for one prediction; `grid` and `pred` share a frame.
    pub fn compute(pred: &Trajectory, gt: &Trajectory, grid: Option<&SemanticGrid>) -> Result<Self, MetricsError> {
        let h = gt.len();
        let k_half = half(h).max(1);
        Ok(Self {
            ade_full: ade(pred, gt, h)?,
            ade_half: ade(pred, gt, k_half)?,
            fde: fde(pred, gt)?,
            mde: mde(pred, gt)?,
            dac_full: grid.is_none_or(|g| dac(pred, g, h)),
            dac_half: grid.is_none_or(|g| dac(pred, g, k_half)),
        })
    }
}

/// Score ego-frame predictions against a dataset. DAC is checked on the
/// sample's full map when the dataset carries it, else on its crop.
pub fn evaluate_predictions(ds: &Dataset, preds: &[Trajectory]) -> Result<(MetricsReport, Vec<SampleMetrics>), MetricsError> {
    if preds.len() != ds.samples.len() {
        return Err(MetricsError::PredictionCount {
            preds: preds.len(),
            samples: ds.samples.len(),
        });
    }
    let per_sample = ds
        .samples
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(i, (s, pred))| {
            let (grid, pose) = ds.dac_grid(s).ok_or(MetricsError::NoGrid(i))?;
            let mut m = SampleMetrics::compute(pred, &s.gt, None)?;
            let in_grid = Trajectory::new(from_ego_frame(&pose, &pred.waypoints));
            m.dac_full = dac(&in_grid, &grid, s.gt.len());
            m.dac_half = dac(&in_grid, &grid, half(s.gt.len()).max(1));
            Ok(m)
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok((MetricsReport::from_samples(&per_sample)?, per_sample))
}

/// Run argmax inference on every sample and score it.
pub fn evaluate(
    model: &CvaeModel,
    ds: &Dataset,
    threads: usize,
) -> Result<(MetricsReport, Vec<SampleMetrics>, Vec<Trajectory>), MetricsError> {
    if ds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let refs: Vec<_> = ds.samples.iter().collect();
    let preds = model
        .infer_many(&refs, threads)
        .map_err(|e| MetricsError::Model(e.to_string()))?;
    let (report, per_sample) = evaluate_predictions(ds, &preds)?;
    Ok((report, per_sample, preds))
}

/// Means over samples, columns in report order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ade_full: f64,
    pub ade_half: f64,
    pub fde: f64,
    pub mde: f64,
    pub dac_full: f64,
    pub dac_half: f64,
    pub n: usize,
}

/// Order-independent mean: values are summed in sorted order.
fn mean(mut v: Vec<f64>) -> f64 {
    let n = v.len() as f64;
    v.sort_by(f64::total_cmp);
    v.into_iter().sum::<f64>() / n
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 6] = ["ADE_FULL", "ADE_HALF", "FDE", "MDE", "DAC_FULL", "DAC_HALF"];

    pub fn from_samples(samples: &[SampleMetrics]) -> Result<Self, MetricsError> {
        if samples.is_empty() {
            return Err(MetricsError::Empty);
        }
        let col = |f: fn(&SampleMetrics) -> f64| mean(samples.iter().map(f).collect());
        let frac = |f: fn(&SampleMetrics) -> bool| {
            samples.iter().filter(|s| f(s)).count() as f64 / samples.len() as f64
        };
        Ok(Self {
            ade_full: col(|s| s.ade_full),
            ade_half: col(|s| s.ade_half),
            fde: col(|s| s.fde),
            mde: col(|s| s.mde),
            dac_full: frac(|s| s.dac_full),
            dac_half: frac(|s| s.dac_half),
            n: samples.len(),
        })
    }

    fn values(&self) -> [f64; 6] {
        [self.ade_full, self.ade_half, self.fde, self.mde, self.dac_full, self.dac_half]
    }

    pub fn csv_header() -> String {
        let mut s = String::from("label,");
        s.push_str(&Self::COLUMNS.join(","));
        s.push_str(",N");
        s
    }

    pub fn csv_row(&self, label: &str) -> String {
        let mut s = label.to_string();
        for v in self.values() {
            let _ = write!(s, ",{v:.6}");
        }
        let _ = write!(s, ",{}", self.n);
        s
    }

    pub fn to_csv(rows: &[(String, MetricsReport)]) -> String {
        let mut s = Self::csv_header();
        s.push('\n');
        for (label, r) in rows {
            s.push_str(&r.csv_row(label));
            s.push('\n');
        }
        s
    }

    /// Fixed-width text table.
    pub fn to_table(rows: &[(String, MetricsReport)]) -> String {
        let lw = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{:<lw$}", "model");
        for c in Self::COLUMNS {
            let _ = write!(s, "  {c:>8}");
        }
        let _ = writeln!(s, "  {:>6}", "N");
        for (label, r) in rows {
            let _ = write!(s, "{label:<lw$}");
            for v in r.values() {
                let _ = write!(s, "  {v:>8.3}");
            }
            let _ = writeln!(s, "  {:>6}", r.n);
        }
        s
    }
}
