//! Trajectory evaluation metrics: rAE, aAE, rFE, aFE, Corr, FD and FDR.
//!
//! Conventions (all documented choices):
//! - Angle differences are wrapped to (-180, 180] before taking magnitudes.
//! - Frame errors use the four frame corners plus the frame centre.
//! - Absolute errors (aAE, aFE) average over frames 1..N-1; frame 0 is the
//!   shared identity anchor and carries no information.
//! - FDR is in percent of the true centre-path length.
//! - Corr is the cosine between the mean-centred true and predicted
//!   frame-centre point series, taken over all 3N coordinates at once.

use std::io::Write;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{
    grid_local_points, wrap_degrees, GridSampling, ImageGeometry, PoseVector, Trajectory, TransformSE3,
};

/// The seven metrics, serialized with exactly these field names.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct MetricsReport {
    pub rAE: f64,
    pub aAE: f64,
    pub rFE: f64,
    pub aFE: f64,
    pub corr: f64,
    pub fd: f64,
    pub fdr: f64,
}

/// CSV header matching [`MetricsReport::csv_row`].
pub const METRICS_CSV_HEADER: &str = "rAE,aAE,rFE,aFE,corr,fd,fdr";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.rAE, self.aAE, self.rFE, self.aFE, self.corr, self.fd, self.fdr
        )
    }

    /// Writes the flat JSON object (pretty-printed, trailing newline).
    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::format("metrics", e.to_string()))?;
        writeln!(w, "{s}")?;
        Ok(())
    }

    /// Writes header plus the one-line CSV row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{METRICS_CSV_HEADER}")?;
        writeln!(w, "{}", self.csv_row())?;
        Ok(())
    }
}

/// Per-component absolute difference, angles wrapped.
fn component_errors(a: &PoseVector, b: &PoseVector) -> [f64; 6] {
    let (a, b) = (a.to_array(), b.to_array());
    std::array::from_fn(|k| {
        let d = a[k] - b[k];
        if k >= 3 {
            wrap_degrees(d).abs()
        } else {
            d.abs()
        }
    })
}

fn mean_abs(truth: &[PoseVector], pred: &[PoseVector], comps: std::ops::Range<usize>) -> f64 {
    let n = (truth.len() * comps.len()) as f64;
    truth
        .iter()
        .zip(pred)
        .map(|(t, p)| component_errors(t, p)[comps.clone()].iter().sum::<f64>())
        .sum::<f64>()
        / n
}

/// rAE: mean absolute error over all six components of all relative steps.
pub fn relative_error(truth_rel: &[PoseVector], pred_rel: &[PoseVector]) -> Result<f64> {
    if truth_rel.len() != pred_rel.len() || truth_rel.is_empty() {
        return Err(Error::invalid(format!(
            "relative motions: {} true vs {} predicted",
            truth_rel.len(),
            pred_rel.len()
        )));
    }
    Ok(mean_abs(truth_rel, pred_rel, 0..6))
}

/// Mean distance between corresponding grid points of two frame placements.
fn frame_error(a: &TransformSE3, b: &TransformSE3, grid: &[Point3<f64>]) -> f64 {
    grid.iter().map(|p| (a.apply(p) - b.apply(p)).norm()).sum::<f64>() / grid.len() as f64
}

fn check_pair(truth: &Trajectory, pred: &Trajectory) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::invalid(format!(
            "trajectories differ in length: {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::invalid("metrics need at least two frames"));
    }
    Ok(())
}

/// Absolute frame error of every frame (index 0 is always 0).
pub fn absolute_frame_errors(
    truth: &Trajectory,
    pred: &Trajectory,
    geom: &ImageGeometry,
) -> Result<Vec<f64>> {
    check_pair(truth, pred)?;
    geom.validate()?;
    let grid = grid_local_points(geom, GridSampling::CornersAndCenter);
    Ok(truth
        .transforms()
        .iter()
        .zip(pred.transforms())
        .map(|(a, b)| frame_error(a, b, &grid))
        .collect())
}

/// Polyline length of the frame-centre path.
pub fn path_length(traj: &Trajectory, geom: &ImageGeometry) -> f64 {
    let c = geom.center();
    traj.transforms()
        .windows(2)
        .map(|w| (w[1].apply(&c) - w[0].apply(&c)).norm())
        .sum()
}

fn centred_centres(traj: &Trajectory, geom: &ImageGeometry) -> Vec<f64> {
    let c = geom.center();
    let pts: Vec<Point3<f64>> = traj.transforms().iter().map(|t| t.apply(&c)).collect();
    let n = pts.len() as f64;
    let mean = pts
        .iter()
        .fold(nalgebra::Vector3::zeros(), |acc, p| acc + p.coords)
        / n;
    pts.iter()
        .flat_map(|p| {
            let d = p.coords - mean;
            [d.x, d.y, d.z]
        })
        .collect()
}

/// Cosine similarity of the mean-centred centre-point series. Two static
/// trajectories count as perfectly correlated; one static against one moving as 0.
pub fn trajectory_correlation(truth: &Trajectory, pred: &Trajectory, geom: &ImageGeometry) -> f64 {
    let (a, b) = (centred_centres(truth, geom), centred_centres(pred, geom));
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    const TINY: f64 = 1e-12;
    match (na <= TINY, nb <= TINY) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// Translation-only and rotation-only parts of aAE (mm and degrees).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AaeBreakdown {
    pub translation_mm: f64,
    pub rotation_deg: f64,
}

pub fn absolute_error_breakdown(truth: &Trajectory, pred: &Trajectory) -> Result<AaeBreakdown> {
    check_pair(truth, pred)?;
    let (t, p) = (truth.poses(), pred.poses());
    Ok(AaeBreakdown {
        translation_mm: mean_abs(&t[1..], &p[1..], 0..3),
        rotation_deg: mean_abs(&t[1..], &p[1..], 3..6),
    })
}

/// All seven metrics for a predicted trajectory against the truth.
pub fn evaluate(truth: &Trajectory, pred: &Trajectory, geom: &ImageGeometry) -> Result<MetricsReport> {
    check_pair(truth, pred)?;
    geom.validate()?;
    let r_ae = relative_error(&truth.relative_poses(), &pred.relative_poses())?;
    let (tp, pp) = (truth.poses(), pred.poses());
    let a_ae = mean_abs(&tp[1..], &pp[1..], 0..6);
    let grid = grid_local_points(geom, GridSampling::CornersAndCenter);
    let r_fe = truth
        .relatives()
        .iter()
        .zip(pred.relatives())
        .map(|(a, b)| frame_error(a, &b, &grid))
        .sum::<f64>()
        / (truth.len() - 1) as f64;
    let afe_series = absolute_frame_errors(truth, pred, geom)?;
    let a_fe = afe_series[1..].iter().sum::<f64>() / (truth.len() - 1) as f64;
    let fd = *afe_series.last().expect("≥2 frames");
    let length = path_length(truth, geom);
    if length <= 0.0 {
        return Err(Error::invalid("true trajectory has zero length; FDR undefined"));
    }
    Ok(MetricsReport {
        rAE: r_ae,
        aAE: a_ae,
        rFE: r_fe,
        aFE: a_fe,
        corr: trajectory_correlation(truth, pred, geom),
        fd,
        fdr: 100.0 * fd / length,
    })
}
